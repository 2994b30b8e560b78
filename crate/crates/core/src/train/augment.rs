use rand::Rng;

use crate::degrade::DatasetSample;
use crate::tensor::{Real, Tensor};

/// Horizontal flip (optional) followed by `k` counter-clockwise quarter
/// turns, applied to the last two axes.
pub fn flip_rot<T: Real>(t: &Tensor<T>, flip: bool, k: usize) -> Tensor<T> {
    let r = t.rank();
    assert!(r >= 2, "flip_rot needs at least two axes");
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    let planes = t.numel() / (h * w).max(1);
    let k = k % 4;
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel());
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                // Inverse map from output (i, j) to the flipped input.
                let (y, x) = match k {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let x = if flip { w - 1 - x } else { x };
                out.push(plane[y * w + x]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_vec(shape, out)
}

/// Random flip and rotation, shared by the images and the masks.
pub fn augment<R: Rng>(sample: &DatasetSample, rng: &mut R) -> DatasetSample {
    let flip: bool = rng.gen();
    let k = rng.gen_range(0..4);
    augment_with(sample, flip, k)
}

pub fn augment_with(sample: &DatasetSample, flip: bool, k: usize) -> DatasetSample {
    DatasetSample {
        degraded: flip_rot(&sample.degraded, flip, k),
        clean: flip_rot(&sample.clean, flip, k),
        masks: sample.masks.transformed(flip, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([2, h, w], |i| i as f32)
    }

    #[test]
    fn flips_and_turns_compose_to_identity() {
        let t = grid(3, 5);
        assert_eq!(flip_rot(&flip_rot(&t, true, 0), true, 0), t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = flip_rot(&r, false, 1);
        }
        assert_eq!(r, t);
        assert_eq!(flip_rot(&t, false, 1).shape(), &[2, 5, 3]);
    }

    #[test]
    fn marked_corner_follows_coordinate_oracle() {
        let (h, w) = (4, 6);
        let mut t = Tensor::<f32>::zeros([1, h, w]);
        let (y0, x0) = (0, 1);
        t.data_mut()[y0 * w + x0] = 1.0;
        for flip in [false, true] {
            for k in 0..4 {
                let out = flip_rot(&t, flip, k);
                // Oracle: flip x -> w-1-x, then each CCW turn maps (y, x) in
                // an HxW frame to (W-1-x, y) in a WxH frame.
                let (mut y, mut x, mut ch, mut cw) = (y0, if flip { w - 1 - x0 } else { x0 }, h, w);
                for _ in 0..k {
                    (y, x) = (cw - 1 - x, y);
                    (ch, cw) = (cw, ch);
                }
                assert_eq!(out.shape(), &[1, ch, cw]);
                let hot: Vec<usize> = out.data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
                assert_eq!(hot, vec![y * cw + x], "flip {} k {}", flip, k);
            }
        }
    }
}
