//! Color-quantized connected-component segmentation.

use std::collections::{BTreeSet, HashMap, VecDeque};

use super::masks::{MaskSet, MaskSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Components smaller than this are merged into a neighbor.
pub const MIN_COMPONENT: usize = 16;

fn quantize(v: f32, levels: usize) -> usize {
    ((v.clamp(0.0, 1.0) * levels as f32) as usize).min(levels - 1)
}

/// Labels 4-connected runs of equal keys. Labels are assigned in raster
/// order of each component's first pixel.
pub fn label_components(keys: &[u32], h: usize, w: usize) -> (Vec<usize>, usize) {
    const NONE: usize = usize::MAX;
    let mut labels = vec![NONE; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != NONE {
            continue;
        }
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if labels[q] == NONE && keys[q] == keys[start] {
                    labels[q] = count;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        count += 1;
    }
    (labels, count)
}

/// Repeatedly merges the smallest component below `min_size` (lowest label
/// on ties) into the neighbor sharing the longest border (lowest label on
/// ties). Returns compact labels, renumbered in raster order.
pub fn merge_small(labels: &mut [usize], count: usize, h: usize, w: usize, min_size: usize) -> usize {
    let mut size = vec![0usize; count];
    for &l in labels.iter() {
        size[l] += 1;
    }
    let mut adj: Vec<HashMap<usize, usize>> = vec![HashMap::new(); count];
    for y in 0..h {
        for x in 0..w {
            let a = labels[y * w + x];
            if x + 1 < w {
                let b = labels[y * w + x + 1];
                if a != b {
                    *adj[a].entry(b).or_default() += 1;
                    *adj[b].entry(a).or_default() += 1;
                }
            }
            if y + 1 < h {
                let b = labels[(y + 1) * w + x];
                if a != b {
                    *adj[a].entry(b).or_default() += 1;
                    *adj[b].entry(a).or_default() += 1;
                }
            }
        }
    }
    let mut parent: Vec<usize> = (0..count).collect();
    let mut small: BTreeSet<(usize, usize)> = (0..count).filter(|&l| size[l] < min_size).map(|l| (size[l], l)).collect();
    while let Some(&(s, a)) = small.iter().next() {
        small.remove(&(s, a));
        let Some(b) = adj[a]
            .iter()
            .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
            .map(|(&l, _)| l)
        else {
            continue; // the only component left
        };
        let moved = std::mem::take(&mut adj[a]);
        for (n, c) in moved {
            adj[n].remove(&a);
            if n != b {
                *adj[n].entry(b).or_default() += c;
                *adj[b].entry(n).or_default() += c;
            }
        }
        if size[b] < min_size {
            small.remove(&(size[b], b));
        }
        size[b] += s;
        size[a] = 0;
        if size[b] < min_size {
            small.insert((size[b], b));
        }
        parent[a] = b;
    }
    let root = |mut l: usize| {
        while parent[l] != l {
            l = parent[l];
        }
        l
    };
    let mut remap: HashMap<usize, usize> = HashMap::new();
    for l in labels.iter_mut() {
        let r = root(*l);
        let next = remap.len();
        *l = *remap.entry(r).or_insert(next);
    }
    remap.len()
}

/// Segments an image `[3,H,W]` in `[0,1]`: each channel is quantized to
/// `ceil(1/threshold)` levels, equal-color 4-connected regions become
/// components, and components under 16 pixels are merged into neighbors.
/// The returned masks partition the image.
pub fn naive_segment(img: &Tensor<f32>, threshold: f64) -> Result<MaskSet> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape("naive_segment", format!("expected [3,H,W], got {:?}", img.shape())));
    };
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("naive_segment", format!("threshold {} outside (0, 1]", threshold)));
    }
    let levels = (1.0 / threshold).ceil() as usize;
    let d = img.data();
    let hw = h * w;
    let keys: Vec<u32> = (0..hw)
        .map(|p| {
            let q = |c: usize| quantize(d[c * hw + p], levels) as u32;
            (q(0) * levels as u32 + q(1)) * levels as u32 + q(2)
        })
        .collect();
    let (mut labels, count) = label_components(&keys, h, w);
    let count = merge_small(&mut labels, count, h, w, MIN_COMPONENT);
    Ok(MaskSet::from_labels(h, w, &labels, count, MaskSource::Naive))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_one_mask() {
        let img = Tensor::full([3, 8, 8], 0.3);
        let m = naive_segment(&img, 0.25).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.masks[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn halves_are_two_masks() {
        let (h, w) = (8, 10);
        let img = Tensor::from_fn([3, h, w], |i| if i % w >= w / 2 { 1.0 } else { 0.0 });
        let m = naive_segment(&img, 0.5).unwrap();
        assert_eq!(m.len(), 2);
        for mask in &m.masks {
            assert_eq!(mask.sum() as usize, h * w / 2);
        }
    }

    #[test]
    fn tiny_speck_is_absorbed() {
        let mut img = Tensor::<f32>::zeros([3, 8, 8]);
        for c in 0..3 {
            img.data_mut()[c * 64 + 9] = 1.0;
        }
        let m = naive_segment(&img, 0.5).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn bad_threshold() {
        assert!(naive_segment(&Tensor::zeros([3, 2, 2]), 0.0).is_err());
        assert!(naive_segment(&Tensor::zeros([1, 2, 2]), 0.5).is_err());
    }
}
