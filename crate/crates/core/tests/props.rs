use proptest::prelude::*;
use sgsformer::attention::topk_keep;
use sgsformer::seg::{compose_seg_map, decode_rle, encode_rle, naive_segment};
use sgsformer::train::augment::flip_rot;
use sgsformer::train::{cyclic_lr, psnr, ssim};
use sgsformer::Tensor;

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(0.0f32..1.0, 3 * h * w).prop_map(move |v| Tensor::from_vec([3, h, w], v))
}

fn pair() -> impl Strategy<Value = (Tensor<f32>, Tensor<f32>)> {
    (11usize..18, 11usize..18).prop_flat_map(|(h, w)| (image(h, w), image(h, w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_symmetric((a, b) in pair()) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
    }

    #[test]
    fn cyclic_lr_stays_in_range(step in 0u64..100_000, period in 1u64..5000, lo in 1e-7f64..1e-4, span in 0.0f64..1e-3) {
        let hi = lo + span;
        let lr = cyclic_lr(step, lo, hi, period);
        prop_assert!(lr >= lo * (1.0 - 1e-12) && lr <= hi * (1.0 + 1e-12));
        prop_assert_eq!(cyclic_lr(step % period, lo, hi, period), lr);
    }

    #[test]
    fn flip_rot_is_invertible(h in 1usize..9, w in 1usize..9, flip: bool, k in 0usize..4) {
        let t = Tensor::from_fn([2, h, w], |i| i as f32);
        let out = flip_rot(&t, flip, k);
        let back = flip_rot(&flip_rot(&out, false, 4 - k), flip, 0);
        prop_assert_eq!(back, t);
    }

    #[test]
    fn augmentation_preserves_psnr((a, b) in pair(), flip: bool, k in 0usize..4) {
        let p0 = psnr(&a, &b).unwrap();
        let p1 = psnr(&flip_rot(&a, flip, k), &flip_rot(&b, flip, k)).unwrap();
        prop_assert!((p0 - p1).abs() < 1e-9);
    }

    #[test]
    fn rle_roundtrip(h in 1usize..12, w in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
        let mask = Tensor::from_fn([h, w], |i| if bits[i] { 1.0f32 } else { 0.0 });
        let r = encode_rle(&mask, h, w);
        prop_assert_eq!(r.rle.iter().sum::<usize>(), h * w);
        prop_assert_eq!(decode_rle(&r, h, w).unwrap(), mask);
    }

    #[test]
    fn topk_keeps_exactly_k(rows in 1usize..5, m in 1usize..24, frac in 0.0f64..1.0, levels in 1u32..6,
                            vals in prop::collection::vec(0u32..100, 120)) {
        let k = 1 + ((m - 1) as f64 * frac) as usize;
        let logits = Tensor::from_fn([rows, m], |i| (vals[i] % levels) as f32);
        let keep = topk_keep(&logits, k).unwrap();
        for (r, row) in keep.chunks(m).enumerate() {
            prop_assert_eq!(row.iter().filter(|&&b| b).count(), k);
            let kept_min = (0..m).filter(|&j| row[j]).map(|j| logits.data()[r * m + j]).fold(f32::INFINITY, f32::min);
            let dropped_max = (0..m).filter(|&j| !row[j]).map(|j| logits.data()[r * m + j]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(kept_min >= dropped_max);
        }
    }

    #[test]
    fn compose_alpha_one_is_identity(img in image(10, 13), threshold in 0.05f64..0.6) {
        let masks = naive_segment(&img, threshold).unwrap();
        prop_assert_eq!(compose_seg_map(&img, &masks, 1.0).unwrap(), img);
    }
}
