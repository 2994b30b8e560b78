use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    File,
    Naive,
    External,
}

/// Binary instance masks over one image, each a `[H,W]` tensor of 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Tensor<f32>>,
    pub source: MaskSource,
}

/// One mask in run-length form. Runs alternate zeros and ones, starting
/// with a (possibly empty) run of zeros, in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub rle: Vec<usize>,
}

impl MaskSet {
    pub fn empty(height: usize, width: usize, source: MaskSource) -> Self {
        MaskSet { height, width, masks: vec![], source }
    }

    pub fn new(height: usize, width: usize, masks: Vec<Tensor<f32>>, source: MaskSource) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            if m.shape() != [height, width] {
                return Err(Error::shape(
                    "mask_set",
                    format!("mask {} is {:?}, expected [{}, {}]", i, m.shape(), height, width),
                ));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid("mask_set", format!("mask {} is not binary", i)));
            }
        }
        Ok(MaskSet { height, width, masks, source })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Builds a mask set from per-pixel labels `0..count`.
    pub fn from_labels(height: usize, width: usize, labels: &[usize], count: usize, source: MaskSource) -> Self {
        let mut masks = vec![vec![0.0f32; height * width]; count];
        for (p, &l) in labels.iter().enumerate() {
            masks[l][p] = 1.0;
        }
        let masks = masks.into_iter().map(|m| Tensor::from_vec([height, width], m)).collect();
        MaskSet { height, width, masks, source }
    }

    pub fn to_rle(&self) -> Vec<RleMask> {
        self.masks.iter().map(|m| encode_rle(m, self.height, self.width)).collect()
    }

    pub fn from_rle(rle: &[RleMask], source: MaskSource) -> Result<Self> {
        let Some(first) = rle.first() else {
            return Err(Error::invalid("masks", "an empty mask list carries no image size"));
        };
        let (h, w) = (first.height, first.width);
        let masks = rle.iter().map(|r| decode_rle(r, h, w)).collect::<Result<Vec<_>>>()?;
        MaskSet::new(h, w, masks, source)
    }

    /// Parses a `masks.json` document. An empty list yields an empty set
    /// sized `height x width`.
    pub fn from_json(text: &str, height: usize, width: usize, source: MaskSource) -> Result<Self> {
        let rle: Vec<RleMask> = serde_json::from_str(text)?;
        if rle.is_empty() {
            return Ok(MaskSet::empty(height, width, source));
        }
        let set = MaskSet::from_rle(&rle, source)?;
        if (set.height, set.width) != (height, width) {
            return Err(Error::shape(
                "masks",
                format!("masks are {}x{}, image is {}x{}", set.height, set.width, height, width),
            ));
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_rle())?)
    }

    /// Rotates every mask by `k` quarter turns counter-clockwise, after an
    /// optional horizontal flip.
    pub fn transformed(&self, flip: bool, k: usize) -> MaskSet {
        let masks: Vec<Tensor<f32>> = self
            .masks
            .iter()
            .map(|m| {
                let t = m.reshape([1, self.height, self.width]).expect("mask layout");
                let t = crate::train::augment::flip_rot(&t, flip, k);
                let (h, w) = (t.shape()[1], t.shape()[2]);
                t.reshape([h, w]).expect("mask layout")
            })
            .collect();
        let (h, w) = if k % 2 == 1 { (self.width, self.height) } else { (self.height, self.width) };
        MaskSet { height: h, width: w, masks, source: self.source }
    }
}

pub fn encode_rle(mask: &Tensor<f32>, height: usize, width: usize) -> RleMask {
    let mut rle = Vec::new();
    let mut current = 0.0f32;
    let mut run = 0usize;
    for &v in mask.data() {
        if v == current {
            run += 1;
        } else {
            rle.push(run);
            current = v;
            run = 1;
        }
    }
    rle.push(run);
    RleMask { height, width, rle }
}

pub fn decode_rle(r: &RleMask, height: usize, width: usize) -> Result<Tensor<f32>> {
    if (r.height, r.width) != (height, width) {
        return Err(Error::shape("rle", format!("mask {}x{} in a {}x{} set", r.height, r.width, height, width)));
    }
    let total: usize = r.rle.iter().sum();
    if total != height * width {
        return Err(Error::invalid("rle", format!("runs sum to {}, expected {}", total, height * width)));
    }
    let mut data = Vec::with_capacity(total);
    for (i, &run) in r.rle.iter().enumerate() {
        let v = if i % 2 == 0 { 0.0 } else { 1.0 };
        data.extend(std::iter::repeat(v).take(run));
    }
    Ok(Tensor::from_vec([height, width], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_starts_with_zeros() {
        let m = Tensor::from_vec([2, 3], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let r = encode_rle(&m, 2, 3);
        assert_eq!(r.rle, vec![0, 2, 2, 2]);
        assert_eq!(decode_rle(&r, 2, 3).unwrap(), m);
        let z = Tensor::zeros([2, 2]);
        assert_eq!(encode_rle(&z, 2, 2).rle, vec![4]);
    }

    #[test]
    fn bad_runs_rejected() {
        let r = RleMask { height: 2, width: 2, rle: vec![1, 2] };
        assert!(decode_rle(&r, 2, 2).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let set = MaskSet::from_labels(2, 2, &[0, 1, 1, 0], 2, MaskSource::Naive);
        let json = set.to_json().unwrap();
        let back = MaskSet::from_json(&json, 2, 2, MaskSource::File).unwrap();
        assert_eq!(back.masks, set.masks);
        assert!(MaskSet::from_json(&json, 3, 2, MaskSource::File).is_err());
        assert!(MaskSet::from_json("[]", 4, 4, MaskSource::File).unwrap().is_empty());
    }
}
