//! Paired dataset synthesis and loading.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::psf::Psf;
use super::simulate::{degrade_hdr, degrade_simple, hdr_reference, DegradeModel, DegradeParams};
use crate::container::{Container, Entry};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::imageio;
use crate::seg::{naive_segment, MaskSet, MaskSource};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub masks: MaskSet,
}

impl DatasetSample {
    pub fn new(degraded: Tensor<f32>, clean: Tensor<f32>, masks: MaskSet) -> Result<Self> {
        let &[3, h, w] = clean.shape() else {
            return Err(Error::shape("sample", format!("expected [3,H,W], got {:?}", clean.shape())));
        };
        if degraded.shape() != clean.shape() {
            return Err(Error::shape("sample", format!("degraded {:?} vs clean {:?}", degraded.shape(), clean.shape())));
        }
        if (masks.height, masks.width) != (h, w) {
            return Err(Error::shape("sample", format!("masks {}x{} vs image {}x{}", masks.height, masks.width, h, w)));
        }
        Ok(DatasetSample { degraded, clean, masks })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Procedural,
    ImageDir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub masks: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub source: String,
    pub count: usize,
    pub patch: usize,
    pub params: DegradeParams,
    pub samples: Vec<ManifestEntry>,
}

/// Generator for sample `index`: independent streams of one seeded
/// ChaCha8 source, so any sample can be produced in isolation.
pub fn sample_rng(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index as u64) << 2 | purpose);
    rng
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// A `[3,size,size]` composition of a color gradient, filled shapes and
/// short thin strokes.
pub fn procedural_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f32> {
    let s = size as f32;
    let hw = size * size;
    let mut img = vec![0.0f32; 3 * hw];
    let (c0, c1) = (color(rng), color(rng));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy) + 0.75) / 1.5;
            for c in 0..3 {
                img[c * hw + y * size + x] = lerp(c0[c], c1[c], t.clamp(0.0, 1.0));
            }
        }
    }
    let paint = |img: &mut [f32], x: usize, y: usize, col: &[f32; 3]| {
        for c in 0..3 {
            img[c * hw + y * size + x] = col[c];
        }
    };
    for _ in 0..rng.gen_range(2..6) {
        let col = color(rng);
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let r = rng.gen_range(0.08..0.3) * s;
        let circle: bool = rng.gen();
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if circle { fx * fx + fy * fy <= r * r } else { fx.abs() <= r && fy.abs() <= 0.6 * r };
                if inside {
                    paint(&mut img, x, y, &col);
                }
            }
        }
    }
    // Text-like strokes: short polylines one or two pixels wide.
    for _ in 0..rng.gen_range(3..9) {
        let col = color(rng);
        let (mut x, mut y) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let width = rng.gen_range(1..=2);
        for _ in 0..rng.gen_range(2..5) {
            let (tx, ty) = (
                (x + rng.gen_range(-0.2..0.2) * s).clamp(0.0, s - 1.0),
                (y + rng.gen_range(-0.2..0.2) * s).clamp(0.0, s - 1.0),
            );
            let steps = ((tx - x).abs().max((ty - y).abs()) as usize).max(1);
            for k in 0..=steps {
                let f = k as f32 / steps as f32;
                let (px, py) = (lerp(x, tx, f) as usize, lerp(y, ty, f) as usize);
                for oy in 0..width {
                    for ox in 0..width {
                        if px + ox < size && py + oy < size {
                            paint(&mut img, px + ox, py + oy, &col);
                        }
                    }
                }
            }
            (x, y) = (tx, ty);
        }
    }
    Tensor::from_vec([3, size, size], img)
}

/// Adds a few bright light sources so values exceed 1.
fn hdr_scene(rng: &mut ChaCha8Rng, base: &Tensor<f32>) -> Tensor<f32> {
    let size = base.shape()[1];
    let hw = size * size;
    let mut d = base.data().to_vec();
    for _ in 0..rng.gen_range(1..4) {
        let (cx, cy) = (rng.gen_range(0..size) as f32, rng.gen_range(0..size) as f32);
        let r = rng.gen_range(1.0..4.0f32);
        let gain = rng.gen_range(1.0..3.0f32);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                let v = gain * (-d2 / (2.0 * r * r)).exp();
                for c in 0..3 {
                    d[c * hw + y * size + x] += v;
                }
            }
        }
    }
    Tensor::from_vec([3, size, size], d)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|x| x.to_str()).map_or(false, |x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid("gen_dataset", format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

fn crop_patch(img: &Tensor<f32>, patch: usize, rng: &mut ChaCha8Rng, path: &Path) -> Result<Tensor<f32>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < patch || w < patch {
        return Err(Error::Image { path: path.display().to_string(), detail: format!("{}x{} is smaller than patch {}", h, w, patch) });
    }
    let (top, left) = (rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch));
    img.narrow(1, top, patch)?.narrow(2, left, patch)
}

/// Produces sample `index` without touching the file system (apart from
/// reading `image_files` for the image-dir source).
pub fn make_sample(
    index: usize,
    patch: usize,
    psf: &Psf,
    p: &DegradeParams,
    image_files: Option<&[PathBuf]>,
) -> Result<DatasetSample> {
    let mut content = sample_rng(p.seed, index, 0);
    let noise_seed = sample_rng(p.seed, index, 1).next_u64();
    let base = match image_files {
        None => procedural_image(&mut content, patch),
        Some(files) => {
            let path = &files[index % files.len()];
            crop_patch(&imageio::load_png(path)?, patch, &mut content, path)?
        }
    };
    let q = DegradeParams { seed: noise_seed, ..p.clone() };
    let (degraded, clean) = match p.model {
        DegradeModel::Simple => (degrade_simple(&base, psf, &q)?, base),
        DegradeModel::Hdr => {
            let scene = hdr_scene(&mut content, &base);
            (degrade_hdr(&scene, psf, &q)?, hdr_reference(&scene, p))
        }
    };
    let masks = naive_segment(&degraded, p.seg_threshold)?;
    DatasetSample::new(degraded, clean, masks)
}

fn sample_id(index: usize) -> String {
    format!("sample_{:05}", index)
}

pub fn sample_to_container(s: &DatasetSample) -> Container {
    Container {
        tensors: vec![("degraded".into(), Entry::F32(s.degraded.clone())), ("clean".into(), Entry::F32(s.clean.clone()))],
        optimizer: vec![],
        config: "{}".into(),
    }
}

/// Writes `count` samples plus `manifest.json` into `out_dir`. Every sample
/// depends only on `(p.seed, index)`, so parallel generation matches a
/// serial run bit for bit.
pub fn gen_dataset(source: &Source, count: usize, patch: usize, psf: &Psf, p: &DegradeParams, out_dir: &Path) -> Result<Manifest> {
    if patch == 0 || patch % 16 != 0 {
        return Err(Error::Config(format!("patch {} must be a positive multiple of 16", patch)));
    }
    p.validate()?;
    let files = match source {
        Source::Procedural => None,
        Source::ImageDir(dir) => Some(list_pngs(dir)?),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = make_sample(i, patch, psf, p, files.as_deref())?;
            let id = sample_id(i);
            let file = format!("{}.sgsf", id);
            let masks = format!("{}.masks.json", id);
            fsutil::write_atomic(out_dir.join(&file), &sample_to_container(&s).to_bytes())?;
            fsutil::write_atomic(out_dir.join(&masks), s.masks.to_json()?.as_bytes())?;
            Ok(ManifestEntry { id, file, masks, shape: s.clean.shape().to_vec() })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: 1,
        source: match source {
            Source::Procedural => "procedural".into(),
            Source::ImageDir(d) => format!("image-dir:{}", d.display()),
        },
        count,
        patch,
        params: p.clone(),
        samples,
    };
    fsutil::write_json(out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<DatasetSample> {
    let c = Container::from_bytes(&fsutil::read(dir.join(&entry.file))?)?;
    let get = |name: &str| {
        c.tensor(name).cloned().ok_or_else(|| Error::Checkpoint(format!("{} lacks tensor {}", entry.file, name)))
    };
    let (degraded, clean) = (get("degraded")?, get("clean")?);
    let &[3, h, w] = clean.shape() else {
        return Err(Error::shape("sample", format!("{} has shape {:?}", entry.file, clean.shape())));
    };
    let masks = MaskSet::from_json(&fsutil::read_to_string(dir.join(&entry.masks))?, h, w, MaskSource::File)?;
    DatasetSample::new(degraded, clean, masks)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<DatasetSample>)> {
    let manifest: Manifest = serde_json::from_str(&fsutil::read_to_string(dir.join(MANIFEST))?)?;
    let samples = manifest.samples.iter().map(|e| load_sample(dir, e)).collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::psf::{synth_psf, PsfKind, PsfParams};

    #[test]
    fn samples_are_reproducible_and_in_range() {
        let psf = synth_psf(PsfKind::AiryLike, 7, &PsfParams::default()).unwrap();
        let p = DegradeParams { seed: 5, ..Default::default() };
        let a = make_sample(3, 32, &psf, &p, None).unwrap();
        let b = make_sample(3, 32, &psf, &p, None).unwrap();
        assert_eq!(a, b);
        let c = make_sample(4, 32, &psf, &p, None).unwrap();
        assert_ne!(a.clean, c.clean);
        for t in [&a.degraded, &a.clean] {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let hdr = DegradeParams { model: DegradeModel::Hdr, ..p };
        let s = make_sample(0, 16, &psf, &hdr, None).unwrap();
        assert!(s.degraded.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_patch() {
        let psf = Psf::delta(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(gen_dataset(&Source::Procedural, 1, 20, &psf, &DegradeParams::default(), dir.path()).is_err());
    }

    #[test]
    fn unreadable_image_dir_errors() {
        let psf = Psf::delta(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let missing = Source::ImageDir(dir.path().join("nope"));
        assert!(gen_dataset(&missing, 1, 16, &psf, &DegradeParams::default(), &dir.path().join("out")).is_err());
    }
}
