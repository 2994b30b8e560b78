//! Synthetic under-display-camera degradation and paired dataset generation.

mod dataset;
mod psf;
mod simulate;

pub use dataset::{
    gen_dataset, load_dataset, load_sample, make_sample, procedural_image, sample_rng, sample_to_container,
    DatasetSample, Manifest, ManifestEntry, Source, MANIFEST,
};
pub use psf::{synth_psf, Psf, PsfKind, PsfParams};
pub use simulate::{
    blur_circular, degrade_hdr, degrade_simple, hdr_reference, tone_map, DegradeModel, DegradeParams, PsfSpec,
};

impl PsfSpec {
    pub fn build(&self) -> crate::Result<Psf> {
        synth_psf(self.kind, self.size, &self.params)
    }
}
