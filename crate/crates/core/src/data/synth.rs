use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedSample, DataError};
use crate::localization::PixelPoint;
use crate::tensor::Tensor;
use crate::Exec;

/// Instruction given to the model alongside every image.
pub const PROMPT: &str = "identify the hazard .";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Pixels within this distance of the center carry most of the blob; the
    /// Gaussian's standard deviation is half of it.
    pub blob_radius: f64,
    pub noise_max: f32,
    pub peak_min: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            blob_radius: 3.0,
            noise_max: 0.3,
            peak_min: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Synth(m));
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return bad("image_size, channels and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.blob_radius > 0.0) || self.blob_radius >= self.image_size as f64 {
            return bad(format!(
                "blob radius {} must be in (0, {})",
                self.blob_radius, self.image_size
            ));
        }
        if !(0.0..self.peak_min).contains(&self.noise_max) || self.peak_min > 1.0 {
            return bad("need 0 ≤ noise_max < peak_min ≤ 1".into());
        }
        Ok(())
    }
}

/// Pixel coordinate → center of the patch containing it.
pub fn snap_to_patch_center(v: f64, patch_size: usize) -> usize {
    let p = patch_size;
    (v.max(0.0) as usize / p) * p + p / 2
}

pub fn caption_for(hazard: PixelPoint, patch_size: usize) -> String {
    format!(
        "the area around ({}, {}) should be paid more attention to",
        snap_to_patch_center(hazard.x, patch_size),
        snap_to_patch_center(hazard.y, patch_size)
    )
}

/// Reads the `(x, y)` pair back out of a caption.
pub fn parse_caption_point(caption: &str) -> Option<PixelPoint> {
    let toks: Vec<&str> = caption.split_whitespace().collect();
    toks.windows(2).find_map(|w| {
        let x = w[0].strip_prefix('(')?.strip_suffix(',')?.parse().ok()?;
        let y = w[1].strip_suffix(')')?.parse().ok()?;
        Some(PixelPoint::new(x, y))
    })
}

// Three decimals keeps the JSONL compact and round-trips exactly through f32.
fn quantize(v: f32) -> f32 {
    ((v as f64 * 1000.0).round() / 1000.0) as f32
}

fn one(cfg: &SynthConfig, seed: u64, index: usize) -> AnnotatedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let s = cfg.image_size;
    let cx = rng.random_range(0..s);
    let cy = rng.random_range(0..s);
    let peak = rng.random_range(cfg.peak_min..=1.0);
    let sigma = cfg.blob_radius / 2.0;
    let mut data = vec![0f32; cfg.channels * s * s];
    for (i, px) in data.iter_mut().enumerate() {
        let (r, c) = ((i / s) % s, i % s);
        let d2 = (r as f64 - cy as f64).powi(2) + (c as f64 - cx as f64).powi(2);
        let blob = peak * (-d2 / (2.0 * sigma * sigma)).exp() as f32;
        let noise = rng.random_range(0.0..=cfg.noise_max);
        *px = quantize(blob.max(noise));
    }
    let hazard = PixelPoint::new(cx as f64, cy as f64);
    AnnotatedSample {
        image: Tensor::new(&[cfg.channels, s, s], data).expect("synthetic pixels are finite"),
        hazard,
        caption: caption_for(hazard, cfg.patch_size),
        category: Some(
            if index.is_multiple_of(2) {
                "predictable"
            } else {
                "unpredictable"
            }
            .to_owned(),
        ),
    }
}

/// `n` scenes of background noise plus one bright Gaussian blob whose center is
/// the hazard. Sample `i` depends only on `(seed, i)`.
pub fn synth_generate(
    n: usize,
    cfg: &SynthConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<AnnotatedSample>, DataError> {
    cfg.validate()?;
    if n == 0 {
        return Err(DataError::Synth("sample count must be at least 1".into()));
    }
    Ok(exec.map_range(n, |i| one(cfg, seed, i)))
}
