//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Unknown
//! keys are errors. Command-line flags are applied after the file, so they win.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hazloc::data::{LoadOptions, SynthConfig};
use hazloc::model::{ModelConfig, ProjectorKind, SamplingParams};
use hazloc::objective::LossWeights;
use hazloc::optim::{AdamWConfig, ProbeConfig, ProbeObjective};
use hazloc::training::{TrainConfig, TrainMode};
use hazloc::Exec;

pub trait KvValue: Sized {
    fn parse_kv(s: &str) -> Result<Self, String>;
    fn render_kv(&self) -> String;
}

macro_rules! kv_via_fromstr {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn parse_kv(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{s:?}: {e}"))
            }
            fn render_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

kv_via_fromstr!(usize, u64, f64, bool, String);

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])+ $field:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of a run. Field docs double as the key reference.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])+ pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// `(key, description)` for every key, in file order.
            #[cfg(test)]
            pub const KEYS: &'static [(&'static str, &'static str)] =
                &[ $( (stringify!($field), concat!($($doc),+)) ),* ];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as KvValue>::parse_kv(value).map_err(|e| format!("{key}: {e}"))?;
                    } )*
                    _ => return Err(format!("unknown config key {key:?}")),
                }
                Ok(())
            }

            /// All keys with their current values, each preceded by its description.
            pub fn to_kv(&self) -> String {
                let mut s = String::new();
                $(
                    let _ = writeln!(s, "#{}", concat!($($doc),+));
                    let _ = writeln!(s, "{} = {}", stringify!($field), KvValue::render_kv(&self.$field));
                )*
                s
            }
        }
    };
}

run_config! {
    /// Base seed for initialization, shuffling, splits, synthesis and sampling.
    seed: u64 = 0,
    /// Use the thread pool (results are identical either way).
    parallel: bool = true,

    /// Image side length in pixels.
    image_size: usize = 32,
    /// Image channels (1 or 3).
    channels: usize = 1,
    /// Patch side length; must divide image_size.
    patch_size: usize = 8,
    /// Transformer width.
    embed_dim: usize = 32,
    /// Attention heads; must divide embed_dim.
    heads: usize = 4,
    /// Layers in each of the vision and text encoders.
    encoder_layers: usize = 2,
    /// Caption decoder layers.
    decoder_layers: usize = 2,
    /// Shared latent width of the projectors.
    latent_dim: usize = 16,
    /// LoRA rank.
    lora_rank: usize = 4,
    /// Longest caption the decoder produces, in tokens.
    max_caption_len: usize = 16,
    /// Longest prompt, in tokens.
    max_prompt_len: usize = 8,
    /// Feed-forward hidden width.
    ffn_dim: usize = 64,
    /// Projector kind: linear or mlp.
    projector: String = "linear".into(),
    /// Soft-argmax sharpness used by the coordinate loss.
    sharpness: f64 = hazloc::localization::DEFAULT_SHARPNESS,

    /// Passes over the training split.
    epochs: usize = 3,
    /// Samples per micro-batch.
    batch_size: usize = 1,
    /// Micro-batches per optimizer step.
    grad_accum_steps: usize = 8,
    /// Peak learning rate.
    base_lr: f64 = 1e-4,
    /// Learning rate at the first warmup step.
    warmup_start_lr: f64 = 3e-5,
    /// Share of optimizer steps spent warming up.
    warmup_fraction: f64 = 0.1,
    /// Global gradient-norm clip.
    clip_max_norm: f64 = 1.0,
    /// AdamW first-moment decay.
    beta1: f64 = 0.9,
    /// AdamW second-moment decay.
    beta2: f64 = 0.999,
    /// AdamW denominator epsilon.
    adam_eps: f64 = 1e-8,
    /// Decoupled weight decay.
    weight_decay: f64 = 0.01,
    /// Weight of the coordinate loss.
    lambda_coord: f64 = 1.0,
    /// Weight of the caption loss.
    lambda_text: f64 = 1.0,
    /// Training mode: lora (frozen base plus adapters) or pretrain (all weights).
    mode: String = "lora".into(),
    /// Checkpoint to start from; empty starts from a fresh model.
    init_checkpoint: String = String::new(),
    /// Share of the dataset held out for validation.
    val_fraction: f64 = 0.2,
    /// Score the validation split after every epoch.
    validate: bool = true,

    /// JSONL dataset path.
    dataset: String = String::new(),
    /// Directory relative image paths resolve against; empty means the dataset's directory.
    image_root: String = String::new(),
    /// Evaluate at most this many samples; 0 means all.
    max_samples: usize = 0,

    /// Number of synthetic samples.
    synth_count: usize = 250,
    /// Synthetic blob radius in pixels.
    blob_radius: f64 = 3.0,
    /// Upper bound of the uniform background noise.
    noise_max: f64 = 0.3,
    /// Lower bound of the blob peak intensity.
    peak_min: f64 = 0.8,

    /// Nucleus mass for prediction; 0 decodes greedily.
    top_p: f64 = 0.9,
    /// Softmax temperature for prediction.
    temperature: f64 = 0.95,

    /// Probe objective: quadratic or logistic.
    probe_objective: String = "quadratic".into(),
    /// Probe parameter count.
    probe_dims: usize = 32,
    /// Comma-separated probe horizons, ascending.
    probe_horizons: String = "100,300,1000,3000,10000".into(),
    /// Number of probe seeds, counted up from seed.
    probe_seeds: usize = 5,
    /// Probe initial step size.
    probe_lr: f64 = 0.5,
    /// Standard deviation of the probe's gradient noise.
    probe_noise: f64 = 1.0,
}

/// Keys that describe the network itself and travel with a checkpoint.
pub const MODEL_KEYS: [&str; 14] = [
    "image_size",
    "channels",
    "patch_size",
    "embed_dim",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "latent_dim",
    "lora_rank",
    "max_caption_len",
    "max_prompt_len",
    "ffn_dim",
    "projector",
    "sharpness",
];

/// `(key, value)` pairs from config text.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_kv(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), String> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("expected KEY=VALUE, got {kv:?}"))?;
        self.set(k.trim(), v.trim())
    }

    /// Copies the network geometry from another config.
    pub fn adopt_model(&mut self, other: &RunConfig) {
        let text = other.to_kv();
        for (k, v) in parse_kv(&text).expect("rendered config parses") {
            if MODEL_KEYS.contains(&k.as_str()) {
                self.set(&k, &v).expect("rendered values parse");
            }
        }
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, String> {
        let projector = match self.projector.as_str() {
            "linear" => ProjectorKind::Linear,
            "mlp" => ProjectorKind::Mlp,
            p => return Err(format!("projector must be linear or mlp, got {p:?}")),
        };
        let cfg = ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            vocab_size,
            latent_dim: self.latent_dim,
            lora_rank: self.lora_rank,
            max_caption_len: self.max_caption_len,
            max_prompt_len: self.max_prompt_len,
            ffn_dim: self.ffn_dim,
            projector,
            sharpness: self.sharpness,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn train_mode(&self) -> Result<TrainMode, String> {
        match self.mode.as_str() {
            "lora" => Ok(TrainMode::LoraFinetune),
            "pretrain" => Ok(TrainMode::Pretrain),
            m => Err(format!("mode must be lora or pretrain, got {m:?}")),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_accum_steps: self.grad_accum_steps,
            base_lr: self.base_lr,
            warmup_start_lr: self.warmup_start_lr,
            warmup_fraction: self.warmup_fraction,
            loss_weights: LossWeights::new(self.lambda_coord, self.lambda_text)
                .map_err(|e| e.to_string())?,
            clip_max_norm: self.clip_max_norm,
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
            mode: self.train_mode()?,
            checkpoint_path: None,
            log_path: None,
            validate: self.validate,
            exec: self.exec(),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig, String> {
        let cfg = SynthConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            blob_radius: self.blob_radius,
            noise_max: self.noise_max as f32,
            peak_min: self.peak_min as f32,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn sampling(&self) -> Result<SamplingParams, String> {
        SamplingParams::new(self.top_p, self.temperature).map_err(|e| e.to_string())
    }

    pub fn probe_config(&self) -> Result<ProbeConfig, String> {
        let objective = match self.probe_objective.as_str() {
            "quadratic" => ProbeObjective::Quadratic,
            "logistic" => ProbeObjective::Logistic,
            o => {
                return Err(format!(
                    "probe_objective must be quadratic or logistic, got {o:?}"
                ))
            }
        };
        let t_list = self
            .probe_horizons
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("probe_horizons: {t:?}: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let defaults = ProbeConfig::default();
        Ok(ProbeConfig {
            objective,
            dims: self.probe_dims,
            t_list,
            seeds: (0..self.probe_seeds as u64)
                .map(|i| self.seed.wrapping_add(i))
                .collect(),
            base_lr: self.probe_lr,
            grad_noise: self.probe_noise,
            ..defaults
        })
    }

    /// Loader options for `dataset`, with images expected at the model geometry.
    pub fn load_options(&self, dataset: &Path) -> LoadOptions {
        let image_root = if self.image_root.is_empty() {
            dataset.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            PathBuf::from(&self.image_root)
        };
        LoadOptions {
            image_root,
            shape: Some([self.channels, self.image_size, self.image_size]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_kv(&d.to_kv()).unwrap(), d);
        assert_eq!(RunConfig::KEYS.len(), parse_kv(&d.to_kv()).unwrap().len());
    }

    #[test]
    fn every_key_is_documented() {
        assert!(RunConfig::KEYS
            .iter()
            .all(|(_, doc)| !doc.trim().is_empty()));
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(RunConfig::from_kv("learning_rate = 1")
            .unwrap_err()
            .contains("unknown"));
        assert!(RunConfig::from_kv("epochs = three").is_err());
        assert!(RunConfig::from_kv("epochs").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::from_kv("# note\n\nepochs = 5\nbase_lr = 2e-3\n").unwrap();
        assert_eq!((c.epochs, c.base_lr), (5, 2e-3));
        c.apply_assignment("epochs=7").unwrap();
        assert_eq!(c.epochs, 7);
    }

    #[test]
    fn hosted_defaults() {
        let c = RunConfig::default();
        assert_eq!(
            (c.base_lr, c.epochs, c.grad_accum_steps, c.clip_max_norm),
            (1e-4, 3, 8, 1.0)
        );
        assert_eq!((c.top_p, c.temperature), (0.9, 0.95));
        let t = c.train_config().unwrap();
        assert_eq!(t.mode, TrainMode::LoraFinetune);
        assert_eq!(c.model_config(20).unwrap(), ModelConfig::toy(20));
        assert_eq!(c.synth_config().unwrap(), SynthConfig::default());
        assert_eq!(c.probe_config().unwrap(), ProbeConfig::default());
    }

    #[test]
    fn adopt_model_copies_geometry_only() {
        let mut a = RunConfig::default();
        let b = RunConfig::from_kv("embed_dim = 16\nepochs = 9").unwrap();
        a.adopt_model(&b);
        assert_eq!((a.embed_dim, a.epochs), (16, 3));
    }
}
