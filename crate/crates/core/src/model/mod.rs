//! The toy vision-language network.
//!
//! Image → non-overlapping patches → linear patch embedding + learned
//! positions → pre-norm transformer blocks. The last block's per-head
//! attention probabilities are kept for localization. Prompt tokens go through
//! a separate text encoder of the same shape. Both feature sets are projected
//! into a shared latent width `k`, concatenated (image rows first) and used as
//! cross-attention context by a causal caption decoder.
//!
//! LoRA adapters attach to the query and value projections of every attention
//! layer, each feed-forward output layer and the latent projectors. In LoRA
//! mode only the adapter factors are trainable.

mod layers;
mod params;
mod sampling;

pub use params::{
    effective_weight, lora_param_count, Binding, LoRAAdapter, Param, ParamKind, ParamStore,
};
pub use sampling::{nucleus, sample_token, SamplingParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{END_ID, START_ID};
use crate::localization::{aggregate_heads_var, AttentionMap, LocalizationError, QueryMode};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use layers::{
    add_decoder_block, add_encoder_block, add_layer_norm, add_linear, causal_mask, Forward,
    INIT_STD,
};
use params::{LORA_A_SUFFIX, LORA_B_SUFFIX};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("image shape {got:?} does not match expected {expected:?}")]
    ImageShape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("attention map: {0}")]
    Attention(String),
}

impl From<LocalizationError> for ModelError {
    fn from(e: LocalizationError) -> Self {
        ModelError::Attention(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectorKind {
    #[default]
    Linear,
    /// Two linear layers with a GELU in between, hidden width `d`.
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub lora_rank: usize,
    pub max_caption_len: usize,
    pub max_prompt_len: usize,
    pub ffn_dim: usize,
    pub projector: ProjectorKind,
    /// Soft-argmax sharpness τ used in training-mode localization.
    pub sharpness: f64,
}

impl ModelConfig {
    /// Desk-scale default: 32×32 single-channel images in 8×8 patches.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            embed_dim: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_size,
            latent_dim: 16,
            lora_rank: 4,
            max_caption_len: 16,
            max_prompt_len: 8,
            ffn_dim: 64,
            projector: ProjectorKind::Linear,
            sharpness: crate::localization::DEFAULT_SHARPNESS,
        }
    }

    /// Toy geometry with the rank-8 adapters used by the original fine-tune.
    pub fn paper_faithful(vocab_size: usize) -> Self {
        Self {
            embed_dim: 64,
            latent_dim: 32,
            lora_rank: 8,
            ffn_dim: 128,
            ..Self::toy(vocab_size)
        }
    }

    /// Smallest useful geometry, for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size,
            latent_dim: 4,
            lora_rank: 2,
            max_caption_len: 6,
            max_prompt_len: 4,
            ffn_dim: 8,
            projector: ProjectorKind::Linear,
            sharpness: crate::localization::DEFAULT_SHARPNESS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("latent_dim", self.latent_dim),
            ("max_caption_len", self.max_caption_len),
            ("max_prompt_len", self.max_prompt_len),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.embed_dim.min(self.latent_dim) {
            return fail(format!(
                "lora_rank {} must be in 1..={}",
                self.lora_rank,
                self.embed_dim.min(self.latent_dim)
            ));
        }
        if self.vocab_size <= END_ID {
            return fail(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            ));
        }
        if !(self.sharpness > 0.0) {
            return fail(format!("sharpness {} must be positive", self.sharpness));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Flat source indices that turn a `C×S×S` image into `(S/p)² × (C·p²)` patch rows.
pub fn patch_indices(channels: usize, size: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !size.is_multiple_of(patch) {
        return Err(ModelError::Config(format!(
            "image size {size} not divisible by patch size {patch}"
        )));
    }
    let g = size / patch;
    let mut idx = Vec::with_capacity(channels * size * size);
    for pr in 0..g {
        for pc in 0..g {
            for c in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        idx.push(c * size * size + (pr * patch + dy) * size + pc * patch + dx);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Splits a `C×S×S` image into row-major non-overlapping `p×p` patches, one per row.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, s) = match *image.shape() {
        [c, h, w] if h == w => (c, h),
        ref got => {
            return Err(ModelError::ImageShape {
                got: got.to_vec(),
                expected: vec![0, 0, 0],
            })
        }
    };
    let idx = patch_indices(c, s, patch)?;
    let g = s / patch;
    let data = idx.iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::new(&[g * g, c * patch * patch], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    /// Every parameter trainable; used to build the base model.
    Full,
    /// Base frozen, only adapter factors trainable.
    Lora,
}

/// Vision-encoder outputs on a tape.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// `n×d` patch features after the final norm.
    pub features: Var,
    /// `H_g×W_g` attention map from the last layer.
    pub attention: Var,
    /// Last layer's per-head `n×n` attention probabilities.
    pub head_probs: Vec<Var>,
}

/// Fused cross-modal context plus the image encoding it was built from.
#[derive(Debug, Clone)]
pub struct Context {
    pub fused: Var,
    pub image: ImageEncoding,
}

const LORA_TARGET_SUFFIXES: [&str; 7] = [
    ".attn.q.w",
    ".attn.v.w",
    ".self.q.w",
    ".self.v.w",
    ".cross.q.w",
    ".cross.v.w",
    ".ffn.fc2.w",
];

fn is_lora_target(name: &str) -> bool {
    name.starts_with("proj.") && name.ends_with(".w")
        || LORA_TARGET_SUFFIXES.iter().any(|s| name.ends_with(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    mode: FineTuneMode,
}

impl Model {
    /// Freshly initialized base model with every parameter trainable:
    /// weights `N(0, 0.02²)`, biases 0, norm gains 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, f, k, v) = (
            config.embed_dim,
            config.ffn_dim,
            config.latent_dim,
            config.vocab_size,
        );

        add_linear(&mut s, "vis.patch", config.patch_dim(), d, true, &mut rng)?;
        s.insert(
            "vis.pos",
            Tensor::randn(&[config.num_patches(), d], INIT_STD, &mut rng),
            ParamKind::Base,
        )?;
        for i in 0..config.encoder_layers {
            add_encoder_block(&mut s, &format!("vis.blk{i}"), d, f, &mut rng)?;
        }
        add_layer_norm(&mut s, "vis.ln", d)?;

        s.insert(
            "txt.emb",
            Tensor::randn(&[v, d], INIT_STD, &mut rng),
            ParamKind::Base,
        )?;
        s.insert(
            "txt.pos",
            Tensor::randn(&[config.max_prompt_len, d], INIT_STD, &mut rng),
            ParamKind::Base,
        )?;
        for i in 0..config.encoder_layers {
            add_encoder_block(&mut s, &format!("txt.blk{i}"), d, f, &mut rng)?;
        }
        add_layer_norm(&mut s, "txt.ln", d)?;

        for which in ["img", "txt"] {
            match config.projector {
                ProjectorKind::Linear => {
                    add_linear(&mut s, &format!("proj.{which}"), d, k, true, &mut rng)?
                }
                ProjectorKind::Mlp => {
                    add_linear(&mut s, &format!("proj.{which}.fc1"), d, d, true, &mut rng)?;
                    add_linear(&mut s, &format!("proj.{which}.fc2"), d, k, true, &mut rng)?;
                }
            }
        }

        s.insert(
            "dec.emb",
            Tensor::randn(&[v, d], INIT_STD, &mut rng),
            ParamKind::Base,
        )?;
        s.insert(
            "dec.pos",
            Tensor::randn(&[config.max_caption_len, d], INIT_STD, &mut rng),
            ParamKind::Base,
        )?;
        for i in 0..config.decoder_layers {
            add_decoder_block(&mut s, &format!("dec.blk{i}"), d, k, f, &mut rng)?;
        }
        add_layer_norm(&mut s, "dec.ln", d)?;
        add_linear(&mut s, "dec.head", d, v, true, &mut rng)?;

        for p in s.iter_mut() {
            p.tensor.set_requires_grad(true);
        }
        Ok(Self {
            config,
            params: s,
            mode: FineTuneMode::Full,
        })
    }

    /// Rebuilds a model from named tensors, e.g. a loaded checkpoint. Every
    /// base tensor must be present with the shape `config` implies. Adapter
    /// pairs are recognized by name; when any are present the model is in
    /// LoRA mode and only adapters are trainable.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        let mut store = ParamStore::new();
        let mut lora = false;
        for (name, tensor) in tensors {
            let kind = if name.ends_with(LORA_A_SUFFIX) {
                ParamKind::LoraA
            } else if name.ends_with(LORA_B_SUFFIX) {
                ParamKind::LoraB
            } else {
                match reference.params.get(&name) {
                    Some(p) if p.tensor.shape() == tensor.shape() => ParamKind::Base,
                    Some(p) => {
                        return Err(TensorError::ShapeMismatch {
                            op: "from_named",
                            lhs: p.tensor.shape().to_vec(),
                            rhs: tensor.shape().to_vec(),
                        }
                        .into())
                    }
                    None => return Err(ModelError::UnknownParam(name)),
                }
            };
            lora |= kind != ParamKind::Base;
            store.insert(name, tensor, kind)?;
        }
        for p in reference.params.iter() {
            if store.position(&p.name).is_none() {
                return Err(ModelError::UnknownParam(format!("missing {}", p.name)));
            }
        }
        for p in store.iter() {
            if p.kind == ParamKind::Base {
                continue;
            }
            let (target, is_a) = match p.name.strip_suffix(LORA_A_SUFFIX) {
                Some(t) => (t, true),
                None => (p.name.strip_suffix(LORA_B_SUFFIX).unwrap_or(""), false),
            };
            let base = reference
                .params
                .get(target)
                .filter(|b| is_lora_target(&b.name))
                .ok_or_else(|| ModelError::UnknownParam(p.name.clone()))?;
            let other = if is_a { LORA_B_SUFFIX } else { LORA_A_SUFFIX };
            let partner = store
                .get(&format!("{target}{other}"))
                .ok_or_else(|| ModelError::UnknownParam(format!("{} has no partner", p.name)))?;
            let (a, b) = if is_a {
                (&p.tensor, &partner.tensor)
            } else {
                (&partner.tensor, &p.tensor)
            };
            let ws = base.tensor.shape();
            if a.rank() != 2
                || b.rank() != 2
                || a.shape()[0] != ws[0]
                || b.shape()[1] != ws[1]
                || a.shape()[1] != b.shape()[0]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "from_named",
                    lhs: ws.to_vec(),
                    rhs: [a.shape(), b.shape()].concat(),
                }
                .into());
            }
        }
        let mode = if lora {
            FineTuneMode::Lora
        } else {
            FineTuneMode::Full
        };
        for p in store.iter_mut() {
            p.tensor
                .set_requires_grad(mode == FineTuneMode::Full || p.kind != ParamKind::Base);
        }
        Ok(Self {
            config,
            params: store,
            mode,
        })
    }

    /// `(name, tensor)` pairs in store order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> FineTuneMode {
        self.mode
    }

    pub fn sharpness(&self) -> f64 {
        self.config.sharpness
    }

    /// Names of the base weights that receive adapters.
    pub fn lora_targets(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Base && is_lora_target(&p.name))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Attaches fresh adapters (`a ~ N(0, 0.02²)`, `b = 0`) to every target that
    /// does not have one yet, freezes all base tensors and marks adapters trainable.
    pub fn enable_lora(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for target in self.lora_targets() {
            let a_name = format!("{target}{LORA_A_SUFFIX}");
            if self.params.position(&a_name).is_some() {
                continue;
            }
            let shape = self.params.tensor(&target)?.shape().to_vec();
            let rank = self.config.lora_rank.min(shape[0]).min(shape[1]);
            let adapter =
                LoRAAdapter::init(target.clone(), shape[0], shape[1], rank, INIT_STD, &mut rng)?;
            self.params.insert(a_name, adapter.a, ParamKind::LoraA)?;
            self.params.insert(
                format!("{target}{LORA_B_SUFFIX}"),
                adapter.b,
                ParamKind::LoraB,
            )?;
        }
        for p in self.params.iter_mut() {
            p.tensor.set_requires_grad(p.kind != ParamKind::Base);
        }
        self.mode = FineTuneMode::Lora;
        Ok(())
    }

    pub fn adapter(&self, target: &str) -> Option<LoRAAdapter> {
        let a = self.params.get(&format!("{target}{LORA_A_SUFFIX}"))?;
        let b = self.params.get(&format!("{target}{LORA_B_SUFFIX}"))?;
        Some(LoRAAdapter {
            a: a.tensor.clone(),
            b: b.tensor.clone(),
            target: target.to_owned(),
        })
    }

    /// `W + a·b` for an adapted weight, or `W` itself when no adapter is attached.
    pub fn effective_weight(&self, name: &str) -> Result<Tensor> {
        let w = self.params.tensor(name)?;
        match self.adapter(name) {
            Some(a) => effective_weight(w, &a),
            None => Ok(w.clone()),
        }
    }

    /// Binds parameters as leaves; trainable ones collect gradients.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape)
    }

    fn fwd<'a>(&'a self, bound: &'a Binding) -> Forward<'a> {
        Forward {
            store: &self.params,
            bound,
        }
    }

    fn check_tokens(&self, ids: &[usize], max: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > max {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn positions(&self, tape: &mut Tape, fwd: &Forward, table: &str, len: usize) -> Result<Var> {
        let pos = fwd.param(table)?;
        let ids: Vec<usize> = (0..len).collect();
        Ok(tape.embedding(pos, &ids)?)
    }

    /// Patch features and last-layer attention for an image node shaped `C×S×S`.
    pub fn encode_image(
        &self,
        tape: &mut Tape,
        bound: &Binding,
        image: Var,
    ) -> Result<ImageEncoding> {
        let cfg = &self.config;
        let expected = cfg.image_shape().to_vec();
        if tape.shape(image) != expected.as_slice() {
            return Err(ModelError::ImageShape {
                got: tape.shape(image).to_vec(),
                expected,
            });
        }
        let fwd = self.fwd(bound);
        let idx = patch_indices(cfg.channels, cfg.image_size, cfg.patch_size)?;
        let patches = tape.gather(image, &idx, &[cfg.num_patches(), cfg.patch_dim()])?;
        let emb = fwd.linear(tape, patches, "vis.patch", true)?;
        let pos = fwd.param("vis.pos")?;
        let mut x = tape.add(emb, pos)?;
        let mut last = Vec::new();
        for i in 0..cfg.encoder_layers {
            let (y, probs) = fwd.encoder_block(tape, x, &format!("vis.blk{i}"), cfg.heads)?;
            x = y;
            last = probs;
        }
        let features = fwd.layer_norm(tape, x, "vis.ln")?;
        let g = cfg.grid_side();
        let attention = aggregate_heads_var(tape, &last, g, g, QueryMode::Mean)?;
        Ok(ImageEncoding {
            features,
            attention,
            head_probs: last,
        })
    }

    /// `len×d` features for prompt token ids.
    pub fn encode_text(&self, tape: &mut Tape, bound: &Binding, ids: &[usize]) -> Result<Var> {
        self.check_tokens(ids, self.config.max_prompt_len)?;
        let fwd = self.fwd(bound);
        let table = fwd.param("txt.emb")?;
        let emb = tape.embedding(table, ids)?;
        let pos = self.positions(tape, &fwd, "txt.pos", ids.len())?;
        let mut x = tape.add(emb, pos)?;
        for i in 0..self.config.encoder_layers {
            x = fwd
                .encoder_block(tape, x, &format!("txt.blk{i}"), self.config.heads)?
                .0;
        }
        fwd.layer_norm(tape, x, "txt.ln")
    }

    /// Maps `n×d` features into the shared `n×k` latent space.
    pub fn project(
        &self,
        tape: &mut Tape,
        bound: &Binding,
        features: Var,
        which: Modality,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        if tape.shape(features).get(1) != Some(&d) {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                lhs: tape.shape(features).to_vec(),
                rhs: vec![0, d],
            }
            .into());
        }
        let fwd = self.fwd(bound);
        let name = match which {
            Modality::Image => "proj.img",
            Modality::Text => "proj.txt",
        };
        match self.config.projector {
            ProjectorKind::Linear => fwd.linear(tape, features, name, true),
            ProjectorKind::Mlp => {
                let h = fwd.linear(tape, features, &format!("{name}.fc1"), true)?;
                let a = tape.gelu(h);
                fwd.linear(tape, a, &format!("{name}.fc2"), true)
            }
        }
    }

    /// Sequence concatenation in latent space: image rows, then text rows.
    pub fn fuse(tape: &mut Tape, image: Var, text: Var) -> Result<Var> {
        if tape.shape(image).get(1) != tape.shape(text).get(1) {
            return Err(TensorError::ShapeMismatch {
                op: "fuse",
                lhs: tape.shape(image).to_vec(),
                rhs: tape.shape(text).to_vec(),
            }
            .into());
        }
        Ok(tape.concat_rows(&[image, text])?)
    }

    /// Encodes, projects and fuses one image/prompt pair.
    pub fn context(
        &self,
        tape: &mut Tape,
        bound: &Binding,
        image: Var,
        prompt: &[usize],
    ) -> Result<Context> {
        let enc = self.encode_image(tape, bound, image)?;
        let e_img = self.project(tape, bound, enc.features, Modality::Image)?;
        let f_txt = self.encode_text(tape, bound, prompt)?;
        let e_txt = self.project(tape, bound, f_txt, Modality::Text)?;
        let fused = Self::fuse(tape, e_img, e_txt)?;
        Ok(Context { fused, image: enc })
    }

    /// Teacher-forced logits `T×V`: position `t` sees the start token and
    /// `targets[..t]` only.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        bound: &Binding,
        fused: Var,
        targets: &[usize],
    ) -> Result<Var> {
        self.check_tokens(targets, self.config.max_caption_len)?;
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(START_ID);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        self.decode_inputs(tape, bound, fused, &inputs)
    }

    fn decode_inputs(
        &self,
        tape: &mut Tape,
        bound: &Binding,
        fused: Var,
        inputs: &[usize],
    ) -> Result<Var> {
        self.check_tokens(inputs, self.config.max_caption_len)?;
        if tape.shape(fused).get(1) != Some(&self.config.latent_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: tape.shape(fused).to_vec(),
                rhs: vec![0, self.config.latent_dim],
            }
            .into());
        }
        let fwd = self.fwd(bound);
        let table = fwd.param("dec.emb")?;
        let emb = tape.embedding(table, inputs)?;
        let pos = self.positions(tape, &fwd, "dec.pos", inputs.len())?;
        let mut x = tape.add(emb, pos)?;
        let mask = tape.constant(&causal_mask(inputs.len()));
        for i in 0..self.config.decoder_layers {
            x = fwd.decoder_block(
                tape,
                x,
                fused,
                &format!("dec.blk{i}"),
                self.config.heads,
                mask,
            )?;
        }
        let x = fwd.layer_norm(tape, x, "dec.ln")?;
        fwd.linear(tape, x, "dec.head", true)
    }

    /// Autoregressive caption from a fused context, stopping at the end token
    /// or after `max_len` tokens. The end token is not included.
    pub fn generate(
        &self,
        tape: &mut Tape,
        bound: &Binding,
        fused: Var,
        max_len: usize,
        sampling: &SamplingParams,
        seed: u64,
    ) -> Result<Vec<usize>> {
        sampling.validate()?;
        if max_len > self.config.max_caption_len {
            return Err(ModelError::TooLong {
                len: max_len,
                max: self.config.max_caption_len,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![START_ID];
        let mut out = Vec::new();
        let v = self.config.vocab_size;
        while out.len() < max_len {
            let logits = self.decode_inputs(tape, bound, fused, &inputs)?;
            let vals = tape.value(logits);
            let last = &vals[vals.len() - v..];
            let tok = sample_token(last, sampling, &mut rng)?;
            if tok == END_ID {
                break;
            }
            out.push(tok);
            inputs.push(tok);
        }
        Ok(out)
    }

    /// Caption for an image/prompt pair on a private tape.
    pub fn caption(
        &self,
        image: &Tensor,
        prompt: &[usize],
        max_len: usize,
        sampling: &SamplingParams,
        seed: u64,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let img = tape.constant(image);
        let ctx = self.context(&mut tape, &bound, img, prompt)?;
        self.generate(&mut tape, &bound, ctx.fused, max_len, sampling, seed)
    }

    /// Last-layer attention map for an image, without gradients.
    pub fn attention_map(&self, image: &Tensor) -> Result<AttentionMap> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let img = tape.constant(image);
        let enc = self.encode_image(&mut tape, &bound, img)?;
        Ok(AttentionMap::new(tape.to_tensor(enc.attention)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    const VOCAB: usize = 12;

    fn tiny() -> Model {
        Model::new(ModelConfig::tiny(VOCAB), 3).unwrap()
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&cfg.image_shape(), 0.3, &mut rng);
        Tensor::new(
            t.shape(),
            t.data().iter().map(|v| v.abs().min(1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(20);
        assert!(c.validate().is_ok());
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(20);
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(20);
        c.lora_rank = 17;
        assert!(c.validate().is_err());
        assert!(ModelConfig::paper_faithful(20).validate().is_ok());
    }

    #[test]
    fn patchify_examples() {
        let img = Tensor::from_fn(&[1, 2, 2], |i| i as f32).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert_eq!(p.data(), img.data());

        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f32).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);

        let mut hot = Tensor::zeros(&[1, 4, 4]);
        hot.data_mut()[3 * 4] = 1.0; // row 3, col 0
        let p = patchify(&hot, 2).unwrap();
        let owners: Vec<usize> = (0..4)
            .filter(|&r| p.data()[r * 4..(r + 1) * 4].contains(&1.0))
            .collect();
        assert_eq!(owners, vec![2]);

        assert!(patchify(&Tensor::zeros(&[1, 5, 5]), 2).is_err());
    }

    #[test]
    fn encode_text_contract() {
        let m = tiny();
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let v = m.encode_text(&mut tape, &b, ids).unwrap();
            (tape.shape(v).to_vec(), tape.value(v).to_vec())
        };
        let (s1, v1) = run(&[1, 5, 6, 2]);
        let (_, v2) = run(&[1, 5, 6, 2]);
        assert_eq!(s1, vec![4, 8]);
        assert_eq!(
            v1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(run(&[7]).0, vec![1, 8]);

        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        assert!(matches!(
            m.encode_text(&mut tape, &b, &[VOCAB]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            m.encode_text(&mut tape, &b, &[]),
            Err(ModelError::EmptySequence)
        ));
    }

    #[test]
    fn project_is_row_wise_linear() {
        let m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let fv = tape.constant(&f);
        let whole = m.project(&mut tape, &b, fv, Modality::Image).unwrap();
        assert_eq!(tape.shape(whole), &[5, 4]);
        let top = tape.constant(&Tensor::new(&[2, 8], f.data()[..16].to_vec()).unwrap());
        let bottom = tape.constant(&Tensor::new(&[3, 8], f.data()[16..].to_vec()).unwrap());
        let pt = m.project(&mut tape, &b, top, Modality::Image).unwrap();
        let pb = m.project(&mut tape, &b, bottom, Modality::Image).unwrap();
        let joined = tape.concat_rows(&[pt, pb]).unwrap();
        for (a, b) in tape.value(whole).iter().zip(tape.value(joined)) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = tape.constant(&Tensor::zeros(&[3, 8]));
        let pz = m.project(&mut tape, &b, zero, Modality::Text).unwrap();
        assert!(tape.value(pz).iter().all(|&v| v == 0.0));
        let bad = tape.constant(&Tensor::zeros(&[3, 7]));
        assert!(m.project(&mut tape, &b, bad, Modality::Text).is_err());
    }

    #[test]
    fn fuse_shape_and_order() {
        let mut tape = Tape::new();
        let img = tape.constant(&Tensor::full(&[4, 3], 1.0));
        let txt = tape.constant(&Tensor::full(&[3, 3], 2.0));
        let f = Model::fuse(&mut tape, img, txt).unwrap();
        assert_eq!(tape.shape(f), &[7, 3]);
        assert!(tape.value(f)[..12].iter().all(|&v| v == 1.0));
        assert!(tape.value(f)[12..].iter().all(|&v| v == 2.0));
        let bad = tape.constant(&Tensor::full(&[3, 2], 2.0));
        assert!(Model::fuse(&mut tape, img, bad).is_err());
    }

    #[test]
    fn attention_map_is_distribution() {
        let m = tiny();
        for seed in 0..20 {
            let a = m.attention_map(&image(m.config(), seed)).unwrap();
            let total: f64 = a.grid().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(a.grid().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn constant_image_symmetric_init_gives_uniform_map() {
        let mut m = Model::new(ModelConfig::toy(20), 5).unwrap();
        let pos = m.params_mut().get_mut("vis.pos").unwrap();
        pos.tensor = Tensor::zeros(pos.tensor.shape());
        let a = m.attention_map(&Tensor::full(&[1, 32, 32], 0.4)).unwrap();
        let u = 1.0 / 16.0;
        assert!(a.grid().data().iter().all(|&v| (v - u).abs() < 1e-4));
    }

    #[test]
    fn image_shape_checked() {
        let m = tiny();
        assert!(matches!(
            m.attention_map(&Tensor::zeros(&[1, 4, 4])),
            Err(ModelError::ImageShape { .. })
        ));
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let img = image(m.config(), 1);
        let logits_for = |targets: &[usize]| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let iv = tape.constant(&img);
            let ctx = m.context(&mut tape, &b, iv, &[1, 4, 2]).unwrap();
            let l = m
                .decode_teacher_forced(&mut tape, &b, ctx.fused, targets)
                .unwrap();
            assert_eq!(tape.shape(l), &[targets.len(), VOCAB]);
            tape.value(l).to_vec()
        };
        let base = logits_for(&[5, 6, 7, 2]);
        let changed = logits_for(&[5, 9, 7, 2]);
        // Changing target 1 can only affect positions after 1.
        assert_eq!(base[..2 * VOCAB], changed[..2 * VOCAB]);
        assert_ne!(base[2 * VOCAB..], changed[2 * VOCAB..]);

        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let iv = tape.constant(&img);
        let ctx = m.context(&mut tape, &b, iv, &[1, 2]).unwrap();
        assert!(matches!(
            m.decode_teacher_forced(&mut tape, &b, ctx.fused, &[4; 7]),
            Err(ModelError::TooLong { .. })
        ));
    }

    #[test]
    fn generation_is_seeded() {
        let m = tiny();
        let img = image(m.config(), 2);
        let s = SamplingParams::new(0.9, 0.95).unwrap();
        let a = m.caption(&img, &[1, 2], 6, &s, 42).unwrap();
        let b = m.caption(&img, &[1, 2], 6, &s, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        let g1 = m
            .caption(&img, &[1, 2], 6, &SamplingParams::GREEDY, 1)
            .unwrap();
        let g2 = m
            .caption(&img, &[1, 2], 6, &SamplingParams::GREEDY, 2)
            .unwrap();
        assert_eq!(g1, g2);
        assert!(m.caption(&img, &[1, 2], 7, &s, 0).is_err());
    }

    #[test]
    fn lora_targets_and_freezing() {
        let mut m = tiny();
        let targets = m.lora_targets();
        assert!(targets.contains(&"vis.blk0.attn.q.w".to_string()));
        assert!(targets.contains(&"vis.blk0.attn.v.w".to_string()));
        assert!(!targets.contains(&"vis.blk0.attn.k.w".to_string()));
        assert!(targets.contains(&"dec.blk0.ffn.fc2.w".to_string()));
        assert!(targets.contains(&"proj.img.w".to_string()));
        m.enable_lora(9).unwrap();
        for p in m.params().iter() {
            assert_eq!(p.trainable(), p.kind != ParamKind::Base, "{}", p.name);
        }
        for t in &targets {
            assert!(m
                .effective_weight(t)
                .unwrap()
                .bit_eq(m.params().tensor(t).unwrap()));
        }
    }

    #[test]
    fn image_gradient_passes_check() {
        let m = tiny();
        let img = image(m.config(), 4);
        let err = grad_check(
            |tape, x| {
                let b = m.params().bind_frozen(tape);
                let enc = m.encode_image(tape, &b, x).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let sq = tape.mul(enc.features, enc.features)?;
                Ok(tape.sum(sq))
            },
            &img,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
