use rand::Rng;

use super::params::{Binding, ParamKind, ParamStore, LORA_A_SUFFIX, LORA_B_SUFFIX};
use super::{ModelError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const INIT_STD: f32 = 0.02;

/// Additive logit for masked attention positions; large enough that its
/// softmax weight underflows to exactly zero.
const MASK_LOGIT: f32 = -1e9;

pub(crate) fn add_linear(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(
        format!("{name}.w"),
        Tensor::randn(&[d_in, d_out], INIT_STD, rng),
        ParamKind::Base,
    )?;
    if bias {
        store.insert(
            format!("{name}.b"),
            Tensor::zeros(&[d_out]),
            ParamKind::Base,
        )?;
    }
    Ok(())
}

pub(crate) fn add_layer_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.insert(
        format!("{name}.g"),
        Tensor::full(&[d], 1.0),
        ParamKind::Base,
    )?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]), ParamKind::Base)?;
    Ok(())
}

pub(crate) fn add_attention(
    store: &mut ParamStore,
    name: &str,
    d_q: usize,
    d_kv: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    add_linear(store, &format!("{name}.q"), d_q, d, false, rng)?;
    add_linear(store, &format!("{name}.k"), d_kv, d, false, rng)?;
    add_linear(store, &format!("{name}.v"), d_kv, d, false, rng)?;
    add_linear(store, &format!("{name}.o"), d, d, false, rng)?;
    Ok(())
}

pub(crate) fn add_ffn(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    add_linear(store, &format!("{name}.fc1"), d, hidden, true, rng)?;
    add_linear(store, &format!("{name}.fc2"), hidden, d, true, rng)?;
    Ok(())
}

pub(crate) fn add_encoder_block(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    add_layer_norm(store, &format!("{name}.ln1"), d)?;
    add_attention(store, &format!("{name}.attn"), d, d, d, rng)?;
    add_layer_norm(store, &format!("{name}.ln2"), d)?;
    add_ffn(store, &format!("{name}.ffn"), d, hidden, rng)
}

pub(crate) fn add_decoder_block(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    ctx_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    add_layer_norm(store, &format!("{name}.ln1"), d)?;
    add_attention(store, &format!("{name}.self"), d, d, d, rng)?;
    add_layer_norm(store, &format!("{name}.ln2"), d)?;
    add_attention(store, &format!("{name}.cross"), d, ctx_dim, d, rng)?;
    add_layer_norm(store, &format!("{name}.ln3"), d)?;
    add_ffn(store, &format!("{name}.ffn"), d, hidden, rng)
}

/// `T×T` additive mask hiding future positions.
pub(crate) fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { MASK_LOGIT } else { 0.0 })
        .expect("mask dims are positive")
}

/// Parameter lookup for one forward pass.
pub(crate) struct Forward<'a> {
    pub store: &'a ParamStore,
    pub bound: &'a Binding,
}

impl Forward<'_> {
    pub fn param(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.bound.var(i))
            .ok_or_else(|| ModelError::UnknownParam(name.to_owned()))
    }

    /// The weight `name`, adapted as `W + a·b` when a LoRA pair is attached.
    pub fn weight(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let w = self.param(name)?;
        let a_name = format!("{name}{LORA_A_SUFFIX}");
        if self.store.position(&a_name).is_none() {
            return Ok(w);
        }
        let a = self.param(&a_name)?;
        let b = self.param(&format!("{name}{LORA_B_SUFFIX}"))?;
        let delta = tape.matmul(a, b)?;
        Ok(tape.add(w, delta)?)
    }

    pub fn linear(&self, tape: &mut Tape, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.weight(tape, &format!("{name}.w"))?;
        let y = tape.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{name}.b"))?;
            Ok(tape.add_row(y, b)?)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        Ok(tape.layer_norm(x, g, b)?)
    }

    /// Multi-head attention of `xq` over `xkv`. Returns the output and each
    /// head's `nq×nk` attention probabilities.
    pub fn attention(
        &self,
        tape: &mut Tape,
        name: &str,
        xq: Var,
        xkv: Var,
        heads: usize,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.linear(tape, xq, &format!("{name}.q"), false)?;
        let k = self.linear(tape, xkv, &format!("{name}.k"), false)?;
        let v = self.linear(tape, xkv, &format!("{name}.v"), false)?;
        let d = tape.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let p = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(p, vh)?);
            probs.push(p);
        }
        let merged = tape.concat_cols(&outs)?;
        let out = self.linear(tape, merged, &format!("{name}.o"), false)?;
        Ok((out, probs))
    }

    pub fn ffn(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{name}.fc1"), true)?;
        let a = tape.gelu(h);
        self.linear(tape, a, &format!("{name}.fc2"), true)
    }

    /// Pre-norm block: `h = x + attn(ln1 x)`, `y = h + ffn(ln2 h)`.
    pub fn encoder_block(
        &self,
        tape: &mut Tape,
        x: Var,
        name: &str,
        heads: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let n1 = self.layer_norm(tape, x, &format!("{name}.ln1"))?;
        let (a, probs) = self.attention(tape, &format!("{name}.attn"), n1, n1, heads, None)?;
        let h = tape.add(x, a)?;
        let n2 = self.layer_norm(tape, h, &format!("{name}.ln2"))?;
        let f = self.ffn(tape, n2, &format!("{name}.ffn"))?;
        Ok((tape.add(h, f)?, probs))
    }

    /// Causal self-attention, cross-attention to `context`, feed-forward; all pre-norm.
    pub fn decoder_block(
        &self,
        tape: &mut Tape,
        x: Var,
        context: Var,
        name: &str,
        heads: usize,
        mask: Var,
    ) -> Result<Var> {
        let n1 = self.layer_norm(tape, x, &format!("{name}.ln1"))?;
        let (a, _) = self.attention(tape, &format!("{name}.self"), n1, n1, heads, Some(mask))?;
        let h = tape.add(x, a)?;
        let n2 = self.layer_norm(tape, h, &format!("{name}.ln2"))?;
        let (c, _) = self.attention(tape, &format!("{name}.cross"), n2, context, heads, None)?;
        let h = tape.add(h, c)?;
        let n3 = self.layer_norm(tape, h, &format!("{name}.ln3"))?;
        let f = self.ffn(tape, n3, &format!("{name}.ffn"))?;
        Ok(tape.add(h, f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_hides_future() {
        let m = causal_mask(3);
        assert_eq!(m.at2(0, 0), 0.0);
        assert_eq!(m.at2(0, 1), MASK_LOGIT);
        assert_eq!(m.at2(2, 1), 0.0);
        assert_eq!(m.at2(1, 2), MASK_LOGIT);
    }
}
