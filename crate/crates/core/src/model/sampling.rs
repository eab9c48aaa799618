use rand::Rng;

use super::{ModelError, Result};

/// Nucleus sampling parameters. `top_p == 0` means greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub top_p: f64,
    pub temperature: f64,
}

impl SamplingParams {
    pub const GREEDY: SamplingParams = SamplingParams {
        top_p: 0.0,
        temperature: 1.0,
    };

    pub fn new(top_p: f64, temperature: f64) -> Result<Self> {
        let p = Self { top_p, temperature };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(ModelError::Sampling(format!(
                "top_p {} outside [0, 1]",
                self.top_p
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(ModelError::Sampling(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

impl Default for SamplingParams {
    /// Top-p 0.9, temperature 0.95.
    fn default() -> Self {
        Self {
            top_p: 0.9,
            temperature: 0.95,
        }
    }
}

/// Temperature-scaled softmax, then the smallest probability-sorted prefix whose
/// mass reaches `top_p`, renormalized. Returns `(token, probability)` in
/// descending probability order; equal probabilities keep ascending token order.
pub fn nucleus(logits: &[f64], params: &SamplingParams) -> Result<Vec<(usize, f64)>> {
    params.validate()?;
    if logits.is_empty() {
        return Err(ModelError::Sampling("empty logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / params.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut order: Vec<(usize, f64)> = exps.iter().map(|e| e / total).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut kept = Vec::new();
    let mut mass = 0.0;
    for (tok, p) in order {
        kept.push((tok, p));
        mass += p;
        if mass >= params.top_p {
            break;
        }
    }
    let kept_mass: f64 = kept.iter().map(|(_, p)| p).sum();
    Ok(kept.into_iter().map(|(t, p)| (t, p / kept_mass)).collect())
}

/// Draws one token from the nucleus of `logits`.
pub fn sample_token(logits: &[f64], params: &SamplingParams, rng: &mut impl Rng) -> Result<usize> {
    let kept = nucleus(logits, params)?;
    if kept.len() == 1 {
        return Ok(kept[0].0);
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(tok, p) in &kept {
        acc += p;
        if u < acc {
            return Ok(tok);
        }
    }
    Ok(kept.last().unwrap().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn invalid_params() {
        assert!(SamplingParams::new(1.1, 1.0).is_err());
        assert!(SamplingParams::new(-0.1, 1.0).is_err());
        assert!(SamplingParams::new(0.5, 0.0).is_err());
        assert!(SamplingParams::new(0.5, f64::NAN).is_err());
        assert!(SamplingParams::new(0.0, 0.1).is_ok());
    }

    #[test]
    fn tiny_top_p_is_greedy() {
        let logits = [0.1, 2.0, 1.9, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let t =
                sample_token(&logits, &SamplingParams::new(1e-9, 0.95).unwrap(), &mut rng).unwrap();
            assert_eq!(t, 1);
        }
        assert_eq!(
            nucleus(&logits, &SamplingParams::GREEDY).unwrap(),
            vec![(1, 1.0)]
        );
    }

    #[test]
    fn paper_sampling_nucleus_keeps_three() {
        let probs: [f64; 4] = [0.5, 0.3, 0.15, 0.05];
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let kept = nucleus(&logits, &SamplingParams::default()).unwrap();
        let toks: Vec<usize> = kept.iter().map(|k| k.0).collect();
        assert_eq!(toks, vec![0, 1, 2]);
        let mass: f64 = kept.iter().map(|k| k.1).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let logits = [0.3, 0.2, 0.1, 0.0, -0.1];
        let params = SamplingParams::new(1.0, 1.0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_token(&logits, &params, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }
}
