use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{adamw_step, AdamWConfig, AdamWState, OptimError, Result};
use crate::tensor::Tensor;
use crate::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeObjective {
    /// `½‖θ − θ*‖²` with a random `θ*`.
    Quadratic,
    /// L2-regularized logistic regression on a fixed random design.
    Logistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub objective: ProbeObjective,
    pub dims: usize,
    /// Horizons at which the running minimum is reported, ascending.
    pub t_list: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Step size at t = 0; step t uses `base_lr / √(t+1)`.
    pub base_lr: f64,
    /// Standard deviation of Gaussian noise added to each gradient coordinate.
    pub grad_noise: f64,
    pub adamw: AdamWConfig,
    /// Start at the optimum instead of a random point.
    pub start_at_optimum: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            objective: ProbeObjective::Quadratic,
            dims: 32,
            t_list: vec![100, 300, 1000, 3000, 10000],
            seeds: (0..5).collect(),
            base_lr: 0.5,
            grad_noise: 1.0,
            // The decay term would move the stationary point away from θ*.
            adamw: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            start_at_optimum: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// `(T, mean over seeds of min_{t<T} ‖∇f(θ_t)‖²)`.
    pub rows: Vec<(usize, f64)>,
    /// Least-squares slope of `ln value` against `ln T`.
    pub slope: f64,
}

impl ProbeReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>8}  {:>14}\n", "T", "min |grad|^2");
        for (t, v) in &self.rows {
            let _ = writeln!(s, "{t:>8}  {v:>14.6e}");
        }
        let _ = writeln!(s, "slope {:.4}", self.slope);
        s
    }

    /// One `T value` pair per line.
    pub fn to_records(&self) -> String {
        self.rows
            .iter()
            .map(|(t, v)| format!("{t} {v:e}\n"))
            .collect()
    }
}

struct Problem {
    kind: ProbeObjective,
    optimum: Vec<f64>,
    design: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

const LOGISTIC_SAMPLES: usize = 64;
const LOGISTIC_L2: f64 = 0.1;

impl Problem {
    fn new(kind: ProbeObjective, dims: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        // Kept representable in f32 so a start at the optimum is exact.
        let optimum: Vec<f64> = (0..dims).map(|_| normal() as f32 as f64).collect();
        let (mut design, mut labels) = (Vec::new(), Vec::new());
        if kind == ProbeObjective::Logistic {
            for _ in 0..LOGISTIC_SAMPLES {
                let x: Vec<f64> = (0..dims).map(|_| normal()).collect();
                let z: f64 = x.iter().zip(&optimum).map(|(a, b)| a * b).sum();
                labels.push(if z + normal() > 0.0 { 1.0 } else { 0.0 });
                design.push(x);
            }
        }
        Self {
            kind,
            optimum,
            design,
            labels,
        }
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match self.kind {
            ProbeObjective::Quadratic => theta
                .iter()
                .zip(&self.optimum)
                .map(|(t, o)| t - o)
                .collect(),
            ProbeObjective::Logistic => {
                let n = self.design.len() as f64;
                let mut g: Vec<f64> = theta.iter().map(|t| LOGISTIC_L2 * t).collect();
                for (x, y) in self.design.iter().zip(&self.labels) {
                    let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
                    let r = 1.0 / (1.0 + (-z).exp()) - y;
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += r * xi / n;
                    }
                }
                g
            }
        }
    }

    /// Quadratic optimum is known; logistic starts from zero.
    fn start(&self, at_optimum: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match (self.kind, at_optimum) {
            (ProbeObjective::Quadratic, true) => self.optimum.clone(),
            (ProbeObjective::Quadratic, false) => (0..self.optimum.len())
                .map(|_| StandardNormal.sample(rng))
                .collect(),
            (ProbeObjective::Logistic, _) => vec![0.0; self.optimum.len()],
        }
    }
}

fn run_seed(cfg: &ProbeConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = Problem::new(cfg.objective, cfg.dims, &mut rng);
    let start = problem.start(cfg.start_at_optimum, &mut rng);
    let mut theta = Tensor::new(&[cfg.dims], start.iter().map(|&v| v as f32).collect())
        .map_err(|e| OptimError::Config(e.to_string()))?;
    let mut state = AdamWState::new([&theta]);
    let horizon = *cfg.t_list.last().unwrap_or(&0);
    let mut best = f64::INFINITY;
    let mut out = Vec::with_capacity(cfg.t_list.len());
    let mut next = 0;
    for t in 0..horizon {
        let th: Vec<f64> = theta.data().iter().map(|&v| v as f64).collect();
        let g = problem.gradient(&th);
        let sq: f64 = g.iter().map(|v| v * v).sum();
        if !sq.is_finite() {
            return Err(OptimError::Diverged(t));
        }
        best = best.min(sq);
        let noisy: Vec<f64> = g
            .iter()
            .map(|v| v + cfg.grad_noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let lr = cfg.base_lr / ((t + 1) as f64).sqrt();
        adamw_step(&mut [&mut theta], &[noisy], &mut state, &cfg.adamw, lr)?;
        while next < cfg.t_list.len() && cfg.t_list[next] == t + 1 {
            out.push(best);
            next += 1;
        }
    }
    Ok(out)
}

/// Runs AdamW with `η_t = η₀/√(t+1)` on noisy gradients of a test objective and
/// reports the seed-averaged running minimum of the true squared gradient norm.
pub fn convergence_probe(cfg: &ProbeConfig, exec: Exec) -> Result<ProbeReport> {
    if cfg.dims == 0 || cfg.seeds.is_empty() || cfg.t_list.is_empty() || !(cfg.base_lr > 0.0) {
        return Err(OptimError::Config(
            "probe needs dims, seeds, horizons and a positive rate".into(),
        ));
    }
    if cfg.t_list.windows(2).any(|w| w[0] >= w[1]) || cfg.t_list[0] == 0 {
        return Err(OptimError::Config(
            "horizons must be positive and strictly increasing".into(),
        ));
    }
    let per_seed = exec.map(&cfg.seeds, |&s| run_seed(cfg, s));
    let mut sums = vec![0.0; cfg.t_list.len()];
    for r in per_seed {
        for (acc, v) in sums.iter_mut().zip(r?) {
            *acc += v;
        }
    }
    let rows: Vec<(usize, f64)> = cfg
        .t_list
        .iter()
        .zip(sums)
        .map(|(&t, s)| (t, s / cfg.seeds.len() as f64))
        .collect();
    let slope = fit_loglog_slope(&rows);
    Ok(ProbeReport { rows, slope })
}

/// Ordinary least-squares slope of `ln y` on `ln x`. Rows with `y ≤ 0` are skipped.
pub fn fit_loglog_slope(rows: &[(usize, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(_, y)| *y > 0.0)
        .map(|&(x, y)| ((x as f64).ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let rows: Vec<(usize, f64)> = [10, 100, 1000]
            .iter()
            .map(|&t| (t, 3.0 / (t as f64).sqrt()))
            .collect();
        assert!((fit_loglog_slope(&rows) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn start_at_optimum_has_zero_gradient() {
        let cfg = ProbeConfig {
            start_at_optimum: true,
            t_list: vec![1, 2],
            ..Default::default()
        };
        let r = convergence_probe(&cfg, Exec::Sequential).unwrap();
        assert_eq!(r.rows[0].1, 0.0);
    }

    #[test]
    fn logistic_decreases() {
        let cfg = ProbeConfig {
            objective: ProbeObjective::Logistic,
            dims: 8,
            t_list: vec![10, 100, 1000],
            seeds: vec![1, 2],
            grad_noise: 0.1,
            ..Default::default()
        };
        let r = convergence_probe(&cfg, Exec::default()).unwrap();
        assert!(r.rows[2].1 < r.rows[0].1);
        assert_eq!(r.to_records().lines().count(), 3);
    }

    #[test]
    fn rejects_bad_horizons() {
        let cfg = ProbeConfig {
            t_list: vec![10, 10],
            ..Default::default()
        };
        assert!(convergence_probe(&cfg, Exec::Sequential).is_err());
    }
}
