//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Matrix, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Number of parameter entries to probe, sampled uniformly over all inputs.
    pub samples: usize,
    /// Finite-difference half step.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` must build a scalar loss from the given input vars, which are
/// registered as trainable leaves in input order.
pub fn gradcheck<F>(inputs: &[Matrix], f: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Matrix]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.param(m.clone())).collect();
        let loss = f(&mut g, &vars);
        g.scalar_value(loss)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let total: usize = inputs.iter().map(|m| m.len()).sum();
    assert!(total > 0, "gradcheck: no parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perturbed: Vec<Matrix> = inputs.to_vec();
    let mut entries = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mut flat = rng.random_range(0..total);
        let mut input = 0;
        while flat >= inputs[input].len() {
            flat -= inputs[input].len();
            input += 1;
        }
        let cols = inputs[input].ncols();
        let (row, col) = (flat / cols, flat % cols);
        let analytic = grads.get(vars[input]).map_or(0.0, |m| m[[row, col]]);

        let orig = inputs[input][[row, col]];
        perturbed[input][[row, col]] = orig + cfg.step;
        let plus = eval(&perturbed);
        perturbed[input][[row, col]] = orig - cfg.step;
        let minus = eval(&perturbed);
        perturbed[input][[row, col]] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let rel_error = (analytic - numeric).abs() / denom;
        entries.push(GradCheckEntry {
            input,
            row,
            col,
            analytic,
            numeric,
            rel_error,
        });
    }
    GradCheckReport { entries }
}
