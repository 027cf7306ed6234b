//! Central finite-difference oracle for the reverse-mode engine.
//!
//! The oracle only evaluates forward values. A non-scalar output `y` is
//! projected onto fixed random weights `w`; the analytic side differentiates
//! `sum(w * y)` on the graph while the numeric side forms `w . (y+ - y-) / 2h`
//! in double precision from the forward passes alone. Coordinates whose
//! perturbation crosses a kink (relu sign, clamp boundary, argmax, sort order)
//! are skipped: the derivative is not defined there.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Fraction of coordinates that must meet `rel_tol`; the rest must meet `abs_tol`.
    pub min_rel_fraction: f64,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_tol: 1e-5,
            min_rel_fraction: 0.99,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub rel_ok: usize,
    pub abs_ok: usize,
    pub skipped: usize,
    pub failures: Vec<Mismatch>,
    min_rel_fraction: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0
            && self.failures.is_empty()
            && self.rel_ok as f64 >= self.min_rel_fraction * self.checked as f64
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.rel_ok += other.rel_ok;
        self.abs_ok += other.abs_ok;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
        self.min_rel_fraction = self.min_rel_fraction.max(other.min_rel_fraction);
    }

    pub fn first_failure(&self) -> Option<&Mismatch> {
        self.failures.first()
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tensor, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).clone(), g.branch_signature()))
}

/// Compares the analytic gradient of `f` at `inputs` against central differences.
pub fn check_gradient<F, R>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_signature = g.branch_signature();
    let out_shape = g.value(out).shape().to_vec();
    let weights = Tensor::random(&out_shape, 0.5, 1.5, rng);
    let w = g.constant(weights.clone());
    let projected = g.mul(out, w)?;
    let root = g.sum(projected)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        min_rel_fraction: cfg.min_rel_fraction,
        ..Default::default()
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input);
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        if let Some(limit) = cfg.max_coords {
            while coords.len() > limit {
                let i = rng.gen_range(0..coords.len());
                coords.swap_remove(i);
            }
            coords.sort_unstable();
        }
        for coord in coords {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[coord] += cfg.step;
            let (plus, sig_plus) = evaluate(&f, &shifted)?;
            shifted[k].data_mut()[coord] -= 2.0 * cfg.step;
            let (minus, sig_minus) = evaluate(&f, &shifted)?;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped += 1;
                continue;
            }
            let numeric: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(weights.data())
                .map(|((p, m), w)| w * (p - m))
                .sum::<f64>()
                / (2.0 * cfg.step);
            let a = analytic.data()[coord];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            if err <= cfg.rel_tol * scale {
                report.rel_ok += 1;
            } else if err < cfg.abs_tol {
                report.abs_ok += 1;
            } else {
                report.failures.push(Mismatch {
                    input: k,
                    coord,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
