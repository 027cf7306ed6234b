//! Area-constrained mask optimisation and the extremal-area sweep.
//!
//! For each target area `a` the engine maximises
//! `score(m) - lambda * R_a(m) / n` over the parameter mask with projected
//! momentum ascent, starting from all ones. The area loss is divided by the
//! mask size so the multiplier schedule does not depend on resolution. The
//! sweep then reports the smallest area whose mask keeps the score above the
//! threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::area::{achieved_area, area_loss, area_loss_value, AreaTarget};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::{MaskGenerator, MaskParams, SmoothMaskConfig, DEFAULT_INV_TEMPERATURE};
use crate::models::ScorerModel;
use crate::perturbation::{default_sigma_max, PerturbationKind, PerturbationPyramid, DEFAULT_LEVELS};
use crate::tensor::Tensor;

/// Default area grid for a sweep.
pub const DEFAULT_AREAS: [f64; 6] = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Keep the score with as little of the image as possible.
    #[default]
    Preservation,
    /// Destroy the score by perturbing as little as possible.
    Deletion,
    /// Preservation score minus deletion score.
    Hybrid,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "preservation" => Ok(Objective::Preservation),
            "deletion" => Ok(Objective::Deletion),
            "hybrid" => Ok(Objective::Hybrid),
            other => Err(format!("unknown objective {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    /// Initial multiplier of the area loss, doubled at 1/3 and 2/3 of the run.
    pub lambda0: f64,
    pub inv_temperature: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 1600,
            momentum: 0.9,
            learning_rate: 0.05,
            lambda0: 300.0,
            inv_temperature: DEFAULT_INV_TEMPERATURE,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("lambda0", self.lambda0),
            ("inverse temperature", self.inv_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Multiplier in force at iteration `t`.
    pub fn lambda(&self, t: usize) -> f64 {
        let breakpoints = [self.iterations / 3, 2 * self.iterations / 3];
        let passed = breakpoints.iter().filter(|&&b| t >= b).count();
        self.lambda0 * (1u32 << passed) as f64
    }
}

/// Everything that determines a sweep besides the model and image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub objective: Objective,
    pub schedule: Schedule,
    /// Mask kernel radius, sample step and crop margin; derived from the
    /// image size when absent.
    pub sigma: Option<f64>,
    pub step: Option<usize>,
    pub margin: Option<usize>,
    pub perturbation: PerturbationKind,
    pub sigma_max: Option<f64>,
    pub levels: usize,
    /// Preservation threshold as a fraction of the unperturbed score.
    pub tau: f64,
    /// Deletion threshold: an area qualifies once the score has dropped by
    /// this fraction.
    pub deletion_tau: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            objective: Objective::Preservation,
            schedule: Schedule::default(),
            sigma: None,
            step: None,
            margin: None,
            perturbation: PerturbationKind::GaussianBlur,
            sigma_max: None,
            levels: DEFAULT_LEVELS,
            tau: 1.0,
            deletion_tau: 0.5,
        }
    }
}

impl EngineConfig {
    pub fn mask_config(&self, h: usize, w: usize) -> Result<SmoothMaskConfig> {
        let base = SmoothMaskConfig::for_image(h, w);
        let step = self.step.unwrap_or(base.step);
        let sigma = self.sigma.unwrap_or(step as f64);
        let margin = self.margin.unwrap_or(sigma.ceil() as usize);
        SmoothMaskConfig::new(h, w, sigma, step, margin, 1.0 / self.schedule.inv_temperature)
    }

    pub fn resolved_sigma_max(&self, h: usize, w: usize) -> f64 {
        self.sigma_max.unwrap_or(match self.perturbation {
            PerturbationKind::GaussianBlur => default_sigma_max(h, w),
            PerturbationKind::FadeToBlack => 1.0,
        })
    }

    pub fn pyramid(&self, image: &Tensor) -> Result<PerturbationPyramid> {
        let (h, w) = image
            .spatial()
            .ok_or_else(|| Error::invalid("image must be [C, H, W]"))?;
        PerturbationPyramid::build(image, self.resolved_sigma_max(h, w), self.levels, self.perturbation)
    }

    /// Checks every setting before any optimisation starts.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        self.schedule.validate()?;
        self.mask_config(h, w)?;
        if self.levels == 0 {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        let sm = self.resolved_sigma_max(h, w);
        if !(sm > 0.0) || (self.perturbation == PerturbationKind::FadeToBlack && sm > 1.0) {
            return Err(Error::invalid(format!(
                "sigma_max {sm} invalid for {:?}",
                self.perturbation
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.deletion_tau) {
            return Err(Error::invalid(format!(
                "deletion tau {} outside [0, 1]",
                self.deletion_tau
            )));
        }
        Ok(())
    }
}

/// Result of one area-constrained optimisation.
#[derive(Clone, Debug)]
pub struct MaskOutcome {
    pub params: MaskParams,
    /// Objective value before each step.
    pub trace: Vec<f64>,
    /// Normalised area loss `R_a / n` before each step.
    pub residual_trace: Vec<f64>,
}

/// Records `score(m)` for the chosen game.
pub fn objective_score(
    g: &mut Graph,
    model: &dyn ScorerModel,
    pyramid: &PerturbationPyramid,
    mask: Var,
    objective: Objective,
) -> Result<Var> {
    let preserve = |g: &mut Graph| -> Result<Var> {
        let x = pyramid.apply(g, mask)?;
        model.forward(g, x)
    };
    let delete = |g: &mut Graph| -> Result<Var> {
        let inv = g.complement(mask)?;
        let x = pyramid.apply(g, inv)?;
        model.forward(g, x)
    };
    match objective {
        Objective::Preservation => preserve(g),
        Objective::Deletion => {
            let d = delete(g)?;
            g.scale(d, -1.0)
        }
        Objective::Hybrid => {
            let p = preserve(g)?;
            let d = delete(g)?;
            g.sub(p, d)
        }
    }
}

fn abort(iteration: usize, err: Error, trace: &[f64]) -> Error {
    match err {
        Error::NonFinite(op) => Error::NumericalAbort {
            iteration,
            reason: format!("non-finite value produced by {op}"),
            trace: trace.to_vec(),
        },
        other => other,
    }
}

/// Maximises `score(m) - lambda(t) R_a(m) / n` by projected momentum ascent
/// from an all-ones parameter mask.
pub fn optimize_mask(
    model: &dyn ScorerModel,
    pyramid: &PerturbationPyramid,
    generator: &MaskGenerator,
    target: &AreaTarget,
    objective: Objective,
    schedule: &Schedule,
) -> Result<MaskOutcome> {
    schedule.validate()?;
    let cfg = generator.config();
    let n = cfg.out_h * cfg.out_w;
    if target.n != n {
        return Err(Error::invalid(format!(
            "area target over {} elements for a {}x{} mask",
            target.n, cfg.out_h, cfg.out_w
        )));
    }
    let shape = generator.param_shape();
    let mut params = Tensor::ones(&shape);
    let mut velocity = vec![0.0; params.numel()];
    let mut trace = Vec::with_capacity(schedule.iterations);
    let mut residual_trace = Vec::with_capacity(schedule.iterations);
    for t in 0..schedule.iterations {
        let step = || -> Result<(f64, f64, Tensor)> {
            let mut g = Graph::new();
            let p = g.param(params.clone());
            let m = generator.expand(&mut g, p)?;
            let score = objective_score(&mut g, model, pyramid, m, objective)?;
            let r = area_loss(&mut g, m, target)?;
            let r = g.scale(r, 1.0 / n as f64)?;
            let penalty = g.scale(r, schedule.lambda(t))?;
            let total = g.sub(score, penalty)?;
            let grads = g.backward(total)?;
            Ok((g.value(total).item(), g.value(r).item(), grads.get_or_zeros(p, &params)))
        };
        let (value, residual, grad) = step().map_err(|e| abort(t, e, &trace))?;
        trace.push(value);
        residual_trace.push(residual);
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalAbort {
                iteration: t,
                reason: "non-finite gradient".into(),
                trace,
            });
        }
        for ((p, v), g) in params.data_mut().iter_mut().zip(&mut velocity).zip(grad.data()) {
            *v = schedule.momentum * *v + g;
            *p = (*p + schedule.learning_rate * *v).clamp(0.0, 1.0);
        }
    }
    Ok(MaskOutcome {
        params: MaskParams::new(params)?,
        trace,
        residual_trace,
    })
}

/// One optimised area of a sweep.
#[derive(Clone, Debug)]
pub struct AreaRecord {
    pub area: f64,
    pub params: MaskParams,
    /// Expanded full-resolution mask.
    pub mask: Tensor,
    /// `score(m x)` with the mask preserving.
    pub score: f64,
    /// `score((1 - m) x)` with the mask deleting.
    pub deletion_score: f64,
    /// Normalised area loss `R_a(m) / n` of the final mask.
    pub residual: f64,
    /// Fraction of the mask above one half.
    pub achieved_area: f64,
    pub trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
}

impl AreaRecord {
    /// Score that should grow with the area under the given game.
    pub fn criterion(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Deletion => -self.deletion_score,
            Objective::Preservation | Objective::Hybrid => self.score,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AreaFailure {
    pub area: f64,
    pub message: String,
    pub numerical: bool,
}

#[derive(Clone, Debug)]
pub struct AttributionResult {
    pub objective: Objective,
    /// Successful areas in ascending order.
    pub records: Vec<AreaRecord>,
    pub failures: Vec<AreaFailure>,
    /// Score of the unperturbed image.
    pub full_score: f64,
    /// Threshold on [`AreaRecord::criterion`].
    pub phi0: f64,
    /// Smallest qualifying area; `None` means not extremal at this grid.
    pub a_star: Option<f64>,
    /// Monotonicity below `a_star`; `None` when `a_star` is absent.
    pub monotone: Option<bool>,
}

impl AttributionResult {
    /// Assembles a result from records in any order, selecting the extremal
    /// area and checking monotonicity below it.
    pub fn assemble(
        objective: Objective,
        mut records: Vec<AreaRecord>,
        failures: Vec<AreaFailure>,
        full_score: f64,
        phi0: f64,
    ) -> Self {
        records.sort_by(|a, b| a.area.total_cmp(&b.area));
        let mut result = AttributionResult {
            objective,
            records,
            failures,
            full_score,
            phi0,
            a_star: None,
            monotone: None,
        };
        result.a_star = find_extremal(&result, phi0);
        result.monotone = check_monotonicity(&result).ok();
        result
    }

    /// Summary without masks or traces.
    pub fn summary(&self) -> SweepSummary {
        SweepSummary {
            objective: self.objective,
            areas: self.records.iter().map(|r| r.area).collect(),
            scores: self.records.iter().map(|r| r.score).collect(),
            deletion_scores: self.records.iter().map(|r| r.deletion_score).collect(),
            residuals: self.records.iter().map(|r| r.residual).collect(),
            achieved_areas: self.records.iter().map(|r| r.achieved_area).collect(),
            full_score: self.full_score,
            phi0: self.phi0,
            a_star: self.a_star,
            monotone: self.monotone,
            failures: self.failures.clone(),
            mask_files: Vec::new(),
        }
    }
}

/// Serialisable view of a sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub objective: Objective,
    pub areas: Vec<f64>,
    pub scores: Vec<f64>,
    pub deletion_scores: Vec<f64>,
    pub residuals: Vec<f64>,
    pub achieved_areas: Vec<f64>,
    pub full_score: f64,
    pub phi0: f64,
    pub a_star: Option<f64>,
    pub monotone: Option<bool>,
    pub failures: Vec<AreaFailure>,
    pub mask_files: Vec<String>,
}

/// Smallest recorded area whose criterion reaches `phi0`.
pub fn find_extremal(result: &AttributionResult, phi0: f64) -> Option<f64> {
    result
        .records
        .iter()
        .find(|r| r.criterion(result.objective) >= phi0)
        .map(|r| r.area)
}

/// Whether the criterion is non-decreasing over all areas strictly below `a_star`.
pub fn check_monotonicity(result: &AttributionResult) -> Result<bool> {
    let a_star = result
        .a_star
        .ok_or_else(|| Error::invalid("monotonicity is defined below a*, which is absent"))?;
    Ok(scores_non_decreasing(
        result
            .records
            .iter()
            .filter(|r| r.area < a_star)
            .map(|r| r.criterion(result.objective)),
    ))
}

pub(crate) fn scores_non_decreasing(scores: impl Iterator<Item = f64>) -> bool {
    let s: Vec<f64> = scores.collect();
    s.windows(2).all(|w| w[0] <= w[1])
}

/// Threshold on [`AreaRecord::criterion`] for the configured game.
pub fn threshold(config: &EngineConfig, full_score: f64) -> f64 {
    match config.objective {
        // criterion is minus the deletion score: qualify once it has dropped
        // to (1 - tau_d) of the full score
        Objective::Deletion => -(1.0 - config.deletion_tau) * full_score,
        Objective::Preservation | Objective::Hybrid => config.tau * full_score,
    }
}

fn check_areas(areas: &[f64]) -> Result<()> {
    if areas.is_empty() {
        return Err(Error::invalid("area grid is empty"));
    }
    if let Some(a) = areas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::invalid(format!("area {a} outside (0, 1]")));
    }
    Ok(())
}

/// Optimises one mask per area (in parallel) and selects the extremal area.
pub fn sweep(
    model: &dyn ScorerModel,
    image: &Tensor,
    areas: &[f64],
    config: &EngineConfig,
) -> Result<AttributionResult> {
    check_areas(areas)?;
    if image.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "sweep image",
            lhs: model.input_shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let (h, w) = image.spatial().expect("checked against model input");
    config.validate(h, w)?;
    let pyramid = config.pyramid(image)?;
    let generator = MaskGenerator::new(config.mask_config(h, w)?)?;
    let full_score = model.score(image)?;
    if !full_score.is_finite() {
        return Err(Error::NonFinite("model score"));
    }
    let outcomes: Vec<(f64, Result<AreaRecord>)> = areas
        .par_iter()
        .map(|&a| {
            let record = (|| {
                let target = AreaTarget::new(a, h * w)?;
                let out = optimize_mask(model, &pyramid, &generator, &target, config.objective, &config.schedule)?;
                let mask = generator.expand_tensor(&out.params)?;
                let score = model.score(&pyramid.apply_tensor(&mask)?)?;
                let deletion_score = model.score(&pyramid.apply_tensor(&mask.map(|v| 1.0 - v))?)?;
                Ok(AreaRecord {
                    area: a,
                    residual: area_loss_value(&mask, &target)? / (h * w) as f64,
                    achieved_area: achieved_area(&mask, 0.5),
                    params: out.params,
                    mask,
                    score,
                    deletion_score,
                    trace: out.trace,
                    residual_trace: out.residual_trace,
                })
            })();
            (a, record)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (area, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(AreaFailure {
                area,
                numerical: e.is_numerical(),
                message: e.to_string(),
            }),
        }
    }
    Ok(AttributionResult::assemble(
        config.objective,
        records,
        failures,
        full_score,
        threshold(config, full_score),
    ))
}

/// Source of sweeps, so evaluation can run against a substitute engine.
pub trait Attributor: Sync {
    fn attribute(&self, model: &dyn ScorerModel, image: &Tensor, areas: &[f64]) -> Result<AttributionResult>;
}

/// The optimisation engine behind [`sweep`].
#[derive(Clone, Debug, Default)]
pub struct Engine {
    pub config: EngineConfig,
}

impl Attributor for Engine {
    fn attribute(&self, model: &dyn ScorerModel, image: &Tensor, areas: &[f64]) -> Result<AttributionResult> {
        sweep(model, image, areas, &self.config)
    }
}
