//! Extremal perturbations over the channels of an intermediate layer.
//!
//! A channel mask scales each activation channel of a split model and is
//! optimised like a spatial mask, except that it needs no smoothing: the area
//! constraint acts directly on the `K`-vector with an integer target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::area::{area_loss, AreaTarget};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::SplitModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub iterations: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    /// Final multiplier of the area loss.
    pub lambda_max: f64,
    /// Fraction of the run over which the multiplier ramps up from zero.
    pub ramp_fraction: f64,
}

impl Default for ChannelSchedule {
    fn default() -> Self {
        ChannelSchedule {
            iterations: 300,
            momentum: 0.9,
            learning_rate: 1e-2,
            lambda_max: 1500.0,
            ramp_fraction: 0.5,
        }
    }
}

impl ChannelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_max > 0.0) {
            return Err(Error::invalid("learning rate and lambda must be > 0"));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "ramp fraction {} outside (0, 1]",
                self.ramp_fraction
            )));
        }
        Ok(())
    }

    pub fn lambda(&self, t: usize) -> f64 {
        let ramp = self.ramp_fraction * self.iterations as f64;
        self.lambda_max * (t as f64 / ramp).min(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelOutcome {
    /// Channel mask in `[0, 1]^K`.
    pub mask: Tensor,
    /// Tail score with the final mask applied.
    pub score: f64,
    /// Objective value before each step.
    pub trace: Vec<f64>,
}

/// Tail score of `activations` with channel `k` scaled by `mask[k]`.
pub fn masked_tail_score(split: &dyn SplitModel, activations: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(activations.clone());
    let m = g.constant(mask.clone());
    let scaled = g.channel_scale(a, m)?;
    let s = split.tail(&mut g, scaled)?;
    Ok(g.value(s).item())
}

/// Maximises `tail(m * head(x)) - lambda(t) R_k(m) / K` over channel masks
/// keeping `count` channels, from an all-ones start.
pub fn optimize_channel_mask(
    split: &dyn SplitModel,
    image: &Tensor,
    count: usize,
    schedule: &ChannelSchedule,
) -> Result<ChannelOutcome> {
    schedule.validate()?;
    let activations = split.activations(image)?;
    optimize_on_activations(split, &activations, count, schedule)
}

fn optimize_on_activations(
    split: &dyn SplitModel,
    activations: &Tensor,
    count: usize,
    schedule: &ChannelSchedule,
) -> Result<ChannelOutcome> {
    let k = split.activation_shape()[0];
    if count == 0 || count > k {
        return Err(Error::invalid(format!("channel count {count} outside 1..={k}")));
    }
    let target = AreaTarget::count(count, k)?;
    let mut mask = Tensor::ones(&[k]);
    let mut velocity = vec![0.0; k];
    let mut trace = Vec::with_capacity(schedule.iterations);
    for t in 0..schedule.iterations {
        let step = || -> Result<(f64, Tensor)> {
            let mut g = Graph::new();
            let a = g.constant(activations.clone());
            let m = g.param(mask.clone());
            let scaled = g.channel_scale(a, m)?;
            let score = split.tail(&mut g, scaled)?;
            let r = area_loss(&mut g, m, &target)?;
            let penalty = g.scale(r, schedule.lambda(t) / k as f64)?;
            let total = g.sub(score, penalty)?;
            let grads = g.backward(total)?;
            Ok((g.value(total).item(), grads.get_or_zeros(m, &mask)))
        };
        let (value, grad) = step().map_err(|e| match e {
            Error::NonFinite(op) => Error::NumericalAbort {
                iteration: t,
                reason: format!("non-finite value produced by {op}"),
                trace: trace.clone(),
            },
            other => other,
        })?;
        trace.push(value);
        for ((p, v), g) in mask.data_mut().iter_mut().zip(&mut velocity).zip(grad.data()) {
            *v = schedule.momentum * *v + g;
            *p = (*p + schedule.learning_rate * *v).clamp(0.0, 1.0);
        }
    }
    let score = masked_tail_score(split, activations, &mask)?;
    Ok(ChannelOutcome { mask, score, trace })
}

#[derive(Clone, Debug)]
pub struct ChannelRecord {
    pub count: usize,
    pub outcome: ChannelOutcome,
}

#[derive(Clone, Debug)]
pub struct ChannelSweep {
    pub records: Vec<ChannelRecord>,
    pub full_score: f64,
    pub phi0: f64,
    /// Smallest qualifying channel count; `None` when no count reaches `phi0`.
    pub a_star: Option<usize>,
}

/// Optimises one channel mask per count in `grid` and returns the smallest
/// count whose masked score reaches `phi0`.
pub fn find_extremal_channels(
    split: &dyn SplitModel,
    image: &Tensor,
    grid: &[usize],
    phi0: f64,
    schedule: &ChannelSchedule,
) -> Result<ChannelSweep> {
    if grid.is_empty() {
        return Err(Error::invalid("channel grid is empty"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "channel grid {grid:?} is not strictly ascending"
        )));
    }
    let k = split.activation_shape()[0];
    if let Some(&c) = grid.iter().find(|&&c| c == 0 || c > k) {
        return Err(Error::invalid(format!("channel count {c} outside 1..={k}")));
    }
    schedule.validate()?;
    let activations = split.activations(image)?;
    let full_score = split.tail_score(&activations)?;
    use rayon::prelude::*;
    let records = grid
        .par_iter()
        .map(|&count| {
            Ok(ChannelRecord {
                count,
                outcome: optimize_on_activations(split, &activations, count, schedule)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let a_star = records.iter().find(|r| r.outcome.score >= phi0).map(|r| r.count);
    Ok(ChannelSweep {
        records,
        full_score,
        phi0,
        a_star,
    })
}

/// `sum_k mask[k] * activations[k]`, an `[H, W]` map.
pub fn saliency_overlay(mask: &Tensor, activations: &Tensor) -> Result<Tensor> {
    let &[k, h, w] = activations.shape() else {
        return Err(Error::invalid(format!(
            "activations must be [K, H, W], got {:?}",
            activations.shape()
        )));
    };
    if mask.numel() != k {
        return Err(Error::ShapeMismatch {
            op: "saliency_overlay",
            lhs: mask.shape().to_vec(),
            rhs: activations.shape().to_vec(),
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (c, &m) in mask.data().iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&activations.data()[c * plane..(c + 1) * plane]) {
            *o += m * a;
        }
    }
    Tensor::new(&[h, w], out)
}

/// Mean of per-image channel masks and its strongest channel (lowest index on ties).
pub fn per_class_mask(masks: &[Tensor]) -> Result<(Tensor, usize)> {
    let first = masks.first().ok_or_else(|| Error::invalid("no masks to aggregate"))?;
    let mut sum = vec![0.0; first.numel()];
    for m in masks {
        if m.numel() != first.numel() {
            return Err(Error::ShapeMismatch {
                op: "per_class_mask",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        for (s, v) in sum.iter_mut().zip(m.data()) {
            *s += v;
        }
    }
    let n = masks.len() as f64;
    let mean = Tensor::new(first.shape(), sum.into_iter().map(|s| s / n).collect())?;
    let best = mean.argmax();
    Ok((mean, best))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Radius of the L2 ball the image is projected onto after each step.
    pub norm: f64,
    pub seed: u64,
}

impl InversionConfig {
    /// Budget of an image with RMS value one half.
    pub fn for_shape(shape: [usize; 3], steps: usize) -> Self {
        InversionConfig {
            steps,
            learning_rate: 0.1,
            norm: 0.5 * (shape.iter().product::<usize>() as f64).sqrt(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InversionOutcome {
    pub image: Tensor,
    /// Objective at the start and after each step.
    pub trace: Vec<f64>,
}

fn project_to_ball(t: &mut Tensor, radius: f64) {
    let n = t.norm();
    if n > radius {
        let s = radius / n;
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

/// Finds an image whose activations align with `target`: projected gradient
/// ascent on `<target, head(I)>` within an L2 ball.
pub fn feature_inversion(
    split: &dyn SplitModel,
    target: &Tensor,
    config: &InversionConfig,
) -> Result<InversionOutcome> {
    if target.shape() != split.activation_shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_inversion",
            lhs: split.activation_shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if !(config.norm > 0.0) || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("inversion norm and learning rate must be > 0"));
    }
    let shape = split.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut image = Tensor::random(&shape, -1.0, 1.0, &mut rng);
    let scale = 0.5 * config.norm / image.norm();
    image.data_mut().iter_mut().for_each(|v| *v *= scale);

    let evaluate = |image: &Tensor| -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let x = g.param(image.clone());
        let a = split.head(&mut g, x)?;
        let t = g.constant(target.clone());
        let prod = g.mul(a, t)?;
        let obj = g.sum(prod)?;
        let grads = g.backward(obj)?;
        Ok((g.value(obj).item(), grads.get_or_zeros(x, image)))
    };
    let mut trace = Vec::with_capacity(config.steps + 1);
    let abort = |iteration: usize, trace: &[f64]| Error::NumericalAbort {
        iteration,
        reason: "feature inversion objective diverged".into(),
        trace: trace.to_vec(),
    };
    let (mut value, mut grad) = evaluate(&image).map_err(|_| abort(0, &trace))?;
    trace.push(value);
    for t in 0..config.steps {
        for (p, g) in image.data_mut().iter_mut().zip(grad.data()) {
            *p += config.learning_rate * g;
        }
        project_to_ball(&mut image, config.norm);
        (value, grad) = evaluate(&image).map_err(|_| abort(t + 1, &trace))?;
        if !value.is_finite() {
            return Err(abort(t + 1, &trace));
        }
        trace.push(value);
    }
    Ok(InversionOutcome { image, trace })
}
