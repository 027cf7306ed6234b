//! Invariant suites run by the `selftest` command and the acceptance tests.
//!
//! Each suite runs seeded random cases and stops at the first
//! counterexample, which it reports in readable form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::area::{area_loss, AreaTarget};
use crate::error::Result;
use crate::gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Padding, ReduceOp, Var};
use crate::mask::{empirical_lipschitz, smax, MaskGenerator, MaskParams, SmoothMaskConfig};
use crate::models::{planted_channel_model, planted_region_model, seeded_conv_model, Rect, ScorerModel};
use crate::perturbation::{PerturbationKind, PerturbationPyramid};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub suite: String,
    /// Cases run before stopping.
    pub cases: usize,
    pub counterexample: Option<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type Trial = (Vec<Tensor>, Build);

fn rand_t(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::random(shape, lo, hi, r)
}

fn unary(r: &mut ChaCha8Rng, f: fn(&mut Graph, Var) -> Result<Var>) -> Result<Trial> {
    Ok((vec![rand_t(r, &[3, 4], -2.0, 2.0)], Box::new(move |g, v| f(g, v[0]))))
}

fn binary(r: &mut ChaCha8Rng, f: fn(&mut Graph, Var, Var) -> Result<Var>, positive_rhs: bool) -> Result<Trial> {
    let a = rand_t(r, &[3, 4], -2.0, 2.0);
    let b = if positive_rhs {
        rand_t(r, &[3, 4], 0.5, 2.0)
    } else {
        rand_t(r, &[3, 4], -2.0, 2.0)
    };
    Ok((vec![a, b], Box::new(move |g, v| f(g, v[0], v[1]))))
}

fn model_trial(model: impl ScorerModel + 'static, r: &mut ChaCha8Rng) -> Result<Trial> {
    let x = rand_t(r, &model.input_shape(), 0.0, 1.0);
    Ok((vec![x], Box::new(move |g, v| model.forward(g, v[0]))))
}

fn pyramid_trial(r: &mut ChaCha8Rng, kind: PerturbationKind, sigma_max: f64) -> Result<Trial> {
    let image = rand_t(r, &[2, 6, 7], 0.0, 1.0);
    let pyramid = PerturbationPyramid::build(&image, sigma_max, 8, kind)?;
    Ok((
        vec![rand_t(r, &[6, 7], 0.05, 0.95)],
        Box::new(move |g, v| pyramid.apply(g, v[0])),
    ))
}

/// Every differentiable operation and every zoo model, with a generator of
/// random trials.
#[allow(clippy::type_complexity)]
fn gradient_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Result<Trial>)> {
    vec![
        ("add", |r| binary(r, Graph::add, false)),
        ("sub", |r| binary(r, Graph::sub, false)),
        ("mul", |r| binary(r, Graph::mul, false)),
        ("div", |r| binary(r, Graph::div, true)),
        ("exp", |r| unary(r, Graph::exp)),
        ("relu", |r| unary(r, Graph::relu)),
        ("clamp", |r| unary(r, |g, a| g.clamp(a, -1.0, 1.0))),
        ("scale", |r| unary(r, |g, a| g.scale(a, -1.5))),
        ("affine", |r| unary(r, |g, a| g.affine(a, 0.7, 0.2))),
        ("complement", |r| unary(r, Graph::complement)),
        ("sum", |r| unary(r, Graph::sum)),
        ("mean", |r| unary(r, Graph::mean)),
        ("sum over axis", |r| unary(r, |g, a| g.reduce(ReduceOp::Sum, a, &[1]))),
        ("mean over axis", |r| unary(r, |g, a| g.reduce(ReduceOp::Mean, a, &[0]))),
        ("max over axis", |r| unary(r, |g, a| g.reduce(ReduceOp::Max, a, &[1]))),
        ("sort", |r| unary(r, |g, a| Ok(g.sort_with_permutation(a)?.0))),
        ("reshape", |r| unary(r, |g, a| g.reshape(a, &[2, 6]))),
        ("conv2d zero padding", |r| {
            let x = rand_t(r, &[2, 5, 6], -1.0, 1.0);
            let k = rand_t(r, &[3, 2, 3, 3], -1.0, 1.0);
            Ok((vec![x, k], Box::new(|g, v| g.conv2d(v[0], v[1], Padding::Zero))))
        }),
        ("conv2d replicate padding", |r| {
            let x = rand_t(r, &[2, 5, 6], -1.0, 1.0);
            let k = rand_t(r, &[2, 2, 3, 5], -1.0, 1.0);
            Ok((vec![x, k], Box::new(|g, v| g.conv2d(v[0], v[1], Padding::Replicate))))
        }),
        ("conv2d depthwise", |r| {
            let x = rand_t(r, &[2, 5, 6], -1.0, 1.0);
            let k = rand_t(r, &[3, 3], -1.0, 1.0);
            Ok((vec![x, k], Box::new(|g, v| g.conv2d(v[0], v[1], Padding::Replicate))))
        }),
        ("channel scale", |r| {
            let a = rand_t(r, &[3, 2, 4], -1.0, 1.0);
            let m = rand_t(r, &[3], 0.0, 1.0);
            Ok((vec![a, m], Box::new(|g, v| g.channel_scale(v[0], v[1]))))
        }),
        ("channel bias", |r| {
            let a = rand_t(r, &[3, 2, 4], -1.0, 1.0);
            let b = rand_t(r, &[3], -1.0, 1.0);
            Ok((vec![a, b], Box::new(|g, v| g.channel_bias(v[0], v[1]))))
        }),
        ("matvec", |r| {
            let w = rand_t(r, &[4, 6], -1.0, 1.0);
            let x = rand_t(r, &[2, 3], -1.0, 1.0);
            Ok((vec![w, x], Box::new(|g, v| g.matvec(v[0], v[1]))))
        }),
        ("avg pool", |r| {
            let x = rand_t(r, &[2, 4, 6], -1.0, 1.0);
            Ok((vec![x], Box::new(|g, v| g.avg_pool(v[0], 2))))
        }),
        ("area loss", |r| {
            let n = r.gen_range(2..=12);
            let target = AreaTarget::new(r.gen_range(0.0..=1.0), n)?;
            let m = rand_t(r, &[n], 0.0, 1.0);
            Ok((vec![m], Box::new(move |g, v| area_loss(g, v[0], &target))))
        }),
        ("mask expansion", |r| {
            let step = r.gen_range(1..=3);
            // sharper temperatures are covered in the mask tests with a
            // finer difference step; at a 1e-3 step T = 0.5 keeps the
            // finite difference itself accurate to 1e-3
            let cfg = SmoothMaskConfig::new(12, 10, step as f64, step, step, 0.5)?;
            let gen = MaskGenerator::new(cfg)?;
            let p = rand_t(r, &gen.param_shape(), 0.05, 0.95);
            Ok((vec![p], Box::new(move |g, v| gen.expand(g, v[0]))))
        }),
        ("blur pyramid", |r| {
            pyramid_trial(r, PerturbationKind::GaussianBlur, 2.5)
        }),
        ("fade pyramid", |r| pyramid_trial(r, PerturbationKind::FadeToBlack, 1.0)),
        ("seeded conv model", |r| {
            let seed = r.gen();
            model_trial(seeded_conv_model([2, 6, 6], 3, 2, seed)?, r)
        }),
        ("planted channel model", |r| {
            let seed = r.gen();
            model_trial(planted_channel_model([2, 6, 6], 4, &[1, 2], seed)?, r)
        }),
        ("planted region model", |r| {
            let rect = Rect::new(r.gen_range(0..3), r.gen_range(0..3), 3, 2);
            model_trial(planted_region_model([2, 6, 6], rect, 2.0)?, r)
        }),
    ]
}

/// Central-difference checks of every differentiable operation and every
/// zoo model, `trials` random inputs each. One outcome per case.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let cfg = GradCheckConfig {
        max_coords: Some(32),
        ..GradCheckConfig::default()
    };
    gradient_cases()
        .into_par_iter()
        .enumerate()
        .map(|(i, (name, make))| {
            let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let suite = format!("gradient: {name}");
            let mut total = GradCheckReport::default();
            for t in 0..trials {
                let (inputs, build) = make(&mut r)?;
                let report = check_gradient(&inputs, build, &cfg, &mut r)?;
                if let Some(m) = report.first_failure() {
                    return Ok(SuiteOutcome {
                        suite,
                        cases: t + 1,
                        counterexample: Some(format!(
                            "trial {t}, input {} coordinate {}: analytic {:.6e}, finite difference {:.6e}",
                            m.input, m.coord, m.analytic, m.numeric
                        )),
                    });
                }
                total.merge(report);
            }
            // the relative tolerance applies to a fraction of all coordinates checked
            let counterexample = (!total.passed()).then(|| {
                format!(
                    "{} of {} coordinates within relative tolerance ({} skipped at kinks)",
                    total.rel_ok, total.checked, total.skipped
                )
            });
            Ok(SuiteOutcome {
                suite,
                cases: trials,
                counterexample,
            })
        })
        .collect()
}

fn lemma_generators() -> Result<Vec<MaskGenerator>> {
    [
        (32, 32, 2.0, 2, 2),
        (24, 20, 3.0, 4, 3),
        (16, 16, 1.0, 1, 0),
        (40, 36, 5.0, 3, 4),
        (21, 17, 2.5, 2, 1),
    ]
    .into_iter()
    .map(|(h, w, sigma, step, b)| MaskGenerator::new(SmoothMaskConfig::new(h, w, sigma, step, b, 0.05)?))
    .collect()
}

/// Hard max-convolution on random parameter masks: it dominates the
/// upsampled samples, keeps unit samples at exactly one, and is no steeper
/// than the sampled kernel.
pub fn lemma_suite(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let gens = lemma_generators()?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let fail = |t: usize, msg: String| SuiteOutcome {
        suite: "max-convolution".into(),
        cases: t + 1,
        counterexample: Some(format!("trial {t}: {msg}")),
    };
    for t in 0..trials {
        let gen = &gens[t % gens.len()];
        let shape = gen.param_shape();
        let mut values = Tensor::random(&shape, 0.0, 1.0, &mut r);
        for v in values.data_mut() {
            if r.gen_bool(0.25) {
                *v = 1.0;
            }
        }
        let params = MaskParams::new(values)?;
        let m = gen.max_conv(&params)?;
        let up = gen.upsample_samples(&params);
        if let Some(i) = (0..m.numel()).find(|&i| m.data()[i] < up.data()[i]) {
            return Ok(fail(
                t,
                format!("pixel {i}: mask {} below sample {}", m.data()[i], up.data()[i]),
            ));
        }
        let (h, w) = (gen.config().out_h, gen.config().out_w);
        let s = gen.config().step;
        for (j, &v) in params.tensor().data().iter().enumerate() {
            let (y, x) = (j / shape[1] * s, j % shape[1] * s);
            if v == 1.0 && y < h && x < w && m.data()[y * w + x] != 1.0 {
                return Ok(fail(
                    t,
                    format!("unit sample at ({y}, {x}) expands to {}", m.data()[y * w + x]),
                ));
            }
        }
        let (got, bound) = (empirical_lipschitz(&m), gen.kernel_lipschitz());
        if got > bound + 1e-6 {
            return Ok(fail(
                t,
                format!("Lipschitz constant {got} exceeds kernel bound {bound}"),
            ));
        }
    }
    Ok(SuiteOutcome {
        suite: "max-convolution".into(),
        cases: trials,
        counterexample: None,
    })
}

/// Temperature limits of the smooth max: the mean when hot, the maximum
/// when cold, and the cold expansion agrees with hard max-convolution.
pub fn smax_suite(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let fail = |t: usize, msg: String| SuiteOutcome {
        suite: "smooth max".into(),
        cases: t + 1,
        counterexample: Some(format!("trial {t}: {msg}")),
    };
    for t in 0..trials {
        let len = r.gen_range(1..=64);
        let window: Vec<f64> = (0..len).map(|_| r.gen_range(0.0..=1.0)).collect();
        let mean = window.iter().sum::<f64>() / len as f64;
        let max = window.iter().copied().fold(f64::MIN, f64::max);
        let hot = smax(&window, 1e6);
        if (hot - mean).abs() >= 1e-6 {
            return Ok(fail(t, format!("{window:?}: hot smax {hot} vs mean {mean}")));
        }
        let cold = smax(&window, 1e-4);
        if (cold - max).abs() >= 1e-3 {
            return Ok(fail(t, format!("{window:?}: cold smax {cold} vs max {max}")));
        }
    }
    let mut cases = trials;
    for gen in lemma_generators()? {
        let mut cfg = gen.config().clone();
        cfg.temperature = 1e-4;
        let cold = MaskGenerator::new(cfg)?;
        let params = MaskParams::new(Tensor::random(&cold.param_shape(), 0.0, 1.0, &mut r))?;
        let gap = cold.expand_tensor(&params)?.max_abs_diff(&cold.max_conv(&params)?);
        cases += 1;
        if gap >= 1e-3 {
            return Ok(fail(
                cases - 1,
                format!("cold expansion differs from max-convolution by {gap}"),
            ));
        }
    }
    Ok(SuiteOutcome {
        suite: "smooth max".into(),
        cases,
        counterexample: None,
    })
}

/// All suites at their standard sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteOutcome>> {
    let mut out = gradient_suite(100, seed)?;
    out.push(lemma_suite(50, seed)?);
    out.push(smax_suite(200, seed)?);
    Ok(out)
}
