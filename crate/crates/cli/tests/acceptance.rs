//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS or FAIL line. The process exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use extremal::area::{area_loss_value, AreaTarget};
use extremal::channel::{find_extremal_channels, optimize_channel_mask, ChannelSchedule};
use extremal::engine::{
    check_monotonicity, sweep, AreaRecord, AttributionResult, Attributor, Engine, EngineConfig, Objective,
    DEFAULT_AREAS,
};
use extremal::evaluation::{monotonicity_rate, run_pointing_benchmark, saliency_from_masks, POINTING_AREAS};
use extremal::imageio::{load_mask, save_mask_png};
use extremal::mask::MaskParams;
use extremal::models::{planted_channel_model, Rect, ScorerModel};
use extremal::perturbation::PerturbationKind;
use extremal::{selftest, synth, Tensor};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs `f` with rayon limited to one thread.
fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn suite_verdict(outcomes: &[selftest::SuiteOutcome]) -> Verdict {
    let cases: usize = outcomes.iter().map(|o| o.cases).sum();
    match outcomes.iter().find(|o| !o.passed()) {
        Some(o) => Err(format!(
            "{}: {}",
            o.suite,
            o.counterexample.as_deref().unwrap_or("failed")
        )),
        None => Ok(format!("{} suites, {cases} cases", outcomes.len())),
    }
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let outcomes = selftest::gradient_suite(100, 2024).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = suite_verdict(&outcomes)?;
    check(elapsed < Duration::from_secs(30), format!("{detail} in {elapsed:.1?}"))
}

fn max_convolution_lemma() -> Verdict {
    suite_verdict(&[selftest::lemma_suite(50, 2024).map_err(|e| e.to_string())?])
}

fn smax_limits() -> Verdict {
    suite_verdict(&[selftest::smax_suite(200, 2024).map_err(|e| e.to_string())?])
}

/// The 64 x 64 planted-region instance: a box covering a tenth of the image.
fn planted_region() -> synth::RegionInstance {
    synth::region_instance([3, 64, 64], Rect::new(20, 18, 17, 24), 0).expect("planted instance")
}

fn planted_config() -> EngineConfig {
    EngineConfig {
        perturbation: PerturbationKind::FadeToBlack,
        tau: 0.9,
        ..EngineConfig::default()
    }
}

/// Squared distance between the ascending sort and the reference vector,
/// with the sort done by insertion.
fn naive_area_loss(mask: &[f64], a: f64) -> f64 {
    let mut s = mask.to_vec();
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = s.len();
    let ones = ((a * n as f64 + 0.5 + 1e-9).floor() as usize).min(n);
    s.iter()
        .enumerate()
        .map(|(i, v)| {
            let r = if i < n - ones { 0.0 } else { 1.0 };
            (v - r) * (v - r)
        })
        .sum()
}

fn area_constraint() -> Verdict {
    let inst = planted_region();
    let result = sweep(&inst.model, &inst.image, &DEFAULT_AREAS, &planted_config()).map_err(|e| e.to_string())?;
    if !result.failures.is_empty() {
        return Err(format!("failed areas: {:?}", result.failures));
    }
    let worst_area = result
        .records
        .iter()
        .map(|r| (r.achieved_area - r.area).abs())
        .fold(0.0, f64::max);
    let worst_residual = result.records.iter().map(|r| r.residual).fold(0.0, f64::max);

    let values = [0.0, 0.25, 0.5, 0.75, 1.0];
    let targets = [0.05, 0.1, 0.2, 0.4, 0.8];
    let mut enumerated = 0usize;
    for n in 1..=8usize {
        for code in 0..values.len().pow(n as u32) {
            let mut c = code;
            let mask: Vec<f64> = (0..n)
                .map(|_| {
                    let v = values[c % values.len()];
                    c /= values.len();
                    v
                })
                .collect();
            let t = Tensor::from_vec(mask.clone());
            for &a in &targets {
                let got = area_loss_value(&t, &AreaTarget::new(a, n).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
                let want = naive_area_loss(&mask, a);
                if got != want {
                    return Err(format!("area loss {got} != brute force {want} for {mask:?} at a = {a}"));
                }
                enumerated += 1;
            }
        }
    }
    check(
        worst_area <= 0.02 && worst_residual < 1e-2,
        format!(
            "max |achieved - target| {worst_area:.4}, max residual {worst_residual:.2e}, \
             {enumerated} brute-force loss comparisons exact"
        ),
    )
}

fn iou(mask: &Tensor, rect: &Rect) -> f64 {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let box_mask = rect.indicator(h, w);
    let (mut inter, mut union) = (0usize, 0usize);
    for (m, b) in mask.data().iter().zip(box_mask.data()) {
        let (m, b) = (*m > 0.5, *b > 0.5);
        inter += (m && b) as usize;
        union += (m || b) as usize;
    }
    inter as f64 / union as f64
}

fn extremal_recovery() -> (Verdict, Option<(f64, f64)>) {
    let inst = planted_region();
    let start = Instant::now();
    let result = match single_threaded(|| sweep(&inst.model, &inst.image, &[0.05, 0.1, 0.2, 0.4], &planted_config())) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), None),
    };
    let elapsed = start.elapsed();
    let Some(at_tenth) = result.records.iter().find(|r| r.area == 0.1) else {
        return (Err(format!("area 0.1 failed: {:?}", result.failures)), None);
    };
    let overlap = iou(&at_tenth.mask, &inst.rect);
    let verdict = check(
        result.a_star == Some(0.1) && overlap >= 0.8 && elapsed < Duration::from_secs(120),
        format!(
            "a* = {:?}, IoU at 0.1 = {overlap:.3}, single-threaded sweep {elapsed:.1?}",
            result.a_star
        ),
    );
    (verdict, result.a_star.map(|a| (a, result.phi0)))
}

fn extremality(found: Option<(f64, f64)>) -> Verdict {
    let (a_star, phi0) = found.ok_or("no extremal area from the recovery run")?;
    let inst = planted_region();
    let n = 64 * 64;
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut best: f64 = f64::NEG_INFINITY;
    let mut pixels: Vec<usize> = (0..n).collect();
    for _ in 0..100 {
        // largest pixel count strictly below a* n
        let below = (a_star * n as f64).ceil() as usize - 1;
        let k = r.gen_range(1..=below);
        pixels.shuffle(&mut r);
        let mut m = vec![0.0; n];
        pixels[..k].iter().for_each(|&p| m[p] = 1.0);
        let masked = Tensor::new(
            &[3, 64, 64],
            inst.image
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * m[i % n])
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        best = best.max(inst.model.score(&masked).map_err(|e| e.to_string())?);
    }
    check(
        best < phi0,
        format!("best of 100 masks below a* = {a_star}: {best:.4} < phi0 {phi0:.4}"),
    )
}

fn record(area: f64, score: f64) -> AreaRecord {
    AreaRecord {
        area,
        params: MaskParams::ones([1, 1]),
        mask: Tensor::ones(&[1, 1]),
        score,
        deletion_score: 0.0,
        residual: 0.0,
        achieved_area: area,
        trace: vec![],
        residual_trace: vec![],
    }
}

/// Returns a fixed curve whose score dips before it reaches the threshold.
struct Dipping;

impl Attributor for Dipping {
    fn attribute(&self, _: &dyn ScorerModel, _: &Tensor, areas: &[f64]) -> extremal::Result<AttributionResult> {
        let scores = [0.5, 0.3, 0.9, 1.0];
        let records = areas.iter().zip(scores).map(|(&a, s)| record(a, s)).collect();
        Ok(AttributionResult::assemble(
            Objective::Preservation,
            records,
            vec![],
            1.0,
            0.9,
        ))
    }
}

fn monotonicity() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let size = 48;
    let cases: Vec<(Arc<dyn ScorerModel>, Tensor)> = (0..20)
        .map(|i| {
            let pad = size / 8;
            let inner = synth::random_box(size - 2 * pad, size - 2 * pad, size / 4, size * 2 / 5, &mut r);
            let rect = Rect::new(inner.y0 + pad, inner.x0 + pad, inner.height, inner.width);
            let inst = synth::region_instance([3, size, size], rect, i).expect("instance");
            (Arc::new(inst.model) as Arc<dyn ScorerModel>, inst.image)
        })
        .collect();
    let mut config = planted_config();
    config.schedule.iterations = 400;
    let areas = [0.05, 0.1, 0.2, 0.4];
    let rate = monotonicity_rate(&cases, &Engine { config }, &areas).map_err(|e| e.to_string())?;

    let injected = Dipping
        .attribute(cases[0].0.as_ref(), &cases[0].1, &areas)
        .map_err(|e| e.to_string())?;
    let flagged = !check_monotonicity(&injected).map_err(|e| e.to_string())?;
    let injected_rate = monotonicity_rate(&cases[..1], &Dipping, &areas).map_err(|e| e.to_string())?;
    check(
        rate == 1.0 && flagged && injected_rate == 0.0,
        format!("rate {rate} over 20 instances; injected dip flagged: {flagged}"),
    )
}

fn channel_attribution() -> Verdict {
    let planted = vec![2, 7, 11];
    let model = planted_channel_model([3, 16, 16], 16, &planted, 8).map_err(|e| e.to_string())?;
    let split = model.split().ok_or("planted model has no split")?;
    let image = Tensor::random(&[3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let schedule = ChannelSchedule::default();
    let mask = optimize_channel_mask(split, &image, 3, &schedule)
        .map_err(|e| e.to_string())?
        .mask;
    let mut order: Vec<usize> = (0..16).collect();
    order.sort_by(|&a, &b| mask.data()[b].total_cmp(&mask.data()[a]).then(a.cmp(&b)));
    let mut top = order[..3].to_vec();
    top.sort_unstable();
    let full = model.score(&image).map_err(|e| e.to_string())?;
    let found = find_extremal_channels(split, &image, &[1, 3, 5, 8, 16], full, &schedule).map_err(|e| e.to_string())?;
    check(
        top == planted && found.a_star == Some(3),
        format!("top-3 channels {top:?}, extremal count {:?}", found.a_star),
    )
}

fn pointing() -> Verdict {
    let data = synth::pointing_dataset(20, 32, 1).map_err(|e| e.to_string())?;
    let dataset: Vec<_> = data.into_iter().map(|(item, _)| item).collect();
    let mut config = planted_config();
    config.schedule.iterations = 300;
    let report = run_pointing_benchmark(&dataset, &Engine { config }, &POINTING_AREAS).map_err(|e| e.to_string())?;
    if !report.failures.is_empty() {
        return Err(format!("{} failed pairs", report.failures.len()));
    }

    let mut r = ChaCha8Rng::seed_from_u64(9);
    let masks: Vec<Tensor> = (0..5).map(|_| Tensor::random(&[20, 24], 0.0, 1.0, &mut r)).collect();
    let whole = saliency_from_masks(&masks).map_err(|e| e.to_string())?;
    let parts = saliency_from_masks(&masks[..2])
        .and_then(|a| Ok((a, saliency_from_masks(&masks[2..])?)))
        .map_err(|e| e.to_string())?;
    let additive = whole.max_abs_diff(&parts.0.zip_map(&parts.1, |a, b| a + b).unwrap());
    let scaled = saliency_from_masks(&[masks[0].map(|v| 2.5 * v)]).map_err(|e| e.to_string())?;
    let homogeneous = scaled.max_abs_diff(&saliency_from_masks(&masks[..1]).unwrap().map(|v| 2.5 * v));
    let mut shuffled = masks.clone();
    shuffled.reverse();
    shuffled.swap(0, 2);
    let permuted = whole.max_abs_diff(&saliency_from_masks(&shuffled).unwrap());
    let worst = additive.max(homogeneous).max(permuted);
    check(
        report.all.accuracy() == 1.0 && worst < 1e-12,
        format!(
            "accuracy {} over {} pairs; linearity and permutation deviation {worst:.1e}",
            report.all.accuracy(),
            report.all.hits + report.all.misses
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_extremal"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "extremal {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool, String> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok(read(a)? == read(b)?)
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    run_cli(&[
        "synth",
        "region",
        "--size",
        "32",
        "--box",
        "10,9,8,12",
        "--out",
        &p("model"),
    ])?;
    run_cli(&[
        "attribute",
        "--model",
        &p("model/model.json"),
        "--image",
        &p("model/image.ft1"),
        "--perturbation",
        "fade",
        "--iterations",
        "200",
        "--out",
        &p("first"),
    ])?;
    run_cli(&["rerun", "--config", &p("first/run.json"), "--out", &p("second")])?;
    let mut compared = vec!["curve.csv".to_string(), "sweep.json".to_string()];
    for entry in std::fs::read_dir(dir.path().join("first/masks")).map_err(|e| e.to_string())? {
        compared.push(format!(
            "masks/{}",
            entry.map_err(|e| e.to_string())?.file_name().to_string_lossy()
        ));
    }
    for f in &compared {
        if !same_bytes(&dir.path().join("first").join(f), &dir.path().join("second").join(f))? {
            return Err(format!("rerun differs in {f}"));
        }
    }

    // FT1: f64 -> f32 -> f64 within single precision, and re-saving is lossless
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let t = Tensor::random(&[3, 17, 9], -5.0, 5.0, &mut r);
    let path = dir.path().join("t.ft1");
    t.save_ft1(&path).map_err(|e| e.to_string())?;
    let back = Tensor::load_ft1(&path).map_err(|e| e.to_string())?;
    let ft1_ok = back.shape() == t.shape()
        && t.data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| (a - b).abs() <= a.abs() * f32::EPSILON as f64)
        && back.to_ft1_bytes() == std::fs::read(&path).map_err(|e| e.to_string())?;

    // PNG: every exported mask re-imports within 1/255 of its FT1 twin
    let mut png_worst: f64 = 0.0;
    for f in compared.iter().filter(|f| f.ends_with(".ft1")) {
        let ft1 = Tensor::load_ft1(dir.path().join("first").join(f)).map_err(|e| e.to_string())?;
        let png = load_mask(dir.path().join("first").join(f.replace(".ft1", ".png"))).map_err(|e| e.to_string())?;
        png_worst = png_worst.max(ft1.max_abs_diff(&png));
    }
    let random_mask = Tensor::random(&[13, 21], 0.0, 1.0, &mut r);
    save_mask_png(&random_mask, dir.path().join("m.png")).map_err(|e| e.to_string())?;
    png_worst =
        png_worst.max(random_mask.max_abs_diff(&load_mask(dir.path().join("m.png")).map_err(|e| e.to_string())?));

    run_cli(&["selftest"])?;
    check(
        ft1_ok && png_worst <= 1.0 / 255.0,
        format!(
            "rerun identical in {} files; FT1 round trip ok: {ft1_ok}; PNG max error {png_worst:.2e}; selftest exit 0",
            compared.len()
        ),
    )
}

fn report(index: usize, name: &str, verdict: Verdict) -> bool {
    match verdict {
        Ok(detail) => {
            println!("PASS {index:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {index:>2} {name}: {detail}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are accepted but ignored
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let (recovery, found) = extremal_recovery();
    let passed = [
        report(1, "gradient integrity", gradient_integrity()),
        report(2, "max-convolution lemma", max_convolution_lemma()),
        report(3, "smooth max limits", smax_limits()),
        report(4, "area constraint", area_constraint()),
        report(5, "extremal recovery", recovery),
        report(6, "extremality", extremality(found)),
        report(7, "monotonicity", monotonicity()),
        report(8, "channel attribution", channel_attribution()),
        report(9, "pointing game", pointing()),
        report(10, "reproducibility and I/O", reproducibility()),
    ];
    let failed = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
