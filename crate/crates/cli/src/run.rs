//! Command implementations. Each command validates its inputs, computes,
//! and only then writes its artifacts together with `run.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use extremal::channel::{
    feature_inversion, find_extremal_channels, optimize_channel_mask, saliency_overlay, ChannelSchedule,
    InversionConfig,
};
use extremal::engine::{sweep, Engine};
use extremal::evaluation::{load_dataset, run_pointing_benchmark};
use extremal::imageio::{load_image, save_heatmap_png, save_image_png, save_mask_png};
use extremal::models::{
    load_model, planted_channel_model, save_model, seeded_conv_model, ScorerModel, SequentialModel,
};
use extremal::selftest;
use extremal::synth;
use extremal::{Error, Tensor};

use crate::args::*;

/// A run whose computation finished but whose checks did not hold.
#[derive(Debug)]
pub struct ChecksFailed(pub String);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ChecksFailed {}

/// Contents of `run.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
    /// Settings derived from the arguments and inputs (for reference only;
    /// a rerun derives them again).
    #[serde(default)]
    pub resolved: serde_json::Value,
}

/// Makes every path absolute so the record can be replayed from anywhere.
fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn absolutise(command: &Command) -> Command {
    let mut c = command.clone();
    match &mut c {
        Command::Attribute(a) => {
            a.model = absolute(&a.model);
            a.image = absolute(&a.image);
        }
        Command::Channels(a) => {
            a.model = absolute(&a.model);
            a.image = absolute(&a.image);
        }
        Command::Invert(a) => {
            a.model = absolute(&a.model);
            a.image = absolute(&a.image);
        }
        Command::Pointing(a) => a.manifest = absolute(&a.manifest),
        Command::Rerun(a) => a.config = absolute(&a.config),
        Command::Selftest(_) | Command::Synth(_) => {}
    }
    if let Some(out) = c.out().cloned() {
        c.set_out(absolute(&out));
    }
    c
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_run_record(dir: &Path, command: &Command, resolved: serde_json::Value) -> Result<()> {
    let record = RunRecord {
        tool: "extremal".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: absolutise(command),
        resolved,
    };
    write_json(&dir.join("run.json"), &record)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

fn load_split_model(path: &Path, split: Option<usize>) -> Result<SequentialModel> {
    let model = load_model(path)?;
    match split {
        Some(s) => Ok(SequentialModel::new(
            model.input_shape(),
            model.layers().to_vec(),
            Some(s),
        )?),
        None if model.split().is_none() => bail!(Error::InvalidArgument(format!(
            "model {} declares no split point; pass --split",
            path.display()
        ))),
        None => Ok(model),
    }
}

fn load_matching_image(path: &Path, shape: [usize; 3]) -> Result<Tensor> {
    let image = load_image(path)?;
    if image.shape() != shape {
        bail!(Error::InvalidArgument(format!(
            "image {} has shape {:?}, the model expects {shape:?}",
            path.display(),
            image.shape()
        )));
    }
    Ok(image)
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Attribute(a) => attribute(command, a),
        Command::Channels(a) => channels(command, a),
        Command::Invert(a) => invert(command, a),
        Command::Pointing(a) => pointing(command, a),
        Command::Selftest(a) => run_selftest(command, a),
        Command::Synth(a) => run_synth(command, a),
        Command::Rerun(a) => rerun(a),
    }
}

fn attribute(command: &Command, args: &AttributeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let image = load_matching_image(&args.image, model.input_shape())?;
    let config = args.engine.config();
    let (h, w) = image.spatial().expect("images are [C, H, W]");
    config.validate(h, w)?;
    let mask_config = config.mask_config(h, w)?;
    let result = sweep(&model, &image, &args.areas.0, &config)?;

    create_dir(&args.out)?;
    let masks = args.out.join("masks");
    create_dir(&masks)?;
    let mut summary = result.summary();
    let mut curve = csv_writer(&args.out.join("curve.csv"))?;
    curve.write_record([
        "area",
        "score",
        "deletion_score",
        "criterion",
        "residual",
        "achieved_area",
    ])?;
    for r in &result.records {
        let stem = format!("mask_{:.4}", r.area);
        save_mask_png(&r.mask, masks.join(format!("{stem}.png")))?;
        r.mask.save_ft1(masks.join(format!("{stem}.ft1")))?;
        summary.mask_files.push(format!("masks/{stem}.png"));
        curve.serialize((
            r.area,
            r.score,
            r.deletion_score,
            r.criterion(result.objective),
            r.residual,
            r.achieved_area,
        ))?;
    }
    curve.flush()?;
    write_json(&args.out.join("sweep.json"), &summary)?;
    write_run_record(
        &args.out,
        command,
        json!({
            "engine": config,
            "mask": mask_config,
            "sigma_max": config.resolved_sigma_max(h, w),
        }),
    )?;

    match result.a_star {
        Some(a) => println!("a* = {a}"),
        None => println!("not extremal at grid"),
    }
    for f in &result.failures {
        eprintln!("area {} failed: {}", f.area, f.message);
    }
    if result.failures.iter().any(|f| f.numerical) {
        bail!(Error::NumericalAbort {
            iteration: 0,
            reason: format!("{} of {} areas aborted", result.failures.len(), args.areas.0.len()),
            trace: vec![],
        });
    }
    if !result.failures.is_empty() {
        bail!(Error::InvalidArgument("some areas failed".into()));
    }
    Ok(())
}

fn channel_schedule(args: &ChannelArgs) -> ChannelSchedule {
    ChannelSchedule {
        iterations: args.iterations,
        momentum: args.momentum,
        learning_rate: args.learning_rate,
        lambda_max: args.lambda_max,
        ..ChannelSchedule::default()
    }
}

fn channels(command: &Command, args: &ChannelArgs) -> Result<()> {
    let model = load_split_model(&args.model, args.split)?;
    let split = model.split().expect("checked by load_split_model");
    let image = load_matching_image(&args.image, model.input_shape())?;
    let k = split.activation_shape()[0];
    let counts = match &args.counts {
        Some(c) => c.0.clone(),
        None => {
            let mut c: Vec<usize> = std::iter::successors(Some(1usize), |&n| Some(n * 2))
                .take_while(|&n| n < k)
                .collect();
            c.push(k);
            c
        }
    };
    if args.tau.is_nan() || args.tau <= 0.0 {
        bail!(Error::InvalidArgument(format!("tau must be > 0, got {}", args.tau)));
    }
    let schedule = channel_schedule(args);
    let activations = split.activations(&image)?;
    let phi0 = args.tau * split.tail_score(&activations)?;
    let result = find_extremal_channels(split, &image, &counts, phi0, &schedule)?;

    create_dir(&args.out)?;
    let mut table = csv_writer(&args.out.join("channels.csv"))?;
    let mut header = vec!["count".to_string(), "score".to_string()];
    header.extend((0..k).map(|c| format!("channel_{c}")));
    table.write_record(&header)?;
    for r in &result.records {
        let mut row = vec![r.count.to_string(), r.outcome.score.to_string()];
        row.extend(r.outcome.mask.data().iter().map(|v| v.to_string()));
        table.write_record(&row)?;
    }
    table.flush()?;

    // the extremal mask, or the largest count when none qualifies
    let chosen = result
        .records
        .iter()
        .find(|r| Some(r.count) == result.a_star)
        .or(result.records.last())
        .expect("grid is non-empty");
    let mut weights = csv_writer(&args.out.join("channel_mask.csv"))?;
    weights.write_record(["channel", "weight"])?;
    for (c, v) in chosen.outcome.mask.data().iter().enumerate() {
        weights.serialize((c, v))?;
    }
    weights.flush()?;
    let overlay = saliency_overlay(&chosen.outcome.mask, &activations)?;
    overlay.save_ft1(args.out.join("overlay.ft1"))?;
    save_heatmap_png(&overlay, args.out.join("overlay.png"))?;
    let selected = top_channels(&chosen.outcome.mask, chosen.count);
    write_json(
        &args.out.join("summary.json"),
        &json!({
            "counts": result.records.iter().map(|r| r.count).collect::<Vec<_>>(),
            "scores": result.records.iter().map(|r| r.outcome.score).collect::<Vec<_>>(),
            "full_score": result.full_score,
            "phi0": result.phi0,
            "a_star": result.a_star,
            "selected_channels": selected,
        }),
    )?;
    write_run_record(&args.out, command, json!({ "schedule": schedule, "phi0": phi0 }))?;
    match result.a_star {
        Some(c) => println!("a* = {c} channels {selected:?}"),
        None => println!("not extremal at grid"),
    }
    Ok(())
}

/// Indices of the `count` largest entries, ascending; lower index first on ties.
pub fn top_channels(mask: &Tensor, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mask.numel()).collect();
    idx.sort_by(|&a, &b| mask.data()[b].total_cmp(&mask.data()[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn invert(command: &Command, args: &InvertArgs) -> Result<()> {
    let model = load_split_model(&args.model, args.split)?;
    let split = model.split().expect("checked by load_split_model");
    let image = load_matching_image(&args.image, model.input_shape())?;
    let [k, _, _] = split.activation_shape();
    let mask = match &args.channels {
        Some(list) => {
            if let Some(c) = list.0.iter().find(|&&c| c >= k) {
                bail!(Error::InvalidArgument(format!("channel {c} outside 0..{k}")));
            }
            let mut m = vec![0.0; k];
            list.0.iter().for_each(|&c| m[c] = 1.0);
            Tensor::from_vec(m)
        }
        None => {
            if args.count == 0 || args.count > k {
                bail!(Error::InvalidArgument(format!(
                    "--count {} outside 1..={k}",
                    args.count
                )));
            }
            optimize_channel_mask(split, &image, args.count, &ChannelSchedule::default())?.mask
        }
    };
    let activations = split.activations(&image)?;
    let plane = activations.numel() / k;
    let target = Tensor::new(
        &split.activation_shape(),
        activations
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * mask.data()[i / plane])
            .collect(),
    )?;
    let mut config = InversionConfig::for_shape(split.image_shape(), args.steps);
    config.learning_rate = args.learning_rate;
    config.seed = args.seed;
    if let Some(n) = args.norm {
        config.norm = n;
    }
    let outcome = feature_inversion(split, &target, &config)?;

    create_dir(&args.out)?;
    outcome.image.save_ft1(args.out.join("inversion.ft1"))?;
    let (lo, hi) = (outcome.image.min(), outcome.image.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let shown = outcome.image.map(|v| (v - lo) / span);
    if matches!(shown.shape()[0], 1 | 3) {
        save_image_png(&shown, args.out.join("inversion.png"))?;
    }
    let mut trace = csv_writer(&args.out.join("trace.csv"))?;
    trace.write_record(["step", "objective"])?;
    for (i, v) in outcome.trace.iter().enumerate() {
        trace.serialize((i, v))?;
    }
    trace.flush()?;
    write_json(
        &args.out.join("summary.json"),
        &json!({ "channel_mask": mask.data(), "final_objective": outcome.trace.last() }),
    )?;
    write_run_record(&args.out, command, json!({ "inversion": config }))?;
    println!("objective {:.6}", outcome.trace.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn pointing(command: &Command, args: &PointingArgs) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    let config = args.engine.config();
    for item in &dataset {
        let (h, w) = item.image.spatial().expect("images are [C, H, W]");
        config.validate(h, w).with_context(|| format!("item {:?}", item.id))?;
    }
    let report = run_pointing_benchmark(&dataset, &Engine { config: config.clone() }, &args.areas.0)?;

    create_dir(&args.out)?;
    let mut log = csv_writer(&args.out.join("pointing.csv"))?;
    log.write_record(["item", "class", "hit"])?;
    for e in &report.log {
        log.serialize((&e.item, &e.class, e.hit))?;
    }
    log.flush()?;
    write_json(&args.out.join("pointing.json"), &report.summary())?;
    write_run_record(&args.out, command, json!({ "engine": config }))?;
    println!(
        "accuracy {:.4} ({} hits, {} misses); difficult {:.4}",
        report.all.accuracy(),
        report.all.hits,
        report.all.misses,
        report.difficult.accuracy()
    );
    for f in &report.failures {
        eprintln!("item {} class {} failed: {}", f.item, f.class, f.message);
    }
    Ok(())
}

fn run_selftest(command: &Command, args: &SelftestArgs) -> Result<()> {
    let mut outcomes = selftest::gradient_suite(args.trials, args.seed)?;
    outcomes.push(selftest::lemma_suite(50, args.seed)?);
    outcomes.push(selftest::smax_suite(200, args.seed)?);
    for o in &outcomes {
        match &o.counterexample {
            None => println!("PASS {} ({} cases)", o.suite, o.cases),
            Some(c) => println!("FAIL {}: {c}", o.suite),
        }
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("selftest.json"), &outcomes)?;
        write_run_record(out, command, json!({}))?;
    }
    if let Some(first) = outcomes.iter().find(|o| !o.passed()) {
        bail!(ChecksFailed(format!(
            "{}: {}",
            first.suite,
            first.counterexample.as_deref().unwrap_or_default()
        )));
    }
    Ok(())
}

fn run_synth(command: &Command, args: &SynthArgs) -> Result<()> {
    let out = args.kind.out();
    create_dir(out)?;
    match &args.kind {
        SynthKind::Region {
            size,
            rect,
            weight,
            seed,
            ..
        } => {
            let shape = [3, *size, *size];
            let model = extremal::models::planted_region_model(shape, *rect, *weight)?;
            let image = synth::planted_image(shape, &[*rect], *seed)?;
            save_model(&model, out.join("model.json"))?;
            image.save_ft1(out.join("image.ft1"))?;
            save_image_png(&image.map(|v| v.min(1.0)), out.join("image.png"))?;
            save_mask_png(&rect.indicator(*size, *size), out.join("box.png"))?;
        }
        SynthKind::Channels {
            size,
            width,
            channels,
            seed,
            ..
        } => {
            let shape = [3, *size, *size];
            let model = planted_channel_model(shape, *width, &channels.0, *seed)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let image = Tensor::random(&shape, 0.0, 1.0, &mut rng);
            save_model(&model, out.join("model.json"))?;
            image.save_ft1(out.join("image.ft1"))?;
        }
        SynthKind::Conv {
            size,
            width,
            pool,
            seed,
            ..
        } => {
            let shape = [3, *size, *size];
            let model = seeded_conv_model(shape, *width, *pool, *seed)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let image = Tensor::random(&shape, 0.0, 1.0, &mut rng);
            save_model(&model, out.join("model.json"))?;
            image.save_ft1(out.join("image.ft1"))?;
        }
        SynthKind::Pointing { items, size, seed, .. } => {
            synth::write_pointing_dataset(out, *items, *size, *seed)?;
        }
    }
    write_run_record(out, command, json!({}))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn rerun(args: &RerunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("cannot read {}", args.config.display()))?;
    let record: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: args.config.clone(),
        message: e.to_string(),
    })?;
    let mut command = record.command;
    if matches!(command, Command::Rerun(_)) {
        bail!(Error::InvalidArgument("a rerun record cannot be rerun".into()));
    }
    command.set_out(args.out.clone());
    execute(&command)
}
