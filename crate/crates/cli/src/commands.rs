use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use reconscan::data::{
    load_manifest_volumes, make_split, read_archive, write_archive, DatasetSplit, Plane,
    SliceRange, SplitConfig, Volume, WindowPair,
};
use reconscan::evaluation::{evaluate as evaluate_tables, psnr, EvalReport, PlaneTables};
use reconscan::explain::{
    grad_cam, reconstruct_window, render_grid, render_saliency, CamObjective, DEFAULT_LAYERS,
};
use reconscan::models::{
    load_checkpoint, save_checkpoint, Model, ModelKind, ModelSpec, TrainedModel,
};
use reconscan::phantom::{generate_cohort, write_cohort, CohortSpec};
use reconscan::scoring::{
    build_score_table, DistanceMetric, ScoreTable, ScoringPolicy, ThresholdKind,
};
use reconscan::training::{train as train_model, TrainConfig};
use reconscan::{Error, Result};

use crate::config::{check_lengths, parse_range, require_file, RunConfig};
use crate::{
    EvaluateArgs, ExplainArgs, ModelArgs, PhantomArgs, PrepareArgs, ScoreArgs, SplitArgs,
    SweepArgs, TrainArgs,
};

const DEFAULT_METRIC: DistanceMetric = DistanceMetric::L2PlusCosine;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn required<T: Clone>(flag: Option<T>, file: &Option<T>, what: &str) -> Result<T> {
    flag.or_else(|| file.clone()).ok_or_else(|| {
        Error::Config(format!(
            "missing {what}: pass it as a flag or in the config file"
        ))
    })
}

fn parse_opt<T: std::str::FromStr<Err = Error>>(s: &Option<String>) -> Result<Option<T>> {
    s.as_deref().map(str::parse).transpose()
}

fn policy(strict: bool) -> ScoringPolicy {
    if strict {
        ScoringPolicy::strict()
    } else {
        ScoringPolicy::default()
    }
}

pub fn phantom(cfg: &RunConfig, a: PhantomArgs) -> Result<()> {
    cfg.check_subcommand("phantom")?;
    let out = required(a.out, &cfg.out, "output directory (--out)")?;
    let mut spec: CohortSpec = cfg.cohort.clone().unwrap_or_default();
    if let Some(n) = a.healthy {
        spec.healthy_subjects = n;
    }
    if let Some(n) = a.anomalous {
        spec.anomalous_subjects = n;
    }
    if let Some(n) = a.timepoints {
        spec.timepoints = n;
    }
    if let Some(e) = a.extent {
        spec.extent = [e; 3];
    }
    if let Some(s) = a.sigma {
        spec.sigma = s;
    }
    if let Some(k) = parse_opt(&a.kind)? {
        spec.kind = k;
    }
    if let Some(m) = &a.magnitude {
        let (lo, hi) = m
            .split_once(',')
            .and_then(|(l, h)| Some((l.trim().parse().ok()?, h.trim().parse().ok()?)))
            .ok_or_else(|| Error::Config(format!("magnitude range `{m}` is not `lo,hi`")))?;
        spec.magnitude = (lo, hi);
    }
    spec.seed = cfg.seed(a.seed)?;
    let volumes = generate_cohort(&spec)?;
    let manifest = write_cohort(&out, &volumes)?;
    write_json(&out.join("cohort.json"), &spec)?;
    let anomalous = volumes
        .iter()
        .filter(|v| v.meta.label != reconscan::data::Label::Healthy)
        .count();
    print_json(&json!({
        "manifest": manifest,
        "scans": volumes.len(),
        "healthy_scans": volumes.len() - anomalous,
        "anomalous_scans": anomalous,
        "seed": spec.seed,
    }))
}

fn split_config(
    cfg: &RunConfig,
    a: &SplitArgs,
    in_len: usize,
    out_len: usize,
) -> Result<SplitConfig> {
    check_lengths(in_len, out_len, a.any_lengths)?;
    let range = match &a.range {
        Some(r) => parse_range(r)?,
        None => cfg.range.unwrap_or(SliceRange::FULL_SCALE),
    };
    let mut split = SplitConfig {
        range,
        in_len,
        out_len,
        stride: a.stride.or(cfg.stride).unwrap_or(1),
        test_subjects: if a.test_subjects.is_empty() {
            cfg.test_subjects.clone()
        } else {
            a.test_subjects.clone()
        },
        seed: cfg.seed(a.seed)?,
        ..Default::default()
    };
    if let Some(h) = a.holdout.or(cfg.holdout_healthy) {
        split.holdout_healthy = h;
    }
    Ok(split)
}

fn planes(cfg: &RunConfig, flags: &[String]) -> Result<Vec<Plane>> {
    if !flags.is_empty() {
        return flags.iter().map(|p| p.parse()).collect();
    }
    Ok(if cfg.planes.is_empty() {
        vec![Plane::Axial]
    } else {
        cfg.planes.clone()
    })
}

fn load_volumes(cfg: &RunConfig, a: &SplitArgs) -> Result<Vec<Volume>> {
    let manifest = required(a.manifest.clone(), &cfg.manifest, "manifest (--manifest)")?;
    require_file(&manifest, "manifest")?;
    load_manifest_volumes(&manifest)
}

fn lengths(cfg: &RunConfig, in_len: Option<usize>, out_len: Option<usize>) -> (usize, usize) {
    (
        in_len.or(cfg.in_len).unwrap_or(3),
        out_len.or(cfg.out_len).unwrap_or(3),
    )
}

pub fn prepare(cfg: &RunConfig, a: PrepareArgs) -> Result<()> {
    cfg.check_subcommand("prepare")?;
    let out = required(a.out, &cfg.out, "output directory (--out)")?;
    let (in_len, out_len) = lengths(cfg, a.in_len, a.out_len);
    let split_cfg = split_config(cfg, &a.split, in_len, out_len)?;
    let volumes = load_volumes(cfg, &a.split)?;
    for plane in planes(cfg, &a.split.planes)? {
        let split = make_split(&volumes, plane, &split_cfg)?;
        let dir = out.join(plane.to_string().to_ascii_lowercase());
        std::fs::create_dir_all(&dir)?;
        write_archive(&dir.join("train.rsw"), plane, in_len, out_len, &split.train)?;
        write_archive(&dir.join("test.rsw"), plane, in_len, out_len, &split.test)?;
        write_json(&dir.join("split.json"), &split.manifest)?;
        println!(
            "plane {plane}: {} train windows, {} test windows",
            split.train.len(),
            split.test.len()
        );
        for s in &split.manifest.scans {
            println!(
                "  {:<16} {:<5} {:<9} {} windows",
                s.scan_id,
                format!("{:?}", s.partition).to_lowercase(),
                s.label.to_string(),
                s.windows
            );
        }
    }
    Ok(())
}

fn train_config(cfg: &RunConfig, m: &ModelArgs, seed: u64) -> TrainConfig {
    let mut t = cfg.train.clone().unwrap_or_default();
    if let Some(v) = m.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = m.steps {
        t.generator_steps = v;
    }
    if let Some(v) = m.critic_steps {
        t.critic_steps = v;
    }
    if let Some(v) = m.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = m.lr {
        t.lr = v;
    }
    if let Some(v) = m.patience {
        t.patience = v;
    }
    if let Some(v) = m.cosine_weight {
        t.weights.cosine = v;
    }
    t.seed = seed;
    t
}

fn model_spec(
    cfg: &RunConfig,
    m: &ModelArgs,
    windows: &[WindowPair],
    seed: u64,
    default: ModelKind,
) -> Result<ModelSpec> {
    let kind = parse_opt(&m.model)?.or(cfg.model).unwrap_or(default);
    let first = windows
        .first()
        .ok_or_else(|| Error::EmptyData("no training windows".into()))?;
    let (c_in, h, w) = first.input.dims();
    let mut spec = ModelSpec::new(kind, h, w)
        .with_channels(c_in, first.target.channels())
        .with_seed(seed)
        .with_plane(first.plane);
    let base = m.base_width.or(cfg.base_width).unwrap_or(spec.base_width);
    let critic = m
        .critic_width
        .or(cfg.critic_width)
        .unwrap_or(spec.critic_width);
    spec = spec.with_widths(base, critic);
    Ok(spec)
}

fn fit(
    cfg: &RunConfig,
    m: &ModelArgs,
    windows: &[WindowPair],
    seed: u64,
    default: ModelKind,
) -> Result<TrainedModel> {
    let spec = model_spec(cfg, m, windows, seed, default)?;
    let config = train_config(cfg, m, seed);
    train_model(Model::build(&spec)?, windows, &config)
}

pub fn train(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    cfg.check_subcommand("train")?;
    let out = required(a.out, &cfg.checkpoint, "checkpoint path (--out)")?;
    require_file(&a.archive, "window archive")?;
    let (_, windows) = read_archive(&a.archive)?;
    let seed = cfg.seed(a.seed)?;
    let start = Instant::now();
    let trained = fit(cfg, &a.model, &windows, seed, ModelKind::Sagan33)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&out, &trained)?;
    write_json(&out.with_extension("history.json"), &trained.history)?;
    let history = trained.history.as_ref();
    eprintln!("trained in {:.1}s", start.elapsed().as_secs_f64());
    print_json(&json!({
        "checkpoint": out,
        "model": trained.spec().kind,
        "parameters": trained.model.param_count(),
        "param_digest": trained.model.param_digest(),
        "windows": windows.len(),
        "records": history.map_or(0, |h| h.records.len()),
        "best_step": history.and_then(|h| h.best_step),
        "best_val_l2": history.and_then(|h| h.best_val_l2),
    }))
}

fn checkpoint(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<TrainedModel> {
    let path = required(flag, &cfg.checkpoint, "checkpoint (--checkpoint)")?;
    require_file(&path, "checkpoint")?;
    load_checkpoint(&path)
}

pub fn score(cfg: &RunConfig, a: ScoreArgs) -> Result<()> {
    cfg.check_subcommand("score")?;
    let trained = checkpoint(cfg, a.checkpoint)?;
    require_file(&a.archive, "window archive")?;
    let (_, windows) = read_archive(&a.archive)?;
    let metric = parse_opt(&a.metric)?
        .or(cfg.metric)
        .unwrap_or(DEFAULT_METRIC);
    let table = build_score_table(&trained, &windows, metric)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    table.write_csv(BufWriter::new(File::create(&a.out)?))?;
    let summary = table.summary();
    print_json(&json!({
        "scores": a.out,
        "metric": summary.metric,
        "scans": summary.scans,
        "windows": summary.windows,
        "hash": summary.hash,
    }))
}

/// Splits `PLANE=PATH`; a bare path means the axial plane.
fn plane_path(s: &str) -> Result<(Plane, PathBuf)> {
    match s.split_once('=') {
        Some((p, path)) => Ok((p.parse()?, PathBuf::from(path))),
        None => Ok((Plane::Axial, PathBuf::from(s))),
    }
}

fn read_table(path: &Path, metric: DistanceMetric) -> Result<ScoreTable> {
    require_file(path, "score table")?;
    ScoreTable::read_csv(metric, File::open(path)?).map_err(|e| match e {
        Error::Csv(c) => Error::Format {
            path: path.to_path_buf(),
            reason: c.to_string(),
        },
        other => other,
    })
}

fn write_report(report: &EvalReport, out: Option<&Path>, roc_dir: Option<&Path>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(path) = out {
        write_json(path, report)?;
    }
    if let Some(dir) = roc_dir {
        std::fs::create_dir_all(dir)?;
        for p in &report.planes {
            let name = format!("roc_{}.csv", p.plane.to_string().to_ascii_lowercase());
            let mut text = String::from("fpr,tpr\n");
            for (x, y) in &p.detection.roc {
                text.push_str(&format!("{x},{y}\n"));
            }
            std::fs::write(dir.join(name), text)?;
        }
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, a: EvaluateArgs, strict: bool) -> Result<()> {
    cfg.check_subcommand("evaluate")?;
    let metric = parse_opt(&a.metric)?
        .or(cfg.metric)
        .unwrap_or(DEFAULT_METRIC);
    let kind = parse_opt(&a.threshold)?
        .or(cfg.threshold)
        .unwrap_or(ThresholdKind::Avg);
    let train = a
        .train
        .iter()
        .map(|s| plane_path(s))
        .collect::<Result<Vec<_>>>()?;
    let test = a
        .test
        .iter()
        .map(|s| plane_path(s))
        .collect::<Result<Vec<_>>>()?;
    let mut tables = Vec::new();
    for (plane, path) in &train {
        let Some((_, test_path)) = test.iter().find(|(p, _)| p == plane) else {
            return Err(Error::MissingPlane(format!(
                "{plane} has training scores but no test scores"
            )));
        };
        tables.push((
            *plane,
            read_table(path, metric)?,
            read_table(test_path, metric)?,
        ));
    }
    if let Some((p, _)) = test
        .iter()
        .find(|(p, _)| !train.iter().any(|(q, _)| q == p))
    {
        return Err(Error::MissingPlane(format!(
            "{p} has test scores but no training scores"
        )));
    }
    let views: Vec<PlaneTables<'_>> = tables
        .iter()
        .map(|(plane, train, test)| PlaneTables {
            plane: *plane,
            train,
            test,
        })
        .collect();
    let report = evaluate_tables(&views, kind, &policy(strict))?;
    write_report(&report, a.out.as_deref(), a.roc_dir.as_deref())
}

fn default_layers(model: &Model) -> Vec<String> {
    let names = model.layer_names();
    let picked: Vec<String> = DEFAULT_LAYERS
        .iter()
        .filter(|l| names.iter().any(|n| n == *l))
        .map(|l| l.to_string())
        .collect();
    if picked.is_empty() {
        names.into_iter().take(1).collect()
    } else {
        picked
    }
}

pub fn explain(cfg: &RunConfig, a: ExplainArgs) -> Result<()> {
    cfg.check_subcommand("explain")?;
    let trained = checkpoint(cfg, a.checkpoint)?;
    let model = &trained.model;
    require_file(&a.archive, "window archive")?;
    let (_, windows) = read_archive(&a.archive)?;
    let scan = match a.scan.as_deref() {
        Some(s) => s.to_string(),
        None => windows
            .first()
            .map(|w| w.scan_id.clone())
            .ok_or_else(|| Error::EmptyData("archive has no windows".into()))?,
    };
    let window = windows
        .iter()
        .find(|w| w.scan_id == scan && w.window_index == a.window)
        .ok_or_else(|| {
            Error::Config(format!(
                "no window {} for scan `{scan}` in the archive",
                a.window
            ))
        })?;
    let out = required(a.out, &cfg.out, "output directory (--out)")?;
    std::fs::create_dir_all(&out)?;
    let objective = parse_opt(&a.objective)?
        .or(cfg.objective)
        .unwrap_or(CamObjective::NegL2);
    let layers = if a.layers.is_empty() {
        default_layers(model)
    } else {
        a.layers
    };

    let stem = format!("{}_w{}", scan, a.window);
    let recon = reconstruct_window(model, window)?;
    let value = psnr(&window.target, &recon)?;
    let grid_path = out.join(format!("{stem}_grid.png"));
    render_grid(&window.input, &window.target, &recon, value, &grid_path)?;
    let mut maps = Vec::new();
    for layer in &layers {
        let map = grad_cam(model, window, layer, objective)?;
        let path = out.join(format!("{stem}_{}.png", layer.replace('.', "_")));
        render_saliency(&map, &window.target, a.channel, &path)?;
        maps.push(json!({ "layer": layer, "image": path, "degenerate": map.degenerate }));
    }
    print_json(&json!({
        "scan_id": scan,
        "window_index": a.window,
        "objective": objective,
        "psnr_db": if value.is_finite() { Some(value) } else { None },
        "grid": grid_path,
        "saliency": maps,
    }))
}

#[derive(Serialize)]
struct ComboResult {
    combo: String,
    in_len: usize,
    out_len: usize,
    train_windows: usize,
    test_windows: usize,
    best_val_l2: Option<f64>,
    param_digest: String,
    report: EvalReport,
}

#[derive(Serialize)]
struct SweepReport {
    version: &'static str,
    model: ModelKind,
    metric: DistanceMetric,
    threshold: ThresholdKind,
    seed: u64,
    results: Vec<ComboResult>,
}

fn parse_combo(s: &str) -> Result<(usize, usize)> {
    s.split_once('-')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("slice combination `{s}` is not `in-out`")))
}

pub fn sweep(cfg: &RunConfig, a: SweepArgs, strict: bool) -> Result<()> {
    cfg.check_subcommand("sweep")?;
    let metric = parse_opt(&a.metric)?
        .or(cfg.metric)
        .unwrap_or(DistanceMetric::L2);
    let kind = parse_opt(&a.threshold)?
        .or(cfg.threshold)
        .unwrap_or(ThresholdKind::Avg);
    let combos = a
        .combos
        .iter()
        .map(|c| parse_combo(c))
        .collect::<Result<Vec<_>>>()?;
    let plane_list = planes(cfg, &a.split.planes)?;
    let &[plane] = plane_list.as_slice() else {
        return Err(Error::Config("sweep runs on a single plane".into()));
    };
    for &(i, o) in &combos {
        check_lengths(i, o, a.split.any_lengths)?;
    }
    let volumes = load_volumes(cfg, &a.split)?;
    let seed = cfg.seed(a.split.seed)?;
    let mut results = Vec::new();
    let mut model_kind = ModelKind::UNet33;
    println!(
        "{:<6} {:>8} {:>8} {:>10} {:>6} {:>9}",
        "combo", "train", "test", "accuracy", "AUC", "time (s)"
    );
    for (i, o) in combos {
        let split: DatasetSplit = make_split(&volumes, plane, &split_config(cfg, &a.split, i, o)?)?;
        let start = Instant::now();
        let trained = fit(cfg, &a.model, &split.train, seed, ModelKind::UNet33)?;
        let secs = start.elapsed().as_secs_f64();
        model_kind = trained.spec().kind;
        let train_t = build_score_table(&trained, &split.train, metric)?;
        let test_t = build_score_table(&trained, &split.test, metric)?;
        let view = PlaneTables {
            plane,
            train: &train_t,
            test: &test_t,
        };
        let report = evaluate_tables(&[view], kind, &policy(strict))?;
        let d = &report.planes[0].detection;
        let combo = format!("{i}-{o}");
        println!(
            "{:<6} {:>8} {:>8} {:>9}% {:>6.3} {:>9.1}",
            combo,
            split.train.len(),
            split.test.len(),
            d.accuracy_display,
            d.auc,
            secs
        );
        results.push(ComboResult {
            combo,
            in_len: i,
            out_len: o,
            train_windows: split.train.len(),
            test_windows: split.test.len(),
            best_val_l2: trained.history.as_ref().and_then(|h| h.best_val_l2),
            param_digest: trained.model.param_digest(),
            report,
        });
    }
    let report = SweepReport {
        version: "reconscan-sweep/1",
        model: model_kind,
        metric,
        threshold: kind,
        seed,
        results,
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}
