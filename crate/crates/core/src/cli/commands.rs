use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::{
    AblateArgs, CliError, CliResult, Command, ConfigArgs, EvaluateArgs, GradcamArgs, ImageArgs, PredictArgs,
    RunConfig, SynthArgs, TrainArgs,
};
use crate::dataio::image::read_png;
use crate::dataio::loader::{build_sample, Annotation, LabelRow};
use crate::dataio::{generate_synthetic_range, load_prepared, prepare, DataConfig, PreparedSample, SyntheticSpec};
use crate::error::Error;
use crate::evaluation::{self, parse_thresholds, EvalConfig, EvalReport, PredictionRecord};
use crate::explain::{grad_cam, write_overlay, write_pfm, Tap};
use crate::fsutil::write_atomic;
use crate::model::{count_parameters, load_checkpoint, Model};
use crate::training::{LogSink, Trainer};

pub fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Predict(a) => predict(&a),
        Command::Gradcam(a) => gradcam(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::from(Error::io(path, e)))
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    if let Some(p) = &args.config {
        require_file(p, "config")?;
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(root) = &args.data {
        cfg.data.root = Some(root.clone());
    }
    match &cfg.data.root {
        None => Err(usage("no dataset root: pass --data or set data.root")),
        Some(r) if !r.is_dir() => Err(usage(format!("dataset root {} is not a directory", r.display()))),
        Some(_) => Ok(cfg),
    }
}

/// Data settings for a checkpoint: an explicit config, else the run config
/// saved next to it, else defaults.
fn data_config_for(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<DataConfig> {
    if let Some(p) = explicit {
        require_file(p, "config")?;
        return Ok(RunConfig::load(Some(p), &[])?.data);
    }
    let sibling = checkpoint.with_file_name("config.json");
    if sibling.is_file() {
        return Ok(RunConfig::load(Some(&sibling), &[])?.data);
    }
    Ok(DataConfig::default())
}

// ---------------------------------------------------------------- synth

const HISTOGRAM_YEARS: usize = 20;

fn year_bucket(months: f64) -> usize {
    ((months / 12.0).floor() as usize).min(HISTOGRAM_YEARS - 1)
}

fn synth(a: &SynthArgs) -> CliResult {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let fractions_ok = (0.0..1.0).contains(&a.val_fraction)
        && (0.0..1.0).contains(&a.test_fraction)
        && a.val_fraction + a.test_fraction < 1.0;
    if !fractions_ok {
        return Err(usage("--val-fraction and --test-fraction must be in [0, 1) and sum below 1"));
    }
    let n_val = (a.n as f64 * a.val_fraction).round() as usize;
    let n_test = (a.n as f64 * a.test_fraction).round() as usize;
    if n_val + n_test >= a.n {
        return Err(usage(format!("--n {} leaves no training samples", a.n)));
    }
    if a.out.is_file() {
        return Err(usage(format!("{} is a file", a.out.display())));
    }
    let non_empty = a.out.is_dir()
        && fs::read_dir(&a.out)
            .map_err(|e| CliError::from(Error::io(&a.out, e)))?
            .next()
            .is_some();
    if non_empty && !a.force {
        return Err(usage(format!("{} is not empty; pass --force to write into it", a.out.display())));
    }
    let spec = SyntheticSpec {
        image_size: a.image_size,
        ..SyntheticSpec::new(a.seed, a.n)
    };
    spec.validate()?;

    let n_train = a.n - n_val - n_test;
    let splits = [("train", 0..n_train), ("val", n_train..n_train + n_val), ("test", n_train + n_val..a.n)];
    let mut counts = vec![[0usize; 3]; HISTOGRAM_YEARS];
    let mut sizes = serde_json::Map::new();
    for (k, (name, range)) in splits.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let rows: Vec<LabelRow> = generate_synthetic_range(&spec, &a.out, name, range.clone())?;
        for r in &rows {
            counts[year_bucket(r.bone_age)][k] += 1;
        }
        sizes.insert(name.to_string(), Value::from(rows.len()));
        log::info!("wrote {} {name} samples", rows.len());
    }
    write_json(&a.out.join("synth.json"), &serde_json::json!({ "spec": spec, "splits": sizes }))?;

    let mut table = format!("{:<6} {:>6} {:>6} {:>6} {:>6}\n", "years", "train", "val", "test", "total");
    for (y, c) in counts.iter().enumerate() {
        let total: usize = c.iter().sum();
        table.push_str(&format!("{:<6} {:>6} {:>6} {:>6} {:>6}\n", y, c[0], c[1], c[2], total));
    }
    table.push_str(&format!("{:<6} {:>6} {:>6} {:>6} {:>6}\n", "all", n_train, n_val, n_test, a.n));
    print!("{table}");
    if a.plot {
        let totals: Vec<usize> = counts.iter().map(|c| c.iter().sum()).collect();
        evaluation::plot::write_histogram(&a.out.join("age_histogram.png"), &totals)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- train

fn write_eval_outputs(dir: &Path, prefix: &str, records: &[PredictionRecord], report: &EvalReport) -> CliResult {
    write_json(&dir.join(format!("{prefix}report.json")), report)?;
    write_atomic(&dir.join(format!("{prefix}report.txt")), report.to_table().as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&dir.join(format!("{prefix}predictions.csv")), &bytes)?;
    evaluation::write_panels(&dir.join(format!("{prefix}plot.png")), records, &report.thresholds)?;
    Ok(())
}

fn load_splits(cfg: &RunConfig) -> CliResult<(Vec<PreparedSample>, Vec<PreparedSample>)> {
    let root = cfg.data.root.as_deref().expect("root checked");
    let size = cfg.model.input_size;
    let train = load_prepared(root, &cfg.data.train_split, size, &cfg.data)?;
    let val = load_prepared(root, &cfg.data.val_split, size, &cfg.data)?;
    log::info!("{} training and {} validation samples", train.len(), val.len());
    Ok((train, val))
}

fn train(a: &TrainArgs) -> CliResult {
    let cfg = load_config(&a.cfg)?;
    let (train_set, val_set) = load_splits(&cfg)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let tc = cfg.effective_train();
    let mut model = Model::new(&cfg.model, tc.seed)?;
    log::info!("{} trainable parameters", model.params.trainable_count());
    let trainer = Trainer {
        config: &tc,
        augment: &cfg.data.augment,
        out_dir: Some(a.out.clone()),
    };
    let outcome = trainer.run(&mut model, &train_set, &val_set, a.resume, &mut LogSink)?;

    let (records, report) = evaluation::evaluate(&model, &val_set, &cfg.eval)?;
    write_eval_outputs(&a.out, "val_", &records, &report)?;
    print!("{}", report.to_table());
    println!(
        "best epoch {} val MAE {:.4} ({} epochs run{})",
        outcome.best_epoch.unwrap_or(0),
        outcome.best_val_mae.unwrap_or(f64::NAN),
        outcome.history.len(),
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    if let Some(m) = outcome.history.last().and_then(|r| r.train_mae) {
        println!("final train MAE {m:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

fn evaluate(a: &EvaluateArgs) -> CliResult {
    require_file(&a.checkpoint, "checkpoint")?;
    if !a.data.is_dir() {
        return Err(usage(format!("dataset root {} is not a directory", a.data.display())));
    }
    let thresholds = parse_thresholds(&a.thresholds)?;
    let data = data_config_for(&a.checkpoint, a.config.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let samples = load_prepared(&a.data, &a.split, ck.model.config().input_size, &data)?;
    let eval_cfg = EvalConfig {
        thresholds,
        ..EvalConfig::default()
    };
    let (records, report) = evaluation::evaluate(&ck.model, &samples, &eval_cfg)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}", a.split))
    });
    create_dir(&out)?;
    write_eval_outputs(&out, "", &records, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

// ---------------------------------------------------------------- predict / gradcam

fn parse_gender(g: i64) -> CliResult<u8> {
    match g {
        0 | 1 => Ok(g as u8),
        _ => Err(usage(format!("--gender must be 0 or 1, got {g}"))),
    }
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn read_annotation(path: &Path, id: &str) -> CliResult<Annotation> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let entry = if v.get("bbox").is_some() {
        v
    } else {
        v.get(id)
            .cloned()
            .ok_or_else(|| usage(format!("{} has no entry for {id}", path.display())))?
    };
    serde_json::from_value(entry).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Load the model and turn one image into a network-ready sample.
fn load_single(a: &ImageArgs, gender: u8) -> CliResult<(Model, PreparedSample)> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.image, "image")?;
    if let Some(p) = &a.annotations {
        require_file(p, "annotations")?;
    }
    let data = data_config_for(&a.checkpoint, a.config.as_deref())?;
    let id = image_id(&a.image);
    let ann = a.annotations.as_deref().map(|p| read_annotation(p, &id)).transpose()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let image = read_png(&a.image)?;
    let row = LabelRow {
        id,
        bone_age: 0.0,
        gender,
    };
    let sample = build_sample(&row, image, ann.as_ref())?;
    let prepared = prepare(&sample, ck.model.config().input_size, &data)?;
    Ok((ck.model, prepared))
}

fn predict(a: &PredictArgs) -> CliResult {
    let gender = parse_gender(a.gender)?;
    let (model, s) = load_single(&a.input, gender)?;
    let preds = crate::training::predict_samples(&model, std::slice::from_ref(&s), 1)?;
    println!("{} {:.4}", s.sample_id, preds[0]);
    Ok(())
}

fn gradcam(a: &GradcamArgs) -> CliResult {
    let tap: Tap = a.tap.parse()?;
    let gender = parse_gender(a.gender)?;
    let (model, s) = load_single(&a.input, gender)?;
    let cam = grad_cam(&model, &s, tap)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_overlay(&a.out, &s.image, &cam.heatmap)?;
    let raw = a.out.with_extension("pfm");
    write_pfm(&raw, &cam.heatmap)?;
    println!("{} {} max {}", cam.sample_id, cam.tap, cam.heatmap.max());
    Ok(())
}

// ---------------------------------------------------------------- ablate

/// Module flags of the four ablation variants, baseline first.
pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("transformer", true, false),
    ("rfaconv", false, true),
    ("both", true, true),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_transformer: bool,
    pub use_rfaconv: bool,
    pub parameters: usize,
    pub best_epoch: Option<usize>,
    pub val_mae: f64,
    pub val_rmse: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<12} {:>11} {:>7} {:>10} {:>9} {:>9}\n",
        "variant", "Transformer", "RFAConv", "params", "val MAE", "val RMSE"
    );
    let mark = |b: bool| if b { "yes" } else { "-" };
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>11} {:>7} {:>10} {:>9.3} {:>9.3}\n",
            r.variant,
            mark(r.use_transformer),
            mark(r.use_rfaconv),
            r.parameters,
            r.val_mae,
            r.val_rmse
        ));
    }
    out
}

fn ablate(a: &AblateArgs) -> CliResult {
    let cfg = load_config(&a.cfg)?;
    let (train_set, val_set) = load_splits(&cfg)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let tc = cfg.effective_train();
    let mut rows = Vec::new();
    for (name, t, r) in VARIANTS {
        let model_cfg = cfg.model.clone().with_modules(t, r);
        let parameters = count_parameters(&model_cfg)?;
        log::info!("variant {name}: {parameters} parameters");
        let mut model = Model::new(&model_cfg, tc.seed)?;
        let dir: PathBuf = a.out.join(name);
        let outcome = Trainer {
            config: &tc,
            augment: &cfg.data.augment,
            out_dir: Some(dir.clone()),
        }
        .run(&mut model, &train_set, &val_set, false, &mut LogSink)?;
        let (records, report) = evaluation::evaluate(&model, &val_set, &cfg.eval)?;
        write_eval_outputs(&dir, "val_", &records, &report)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            use_transformer: t,
            use_rfaconv: r,
            parameters,
            best_epoch: outcome.best_epoch,
            val_mae: report.overall.mae.unwrap_or(f64::NAN),
            val_rmse: report.overall.rmse.unwrap_or(f64::NAN),
        });
    }
    let table = ablation_table(&rows);
    write_json(&a.out.join("ablation.json"), &rows)?;
    write_atomic(&a.out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
