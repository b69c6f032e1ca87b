//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach the terminal
//! directly. Set `BONET_ACCEPTANCE_ONLY=7,8` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use bonet::dataio::{generate_synthetic, synthetic_prepared, synthetic_prepared_range, DataConfig, SyntheticSpec};
use bonet::explain::{cam_from_gradient, grad_cam_taps, Tap, CAM_SIZE};
use bonet::model::{count_parameters, load_checkpoint, save_checkpoint, BoNetConfig, CheckpointMeta, Model};
use bonet::training::{
    mean_absolute_error, train, NullSink, PlateauConfig, PlateauScheduler, TrainConfig, TrainOutcome,
};
use bonet::Tensor;
use common::checks::{self, Check};
use serde_json::Value;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_cli(args: &[&str]) -> i32 {
    bonet::cli::run(std::iter::once("bonet").chain(args.iter().copied()))
}

fn no_augment() -> DataConfig {
    let mut dc = DataConfig::default();
    dc.augment.enabled = false;
    dc
}

// ------------------------------------------------------------------ 6

fn scheduler_trace() -> Check {
    let mut s = PlateauScheduler::new(PlateauConfig::default(), 0.001);
    let metrics = [20.0, 19.0, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5, 19.5];
    let trace: Vec<f64> = metrics.iter().map(|&m| s.step(m)).collect();
    // Best at epoch 2; the third stagnant epoch (5) exceeds patience 2.
    // Cooldown covers 6-10, then 11-13 stagnate again.
    let first = trace.iter().position(|&lr| lr < 0.001).ok_or("lr never reduced")?;
    ensure(first == 4, || format!("first reduction after epoch {}, expected 5", first + 1))?;
    ensure((trace[first] - 0.0008).abs() < 1e-15, || format!("reduced lr {}", trace[first]))?;
    let second = trace.iter().position(|&lr| lr < 0.0008 - 1e-15).ok_or("no second reduction")?;
    ensure(second == 12, || format!("second reduction after epoch {}, expected 13", second + 1))?;
    ensure(trace[5..12].iter().all(|&lr| lr == trace[first]), || "lr changed inside cooldown".into())?;
    ensure(trace.windows(2).all(|w| w[1] <= w[0]), || "lr increased".into())?;
    Ok(format!("lr trace 0.001 -> {} at epoch 5 -> {:.6} at epoch 13", trace[first], trace[second]))
}

// ------------------------------------------------------------------ 7

fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: 500,
        batch_size: 8,
        early_stopping_patience: None,
        track_train_mae: true,
        target_train_mae: Some(1.0),
        seed: 7,
        ..TrainConfig::default()
    }
}

fn overfit_once(cfg: &BoNetConfig, dc: &DataConfig) -> Result<(TrainOutcome, Vec<u64>), String> {
    let data = synthetic_prepared(&SyntheticSpec::new(21, 8), cfg.input_size, dc).map_err(|e| e.to_string())?;
    let mut model = Model::new(cfg, 7).map_err(|e| e.to_string())?;
    let tc = overfit_config();
    let out = train(&mut model, &data, &data, &tc, &dc.augment, None, &mut NullSink).map_err(|e| e.to_string())?;
    let bits = bonet::training::predict_samples(&model, &data, 8)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|p| p.to_bits())
        .collect();
    Ok((out, bits))
}

fn overfit() -> Check {
    let start = Instant::now();
    let cfg = BoNetConfig::mini();
    let dc = no_augment();
    let (a, pa) = overfit_once(&cfg, &dc)?;
    let last = a.history.last().and_then(|r| r.train_mae).unwrap_or(f64::NAN);
    ensure(a.reached_target, || {
        format!("training MAE {last:.3} after {} epochs, needed < 1", a.history.len())
    })?;
    let (b, pb) = overfit_once(&cfg, &dc)?;
    let ja = serde_json::to_string(&a.history).unwrap();
    let jb = serde_json::to_string(&b.history).unwrap();
    ensure(ja == jb && pa == pb, || "repeat run under the same seed differs".into())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 600.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "train MAE {last:.3} after {} epochs, repeat bit-identical, {secs:.0}s for both runs",
        a.history.len()
    ))
}

// ------------------------------------------------------------------ 8

fn learning_signal() -> Check {
    let start = Instant::now();
    let cfg = BoNetConfig::mini();
    let dc = DataConfig::default();
    let spec = SyntheticSpec::new(11, 640);
    let train_set = synthetic_prepared_range(&spec, 0..512, cfg.input_size, &dc).map_err(|e| e.to_string())?;
    let val_set = synthetic_prepared_range(&spec, 512..640, cfg.input_size, &dc).map_err(|e| e.to_string())?;
    let mean = train_set.iter().map(|s| s.bone_age).sum::<f64>() / train_set.len() as f64;
    let baseline = mean_absolute_error(&vec![mean; val_set.len()], &val_set);
    let tc = TrainConfig {
        epochs: 60,
        early_stopping_patience: None,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&cfg, 0).map_err(|e| e.to_string())?;
    let out = train(&mut model, &train_set, &val_set, &tc, &dc.augment, None, &mut NullSink).map_err(|e| e.to_string())?;
    let best = out.best_val_mae.unwrap_or(f64::NAN);
    let gain = 1.0 - best / baseline;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "baseline val MAE {baseline:.2}, best val MAE {best:.2} at epoch {} ({:.0}% better), {secs:.0}s",
        out.best_epoch.unwrap_or(0),
        100.0 * gain
    );
    ensure(gain >= 0.30 && secs < 2700.0, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------ 9

fn ablation() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let out = dir.path().join("ablate");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    ensure(run_cli(&["synth", "--seed", "3", "--n", "160", "--out", &s(&data)]) == 0, || "synth failed".into())?;
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"model_preset": "mini", "train": {"epochs": 2, "batch_size": 16}, "seed": 5}"#,
    )
    .map_err(|e| e.to_string())?;
    let code = run_cli(&["ablate", "--config", &s(&cfg_path), "--data", &s(&data), "--out", &s(&out)]);
    ensure(code == 0, || format!("ablate exited {code}"))?;
    let rows: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(rows.len() == 4, || format!("{} rows", rows.len()))?;
    let mut counts = Vec::new();
    for r in &rows {
        let (t, f) = (r["use_transformer"].as_bool().unwrap(), r["use_rfaconv"].as_bool().unwrap());
        let expect = count_parameters(&BoNetConfig::mini().with_modules(t, f)).map_err(|e| e.to_string())?;
        let got = r["parameters"].as_u64().unwrap() as usize;
        ensure(got == expect, || format!("{}: {got} parameters vs recount {expect}", r["variant"]))?;
        let m = r["val_mae"].as_f64().unwrap_or(f64::NAN);
        ensure(m.is_finite(), || format!("{}: val MAE {m}", r["variant"]))?;
        counts.push(got);
    }
    let mut uniq = counts.clone();
    uniq.sort_unstable();
    uniq.dedup();
    ensure(uniq.len() == 4, || format!("parameter counts not distinct: {counts:?}"))?;
    Ok(format!("4 variants, parameter counts {counts:?}"))
}

// ------------------------------------------------------------------ 10

fn gradcam() -> Check {
    let cfg = BoNetConfig::mini();
    let model = Model::new(&cfg, 4).map_err(|e| e.to_string())?;
    let samples = synthetic_prepared(&SyntheticSpec::new(8, 3), cfg.input_size, &DataConfig::default())
        .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for s in &samples {
        for cam in grad_cam_taps(&model, s, &Tap::ALL).map_err(|e| e.to_string())? {
            let h = &cam.heatmap;
            ensure((h.width(), h.height()) == (CAM_SIZE, CAM_SIZE), || format!("{} is {}x{}", cam.tap, h.width(), h.height()))?;
            ensure(h.min() >= 0.0 && h.max() <= 1.0, || format!("{} outside [0, 1]", cam.tap))?;
            ensure(h.max() == 1.0, || format!("{} on {}: max {}", cam.tap, s.sample_id, h.max()))?;
            checked += 1;
        }
    }
    // Constructed case: positive activations, negative gradients everywhere.
    let a = Tensor::from_fn(&[1, 3, 7, 5], |i| 0.1 + (i % 11) as f64);
    let g = Tensor::from_fn(&[1, 3, 7, 5], |i| -0.01 - (i % 3) as f64);
    let cam = cam_from_gradient(&a, &g).map_err(|e| e.to_string())?;
    ensure(cam.data().iter().all(|&v| v == 0.0), || "negative weighted sum did not give a zero map".into())?;
    Ok(format!("{checked} heatmaps at 4 taps are 500x500 with max 1; negative case all zero"))
}

// ------------------------------------------------------------------ 11

fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = BoNetConfig::mini();
    let dc = no_augment();
    let data = synthetic_prepared(&SyntheticSpec::new(2, 17), cfg.input_size, &dc).map_err(|e| e.to_string())?;
    let mut model = Model::new(&cfg, 2).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &data, &tc, &dc.augment, None, &mut NullSink).map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &CheckpointMeta::new(1, 2), &[]).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let before = bonet::training::predict_samples(&model, &data, 8).map_err(|e| e.to_string())?;
    let after = bonet::training::predict_samples(&back.model, &data, 8).map_err(|e| e.to_string())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&before) == bits(&after), || "reloaded model predicts differently".into())?;

    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let flipped = load_checkpoint(&path).err().map(|e| e.to_string()).unwrap_or_default();
    ensure(flipped.contains("checksum"), || format!("bit flip not rejected by checksum: {flipped:?}"))?;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes[..bytes.len() - 100]).map_err(|e| e.to_string())?;
    let truncated = load_checkpoint(&path).err().map(|e| e.to_string()).unwrap_or_default();
    ensure(truncated.contains("checksum"), || format!("truncation not rejected by checksum: {truncated:?}"))?;
    Ok(format!("{} predictions bit-exact; bit flip and truncation rejected", before.len()))
}

// ------------------------------------------------------------------ 12

fn report_fixture() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("fixture");
    generate_synthetic(&SyntheticSpec::new(12, 10), &root, "test").map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("model.ckpt");
    let model = Model::new(&BoNetConfig::mini(), 12).map_err(|e| e.to_string())?;
    save_checkpoint(&ckpt, &model, &CheckpointMeta::new(0, 12), &[]).map_err(|e| e.to_string())?;
    let out = dir.path().join("eval");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let code = run_cli(&[
        "evaluate", "--checkpoint", &s(&ckpt), "--data", &s(&root), "--split", "test", "--thresholds", "6,12", "--out",
        &s(&out),
    ]);
    ensure(code == 0, || format!("evaluate exited {code}"))?;
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(rep["n"] == 10, || format!("n = {}", rep["n"]))?;
    for k in ["mae", "rmse", "pearson_r", "pearson_p"] {
        ensure(rep[k].is_number(), || format!("{k} missing or null"))?;
    }
    for t in ["6", "12"] {
        let v = rep["cum_acc"][t].as_f64().ok_or_else(|| format!("cum_acc {t} missing"))?;
        ensure((0.0..=1.0).contains(&v), || format!("cum_acc {t} = {v}"))?;
    }
    let strata = rep["strata"].as_object().ok_or("strata missing")?;
    let mut total = 0;
    for k in ["<1", "1-7", "8-15", "16-20"] {
        let st = strata.get(k).ok_or_else(|| format!("stratum {k} missing"))?;
        let n = st["n"].as_u64().ok_or_else(|| format!("stratum {k} has no n"))?;
        ensure(n > 0 || st["mae"].is_null(), || format!("empty stratum {k} has stats"))?;
        total += n;
    }
    ensure(total == 10, || format!("age strata hold {total} samples"))?;
    ensure(strata.contains_key("female") && strata.contains_key("male"), || "gender strata missing".into())?;
    for f in ["report.txt", "predictions.csv", "plot.png"] {
        ensure(out.join(f).is_file(), || format!("{f} not written"))?;
    }
    Ok("report fields, cumulative accuracies at 6/12 and age/gender strata present on a 10-sample fixture".into())
}

type Criterion = (u32, &'static str, fn() -> Check);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "metric oracle equivalence", || checks::metric_oracles(100, 1)),
        (2, "smooth-L1 contract", checks::smooth_l1_contract),
        (3, "attention correctness", || checks::attention_oracles(50, 3)),
        (4, "RFAConv correctness", || checks::rfaconv_oracles(50, 4)),
        (5, "gradient checks", || {
            let start = Instant::now();
            let blocks = checks::block_gradchecks(5)?;
            let full = checks::model_gradcheck(5, 20)?;
            let secs = start.elapsed().as_secs_f64();
            ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
            Ok(format!("{blocks}, {full}, {secs:.0}s"))
        }),
        (6, "scheduler state machine", scheduler_trace),
        (7, "overfit sanity", overfit),
        (8, "learning signal", learning_signal),
        (9, "ablation harness", ablation),
        (10, "Grad-CAM contract", gradcam),
        (11, "checkpoint round trip", checkpoint_round_trip),
        (12, "evaluation report schema", report_fixture),
    ];
    let only: Option<Vec<u32>> = std::env::var("BONET_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());

    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]");
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
