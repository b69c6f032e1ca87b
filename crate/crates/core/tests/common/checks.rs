//! Oracle and property checks shared by the acceptance run and the regular
//! integration tests. Each returns a one-line summary or a failure message.

#![allow(dead_code)]

use std::time::Instant;

use bonet::autograd::Graph;
use bonet::evaluation::{cumulative_accuracy, mae, pearson, rmse, stratified_report, PredictionRecord};
use bonet::gradcheck::{check_param_gradients, GradCheck};
use bonet::nnblocks::{
    scaled_dot_product_attention, Builder, ConvStem, ConvStemConfig, MultiHeadSelfAttention, RfaConv,
    RfaConvConfig, TransformerConfig, TransformerModule,
};
use bonet::params::{ParamId, ParamStore};
use bonet::training::{smooth_l1, smooth_l1_grad};
use bonet::Tensor;
use rand::Rng;

use super::*;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ------------------------------------------------------------------ metrics

pub fn metric_oracles(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let n = rng.random_range(3..=50);
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..240.0)).collect();
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..250.0)).collect();
        let mut cmp = |what: &str, got: f64, want: f64| -> Result<(), String> {
            let e = rel_err(got, want);
            worst = worst.max(e);
            ensure(e <= 1e-10, || format!("case {case} (n={n}): {what} {got} vs oracle {want}"))
        };
        cmp("mae", mae(&preds, &labels).unwrap(), brute_mae(&preds, &labels))?;
        cmp("rmse", rmse(&preds, &labels).unwrap(), brute_rmse(&preds, &labels))?;
        let (r, p) = pearson(&preds, &labels).unwrap();
        let (br, bp) = brute_pearson(&preds, &labels);
        cmp("pearson r", r, br)?;
        cmp("pearson p", p, bp)?;
        for t in [0.0, 6.0, 12.0, rng.random_range(0.0..100.0)] {
            cmp("cum_acc", cumulative_accuracy(&preds, &labels, t).unwrap(), brute_cum_acc(&preds, &labels, t))?;
        }

        let records: Vec<PredictionRecord> = (0..n)
            .map(|i| PredictionRecord {
                sample_id: format!("r{i}"),
                gender: rng.random_range(0..=1u8),
                bone_age: labels[i],
                predicted: preds[i],
            })
            .collect();
        let rep = stratified_report(&records, &[6.0, 12.0]).unwrap();
        cmp("report mae", rep.overall.mae.unwrap(), brute_mae(&preds, &labels))?;
        cmp("report rmse", rep.overall.rmse.unwrap(), brute_rmse(&preds, &labels))?;
        let rmse_sq_n = rep.overall.rmse.unwrap().powi(2) * n as f64;
        let sse: f64 = preds.iter().zip(&labels).map(|(p, y)| (y - p).powi(2)).sum();
        ensure(rel_err(rmse_sq_n, sse) <= 1e-12, || format!("case {case}: rmse^2 n {rmse_sq_n} vs SSE {sse}"))?;
        for family in [&["female", "male"][..], &["<1", "1-7", "8-15", "16-20"][..]] {
            let total: usize = family.iter().map(|k| rep.strata[*k].n).sum();
            ensure(total == n, || format!("case {case}: strata {family:?} cover {total} of {n}"))?;
            let recombined: f64 = family
                .iter()
                .map(|k| &rep.strata[*k])
                .filter(|s| s.n > 0)
                .map(|s| s.n as f64 / n as f64 * s.mae.unwrap())
                .sum();
            cmp("stratum recombination", recombined, brute_mae(&preds, &labels))?;
        }
    }

    // Fixed small vectors.
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 1.0, 4.0, 3.0, 5.0];
    let (r, p) = pearson(&x, &y).unwrap();
    ensure((r - 0.8).abs() < 1e-14, || format!("fixed r {r}, expected 0.8"))?;
    // t = 0.8 sqrt(3 / 0.36), 3 dof: p = 1 - 2/pi (atan(4/3) + 0.48).
    let (_, bp) = brute_pearson(&x, &y);
    ensure(rel_err(p, bp) < 1e-10 && (p - 0.104_088_038_661_827_8).abs() < 1e-12, || format!("fixed p {p} vs {bp}"))?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{instances} instances, worst rel err {worst:.1e}, {secs:.2}s"))
}

// ------------------------------------------------------------------ loss

pub fn smooth_l1_contract() -> Check {
    let quad = |d: f64| 0.5 * d * d;
    let lin = |d: f64| d.abs() - 0.5;
    for d in [1.0, -1.0] {
        ensure(quad(d) == 0.5 && lin(d) == 0.5 && smooth_l1(d) == 0.5, || format!("branches at {d}"))?;
        let left = smooth_l1(d * (1.0 - 1e-12));
        ensure((left - 0.5).abs() < 1e-11, || format!("jump at {d}: {left}"))?;
    }
    ensure(smooth_l1(0.5) == 0.125, || format!("l(0.5) = {}", smooth_l1(0.5)))?;
    ensure(smooth_l1(2.5) == 2.0, || format!("l(2.5) = {}", smooth_l1(2.5)))?;
    let mut worst = 0.0f64;
    for i in 0..=10_000 {
        let d = -5.0 + i as f64 * 1e-3;
        let g = smooth_l1_grad(d);
        let h = 1e-7;
        let fd = (smooth_l1(d + h) - smooth_l1(d - h)) / (2.0 * h);
        worst = worst.max(g.abs()).max(fd.abs());
        ensure(g.abs() <= 1.0 && fd.abs() <= 1.0 + 1e-6, || format!("|l'({d})| = {g} / fd {fd}"))?;
    }
    // The graph loss node agrees with the scalar definition.
    let mut g = Graph::new();
    let p = g.leaf(Tensor::new(&[4, 1], vec![0.0, 1.0, 3.5, -2.0]));
    let loss = g.smooth_l1_loss(p, &[0.5, 2.0, 1.0, -2.0]);
    let want = (0.125 + 0.5 + 2.0 + 0.0) / 4.0;
    ensure((g.value(loss).item() - want).abs() < 1e-15, || format!("batch loss {}", g.value(loss).item()))?;
    Ok(format!("continuity ok, max |l'| on grid {worst:.6}"))
}

// ------------------------------------------------------------------ attention

pub fn attention_oracles(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut worst_row = 0.0f64;
    for trial in 0..trials {
        let n = rng.random_range(1..=16);
        let dk = rng.random_range(1..=32);
        let dv = rng.random_range(1..=32);
        let q = rand_tensor(&mut rng, &[n, dk], 2.0);
        let k = rand_tensor(&mut rng, &[n, dk], 2.0);
        let v = rand_tensor(&mut rng, &[n, dv], 2.0);
        let got = scaled_dot_product_attention(&q, &k, &v).map_err(|e| e.to_string())?;
        let (_, want) = naive_attention(&to_mat(&q), &to_mat(&k), &to_mat(&v));
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                let e = (got.data()[i * dv + j] - w).abs();
                worst = worst.max(e);
                ensure(e < 1e-6, || format!("trial {trial}: sdpa[{i},{j}] off by {e}"))?;
            }
        }
        // Softmax rows of the library's score pipeline.
        let mut g = Graph::new();
        let qi = g.constant(q.clone().reshape(&[1, n, dk]));
        let ki = g.constant(k.clone().reshape(&[1, n, dk]));
        let s = g.bmm(qi, ki, false, true);
        let s = g.scale(s, 1.0 / (dk as f64).sqrt());
        let wts = g.softmax(s, 2);
        for row in g.value(wts).data().chunks(n) {
            let e = (row.iter().sum::<f64>() - 1.0).abs();
            worst_row = worst_row.max(e);
            ensure(e < 1e-6, || format!("trial {trial}: softmax row sums to 1 + {e}"))?;
        }

        // Multi-head self-attention against per-head slicing.
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=32 / heads);
        let mut store = ParamStore::new();
        let mhsa = MultiHeadSelfAttention::new(&mut Builder::new(&mut store, trial as u64), "attn", d, heads)
            .map_err(|e| e.to_string())?;
        randomize(&mut store, &mut rng);
        let x = rand_tensor(&mut rng, &[n, d], 1.5);
        let mut g = Graph::with_params(&store, false, false);
        let xi = g.constant(x.clone().reshape(&[1, n, d]));
        let out = mhsa.forward(&mut g, xi);
        let want = naive_mhsa(&store, "attn", &to_mat(&x), heads);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                let e = (g.value(out).data()[i * d + j] - w).abs();
                worst = worst.max(e);
                ensure(e < 1e-6, || format!("trial {trial}: mhsa[{i},{j}] off by {e} (h={heads}, d={d})"))?;
            }
        }
    }
    Ok(format!("{trials} trials, max abs err {worst:.1e}, max row-sum err {worst_row:.1e}"))
}

// ------------------------------------------------------------------ RFAConv

pub fn rfaconv_oracles(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let cfg = RfaConvConfig::default();
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut store = ParamStore::new();
        let rfa = RfaConv::new(&mut Builder::new(&mut store, trial as u64), "rfa", 2, &cfg).map_err(|e| e.to_string())?;
        randomize(&mut store, &mut rng);
        let x = rand_tensor(&mut rng, &[1, 2, 8, 8], 2.0);
        let mut g = Graph::with_params(&store, false, false);
        let xi = g.constant(x.clone());
        let tr = rfa.forward_trace(&mut g, xi).map_err(|e| e.to_string())?;
        let (want, att) = naive_rfaconv(&store, "rfa", &x.clone().reshape(&[2, 8, 8]), 3, cfg.bn_eps);
        let out = g.value(tr.output).data();
        for (o, plane) in want.iter().enumerate() {
            for (i, row) in plane.iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    let e = (out[(o * 8 + i) * 8 + j] - w).abs();
                    worst = worst.max(e);
                    ensure(e < 1e-5, || format!("trial {trial}: out[{o},{i},{j}] off by {e}"))?;
                }
            }
        }
        let a = g.value(tr.attention).data();
        for c in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    for s in 0..9 {
                        let e = (a[((c * 9 + s) * 8 + i) * 8 + j] - att[c][i][j][s]).abs();
                        ensure(e < 1e-9, || format!("trial {trial}: attention weight off by {e}"))?;
                    }
                }
            }
        }
    }

    // Zero attention-branch parameters give uniform weights.
    let mut store = ParamStore::new();
    let rfa = RfaConv::new(&mut Builder::new(&mut store, 9), "rfa", 2, &cfg).map_err(|e| e.to_string())?;
    let wid = store.find("rfa.get_weight.weight").expect("attention weights");
    store.get_mut(wid).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let x = rand_tensor(&mut rng, &[1, 2, 8, 8], 3.0);
    let mut uniform_err = 0.0f64;
    for training in [false, true] {
        let mut g = Graph::with_params(&store, training, false);
        let xi = g.constant(x.clone());
        let tr = rfa.forward_trace(&mut g, xi).map_err(|e| e.to_string())?;
        for &w in g.value(tr.attention).data() {
            uniform_err = uniform_err.max((w - 1.0 / 9.0).abs());
        }
    }
    ensure(uniform_err <= 1e-7, || format!("zero-parameter attention deviates from 1/9 by {uniform_err}"))?;
    Ok(format!("{trials} trials, max abs err {worst:.1e}, uniform weights within {uniform_err:.1e}"))
}

// ------------------------------------------------------------------ gradient checks

fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .trainable_ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect()
}

fn summarize(name: &str, r: &GradCheck, tol: f64) -> Result<String, String> {
    ensure(r.max_rel_err < tol, || {
        format!("{name}: rel err {:.2e} over {} coords, worst {:?}", r.max_rel_err, r.checked, r.worst)
    })?;
    Ok(format!("{name} {:.1e}", r.max_rel_err))
}

pub fn block_gradchecks(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut parts = Vec::new();

    // Conv stem, training-mode batch norm.
    let cfg = ConvStemConfig {
        channel_widths: vec![2, 3, 3, 4, 4],
        ..ConvStemConfig::default()
    };
    let mut store = ParamStore::new();
    let stem = ConvStem::new(&mut Builder::new(&mut store, seed), "stem", 1, &cfg);
    randomize(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 1, 8, 8], 1.0);
    let w = rand_tensor(&mut rng, &[2, 4, 2, 2], 1.0);
    let r = check_param_gradients(&store, &all_coords(&store), 1e-6, |g| {
        g.set_training(true);
        let xi = g.constant(x.clone());
        let y = stem.forward(g, xi).unwrap();
        g.weighted_sum(y, w.clone())
    });
    parts.push(summarize("stem", &r, 1e-4)?);

    // Transformer module with pooling.
    let tcfg = TransformerConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_hidden: 12,
        token_cap: 4,
        ..TransformerConfig::default()
    };
    let mut store = ParamStore::new();
    let tm = TransformerModule::new(&mut Builder::new(&mut store, seed), "tr", &tcfg, (4, 4)).map_err(|e| e.to_string())?;
    randomize(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 8, 4, 4], 1.0);
    let w = rand_tensor(&mut rng, &[2, 8, 4, 4], 1.0);
    // Key biases cancel in the softmax, so their true gradient is zero and
    // the difference quotient is pure roundoff; a wider step keeps that small.
    let r = check_param_gradients(&store, &all_coords(&store), 1e-4, |g| {
        let xi = g.constant(x.clone());
        let y = tm.forward(g, xi).unwrap();
        g.weighted_sum(y, w.clone())
    });
    parts.push(summarize("transformer", &r, 1e-4)?);

    // RFAConv, training-mode batch norm.
    let mut store = ParamStore::new();
    let rfa = RfaConv::new(&mut Builder::new(&mut store, seed), "rfa", 2, &RfaConvConfig::default()).map_err(|e| e.to_string())?;
    randomize(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 5], 1.0);
    let w = rand_tensor(&mut rng, &[2, 2, 5, 5], 1.0);
    let r = check_param_gradients(&store, &all_coords(&store), 1e-6, |g| {
        g.set_training(true);
        let xi = g.constant(x.clone());
        let y = rfa.forward(g, xi).unwrap();
        g.weighted_sum(y, w.clone())
    });
    parts.push(summarize("rfaconv", &r, 1e-4)?);
    Ok(parts.join(", "))
}

pub fn model_gradcheck(seed: u64, n_coords: usize) -> Check {
    use bonet::model::{BoNetConfig, Model};
    let mut rng = rng(seed);
    let mut cfg = BoNetConfig::mini();
    cfg.input_size = 32;
    let mut model = Model::new(&cfg, seed).map_err(|e| e.to_string())?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = model.params.get_mut(id);
        if name.ends_with("running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with("running_mean") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let coords: Vec<(ParamId, usize)> = {
        let trainable: Vec<_> = model.params.trainable_ids().collect();
        (0..n_coords)
            .map(|_| {
                let id = trainable[rng.random_range(0..trainable.len())];
                (id, rng.random_range(0..model.params.get(id).numel()))
            })
            .collect()
    };
    let images = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.random_range(0.0..1.0));
    let maps = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.random_range(0.0..1.0));
    let net = &model.net;
    let r = check_param_gradients(&model.params, &coords, 1e-5, |g| {
        let x = g.constant(images.clone());
        let m = g.constant(maps.clone());
        let out = net.forward(g, x, m, &[0, 1]).unwrap();
        g.sum_all(out.output)
    });
    summarize("full mini model", &r, 1e-3)
}
