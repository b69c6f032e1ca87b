//! Independent reference implementations used by the integration tests.
//! Everything here is written from the defining formulas with plain loops
//! and shares no code with the library beyond reading parameters.

#![allow(dead_code)]

pub mod checks;

use bonet::params::ParamStore;
use bonet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store
        .get(store.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

/// Overwrite every parameter and buffer with random values; variances stay
/// positive.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let var = store.name(id).ends_with("running_var");
        for v in store.get_mut(id).data_mut() {
            *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) };
        }
    }
}

// ------------------------------------------------------------------ metrics

pub fn brute_mae(p: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += if y[i] > p[i] { y[i] - p[i] } else { p[i] - y[i] };
    }
    s / p.len() as f64
}

pub fn brute_rmse(p: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (y[i] - p[i]).powi(2);
    }
    (s / p.len() as f64).sqrt()
}

pub fn brute_cum_acc(p: &[f64], y: &[f64], t: f64) -> f64 {
    let mut hits = 0;
    for i in 0..p.len() {
        if (y[i] - p[i]).abs() <= t {
            hits += 1;
        }
    }
    hits as f64 / p.len() as f64
}

/// Raw-sum correlation formula.
pub fn brute_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sxy += x[i] * y[i];
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Two-sided Student-t tail probability `P(|T| > |t|)` for integer degrees
/// of freedom, from the closed-form finite series in `theta = atan(t/sqrt(nu))`.
pub fn t_two_sided(t: f64, nu: usize) -> f64 {
    assert!(nu >= 1);
    let theta = (t.abs() / (nu as f64).sqrt()).atan();
    let (s, c) = (theta.sin(), theta.cos());
    let a = if nu % 2 == 1 {
        let mut series = 0.0;
        if nu > 1 {
            let mut term = c;
            series = term;
            let mut k = 1;
            while 2 * k + 1 < nu {
                term *= (2 * k) as f64 / (2 * k + 1) as f64 * c * c;
                series += term;
                k += 1;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * series)
    } else {
        let mut term = 1.0;
        let mut series = 1.0;
        let mut k = 1;
        while 2 * k < nu {
            term *= (2 * k - 1) as f64 / (2 * k) as f64 * c * c;
            series += term;
            k += 1;
        }
        s * series
    };
    1.0 - a
}

pub fn brute_pearson(x: &[f64], y: &[f64]) -> (f64, f64) {
    let r = brute_r(x, y);
    let nu = x.len() - 2;
    let t = r * (nu as f64 / (1.0 - r * r)).sqrt();
    (r, t_two_sided(t, nu))
}

// ------------------------------------------------------------------ attention

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// Softmax rows of `Q K^T / sqrt(d_k)` and the attended values.
pub fn naive_attention(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let dk = q[0].len() as f64;
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for qi in q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += wj * vc;
            }
        }
        weights.push(w);
        out.push(o);
    }
    (weights, out)
}

/// `x W^T + b` with a `[dout, din]` weight.
pub fn naive_linear(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..din {
                        s += row[i] * w.data()[o * din + i];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Multi-head self-attention on one token sequence, heads handled one at a
/// time by slicing columns.
pub fn naive_mhsa(store: &ParamStore, prefix: &str, x: &Mat, heads: usize) -> Mat {
    let lin = |name: &str, m: &Mat| {
        naive_linear(
            m,
            param(store, &format!("{prefix}.{name}.weight")),
            Some(param(store, &format!("{prefix}.{name}.bias"))),
        )
    };
    let (q, k, v) = (lin("query", x), lin("key", x), lin("value", x));
    let d = q[0].len();
    let dk = d / heads;
    let mut concat = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let cols = |m: &Mat| -> Mat { m.iter().map(|r| r[h * dk..(h + 1) * dk].to_vec()).collect() };
        let (_, o) = naive_attention(&cols(&q), &cols(&k), &cols(&v));
        for (t, row) in o.iter().enumerate() {
            concat[t][h * dk..(h + 1) * dk].copy_from_slice(row);
        }
    }
    lin("out", &concat)
}

// ------------------------------------------------------------------ RFAConv

/// Per-window RFAConv on one `[C, H, W]` input with eval-mode batch norm;
/// returns `[C_out][H][W]` and the softmax weights `[C][H][W][k*k]`.
pub fn naive_rfaconv(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    k: usize,
    bn_eps: f64,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let at = |ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[ch * h * w + i as usize * w + j as usize]
        }
    };
    let p = |n: &str| param(store, &format!("{prefix}.{n}"));
    let (wg, wf) = (p("get_weight.weight"), p("generate_feature.weight"));
    let (gamma, beta) = (p("generate_feature_bn.weight"), p("generate_feature_bn.bias"));
    let (rm, rv) = (p("generate_feature_bn.running_mean"), p("generate_feature_bn.running_var"));
    let (wm, bm) = (p("conv.weight"), p("conv.bias"));
    let cout = wm.shape()[0];
    let kk = k * k;
    let r = (k / 2) as isize;

    let mut att = vec![vec![vec![vec![0.0; kk]; w]; h]; c];
    let mut weighted = vec![vec![vec![vec![0.0; kk]; w]; h]; c];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut pooled = 0.0;
                for u in 0..k as isize {
                    for v in 0..k as isize {
                        pooled += at(ch, i as isize + u - r, j as isize + v - r);
                    }
                }
                pooled /= kk as f64;
                let logits: Vec<f64> = (0..kk).map(|s| wg.data()[ch * kk + s] * pooled).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for s in 0..kk {
                    let a = (logits[s] - m).exp() / z;
                    att[ch][i][j][s] = a;
                    let o = ch * kk + s;
                    let mut f = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            f += wf.data()[o * kk + u * k + v] * at(ch, i as isize + u as isize - r, j as isize + v as isize - r);
                        }
                    }
                    let f = (f - rm.data()[o]) / (rv.data()[o] + bn_eps).sqrt() * gamma.data()[o] + beta.data()[o];
                    weighted[ch][i][j][s] = f.max(0.0) * a;
                }
            }
        }
    }
    let mut out = vec![vec![vec![0.0; w]; h]; cout];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut s = bm.data()[o];
                for ch in 0..c {
                    for slot in 0..kk {
                        s += wm.data()[((o * c + ch) * k + slot / k) * k + slot % k] * weighted[ch][i][j][slot];
                    }
                }
                out[o][i][j] = s;
            }
        }
    }
    (out, att)
}
