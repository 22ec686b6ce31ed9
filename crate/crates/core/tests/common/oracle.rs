//! Straight-line reimplementation of the decoder forward pass.
//!
//! Reads every weight by name and recomputes logits with nested loops over
//! `Vec<Vec<f64>>`. Shares nothing with the tape beyond parameter names.

#![allow(dead_code, clippy::needless_range_loop)]

use vlfuse::params::ParamStore;

pub type Mat = Vec<Vec<f64>>;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    Fusion,
    Projector,
}

pub struct Shape {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub lora_scale: f64,
}

fn mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.by_name(name).unwrap_or_else(|| panic!("missing {name}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vec1(store: &ParamStore, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

fn has(store: &ParamStore, name: &str) -> bool {
    store.by_name(name).is_some()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_col(a: &Mat, b: &[f64]) -> Mat {
    a.iter().zip(b).map(|(row, bi)| row.iter().map(|x| x + bi).collect()).collect()
}

fn scale(a: &Mat, c: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(h: &Mat, g: &[f64], b: &[f64]) -> Mat {
    let (d, n) = (h.len(), h[0].len());
    let mut out = vec![vec![0.0; n]; d];
    for j in 0..n {
        let mean = (0..d).map(|i| h[i][j]).sum::<f64>() / d as f64;
        let var = (0..d).map(|i| (h[i][j] - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for i in 0..d {
            out[i][j] = (h[i][j] - mean) * inv * g[i] + b[i];
        }
    }
    out
}

fn visible(p: usize, i: usize, j: usize) -> bool {
    i == j
        || match (i < p, j < p) {
            (true, true) => true,
            (true, false) => false,
            (false, true) => true,
            (false, false) => j <= i,
        }
}

fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, p: usize) -> Mat {
    let (d, n) = (q.len(), q[0].len());
    let dk = d / heads;
    let mut out = vec![vec![0.0; n]; d];
    for h in 0..heads {
        let rows = h * dk..(h + 1) * dk;
        for i in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    visible(p, i, j).then(|| {
                        rows.clone().map(|r| q[r][i] * k[r][j]).sum::<f64>() / (dk as f64).sqrt()
                    })
                })
                .collect();
            let mx = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - mx).exp())).collect();
            let z: f64 = w.iter().sum();
            for r in rows.clone() {
                out[r][i] = (0..n).map(|j| w[j] / z * v[r][j]).sum();
            }
        }
    }
    out
}

fn positional(pos: usize, i: usize, d: usize) -> f64 {
    let k = (i / 2) as f64;
    let angle = pos as f64 / 10_000f64.powf(2.0 * k / d as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Logits `|V| × N` for `tokens` after `p = v_emb[0].len()` vision slots.
pub fn forward(store: &ParamStore, s: &Shape, variant: Variant, tokens: &[usize], v_emb: Option<&Mat>) -> Mat {
    let p = v_emb.map_or(0, |v| v[0].len());
    let n = p + tokens.len();
    let d = s.d_h;
    let emb = mat(store, "tok_emb");
    let mut h = vec![vec![0.0; n]; d];
    for pos in 0..n {
        for i in 0..d {
            h[i][pos] = positional(pos, i, d);
            if pos >= p {
                h[i][pos] += emb[tokens[pos - p]][i];
            }
        }
    }
    if variant == Variant::Projector {
        if let Some(v) = v_emb {
            let mut x = v.clone();
            let mut li = 0;
            while has(store, &format!("projector.{li}.w")) {
                if li > 0 {
                    x = x.iter().map(|r| r.iter().map(|&a| gelu(a)).collect()).collect();
                }
                x = add_col(&mul(&mat(store, &format!("projector.{li}.w")), &x), &vec1(store, &format!("projector.{li}.b")));
                li += 1;
            }
            for i in 0..d {
                for j in 0..p {
                    h[i][j] += x[i][j];
                }
            }
        }
    }
    for l in 1..=s.layers {
        let w = |n: &str| mat(store, &format!("layer{l}.{n}"));
        let b = |n: &str| vec1(store, &format!("layer{l}.{n}"));
        let x = layer_norm(&h, &b("ln1.g"), &b("ln1.b"));
        let mut q = mul(&w("wq"), &x);
        let mut k = mul(&w("wk"), &x);
        let mut v = mul(&w("wv"), &x);
        let lora = |which: &str| -> Option<Mat> {
            let a = format!("lora{l}.{which}.a");
            (variant != Variant::Base && has(store, &a)).then(|| {
                let bm = mat(store, &format!("lora{l}.{which}.b"));
                scale(&mul(&bm, &mul(&mat(store, &a), &x)), s.lora_scale)
            })
        };
        if let Some(dq) = lora("q") {
            q = add(&q, &dq);
        }
        if let Some(dv) = lora("v") {
            v = add(&v, &dv);
        }
        let f = format!("fusion{l}");
        if variant == Variant::Fusion && has(store, &format!("{f}.w_t2v")) {
            let t = add_col(&mul(&mat(store, &format!("{f}.w_t2v")), &x), &vec1(store, &format!("{f}.b_t2v")));
            let d_v = t.len();
            // rows 0..d_v: projected text at text slots; rows d_v..2d_v: vision at vision slots
            let mut feat = vec![vec![0.0; n]; 2 * d_v];
            for r in 0..d_v {
                for j in p..n {
                    feat[r][j] = t[r][j];
                }
                if let Some(ve) = v_emb {
                    for j in 0..p {
                        feat[d_v + r][j] = ve[r][j];
                    }
                }
            }
            let term = |wc: &str, al: &str| scale(&mul(&mat(store, &format!("{f}.{wc}")), &feat), vec1(store, &format!("{f}.{al}"))[0]);
            q = add(&q, &term("wc_q", "alpha_q"));
            k = add(&k, &term("wc_k", "alpha_k"));
            v = add(&v, &term("wc_v", "alpha_v"));
        }
        let att = mul(&w("wo"), &attention(&q, &k, &v, s.heads, p));
        h = add(&h, &att);
        let y = layer_norm(&h, &b("ln2.g"), &b("ln2.b"));
        let f1: Mat = add_col(&mul(&w("ff1.w"), &y), &b("ff1.b"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        h = add(&h, &add_col(&mul(&w("ff2.w"), &f1), &b("ff2.b")));
    }
    add_col(&mul(&mat(store, "lm_head.w"), &h), &vec1(store, "lm_head.b"))
}
