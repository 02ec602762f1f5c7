//! Independent reference implementations used as test oracles. Everything
//! here is written from the formulas directly with plain `Vec<f64>` loops and
//! shares no code with the library beyond reading parameter tensors.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use sarm::model::{BlockParams, FusionParams, ModelParams};

pub type Mat = Vec<Vec<f64>>;

pub fn rows(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// `x (n×a) · w (a×b)` with `w` stored row-major as `a×b`.
pub fn mm(x: &Mat, w: &[f64], b: usize) -> Mat {
    x.iter()
        .map(|r| {
            (0..b)
                .map(|j| r.iter().enumerate().map(|(i, &xi)| xi * w[i * b + j]).sum())
                .collect()
        })
        .collect()
}

pub fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, gi)| gi * v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn rope(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = x.to_vec();
    for k in 0..d / 2 {
        let th = pos as f64 / base.powf(2.0 * k as f64 / d as f64);
        out[2 * k] = x[2 * k] * th.cos() - x[2 * k + 1] * th.sin();
        out[2 * k + 1] = x[2 * k] * th.sin() + x[2 * k + 1] * th.cos();
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax attention of each query over the unmasked keys.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, mask: &[bool]) -> (Mat, Mat) {
    let d = q[0].len() as f64;
    let mut outs = Vec::new();
    let mut ws = Vec::new();
    for qi in q {
        let s: Vec<f64> = k.iter().map(|kj| dot(qi, kj) / d.sqrt()).collect();
        let m = s
            .iter()
            .zip(mask)
            .filter(|(_, &pad)| !pad)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s
            .iter()
            .zip(mask)
            .map(|(&x, &pad)| if pad { 0.0 } else { (x - m).exp() })
            .collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += wj * vc;
            }
        }
        outs.push(o);
        ws.push(w);
    }
    (outs, ws)
}

pub fn block(p: &BlockParams<f64>, x: &Mat, mask: &[bool], eps: f64, base: f64) -> Mat {
    let d = x[0].len();
    let a: Mat = x.iter().map(|r| rms(r, p.g_attn.data(), eps)).collect();
    let q: Mat = mm(&a, p.wq.data(), d)
        .iter()
        .enumerate()
        .map(|(i, r)| rope(r, i, base))
        .collect();
    let k: Mat = mm(&a, p.wk.data(), d)
        .iter()
        .enumerate()
        .map(|(i, r)| rope(r, i, base))
        .collect();
    let v = mm(&a, p.wv.data(), d);
    let (o, _) = attend(&q, &k, &v, mask);
    let o = mm(&o, p.wo.data(), d);
    let x1: Mat = x
        .iter()
        .zip(&o)
        .map(|(r, s)| r.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect();
    let b: Mat = x1.iter().map(|r| rms(r, p.g_ffn.data(), eps)).collect();
    let u = mm(&b, p.w1.data(), 4 * d);
    let g: Mat = u
        .iter()
        .map(|r| r.iter().map(|&z| gelu(z)).collect())
        .collect();
    let f = mm(&g, p.w2.data(), d);
    x1.iter()
        .zip(&f)
        .map(|(r, s)| r.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect()
}

/// Gated fusion of one position against its aligned extended embedding.
pub fn fuse(h: &[f64], e: &[f64], f: &FusionParams<f64>, eps: f64) -> (Vec<f64>, f64) {
    let d = h.len();
    let em = vec![e.to_vec()];
    let k = &mm(&em, f.wk.data(), d)[0];
    let v = &mm(&em, f.wv.data(), d)[0];
    let alpha =
        sigmoid(dot(&rms(h, f.g_h.data(), eps), &rms(k, f.g_k.data(), eps)) / (d as f64).sqrt());
    (h.iter().zip(v).map(|(a, b)| a + alpha * b).collect(), alpha)
}

/// Anchor encoder: embeddings, blocks, fusion after each configured site.
pub fn encode(p: &ModelParams<f64>, base: &[u32], align: &[u32], fuse_on: bool) -> Mat {
    let eps = p.cfg.rms_eps;
    let mask: Vec<bool> = base.iter().map(|&t| t == 0).collect();
    let mut x: Mat = base
        .iter()
        .map(|&t| p.sae.e_base.row(t as usize).to_vec())
        .collect();
    for (b, bp) in p.sae.blocks.iter().enumerate() {
        x = block(bp, &x, &mask, eps, p.cfg.rope_base);
        if let Some(slot) = p
            .cfg
            .fusion
            .sites
            .iter()
            .position(|&s| s == b)
            .filter(|_| fuse_on)
        {
            x = x
                .iter()
                .zip(align)
                .map(|(h, &t)| fuse(h, p.sae.e_ext.row(t as usize), &p.sae.fusion[slot], eps).0)
                .collect();
        }
    }
    x
}

/// `softmax(q·Kᵀ/√d)·V + q` with the query from the author-id row.
pub fn target_aware(p: &ModelParams<f64>, slot: usize, h: &Mat, mask: &[bool]) -> Vec<f64> {
    let d = p.cfg.d;
    let q = mm(&vec![p.sae.e_id.row(slot).to_vec()], p.sae.wq_c.data(), d);
    let k = mm(h, p.sae.wk_c.data(), d);
    let v = mm(h, p.sae.wv_c.data(), d);
    let (o, _) = attend(&q, &k, &v, mask);
    o[0].iter().zip(&q[0]).map(|(a, b)| a + b).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// From-scratch BPE over surface strings. Reserved tokens (`[..]`) split
/// pairs. Returns the `(left, right)` surfaces of each merge in order.
pub fn bpe(lines: &[Vec<String>], threshold: u64, max_merges: usize) -> Vec<(String, String)> {
    let reserved = |t: &str| t.starts_with('[') && t.ends_with(']') && t.len() > 2;
    let mut seqs = lines.to_vec();
    let mut out = Vec::new();
    while out.len() < max_merges {
        let mut counts: HashMap<(String, String), u64> = HashMap::new();
        for s in &seqs {
            for i in 1..s.len() {
                if !reserved(&s[i - 1]) && !reserved(&s[i]) {
                    *counts.entry((s[i - 1].clone(), s[i].clone())).or_default() += 1;
                }
            }
        }
        let mut best: Option<((String, String), u64)> = None;
        for (pair, c) in counts {
            if c < threshold {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bp, bc)) => c > *bc || (c == *bc && pair < *bp),
            };
            if better {
                best = Some((pair, c));
            }
        }
        let Some(((a, b), _)) = best else { break };
        for s in seqs.iter_mut() {
            let mut merged = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == a && s[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(s[i].clone());
                    i += 1;
                }
            }
            *s = merged;
        }
        out.push((a, b));
    }
    out
}

/// Pairwise AUC: `(2·wins + ties) / (2·P·N)`.
pub fn auc_pairs(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let (mut num, mut p, mut n) = (0u128, 0u128, 0u128);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (p > 0 && n > 0).then(|| num as f64 / (2 * p * n) as f64)
}

/// Users in ascending id order, each weighted by its impression count.
pub fn gauc_pairs(users: &[u64], labels: &[bool], scores: &[f64]) -> Option<f64> {
    let mut by: BTreeMap<u64, (Vec<bool>, Vec<f64>)> = BTreeMap::new();
    for i in 0..users.len() {
        let e = by.entry(users[i]).or_default();
        e.0.push(labels[i]);
        e.1.push(scores[i]);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (l, s) in by.values() {
        if let Some(a) = auc_pairs(l, s) {
            num += l.len() as f64 * a;
            den += l.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}
