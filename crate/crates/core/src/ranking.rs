//! Multi-task ranking head over `[h_CLS, h_TAR, h_UIN, h_rank]`, the
//! author-side auxiliary click head, and the loss terms.

use crate::error::{Result, SarmError};
use crate::model::{Dense, ModelParams, N_TASKS};
use crate::numerics::{gelu, gelu_grad, matmul_acc, matmul_backward, sigmoid, Real};

pub const SCORE_CLAMP: f64 = 1e-7;

/// Per-task probabilities in task order ctr, wtr, lvtr, gtr.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScores<F> {
    pub y: [F; N_TASKS],
}

/// Clamped probability and whether the clamp was active.
pub fn clamped_sigmoid<F: Real>(z: F) -> (F, bool) {
    let lo = F::lit(SCORE_CLAMP);
    let hi = F::one() - lo;
    let p = sigmoid(z);
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Binary cross-entropy with the score clamped into `[1e-7, 1 − 1e-7]`.
pub fn bce<F: Real>(y_hat: F, label: bool) -> F {
    let lo = F::lit(SCORE_CLAMP);
    let p = y_hat.max(lo).min(F::one() - lo);
    if label {
        -p.ln()
    } else {
        -(F::one() - p).ln()
    }
}

pub fn rec_loss<F: Real>(scores: &TaskScores<F>, labels: &[bool; N_TASKS]) -> F {
    scores.y.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum()
}

pub fn aux_loss<F: Real>(y_hat: F, click: bool) -> F {
    bce(y_hat, click)
}

pub fn total_loss<F: Real>(rec: F, aux: F, lambda: F) -> F {
    rec + lambda * aux
}

#[derive(Clone, Debug)]
struct LayerTrace<F> {
    x: Vec<F>,
    z: Vec<F>,
}

fn dense_forward<F: Real>(l: &Dense<F>, x: &[F]) -> Vec<F> {
    let mut z = l.b.data().to_vec();
    matmul_acc(x, 1, l.n_in(), l.w.data(), l.n_out(), &mut z);
    z
}

/// Runs `layers` with GELU after every layer except (when `linear_last`) the last.
fn mlp_forward<F: Real>(
    layers: &[Dense<F>],
    x: &[F],
    linear_last: bool,
) -> (Vec<LayerTrace<F>>, Vec<F>) {
    let mut traces = Vec::with_capacity(layers.len());
    let mut cur = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let z = dense_forward(l, &cur);
        let last = i + 1 == layers.len();
        let a = if last && linear_last {
            z.clone()
        } else {
            z.iter().map(|&v| gelu(v)).collect()
        };
        traces.push(LayerTrace { x: cur, z });
        cur = a;
    }
    (traces, cur)
}

fn mlp_backward<F: Real>(
    layers: &[Dense<F>],
    traces: &[LayerTrace<F>],
    dout: &[F],
    linear_last: bool,
    grads: &mut [Dense<F>],
) -> Vec<F> {
    let mut da = dout.to_vec();
    for i in (0..layers.len()).rev() {
        let t = &traces[i];
        let last = i + 1 == layers.len();
        let dz: Vec<F> = if last && linear_last {
            da
        } else {
            da.iter()
                .zip(&t.z)
                .map(|(&g, &z)| g * gelu_grad(z))
                .collect()
        };
        let l = &layers[i];
        crate::numerics::axpy(F::one(), &dz, grads[i].b.data_mut());
        let mut dx = vec![F::zero(); l.n_in()];
        matmul_backward(
            &t.x,
            1,
            l.n_in(),
            l.w.data(),
            l.n_out(),
            &dz,
            Some(&mut dx),
            grads[i].w.data_mut(),
        );
        da = dx;
    }
    da
}

#[derive(Clone, Debug)]
pub struct RankTrace<F> {
    trunk: Vec<LayerTrace<F>>,
    towers: Vec<Vec<LayerTrace<F>>>,
    pub logits: [F; N_TASKS],
    pub clamped: [bool; N_TASKS],
    pub scores: TaskScores<F>,
}

pub fn rank_forward_traced<F: Real>(
    h_cls: &[F],
    h_tar: &[F],
    h_uin: &[F],
    h_rank: &[F],
    params: &ModelParams<F>,
) -> Result<RankTrace<F>> {
    let cfg = &params.cfg;
    let d = cfg.d;
    if h_cls.len() != d || h_tar.len() != d || h_uin.len() != d || h_rank.len() != cfg.d_rank {
        return Err(SarmError::Shape(format!(
            "rank_forward: dims ({}, {}, {}, {}) vs d={d}, d_rank={}",
            h_cls.len(),
            h_tar.len(),
            h_uin.len(),
            h_rank.len(),
            cfg.d_rank
        )));
    }
    let x: Vec<F> = [h_cls, h_tar, h_uin, h_rank].concat();
    let (trunk, shared) = mlp_forward(&params.rank.trunk, &x, false);
    let mut towers = Vec::with_capacity(N_TASKS);
    let mut logits = [F::zero(); N_TASKS];
    let mut clamped = [false; N_TASKS];
    let mut y = [F::zero(); N_TASKS];
    for t in 0..N_TASKS {
        let (tr, out) = mlp_forward(&params.rank.towers[t], &shared, true);
        logits[t] = out[0];
        (y[t], clamped[t]) = clamped_sigmoid(out[0]);
        towers.push(tr);
    }
    Ok(RankTrace {
        trunk,
        towers,
        logits,
        clamped,
        scores: TaskScores { y },
    })
}

pub fn rank_forward<F: Real>(
    h_cls: &[F],
    h_tar: &[F],
    h_uin: &[F],
    h_rank: &[F],
    params: &ModelParams<F>,
) -> Result<TaskScores<F>> {
    Ok(rank_forward_traced(h_cls, h_tar, h_uin, h_rank, params)?.scores)
}

/// Backward of `scale · rec_loss`; returns gradients of `(h_cls, h_tar, h_uin)`.
pub fn rank_backward<F: Real>(
    params: &ModelParams<F>,
    t: &RankTrace<F>,
    labels: &[bool; N_TASKS],
    scale: F,
    grads: &mut ModelParams<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = params.cfg.d;
    let h = params.cfg.d_hidden();
    let mut dshared = vec![F::zero(); h];
    for task in 0..N_TASKS {
        if t.clamped[task] {
            continue;
        }
        let y = if labels[task] { F::one() } else { F::zero() };
        let dlogit = scale * (t.scores.y[task] - y);
        let ds = mlp_backward(
            &params.rank.towers[task],
            &t.towers[task],
            &[dlogit],
            true,
            &mut grads.rank.towers[task],
        );
        crate::numerics::axpy(F::one(), &ds, &mut dshared);
    }
    let dx = mlp_backward(
        &params.rank.trunk,
        &t.trunk,
        &dshared,
        false,
        &mut grads.rank.trunk,
    );
    (
        dx[..d].to_vec(),
        dx[d..2 * d].to_vec(),
        dx[2 * d..3 * d].to_vec(),
    )
}

#[derive(Clone, Debug)]
pub struct AuxTrace<F> {
    layers: Vec<LayerTrace<F>>,
    pub logits: [F; 2],
    pub clamped: bool,
    pub y_hat: F,
}

/// Two-way softmax over the head's logits; returns the positive-class
/// probability `σ(z₁ − z₀)`.
pub fn aux_forward_traced<F: Real>(
    h_cls: &[F],
    h_tar: &[F],
    params: &ModelParams<F>,
) -> AuxTrace<F> {
    let x: Vec<F> = [h_cls, h_tar].concat();
    let (layers, out) = mlp_forward(&params.rank.aux, &x, true);
    let (y_hat, clamped) = clamped_sigmoid(out[1] - out[0]);
    AuxTrace {
        layers,
        logits: [out[0], out[1]],
        clamped,
        y_hat,
    }
}

pub fn aux_forward<F: Real>(h_cls: &[F], h_tar: &[F], params: &ModelParams<F>) -> F {
    aux_forward_traced(h_cls, h_tar, params).y_hat
}

/// Backward of `scale · aux_loss`; returns gradients of `(h_cls, h_tar)`.
pub fn aux_backward<F: Real>(
    params: &ModelParams<F>,
    t: &AuxTrace<F>,
    click: bool,
    scale: F,
    grads: &mut ModelParams<F>,
) -> (Vec<F>, Vec<F>) {
    let d = params.cfg.d;
    if t.clamped {
        return (vec![F::zero(); d], vec![F::zero(); d]);
    }
    let y = if click { F::one() } else { F::zero() };
    let g = scale * (t.y_hat - y);
    let dx = mlp_backward(
        &params.rank.aux,
        &t.layers,
        &[-g, g],
        true,
        &mut grads.rank.aux,
    );
    (dx[..d].to_vec(), dx[d..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{grad_check, softmax, Rng};
    use rand::Rng as _;
    use std::f64::consts::LN_2;

    fn params() -> ModelParams<f64> {
        ModelParams::init(&ModelConfig::micro(10, 10, 4)).unwrap()
    }

    fn inputs(seed: u64) -> [Vec<f64>; 4] {
        let mut rng = Rng::new(seed);
        let mut v = |n: usize| {
            (0..n)
                .map(|_| rng.uniform() * 2.0 - 1.0)
                .collect::<Vec<f64>>()
        };
        [v(8), v(8), v(8), v(4)]
    }

    #[test]
    fn zero_weights_give_half() {
        let mut p = params();
        p.for_each_mut(|n, t| {
            if n.starts_with("rank.") || n.starts_with("aux.") {
                t.fill_zero()
            }
        });
        let [a, b, c, r] = inputs(1);
        let s = rank_forward(&a, &b, &c, &r, &p).unwrap();
        assert_eq!(s.y, [0.5; 4]);
        assert_eq!(aux_forward(&a, &b, &p), 0.5);
    }

    #[test]
    fn clamp_bounds() {
        assert_eq!(clamped_sigmoid(100.0f64), (1.0 - 1e-7, true));
        assert_eq!(clamped_sigmoid(-100.0f64), (1e-7, true));
        assert!(!clamped_sigmoid(3.0f64).1);
    }

    #[test]
    fn loss_values() {
        let half = TaskScores { y: [0.5f64; 4] };
        for labels in [[true; 4], [false, true, false, true]] {
            assert!((rec_loss(&half, &labels) - 4.0 * LN_2).abs() < 1e-15);
        }
        let near = TaskScores {
            y: [1.0 - 1e-7f64; 4],
        };
        let l = rec_loss(&near, &[true; 4]);
        assert!((l - 4e-7).abs() < 1e-12, "{l}");
        assert!((bce(0.5f64, true) - LN_2).abs() < 1e-15);
        assert!((aux_loss(0.5f64, true) - LN_2).abs() < 1e-15);
        assert!(aux_loss(1e-12f64, false) < 2e-7);
        assert_eq!(aux_loss(0.3f64, true), bce(0.3, true));
        assert_eq!(total_loss(2.0, 0.5, 0.0), 2.0);
        assert_eq!(total_loss(2.0, 0.5, 1.0), 2.5);
    }

    #[test]
    fn aux_is_softmax_positive_class() {
        let p = params();
        for seed in 0..10 {
            let [a, b, _, _] = inputs(seed);
            let t = aux_forward_traced(&a, &b, &p);
            let sm = softmax(&t.logits);
            assert!((sm[1] - t.y_hat).abs() < 1e-12);
            let shifted = softmax(&[t.logits[0] + 3.7, t.logits[1] + 3.7]);
            assert!((shifted[1] - sm[1]).abs() < 1e-12);
        }
        let equal = softmax(&[0.8f64, 0.8]);
        assert_eq!(equal[1], 0.5);
    }

    #[test]
    fn shape_errors() {
        let p = params();
        let [a, b, c, _] = inputs(2);
        assert!(rank_forward(&a, &b, &c, &[0.0; 3], &p).is_err());
    }

    #[test]
    fn monotone_in_tower_bias() {
        let mut p = params();
        let [a, b, c, r] = inputs(3);
        let before = rank_forward(&a, &b, &c, &r, &p).unwrap().y[2];
        p.rank.towers[2][1].b.data_mut()[0] += 0.5;
        let after = rank_forward(&a, &b, &c, &r, &p).unwrap().y[2];
        assert!(after > before);
        assert!(bce(after, true) < bce(before, true));
        assert!(bce(after, false) > bce(before, false));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let p = params();
        let [a, b, c, r] = inputs(4);
        let labels = [true, false, true, false];
        let lam = 0.1;
        let loss = |q: &ModelParams<f64>| {
            let s = rank_forward(&a, &b, &c, &r, q).unwrap();
            rec_loss(&s, &labels) + lam * aux_loss(aux_forward(&a, &b, q), true)
        };
        let mut g = p.zeros_like();
        let rt = rank_forward_traced(&a, &b, &c, &r, &p).unwrap();
        rank_backward(&p, &rt, &labels, 1.0, &mut g);
        let at = aux_forward_traced(&a, &b, &p);
        aux_backward(&p, &at, true, lam, &mut g);
        let mut rng = Rng::new(8);
        let mut coords = Vec::new();
        for prefix in ["rank.", "aux."] {
            for (_, s, e) in p.flat_ranges(prefix) {
                for _ in 0..3 {
                    coords.push(rng.random_range(s..e));
                }
            }
        }
        let mut work = p.clone();
        let rep = grad_check(
            |t| {
                work.unflatten(t).unwrap();
                loss(&work)
            },
            &p.flatten(),
            &g.flatten(),
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{:?}", rep.worst());
    }
}
