//! User history from the memory bank, encoded by a self-attention block and
//! mean-pooled over valid rows into `h_UIN`.

use crate::bank::MemoryBank;
use crate::block::{block_backward, block_forward, BlockTrace};
use crate::model::ModelParams;
use crate::numerics::{Real, Tensor};

/// `m` history rows, most recent last, left-padded with masked zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory<F> {
    /// Real entries only, oldest first.
    pub author_ids: Vec<u64>,
    pub retrieved: Tensor<F>,
    pub valid: Vec<bool>,
}

impl<F: Real> UserHistory<F> {
    pub fn empty(m: usize, d: usize) -> UserHistory<F> {
        UserHistory {
            author_ids: Vec::new(),
            retrieved: Tensor::zeros(&[m, d]),
            valid: vec![false; m],
        }
    }

    pub fn cast<G: Real>(&self) -> UserHistory<G> {
        UserHistory {
            author_ids: self.author_ids.clone(),
            retrieved: self.retrieved.cast(),
            valid: self.valid.clone(),
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Takes the last `m` of `effective_authors` (chronological) and reads their
/// `h_CLS` rows from `bank`. Missing authors get the bank's zero default.
pub fn build_history(effective_authors: &[u64], bank: &MemoryBank, m: usize) -> UserHistory<f32> {
    let d = bank.d();
    let take = effective_authors.len().min(m);
    let ids = &effective_authors[effective_authors.len() - take..];
    let mut h = UserHistory::empty(m, d);
    let off = m - take;
    for (k, rec) in bank.batch_get(ids).into_iter().enumerate() {
        h.retrieved.row_mut(off + k).copy_from_slice(rec.h_cls());
        h.valid[off + k] = true;
    }
    h.author_ids = ids.to_vec();
    h
}

#[derive(Clone, Debug)]
pub struct UserTrace<F> {
    /// History indices of the valid rows (also their RoPE positions).
    pub rows: Vec<usize>,
    pub blocks: Vec<BlockTrace<F>>,
    pub pooled: Vec<F>,
}

/// Runs the user blocks on the valid rows only: invalid rows are masked as keys
/// and excluded from pooling, so they cannot affect the result.
pub fn user_interest_traced<F: Real>(
    history: &UserHistory<F>,
    params: &ModelParams<F>,
) -> UserTrace<F> {
    let d = params.cfg.d;
    let rows: Vec<usize> = (0..history.valid.len())
        .filter(|&i| history.valid[i])
        .collect();
    let n = rows.len();
    if n == 0 {
        return UserTrace {
            rows,
            blocks: Vec::new(),
            pooled: vec![F::zero(); d],
        };
    }
    let mut x = Vec::with_capacity(n * d);
    for &r in &rows {
        x.extend_from_slice(history.retrieved.row(r));
    }
    let mask = vec![false; n];
    let eps = F::lit(params.cfg.rms_eps);
    let mut blocks = Vec::with_capacity(params.user.blocks.len());
    for bp in &params.user.blocks {
        let t = block_forward(bp, &x, n, d, &rows, &mask, params.rope(), eps);
        x = t.out.clone();
        blocks.push(t);
    }
    let inv = F::one() / F::from_usize(n).unwrap();
    let mut pooled = vec![F::zero(); d];
    for i in 0..n {
        crate::numerics::axpy(F::one(), &x[i * d..(i + 1) * d], &mut pooled);
    }
    pooled.iter_mut().for_each(|p| *p = *p * inv);
    UserTrace {
        rows,
        blocks,
        pooled,
    }
}

pub fn user_interest<F: Real>(history: &UserHistory<F>, params: &ModelParams<F>) -> Vec<F> {
    user_interest_traced(history, params).pooled
}

/// Accumulates user-transformer gradients. History rows are constants, so the
/// input gradient is dropped.
pub fn user_interest_backward<F: Real>(
    params: &ModelParams<F>,
    t: &UserTrace<F>,
    dpooled: &[F],
    grads: &mut ModelParams<F>,
) {
    let n = t.rows.len();
    if n == 0 {
        return;
    }
    let d = params.cfg.d;
    let inv = F::one() / F::from_usize(n).unwrap();
    let mut dx: Vec<F> = (0..n * d).map(|j| dpooled[j % d] * inv).collect();
    for b in (0..t.blocks.len()).rev() {
        dx = block_backward(
            &params.user.blocks[b],
            &t.blocks[b],
            &dx,
            d,
            &t.rows,
            params.rope(),
            &mut grads.user.blocks[b],
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;

    fn params() -> ModelParams<f64> {
        ModelParams::init(&ModelConfig::micro(10, 10, 4)).unwrap()
    }

    #[test]
    fn history_recency_and_padding() {
        let mut bank = MemoryBank::new(2);
        bank.put(1, &[1.0, 1.0], &[0.0; 2], 0).unwrap();
        bank.put(2, &[2.0, 2.0], &[0.0; 2], 0).unwrap();
        bank.put(3, &[3.0, 3.0], &[0.0; 2], 0).unwrap();
        let h = build_history(&[1, 2, 3], &bank, 2);
        assert_eq!(h.author_ids, vec![2, 3]);
        assert_eq!(h.retrieved.data(), &[2.0, 2.0, 3.0, 3.0]);
        assert_eq!(h.valid, vec![true, true]);

        let h = build_history(&[], &bank, 3);
        assert_eq!(h.valid, vec![false; 3]);

        let h = build_history(&[42, 1], &bank, 3);
        assert_eq!(h.valid, vec![false, true, true]);
        assert_eq!(h.retrieved.row(1), &[0.0, 0.0]);
        assert_eq!(h.retrieved.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn empty_history_pools_to_zero() {
        let p = params();
        assert_eq!(user_interest(&UserHistory::empty(4, 8), &p), vec![0.0; 8]);
    }

    #[test]
    fn identical_rows_pool_to_the_row() {
        let p = params();
        let mut h = UserHistory::<f64>::empty(4, 8);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        for r in 1..4 {
            h.retrieved.row_mut(r).copy_from_slice(&row);
            h.valid[r] = true;
        }
        // Same content at different positions: RoPE makes scores differ, but
        // every value row is identical, so attention returns the same vector.
        let t = user_interest_traced(&h, &p);
        let d = 8;
        let out = &t.blocks[0].out;
        for i in 1..3 {
            for j in 0..d {
                assert!((out[i * d + j] - out[j]).abs() < 1e-12);
            }
        }
        for j in 0..d {
            assert!((t.pooled[j] - out[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_rows_never_matter() {
        let p = params();
        let mut rng = Rng::new(5);
        let mut h = UserHistory::<f64>::empty(4, 8);
        for r in 0..4 {
            for x in h.retrieved.row_mut(r) {
                *x = rng.uniform() - 0.5;
            }
        }
        h.valid = vec![false, true, false, true];
        let base = user_interest(&h, &p);
        let mut g = h.clone();
        g.retrieved.row_mut(0).iter_mut().for_each(|x| *x = 9.0);
        let tmp = g.retrieved.row(2).to_vec();
        g.retrieved.row_mut(2).copy_from_slice(&[-4.0; 8]);
        assert_eq!(user_interest(&g, &p), base);
        g.retrieved.row_mut(2).copy_from_slice(&tmp);
        g.retrieved.row_mut(0).copy_from_slice(&tmp);
        assert_eq!(user_interest(&g, &p), base);
    }
}
