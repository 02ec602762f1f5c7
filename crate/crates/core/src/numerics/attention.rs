use super::linalg::{axpy, dot};
use super::{Real, Tensor};
use crate::error::{Result, SarmError};

/// Result of a masked scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention<F> {
    /// `nq × dv`
    pub output: Tensor<F>,
    /// `nq × nk`; masked keys carry exactly zero weight.
    pub weights: Tensor<F>,
    /// Queries for which every key was masked (zero output, zero weight row).
    pub fully_masked: Vec<usize>,
}

/// `softmax(Q·Kᵀ/√d)·V` where `pad_mask[j] == true` removes key `j`.
pub fn masked_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    pad_mask: &[bool],
) -> Result<Attention<F>> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    if k.cols() != d || v.rows() != nk || pad_mask.len() != nk {
        return Err(SarmError::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}, mask {}",
            q.shape(),
            k.shape(),
            v.shape(),
            pad_mask.len()
        )));
    }
    let dv = v.cols();
    let (out, w, fully_masked) =
        attention_forward(q.data(), k.data(), v.data(), nq, nk, d, dv, pad_mask);
    Ok(Attention {
        output: Tensor::from_vec(&[nq, dv], out)?,
        weights: Tensor::from_vec(&[nq, nk], w)?,
        fully_masked,
    })
}

/// Slice-level forward pass; returns `(output, weights, fully_masked_rows)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    pad_mask: &[bool],
) -> (Vec<F>, Vec<F>, Vec<usize>) {
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut out = vec![F::zero(); nq * dv];
    let mut weights = vec![F::zero(); nq * nk];
    let mut fully_masked = Vec::new();
    if pad_mask.iter().all(|&m| m) {
        fully_masked.extend(0..nq);
        return (out, weights, fully_masked);
    }
    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut weights[i * nk..(i + 1) * nk];
        let mut max = F::neg_infinity();
        for j in 0..nk {
            if !pad_mask[j] {
                let s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
        }
        let mut sum = F::zero();
        for j in 0..nk {
            if !pad_mask[j] {
                let e = (row[j] - max).exp();
                row[j] = e;
                sum = sum + e;
            }
        }
        let inv = F::one() / sum;
        let orow = &mut out[i * dv..(i + 1) * dv];
        for j in 0..nk {
            if !pad_mask[j] {
                row[j] = row[j] * inv;
                axpy(row[j], &v[j * dv..(j + 1) * dv], orow);
            }
        }
    }
    (out, weights, fully_masked)
}

/// Accumulates `dq`, `dk`, `dv` given the forward weights and `dout`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    weights: &[F],
    dout: &[F],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    dq: &mut [F],
    dk: &mut [F],
    dvv: &mut [F],
) {
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut ds = vec![F::zero(); nk];
    for i in 0..nq {
        let p = &weights[i * nk..(i + 1) * nk];
        let doi = &dout[i * dv..(i + 1) * dv];
        let mut acc = F::zero();
        for j in 0..nk {
            if p[j] != F::zero() {
                let dp = dot(doi, &v[j * dv..(j + 1) * dv]);
                ds[j] = dp;
                acc = acc + p[j] * dp;
                axpy(p[j], doi, &mut dvv[j * dv..(j + 1) * dv]);
            } else {
                ds[j] = F::zero();
            }
        }
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..nk {
            if p[j] != F::zero() {
                let g = p[j] * (ds[j] - acc) * scale;
                axpy(g, &k[j * d..(j + 1) * d], &mut dq[i * d..(i + 1) * d]);
                axpy(g, qi, &mut dk[j * d..(j + 1) * d]);
            }
        }
    }
}
