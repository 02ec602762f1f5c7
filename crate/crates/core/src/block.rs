//! Pre-norm single-head transformer block shared by the anchor encoder and the
//! user-interest transformer.
//!
//! ```text
//! a  = RMSNorm(x; g_attn)
//! x1 = x + Attn(rope(a·Wq), rope(a·Wk), a·Wv; mask)·Wo
//! x2 = x1 + GELU(RMSNorm(x1; g_ffn)·W1)·W2
//! ```

use crate::model::BlockParams;
use crate::numerics::{
    attention_backward, attention_forward, gelu, gelu_grad, matmul, matmul_backward,
    rmsnorm_backward, rmsnorm_forward, Real, RopeTable,
};

/// Everything the backward pass needs from one block forward.
#[derive(Clone, Debug)]
pub struct BlockTrace<F> {
    pub n: usize,
    pub x: Vec<F>,
    pub a: Vec<F>,
    pub inv1: Vec<F>,
    /// Rotated queries and keys.
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `n × n` attention weights.
    pub attn: Vec<F>,
    pub o: Vec<F>,
    pub x1: Vec<F>,
    pub b: Vec<F>,
    pub inv2: Vec<F>,
    pub u: Vec<F>,
    pub g: Vec<F>,
    pub out: Vec<F>,
}

/// Runs one block over `n` rows at RoPE positions `positions`; `mask[j]`
/// removes key `j`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<F: Real>(
    p: &BlockParams<F>,
    x: &[F],
    n: usize,
    d: usize,
    positions: &[usize],
    mask: &[bool],
    rope: &RopeTable<F>,
    eps: F,
) -> BlockTrace<F> {
    let h = 4 * d;
    let mut a = vec![F::zero(); n * d];
    let mut inv1 = vec![F::zero(); n];
    for i in 0..n {
        inv1[i] = rmsnorm_forward(
            &x[i * d..(i + 1) * d],
            p.g_attn.data(),
            eps,
            &mut a[i * d..(i + 1) * d],
        );
    }
    let mut q = matmul(&a, n, d, p.wq.data(), d);
    let mut k = matmul(&a, n, d, p.wk.data(), d);
    let v = matmul(&a, n, d, p.wv.data(), d);
    for i in 0..n {
        rope.apply(&mut q[i * d..(i + 1) * d], positions[i], false);
        rope.apply(&mut k[i * d..(i + 1) * d], positions[i], false);
    }
    let (o, attn, _) = attention_forward(&q, &k, &v, n, n, d, d, mask);
    let mut x1 = x.to_vec();
    crate::numerics::matmul_acc(&o, n, d, p.wo.data(), d, &mut x1);
    let mut b = vec![F::zero(); n * d];
    let mut inv2 = vec![F::zero(); n];
    for i in 0..n {
        inv2[i] = rmsnorm_forward(
            &x1[i * d..(i + 1) * d],
            p.g_ffn.data(),
            eps,
            &mut b[i * d..(i + 1) * d],
        );
    }
    let u = matmul(&b, n, d, p.w1.data(), h);
    let g: Vec<F> = u.iter().map(|&z| gelu(z)).collect();
    let mut out = x1.clone();
    crate::numerics::matmul_acc(&g, n, h, p.w2.data(), d, &mut out);
    BlockTrace {
        n,
        x: x.to_vec(),
        a,
        inv1,
        q,
        k,
        v,
        attn,
        o,
        x1,
        b,
        inv2,
        u,
        g,
        out,
    }
}

/// Accumulates parameter gradients into `grads` and returns `d loss / d x`.
pub fn block_backward<F: Real>(
    p: &BlockParams<F>,
    t: &BlockTrace<F>,
    dout: &[F],
    d: usize,
    positions: &[usize],
    rope: &RopeTable<F>,
    grads: &mut BlockParams<F>,
) -> Vec<F> {
    let n = t.n;
    let h = 4 * d;
    // FFN branch.
    let mut dg = vec![F::zero(); n * h];
    matmul_backward(
        &t.g,
        n,
        h,
        p.w2.data(),
        d,
        dout,
        Some(&mut dg),
        grads.w2.data_mut(),
    );
    let du: Vec<F> = dg
        .iter()
        .zip(&t.u)
        .map(|(&g, &u)| g * gelu_grad(u))
        .collect();
    let mut db = vec![F::zero(); n * d];
    matmul_backward(
        &t.b,
        n,
        d,
        p.w1.data(),
        h,
        &du,
        Some(&mut db),
        grads.w1.data_mut(),
    );
    let mut dx1 = dout.to_vec();
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        rmsnorm_backward(
            &t.x1[r.clone()],
            p.g_ffn.data(),
            t.inv2[i],
            &db[r.clone()],
            &mut dx1[r],
            grads.g_ffn.data_mut(),
        );
    }
    // Attention branch.
    let mut do_ = vec![F::zero(); n * d];
    matmul_backward(
        &t.o,
        n,
        d,
        p.wo.data(),
        d,
        &dx1,
        Some(&mut do_),
        grads.wo.data_mut(),
    );
    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    attention_backward(
        &t.q, &t.k, &t.v, &t.attn, &do_, n, n, d, d, &mut dq, &mut dk, &mut dv,
    );
    for i in 0..n {
        rope.apply(&mut dq[i * d..(i + 1) * d], positions[i], true);
        rope.apply(&mut dk[i * d..(i + 1) * d], positions[i], true);
    }
    let mut da = vec![F::zero(); n * d];
    matmul_backward(
        &t.a,
        n,
        d,
        p.wq.data(),
        d,
        &dq,
        Some(&mut da),
        grads.wq.data_mut(),
    );
    matmul_backward(
        &t.a,
        n,
        d,
        p.wk.data(),
        d,
        &dk,
        Some(&mut da),
        grads.wk.data_mut(),
    );
    matmul_backward(
        &t.a,
        n,
        d,
        p.wv.data(),
        d,
        &dv,
        Some(&mut da),
        grads.wv.data_mut(),
    );
    let mut dx = dx1;
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        rmsnorm_backward(
            &t.x[r.clone()],
            p.g_attn.data(),
            t.inv1[i],
            &da[r.clone()],
            &mut dx[r],
            grads.g_attn.data_mut(),
        );
    }
    dx
}
