//! Anchor encoder: dual embedding lookup, transformer blocks with gated fusion
//! of extended-token embeddings, `[CLS]` readout and identity cross-attention.

use crate::block::{block_backward, block_forward, BlockTrace};
use crate::error::{Result, SarmError};
use crate::model::{FusionConfig, FusionParams, ModelParams};
use crate::numerics::{
    attention_backward, attention_forward, dot, matmul, matmul_backward, rmsnorm_backward,
    rmsnorm_forward, sigmoid, Real, Tensor,
};
use crate::tokenizer::{DualTokenization, TokenId, Tokenizer, PAD_ID};

#[derive(Clone, Debug)]
pub struct FusionTrace<F> {
    pub x: Vec<F>,
    pub e: Vec<F>,
    pub kf: Vec<F>,
    pub vf: Vec<F>,
    pub hn: Vec<F>,
    pub kn: Vec<F>,
    pub inv_h: Vec<F>,
    pub inv_k: Vec<F>,
    /// Gate value per position.
    pub alpha: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct EncodeTrace<F> {
    pub n: usize,
    pub base: Vec<TokenId>,
    pub align: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub positions: Vec<usize>,
    pub blocks: Vec<BlockTrace<F>>,
    pub fusions: Vec<Option<FusionTrace<F>>>,
    /// Final hidden states, `n × d`.
    pub h: Vec<F>,
}

impl<F: Real> EncodeTrace<F> {
    /// Self-attention weights of block `b` (`n × n`).
    pub fn attention(&self, b: usize) -> &[F] {
        &self.blocks[b].attn
    }
}

/// Fused state and gate for one position:
/// `h + σ(RMSNorm(h)·RMSNorm(W_K e)/√d) · W_V e`.
pub fn gated_fuse<F: Real>(h: &[F], e: &[F], fp: &FusionParams<F>, eps: F) -> (Vec<F>, F) {
    let d = h.len();
    let kf = matmul(e, 1, d, fp.wk.data(), d);
    let vf = matmul(e, 1, d, fp.wv.data(), d);
    let mut hn = vec![F::zero(); d];
    let mut kn = vec![F::zero(); d];
    rmsnorm_forward(h, fp.g_h.data(), eps, &mut hn);
    rmsnorm_forward(&kf, fp.g_k.data(), eps, &mut kn);
    let alpha = sigmoid(dot(&hn, &kn) / F::from_usize(d).unwrap().sqrt());
    let out = h.iter().zip(&vf).map(|(&x, &v)| x + alpha * v).collect();
    (out, alpha)
}

fn fusion_forward<F: Real>(
    fp: &FusionParams<F>,
    x: Vec<F>,
    align: &[TokenId],
    e_ext: &Tensor<F>,
    n: usize,
    d: usize,
    eps: F,
) -> (Vec<F>, FusionTrace<F>) {
    let mut e = Vec::with_capacity(n * d);
    for &t in align {
        e.extend_from_slice(e_ext.row(t as usize));
    }
    let kf = matmul(&e, n, d, fp.wk.data(), d);
    let vf = matmul(&e, n, d, fp.wv.data(), d);
    let mut hn = vec![F::zero(); n * d];
    let mut kn = vec![F::zero(); n * d];
    let mut inv_h = vec![F::zero(); n];
    let mut inv_k = vec![F::zero(); n];
    let mut alpha = vec![F::zero(); n];
    let mut out = x.clone();
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        inv_h[i] = rmsnorm_forward(&x[r.clone()], fp.g_h.data(), eps, &mut hn[r.clone()]);
        inv_k[i] = rmsnorm_forward(&kf[r.clone()], fp.g_k.data(), eps, &mut kn[r.clone()]);
        alpha[i] = sigmoid(dot(&hn[r.clone()], &kn[r.clone()]) * scale);
        for j in r {
            out[j] = x[j] + alpha[i] * vf[j];
        }
    }
    let trace = FusionTrace {
        x,
        e,
        kf,
        vf,
        hn,
        kn,
        inv_h,
        inv_k,
        alpha,
    };
    (out, trace)
}

/// Encodes `base`/`align` (equal length `n`). Positions holding `[PAD]` are
/// masked as keys.
pub fn encode_traced<F: Real>(
    params: &ModelParams<F>,
    base: &[TokenId],
    align: &[TokenId],
    fusion: &FusionConfig,
) -> Result<EncodeTrace<F>> {
    let cfg = &params.cfg;
    let (n, d) = (base.len(), cfg.d);
    if n == 0 || align.len() != n || n > params.rope().max_len() {
        return Err(SarmError::Shape(format!(
            "encode: base {} / align {} positions, max_len {}",
            n,
            align.len(),
            params.rope().max_len()
        )));
    }
    if let Some(&t) = base.iter().find(|&&t| t as usize >= cfg.base_vocab) {
        return Err(SarmError::Shape(format!(
            "base id {t} outside vocab of {}",
            cfg.base_vocab
        )));
    }
    if let Some(&t) = align.iter().find(|&&t| t as usize >= cfg.ext_vocab) {
        return Err(SarmError::Shape(format!(
            "extended id {t} outside vocab of {}",
            cfg.ext_vocab
        )));
    }
    let sites: Vec<Option<usize>> = (0..cfg.n_blocks).map(|b| fusion.site_index(b)).collect();
    if fusion.enabled
        && fusion
            .sites
            .iter()
            .any(|s| cfg.fusion.sites.binary_search(s).is_err())
    {
        return Err(SarmError::Shape(format!(
            "fusion sites {:?} not all present in the model ({:?})",
            fusion.sites, cfg.fusion.sites
        )));
    }
    crate::instrument::count_sae_forward();
    let eps = F::lit(cfg.rms_eps);
    let mask: Vec<bool> = base.iter().map(|&t| t == PAD_ID).collect();
    let positions: Vec<usize> = (0..n).collect();
    let mut x = Vec::with_capacity(n * d);
    for &t in base {
        x.extend_from_slice(params.sae.e_base.row(t as usize));
    }
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    let mut fusions = Vec::with_capacity(cfg.n_blocks);
    for (b, bp) in params.sae.blocks.iter().enumerate() {
        let t = block_forward(bp, &x, n, d, &positions, &mask, params.rope(), eps);
        x = t.out.clone();
        blocks.push(t);
        match sites[b] {
            Some(_) => {
                let slot = cfg.fusion.sites.binary_search(&b).expect("checked above");
                let (out, ft) = fusion_forward(
                    &params.sae.fusion[slot],
                    x,
                    align,
                    &params.sae.e_ext,
                    n,
                    d,
                    eps,
                );
                x = out;
                fusions.push(Some(ft));
            }
            None => fusions.push(None),
        }
    }
    Ok(EncodeTrace {
        n,
        base: base.to_vec(),
        align: align.to_vec(),
        mask,
        positions,
        blocks,
        fusions,
        h: x,
    })
}

/// Hidden states `L × d` for a dual tokenization.
pub fn encode<F: Real>(
    dual: &DualTokenization,
    params: &ModelParams<F>,
    fusion: &FusionConfig,
) -> Result<Tensor<F>> {
    let t = encode_traced(params, &dual.base_seq, &dual.align, fusion)?;
    Tensor::from_vec(&[t.n, params.cfg.d], t.h)
}

pub fn extract_cls<F: Real>(h: &Tensor<F>) -> Result<Vec<F>> {
    if h.is_empty() || h.rows() == 0 {
        return Err(SarmError::Shape(
            "extract_cls on empty hidden states".into(),
        ));
    }
    Ok(h.row(0).to_vec())
}

#[derive(Clone, Debug)]
pub struct TarTrace<F> {
    pub slot: usize,
    pub q: Vec<F>,
    pub kc: Vec<F>,
    pub vc: Vec<F>,
    /// Cross-attention weights over the `n` encoder positions.
    pub attn: Vec<F>,
    pub out: Vec<F>,
}

/// `softmax(q·Kᵀ/√d)·V + q` with `q = E_id[slot]·Wq`, `K = h·Wk`, `V = h·Wv`.
pub fn author_tar_traced<F: Real>(
    params: &ModelParams<F>,
    author_id: u64,
    h: &[F],
    mask: &[bool],
) -> TarTrace<F> {
    let d = params.cfg.d;
    let n = mask.len();
    let slot = params.cfg.id_slot(author_id);
    let s = &params.sae;
    let q = matmul(s.e_id.row(slot), 1, d, s.wq_c.data(), d);
    let kc = matmul(h, n, d, s.wk_c.data(), d);
    let vc = matmul(h, n, d, s.wv_c.data(), d);
    let (mut out, attn, _) = attention_forward(&q, &kc, &vc, 1, n, d, d, mask);
    for (o, &qi) in out.iter_mut().zip(&q) {
        *o = *o + qi;
    }
    TarTrace {
        slot,
        q,
        kc,
        vc,
        attn,
        out,
    }
}

pub fn author_tar<F: Real>(
    author_id: u64,
    h: &Tensor<F>,
    pad_mask: &[bool],
    params: &ModelParams<F>,
) -> Result<Vec<F>> {
    if h.cols() != params.cfg.d || h.rows() != pad_mask.len() {
        return Err(SarmError::Shape(format!(
            "author_tar: h {:?} with mask of {}",
            h.shape(),
            pad_mask.len()
        )));
    }
    Ok(author_tar_traced(params, author_id, h.data(), pad_mask).out)
}

/// The memory-bank payload of one author.
#[derive(Clone, Debug, PartialEq)]
pub struct AuthorPayload<F> {
    pub h_cls: Vec<F>,
    pub h_tar: Vec<F>,
}

/// Full forward trace of one author encoding (content positions only).
#[derive(Clone, Debug)]
pub struct AuthorTrace<F> {
    pub enc: EncodeTrace<F>,
    pub tar: TarTrace<F>,
}

impl<F: Real> AuthorTrace<F> {
    pub fn payload(&self, d: usize) -> AuthorPayload<F> {
        AuthorPayload {
            h_cls: self.enc.h[..d].to_vec(),
            h_tar: self.tar.out.clone(),
        }
    }
}

/// Encodes the content prefix of `dual` (trailing padding dropped; masked
/// keys contribute nothing, so the retained rows are unchanged).
pub fn author_forward<F: Real>(
    dual: &DualTokenization,
    author_id: u64,
    params: &ModelParams<F>,
    fusion: &FusionConfig,
) -> Result<AuthorTrace<F>> {
    let n = dual.content_len().max(1);
    let enc = encode_traced(params, &dual.base_seq[..n], &dual.align[..n], fusion)?;
    let tar = author_tar_traced(params, author_id, &enc.h, &enc.mask);
    Ok(AuthorTrace { enc, tar })
}

pub fn encode_author<F: Real>(
    anchor_text: &str,
    author_id: u64,
    tokenizer: &Tokenizer,
    params: &ModelParams<F>,
    fusion: &FusionConfig,
) -> Result<AuthorPayload<F>> {
    let dual = tokenizer.dual(anchor_text);
    Ok(author_forward(&dual, author_id, params, fusion)?.payload(params.cfg.d))
}

/// Backward of [`author_tar_traced`]: accumulates into `grads` and `dh`.
pub fn author_tar_backward<F: Real>(
    params: &ModelParams<F>,
    t: &TarTrace<F>,
    h: &[F],
    dout: &[F],
    dh: &mut [F],
    grads: &mut ModelParams<F>,
) {
    let d = params.cfg.d;
    let n = t.attn.len();
    let s = &params.sae;
    let mut dq = dout.to_vec();
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    attention_backward(
        &t.q, &t.kc, &t.vc, &t.attn, dout, 1, n, d, d, &mut dq, &mut dk, &mut dv,
    );
    let g = &mut grads.sae;
    matmul_backward(
        h,
        n,
        d,
        s.wk_c.data(),
        d,
        &dk,
        Some(&mut *dh),
        g.wk_c.data_mut(),
    );
    matmul_backward(
        h,
        n,
        d,
        s.wv_c.data(),
        d,
        &dv,
        Some(&mut *dh),
        g.wv_c.data_mut(),
    );
    let e = s.e_id.row(t.slot);
    let mut de = vec![F::zero(); d];
    matmul_backward(
        e,
        1,
        d,
        s.wq_c.data(),
        d,
        &dq,
        Some(&mut de),
        g.wq_c.data_mut(),
    );
    crate::numerics::axpy(F::one(), &de, g.e_id.row_mut(t.slot));
}

fn fusion_backward<F: Real>(
    fp: &FusionParams<F>,
    t: &FusionTrace<F>,
    align: &[TokenId],
    dout: &[F],
    d: usize,
    gf: &mut FusionParams<F>,
    g_ext: &mut Tensor<F>,
) -> Vec<F> {
    let n = align.len();
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut dx = dout.to_vec();
    let mut dkf = vec![F::zero(); n * d];
    let mut dvf = vec![F::zero(); n * d];
    let mut dhn = vec![F::zero(); d];
    let mut dkn = vec![F::zero(); d];
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        let a = t.alpha[i];
        let da = dot(&dout[r.clone()], &t.vf[r.clone()]);
        for j in r.clone() {
            dvf[j] = a * dout[j];
        }
        let ds = da * a * (F::one() - a) * scale;
        for j in 0..d {
            dhn[j] = ds * t.kn[i * d + j];
            dkn[j] = ds * t.hn[i * d + j];
        }
        rmsnorm_backward(
            &t.x[r.clone()],
            fp.g_h.data(),
            t.inv_h[i],
            &dhn,
            &mut dx[r.clone()],
            gf.g_h.data_mut(),
        );
        rmsnorm_backward(
            &t.kf[r.clone()],
            fp.g_k.data(),
            t.inv_k[i],
            &dkn,
            &mut dkf[r],
            gf.g_k.data_mut(),
        );
    }
    let mut de = vec![F::zero(); n * d];
    matmul_backward(
        &t.e,
        n,
        d,
        fp.wk.data(),
        d,
        &dkf,
        Some(&mut de),
        gf.wk.data_mut(),
    );
    matmul_backward(
        &t.e,
        n,
        d,
        fp.wv.data(),
        d,
        &dvf,
        Some(&mut de),
        gf.wv.data_mut(),
    );
    for (i, &tok) in align.iter().enumerate() {
        crate::numerics::axpy(
            F::one(),
            &de[i * d..(i + 1) * d],
            g_ext.row_mut(tok as usize),
        );
    }
    dx
}

/// Backward of [`encode_traced`] given `dh` (`n × d`).
pub fn encode_backward<F: Real>(
    params: &ModelParams<F>,
    t: &EncodeTrace<F>,
    dh: Vec<F>,
    grads: &mut ModelParams<F>,
) {
    let d = params.cfg.d;
    let mut dx = dh;
    for b in (0..t.blocks.len()).rev() {
        if let Some(ft) = &t.fusions[b] {
            let slot = params
                .cfg
                .fusion
                .sites
                .binary_search(&b)
                .expect("site in model");
            let g = &mut grads.sae;
            dx = fusion_backward(
                &params.sae.fusion[slot],
                ft,
                &t.align,
                &dx,
                d,
                &mut g.fusion[slot],
                &mut g.e_ext,
            );
        }
        dx = block_backward(
            &params.sae.blocks[b],
            &t.blocks[b],
            &dx,
            d,
            &t.positions,
            params.rope(),
            &mut grads.sae.blocks[b],
        );
    }
    for (i, &tok) in t.base.iter().enumerate() {
        crate::numerics::axpy(
            F::one(),
            &dx[i * d..(i + 1) * d],
            grads.sae.e_base.row_mut(tok as usize),
        );
    }
}

/// Backward through one author encoding given gradients of `h_CLS` and `h_TAR`.
pub fn author_backward<F: Real>(
    params: &ModelParams<F>,
    t: &AuthorTrace<F>,
    d_cls: &[F],
    d_tar: &[F],
    grads: &mut ModelParams<F>,
) {
    let d = params.cfg.d;
    let mut dh = vec![F::zero(); t.enc.n * d];
    crate::numerics::axpy(F::one(), d_cls, &mut dh[..d]);
    author_tar_backward(params, &t.tar, &t.enc.h, d_tar, &mut dh, grads);
    encode_backward(params, &t.enc, dh, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{grad_check, Rng};
    use crate::tokenizer::{BaseVocab, MergeTable, TokenizedCorpus};
    use rand::Rng as _;

    fn micro() -> ModelParams<f64> {
        ModelParams::init(&ModelConfig::micro(10, 13, 4)).unwrap()
    }

    fn random_ids(rng: &mut Rng, n: usize, hi: u32) -> Vec<TokenId> {
        (0..n).map(|_| rng.random_range(1..hi)).collect()
    }

    #[test]
    fn gated_fuse_zero_value_is_identity() {
        let mut p = micro();
        p.sae.fusion[0].wv.fill_zero();
        let h = [0.3, -1.0, 2.0, 0.5, 0.1, 0.0, -0.2, 0.7];
        let e = [1.0; 8];
        let (out, a) = gated_fuse(&h, &e, &p.sae.fusion[0], 1e-6);
        assert_eq!(out, h.to_vec());
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn gated_fuse_orthogonal_gate_is_half() {
        let mut p = micro();
        let fp = &mut p.sae.fusion[0];
        // W_K = I maps e straight to k.
        fp.wk.fill_zero();
        for i in 0..8 {
            fp.wk.data_mut()[i * 8 + i] = 1.0;
        }
        let h = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let e = [0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (out, a) = gated_fuse(&h, &e, fp, 1e-6);
        assert_eq!(a, 0.5);
        let v = matmul(&e, 1, 8, fp.wv.data(), 8);
        for j in 0..8 {
            assert_eq!(out[j], h[j] + 0.5 * v[j]);
        }
    }

    #[test]
    fn disabled_fusion_matches_zero_value_fusion() {
        let p = micro();
        let mut z = p.clone();
        for f in z.sae.fusion.iter_mut() {
            f.wv.fill_zero();
        }
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let base = random_ids(&mut rng, 6, 10);
            let align = random_ids(&mut rng, 6, 13);
            let off = encode_traced(&p, &base, &align, &FusionConfig::disabled()).unwrap();
            let on = encode_traced(&z, &base, &align, &z.cfg.fusion).unwrap();
            assert_eq!(off.h, on.h);
            for f in on.fusions.iter().flatten() {
                assert!(f.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
            }
        }
    }

    #[test]
    fn pad_content_does_not_leak() {
        let p = micro();
        let base = [1, 5, 6, PAD_ID, PAD_ID, PAD_ID];
        let align = [1, 11, 11, PAD_ID, PAD_ID, PAD_ID];
        let t = encode_traced(&p, &base, &align, &p.cfg.fusion).unwrap();
        let a = t.attention(0);
        for j in 3..6 {
            assert_eq!(a[j], 0.0);
        }
        // Trimming trailing padding leaves the content rows bit-identical.
        let short = encode_traced(&p, &base[..3], &align[..3], &p.cfg.fusion).unwrap();
        assert_eq!(&t.h[..3 * 8], &short.h[..]);
        let tar_full = author_tar_traced(&p, 2, &t.h, &t.mask);
        let tar_short = author_tar_traced(&p, 2, &short.h, &short.mask);
        assert_eq!(tar_full.out, tar_short.out);
    }

    #[test]
    fn singleton_tar_is_value_plus_query() {
        let p = micro();
        let h: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let t = author_tar_traced(&p, 3, &h, &[false, true]);
        let v = matmul(&h[..8], 1, 8, p.sae.wv_c.data(), 8);
        let q = matmul(p.sae.e_id.row(3), 1, 8, p.sae.wq_c.data(), 8);
        for j in 0..8 {
            assert!((t.out[j] - (v[j] + q[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_rows_separate_authors() {
        let p = micro();
        let h: Vec<f64> = (0..48).map(|i| (i as f64 * 0.7).cos()).collect();
        let mask = [false; 6];
        let a = author_tar_traced(&p, 1, &h, &mask).out;
        let b = author_tar_traced(&p, 2, &h, &mask).out;
        assert_ne!(a, b);
        let u1 = author_tar_traced(&p, 99, &h, &mask).out;
        let u0 = author_tar_traced(&p, 0, &h, &mask).out;
        assert_eq!(u1, u0);
    }

    #[test]
    fn extract_cls_rows() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(extract_cls(&h).unwrap(), vec![1.0, 0.0]);
        let one = Tensor::from_rows(&[vec![4.0, 5.0]]).unwrap();
        assert_eq!(extract_cls(&one).unwrap(), vec![4.0, 5.0]);
        assert!(extract_cls(&Tensor::<f64>::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn encode_author_composes_ops() {
        let vocab = BaseVocab::from_tokens(["POI", ":", "P", "UB", "G", "[SEP]"]);
        let corpus = TokenizedCorpus::from_texts(&["P UB G"; 4], &vocab);
        let merges = crate::tokenizer::train_bpe_merges(&vocab, &corpus, 2, 10).unwrap();
        let tok = Tokenizer::new(vocab, merges.clone(), 6).unwrap();
        let cfg = ModelConfig::micro(tok.vocab.len(), tok.ext_len(), 4);
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let text = "[CLS] POI : P UB";
        let payload = encode_author(text, 2, &tok, &p, &cfg.fusion).unwrap();
        assert_eq!(
            payload,
            encode_author(text, 2, &tok, &p, &cfg.fusion).unwrap()
        );
        assert_eq!((payload.h_cls.len(), payload.h_tar.len()), (8, 8));
        let dual = tok.dual(text);
        let h = encode(&dual, &p, &cfg.fusion).unwrap();
        assert_eq!(h.rows(), 6);
        assert_eq!(payload.h_cls, extract_cls(&h).unwrap());
        assert_eq!(
            payload.h_tar,
            author_tar(2, &h, &dual.pad_mask(), &p).unwrap()
        );
        let _ = MergeTable::empty(&tok.vocab);
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let p = micro();
        assert!(encode_traced(&p, &[1, 2], &[1], &p.cfg.fusion).is_err());
        assert!(encode_traced(&p, &[1; 7], &[1; 7], &p.cfg.fusion).is_err());
        assert!(encode_traced(&p, &[50], &[1], &p.cfg.fusion).is_err());
        assert!(encode_traced::<f64>(&p, &[], &[], &p.cfg.fusion).is_err());
    }

    #[test]
    fn author_gradients_match_finite_differences() {
        let p = micro();
        let mut rng = Rng::new(11);
        let base = vec![1, 4, 7, 2, 9, PAD_ID];
        let align = vec![1, 11, 11, 2, 12, PAD_ID];
        let w_cls: Vec<f64> = (0..8).map(|_| rng.uniform() - 0.5).collect();
        let w_tar: Vec<f64> = (0..8).map(|_| rng.uniform() - 0.5).collect();
        let loss = |q: &ModelParams<f64>| {
            let enc = encode_traced(q, &base, &align, &q.cfg.fusion).unwrap();
            let tar = author_tar_traced(q, 3, &enc.h, &enc.mask);
            dot(&enc.h[..8], &w_cls) + dot(&tar.out, &w_tar)
        };
        let enc = encode_traced(&p, &base, &align, &p.cfg.fusion).unwrap();
        let tar = author_tar_traced(&p, 3, &enc.h, &enc.mask);
        let trace = AuthorTrace { enc, tar };
        let mut g = p.zeros_like();
        author_backward(&p, &trace, &w_cls, &w_tar, &mut g);
        let theta = p.flatten();
        let analytic = g.flatten();
        let mut coords = Vec::new();
        for (_, s, e) in p.flat_ranges("sae.") {
            for _ in 0..6 {
                coords.push(rng.random_range(s..e));
            }
        }
        let mut work = p.clone();
        let report = grad_check(
            |t| {
                work.unflatten(t).unwrap();
                loss(&work)
            },
            &theta,
            &analytic,
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{:?}", report.worst());
    }
}
