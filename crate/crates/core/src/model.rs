//! Model configuration and the full trainable parameter set (encoder, user
//! transformer, ranking heads), with named-tensor access and snapshot I/O.

use std::io::{Read, Write};

use crate::error::{Result, SarmError};
use crate::numerics::{init_params, InitScheme, Real, Rng, RopeTable, Tensor};

pub const PARAMS_MAGIC: &str = "SARM-PARAMS v1";
pub const N_TASKS: usize = 4;
pub const TASK_NAMES: [&str; N_TASKS] = ["ctr", "wtr", "lvtr", "gtr"];

/// Block indices after which gated fusion runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub sites: Vec<usize>,
    pub enabled: bool,
}

impl FusionConfig {
    pub fn new(mut sites: Vec<usize>, enabled: bool) -> FusionConfig {
        sites.sort_unstable();
        sites.dedup();
        FusionConfig { sites, enabled }
    }

    pub fn all(n_blocks: usize) -> FusionConfig {
        FusionConfig::new((0..n_blocks).collect(), true)
    }

    pub fn disabled() -> FusionConfig {
        FusionConfig::new(Vec::new(), false)
    }

    /// Position of `block` in `sites`, when fusion runs after it.
    pub fn site_index(&self, block: usize) -> Option<usize> {
        if self.enabled {
            self.sites.binary_search(&block).ok()
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub fusion: FusionConfig,
    pub base_vocab: usize,
    pub ext_vocab: usize,
    /// Author ids `1..=n_authors` get their own `E_id` row; everything else maps to row 0.
    pub n_authors: usize,
    pub d_rank: usize,
    pub history_len: usize,
    pub user_blocks: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Gradient-check scale: d=8, L=6, 2 blocks, fusion after both.
    pub fn micro(base_vocab: usize, ext_vocab: usize, n_authors: usize) -> ModelConfig {
        ModelConfig {
            d: 8,
            max_len: 6,
            n_blocks: 2,
            fusion: FusionConfig::all(2),
            base_vocab,
            ext_vocab,
            n_authors,
            d_rank: 4,
            history_len: 4,
            user_blocks: 1,
            rms_eps: crate::numerics::DEFAULT_RMS_EPS,
            rope_base: crate::numerics::DEFAULT_ROPE_BASE,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SarmError::Config(m));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return bad(format!("d must be positive and even, got {}", self.d));
        }
        if self.max_len == 0 || self.history_len == 0 || self.n_blocks == 0 {
            return bad("max_len, history_len and n_blocks must be positive".into());
        }
        if let Some(&s) = self.fusion.sites.iter().find(|&&s| s >= self.n_blocks) {
            return bad(format!("fusion site {s} outside 0..{}", self.n_blocks));
        }
        if self.base_vocab < 4 || self.ext_vocab < self.base_vocab {
            return bad(format!(
                "vocab sizes base={} ext={} are inconsistent",
                self.base_vocab, self.ext_vocab
            ));
        }
        if !(self.rms_eps > 0.0) {
            return bad("rms_eps must be positive".into());
        }
        Ok(())
    }

    pub fn d_hidden(&self) -> usize {
        4 * self.d
    }

    pub fn rank_input(&self) -> usize {
        3 * self.d + self.d_rank
    }

    /// `E_id` row for an author id.
    pub fn id_slot(&self, author_id: u64) -> usize {
        if author_id >= 1 && author_id <= self.n_authors as u64 {
            author_id as usize
        } else {
            0
        }
    }
}

/// One pre-norm transformer block (single head, no biases).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F> {
    pub g_attn: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub g_ffn: Tensor<F>,
    pub w1: Tensor<F>,
    pub w2: Tensor<F>,
}

/// Gated fusion at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<F> {
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub g_h: Tensor<F>,
    pub g_k: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams<F> {
    pub e_base: Tensor<F>,
    pub e_ext: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    /// One entry per configured fusion site, in site order.
    pub fusion: Vec<FusionParams<F>>,
    pub e_id: Tensor<F>,
    pub wq_c: Tensor<F>,
    pub wk_c: Tensor<F>,
    pub wv_c: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserParams<F> {
    pub blocks: Vec<BlockParams<F>>,
}

/// `y = x·w + b`
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Real> Dense<F> {
    pub fn n_in(&self) -> usize {
        self.w.rows()
    }

    pub fn n_out(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankParams<F> {
    pub trunk: Vec<Dense<F>>,
    /// `towers[t]` = two layers for task `t`.
    pub towers: Vec<Vec<Dense<F>>>,
    pub aux: Vec<Dense<F>>,
}

/// All trainable tensors plus the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    pub cfg: ModelConfig,
    pub sae: SaeParams<F>,
    pub user: UserParams<F>,
    pub rank: RankParams<F>,
    rope: RopeTable<F>,
}

impl<F: Real> PartialEq for ModelParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.sae == other.sae
            && self.user == other.user
            && self.rank == other.rank
    }
}

fn uniform<F: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    init_params(rng, shape, InitScheme::UniformScaled { fan_in })
}

fn ones<F: Real>(d: usize) -> Tensor<F> {
    Tensor::filled(&[d], F::one())
}

fn block<F: Real>(rng: &mut Rng, d: usize) -> BlockParams<F> {
    BlockParams {
        g_attn: ones(d),
        wq: uniform(rng, &[d, d], d),
        wk: uniform(rng, &[d, d], d),
        wv: uniform(rng, &[d, d], d),
        wo: uniform(rng, &[d, d], d),
        g_ffn: ones(d),
        w1: uniform(rng, &[d, 4 * d], d),
        w2: uniform(rng, &[4 * d, d], 4 * d),
    }
}

fn dense<F: Real>(rng: &mut Rng, n_in: usize, n_out: usize) -> Dense<F> {
    Dense {
        w: uniform(rng, &[n_in, n_out], n_in),
        b: Tensor::zeros(&[n_out]),
    }
}

impl<F: Real> ModelParams<F> {
    /// Seeded initialisation; each group draws from its own derived stream.
    pub fn init(cfg: &ModelConfig) -> Result<ModelParams<F>> {
        cfg.validate()?;
        let d = cfg.d;
        let s = cfg.seed;
        let mut r = Rng::derived(s, "sae.embed");
        let e_base = uniform(&mut r, &[cfg.base_vocab, d], d);
        let e_ext = uniform(&mut r, &[cfg.ext_vocab, d], d);
        let mut r = Rng::derived(s, "sae.blocks");
        let blocks = (0..cfg.n_blocks).map(|_| block(&mut r, d)).collect();
        let mut r = Rng::derived(s, "sae.fusion");
        let fusion = cfg
            .fusion
            .sites
            .iter()
            .map(|_| FusionParams {
                wk: uniform(&mut r, &[d, d], d),
                wv: uniform(&mut r, &[d, d], d),
                g_h: ones(d),
                g_k: ones(d),
            })
            .collect();
        let mut r = Rng::derived(s, "sae.identity");
        let e_id = uniform(&mut r, &[cfg.n_authors + 1, d], d);
        let wq_c = uniform(&mut r, &[d, d], d);
        let wk_c = uniform(&mut r, &[d, d], d);
        let wv_c = uniform(&mut r, &[d, d], d);
        let mut r = Rng::derived(s, "user");
        let user = UserParams {
            blocks: (0..cfg.user_blocks).map(|_| block(&mut r, d)).collect(),
        };
        let mut r = Rng::derived(s, "rank");
        let h = cfg.d_hidden();
        let trunk = vec![dense(&mut r, cfg.rank_input(), h), dense(&mut r, h, h)];
        let towers = (0..N_TASKS)
            .map(|_| vec![dense(&mut r, h, d), dense(&mut r, d, 1)])
            .collect();
        let aux = vec![dense(&mut r, 2 * d, d), dense(&mut r, d, 2)];
        Ok(ModelParams {
            cfg: cfg.clone(),
            sae: SaeParams {
                e_base,
                e_ext,
                blocks,
                fusion,
                e_id,
                wq_c,
                wk_c,
                wv_c,
            },
            user,
            rank: RankParams { trunk, towers, aux },
            rope: rope_for(cfg)?,
        })
    }

    pub fn rope(&self) -> &RopeTable<F> {
        &self.rope
    }

    /// Same shapes, every entry zero (gradient accumulators, Adam moments).
    pub fn zeros_like(&self) -> ModelParams<F> {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill_zero());
        z
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut names = Vec::new();
        self.for_each(|n, t| names.push((n.to_string(), t.cast::<G>())));
        let mut out = ModelParams::<G>::init_shapes(&self.cfg);
        let mut it = names.into_iter();
        out.for_each_mut(|_, t| *t = it.next().expect("same layout").1);
        out
    }

    /// Zero tensors with the right shapes.
    fn init_shapes(cfg: &ModelConfig) -> ModelParams<F> {
        let mut p = ModelParams::init(cfg).expect("validated config");
        p.for_each_mut(|_, t| t.fill_zero());
        p
    }

    /// Visits every tensor in a fixed order with a dotted name.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor<F>)) {
        for (n, t) in self.named() {
            f(&n, t);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        for (n, t) in self.named_mut() {
            f(&n, t);
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        let s = &self.sae;
        out.push(("sae.e_base".into(), &s.e_base));
        out.push(("sae.e_ext".into(), &s.e_ext));
        for (i, b) in s.blocks.iter().enumerate() {
            push_block(&mut out, &format!("sae.block{i}"), b);
        }
        for (i, f) in s.fusion.iter().enumerate() {
            let site = self.cfg.fusion.sites[i];
            let p = format!("sae.fusion{site}");
            out.push((format!("{p}.wk"), &f.wk));
            out.push((format!("{p}.wv"), &f.wv));
            out.push((format!("{p}.g_h"), &f.g_h));
            out.push((format!("{p}.g_k"), &f.g_k));
        }
        out.push(("sae.e_id".into(), &s.e_id));
        out.push(("sae.cross.wq".into(), &s.wq_c));
        out.push(("sae.cross.wk".into(), &s.wk_c));
        out.push(("sae.cross.wv".into(), &s.wv_c));
        for (i, b) in self.user.blocks.iter().enumerate() {
            push_block(&mut out, &format!("user.block{i}"), b);
        }
        for (i, l) in self.rank.trunk.iter().enumerate() {
            push_dense(&mut out, &format!("rank.trunk{i}"), l);
        }
        for (t, tower) in self.rank.towers.iter().enumerate() {
            for (i, l) in tower.iter().enumerate() {
                push_dense(&mut out, &format!("rank.{}.{i}", TASK_NAMES[t]), l);
            }
        }
        for (i, l) in self.rank.aux.iter().enumerate() {
            push_dense(&mut out, &format!("aux.{i}"), l);
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        let sites = self.cfg.fusion.sites.clone();
        let s = &mut self.sae;
        out.push(("sae.e_base".into(), &mut s.e_base));
        out.push(("sae.e_ext".into(), &mut s.e_ext));
        for (i, b) in s.blocks.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("sae.block{i}"), b);
        }
        for (i, f) in s.fusion.iter_mut().enumerate() {
            let p = format!("sae.fusion{}", sites[i]);
            out.push((format!("{p}.wk"), &mut f.wk));
            out.push((format!("{p}.wv"), &mut f.wv));
            out.push((format!("{p}.g_h"), &mut f.g_h));
            out.push((format!("{p}.g_k"), &mut f.g_k));
        }
        out.push(("sae.e_id".into(), &mut s.e_id));
        out.push(("sae.cross.wq".into(), &mut s.wq_c));
        out.push(("sae.cross.wk".into(), &mut s.wk_c));
        out.push(("sae.cross.wv".into(), &mut s.wv_c));
        for (i, b) in self.user.blocks.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("user.block{i}"), b);
        }
        for (i, l) in self.rank.trunk.iter_mut().enumerate() {
            push_dense_mut(&mut out, &format!("rank.trunk{i}"), l);
        }
        for (t, tower) in self.rank.towers.iter_mut().enumerate() {
            for (i, l) in tower.iter_mut().enumerate() {
                push_dense_mut(&mut out, &format!("rank.{}.{i}", TASK_NAMES[t]), l);
            }
        }
        for (i, l) in self.rank.aux.iter_mut().enumerate() {
            push_dense_mut(&mut out, &format!("aux.{i}"), l);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.num_params());
        self.for_each(|_, t| v.extend_from_slice(t.data()));
        v
    }

    pub fn unflatten(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(SarmError::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        self.for_each_mut(|_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// `[start, end)` offsets in [`ModelParams::flatten`] of every tensor whose
    /// name starts with `prefix`.
    pub fn flat_ranges(&self, prefix: &str) -> Vec<(String, usize, usize)> {
        let mut off = 0;
        let mut out = Vec::new();
        self.for_each(|n, t| {
            if n.starts_with(prefix) {
                out.push((n.to_string(), off, off + t.len()));
            }
            off += t.len();
        });
        out
    }

    /// Sum of squares over tensors whose name starts with `prefix` (`""` = all).
    pub fn sq_norm(&self, prefix: &str) -> F {
        let mut s = F::zero();
        self.for_each(|n, t| {
            if n.starts_with(prefix) {
                s = s + t.sq_norm();
            }
        });
        s
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: F, other: &ModelParams<F>) {
        let src = other.named();
        for ((_, dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            crate::numerics::axpy(alpha, s.data(), dst.data_mut());
        }
    }
}

impl ModelParams<f32> {
    /// Header line then `u32 count`, and per tensor: `u32 name_len, name,
    /// u32 ndim, u64 dims.., f32 payload`, all little-endian.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let named = self.named();
        w.write_all(PARAMS_MAGIC.as_bytes())?;
        w.write_all(b"\n")?;
        w.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, t) in named {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &dim in t.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_snapshot(&mut v).expect("writing to memory");
        v
    }

    /// Reads a snapshot; names and shapes must match `cfg` exactly.
    pub fn read_snapshot<R: Read>(cfg: &ModelConfig, mut r: R) -> Result<ModelParams<f32>> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor {
            buf: &bytes,
            pos: 0,
        };
        let magic = cur.take(PARAMS_MAGIC.len() + 1)?;
        if magic != format!("{PARAMS_MAGIC}\n").as_bytes() {
            return Err(SarmError::Format(
                "parameter snapshot: bad magic at offset 0".into(),
            ));
        }
        let mut params = ModelParams::<f32>::init_shapes(cfg);
        let count = cur.u32()? as usize;
        let mut slots = params.named_mut();
        if count != slots.len() {
            return Err(SarmError::Format(format!(
                "parameter snapshot: {count} tensors, model expects {}",
                slots.len()
            )));
        }
        for (name, t) in slots.iter_mut() {
            let at = cur.pos;
            let len = cur.u32()? as usize;
            let got = cur.take(len)?;
            if got != name.as_bytes() {
                return Err(SarmError::Format(format!(
                    "parameter snapshot: expected `{name}` at offset {at}, found `{}`",
                    String::from_utf8_lossy(got)
                )));
            }
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            if shape != t.shape() {
                return Err(SarmError::Format(format!(
                    "parameter snapshot: `{name}` has shape {shape:?}, model expects {:?}",
                    t.shape()
                )));
            }
            for x in t.data_mut() {
                *x = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            }
        }
        drop(slots);
        if cur.pos != bytes.len() {
            return Err(SarmError::Format(format!(
                "parameter snapshot: trailing bytes at offset {}",
                cur.pos
            )));
        }
        Ok(params)
    }
}

pub(crate) struct ByteCursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SarmError::Format(format!(
                "truncated at offset {} (need {n} bytes, {} left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn rope_for<F: Real>(cfg: &ModelConfig) -> Result<RopeTable<F>> {
    RopeTable::new(cfg.max_len.max(cfg.history_len), cfg.d, cfg.rope_base)
}

fn push_block<'a, F>(out: &mut Vec<(String, &'a Tensor<F>)>, p: &str, b: &'a BlockParams<F>) {
    out.push((format!("{p}.g_attn"), &b.g_attn));
    out.push((format!("{p}.wq"), &b.wq));
    out.push((format!("{p}.wk"), &b.wk));
    out.push((format!("{p}.wv"), &b.wv));
    out.push((format!("{p}.wo"), &b.wo));
    out.push((format!("{p}.g_ffn"), &b.g_ffn));
    out.push((format!("{p}.w1"), &b.w1));
    out.push((format!("{p}.w2"), &b.w2));
}

fn push_block_mut<'a, F>(
    out: &mut Vec<(String, &'a mut Tensor<F>)>,
    p: &str,
    b: &'a mut BlockParams<F>,
) {
    out.push((format!("{p}.g_attn"), &mut b.g_attn));
    out.push((format!("{p}.wq"), &mut b.wq));
    out.push((format!("{p}.wk"), &mut b.wk));
    out.push((format!("{p}.wv"), &mut b.wv));
    out.push((format!("{p}.wo"), &mut b.wo));
    out.push((format!("{p}.g_ffn"), &mut b.g_ffn));
    out.push((format!("{p}.w1"), &mut b.w1));
    out.push((format!("{p}.w2"), &mut b.w2));
}

fn push_dense<'a, F>(out: &mut Vec<(String, &'a Tensor<F>)>, p: &str, l: &'a Dense<F>) {
    out.push((format!("{p}.w"), &l.w));
    out.push((format!("{p}.b"), &l.b));
}

fn push_dense_mut<'a, F>(out: &mut Vec<(String, &'a mut Tensor<F>)>, p: &str, l: &'a mut Dense<F>) {
    out.push((format!("{p}.w"), &mut l.w));
    out.push((format!("{p}.b"), &mut l.b));
}
