//! Streaming trainer: target anchors are encoded live with gradients, history
//! rows come from the bank as constants, the bank is refreshed after each step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::bank::MemoryBank;
use crate::data::InteractionEvent;
use crate::eval::auc;
use crate::model::{ModelParams, N_TASKS, TASK_NAMES};
use crate::numerics::Real;
use crate::ranking::{
    aux_backward, aux_forward_traced, aux_loss, rank_backward, rank_forward, rank_forward_traced,
    rec_loss, AuxTrace, RankTrace, TaskScores,
};
use crate::sae::{author_backward, author_forward, AuthorTrace};
use crate::tokenizer::{DualTokenization, Tokenizer};
use crate::user_interest::{
    build_history, user_interest, user_interest_backward, user_interest_traced, UserHistory,
    UserTrace,
};
use crate::{Result, SarmError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Cap on optimizer steps; `None` runs one pass over the training events.
    pub max_steps: Option<usize>,
    /// Bank writes every this many steps.
    pub bank_cadence: usize,
    /// Full re-encode of every author every this many steps (and at start/end).
    pub refresh_cadence: usize,
    /// Test AUC logged every this many steps (0 = final step only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            adam: AdamConfig::default(),
            batch_size: 32,
            max_steps: None,
            bank_cadence: 1,
            refresh_cadence: 1000,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(self.lambda >= 0.0) || !(a.lr >= 0.0) || !(a.eps > 0.0) {
            return Err(SarmError::Config(
                "lambda and lr must be non-negative, eps positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(SarmError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.bank_cadence == 0 || self.refresh_cadence == 0 {
            return Err(SarmError::Config(
                "batch size and cadences must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moments, shaped like the model.
#[derive(Clone, Debug)]
pub struct OptState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub t: u64,
}

impl<F: Real> OptState<F> {
    pub fn new(params: &ModelParams<F>) -> OptState<F> {
        OptState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam step with bias correction.
pub fn adam_update<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    opt: &mut OptState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    let g = grads.named();
    let m = opt.m.named_mut();
    let v = opt.v.named_mut();
    let p = params.named_mut();
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(SarmError::Shape(
            "optimizer state does not mirror the model".into(),
        ));
    }
    for (((pn, pt), (_, gt)), ((_, mt), (_, vt))) in p.iter().zip(&g).zip(m.iter().zip(&v)) {
        if pt.shape() != gt.shape() || pt.shape() != mt.shape() || pt.shape() != vt.shape() {
            return Err(SarmError::Shape(format!(
                "tensor {pn}: gradient or moment shape differs"
            )));
        }
    }
    opt.t += 1;
    let t = opt.t as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let c1 = F::lit(1.0 - cfg.beta1.powi(t));
    let c2 = F::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (F::lit(cfg.lr), F::lit(cfg.eps));
    for (((_, pt), (_, gt)), ((_, mt), (_, vt))) in p.into_iter().zip(g).zip(m.into_iter().zip(v)) {
        let (pd, gd, md, vd) = (pt.data_mut(), gt.data(), mt.data_mut(), vt.data_mut());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (F::one() - b1) * gd[i];
            vd[i] = b2 * vd[i] + (F::one() - b2) * gd[i] * gd[i];
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] = pd[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Forward state for one impression.
#[derive(Clone, Debug)]
pub struct EventTrace<F> {
    pub author: AuthorTrace<F>,
    pub user: UserTrace<F>,
    pub rank: RankTrace<F>,
    pub aux: AuxTrace<F>,
    pub l_rec: F,
    pub l_aux: F,
}

pub fn event_forward<F: Real>(
    params: &ModelParams<F>,
    dual: &DualTokenization,
    event: &InteractionEvent,
    history: &UserHistory<F>,
) -> Result<EventTrace<F>> {
    let d = params.cfg.d;
    let author = author_forward(dual, event.author_id, params, &params.cfg.fusion)?;
    let user = user_interest_traced(history, params);
    let h_cls = &author.enc.h[..d];
    let h_tar = &author.tar.out;
    let h_rank: Vec<F> = event.h_rank.iter().map(|&x| F::lit(f64::from(x))).collect();
    let rank = rank_forward_traced(h_cls, h_tar, &user.pooled, &h_rank, params)?;
    let aux = aux_forward_traced(h_cls, h_tar, params);
    let l_rec = rec_loss(&rank.scores, &event.labels);
    let l_aux = aux_loss(aux.y_hat, event.labels[0]);
    Ok(EventTrace {
        author,
        user,
        rank,
        aux,
        l_rec,
        l_aux,
    })
}

/// Accumulates the gradient of `scale · (L_rec + λ·L_aux)` into `grads`.
pub fn event_backward<F: Real>(
    params: &ModelParams<F>,
    t: &EventTrace<F>,
    event: &InteractionEvent,
    scale: F,
    lambda: F,
    grads: &mut ModelParams<F>,
) {
    let (mut d_cls, mut d_tar, d_uin) = rank_backward(params, &t.rank, &event.labels, scale, grads);
    let (a_cls, a_tar) = aux_backward(params, &t.aux, event.labels[0], scale * lambda, grads);
    crate::numerics::axpy(F::one(), &a_cls, &mut d_cls);
    crate::numerics::axpy(F::one(), &a_tar, &mut d_tar);
    user_interest_backward(params, &t.user, &d_uin, grads);
    author_backward(params, &t.author, &d_cls, &d_tar, grads);
}

/// One training example with its history already read from the bank.
#[derive(Clone, Debug)]
pub struct Example<'a, F> {
    pub dual: &'a DualTokenization,
    pub event: &'a InteractionEvent,
    pub history: UserHistory<F>,
}

/// Batch-mean losses `(L_rec, L_aux)` and the gradient of `L_rec + λ·L_aux`.
pub fn batch_loss_and_grad<F: Real>(
    params: &ModelParams<F>,
    batch: &[Example<'_, F>],
    lambda: F,
) -> Result<(F, F, ModelParams<F>, Vec<EventTrace<F>>)> {
    let mut grads = params.zeros_like();
    let scale = F::one() / F::from_usize(batch.len().max(1)).unwrap();
    let (mut l_rec, mut l_aux) = (F::zero(), F::zero());
    let mut traces = Vec::with_capacity(batch.len());
    for ex in batch {
        let t = event_forward(params, ex.dual, ex.event, &ex.history)?;
        event_backward(params, &t, ex.event, scale, lambda, &mut grads);
        l_rec = l_rec + t.l_rec * scale;
        l_aux = l_aux + t.l_aux * scale;
        traces.push(t);
    }
    Ok((l_rec, l_aux, grads, traces))
}

/// Batch-mean total loss only (for finite-difference checks).
pub fn batch_loss<F: Real>(
    params: &ModelParams<F>,
    batch: &[Example<'_, F>],
    lambda: F,
) -> Result<F> {
    let scale = F::one() / F::from_usize(batch.len().max(1)).unwrap();
    let mut l = F::zero();
    for ex in batch {
        let t = event_forward(params, ex.dual, ex.event, &ex.history)?;
        l = l + (t.l_rec + lambda * t.l_aux) * scale;
    }
    Ok(l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub l_rec: f64,
    pub l_aux: f64,
    pub grad_norm: f64,
    pub aux_grad_norm: f64,
    pub test_auc: Option<[Option<f64>; N_TASKS]>,
}

/// Tokenized anchors per author, fixed for a run.
#[derive(Clone, Debug, Default)]
pub struct AnchorSet {
    duals: BTreeMap<u64, DualTokenization>,
}

impl AnchorSet {
    pub fn new<'a>(
        tokenizer: &Tokenizer,
        anchors: impl IntoIterator<Item = (u64, &'a str)>,
    ) -> AnchorSet {
        AnchorSet {
            duals: anchors
                .into_iter()
                .map(|(id, t)| (id, tokenizer.dual(t)))
                .collect(),
        }
    }

    pub fn get(&self, author_id: u64) -> Result<&DualTokenization> {
        self.duals
            .get(&author_id)
            .ok_or_else(|| SarmError::Config(format!("no anchor for author {author_id}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.duals.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.duals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.duals.is_empty()
    }
}

/// Re-encodes every author and writes the result to the bank.
pub fn refresh_bank(
    params: &ModelParams<f32>,
    anchors: &AnchorSet,
    bank: &mut MemoryBank,
    step: u64,
) -> Result<()> {
    let d = params.cfg.d;
    for (&id, dual) in &anchors.duals {
        let p = author_forward(dual, id, params, &params.cfg.fusion)?.payload(d);
        bank.put(id, &p.h_cls, &p.h_tar, step)?;
    }
    Ok(())
}

/// Serving path: the author's payload is read from the bank, never encoded.
pub fn score_event(
    params: &ModelParams<f32>,
    bank: &MemoryBank,
    event: &InteractionEvent,
) -> Result<TaskScores<f32>> {
    let rec = bank.get(event.author_id);
    let history = build_history(&event.history, bank, params.cfg.history_len);
    let h_uin = user_interest(&history, params);
    rank_forward(rec.h_cls(), rec.h_tar(), &h_uin, &event.h_rank, params)
}

pub fn score_events(
    params: &ModelParams<f32>,
    bank: &MemoryBank,
    events: &[InteractionEvent],
) -> Result<Vec<[f64; N_TASKS]>> {
    events
        .iter()
        .map(|e| score_event(params, bank, e).map(|s| s.y.map(f64::from)))
        .collect()
}

pub fn test_aucs(scores: &[[f64; N_TASKS]], events: &[InteractionEvent]) -> [Option<f64>; N_TASKS] {
    std::array::from_fn(|k| {
        let l: Vec<bool> = events.iter().map(|e| e.labels[k]).collect();
        let s: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        auc(&l, &s)
    })
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: OptState<f32>,
    pub bank: MemoryBank,
    pub anchors: &'a AnchorSet,
    pub step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        params: ModelParams<f32>,
        anchors: &'a AnchorSet,
    ) -> Result<Trainer<'a>> {
        cfg.validate()?;
        let opt = OptState::new(&params);
        let bank = MemoryBank::new(params.cfg.d);
        Ok(Trainer {
            cfg,
            params,
            opt,
            bank,
            anchors,
            step: 0,
        })
    }

    /// Forward/backward over `batch`, Adam update, then bank writes for the
    /// batch's target authors from this step's forward pass.
    pub fn train_step(&mut self, batch: &[InteractionEvent]) -> Result<StepMetrics> {
        let m = self.params.cfg.history_len;
        let examples = batch
            .iter()
            .map(|e| {
                Ok(Example {
                    dual: self.anchors.get(e.author_id)?,
                    event: e,
                    history: build_history(&e.history, &self.bank, m),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lambda = self.cfg.lambda as f32;
        let (l_rec, l_aux, grads, traces) = batch_loss_and_grad(&self.params, &examples, lambda)?;
        if !l_rec.is_finite() || !l_aux.is_finite() || !grads.is_finite() {
            let mut msg = format!(
                "non-finite loss at step {}: l_rec={l_rec} l_aux={l_aux}; events:",
                self.step
            );
            for (e, t) in batch.iter().zip(&traces) {
                write!(
                    msg,
                    " [user {} author {} l_rec {} l_aux {}]",
                    e.user_id, e.author_id, t.l_rec, t.l_aux
                )
                .unwrap();
            }
            return Err(SarmError::Numeric(msg));
        }
        let metrics = StepMetrics {
            step: self.step,
            l_rec: f64::from(l_rec),
            l_aux: f64::from(l_aux),
            grad_norm: f64::from(grads.sq_norm("")).sqrt(),
            aux_grad_norm: f64::from(grads.sq_norm("aux.")).sqrt(),
            test_auc: None,
        };
        adam_update(&mut self.params, &grads, &mut self.opt, &self.cfg.adam)?;
        if self.step.is_multiple_of(self.cfg.bank_cadence as u64) {
            let d = self.params.cfg.d;
            let mut seen = BTreeSet::new();
            for (e, t) in batch.iter().zip(&traces) {
                if seen.insert(e.author_id) {
                    let p = t.author.payload(d);
                    self.bank.put(e.author_id, &p.h_cls, &p.h_tar, self.step)?;
                }
            }
        }
        self.step += 1;
        Ok(metrics)
    }

    pub fn refresh(&mut self) -> Result<()> {
        refresh_bank(&self.params, self.anchors, &mut self.bank, self.step)
    }
}

/// Final state of a run.
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub bank: MemoryBank,
    pub log: Vec<StepMetrics>,
}

/// Ordered mini-batches over `train`; bank fully refreshed at the start,
/// every `refresh_cadence` steps and at the end.
pub fn run_training(
    cfg: &TrainConfig,
    params: ModelParams<f32>,
    anchors: &AnchorSet,
    train: &[InteractionEvent],
    test: &[InteractionEvent],
) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg.clone(), params, anchors)?;
    tr.refresh()?;
    let mut n_steps = train.len().div_ceil(cfg.batch_size);
    if let Some(cap) = cfg.max_steps {
        n_steps = n_steps.min(cap);
    }
    let mut log = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let batch = &train[s * cfg.batch_size..((s + 1) * cfg.batch_size).min(train.len())];
        let mut m = tr.train_step(batch)?;
        if tr.step % cfg.refresh_cadence as u64 == 0 {
            tr.refresh()?;
        }
        let last = s + 1 == n_steps;
        if last {
            tr.refresh()?;
        }
        if !test.is_empty()
            && (last || (cfg.eval_every > 0 && tr.step % cfg.eval_every as u64 == 0))
        {
            let scores = score_events(&tr.params, &tr.bank, test)?;
            m.test_auc = Some(test_aucs(&scores, test));
        }
        log.push(m);
    }
    Ok(TrainOutcome {
        params: tr.params,
        bank: tr.bank,
        log,
    })
}

pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut s = String::from("step,l_rec,l_aux,grad_norm,aux_grad_norm");
    for t in TASK_NAMES {
        write!(s, ",test_auc_{t}").unwrap();
    }
    s.push('\n');
    for m in log {
        write!(
            s,
            "{},{},{},{},{}",
            m.step, m.l_rec, m.l_aux, m.grad_norm, m.aux_grad_norm
        )
        .unwrap();
        for k in 0..N_TASKS {
            match m.test_auc.and_then(|a| a[k]) {
                Some(v) => write!(s, ",{v}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}
