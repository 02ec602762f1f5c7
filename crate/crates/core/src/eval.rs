//! AUC / GAUC, exposure-stratified reports, attention attribution and
//! author-to-author retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::anchor::{Dimension, CLS, PAD, SEP};
use crate::bank::MemoryBank;
use crate::data::InteractionEvent;
use crate::model::{FusionConfig, ModelParams, N_TASKS, TASK_NAMES};
use crate::numerics::Real;
use crate::sae::{author_forward, AuthorTrace};
use crate::tokenizer::{pre_tokenize, BaseVocab, Tokenizer};
use crate::{Result, SarmError};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is absent.
///
/// Uses tied average ranks; the doubled Mann-Whitney statistic is an exact
/// integer, so the result is the correctly rounded pair-count ratio.
pub fn auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(
        labels.len(),
        scores.len(),
        "labels and scores differ in length"
    );
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of twice their 1-based average rank.
    let mut rank2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]].total_cmp(&scores[idx[i]]).is_eq() {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2 += pos * (i + j + 1) as u128;
        i = j;
    }
    let u2 = rank2 - n_pos * (n_pos + 1);
    Some(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Impression-weighted mean of per-user AUC over users having both classes.
pub fn gauc(user_ids: &[u64], labels: &[bool], scores: &[f64]) -> Option<f64> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &u) in user_ids.iter().enumerate() {
        groups.entry(u).or_default().push(i);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for idx in groups.values() {
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        if let Some(a) = auc(&l, &s) {
            num += idx.len() as f64 * a;
            den += idx.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Lower edges of the exposure buckets; the last bucket is unbounded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketEdges(Vec<u64>);

pub const DEFAULT_EDGES: [u64; 5] = [0, 6, 10, 100, 1000];

impl Default for BucketEdges {
    fn default() -> Self {
        BucketEdges(DEFAULT_EDGES.to_vec())
    }
}

impl BucketEdges {
    pub fn new(edges: Vec<u64>) -> Result<BucketEdges> {
        if edges.first() != Some(&0) {
            return Err(SarmError::Config("bucket edges must start at 0".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SarmError::Config(format!(
                "bucket edges {edges:?} are not strictly increasing"
            )));
        }
        Ok(BucketEdges(edges))
    }

    pub fn edges(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bucket_of(&self, exposure: u64) -> usize {
        self.0.partition_point(|&e| e <= exposure) - 1
    }

    pub fn upper(&self, b: usize) -> Option<u64> {
        self.0.get(b + 1).copied()
    }
}

/// Impressions per author in `events`.
pub fn exposure_counts(events: &[InteractionEvent]) -> BTreeMap<u64, u64> {
    let mut m = BTreeMap::new();
    for e in events {
        *m.entry(e.author_id).or_insert(0) += 1;
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskMetrics {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub lo: u64,
    pub hi: Option<u64>,
    pub n_events: usize,
    pub n_authors: usize,
    pub tasks: [TaskMetrics; N_TASKS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_events: usize,
    pub overall: [TaskMetrics; N_TASKS],
    pub buckets: Vec<BucketReport>,
}

fn task_metrics(
    events: &[&InteractionEvent],
    scores: &[&[f64; N_TASKS]],
) -> [TaskMetrics; N_TASKS] {
    let users: Vec<u64> = events.iter().map(|e| e.user_id).collect();
    std::array::from_fn(|k| {
        let l: Vec<bool> = events.iter().map(|e| e.labels[k]).collect();
        let s: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        TaskMetrics {
            auc: auc(&l, &s),
            gauc: gauc(&users, &l, &s),
        }
    })
}

/// Routes every test event to the bucket of its author's training exposure
/// (authors absent from `exposure` have 0) and reports per-task metrics.
pub fn stratified_eval(
    test: &[InteractionEvent],
    scores: &[[f64; N_TASKS]],
    exposure: &BTreeMap<u64, u64>,
    edges: &BucketEdges,
) -> Result<EvalReport> {
    if test.len() != scores.len() {
        return Err(SarmError::Shape(format!(
            "{} events but {} score rows",
            test.len(),
            scores.len()
        )));
    }
    let edges = BucketEdges::new(edges.0.clone())?;
    let all_e: Vec<&InteractionEvent> = test.iter().collect();
    let all_s: Vec<&[f64; N_TASKS]> = scores.iter().collect();
    let mut per: Vec<(Vec<&InteractionEvent>, Vec<&[f64; N_TASKS]>, BTreeSet<u64>)> =
        vec![(Vec::new(), Vec::new(), BTreeSet::new()); edges.len()];
    for (e, s) in test.iter().zip(scores) {
        let b = edges.bucket_of(exposure.get(&e.author_id).copied().unwrap_or(0));
        per[b].0.push(e);
        per[b].1.push(s);
        per[b].2.insert(e.author_id);
    }
    let buckets = per
        .iter()
        .enumerate()
        .map(|(b, (ev, sc, authors))| BucketReport {
            lo: edges.0[b],
            hi: edges.upper(b),
            n_events: ev.len(),
            n_authors: authors.len(),
            tasks: task_metrics(ev, sc),
        })
        .collect();
    Ok(EvalReport {
        n_events: test.len(),
        overall: task_metrics(&all_e, &all_s),
        buckets,
    })
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,lo,hi,n_events,n_authors,task,auc,gauc\n");
        let n_authors: usize = self.buckets.iter().map(|b| b.n_authors).sum();
        for (k, t) in self.overall.iter().enumerate() {
            writeln!(
                s,
                "all,0,inf,{},{},{},{},{}",
                self.n_events,
                n_authors,
                TASK_NAMES[k],
                fmt_metric(t.auc),
                fmt_metric(t.gauc)
            )
            .unwrap();
        }
        for (i, b) in self.buckets.iter().enumerate() {
            for (k, t) in b.tasks.iter().enumerate() {
                writeln!(
                    s,
                    "bucket{},{},{},{},{},{},{},{}",
                    i,
                    b.lo,
                    b.hi.map_or("inf".into(), |h| h.to_string()),
                    b.n_events,
                    b.n_authors,
                    TASK_NAMES[k],
                    fmt_metric(t.auc),
                    fmt_metric(t.gauc)
                )
                .unwrap();
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![vec![
            "scope".to_string(),
            "events".into(),
            "authors".into(),
            "task".into(),
            "auc".into(),
            "gauc".into(),
        ]];
        let n_authors: usize = self.buckets.iter().map(|b| b.n_authors).sum();
        for (k, t) in self.overall.iter().enumerate() {
            rows.push(vec![
                "all".into(),
                self.n_events.to_string(),
                n_authors.to_string(),
                TASK_NAMES[k].into(),
                fmt_metric(t.auc),
                fmt_metric(t.gauc),
            ]);
        }
        for b in &self.buckets {
            let scope = format!(
                "[{},{})",
                b.lo,
                b.hi.map_or("inf".into(), |h| h.to_string())
            );
            for (k, t) in b.tasks.iter().enumerate() {
                rows.push(vec![
                    scope.clone(),
                    b.n_events.to_string(),
                    b.n_authors.to_string(),
                    TASK_NAMES[k].into(),
                    fmt_metric(t.auc),
                    fmt_metric(t.gauc),
                ]);
            }
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:>w$}"))
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

/// Attention rollout: `TAR row · Ã_B ⋯ Ã_1` with `Ã = rownorm(0.5·A + 0.5·I)`,
/// restricted to non-pad positions and renormalised. Returns `(position, weight)`.
pub fn attention_attribution<F: Real>(trace: &AuthorTrace<F>) -> Vec<(usize, f64)> {
    let n = trace.enc.n;
    let mut v: Vec<f64> = trace.tar.attn.iter().map(|x| x.to_f64().unwrap()).collect();
    for b in (0..trace.enc.blocks.len()).rev() {
        let a = trace.enc.attention(b);
        let mut next = vec![0.0; n];
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| 0.5 * a[i * n + j].to_f64().unwrap() + if i == j { 0.5 } else { 0.0 })
                .collect();
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                continue;
            }
            for j in 0..n {
                next[j] += v[i] * row[j] / s;
            }
        }
        v = next;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !trace.enc.mask[i]).collect();
    let total: f64 = keep.iter().map(|&i| v[i].max(0.0)).sum();
    keep.iter()
        .map(|&i| {
            let w = if total > 0.0 {
                v[i].max(0.0) / total
            } else {
                1.0 / keep.len() as f64
            };
            (i, w)
        })
        .collect()
}

/// Attribution for one author's anchor as `(base token surface, weight)`.
pub fn attribute_author<F: Real>(
    anchor_text: &str,
    author_id: u64,
    tokenizer: &Tokenizer,
    params: &ModelParams<F>,
    fusion: &FusionConfig,
) -> Result<Vec<(String, f64)>> {
    let dual = tokenizer.dual(anchor_text);
    let trace = author_forward(&dual, author_id, params, fusion)?;
    Ok(attention_attribution(&trace)
        .into_iter()
        .map(|(i, w)| (tokenizer.base_surface(dual.base_seq[i]).to_string(), w))
        .collect())
}

pub fn format_attribution(weights: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (t, w) in weights {
        writeln!(s, "{t}\t{w:.9}").unwrap();
    }
    s
}

/// What a base position of a rendered anchor carries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenRole {
    /// `[CLS]`, `[SEP]`, `[PAD]`
    Reserved,
    /// Dimension label words and their `:`.
    Label(Dimension),
    /// `,` between phrases.
    Separator,
    Phrase {
        dim: Dimension,
        phrase: String,
    },
}

/// Role of every unpadded base position of a rendered anchor.
pub fn token_roles(text: &str, vocab: &BaseVocab) -> Vec<TokenRole> {
    let mut roles = Vec::new();
    let mut dim = Dimension::ALL[0];
    // Start of the current label run while reading `label:`.
    let mut label: Option<(usize, Vec<&str>)> = None;
    let mut phrase: Vec<&str> = Vec::new();
    let mut pending = 0usize;
    let flush = |roles: &mut Vec<TokenRole>,
                 phrase: &mut Vec<&str>,
                 pending: &mut usize,
                 dim: Dimension| {
        if *pending > 0 {
            let role = TokenRole::Phrase {
                dim,
                phrase: phrase.join(" "),
            };
            roles.extend(std::iter::repeat_n(role, *pending));
        }
        phrase.clear();
        *pending = 0;
    };
    for w in pre_tokenize(text) {
        let n = vocab.encode(w).len();
        if w == CLS || w == SEP || w == PAD {
            flush(&mut roles, &mut phrase, &mut pending, dim);
            roles.extend(std::iter::repeat_n(TokenRole::Reserved, n));
            if w != PAD {
                label = Some((roles.len(), Vec::new()));
            }
        } else if let Some((start, words)) = &mut label {
            roles.extend(std::iter::repeat_n(TokenRole::Label(dim), n));
            if w == ":" {
                dim = Dimension::from_label(&words.join(" ")).unwrap_or(dim);
                roles[*start..]
                    .iter_mut()
                    .for_each(|r| *r = TokenRole::Label(dim));
                label = None;
            } else {
                words.push(w);
            }
        } else if w == "," {
            flush(&mut roles, &mut phrase, &mut pending, dim);
            roles.extend(std::iter::repeat_n(TokenRole::Separator, n));
        } else {
            phrase.push(w);
            pending += n;
        }
    }
    flush(&mut roles, &mut phrase, &mut pending, dim);
    roles
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Top-`k` authors by `h_CLS` cosine similarity to `query`, excluding the
/// query itself; ties go to the smaller author id.
pub fn a2a_retrieve(query: u64, bank: &MemoryBank, k: usize) -> Result<Vec<(u64, f64)>> {
    let q = bank.get(query);
    if q.is_default() {
        return Err(SarmError::Config(format!(
            "author {query} is not in the bank"
        )));
    }
    let mut sims: Vec<(u64, f64)> = bank
        .ids()
        .into_iter()
        .filter(|&id| id != query)
        .map(|id| (id, cosine(q.h_cls(), bank.get(id).h_cls())))
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(k);
    Ok(sims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let l = [true, false, true, false];
        assert_eq!(auc(&l, &[0.9, 0.8, 0.7, 0.1]), Some(0.75));
        assert_eq!(auc(&l, &[0.9, 0.1, 0.8, 0.2]), Some(1.0));
        assert_eq!(auc(&l, &[0.3; 4]), Some(0.5));
        assert_eq!(auc(&[true, true], &[0.1, 0.2]), None);
        assert_eq!(auc(&[], &[]), None);
    }

    #[test]
    fn gauc_examples() {
        let users = [1, 1, 2, 2, 2];
        let labels = [true, false, true, false, false];
        let scores = [0.9, 0.1, 0.5, 0.5, 0.5];
        assert_eq!(gauc(&users, &labels, &scores), Some(0.7));
        assert_eq!(gauc(&[1, 1], &[true, false], &[0.2, 0.4]), Some(0.0));
        assert_eq!(gauc(&[1, 2], &[true, false], &[0.2, 0.4]), None);
    }

    #[test]
    fn edges_validate_and_route() {
        let e = BucketEdges::default();
        assert_eq!(e.bucket_of(0), 0);
        assert_eq!(e.bucket_of(5), 0);
        assert_eq!(e.bucket_of(6), 1);
        assert_eq!(e.bucket_of(99), 2);
        assert_eq!(e.bucket_of(1000), 4);
        assert_eq!(e.bucket_of(u64::MAX), 4);
        assert!(BucketEdges::new(vec![0, 10, 6]).is_err());
        assert!(BucketEdges::new(vec![0, 6, 6]).is_err());
        assert!(BucketEdges::new(vec![1, 6]).is_err());
    }

    fn ev(user: u64, author: u64, click: bool) -> InteractionEvent {
        InteractionEvent {
            user_id: user,
            author_id: author,
            history: vec![],
            h_rank: vec![],
            labels: [click, false, false, false],
            timestamp: 0,
        }
    }

    #[test]
    fn all_authors_in_first_bucket() {
        let test: Vec<_> = (0..20).map(|i| ev(i % 3, i % 4, i % 2 == 0)).collect();
        let scores: Vec<[f64; 4]> = (0..20).map(|i| [i as f64 / 20.0; 4]).collect();
        let r = stratified_eval(&test, &scores, &BTreeMap::new(), &BucketEdges::default()).unwrap();
        assert_eq!(r.buckets[0].n_events, 20);
        assert_eq!(r.buckets[0].tasks[0], r.overall[0]);
        for b in &r.buckets[1..] {
            assert_eq!(b.n_events, 0);
            assert_eq!(b.tasks[0], TaskMetrics::default());
        }
        assert!(stratified_eval(
            &test,
            &scores[1..],
            &BTreeMap::new(),
            &BucketEdges::default()
        )
        .is_err());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4 + 5 * 4);
        assert!(csv.contains("bucket4,1000,inf,0,0,ctr,NA,NA"));
        assert_eq!(r.to_table().lines().count(), 1 + 4 + 5 * 4);
    }

    #[test]
    fn roles_follow_anchor_structure() {
        let text = "[CLS] POI: PUBG squad, ranked climb [SEP] Target audience: [SEP] Scene: night";
        let vocab = BaseVocab::from_tokens([
            "POI", ":", "PUBG", "squad", ",", "ranked", "climb", "Target", "audience", "Scene",
            "ni", "gh", "t",
        ]);
        let roles = token_roles(text, &vocab);
        assert_eq!(roles.len(), vocab.encode(text).len());
        let poi = |p: &str| TokenRole::Phrase {
            dim: Dimension::Poi,
            phrase: p.into(),
        };
        assert_eq!(
            roles[..9],
            [
                TokenRole::Reserved,
                TokenRole::Label(Dimension::Poi),
                TokenRole::Label(Dimension::Poi),
                poi("PUBG squad"),
                poi("PUBG squad"),
                TokenRole::Separator,
                poi("ranked climb"),
                poi("ranked climb"),
                TokenRole::Reserved,
            ]
        );
        assert!(roles[9..12]
            .iter()
            .all(|r| *r == TokenRole::Label(Dimension::TargetAudience)));
        assert_eq!(roles[12], TokenRole::Reserved);
        // "night" falls back to three pieces.
        assert_eq!(roles.len(), 13 + 2 + 3);
        assert!(matches!(&roles[17], TokenRole::Phrase { phrase, .. } if phrase == "night"));
    }

    #[test]
    fn retrieval_orders_and_excludes() {
        let mut bank = MemoryBank::new(2);
        bank.put(1, &[1.0, 0.0], &[0.0; 2], 0).unwrap();
        bank.put(2, &[0.0, 1.0], &[0.0; 2], 0).unwrap();
        bank.put(3, &[2.0, 0.0], &[0.0; 2], 0).unwrap();
        bank.put(4, &[1.0, 1.0], &[0.0; 2], 0).unwrap();
        bank.put(5, &[1.0, -1.0], &[0.0; 2], 0).unwrap();
        let r = a2a_retrieve(1, &bank, 3).unwrap();
        assert_eq!(r[0], (3, 1.0));
        // 4 and 5 tie at cos 45 degrees.
        assert_eq!((r[1].0, r[2].0), (4, 5));
        assert!(a2a_retrieve(1, &bank, 0).unwrap().is_empty());
        assert_eq!(a2a_retrieve(1, &bank, 10).unwrap().len(), 4);
        assert!(a2a_retrieve(9, &bank, 1).is_err());
    }
}
