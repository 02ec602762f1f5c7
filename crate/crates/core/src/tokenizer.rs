//! Base tokenization of anchor text, thresholded BPE over base-token sequences,
//! and the dual (base, extended) tokenization consumed by gated fusion.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::anchor::{CLS, PAD, SEP};
use crate::error::{Result, SarmError};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const CLS_ID: TokenId = 1;
pub const SEP_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const UNK: &str = "[UNK]";
pub const RESERVED: [&str; 4] = [PAD, CLS, SEP, UNK];
const N_RESERVED: usize = RESERVED.len();

pub const MERGES_MAGIC: &str = "SARM-MERGES v1";

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < N_RESERVED
}

/// Splits text into words: whitespace separated, with `:` and `,` detached as
/// their own words. Reserved literals pass through untouched.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if RESERVED.contains(&chunk) {
            out.push(chunk);
            continue;
        }
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if c == ':' || c == ',' {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + 1]);
                start = i + 1;
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

/// Fixed two-character pieces; an odd tail becomes a one-character piece.
pub fn word_pieces(word: &str) -> Vec<&str> {
    let idx: Vec<usize> = word.char_indices().map(|(i, _)| i).collect();
    let mut out = Vec::with_capacity(idx.len().div_ceil(2));
    let mut k = 0;
    while k < idx.len() {
        let end = idx.get(k + 2).copied().unwrap_or(word.len());
        out.push(&word[idx[k]..end]);
        k += 2;
    }
    out
}

/// Token ↔ id map over the base vocabulary. Ids 0..3 are `[PAD] [CLS] [SEP] [UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaseVocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl BaseVocab {
    /// Builds a vocabulary of at most `max_size` entries from raw text lines.
    ///
    /// Words outside the top `max_size − 4` by frequency are split into two-character
    /// pieces; the resulting units (frequent words and pieces) are ranked by
    /// frequency and the top `max_size − 4` are kept. Ties break by surface.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<BaseVocab> {
        if max_size < 8 {
            return Err(SarmError::Config(format!(
                "base vocab max_size must be at least 8, got {max_size}"
            )));
        }
        let budget = max_size - N_RESERVED;
        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for w in pre_tokenize(line.as_ref()) {
                if !RESERVED.contains(&w) {
                    *word_counts.entry(w).or_default() += 1;
                }
            }
        }
        if word_counts.is_empty() {
            return Err(SarmError::Config("base vocab corpus has no words".into()));
        }
        let frequent: HashMap<&str, u64> =
            rank(word_counts.clone()).into_iter().take(budget).collect();
        let mut unit_counts: HashMap<&str, u64> = HashMap::new();
        for (w, c) in word_counts {
            if frequent.contains_key(w) {
                *unit_counts.entry(w).or_default() += c;
            } else {
                for p in word_pieces(w) {
                    *unit_counts.entry(p).or_default() += c;
                }
            }
        }
        let units = rank(unit_counts).into_iter().take(budget).map(|(u, _)| u);
        Ok(BaseVocab::from_tokens(units))
    }

    /// Reserved tokens followed by `tokens` in order (duplicates and reserved
    /// literals skipped).
    pub fn from_tokens<I, S>(tokens: I) -> BaseVocab
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = BaseVocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(|t| t.as_ref().to_string()))
        {
            if !vocab.index.contains_key(&t) {
                vocab.index.insert(t.clone(), vocab.tokens.len() as TokenId);
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` lines.
    pub fn to_file_string(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<BaseVocab> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| {
                SarmError::Format(format!(
                    "vocab line {}: expected `token<TAB>id`",
                    lineno + 1
                ))
            })?;
            let id: usize = id.parse().map_err(|_| {
                SarmError::Format(format!("vocab line {}: bad id `{id}`", lineno + 1))
            })?;
            if id != tokens.len() {
                return Err(SarmError::Format(format!(
                    "vocab line {}: ids must be dense, expected {} got {id}",
                    lineno + 1,
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED] != RESERVED {
            return Err(SarmError::Format(
                "vocab must start with the reserved tokens".into(),
            ));
        }
        let vocab = BaseVocab::from_tokens(&tokens[N_RESERVED..]);
        if vocab.len() != tokens.len() {
            return Err(SarmError::Format("vocab contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    /// First 16 hex digits of SHA-256 over the vocab file.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Unpadded base ids of `text`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for w in pre_tokenize(text) {
            if let Some(id) = self.id(w) {
                out.push(id);
            } else {
                for p in word_pieces(w) {
                    out.push(self.id(p).unwrap_or(UNK_ID));
                }
            }
        }
        out
    }
}

fn rank(counts: HashMap<&str, u64>) -> Vec<(&str, u64)> {
    let mut v: Vec<(&str, u64)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v
}

/// Base ids truncated or right-padded with `[PAD]` to exactly `max_len`.
pub fn tokenize_base(text: &str, vocab: &BaseVocab, max_len: usize) -> Vec<TokenId> {
    let mut ids = vocab.encode(text);
    ids.resize(max_len, PAD_ID);
    ids
}

/// Base-tokenized corpus lines, tagged with the vocabulary they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub vocab_hash: String,
    pub lines: Vec<Vec<TokenId>>,
}

impl TokenizedCorpus {
    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: &BaseVocab) -> TokenizedCorpus {
        TokenizedCorpus {
            vocab_hash: vocab.content_hash(),
            lines: texts.iter().map(|t| vocab.encode(t.as_ref())).collect(),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }
}

/// One BPE merge `(left, right) → result` over extended ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: TokenId,
    pub right: TokenId,
    pub result: TokenId,
    /// Corpus pair count when the merge was created.
    pub count: u64,
}

/// Ordered merge list plus the extended vocabulary `V_llm ∪ V_new`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeTable {
    base_vocab_hash: String,
    base_len: usize,
    merges: Vec<Merge>,
    ext_tokens: Vec<String>,
    ext_index: HashMap<String, TokenId>,
}

impl MergeTable {
    pub fn empty(vocab: &BaseVocab) -> MergeTable {
        MergeTable {
            base_vocab_hash: vocab.content_hash(),
            base_len: vocab.len(),
            merges: Vec::new(),
            ext_tokens: vocab.tokens.clone(),
            ext_index: vocab.index.clone(),
        }
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn base_vocab_hash(&self) -> &str {
        &self.base_vocab_hash
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    /// Size of the extended vocabulary.
    pub fn ext_len(&self) -> usize {
        self.ext_tokens.len()
    }

    pub fn ext_token(&self, id: TokenId) -> Option<&str> {
        self.ext_tokens.get(id as usize).map(String::as_str)
    }

    pub fn ext_id(&self, token: &str) -> Option<TokenId> {
        self.ext_index.get(token).copied()
    }

    pub fn ext_index(&self) -> &HashMap<String, TokenId> {
        &self.ext_index
    }

    fn surface(&self, id: TokenId) -> &str {
        &self.ext_tokens[id as usize]
    }

    fn add_merge(&mut self, left: TokenId, right: TokenId, count: u64) -> Merge {
        let surface = format!("{}{}", self.surface(left), self.surface(right));
        let result = match self.ext_index.get(&surface) {
            Some(&id) => id,
            None => {
                let id = self.ext_tokens.len() as TokenId;
                self.ext_index.insert(surface.clone(), id);
                self.ext_tokens.push(surface);
                id
            }
        };
        let m = Merge {
            left,
            right,
            result,
            count,
        };
        self.merges.push(m);
        m
    }

    /// Recursively un-merges an extended token into base ids.
    pub fn decompose(&self, id: TokenId) -> Vec<TokenId> {
        if (id as usize) < self.base_len {
            return vec![id];
        }
        match self.merges.iter().find(|m| m.result == id) {
            Some(m) => {
                let mut out = self.decompose(m.left);
                out.extend(self.decompose(m.right));
                out
            }
            None => vec![UNK_ID],
        }
    }

    /// Header line then `t_a<TAB>t_b<TAB>u<TAB>count` per merge.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("{MERGES_MAGIC} {}\n", self.base_vocab_hash);
        for m in &self.merges {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                self.surface(m.left),
                self.surface(m.right),
                self.surface(m.result),
                m.count
            ));
        }
        out
    }

    pub fn parse(text: &str, vocab: &BaseVocab) -> Result<MergeTable> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| SarmError::Format("merge table is empty".into()))?;
        let hash = header
            .strip_prefix(MERGES_MAGIC)
            .map(str::trim)
            .ok_or_else(|| SarmError::Format(format!("bad merge table header `{header}`")))?;
        if hash != vocab.content_hash() {
            return Err(SarmError::Format(format!(
                "merge table built for vocab {hash}, current vocab is {}",
                vocab.content_hash()
            )));
        }
        let mut table = MergeTable::empty(vocab);
        for (lineno, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || SarmError::Format(format!("merge line {}: `{line}`", lineno + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let left = table.ext_id(f[0]).ok_or_else(bad)?;
            let right = table.ext_id(f[1]).ok_or_else(bad)?;
            let count = f[3].parse().map_err(|_| bad())?;
            let m = table.add_merge(left, right, count);
            if table.surface(m.result) != f[2] {
                return Err(bad());
            }
        }
        Ok(table)
    }
}

fn apply_merge(seq: &mut Vec<TokenId>, m: &Merge) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == m.left && seq[i + 1] == m.right {
            out.push(m.result);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Runs thresholded BPE from scratch.
pub fn train_bpe_merges(
    vocab: &BaseVocab,
    corpus: &TokenizedCorpus,
    threshold: u64,
    max_merges: usize,
) -> Result<MergeTable> {
    incremental_update(&MergeTable::empty(vocab), corpus, threshold, max_merges)
}

/// Applies the existing merges to `new_corpus`, then appends up to `max_new`
/// merges learned on the re-segmented corpus. Existing ids never change.
///
/// Each round re-counts adjacent pairs (never across lines or reserved tokens)
/// and merges the most frequent pair with count `>= threshold`; ties go to the
/// lexicographically smallest `(left, right)` surfaces.
pub fn incremental_update(
    merges: &MergeTable,
    new_corpus: &TokenizedCorpus,
    threshold: u64,
    max_new: usize,
) -> Result<MergeTable> {
    if threshold < 1 {
        return Err(SarmError::Config("BPE threshold must be at least 1".into()));
    }
    if new_corpus.vocab_hash != merges.base_vocab_hash {
        return Err(SarmError::Config(format!(
            "corpus tokenized with vocab {}, merge table expects {}",
            new_corpus.vocab_hash, merges.base_vocab_hash
        )));
    }
    let mut table = merges.clone();
    let mut seqs = new_corpus.lines.clone();
    for m in &table.merges {
        for s in seqs.iter_mut() {
            apply_merge(s, m);
        }
    }
    for _ in 0..max_new {
        let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                if !is_reserved(w[0]) && !is_reserved(w[1]) {
                    *counts.entry((w[0], w[1])).or_default() += 1;
                }
            }
        }
        let best =
            counts
                .into_iter()
                .filter(|&(_, c)| c >= threshold)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        (table.surface(pb.0), table.surface(pb.1))
                            .cmp(&(table.surface(pa.0), table.surface(pa.1)))
                    })
                });
        let Some(((left, right), count)) = best else {
            break;
        };
        let m = table.add_merge(left, right, count);
        for s in seqs.iter_mut() {
            apply_merge(s, &m);
        }
    }
    Ok(table)
}

/// Aligned pair of token sequences for one text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualTokenization {
    /// Base ids, exactly `max_len` long.
    pub base_seq: Vec<TokenId>,
    /// Extended ids after applying merges (padding kept as `[PAD]` entries).
    pub ext_seq: Vec<TokenId>,
    /// Extended id covering each base position.
    pub align: Vec<TokenId>,
    /// `[start, end)` base span of each `ext_seq` entry.
    pub spans: Vec<(usize, usize)>,
}

impl DualTokenization {
    pub fn len(&self) -> usize {
        self.base_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_seq.is_empty()
    }

    /// Pad mask over base positions (`true` = padding).
    pub fn pad_mask(&self) -> Vec<bool> {
        self.base_seq.iter().map(|&t| t == PAD_ID).collect()
    }

    /// Number of positions before the trailing padding run.
    pub fn content_len(&self) -> usize {
        self.base_seq
            .iter()
            .rposition(|&t| t != PAD_ID)
            .map_or(0, |p| p + 1)
    }
}

pub fn tokenize_dual(
    text: &str,
    vocab: &BaseVocab,
    merges: &MergeTable,
    max_len: usize,
) -> DualTokenization {
    let base_seq = tokenize_base(text, vocab, max_len);
    let mut segs: Vec<(TokenId, usize, usize)> = base_seq
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i, i + 1))
        .collect();
    for m in merges.merges() {
        let mut out = Vec::with_capacity(segs.len());
        let mut i = 0;
        while i < segs.len() {
            if i + 1 < segs.len() && segs[i].0 == m.left && segs[i + 1].0 == m.right {
                out.push((m.result, segs[i].1, segs[i + 1].2));
                i += 2;
            } else {
                out.push(segs[i]);
                i += 1;
            }
        }
        segs = out;
    }
    let mut align = vec![PAD_ID; base_seq.len()];
    for &(id, s, e) in &segs {
        align[s..e].iter_mut().for_each(|a| *a = id);
    }
    DualTokenization {
        base_seq,
        ext_seq: segs.iter().map(|s| s.0).collect(),
        align,
        spans: segs.iter().map(|s| (s.1, s.2)).collect(),
    }
}

/// Vocabulary, merges and sequence length used together at encode time.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub vocab: BaseVocab,
    pub merges: MergeTable,
    pub max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: BaseVocab, merges: MergeTable, max_len: usize) -> Result<Tokenizer> {
        if merges.base_vocab_hash() != vocab.content_hash() {
            return Err(SarmError::Config("merge table does not match vocab".into()));
        }
        if max_len == 0 {
            return Err(SarmError::Config("max_len must be positive".into()));
        }
        Ok(Tokenizer {
            vocab,
            merges,
            max_len,
        })
    }

    /// Builds vocab and merges from anchor texts.
    pub fn train<S: AsRef<str>>(
        corpus: &[S],
        vocab_size: usize,
        threshold: u64,
        max_merges: usize,
        max_len: usize,
    ) -> Result<Tokenizer> {
        let vocab = BaseVocab::build(corpus, vocab_size)?;
        let tc = TokenizedCorpus::from_texts(corpus, &vocab);
        let merges = train_bpe_merges(&vocab, &tc, threshold, max_merges)?;
        Tokenizer::new(vocab, merges, max_len)
    }

    pub fn dual(&self, text: &str) -> DualTokenization {
        crate::instrument::count_tokenization();
        tokenize_dual(text, &self.vocab, &self.merges, self.max_len)
    }

    /// Surface of a base id (for attribution output).
    pub fn base_surface(&self, id: TokenId) -> &str {
        self.vocab.token(id).unwrap_or(UNK)
    }

    pub fn ext_len(&self) -> usize {
        self.merges.ext_len()
    }

    /// Writes `vocab.tsv` and `merges.txt` into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("vocab.tsv"), self.vocab.to_file_string())?;
        std::fs::write(dir.join("merges.txt"), self.merges.to_file_string())?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, max_len: usize) -> Result<Tokenizer> {
        let vocab = BaseVocab::parse(&crate::data::read_file(&dir.join("vocab.tsv"))?)?;
        let merges = MergeTable::parse(&crate::data::read_file(&dir.join("merges.txt"))?, &vocab)?;
        Tokenizer::new(vocab, merges, max_len)
    }
}
