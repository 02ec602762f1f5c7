//! Semantic anchors: the six-dimension author description, its delimited text
//! form, and a synthetic generator with a recoverable latent topic.

use std::collections::HashMap;
use std::fmt;

use rand::Rng as _;

use crate::error::{Result, SarmError};
use crate::numerics::Rng;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";

/// Anchor dimensions in their fixed textual order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    Poi,
    Theme,
    Topic,
    TargetAudience,
    Format,
    Scene,
}

impl Dimension {
    pub const ALL: [Dimension; 6] = [
        Dimension::Poi,
        Dimension::Theme,
        Dimension::Topic,
        Dimension::TargetAudience,
        Dimension::Format,
        Dimension::Scene,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Dimension::Poi => "POI",
            Dimension::Theme => "Theme",
            Dimension::Topic => "Topic",
            Dimension::TargetAudience => "Target audience",
            Dimension::Format => "Format",
            Dimension::Scene => "Scene",
        }
    }

    pub fn from_label(label: &str) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|d| d.label() == label)
    }

    /// Maximum number of phrases, if capped.
    pub fn cap(self) -> Option<usize> {
        match self {
            Dimension::Poi => Some(3),
            Dimension::Theme => Some(1),
            Dimension::Topic | Dimension::TargetAudience => Some(2),
            Dimension::Format | Dimension::Scene => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SemanticAnchor {
    pub poi: Vec<String>,
    pub theme: Vec<String>,
    pub topic: Vec<String>,
    pub target_audience: Vec<String>,
    pub format: Vec<String>,
    pub scene: Vec<String>,
}

impl SemanticAnchor {
    pub fn phrases(&self, dim: Dimension) -> &[String] {
        match dim {
            Dimension::Poi => &self.poi,
            Dimension::Theme => &self.theme,
            Dimension::Topic => &self.topic,
            Dimension::TargetAudience => &self.target_audience,
            Dimension::Format => &self.format,
            Dimension::Scene => &self.scene,
        }
    }

    pub fn phrases_mut(&mut self, dim: Dimension) -> &mut Vec<String> {
        match dim {
            Dimension::Poi => &mut self.poi,
            Dimension::Theme => &mut self.theme,
            Dimension::Topic => &mut self.topic,
            Dimension::TargetAudience => &mut self.target_audience,
            Dimension::Format => &mut self.format,
            Dimension::Scene => &mut self.scene,
        }
    }

    /// Trims and collapses whitespace in every phrase and drops repeats within a
    /// dimension, keeping first occurrences.
    pub fn canonical(&self) -> SemanticAnchor {
        let mut out = SemanticAnchor::default();
        for dim in Dimension::ALL {
            let dst = out.phrases_mut(dim);
            for p in self.phrases(dim) {
                let p = collapse_ws(p);
                if !dst.contains(&p) {
                    dst.push(p);
                }
            }
        }
        out
    }

    /// Checks phrase content and cardinality caps.
    pub fn validate(&self) -> Result<()> {
        for dim in Dimension::ALL {
            let phrases = self.phrases(dim);
            if let Some(cap) = dim.cap() {
                if phrases.len() > cap {
                    return Err(SarmError::Format(format!(
                        "{dim} has {} phrases, cap is {cap}",
                        phrases.len()
                    )));
                }
            }
            for p in phrases {
                validate_phrase(p)
                    .map_err(|reason| SarmError::Format(format!("{dim} phrase `{p}`: {reason}")))?;
            }
        }
        Ok(())
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn validate_phrase(p: &str) -> std::result::Result<(), &'static str> {
    if p.trim().is_empty() {
        return Err("empty phrase");
    }
    if [CLS, SEP, PAD].iter().any(|t| p.contains(t)) {
        return Err("contains a delimiter token");
    }
    if p.contains(", ") || p.trim_end().ends_with(',') {
        return Err("contains the phrase separator");
    }
    if p.contains('\n') || p.contains('\t') {
        return Err("contains a line or field separator");
    }
    Ok(())
}

/// `[CLS] POI: p1, p2 [SEP] Theme: ... [SEP] Scene: p1, p2`
pub fn render_anchor(anchor: &SemanticAnchor) -> Result<String> {
    anchor.validate()?;
    let mut out = String::from(CLS);
    for (i, dim) in Dimension::ALL.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
            out.push_str(SEP);
        }
        out.push(' ');
        out.push_str(dim.label());
        out.push(':');
        let phrases = anchor.phrases(dim);
        if !phrases.is_empty() {
            out.push(' ');
            out.push_str(&phrases.join(", "));
        }
    }
    Ok(out)
}

/// Inverse of [`render_anchor`]; tolerates trailing `[PAD]` runs and returns the
/// canonical anchor.
pub fn parse_anchor(text: &str) -> Result<SemanticAnchor> {
    let trimmed = text.trim();
    let body = trimmed
        .strip_prefix(CLS)
        .ok_or_else(|| SarmError::parse(head(trimmed), "missing [CLS] prefix"))?;
    let mut body = body.trim_end();
    while let Some(rest) = body.strip_suffix(PAD) {
        body = rest.trim_end();
    }
    let segments: Vec<&str> = body.split(SEP).collect();
    let mut anchor = SemanticAnchor::default();
    for (i, raw) in segments.iter().enumerate() {
        let seg = raw.trim();
        let (label, rest) = seg
            .split_once(':')
            .ok_or_else(|| SarmError::parse(seg, "segment has no `label:`"))?;
        let dim = Dimension::from_label(label.trim())
            .ok_or_else(|| SarmError::parse(seg, format!("unknown dimension label `{label}`")))?;
        match Dimension::ALL.get(i) {
            Some(&want) if want == dim => {}
            Some(&want) => {
                return Err(SarmError::parse(
                    seg,
                    format!("dimension out of order: expected `{want}`, found `{dim}`"),
                ))
            }
            None => return Err(SarmError::parse(seg, "more than six dimensions")),
        }
        let rest = rest.trim();
        if rest.is_empty() {
            continue;
        }
        let dst = anchor.phrases_mut(dim);
        for p in rest.split(", ") {
            validate_phrase(p).map_err(|r| SarmError::parse(seg, r))?;
            dst.push(p.to_string());
        }
    }
    if segments.len() < Dimension::ALL.len() {
        let missing = Dimension::ALL[segments.len()];
        return Err(SarmError::parse(
            head(trimmed),
            format!("missing dimension `{missing}`"),
        ));
    }
    let anchor = anchor.canonical();
    anchor
        .validate()
        .map_err(|e| SarmError::parse(head(trimmed), e.to_string()))?;
    Ok(anchor)
}

fn head(s: &str) -> String {
    s.chars().take(40).collect()
}

/// A synthetic author; `popularity` drives exposure, `debut` is the fraction of
/// the impression stream after which the author starts appearing.
#[derive(Clone, Debug, PartialEq)]
pub struct AuthorProfile {
    pub author_id: u64,
    pub latent_topic: usize,
    pub popularity: f64,
    pub identity_bias: f64,
    pub debut: f64,
}

/// Phrases per `(topic, dimension)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseBank {
    n_topics: usize,
    /// `cells[topic][dimension]`
    cells: Vec<[Vec<String>; 6]>,
}

/// Minimum phrases per cell.
pub const MIN_CELL_PHRASES: usize = 5;

const DEFAULT_BANK: &str = include_str!("../data/phrase_bank.tsv");

impl PhraseBank {
    /// The bundled English bank (8 topics).
    pub fn builtin() -> PhraseBank {
        PhraseBank::parse(DEFAULT_BANK).expect("bundled phrase bank is valid")
    }

    /// Parses `topic<TAB>dimension<TAB>phrase` lines; blank lines and `#`
    /// comments are skipped. Topics must be dense `0..T`.
    pub fn parse(text: &str) -> Result<PhraseBank> {
        let mut cells: Vec<[Vec<String>; 6]> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(t), Some(d), Some(p), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(SarmError::Format(format!(
                    "phrase bank line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            };
            let topic: usize = t.trim().parse().map_err(|_| {
                SarmError::Format(format!("phrase bank line {}: bad topic `{t}`", lineno + 1))
            })?;
            let dim = Dimension::from_label(d.trim()).ok_or_else(|| {
                SarmError::Format(format!(
                    "phrase bank line {}: bad dimension `{d}`",
                    lineno + 1
                ))
            })?;
            let phrase = collapse_ws(p);
            validate_phrase(&phrase)
                .map_err(|r| SarmError::Format(format!("phrase bank line {}: {r}", lineno + 1)))?;
            if cells.len() <= topic {
                cells.resize_with(topic + 1, Default::default);
            }
            let cell = &mut cells[topic][dim.index()];
            if !cell.contains(&phrase) {
                cell.push(phrase);
            }
        }
        let bank = PhraseBank {
            n_topics: cells.len(),
            cells,
        };
        bank.check()?;
        Ok(bank)
    }

    /// Every cell must hold at least [`MIN_CELL_PHRASES`] phrases.
    pub fn check(&self) -> Result<()> {
        if self.n_topics < 2 {
            return Err(SarmError::Config(format!(
                "phrase bank needs at least 2 topics, has {}",
                self.n_topics
            )));
        }
        for (t, row) in self.cells.iter().enumerate() {
            for dim in Dimension::ALL {
                let n = row[dim.index()].len();
                if n < MIN_CELL_PHRASES {
                    return Err(SarmError::Config(format!(
                        "phrase bank cell (topic {t}, {dim}) has {n} phrases, needs {MIN_CELL_PHRASES}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_topics(&self) -> usize {
        self.n_topics
    }

    pub fn cell(&self, topic: usize, dim: Dimension) -> &[String] {
        &self.cells[topic][dim.index()]
    }

    /// Keeps only the first `n` topics.
    pub fn truncated(&self, n: usize) -> Result<PhraseBank> {
        if n > self.n_topics {
            return Err(SarmError::Config(format!(
                "phrase bank has {} topics, {n} requested",
                self.n_topics
            )));
        }
        let bank = PhraseBank {
            n_topics: n,
            cells: self.cells[..n].to_vec(),
        };
        bank.check()?;
        Ok(bank)
    }

    /// `phrase → topic` for every phrase in the bank (first cell wins).
    pub fn provenance(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (t, row) in self.cells.iter().enumerate() {
            for cell in row {
                for p in cell {
                    map.entry(p.as_str()).or_insert(t);
                }
            }
        }
        map
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (t, row) in self.cells.iter().enumerate() {
            for dim in Dimension::ALL {
                for p in &row[dim.index()] {
                    out.push_str(&format!("{t}\t{}\t{p}\n", dim.label()));
                }
            }
        }
        out
    }
}

/// Phrase count range per dimension used by the generator.
fn phrase_count_range(dim: Dimension) -> (usize, usize) {
    match dim {
        Dimension::Poi => (1, 3),
        Dimension::Theme => (1, 1),
        _ => (1, 2),
    }
}

/// Samples an anchor for `profile`: each phrase comes from the author's own
/// topic cell with probability `p_topic`, otherwise from a uniformly chosen
/// other topic. Phrases within a dimension are drawn without replacement.
pub fn synth_anchor(
    profile: &AuthorProfile,
    bank: &PhraseBank,
    p_topic: f64,
    seed: u64,
) -> Result<SemanticAnchor> {
    bank.check()?;
    if profile.latent_topic >= bank.n_topics() {
        return Err(SarmError::Config(format!(
            "author topic {} outside phrase bank ({} topics)",
            profile.latent_topic,
            bank.n_topics()
        )));
    }
    if !(0.0..=1.0).contains(&p_topic) {
        return Err(SarmError::Config(format!(
            "p_topic {p_topic} outside [0, 1]"
        )));
    }
    let mut rng = Rng::new(seed);
    let own = profile.latent_topic;
    let t = bank.n_topics();
    let mut anchor = SemanticAnchor::default();
    for dim in Dimension::ALL {
        let (lo, hi) = phrase_count_range(dim);
        let k = rng.random_range(lo..=hi);
        let dst = anchor.phrases_mut(dim);
        for _ in 0..k {
            let topic = if rng.uniform() < p_topic {
                own
            } else {
                let o = rng.random_range(0..t - 1);
                if o >= own {
                    o + 1
                } else {
                    o
                }
            };
            let free: Vec<&String> = bank
                .cell(topic, dim)
                .iter()
                .filter(|p| !dst.contains(p))
                .collect();
            let pick = free[rng.random_range(0..free.len())].clone();
            dst.push(pick);
        }
    }
    Ok(anchor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn street_food() -> SemanticAnchor {
        SemanticAnchor {
            poi: vec!["street food".into()],
            theme: vec!["night market tour".into()],
            ..Default::default()
        }
    }

    #[test]
    fn render_two_dimensions() {
        assert_eq!(
            render_anchor(&street_food()).unwrap(),
            "[CLS] POI: street food [SEP] Theme: night market tour [SEP] Topic: [SEP] \
             Target audience: [SEP] Format: [SEP] Scene:"
        );
    }

    #[test]
    fn render_empty() {
        assert_eq!(
            render_anchor(&SemanticAnchor::default()).unwrap(),
            "[CLS] POI: [SEP] Theme: [SEP] Topic: [SEP] Target audience: [SEP] Format: [SEP] Scene:"
        );
    }

    #[test]
    fn render_rejects_delimiters_and_caps() {
        let mut a = street_food();
        a.scene.push("studio [SEP] live".into());
        assert!(matches!(render_anchor(&a), Err(SarmError::Format(_))));
        let mut b = street_food();
        b.theme.push("second theme".into());
        assert!(matches!(render_anchor(&b), Err(SarmError::Format(_))));
    }

    #[test]
    fn parse_inverts_render() {
        let text = render_anchor(&street_food()).unwrap();
        assert_eq!(parse_anchor(&text).unwrap(), street_food());
    }

    #[test]
    fn parse_with_padding() {
        let a = parse_anchor(
            "[CLS] POI: a, b [SEP] Theme: t [SEP] Topic: [SEP] Target audience: [SEP] \
             Format: live [SEP] Scene: home [PAD] [PAD]",
        )
        .unwrap();
        assert_eq!(
            a,
            SemanticAnchor {
                poi: vec!["a".into(), "b".into()],
                theme: vec!["t".into()],
                format: vec!["live".into()],
                scene: vec!["home".into()],
                ..Default::default()
            }
        );
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_anchor("POI: a"),
            Err(SarmError::Parse { .. })
        ));
        let unknown = "[CLS] POI: a [SEP] Mood: x [SEP] Topic: [SEP] Target audience: [SEP] Format: [SEP] Scene:";
        match parse_anchor(unknown) {
            Err(SarmError::Parse { segment, .. }) => assert_eq!(segment, "Mood: x"),
            other => panic!("{other:?}"),
        }
        let swapped = "[CLS] Theme: t [SEP] POI: a [SEP] Topic: [SEP] Target audience: [SEP] Format: [SEP] Scene:";
        match parse_anchor(swapped) {
            Err(SarmError::Parse { segment, reason }) => {
                assert_eq!(segment, "Theme: t");
                assert!(reason.contains("out of order"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_anchor("[CLS] POI: a [SEP] Theme: t").is_err());
    }

    #[test]
    fn canonical_dedupes_and_collapses() {
        let a = SemanticAnchor {
            poi: vec![
                "street  food".into(),
                " street food".into(),
                "noodles".into(),
            ],
            ..Default::default()
        };
        assert_eq!(a.canonical().poi, vec!["street food", "noodles"]);
    }

    #[test]
    fn builtin_bank_is_complete() {
        let bank = PhraseBank::builtin();
        assert_eq!(bank.n_topics(), 8);
        // Phrases are unique across cells so provenance is unambiguous.
        let total: usize = (0..8)
            .flat_map(|t| Dimension::ALL.map(|d| bank.cell(t, d).len()))
            .sum();
        assert_eq!(bank.provenance().len(), total);
        assert_eq!(PhraseBank::parse(&bank.to_tsv()).unwrap(), bank);
    }

    #[test]
    fn bank_missing_cell_is_config_error() {
        let bank = PhraseBank::builtin();
        let tsv: String = bank
            .to_tsv()
            .lines()
            .filter(|l| !l.starts_with("3\tScene\t"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(PhraseBank::parse(&tsv), Err(SarmError::Config(_))));
    }

    fn profile(topic: usize) -> AuthorProfile {
        AuthorProfile {
            author_id: 1,
            latent_topic: topic,
            popularity: 1.0,
            identity_bias: 0.0,
            debut: 0.0,
        }
    }

    #[test]
    fn synth_pure_topic() {
        let bank = PhraseBank::builtin();
        let prov = bank.provenance();
        for seed in 0..50 {
            let a = synth_anchor(&profile(0), &bank, 1.0, seed).unwrap();
            for dim in Dimension::ALL {
                for p in a.phrases(dim) {
                    assert_eq!(prov[p.as_str()], 0);
                }
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let bank = PhraseBank::builtin();
        let a = synth_anchor(&profile(3), &bank, 0.9, 77).unwrap();
        let b = synth_anchor(&profile(3), &bank, 0.9, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_topic_fraction() {
        let bank = PhraseBank::builtin();
        let prov = bank.provenance();
        let (mut own, mut total) = (0usize, 0usize);
        for i in 0..10_000u64 {
            let topic = (i % 8) as usize;
            let a = synth_anchor(&profile(topic), &bank, 0.9, 1000 + i).unwrap();
            for dim in Dimension::ALL {
                for p in a.phrases(dim) {
                    total += 1;
                    own += usize::from(prov[p.as_str()] == topic);
                }
            }
        }
        let frac = own as f64 / total as f64;
        assert!((0.88..=0.92).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn majority_vote_recovers_topic() {
        let bank = PhraseBank::builtin();
        let prov = bank.provenance();
        let mut rng = crate::numerics::Rng::new(5);
        let mut correct = 0;
        for i in 0..1000u64 {
            let topic = rng.random_range(0..8);
            let a = synth_anchor(&profile(topic), &bank, 0.9, i).unwrap();
            a.validate().unwrap();
            let mut votes = [0usize; 8];
            for dim in Dimension::ALL {
                for p in a.phrases(dim) {
                    votes[prov[p.as_str()]] += 1;
                }
            }
            let best = (0..8)
                .max_by_key(|&t| (votes[t], std::cmp::Reverse(t)))
                .unwrap();
            correct += usize::from(best == topic);
        }
        assert!(correct >= 950, "accuracy {correct}/1000");
    }

    #[test]
    fn synth_rejects_short_cells() {
        let mut bank = PhraseBank::builtin();
        bank.cells[2][Dimension::Format.index()].truncate(2);
        assert!(matches!(
            synth_anchor(&profile(0), &bank, 0.9, 1),
            Err(SarmError::Config(_))
        ));
    }

    fn phrase() -> impl Strategy<Value = String> {
        "[a-zA-Z]{1,8}( [a-zA-Z]{1,8}){0,2}"
    }

    fn anchor_strategy() -> impl Strategy<Value = SemanticAnchor> {
        let v = |n: usize| proptest::collection::vec(phrase(), 0..=n);
        (v(3), v(1), v(2), v(2), v(4), v(4)).prop_map(|(poi, theme, topic, ta, format, scene)| {
            SemanticAnchor {
                poi,
                theme,
                topic,
                target_audience: ta,
                format,
                scene,
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn render_parse_round_trip(a in anchor_strategy()) {
            let text = render_anchor(&a).unwrap();
            prop_assert_eq!(parse_anchor(&text).unwrap(), a.canonical());
        }
    }
}
