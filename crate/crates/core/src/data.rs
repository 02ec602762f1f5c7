//! Synthetic world (users, authors, anchors) and a chronologically ordered
//! impression stream whose labels depend on the author's latent topic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Gamma, LogNormal, Normal};

use crate::anchor::{render_anchor, synth_anchor, AuthorProfile, PhraseBank, SemanticAnchor};
use crate::model::N_TASKS;
use crate::numerics::{sigmoid, Rng};
use crate::{Result, SarmError};

/// Click logit weights: `w_aff·affinity[topic] + w_bias·identity_bias + w_noise·<c, z> + bias`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClickModel {
    pub w_aff: f64,
    pub w_bias: f64,
    pub w_noise: f64,
    pub bias: f64,
}

impl Default for ClickModel {
    fn default() -> Self {
        ClickModel {
            w_aff: 12.0,
            w_bias: 1.0,
            w_noise: 0.5,
            bias: -4.0,
        }
    }
}

/// Post-click logits for wtr, lvtr, gtr as `(affinity weight, identity weight, offset)`.
pub const ENGAGEMENT: [(f64, f64, f64); 3] = [(5.0, 1.0, -3.0), (6.0, 0.5, -1.0), (4.0, 1.0, -4.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_authors: usize,
    pub n_topics: usize,
    pub zipf_s: f64,
    /// Probability that an anchor phrase comes from the author's own topic.
    pub p_topic: f64,
    /// Fraction of authors that debut late in the stream.
    pub cold_frac: f64,
    /// Earliest debut (fraction of the stream) of the late cohort.
    pub cold_start: f64,
    /// Dirichlet concentration per topic (times `n_topics`).
    pub affinity_concentration: f64,
    /// Log-scale spread of the topic base measure.
    pub topic_skew: f64,
    pub bias_std: f64,
    pub activity_sigma: f64,
    pub history_len: usize,
    pub d_rank: usize,
    pub click: ClickModel,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 2000,
            n_authors: 500,
            n_topics: 8,
            zipf_s: 1.1,
            p_topic: 0.9,
            cold_frac: 0.1,
            cold_start: 0.85,
            affinity_concentration: 0.3,
            topic_skew: 1.0,
            bias_std: 0.5,
            activity_sigma: 0.5,
            history_len: 8,
            d_rank: 8,
            click: ClickModel::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self, bank: &PhraseBank) -> Result<()> {
        let bad = |m: String| Err(SarmError::Config(m));
        if self.n_topics < 2 {
            return bad(format!(
                "n_topics must be at least 2, got {}",
                self.n_topics
            ));
        }
        if self.n_topics > bank.n_topics() {
            return bad(format!(
                "n_topics {} exceeds the phrase bank's {} topics",
                self.n_topics,
                bank.n_topics()
            ));
        }
        if self.n_users == 0 || self.n_authors == 0 {
            return bad("world needs at least one user and one author".into());
        }
        if self.d_rank < 2 {
            return bad(format!("d_rank must be at least 2, got {}", self.d_rank));
        }
        if !(self.zipf_s > 0.0) {
            return bad(format!("zipf_s must be positive, got {}", self.zipf_s));
        }
        if !(0.0..1.0).contains(&self.cold_frac) || !(0.0..1.0).contains(&self.cold_start) {
            return bad("cold_frac and cold_start must lie in [0, 1)".into());
        }
        if !(self.affinity_concentration > 0.0)
            || !(self.bias_std >= 0.0)
            || !(self.activity_sigma >= 0.0)
        {
            return bad("affinity_concentration must be positive, spreads non-negative".into());
        }
        Ok(())
    }

    pub fn n_cold(&self) -> usize {
        ((self.cold_frac * self.n_authors as f64).round() as usize).min(self.n_authors - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    pub topic_affinity: Vec<f64>,
    pub activity: f64,
}

#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    pub users: Vec<UserProfile>,
    /// Author ids are `1..=n_authors`, stored in id order.
    pub authors: Vec<AuthorProfile>,
    pub anchors: Vec<SemanticAnchor>,
    pub anchor_texts: Vec<String>,
    pub phrase_bank: PhraseBank,
    /// Unit direction `c` turning the h_rank noise features into a click term.
    pub noise_dir: Vec<f64>,
}

/// Normalised Zipf weights `k^-s` for ranks `1..=n`.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn gen_world(cfg: &WorldConfig, bank: &PhraseBank, seed: u64) -> Result<World> {
    cfg.validate(bank)?;
    let t = cfg.n_topics;

    let mut rng = Rng::derived(seed, "topics");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let base: Vec<f64> = (0..t)
        .map(|_| (cfg.topic_skew * normal.sample(&mut rng)).exp())
        .collect();
    let base_total: f64 = base.iter().sum();

    let mut rng = Rng::derived(seed, "users");
    let activity =
        LogNormal::new(0.0, cfg.activity_sigma).map_err(|e| SarmError::Config(e.to_string()))?;
    let gammas: Vec<Gamma<f64>> = base
        .iter()
        .map(|b| Gamma::new(cfg.affinity_concentration * t as f64 * b / base_total, 1.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| SarmError::Config(e.to_string()))?;
    let users = (0..cfg.n_users)
        .map(|u| {
            let mut aff: Vec<f64> = gammas.iter().map(|g| g.sample(&mut rng)).collect();
            let s: f64 = aff.iter().sum();
            if s > 0.0 && s.is_finite() {
                aff.iter_mut().for_each(|a| *a /= s);
            } else {
                aff = vec![1.0 / t as f64; t];
            }
            UserProfile {
                user_id: u as u64 + 1,
                topic_affinity: aff,
                activity: activity.sample(&mut rng),
            }
        })
        .collect();

    let mut rng = Rng::derived(seed, "authors");
    let zipf = zipf_weights(cfg.n_authors, cfg.zipf_s);
    let mut ranks: Vec<usize> = (0..cfg.n_authors).collect();
    ranks.shuffle(&mut rng);
    let mut cold: Vec<usize> = (0..cfg.n_authors).collect();
    cold.shuffle(&mut rng);
    cold.truncate(cfg.n_cold());
    let mut debut = vec![0.0; cfg.n_authors];
    for &a in &cold {
        debut[a] = cfg.cold_start + (1.0 - cfg.cold_start) * rng.uniform();
    }
    let bias = Normal::new(0.0, cfg.bias_std).map_err(|e| SarmError::Config(e.to_string()))?;
    let authors: Vec<AuthorProfile> = (0..cfg.n_authors)
        .map(|a| AuthorProfile {
            author_id: a as u64 + 1,
            latent_topic: rng.random_range(0..t),
            popularity: zipf[ranks[a]],
            identity_bias: bias.sample(&mut rng),
            debut: debut[a],
        })
        .collect();

    let anchors = authors
        .iter()
        .map(|p| {
            synth_anchor(
                p,
                bank,
                cfg.p_topic,
                seed ^ p.author_id.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let anchor_texts = anchors
        .iter()
        .map(render_anchor)
        .collect::<Result<Vec<_>>>()?;

    let mut rng = Rng::derived(seed, "noise_dir");
    let mut noise_dir: Vec<f64> = (0..cfg.d_rank - 2)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let norm = noise_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        noise_dir.iter_mut().for_each(|x| *x /= norm);
    }

    Ok(World {
        cfg: cfg.clone(),
        users,
        authors,
        anchors,
        anchor_texts,
        phrase_bank: bank.clone(),
        noise_dir,
    })
}

impl World {
    pub fn author(&self, author_id: u64) -> Option<&AuthorProfile> {
        let i = author_id.checked_sub(1)? as usize;
        self.authors.get(i)
    }

    pub fn user(&self, user_id: u64) -> Option<&UserProfile> {
        let i = user_id.checked_sub(1)? as usize;
        self.users.get(i)
    }

    pub fn anchor_text(&self, author_id: u64) -> Option<&str> {
        let i = author_id.checked_sub(1)? as usize;
        self.anchor_texts.get(i).map(String::as_str)
    }

    /// Click logit for a `(user, author)` pair with noise term `<c, z>`.
    pub fn click_logit(&self, user: &UserProfile, author: &AuthorProfile, noise: f64) -> f64 {
        let c = &self.cfg.click;
        c.w_aff * user.topic_affinity[author.latent_topic]
            + c.w_bias * author.identity_bias
            + c.w_noise * noise
            + c.bias
    }

    /// Click probability with the user marginalised out (users weighted by
    /// activity): the best any scorer blind to user interests can do.
    pub fn id_only_probability(&self, author: &AuthorProfile, noise: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for u in &self.users {
            num += u.activity * sigmoid(self.click_logit(u, author, noise));
            den += u.activity;
        }
        num / den
    }

    /// Writes `users.tsv`, `authors.tsv`, `anchors.txt`, `phrase_bank.tsv` and `noise_dir.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut users = String::new();
        for u in &self.users {
            let aff: Vec<String> = u.topic_affinity.iter().map(|a| a.to_string()).collect();
            writeln!(users, "{}\t{}\t{}", u.user_id, u.activity, aff.join(",")).unwrap();
        }
        fs::write(dir.join("users.tsv"), users)?;
        let mut authors = String::new();
        for a in &self.authors {
            writeln!(
                authors,
                "{}\t{}\t{}\t{}\t{}",
                a.author_id, a.latent_topic, a.popularity, a.identity_bias, a.debut
            )
            .unwrap();
        }
        fs::write(dir.join("authors.tsv"), authors)?;
        let mut anchors = String::new();
        for t in &self.anchor_texts {
            anchors.push_str(t);
            anchors.push('\n');
        }
        fs::write(dir.join("anchors.txt"), anchors)?;
        fs::write(dir.join("phrase_bank.tsv"), self.phrase_bank.to_tsv())?;
        let dirs: Vec<String> = self.noise_dir.iter().map(|x| x.to_string()).collect();
        fs::write(dir.join("noise_dir.txt"), dirs.join(",") + "\n")?;
        Ok(())
    }

    /// Reads a world written by [`World::save`]; `cfg` must describe it.
    pub fn load(dir: &Path, cfg: &WorldConfig) -> Result<World> {
        let phrase_bank = PhraseBank::parse(&read_file(&dir.join("phrase_bank.tsv"))?)?;
        cfg.validate(&phrase_bank)?;
        let users_txt = read_file(&dir.join("users.tsv"))?;
        let mut users = Vec::new();
        for (i, line) in users_txt.lines().enumerate() {
            let seg = format!("users.tsv line {}", i + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(SarmError::parse(
                    seg,
                    format!("expected 3 fields, got {}", f.len()),
                ));
            }
            let topic_affinity = parse_list::<f64>(f[2], &seg)?;
            if topic_affinity.len() != cfg.n_topics {
                return Err(SarmError::parse(
                    seg,
                    "affinity length differs from n_topics",
                ));
            }
            users.push(UserProfile {
                user_id: parse_field(f[0], &seg)?,
                activity: parse_field(f[1], &seg)?,
                topic_affinity,
            });
        }
        let authors_txt = read_file(&dir.join("authors.tsv"))?;
        let mut authors = Vec::new();
        for (i, line) in authors_txt.lines().enumerate() {
            let seg = format!("authors.tsv line {}", i + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(SarmError::parse(
                    seg,
                    format!("expected 5 fields, got {}", f.len()),
                ));
            }
            let a = AuthorProfile {
                author_id: parse_field(f[0], &seg)?,
                latent_topic: parse_field(f[1], &seg)?,
                popularity: parse_field(f[2], &seg)?,
                identity_bias: parse_field(f[3], &seg)?,
                debut: parse_field(f[4], &seg)?,
            };
            if a.author_id != i as u64 + 1 || a.latent_topic >= cfg.n_topics {
                return Err(SarmError::parse(
                    seg,
                    "author ids must be 1..n in order with topics < n_topics",
                ));
            }
            authors.push(a);
        }
        let anchor_texts: Vec<String> = read_file(&dir.join("anchors.txt"))?
            .lines()
            .map(str::to_string)
            .collect();
        if anchor_texts.len() != authors.len() {
            return Err(SarmError::Format(format!(
                "anchors.txt has {} lines for {} authors",
                anchor_texts.len(),
                authors.len()
            )));
        }
        let anchors = anchor_texts
            .iter()
            .map(|t| crate::anchor::parse_anchor(t))
            .collect::<Result<Vec<_>>>()?;
        let noise_txt = read_file(&dir.join("noise_dir.txt"))?;
        let noise_dir = parse_list::<f64>(noise_txt.trim_end(), "noise_dir.txt")?;
        if users.len() != cfg.n_users
            || authors.len() != cfg.n_authors
            || noise_dir.len() != cfg.d_rank - 2
        {
            return Err(SarmError::Config(
                "world files do not match the configured sizes".into(),
            ));
        }
        Ok(World {
            cfg: cfg.clone(),
            users,
            authors,
            anchors,
            anchor_texts,
            phrase_bank,
            noise_dir,
        })
    }
}

pub fn read_file(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(SarmError::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, seg: &str) -> Result<T> {
    s.parse()
        .map_err(|_| SarmError::parse(seg, format!("cannot parse `{s}`")))
}

fn parse_list<T: std::str::FromStr>(s: &str, seg: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| parse_field(x, seg)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionEvent {
    pub user_id: u64,
    pub author_id: u64,
    /// The user's most recent long-view authors before this event, oldest first.
    pub history: Vec<u64>,
    pub h_rank: Vec<f32>,
    /// ctr, wtr, lvtr, gtr
    pub labels: [bool; N_TASKS],
    pub timestamp: u64,
}

/// Generated events plus the ground truth behind them.
#[derive(Clone, Debug, Default)]
pub struct Stream {
    pub events: Vec<InteractionEvent>,
    pub p_click: Vec<f64>,
    /// The noise term `<c, z>` entering each click logit.
    pub noise: Vec<f64>,
}

/// Per event: user drawn by activity, author by popularity among authors that
/// have debuted, click from the click model, engagement labels only after a
/// click. `h_rank = [ln(popularity·n_authors), ln(activity), z...]` with
/// `z ~ N(0, I)`.
pub fn gen_stream(world: &World, seed: u64, n_events: usize) -> Result<Stream> {
    let cfg = &world.cfg;
    let mut rng = Rng::derived(seed, "stream");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let user_pick = WeightedIndex::new(world.users.iter().map(|u| u.activity))
        .map_err(|e| SarmError::Config(format!("user activity weights: {e}")))?;

    let mut pending: Vec<usize> = (0..world.authors.len())
        .filter(|&a| world.authors[a].debut > 0.0)
        .collect();
    pending.sort_by(|&a, &b| {
        world.authors[a]
            .debut
            .total_cmp(&world.authors[b].debut)
            .then(a.cmp(&b))
    });
    let mut next = 0;
    let mut active: Vec<bool> = world.authors.iter().map(|a| a.debut <= 0.0).collect();
    let author_weights = |active: &[bool]| {
        WeightedIndex::new(world.authors.iter().zip(active).map(|(a, &on)| {
            if on {
                a.popularity
            } else {
                0.0
            }
        }))
        .map_err(|e| SarmError::Config(format!("author popularity weights: {e}")))
    };
    let mut author_pick = author_weights(&active)?;

    let mut long_views: Vec<Vec<u64>> = vec![Vec::new(); world.users.len()];
    let mut out = Stream::default();
    out.events.reserve(n_events);
    for t in 0..n_events {
        let now = t as f64 / n_events as f64;
        let mut changed = false;
        while next < pending.len() && world.authors[pending[next]].debut <= now {
            active[pending[next]] = true;
            next += 1;
            changed = true;
        }
        if changed {
            author_pick = author_weights(&active)?;
        }
        let ui = user_pick.sample(&mut rng);
        let ai = author_pick.sample(&mut rng);
        let user = &world.users[ui];
        let author = &world.authors[ai];
        let z: Vec<f64> = (0..cfg.d_rank - 2)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let noise: f64 = z.iter().zip(&world.noise_dir).map(|(a, b)| a * b).sum();
        let p = sigmoid(world.click_logit(user, author, noise));
        let mut labels = [false; N_TASKS];
        labels[0] = rng.uniform() < p;
        if labels[0] {
            let aff = user.topic_affinity[author.latent_topic];
            for (k, &(wa, wb, b)) in ENGAGEMENT.iter().enumerate() {
                labels[k + 1] = rng.uniform() < sigmoid(wa * aff + wb * author.identity_bias + b);
            }
        }
        let hist = &long_views[ui];
        let history = hist[hist.len().saturating_sub(cfg.history_len)..].to_vec();
        let mut h_rank = Vec::with_capacity(cfg.d_rank);
        h_rank.push((author.popularity * world.authors.len() as f64).ln() as f32);
        h_rank.push(user.activity.ln() as f32);
        h_rank.extend(z.iter().map(|&x| x as f32));
        if labels[2] {
            let lv = &mut long_views[ui];
            lv.push(author.author_id);
            if lv.len() > 2 * cfg.history_len.max(1) {
                lv.drain(..lv.len() - cfg.history_len);
            }
        }
        out.events.push(InteractionEvent {
            user_id: user.user_id,
            author_id: author.author_id,
            history,
            h_rank,
            labels,
            timestamp: t as u64,
        });
        out.p_click.push(p);
        out.noise.push(noise);
    }
    Ok(out)
}

/// Index splitting `events` (sorted by timestamp) so the last `test_frac`
/// becomes test. Events sharing the boundary timestamp stay on the train side.
pub fn split_point(events: &[InteractionEvent], test_frac: f64) -> usize {
    let n = events.len();
    let n_test = ((n as f64 * test_frac.clamp(0.0, 1.0)).round() as usize).min(n);
    let mut cut = n - n_test;
    while cut > 0 && cut < n && events[cut].timestamp == events[cut - 1].timestamp {
        cut += 1;
    }
    cut
}

/// Chronological split: the stream is ordered by timestamp (stable), then cut
/// at the `1 - test_frac` quantile.
pub fn split_train_test(
    events: &[InteractionEvent],
    test_frac: f64,
) -> (Vec<InteractionEvent>, Vec<InteractionEvent>) {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| e.timestamp);
    let cut = split_point(&sorted, test_frac);
    let test = sorted.split_off(cut);
    (sorted, test)
}

/// Ground-truth AUC ceilings on a range of the stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleAucs {
    /// Scoring by the true click probability.
    pub bayes: Option<f64>,
    /// Scoring by the user-marginalised probability.
    pub id_only: Option<f64>,
}

pub fn oracle_aucs(world: &World, stream: &Stream, range: std::ops::Range<usize>) -> OracleAucs {
    let events = &stream.events[range.clone()];
    let labels: Vec<bool> = events.iter().map(|e| e.labels[0]).collect();
    let p_id: Vec<f64> = events
        .iter()
        .zip(&stream.noise[range.clone()])
        .map(|(e, &z)| {
            world.id_only_probability(world.author(e.author_id).expect("event author in world"), z)
        })
        .collect();
    OracleAucs {
        bayes: crate::eval::auc(&labels, &stream.p_click[range]),
        id_only: crate::eval::auc(&labels, &p_id),
    }
}

pub fn format_event(e: &InteractionEvent) -> String {
    let hist: Vec<String> = e.history.iter().map(u64::to_string).collect();
    let rank: Vec<String> = e.h_rank.iter().map(f32::to_string).collect();
    let l = e.labels.map(u8::from);
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.user_id,
        e.author_id,
        hist.join(","),
        rank.join(","),
        l[0],
        l[1],
        l[2],
        l[3],
        e.timestamp
    )
}

pub fn write_events(events: &[InteractionEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&format_event(e));
        s.push('\n');
    }
    s
}

pub fn parse_events(text: &str) -> Result<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let seg = format!("event line {}", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(SarmError::parse(
                seg,
                format!("expected 9 fields, got {}", f.len()),
            ));
        }
        let mut labels = [false; N_TASKS];
        for k in 0..N_TASKS {
            labels[k] = match f[4 + k] {
                "0" => false,
                "1" => true,
                other => return Err(SarmError::parse(seg, format!("label `{other}` is not 0/1"))),
            };
        }
        if !labels[0] && labels[1..].iter().any(|&l| l) {
            return Err(SarmError::parse(seg, "engagement label without a click"));
        }
        out.push(InteractionEvent {
            user_id: parse_field(f[0], &seg)?,
            author_id: parse_field(f[1], &seg)?,
            history: parse_list(f[2], &seg)?,
            h_rank: parse_list(f[3], &seg)?,
            labels,
            timestamp: parse_field(f[8], &seg)?,
        });
    }
    Ok(out)
}
