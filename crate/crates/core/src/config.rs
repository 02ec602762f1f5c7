//! Flat `key = value` run configuration shared by every CLI command.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::anchor::PhraseBank;
use crate::data::{ClickModel, WorldConfig};
use crate::eval::BucketEdges;
use crate::model::{FusionConfig, ModelConfig};
use crate::train::{AdamConfig, TrainConfig};
use crate::{Result, SarmError};

/// A value that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("cannot parse `{s}` as {}", stringify!($t)))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, f64, bool, String);

impl ConfigValue for Vec<u64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| u64::parse_value(x.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty>::parse_value(value).map_err(|r| SarmError::parse(key, r))?;
                    })*
                    _ => return Err(SarmError::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its effective value, one `key = value` per line.
            pub fn echo(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($key), self.$key.render()).unwrap();)*
                s
            }
        }
    };
}

run_config! {
    world_seed: u64 = 1;
    stream_seed: u64 = 101;
    n_users: usize = 2000;
    n_authors: usize = 500;
    n_topics: usize = 8;
    n_events: usize = 200_000;
    zipf_s: f64 = 1.1;
    p_topic: f64 = 0.9;
    cold_frac: f64 = 0.1;
    cold_start: f64 = 0.85;
    affinity_concentration: f64 = 0.3;
    topic_skew: f64 = 1.0;
    bias_std: f64 = 0.5;
    activity_sigma: f64 = 0.5;
    w_aff: f64 = 12.0;
    w_bias: f64 = 1.0;
    w_noise: f64 = 0.5;
    click_bias: f64 = -4.0;
    phrase_bank: String = "builtin".into();
    test_frac: f64 = 0.1;
    train_window: usize = 60_000;
    vocab_size: usize = 400;
    merge_threshold: u64 = 5;
    max_merges: usize = 300;
    max_len: usize = 64;
    d: usize = 32;
    n_blocks: usize = 4;
    fusion_sites: String = "all".into();
    d_rank: usize = 8;
    history_len: usize = 8;
    user_blocks: usize = 1;
    rms_eps: f64 = crate::numerics::DEFAULT_RMS_EPS;
    rope_base: f64 = crate::numerics::DEFAULT_ROPE_BASE;
    model_seed: u64 = 7;
    anchor_mode: String = "content".into();
    lambda: f64 = 0.1;
    lr: f64 = 3e-3;
    beta1: f64 = 0.9;
    beta2: f64 = 0.999;
    adam_eps: f64 = 1e-8;
    batch_size: usize = 32;
    max_steps: usize = 0;
    bank_cadence: usize = 1;
    refresh_cadence: usize = 1000;
    eval_every: usize = 0;
    bucket_edges: Vec<u64> = crate::eval::DEFAULT_EDGES.to_vec();
    top_k: usize = 5;
    data_dir: String = "run/data".into();
    tokenizer_dir: String = "run/tokenizer".into();
    model_dir: String = "run/model".into();
    eval_dir: String = "run/eval".into();
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SarmError::parse(format!("config line {}", i + 1), "expected `key = value`")
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| SarmError::parse(o, "override must look like key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load_phrase_bank(&self) -> Result<PhraseBank> {
        if self.phrase_bank == "builtin" {
            Ok(PhraseBank::builtin())
        } else {
            PhraseBank::parse(&crate::data::read_file(std::path::Path::new(
                &self.phrase_bank,
            ))?)
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            n_users: self.n_users,
            n_authors: self.n_authors,
            n_topics: self.n_topics,
            zipf_s: self.zipf_s,
            p_topic: self.p_topic,
            cold_frac: self.cold_frac,
            cold_start: self.cold_start,
            affinity_concentration: self.affinity_concentration,
            topic_skew: self.topic_skew,
            bias_std: self.bias_std,
            activity_sigma: self.activity_sigma,
            history_len: self.history_len,
            d_rank: self.d_rank,
            click: ClickModel {
                w_aff: self.w_aff,
                w_bias: self.w_bias,
                w_noise: self.w_noise,
                bias: self.click_bias,
            },
        }
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        match self.fusion_sites.as_str() {
            "all" => Ok(FusionConfig::all(self.n_blocks)),
            "none" => Ok(FusionConfig::new(Vec::new(), false)),
            s => {
                let sites =
                    Vec::<u64>::parse_value(s).map_err(|r| SarmError::parse("fusion_sites", r))?;
                if let Some(&b) = sites.iter().find(|&&b| b as usize >= self.n_blocks) {
                    return Err(SarmError::Config(format!(
                        "fusion site {b} but only {} blocks",
                        self.n_blocks
                    )));
                }
                Ok(FusionConfig::new(
                    sites.into_iter().map(|b| b as usize).collect(),
                    true,
                ))
            }
        }
    }

    /// Model shape once the tokenizer sizes are known.
    pub fn model_config(&self, base_vocab: usize, ext_vocab: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d: self.d,
            max_len: self.max_len,
            n_blocks: self.n_blocks,
            fusion: self.fusion()?,
            base_vocab,
            ext_vocab,
            n_authors: self.n_authors,
            d_rank: self.d_rank,
            history_len: self.history_len,
            user_blocks: self.user_blocks,
            rms_eps: self.rms_eps,
            rope_base: self.rope_base,
            seed: self.model_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            batch_size: self.batch_size,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            bank_cadence: self.bank_cadence,
            refresh_cadence: self.refresh_cadence,
            eval_every: self.eval_every,
        }
    }

    pub fn id_only(&self) -> bool {
        self.anchor_mode == "id_only"
    }

    /// Checks every derived configuration before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.world_config().validate(&self.load_phrase_bank()?)?;
        self.train_config().validate()?;
        BucketEdges::new(self.bucket_edges.clone())?;
        self.fusion()?;
        if !matches!(self.anchor_mode.as_str(), "content" | "id_only") {
            return Err(SarmError::Config(format!(
                "anchor_mode must be `content` or `id_only`, got `{}`",
                self.anchor_mode
            )));
        }
        if !(0.0..1.0).contains(&self.test_frac) {
            return Err(SarmError::Config("test_frac must lie in [0, 1)".into()));
        }
        if self.vocab_size < 8
            || self.merge_threshold == 0
            || self.max_len == 0
            || self.n_events == 0
        {
            return Err(SarmError::Config(
                "vocab_size >= 8 and positive merge_threshold, max_len, n_events required".into(),
            ));
        }
        // Model shape checks that do not depend on the tokenizer.
        self.model_config(self.vocab_size, self.vocab_size)?;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.data_dir)
    }

    pub fn tokenizer_dir(&self) -> PathBuf {
        PathBuf::from(&self.tokenizer_dir)
    }

    pub fn model_dir(&self) -> PathBuf {
        PathBuf::from(&self.model_dir)
    }

    pub fn eval_dir(&self) -> PathBuf {
        PathBuf::from(&self.eval_dir)
    }
}
