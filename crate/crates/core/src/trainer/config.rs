use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{AttentionQuery, DecoderKind, ModelConfig};
use crate::numerics::Precision;
use crate::textpipe::{LengthLimits, Unit};

/// Parses flat `key = value` text. `#` starts a comment; blank lines are
/// skipped. Keys keep their order of appearance.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Every training option, with data paths. Unset optional values fall
/// back to the defaults documented on each key.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub dev_source: Option<PathBuf>,
    pub dev_target: Option<PathBuf>,
    pub source_merges: Option<PathBuf>,
    pub source_vocab: Option<PathBuf>,
    pub target_vocab: Option<PathBuf>,
    /// Only for subword targets; without it targets are taken as already
    /// segmented.
    pub target_merges: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,

    pub target_unit: Unit,
    pub decoder: DecoderKind,
    pub attention: Option<AttentionQuery>,
    pub d_emb: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub d_att: Option<usize>,

    pub batch_size: usize,
    pub clip: f64,
    pub adam: AdamConfig,
    pub max_steps: u64,
    pub valid_interval: u64,
    pub seed: u64,
    pub max_source_len: usize,
    pub max_target_len: Option<usize>,
    /// Sort by length within windows of this many batches; 0 disables.
    pub bucket_window: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_source: None,
            train_target: None,
            dev_source: None,
            dev_target: None,
            source_merges: None,
            source_vocab: None,
            target_vocab: None,
            target_merges: None,
            output_dir: None,
            resume: None,
            target_unit: Unit::Character,
            decoder: DecoderKind::BiScale,
            attention: None,
            d_emb: ModelConfig::DEFAULT_EMB,
            d_enc: ModelConfig::DEFAULT_ENC,
            d_dec: ModelConfig::DEFAULT_DEC,
            d_att: None,
            batch_size: 128,
            clip: 1.0,
            adam: AdamConfig::default(),
            max_steps: 10_000,
            valid_interval: 1000,
            seed: 1,
            max_source_len: LengthLimits::SOURCE_SUBWORDS,
            max_target_len: None,
            bucket_window: 0,
            precision: Precision::Narrow,
        }
    }
}

fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got {v:?}")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Keys whose values are filesystem paths.
    pub const PATH_KEYS: &'static [&'static str] = &[
        "train_source",
        "train_target",
        "dev_source",
        "dev_target",
        "source_merges",
        "source_vocab",
        "target_vocab",
        "target_merges",
        "output_dir",
        "resume",
    ];

    pub const KEYS: &'static [&'static str] = &[
        "train_source",
        "train_target",
        "dev_source",
        "dev_target",
        "source_merges",
        "source_vocab",
        "target_vocab",
        "target_merges",
        "output_dir",
        "resume",
        "target_unit",
        "decoder",
        "attention",
        "d_emb",
        "d_enc",
        "d_dec",
        "d_att",
        "batch_size",
        "clip",
        "step_size",
        "beta1",
        "beta2",
        "epsilon",
        "max_steps",
        "valid_interval",
        "seed",
        "max_source_len",
        "max_target_len",
        "bucket_window",
        "precision",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "train_source" => self.train_source = path(v),
            "train_target" => self.train_target = path(v),
            "dev_source" => self.dev_source = path(v),
            "dev_target" => self.dev_target = path(v),
            "source_merges" => self.source_merges = path(v),
            "source_vocab" => self.source_vocab = path(v),
            "target_vocab" => self.target_vocab = path(v),
            "target_merges" => self.target_merges = path(v),
            "output_dir" => self.output_dir = path(v),
            "resume" => self.resume = path(v),
            "target_unit" => self.target_unit = v.parse()?,
            "decoder" => self.decoder = v.parse()?,
            "attention" => {
                self.attention = match v {
                    "" | "default" => None,
                    other => Some(other.parse()?),
                }
            }
            "d_emb" => self.d_emb = num(key, v)?,
            "d_enc" => self.d_enc = num(key, v)?,
            "d_dec" => self.d_dec = num(key, v)?,
            "d_att" => self.d_att = if v.is_empty() { None } else { Some(num(key, v)?) },
            "batch_size" => self.batch_size = num(key, v)?,
            "clip" => self.clip = num(key, v)?,
            "step_size" => self.adam.step_size = num(key, v)?,
            "beta1" => self.adam.beta1 = num(key, v)?,
            "beta2" => self.adam.beta2 = num(key, v)?,
            "epsilon" => self.adam.epsilon = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "valid_interval" => self.valid_interval = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "max_source_len" => self.max_source_len = num(key, v)?,
            "max_target_len" => {
                self.max_target_len = if v.is_empty() { None } else { Some(num(key, v)?) }
            }
            "bucket_window" => self.bucket_window = num(key, v)?,
            "precision" => self.precision = v.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by `entries` in order.
    pub fn from_entries<K: AsRef<str>, V: AsRef<str>>(entries: &[(K, V)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in entries {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_key_values(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_emb", self.d_emb),
            ("d_enc", self.d_enc),
            ("d_dec", self.d_dec),
            ("batch_size", self.batch_size),
            ("max_source_len", self.max_source_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.valid_interval == 0 || self.d_att == Some(0) || self.max_target_len == Some(0) {
            return Err(Error::Config("intervals and lengths must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("`clip` must be positive".into()));
        }
        self.adam.validate()
    }

    pub fn limits(&self) -> LengthLimits {
        LengthLimits {
            max_source: self.max_source_len,
            max_target: self
                .max_target_len
                .unwrap_or(LengthLimits::for_target(self.target_unit).max_target),
        }
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_emb: self.d_emb,
            d_enc: self.d_enc,
            d_dec: self.d_dec,
            d_att: self.d_att.unwrap_or(self.d_dec),
            decoder: self.decoder,
            attention: self.attention.unwrap_or(AttentionQuery::default_for(self.decoder)),
        }
    }

    /// Fully resolved `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let p = |v: &Option<PathBuf>| v.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default();
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("train_source", p(&self.train_source));
        kv("train_target", p(&self.train_target));
        kv("dev_source", p(&self.dev_source));
        kv("dev_target", p(&self.dev_target));
        kv("source_merges", p(&self.source_merges));
        kv("source_vocab", p(&self.source_vocab));
        kv("target_vocab", p(&self.target_vocab));
        kv("target_merges", p(&self.target_merges));
        kv("output_dir", p(&self.output_dir));
        kv("resume", p(&self.resume));
        kv("target_unit", self.target_unit.to_string());
        kv("decoder", self.decoder.to_string());
        kv(
            "attention",
            self.attention.map(|a| a.to_string()).unwrap_or_else(|| "default".into()),
        );
        kv("d_emb", self.d_emb.to_string());
        kv("d_enc", self.d_enc.to_string());
        kv("d_dec", self.d_dec.to_string());
        kv("d_att", opt(self.d_att));
        kv("batch_size", self.batch_size.to_string());
        kv("clip", format!("{:?}", self.clip));
        kv("step_size", format!("{:?}", self.adam.step_size));
        kv("beta1", format!("{:?}", self.adam.beta1));
        kv("beta2", format!("{:?}", self.adam.beta2));
        kv("epsilon", format!("{:?}", self.adam.epsilon));
        kv("max_steps", self.max_steps.to_string());
        kv("valid_interval", self.valid_interval.to_string());
        kv("seed", self.seed.to_string());
        kv("max_source_len", self.max_source_len.to_string());
        kv("max_target_len", opt(self.max_target_len));
        kv("bucket_window", self.bucket_window.to_string());
        kv("precision", self.precision.as_str().to_string());
        out
    }
}
