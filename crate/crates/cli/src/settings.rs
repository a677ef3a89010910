//! Every tunable as one flat `key = value` namespace: profile defaults, then
//! the config file, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use patchbert::data::Split;
use patchbert::eval::RetrievalSettings;
use patchbert::model::ModelConfig;
use patchbert::train::TrainConfig;
use patchbert::vsl::BenchSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => bail!("profile must be desk or paper, got {other:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub profile: Profile,
    pub seed: u64,
    pub product_count: usize,
    pub image_size: usize,
    pub vocab_max_size: usize,
    pub init_std: f64,
    /// `vocab_size` is taken from the vocabulary file at run time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalSettings,
    pub eval_split: Split,
    pub bench: BenchSettings,
    pub bench_batch_size: usize,
    pub bench_batches: usize,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Settings {
    pub fn defaults(profile: Profile) -> Self {
        let (model, train, product_count, image_size) = match profile {
            Profile::Desk => (ModelConfig::desk(0), TrainConfig::desk(), 2_000, 64),
            Profile::Paper => (ModelConfig::paper(0), TrainConfig::paper(), 3_888, 256),
        };
        Self {
            profile,
            seed: 0,
            product_count,
            image_size,
            vocab_max_size: 10_000,
            init_std: patchbert::model::INIT_STD,
            model,
            train,
            retrieval: RetrievalSettings::default(),
            eval_split: Split::Test,
            bench: BenchSettings::default(),
            bench_batch_size: 32,
            bench_batches: 8,
            corpus: None,
            vocab: None,
            checkpoint: None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| anyhow::anyhow!("invalid value {value:?} for {key}"))
        }
        let m = &mut self.model;
        match key {
            "profile" => {
                let p: Profile = value.parse()?;
                if p != self.profile {
                    bail!("config sets profile {p} but the run uses {}", self.profile);
                }
            }
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            "product_count" => self.product_count = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "vocab_max_size" => self.vocab_max_size = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "feed_forward" => m.feed_forward = parse(key, value)?,
            "max_text_len" => m.max_text_len = parse(key, value)?,
            "patches" => m.patches = parse(key, value)?,
            "max_seq_len" => m.max_seq_len = parse(key, value)?,
            "queries" => self.retrieval.queries = parse(key, value)?,
            "distractors" => self.retrieval.distractors = parse(key, value)?,
            "eval_split" => {
                self.eval_split = match value {
                    "train" => Split::Train,
                    "validation" => Split::Validation,
                    "test" => Split::Test,
                    _ => bail!("eval_split must be train, validation or test, got {value:?}"),
                }
            }
            "bench_repetitions" => self.bench.repetitions = parse(key, value)?,
            "bench_warmup" => self.bench.warmup = parse(key, value)?,
            "bench_threads" => self.bench.threads = parse(key, value)?,
            "bench_batch_size" => self.bench_batch_size = parse(key, value)?,
            "bench_batches" => self.bench_batches = parse(key, value)?,
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "vocab" => self.vocab = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ if self.train.entries().iter().any(|(k, _)| *k == key) => self.train.set(key, value)?,
            _ => bail!("unknown setting {key:?}"),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment line.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (key, value) in parse_key_values(&text).with_context(|| format!("in config {}", path.display()))? {
            self.set(&key, &value)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        Ok(())
    }

    /// Every setting with defaults materialized, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let mut out: Vec<(String, String)> = vec![
            ("profile".into(), self.profile.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("product_count".into(), self.product_count.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("vocab_max_size".into(), self.vocab_max_size.to_string()),
            ("init_std".into(), self.init_std.to_string()),
            ("layers".into(), m.layers.to_string()),
            ("hidden".into(), m.hidden.to_string()),
            ("heads".into(), m.heads.to_string()),
            ("feed_forward".into(), m.feed_forward.to_string()),
            ("max_text_len".into(), m.max_text_len.to_string()),
            ("patches".into(), m.patches.to_string()),
            ("max_seq_len".into(), m.max_seq_len.to_string()),
        ];
        out.extend(
            self.train
                .entries()
                .into_iter()
                .filter(|(k, _)| *k != "seed")
                .map(|(k, v)| (k.to_string(), v)),
        );
        let split = match self.eval_split {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        out.extend([
            ("queries".into(), self.retrieval.queries.to_string()),
            ("distractors".into(), self.retrieval.distractors.to_string()),
            ("eval_split".into(), split.to_string()),
            ("bench_repetitions".into(), self.bench.repetitions.to_string()),
            ("bench_warmup".into(), self.bench.warmup.to_string()),
            ("bench_threads".into(), self.bench.threads.to_string()),
            ("bench_batch_size".into(), self.bench_batch_size.to_string()),
            ("bench_batches".into(), self.bench_batches.to_string()),
        ]);
        for (k, p) in [("corpus", &self.corpus), ("vocab", &self.vocab), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = p {
                out.push((k.into(), p.display().to_string()));
            }
        }
        out
    }

    /// Checks everything that does not depend on input files.
    pub fn validate(&self) -> Result<()> {
        let probe = ModelConfig {
            vocab_size: 1,
            ..self.model.clone()
        };
        probe.validate()?;
        self.train.validate()?;
        let grid = (self.model.patches as f64).sqrt().round() as usize;
        if grid * grid != self.model.patches {
            bail!("patches {} is not a square grid", self.model.patches);
        }
        if self.image_size == 0 || self.image_size % 64 != 0 || self.image_size % grid != 0 {
            bail!("image_size {} must be a positive multiple of 64 divisible by the patch grid {grid}", self.image_size);
        }
        if self.retrieval.queries == 0 {
            bail!("queries must be at least 1");
        }
        if self.bench.repetitions == 0 || self.bench_batch_size == 0 || self.bench_batches == 0 {
            bail!("bench_repetitions, bench_batch_size and bench_batches must be at least 1");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            bail!("init_std must be positive");
        }
        if self.vocab_max_size < 6 {
            bail!("vocab_max_size must leave room for the reserved tokens");
        }
        Ok(())
    }
}

pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", n + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip_through_set() {
        for profile in [Profile::Desk, Profile::Paper] {
            let mut s = Settings::defaults(profile);
            s.seed = 17;
            s.train.seed = 17;
            s.train.total_steps = 321;
            s.corpus = Some("c".into());
            let mut t = Settings::defaults(profile);
            for (k, v) in s.entries() {
                t.set(&k, &v).unwrap();
            }
            assert_eq!(s, t);
        }
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let mut s = Settings::defaults(Profile::Desk);
        assert!(s.set("nonsense", "1").unwrap_err().to_string().contains("unknown setting"));
        assert!(s.set("learning_rate", "fast").unwrap_err().to_string().contains("learning_rate"));
        assert!(s.set("profile", "paper").is_err());
        assert!(parse_key_values("a = 1\n# c\n\nb=2").unwrap().len() == 2);
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn defaults_validate() {
        Settings::defaults(Profile::Desk).validate().unwrap();
        Settings::defaults(Profile::Paper).validate().unwrap();
    }
}
