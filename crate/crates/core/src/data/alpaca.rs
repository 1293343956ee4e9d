//! Alpaca-format records: loading, splitting and mixing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};

/// One instruction-tuning record. An absent or empty `input` is `None`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlpacaExample {
    pub instruction: String,
    #[serde(default, serialize_with = "input_as_string")]
    pub input: Option<String>,
    pub output: String,
}

fn input_as_string<S: Serializer>(input: &Option<String>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(input.as_deref().unwrap_or(""))
}

impl AlpacaExample {
    pub fn new(instruction: impl Into<String>, input: Option<&str>, output: impl Into<String>) -> Self {
        AlpacaExample {
            instruction: instruction.into(),
            input: input.filter(|s| !s.is_empty()).map(str::to_string),
            output: output.into(),
        }
    }
}

/// Parses a JSON array of Alpaca objects, preserving order.
pub fn parse_alpaca(text: &str) -> Result<Vec<AlpacaExample>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::MalformedDataset(e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| Error::MalformedDataset("top level must be an array".into()))?;
    items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            let obj = item
                .as_object()
                .ok_or_else(|| Error::MalformedDataset(format!("example {index} is not an object")))?;
            let text = |field: &'static str| -> Result<Option<&str>> {
                match obj.get(field) {
                    None | Some(Value::Null) => Ok(None),
                    Some(Value::String(s)) => Ok(Some(s.as_str())),
                    Some(_) => Err(Error::MalformedDataset(format!("example {index}: \"{field}\" must be a string"))),
                }
            };
            let required = |field: &'static str| -> Result<String> {
                match text(field)? {
                    Some(s) if !s.is_empty() => Ok(s.to_string()),
                    _ => Err(Error::MissingField { index, field }),
                }
            };
            Ok(AlpacaExample {
                instruction: required("instruction")?,
                input: text("input")?.filter(|s| !s.is_empty()).map(str::to_string),
                output: required("output")?,
            })
        })
        .collect()
}

pub fn load_alpaca(path: &Path) -> Result<Vec<AlpacaExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alpaca(&text)
}

pub fn save_alpaca(examples: &[AlpacaExample], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(examples).expect("examples serialize");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// `floor(n·fraction)`, robust to the representation error of decimal
/// fractions such as 0.29.
fn floor_fraction(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Seeded shuffle, then the first `floor(n·p)` examples go to train and the
/// rest to test.
pub fn split(
    examples: &[AlpacaExample],
    split_percentage: f64,
    seed: u64,
) -> Result<(Vec<AlpacaExample>, Vec<AlpacaExample>)> {
    if !(split_percentage > 0.0 && split_percentage < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split_percentage must be in (0, 1), got {split_percentage}"
        )));
    }
    let mut shuffled = examples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(floor_fraction(examples.len(), split_percentage));
    Ok((shuffled, test))
}

/// Result of [`mix_alpaca`].
#[derive(Debug, Clone)]
pub struct Mixed {
    pub examples: Vec<AlpacaExample>,
    /// `floor(alpaca_mix·|user|)`.
    pub requested: usize,
    pub added: usize,
}

impl Mixed {
    /// True when the pool was smaller than the request.
    pub fn clamped(&self) -> bool {
        self.added < self.requested
    }
}

/// Appends `floor(alpaca_mix·|user|)` examples drawn without replacement
/// from `pool` (all of it if smaller), then shuffles.
pub fn mix_alpaca(user: &[AlpacaExample], pool: &[AlpacaExample], alpaca_mix: f64, seed: u64) -> Result<Mixed> {
    if !(alpaca_mix >= 0.0) || !alpaca_mix.is_finite() {
        return Err(Error::InvalidConfig(format!("alpaca_mix must be >= 0, got {alpaca_mix}")));
    }
    let requested = floor_fraction(user.len(), alpaca_mix);
    let added = requested.min(pool.len());
    if added < requested {
        log::warn!("base pool has {} examples, {requested} requested; using all of it", pool.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = user.to_vec();
    examples.extend(rand::seq::index::sample(&mut rng, pool.len(), added).into_iter().map(|i| pool[i].clone()));
    examples.shuffle(&mut rng);
    Ok(Mixed {
        examples,
        requested,
        added,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("split must be train or test, got {other:?}"))),
        }
    }
}

/// Dataset preparation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub split_percentage: f64,
    pub max_len: usize,
    pub alpaca_mix: f64,
    pub base_pool: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            split_percentage: 0.8,
            max_len: 512,
            alpaca_mix: 0.3,
            base_pool: None,
            seed: 0,
        }
    }
}

/// One split of a user dataset, with base-pool examples mixed into train.
#[derive(Debug, Clone)]
pub struct AlpacaDataset {
    pub examples: Vec<AlpacaExample>,
    pub split: Split,
    pub provenance: Vec<PathBuf>,
    pub seed: u64,
    /// Sizes before mixing.
    pub train_len: usize,
    pub test_len: usize,
    pub mix_requested: usize,
    pub mix_added: usize,
}

impl AlpacaDataset {
    /// Split first, then mix into train only, so the test split never
    /// contains pool examples.
    pub fn from_examples(
        examples: &[AlpacaExample],
        pool: &[AlpacaExample],
        split_kind: Split,
        config: &DatasetConfig,
    ) -> Result<Self> {
        let (train, test) = split(examples, config.split_percentage, config.seed)?;
        let (train_len, test_len) = (train.len(), test.len());
        let mix_seed = crate::rng::derive(config.seed, &[0x6d6978]);
        let mixed = mix_alpaca(&train, pool, config.alpaca_mix, mix_seed)?;
        let (examples, mix_requested, mix_added) = match split_kind {
            Split::Train => (mixed.examples, mixed.requested, mixed.added),
            Split::Test => (test, mixed.requested, mixed.added),
        };
        Ok(AlpacaDataset {
            examples,
            split: split_kind,
            provenance: Vec::new(),
            seed: config.seed,
            train_len,
            test_len,
            mix_requested,
            mix_added,
        })
    }

    /// Loads `path` (and the configured base pool) and builds one split.
    pub fn generate(path: &Path, split_kind: Split, config: &DatasetConfig) -> Result<Self> {
        let examples = load_alpaca(path)?;
        let mut provenance = vec![path.to_path_buf()];
        let pool = match &config.base_pool {
            Some(p) => {
                provenance.push(p.clone());
                load_alpaca(p)?
            }
            None => Vec::new(),
        };
        let mut ds = Self::from_examples(&examples, &pool, split_kind, config)?;
        ds.provenance = provenance;
        Ok(ds)
    }

    /// Wraps examples used as-is (no split, no mix).
    pub fn whole(examples: Vec<AlpacaExample>) -> Self {
        let n = examples.len();
        AlpacaDataset {
            examples,
            split: Split::Train,
            provenance: Vec::new(),
            seed: 0,
            train_len: n,
            test_len: 0,
            mix_requested: 0,
            mix_added: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}
