use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use super::{CohortError, IndexCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_frac: f64,
    pub train_sizes: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_frac: 0.10,
            train_sizes: vec![400, 1000],
        }
    }
}

/// Test, nested training sets, and dev ids drawn from one seeded shuffle.
///
/// Every id list is stored sorted; nesting follows from all training sets
/// being prefixes of the same shuffled pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortSplits {
    pub seed: u64,
    pub test: Vec<String>,
    pub train: BTreeMap<usize, Vec<String>>,
    pub dev: Vec<String>,
}

impl CohortSplits {
    /// Look up a split by its file name: `test`, `dev`, or `train_<size>`.
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "test" => Some(&self.test),
            "dev" => Some(&self.dev),
            other => other
                .strip_prefix("train_")
                .and_then(|n| n.parse().ok())
                .and_then(|n: usize| self.train.get(&n))
                .map(Vec::as_slice),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["test".to_string()];
        names.extend(self.train.keys().map(|k| format!("train_{k}")));
        names.push("dev".into());
        names
    }

    /// Name of the largest training split, e.g. `train_1000`.
    pub fn largest_train(&self) -> Option<String> {
        self.train.keys().next_back().map(|k| format!("train_{k}"))
    }
}

impl Serialize for CohortSplits {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(3 + self.train.len()))?;
        map.serialize_entry("seed", &self.seed)?;
        map.serialize_entry("test", &self.test)?;
        for (size, ids) in &self.train {
            map.serialize_entry(&format!("train_{size}"), ids)?;
        }
        map.serialize_entry("dev", &self.dev)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for CohortSplits {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw: BTreeMap<String, serde_json::Value> = BTreeMap::deserialize(deserializer)?;
        let ids = |v: &serde_json::Value| -> Result<Vec<String>, D::Error> {
            serde_json::from_value(v.clone()).map_err(D::Error::custom)
        };
        let mut out = CohortSplits {
            seed: 0,
            test: Vec::new(),
            train: BTreeMap::new(),
            dev: Vec::new(),
        };
        for (key, value) in &raw {
            match key.as_str() {
                "seed" => out.seed = serde_json::from_value(value.clone()).map_err(D::Error::custom)?,
                "test" => out.test = ids(value)?,
                "dev" => out.dev = ids(value)?,
                other => {
                    let size = other
                        .strip_prefix("train_")
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(|| D::Error::custom(format!("unknown split {other:?}")))?;
                    out.train.insert(size, ids(value)?);
                }
            }
        }
        Ok(out)
    }
}

/// `⌊test_frac · total⌋`, robust to representation error (0.1 · 10 → 1, not 0).
pub fn test_size(total: usize, test_frac: f64) -> usize {
    ((total as f64) * test_frac + 1e-9).floor() as usize
}

/// Draw the test set first from a seeded shuffle, then nested training sets
/// from the remaining pool; dev is the pool minus the largest training set.
pub fn make_splits(cases: &[IndexCase], seed: u64, config: &SplitConfig) -> Result<CohortSplits, CohortError> {
    if !(0.0..1.0).contains(&config.test_frac) {
        return Err(CohortError::InvalidSplit(format!(
            "test_frac {} outside [0, 1)",
            config.test_frac
        )));
    }
    let total = cases.len();
    let n_test = test_size(total, config.test_frac);
    let largest = config.train_sizes.iter().copied().max().unwrap_or(0);
    if n_test + largest > total {
        return Err(CohortError::InsufficientCases {
            needed: n_test + largest,
            test: n_test,
            train: largest,
            available: total,
        });
    }
    let mut ids: Vec<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let sorted = |slice: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = slice.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    let (test, pool) = ids.split_at(n_test);
    let train = config
        .train_sizes
        .iter()
        .map(|&n| (n, sorted(&pool[..n])))
        .collect();
    Ok(CohortSplits {
        seed,
        test: sorted(test),
        train,
        dev: sorted(&pool[largest..]),
    })
}
