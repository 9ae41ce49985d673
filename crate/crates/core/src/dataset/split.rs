//! Seeded train/validation/test partitioning.
//!
//! Entries are shuffled with the seed and cut into contiguous runs: train
//! gets `floor(r_train * n)`, validation `floor(r_val * n)`, test the rest.
//! Fixed per-sub-dataset counts may replace the ratios for that sub-dataset.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::ManifestEntry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::config(format!("unknown split `{s}` (train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    /// `(train, val, test)` counts per sub-dataset, replacing the ratios
    pub fixed_counts: BTreeMap<String, (usize, usize, usize)>,
    /// keep every identity inside a single split
    pub identity_disjoint: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: (0.6, 0.05, 0.35),
            seed: 0,
            fixed_counts: BTreeMap::new(),
            identity_disjoint: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn get(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Entries of one split, in manifest order.
    pub fn select<'a>(&self, entries: &'a [ManifestEntry], name: SplitName) -> Vec<&'a ManifestEntry> {
        let ids: HashSet<&str> = self.get(name).iter().map(String::as_str).collect();
        entries.iter().filter(|e| ids.contains(e.clip_id.as_str())).collect()
    }
}

pub(crate) fn check_ratios((a, b, c): (f64, f64, f64)) -> Result<()> {
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::config(format!("split ratios must be nonnegative, got ({a}, {b}, {c})")));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios must sum to 1, got {}", a + b + c)));
    }
    Ok(())
}

/// Train and validation sizes for `n` items under the floor rule.
pub fn ratio_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // the epsilon stops exact products such as 0.6 * 20 flooring to 11
    let train = ((ratios.0 * n as f64) + 1e-9).floor() as usize;
    let val = (((ratios.1 * n as f64) + 1e-9).floor() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Splits a manifest with the ratio rule, seeded shuffle first.
pub fn split_manifest(entries: &[ManifestEntry], ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    split_with(
        entries,
        &SplitConfig {
            ratios,
            seed,
            ..SplitConfig::default()
        },
    )
}

pub fn split_with(entries: &[ManifestEntry], cfg: &SplitConfig) -> Result<SplitAssignment> {
    check_ratios(cfg.ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SplitAssignment::default();

    // sub-datasets with fixed counts are split on their own; the rest share
    // the ratio rule
    let mut groups: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let key = cfg.fixed_counts.contains_key(&e.sub_dataset).then_some(e.sub_dataset.as_str());
        groups.entry(key).or_default().push(i);
    }
    for name in cfg.fixed_counts.keys() {
        if !groups.contains_key(&Some(name.as_str())) {
            return Err(Error::config(format!("fixed counts given for unknown sub-dataset `{name}`")));
        }
    }

    for (key, members) in groups {
        let counts = match key {
            Some(name) => {
                let c = cfg.fixed_counts[name];
                if c.0 + c.1 + c.2 != members.len() {
                    return Err(Error::config(format!(
                        "fixed counts {c:?} for `{name}` do not add up to its {} entries",
                        members.len()
                    )));
                }
                c
            }
            None => ratio_counts(members.len(), cfg.ratios),
        };
        let parts = if cfg.identity_disjoint {
            partition_identities(entries, &members, counts, &mut rng)
        } else {
            let mut order = members;
            order.shuffle(&mut rng);
            let (tr, rest) = order.split_at(counts.0);
            let (va, te) = rest.split_at(counts.1);
            [tr.to_vec(), va.to_vec(), te.to_vec()]
        };
        for (dst, part) in [&mut out.train, &mut out.val, &mut out.test].into_iter().zip(parts) {
            dst.extend(part.into_iter().map(|i| entries[i].clip_id.clone()));
        }
    }
    Ok(out)
}

/// Shuffles identities and fills train, then validation, up to their target
/// sizes; an identity never straddles two splits, so sizes are approximate.
fn partition_identities(
    entries: &[ManifestEntry],
    members: &[usize],
    counts: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> [Vec<usize>; 3] {
    let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in members {
        by_identity.entry(entries[i].identity_id.as_str()).or_default().push(i);
    }
    let mut ids: Vec<_> = by_identity.into_values().collect();
    ids.shuffle(rng);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for group in ids {
        let slot = if parts[0].len() < counts.0 {
            0
        } else if parts[1].len() < counts.1 {
            1
        } else {
            2
        };
        parts[slot].extend(group);
    }
    parts
}
