//! Labeled datasets, deterministic splitting, class rebalancing and batch
//! ordering. Everything here is a pure function of its inputs and a seed.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codeprep::{
    extract_slices, normalize_with, strip_comments, Label, PrepError, PrepOptions, RawSample, TokenSequence, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("{0}")]
    Usage(String),
    #[error("sample {id:?}: {source}")]
    Prep { id: String, source: PrepError },
}

/// A named collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    name: String,
    samples: Vec<RawSample>,
    counts: [usize; 2],
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<RawSample>) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        let mut counts = [0; 2];
        for s in &samples {
            s.validate().map_err(|source| DataError::Prep {
                id: s.id.clone(),
                source,
            })?;
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            counts[s.label.index()] += 1;
        }
        Ok(Dataset {
            name: name.into(),
            samples,
            counts,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[RawSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<RawSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts indexed by label: `[safe, vulnerable]`.
    pub fn class_counts(&self) -> [usize; 2] {
        self.counts
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    fn subset(&self, name: String, mut indices: Vec<usize>) -> Dataset {
        indices.sort_unstable();
        let samples: Vec<RawSample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let mut counts = [0; 2];
        for s in &samples {
            counts[s.label.index()] += 1;
        }
        Dataset { name, samples, counts }
    }
}

fn default_ratios() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

fn default_true() -> bool {
    true
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: default_ratios(),
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Usage(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                self.ratios
            )));
        }
        Ok(())
    }
}

/// Which split a sample landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, which: SplitName) -> &Dataset {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// `(id, split)` pairs in split order, then sample order.
    pub fn manifest(&self) -> Vec<(String, SplitName)> {
        SplitName::ALL
            .iter()
            .flat_map(|&w| self.get(w).ids().map(move |id| (id.to_string(), w)))
            .collect()
    }
}

/// Largest-remainder apportionment of `n` items by `ratios`: floors first,
/// then one extra item per part in order of decreasing fractional share
/// (earlier parts win ties).
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // remainders are compared at 1e-9 resolution so exact ties stay ties;
    // the stable sort then keeps index order among them
    let rem = |i: usize| libm::round((exact[i] - libm::floor(exact[i])) * 1e9) as i64;
    order.sort_by_key(|&i| core::cmp::Reverse(rem(i)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Partitions `dataset` into train/val/test.
///
/// Stratified mode shuffles each class separately and apportions it by the
/// ratios; otherwise the whole dataset is shuffled and apportioned once.
/// Within each split, samples keep their original relative order.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(DataError::Usage("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = [Vec::new(), Vec::new()];
        for (i, s) in dataset.samples.iter().enumerate() {
            by_class[s.label.index()].push(i);
        }
        for (label, members) in by_class.iter().enumerate() {
            if !members.is_empty() && members.len() < 3 {
                return Err(DataError::Usage(format!(
                    "class {label} has only {} samples, fewer than the 3 split parts; use a non-stratified split",
                    members.len()
                )));
            }
        }
        by_class.into_iter().filter(|g| !g.is_empty()).collect()
    } else {
        alloc::vec![(0..dataset.len()).collect()]
    };
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut group in groups {
        group.shuffle(&mut rng);
        let sizes = apportion(group.len(), &spec.ratios);
        let mut rest = group.as_slice();
        for (part, size) in parts.iter_mut().zip(sizes) {
            let (take, tail) = rest.split_at(size);
            part.extend_from_slice(take);
            rest = tail;
        }
    }
    let [train, val, test] = parts;
    let name = |w: SplitName| format!("{}/{}", dataset.name, w.as_str());
    Ok(Splits {
        train: dataset.subset(name(SplitName::Train), train),
        val: dataset.subset(name(SplitName::Val), val),
        test: dataset.subset(name(SplitName::Test), test),
    })
}

/// Oversamples the minority class with replacement until both classes have
/// equal counts. Copies get fresh ids (`<id>#dup<k>`).
pub fn resample_balance(dataset: &Dataset, seed: u64) -> Result<Dataset, DataError> {
    let [safe, vuln] = dataset.class_counts();
    if safe == 0 || vuln == 0 {
        return Err(DataError::Usage(format!(
            "cannot balance dataset {:?}: it has only one class",
            dataset.name
        )));
    }
    let minority = if safe < vuln { Label::Safe } else { Label::Vulnerable };
    let deficit = safe.abs_diff(vuln);
    let pool: Vec<&RawSample> = dataset.samples.iter().filter(|s| s.label == minority).collect();
    let mut used: BTreeSet<String> = dataset.samples.iter().map(|s| s.id.clone()).collect();
    let mut copies: BTreeMap<&str, usize> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = dataset.samples.clone();
    for _ in 0..deficit {
        let src = pool[rng.random_range(0..pool.len())];
        let k = copies.entry(src.id.as_str()).or_insert(0);
        let id = loop {
            *k += 1;
            let candidate = format!("{}#dup{}", src.id, k);
            if !used.contains(&candidate) {
                break candidate;
            }
        };
        used.insert(id.clone());
        samples.push(RawSample {
            id,
            origin: Some(src.id.clone()),
            ..src.clone()
        });
    }
    Dataset::new(format!("{}+balanced", dataset.name), samples)
}

/// Mini-batch order over `len` items: every index exactly once per epoch,
/// a fresh seeded permutation per epoch when shuffling, final batch partial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    len: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Usage("batch_size must be at least 1".into()));
        }
        Ok(BatchPlan {
            len,
            batch_size,
            seed,
            shuffle,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Granularity of classification: whole functions or extracted slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    #[default]
    Function,
    Slice,
}

/// Expands samples into slice-level samples (`<id>/<k>`, label inherited).
/// Samples without any anchor are kept whole so no label disappears.
pub fn slice_samples(samples: &[RawSample], opts: &PrepOptions, context: usize) -> Result<Vec<RawSample>, DataError> {
    let api = opts.api();
    let mut out = Vec::new();
    for s in samples {
        let slices = extract_slices(&s.code, &api, context).map_err(|source| DataError::Prep {
            id: s.id.clone(),
            source,
        })?;
        if slices.is_empty() {
            out.push(s.clone());
            continue;
        }
        for (k, sl) in slices.into_iter().enumerate() {
            out.push(RawSample {
                id: format!("{}/{}", s.id, k),
                code: sl.text,
                label: s.label,
                origin: Some(format!("{}:{}:{}", s.id, sl.kind.as_str(), sl.anchor_line)),
            });
        }
    }
    Ok(out)
}

/// Strips and normalizes every sample's code, keeping ids and labels.
pub fn preprocess_samples(samples: &[RawSample], opts: &PrepOptions) -> Result<Vec<RawSample>, DataError> {
    let api = opts.api();
    samples
        .iter()
        .map(|s| {
            let err = |source| DataError::Prep {
                id: s.id.clone(),
                source,
            };
            let stripped = strip_comments(&s.code).map_err(err)?;
            let code = normalize_with(&stripped, opts.rename_identifiers, &api, opts.language).map_err(err)?;
            Ok(RawSample { code, ..s.clone() })
        })
        .collect()
}

/// An encoded, labeled training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub seq: TokenSequence,
    pub label: Label,
}

/// Runs the full preprocessing pipeline and encodes every sample.
pub fn encode_samples(
    samples: &[RawSample],
    opts: &PrepOptions,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>, DataError> {
    if max_len < 2 {
        return Err(DataError::Usage(format!("max_len must be at least 2, got {max_len}")));
    }
    samples
        .iter()
        .map(|s| {
            let texts = opts.token_texts(&s.code).map_err(|source| DataError::Prep {
                id: s.id.clone(),
                source,
            })?;
            let seq = vocab
                .encode_texts(texts.iter().map(String::as_str), max_len)
                .with_label(s.label);
            Ok(Example {
                id: s.id.clone(),
                seq,
                label: s.label,
            })
        })
        .collect()
}

/// Vocabulary-level token streams for every sample (the vocab corpus).
pub fn token_corpus(samples: &[RawSample], opts: &PrepOptions) -> Result<Vec<Vec<String>>, DataError> {
    samples
        .iter()
        .map(|s| {
            opts.token_texts(&s.code).map_err(|source| DataError::Prep {
                id: s.id.clone(),
                source,
            })
        })
        .collect()
}
