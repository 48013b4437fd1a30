//! The accumulated store of annotated samples and per-iteration selection.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::feedback::{FeedbackLabel, UnconstrainedFeedback};
use crate::rng::Rng;
use crate::vocab::TokenId;

pub const POOL_FORMAT: &str = "alt-pool";
pub const POOL_VERSION: u32 = 1;

/// Feedback as stored in the pool. Categorical and quantile feedback fill
/// `text` and `category`; unconstrained feedback also keeps `score` and
/// `analysis`, with `category` set to its score class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolFeedback {
    pub text: String,
    pub category: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<String>,
}

impl PoolFeedback {
    pub fn label(&self) -> FeedbackLabel {
        FeedbackLabel::new(self.text.clone(), self.category)
    }
}

impl From<FeedbackLabel> for PoolFeedback {
    fn from(l: FeedbackLabel) -> Self {
        Self {
            text: l.text,
            category: l.category_index,
            score: None,
            analysis: None,
        }
    }
}

impl From<UnconstrainedFeedback> for PoolFeedback {
    fn from(f: UnconstrainedFeedback) -> Self {
        Self {
            category: Some(f.score_class()),
            text: f.feedback,
            score: Some(f.score),
            analysis: Some(f.analysis),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub prompt: Vec<TokenId>,
    pub generation: Vec<TokenId>,
    pub feedback: PoolFeedback,
    pub reward: Option<f64>,
    pub iteration: u32,
    pub truncated: bool,
    /// Chosen for training in its iteration.
    #[serde(default)]
    pub selected: bool,
}

impl PoolEntry {
    pub fn category(&self) -> Option<usize> {
        self.feedback.category
    }

    fn validate(&self) -> Result<()> {
        if self.iteration == 0 {
            return Err(AltError::validation("iteration must be >= 1"));
        }
        if self.generation.is_empty() {
            return Err(AltError::validation("empty generation"));
        }
        if self.reward.is_some_and(|r| !r.is_finite()) {
            return Err(AltError::validation("non-finite reward"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolHeader {
    format: String,
    version: u32,
    provenance: Provenance,
}

/// Append-only sequence of entries, ordered by (iteration, prompt, sample).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPool {
    pub provenance: Provenance,
    entries: Vec<PoolEntry>,
}

impl DataPool {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append `entries` after validating all of them; nothing is added if any
    /// entry is invalid.
    pub fn add_batch(&mut self, entries: Vec<PoolEntry>) -> Result<()> {
        let last = self.entries.last().map_or(0, |e| e.iteration);
        for (i, e) in entries.iter().enumerate() {
            e.validate()
                .map_err(|err| AltError::validation(format!("entry {i} rejected: {err}")))?;
            if e.iteration < last {
                return Err(AltError::validation(format!(
                    "entry {i} rejected: iteration {} precedes pool iteration {last}",
                    e.iteration
                )));
            }
        }
        self.entries.extend(entries);
        Ok(())
    }

    pub fn iteration(&self, k: u32) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().filter(move |e| e.iteration == k)
    }

    /// Entries chosen for training, optionally limited to one iteration.
    pub fn selected(&self, iteration: Option<u32>) -> Vec<&PoolEntry> {
        self.entries
            .iter()
            .filter(|e| e.selected && iteration.is_none_or(|k| e.iteration == k))
            .collect()
    }

    fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let header = PoolHeader {
            format: POOL_FORMAT.into(),
            version: POOL_VERSION,
            provenance: self.provenance.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes"))?;
        }
        w.flush()
    }

    /// JSON lines with a header line; gzip when the path ends in `.gz`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| AltError::io(path, e))?;
        let res = if is_gz(path) {
            let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
            self.write_to(&mut enc).and_then(|_| enc.finish().map(|_| ()))
        } else {
            self.write_to(&mut BufWriter::new(file))
        };
        res.map_err(|e| AltError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| AltError::io(path, e))?;
        let reader: Box<dyn Read> = if is_gz(path) {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        let mut lines = BufReader::new(reader).lines();
        let first = lines
            .next()
            .ok_or_else(|| AltError::Format(format!("{}: empty pool file", path.display())))?
            .map_err(|e| AltError::io(path, e))?;
        let header: PoolHeader = serde_json::from_str(&first)
            .map_err(|e| AltError::Format(format!("{}: bad pool header: {e}", path.display())))?;
        if header.format != POOL_FORMAT || header.version != POOL_VERSION {
            return Err(AltError::Format(format!(
                "{}: unsupported pool format {} v{}",
                path.display(),
                header.format,
                header.version
            )));
        }
        let mut pool = Self::new(header.provenance);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| AltError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: PoolEntry = serde_json::from_str(&line)
                .map_err(|err| AltError::Format(format!("{} line {}: {err}", path.display(), n + 2)))?;
            pool.entries.push(e);
        }
        Ok(pool)
    }

    pub fn stats(&self) -> PoolStats {
        let mut s = PoolStats {
            entries: self.len(),
            ..PoolStats::default()
        };
        for e in &self.entries {
            let it = s.per_iteration.entry(e.iteration).or_default();
            it.entries += 1;
            it.truncated += usize::from(e.truncated);
            it.selected += usize::from(e.selected);
            if let Some(c) = e.category() {
                *it.categories.entry(c).or_default() += 1;
            }
            if let Some(r) = e.reward {
                it.reward_sum += r;
                it.rewarded += 1;
            }
        }
        s
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationStats {
    pub entries: usize,
    pub truncated: usize,
    pub selected: usize,
    pub categories: BTreeMap<usize, usize>,
    pub rewarded: usize,
    pub reward_sum: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PoolStats {
    pub entries: usize,
    pub per_iteration: BTreeMap<u32, IterationStats>,
}

pub fn filter_non_truncated(entries: Vec<PoolEntry>) -> Vec<PoolEntry> {
    entries.into_iter().filter(|e| !e.truncated).collect()
}

/// Up to `n_per_category` entries per category, drawn uniformly without
/// replacement. Output lists categories best first, each in input order.
/// Entries without a category are never selected.
pub fn balanced_select(entries: &[PoolEntry], n_per_category: usize, seed: u64) -> Vec<PoolEntry> {
    balanced_indices(entries, n_per_category, seed)
        .into_iter()
        .map(|i| entries[i].clone())
        .collect()
}

/// Indices chosen by [`balanced_select`].
pub fn balanced_indices(entries: &[PoolEntry], n_per_category: usize, seed: u64) -> Vec<usize> {
    let mut by_cat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if let Some(c) = e.category() {
            by_cat.entry(c).or_default().push(i);
        }
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (cat, mut idx) in by_cat {
        if idx.len() < n_per_category {
            log::debug!("category {cat}: {} of {n_per_category} available", idx.len());
        }
        rng.shuffle(&mut idx);
        idx.truncate(n_per_category);
        idx.sort_unstable();
        out.extend(idx);
    }
    out
}
