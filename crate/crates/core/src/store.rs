//! Dataset registry with a per-split read counter.
//!
//! Training code only reaches examples through [`DataStore::read`] and
//! [`DataStore::read_all`], so the audit counters record every example that
//! any stage touched.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::{Example, Split, TlpDataset};

#[derive(Debug)]
pub struct DataStore {
    datasets: BTreeMap<String, TlpDataset>,
    reads: BTreeMap<(String, Split), AtomicU64>,
}

impl DataStore {
    pub fn new(datasets: impl IntoIterator<Item = TlpDataset>) -> Self {
        let mut map = BTreeMap::new();
        let mut reads = BTreeMap::new();
        for d in datasets {
            for split in Split::ALL {
                reads.insert((d.label.clone(), split), AtomicU64::new(0));
            }
            map.insert(d.label.clone(), d);
        }
        DataStore {
            datasets: map,
            reads,
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.datasets.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str)
    }

    /// Dataset metadata (task, sizes); reading examples goes through `read`.
    pub fn dataset(&self, label: &str) -> Result<&TlpDataset> {
        self.datasets
            .get(label)
            .ok_or_else(|| Error::MissingDataset(label.to_string()))
    }

    pub fn split_len(&self, label: &str, split: Split) -> Result<usize> {
        Ok(self.dataset(label)?.split(split).len())
    }

    fn count(&self, label: &str, split: Split, n: usize) {
        if let Some(c) = self.reads.get(&(label.to_string(), split)) {
            c.fetch_add(n as u64, Ordering::Relaxed);
        }
    }

    /// Returns the examples at `indices`, counting each as one read.
    pub fn read(&self, label: &str, split: Split, indices: &[usize]) -> Result<Vec<&Example>> {
        let data = self.dataset(label)?.split(split);
        let out = indices
            .iter()
            .map(|&i| {
                data.get(i).ok_or_else(|| Error::Dimension(format!("{label}/{}: index {i}", split.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        self.count(label, split, out.len());
        Ok(out)
    }

    pub fn read_all(&self, label: &str, split: Split) -> Result<&[Example]> {
        let data = self.dataset(label)?.split(split);
        self.count(label, split, data.len());
        Ok(data)
    }

    /// Draws a batch of up to `batch_size` distinct examples from a split.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        label: &str,
        split: Split,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&Example>> {
        let indices = batch_indices(self.split_len(label, split)?, batch_size, rng).ok_or_else(|| {
            Error::EmptySplit {
                tlp: label.to_string(),
                split: split.name().to_string(),
            }
        })?;
        self.read(label, split, &indices)
    }

    pub fn reads(&self, label: &str, split: Split) -> u64 {
        self.reads
            .get(&(label.to_string(), split))
            .map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn snapshot(&self) -> AuditSnapshot {
        AuditSnapshot(
            self.reads
                .iter()
                .map(|(k, v)| (k.clone(), v.load(Ordering::Relaxed)))
                .collect(),
        )
    }
}

/// `min(batch_size, len)` distinct indices drawn uniformly; `None` when the
/// split is empty.
pub fn batch_indices<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Option<Vec<usize>> {
    if len == 0 || batch_size == 0 {
        return None;
    }
    Some(index::sample(rng, len, batch_size.min(len)).into_vec())
}

/// Frozen copy of every read counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditSnapshot(pub BTreeMap<(String, Split), u64>);

impl AuditSnapshot {
    /// Counters that grew between `self` and `later`.
    pub fn touched_since(&self, later: &AuditSnapshot) -> Vec<(String, Split)> {
        later
            .0
            .iter()
            .filter(|(k, v)| self.0.get(*k).copied().unwrap_or(0) < **v)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn get(&self, label: &str, split: Split) -> u64 {
        self.0.get(&(label.to_string(), split)).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{LanguageId, TaskId, TlpGrid};
    use crate::rng::stream;
    use crate::synth::{generate_grid, GeneratorSpec};

    fn store() -> DataStore {
        let grid = TlpGrid::dense(
            vec![TaskId::shallow("POS", 3)],
            vec![LanguageId::new("en"), LanguageId::new("de")],
            5,
        )
        .unwrap();
        DataStore::new(generate_grid(&grid, &GeneratorSpec::default(), 1).unwrap())
    }

    #[test]
    fn reads_are_counted_per_split() {
        let s = store();
        let before = s.snapshot();
        s.read("POS.en", Split::Train, &[0, 1, 1]).unwrap();
        s.read_all("POS.de", Split::Dev).unwrap();
        assert_eq!(s.reads("POS.en", Split::Train), 3);
        assert_eq!(s.reads("POS.de", Split::Dev), 100);
        assert_eq!(s.reads("POS.de", Split::Train), 0);
        let touched = before.touched_since(&s.snapshot());
        assert_eq!(
            touched,
            vec![("POS.de".to_string(), Split::Dev), ("POS.en".to_string(), Split::Train)]
        );
        // metadata does not count
        s.split_len("POS.de", Split::Train).unwrap();
        s.dataset("POS.de").unwrap();
        assert_eq!(s.reads("POS.de", Split::Train), 0);
    }

    #[test]
    fn batches_are_capped_by_split_size() {
        let s = store();
        let mut rng = stream(0, "b", &[]);
        assert_eq!(s.sample_batch("POS.en", Split::Train, 16, &mut rng).unwrap().len(), 5);
        assert_eq!(s.sample_batch("POS.en", Split::Train, 2, &mut rng).unwrap().len(), 2);
        assert!(s.read("POS.en", Split::Train, &[9]).is_err());
        assert!(matches!(s.dataset("QA.en"), Err(Error::MissingDataset(_))));
        assert!(batch_indices(0, 4, &mut rng).is_none());
    }
}
