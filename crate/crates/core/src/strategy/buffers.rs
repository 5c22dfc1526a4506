use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::detmetrics::DetectionSet;
use crate::error::{Error, Result};
use crate::model::FeatureMap;

/// Bounded history of per-frame features keyed by absolute frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBuffer<T = FeatureMap> {
    capacity: usize,
    entries: VecDeque<(i64, T)>,
}

impl<T> FeatureBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("feature buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert `index`, evicting the oldest entry when full. Returns the
    /// evicted index.
    pub fn push(&mut self, index: i64, item: T) -> Result<Option<i64>> {
        if let Some(&(last, _)) = self.entries.back() {
            if index <= last {
                return Err(Error::Contract(format!(
                    "feature buffer index {index} not after last stored {last}"
                )));
            }
        }
        self.entries.push_back((index, item));
        if self.entries.len() > self.capacity {
            return Ok(self.entries.pop_front().map(|(i, _)| i));
        }
        Ok(None)
    }

    pub fn get(&self, index: i64) -> Option<&T> {
        self.entries
            .binary_search_by_key(&index, |(i, _)| *i)
            .ok()
            .map(|pos| &self.entries[pos].1)
    }

    /// Stored indices, ascending.
    pub fn indices(&self) -> Vec<i64> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &T)> {
        self.entries.iter().map(|(i, t)| (*i, t))
    }
}

/// A buffered prediction together with the time it became available.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Buffered<T> {
    pub target: i64,
    pub produced_at: f64,
    pub value: T,
}

/// Pending predictions keyed by absolute target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBuffer<T = DetectionSet> {
    entries: BTreeMap<i64, Buffered<T>>,
}

impl<T> Default for OutputBuffer<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Clone> OutputBuffer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn targets(&self) -> Vec<i64> {
        self.entries.keys().copied().collect()
    }

    /// Store predictions produced at `produced_at`; a newer prediction for
    /// an existing target replaces the older one.
    pub fn push(&mut self, predictions: Vec<(i64, T)>, produced_at: f64) -> Result<()> {
        let mut seen: Vec<i64> = predictions.iter().map(|(t, _)| *t).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("duplicate targets in output push: {seen:?}")));
        }
        for (target, value) in predictions {
            self.entries.insert(
                target,
                Buffered {
                    target,
                    produced_at,
                    value,
                },
            );
        }
        Ok(())
    }

    /// Entry whose target is nearest to `query`, ties going to the later
    /// target. An entry at or before `query` is removed once returned.
    pub fn dispatch(&mut self, query: i64) -> Option<Buffered<T>> {
        let after = self.entries.range(query..).next().map(|(&t, _)| t);
        let before = self.entries.range(..query).next_back().map(|(&t, _)| t);
        let target = match (before, after) {
            (None, None) => return None,
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (Some(b), Some(a)) => {
                if query - b < a - query {
                    b
                } else {
                    a
                }
            }
        };
        if target <= query {
            self.entries.remove(&target)
        } else {
            self.entries.get(&target).cloned()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eviction_keeps_latest() {
        let mut b = FeatureBuffer::<()>::new(4).unwrap();
        for i in 1..=8 {
            b.push(i, ()).unwrap();
        }
        assert_eq!(b.indices(), vec![5, 6, 7, 8]);
        let mut b = FeatureBuffer::<()>::new(4).unwrap();
        b.push(3, ()).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.push(3, ()).is_err());
    }

    #[test]
    fn push_reports_evicted_min() {
        let mut b = FeatureBuffer::new(2).unwrap();
        assert_eq!(b.push(1, 'a').unwrap(), None);
        assert_eq!(b.push(4, 'b').unwrap(), None);
        assert_eq!(b.push(9, 'c').unwrap(), Some(1));
        assert_eq!(b.get(4), Some(&'b'));
        assert_eq!(b.get(1), None);
    }

    #[test]
    fn output_latest_write_wins() {
        let mut o = OutputBuffer::new();
        o.push(vec![(1, 'A'), (3, 'B')], 0.0).unwrap();
        assert_eq!(o.len(), 2);
        o.push(vec![(3, 'C')], 1.0).unwrap();
        assert_eq!(o.targets(), vec![1, 3]);
        assert_eq!(o.dispatch(3).unwrap().value, 'C');
        assert!(o.push(vec![(5, 'x'), (5, 'y')], 2.0).is_err());
    }

    #[test]
    fn dispatch_tie_goes_to_future() {
        let mut o = OutputBuffer::new();
        o.push(vec![(1, 'A'), (3, 'B')], 0.0).unwrap();
        assert_eq!(o.dispatch(2).unwrap().value, 'B');
        // B is ahead of the query so it stays
        assert_eq!(o.len(), 2);
        assert_eq!(o.dispatch(1).unwrap().value, 'A');
        assert_eq!(o.targets(), vec![3]);
    }

    #[test]
    fn dispatch_empty_is_none() {
        let mut o = OutputBuffer::<char>::new();
        assert!(o.dispatch(7).is_none());
    }

    proptest! {
        #[test]
        fn buffer_never_exceeds_capacity(cap in 1usize..8, n in 0i64..40) {
            let mut b = FeatureBuffer::<()>::new(cap).unwrap();
            for i in 0..n {
                let before = b.indices();
                let ev = b.push(i, ()).unwrap();
                prop_assert!(b.len() <= cap);
                if let Some(e) = ev {
                    prop_assert_eq!(Some(&e), before.iter().min());
                }
            }
        }

        #[test]
        fn dispatch_matches_brute_force(
            targets in proptest::collection::btree_set(-10i64..10, 1..6),
            q in -12i64..12,
        ) {
            let mut o = OutputBuffer::new();
            o.push(targets.iter().map(|&t| (t, t)).collect(), 0.0).unwrap();
            let best = targets
                .iter()
                .copied()
                .min_by_key(|&t| ((t - q).abs(), -t))
                .unwrap();
            let got = o.dispatch(q).unwrap();
            prop_assert_eq!(got.target, best);
            prop_assert_eq!(o.targets().contains(&best), best > q);
        }
    }
}
