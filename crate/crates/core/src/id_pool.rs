//! Cross-epoch identity memory.
//!
//! Each identity keeps a within-epoch running mean `r̄` of the embeddings seen
//! this epoch and a finalized representation `r̂` that is blended across epochs
//! as `r̂ ← α·r̂ + (1 − α)·r̄` when the epoch closes. Everything starts at zero.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;
/// Norm floor used by the cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub domain_id: u32,
    pub running_mean: Array1<f64>,
    pub count: usize,
    pub finalized: Array1<f64>,
}

impl PoolEntry {
    fn has_representation(&self) -> bool {
        self.finalized.iter().any(|&v| v != 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdPool {
    dim: usize,
    alpha: f64,
    epoch: usize,
    entries: BTreeMap<u32, PoolEntry>,
}

/// One retrieved pool representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<'a> {
    pub identity_id: u32,
    pub similarity: f64,
    pub representation: ArrayView1<'a, f64>,
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(NORM_FLOOR);
    let nb = b.dot(&b).sqrt().max(NORM_FLOOR);
    a.dot(&b) / (na * nb)
}

impl IdPool {
    /// Registers every identity with its domain; all vectors start at zero.
    pub fn new(dim: usize, alpha: f64, identity_domains: &BTreeMap<u32, u32>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha = {alpha} outside [0, 1]")));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("pool dimension must be >= 1".into()));
        }
        let entries = identity_domains
            .iter()
            .map(|(&id, &domain_id)| {
                (
                    id,
                    PoolEntry {
                        domain_id,
                        running_mean: Array1::zeros(dim),
                        count: 0,
                        finalized: Array1::zeros(dim),
                    },
                )
            })
            .collect();
        Ok(Self {
            dim,
            alpha,
            epoch: 0,
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of completed `finalize_epoch` calls.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, identity_id: u32) -> Option<&PoolEntry> {
        self.entries.get(&identity_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, &PoolEntry)> {
        self.entries.iter().map(|(&id, e)| (id, e))
    }

    /// `r̄ ← (t·r̄ + x) / (t + 1)`, `t ← t + 1`. Stores values only.
    pub fn update_running_mean(&mut self, identity_id: u32, embedding: ArrayView1<f64>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding has {} entries, pool stores {}",
                embedding.len(),
                self.dim
            )));
        }
        let entry = self
            .entries
            .get_mut(&identity_id)
            .ok_or_else(|| Error::InvalidArgument(format!("identity {identity_id} is not registered in the pool")))?;
        let t = entry.count as f64;
        entry
            .running_mean
            .zip_mut_with(&embedding, |r, &x| *r = (t * *r + x) / (t + 1.0));
        entry.count += 1;
        Ok(())
    }

    /// Blends this epoch's means into `r̂` for identities seen this epoch,
    /// then resets the running means. Unseen identities keep their `r̂`.
    pub fn finalize_epoch(&mut self) {
        let alpha = self.alpha;
        for entry in self.entries.values_mut() {
            if entry.count > 0 {
                let PoolEntry {
                    running_mean,
                    finalized,
                    ..
                } = entry;
                finalized.zip_mut_with(running_mean, |r, &m| *r = alpha * *r + (1.0 - alpha) * m);
            }
            entry.running_mean.fill(0.0);
            entry.count = 0;
        }
        self.epoch += 1;
    }

    /// Top-`k` pooled representations by cosine similarity. A peripheral query
    /// searches other domains; a central query searches its own domain. The
    /// query identity and never-finalized identities are excluded. Ties go to
    /// the smaller identity id.
    pub fn query_topk(
        &self,
        query: ArrayView1<f64>,
        query_identity: u32,
        query_domain: u32,
        query_is_central: bool,
        k: usize,
    ) -> Result<Vec<Neighbor<'_>>> {
        if self.epoch == 0 {
            return Err(Error::InvalidArgument("ID pool has never been finalized".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query has {} entries, pool stores {}", query.len(), self.dim)));
        }
        let mut hits: Vec<Neighbor<'_>> = self
            .entries
            .iter()
            .filter(|(&id, e)| {
                id != query_identity
                    && e.has_representation()
                    && ((e.domain_id == query_domain) == query_is_central)
            })
            .map(|(&id, e)| Neighbor {
                identity_id: id,
                similarity: cosine_similarity(query, e.finalized.view()),
                representation: e.finalized.view(),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.identity_id.cmp(&b.identity_id))
        });
        hits.truncate(k);
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn pool(dim: usize, ids: &[(u32, u32)]) -> IdPool {
        IdPool::new(dim, DEFAULT_ALPHA, &ids.iter().copied().collect()).unwrap()
    }

    #[test]
    fn constant_and_two_point_means() {
        let mut p = pool(2, &[(0, 0)]);
        let v = array![0.3, -1.5];
        p.update_running_mean(0, v.view()).unwrap();
        p.update_running_mean(0, v.view()).unwrap();
        assert_eq!(p.entry(0).unwrap().running_mean, v);
        assert_eq!(p.entry(0).unwrap().count, 2);

        let mut p = pool(3, &[(0, 0)]);
        p.update_running_mean(0, array![0.0, 0.0, 0.0].view()).unwrap();
        p.update_running_mean(0, array![2.0, 2.0, 2.0].view()).unwrap();
        assert_eq!(p.entry(0).unwrap().running_mean, array![1.0, 1.0, 1.0]);
    }

    #[test]
    fn errors_on_unknown_identity_and_dim() {
        let mut p = pool(2, &[(0, 0)]);
        assert!(p.update_running_mean(9, array![1.0, 1.0].view()).is_err());
        assert!(p.update_running_mean(0, array![1.0].view()).is_err());
        assert!(IdPool::new(2, 1.5, &BTreeMap::new()).is_err());
    }

    #[test]
    fn first_epoch_and_alpha_one() {
        let mut p = pool(2, &[(0, 0)]);
        let v = array![1.0, -2.0];
        p.update_running_mean(0, v.view()).unwrap();
        p.finalize_epoch();
        assert_eq!(p.entry(0).unwrap().finalized, &v * 0.95);
        assert_eq!(p.entry(0).unwrap().count, 0);
        assert_eq!(p.epoch(), 1);

        let mut frozen = IdPool::new(2, 1.0, &[(0, 0)].into_iter().collect()).unwrap();
        frozen.update_running_mean(0, v.view()).unwrap();
        frozen.finalize_epoch();
        assert_eq!(frozen.entry(0).unwrap().finalized, array![0.0, 0.0]);
    }

    #[test]
    fn two_epoch_unroll() {
        let mut p = pool(2, &[(0, 0)]);
        let v1 = array![1.0, 3.0];
        let v2 = array![-2.0, 0.5];
        p.update_running_mean(0, v1.view()).unwrap();
        p.finalize_epoch();
        p.update_running_mean(0, v2.view()).unwrap();
        p.finalize_epoch();
        let expect = &v1 * (0.05 * 0.95) + &v2 * 0.95;
        for (a, b) in p.entry(0).unwrap().finalized.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unseen_identities_keep_their_representation() {
        let mut p = pool(2, &[(0, 0), (1, 0)]);
        p.update_running_mean(0, array![1.0, 0.0].view()).unwrap();
        p.update_running_mean(1, array![0.0, 1.0].view()).unwrap();
        p.finalize_epoch();
        let snapshot = p.entry(1).unwrap().finalized.clone();
        p.update_running_mean(0, array![2.0, 0.0].view()).unwrap();
        p.finalize_epoch();
        p.finalize_epoch();
        assert_eq!(p.entry(1).unwrap().finalized, snapshot);
    }

    #[test]
    fn topk_examples() {
        // idA = 0 and idB = 1 in domain 0, query identity 2 in domain 1
        let mut p = pool(2, &[(0, 0), (1, 0), (2, 1), (3, 1)]);
        p.update_running_mean(0, array![1.0, 0.0].view()).unwrap();
        p.update_running_mean(1, array![0.0, 1.0].view()).unwrap();
        p.update_running_mean(3, array![1.0, 1.0].view()).unwrap();
        p.finalize_epoch();

        let hits = p.query_topk(array![1.0, 0.0].view(), 2, 1, false, 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].identity_id, 0);

        let hits = p.query_topk(array![1.0, 0.0].view(), 2, 1, false, 5).unwrap();
        assert_eq!(hits.iter().map(|h| h.identity_id).collect::<Vec<_>>(), vec![0, 1]);

        // central query from domain 1: only domain-1 identities, never itself
        let hits = p.query_topk(array![1.0, 0.0].view(), 2, 1, true, 5).unwrap();
        assert_eq!(hits.iter().map(|h| h.identity_id).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn topk_requires_finalized_pool() {
        let p = pool(2, &[(0, 0)]);
        assert!(p.query_topk(array![1.0, 0.0].view(), 5, 1, false, 1).is_err());
    }

    #[test]
    fn zero_representations_are_ineligible() {
        let mut p = pool(2, &[(0, 0), (1, 0)]);
        p.update_running_mean(0, array![1.0, 0.0].view()).unwrap();
        p.finalize_epoch();
        let hits = p.query_topk(array![0.0, 1.0].view(), 7, 1, false, 4).unwrap();
        assert_eq!(hits.len(), 1);
    }

    proptest! {
        #[test]
        fn running_mean_matches_direct_mean(values in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..200)) {
            let mut p = pool(3, &[(4, 0)]);
            for v in &values {
                p.update_running_mean(4, ArrayView1::from(v.as_slice())).unwrap();
            }
            for c in 0..3 {
                let direct = values.iter().map(|v| v[c]).sum::<f64>() / values.len() as f64;
                prop_assert!((p.entry(4).unwrap().running_mean[c] - direct).abs() < 1e-6);
            }
        }

        #[test]
        fn finalize_is_idempotent_without_updates(v in proptest::collection::vec(-5.0f64..5.0, 2), epochs in 1usize..5) {
            let mut p = pool(2, &[(0, 0)]);
            p.update_running_mean(0, ArrayView1::from(v.as_slice())).unwrap();
            p.finalize_epoch();
            let once = p.entry(0).unwrap().finalized.clone();
            for _ in 0..epochs { p.finalize_epoch(); }
            prop_assert_eq!(&p.entry(0).unwrap().finalized, &once);
        }
    }
}
