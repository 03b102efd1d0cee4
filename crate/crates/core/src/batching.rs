//! Index bookkeeping for two-view and multiview batches.
//!
//! Views are laid out block-major: indices `0..N` hold the first expert view
//! of each anchor (set I1), `N..2N` the second expert view (set I2), and each
//! further block of `N` holds one generated view per anchor. Appending more
//! generated views therefore never renumbers existing ones.

use viewlab_autodiff::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexMap {
    anchors: usize,
    generated: usize,
}

impl IndexMap {
    pub fn build_two_view(batch_size: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::config(format!(
                "a contrastive batch needs at least 2 anchors, got {batch_size}"
            )));
        }
        Ok(IndexMap {
            anchors: batch_size,
            generated: 0,
        })
    }

    /// Adds `views_per_anchor` generated views for every anchor.
    pub fn append_generated(&self, views_per_anchor: usize) -> Result<Self> {
        if views_per_anchor < 1 {
            return Err(Error::config("append_generated needs at least one view per anchor"));
        }
        Ok(IndexMap {
            anchors: self.anchors,
            generated: self.generated + views_per_anchor,
        })
    }

    /// Number of anchors `N`.
    pub fn anchors(&self) -> usize {
        self.anchors
    }

    /// Generated views per anchor `m`.
    pub fn generated_per_anchor(&self) -> usize {
        self.generated
    }

    /// `|I|`.
    pub fn len(&self) -> usize {
        (2 + self.generated) * self.anchors
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn expert_count(&self) -> usize {
        2 * self.anchors
    }

    pub fn is_expert(&self, i: usize) -> bool {
        i < self.expert_count()
    }

    pub fn first_set(&self) -> std::ops::Range<usize> {
        0..self.anchors
    }

    pub fn second_set(&self) -> std::ops::Range<usize> {
        self.anchors..2 * self.anchors
    }

    pub fn expert_indices(&self) -> std::ops::Range<usize> {
        0..self.expert_count()
    }

    pub fn generated_indices(&self) -> std::ops::Range<usize> {
        self.expert_count()..self.len()
    }

    /// Position of the anchor that view `i` came from.
    pub fn anchor_of(&self, i: usize) -> usize {
        i % self.anchors
    }

    /// `j(i)`: the other expert view of the same anchor (`None` for generated views).
    pub fn partner(&self, i: usize) -> Option<usize> {
        if i < self.anchors {
            Some(i + self.anchors)
        } else if i < 2 * self.anchors {
            Some(i - self.anchors)
        } else {
            None
        }
    }

    /// `k(i)`: generated views of the anchor behind expert view `i` (empty for generated views).
    pub fn generated_of(&self, i: usize) -> Vec<usize> {
        if !self.is_expert(i) {
            return Vec::new();
        }
        let a = self.anchor_of(i);
        (0..self.generated)
            .map(|r| (2 + r) * self.anchors + a)
            .collect()
    }

    /// `A(i) = I \ {i}`.
    pub fn complement(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&a| a != i).collect()
    }

    /// `P(i) = {j(i)} ∪ k(i)`.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        let mut p: Vec<usize> = self.partner(i).into_iter().collect();
        p.extend(self.generated_of(i));
        p
    }
}

/// Views with their index bookkeeping and dataset ids.
#[derive(Clone, Debug)]
pub struct MultiviewBatch {
    /// `[V, C, H, W]` in index-map order.
    pub views: Tensor,
    /// Dataset id of the anchor behind each view.
    pub anchor_ids: Vec<u64>,
    pub index_map: IndexMap,
    /// Unit embeddings `[V, K]`, once computed.
    pub embeddings: Option<Tensor>,
}

impl MultiviewBatch {
    pub fn new(views: Tensor, anchor_ids: Vec<u64>, index_map: IndexMap) -> Result<Self> {
        if views.rows() != index_map.len() || anchor_ids.len() != index_map.len() {
            return Err(Error::config(format!(
                "batch has {} views and {} ids but the index map covers {}",
                views.rows(),
                anchor_ids.len(),
                index_map.len()
            )));
        }
        Ok(MultiviewBatch {
            views,
            anchor_ids,
            index_map,
            embeddings: None,
        })
    }

    pub fn with_embeddings(mut self, z: Tensor) -> Result<Self> {
        if z.rows() != self.index_map.len() {
            return Err(Error::config("embedding count does not match views"));
        }
        self.embeddings = Some(z);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_two_view_batch() {
        let m = IndexMap::build_two_view(2).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.partner(0), Some(2));
        assert_eq!(m.partner(2), Some(0));
        assert_eq!(m.complement(0), vec![1, 2, 3]);
        assert!(m.generated_of(0).is_empty());
    }

    #[test]
    fn complement_cardinality() {
        let m = IndexMap::build_two_view(3).unwrap();
        for i in 0..m.len() {
            assert_eq!(m.complement(i).len(), 5);
        }
    }

    #[test]
    fn rejects_tiny_batches_and_zero_appends() {
        assert!(IndexMap::build_two_view(1).is_err());
        assert!(IndexMap::build_two_view(0).is_err());
        let m = IndexMap::build_two_view(2).unwrap();
        assert!(m.append_generated(0).is_err());
    }

    #[test]
    fn partner_is_an_involution_for_128() {
        let m = IndexMap::build_two_view(128).unwrap();
        for i in m.expert_indices() {
            let j = m.partner(i).unwrap();
            assert_ne!(i, j);
            assert_eq!(m.partner(j), Some(i));
        }
    }

    #[test]
    fn append_one_view_to_two_anchors() {
        let m = IndexMap::build_two_view(2).unwrap().append_generated(1).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.generated_of(0), vec![4]);
        assert_eq!(m.generated_of(2), vec![4]);
        assert_eq!(m.generated_of(1), vec![5]);
        assert_eq!(m.partner(4), None);
    }

    #[test]
    fn positives_after_append_for_64_by_2() {
        let m = IndexMap::build_two_view(64).unwrap().append_generated(2).unwrap();
        for i in 0..m.len() {
            let p = m.positives(i);
            assert!(!p.contains(&i));
            let mut expect: Vec<usize> = m.partner(i).into_iter().collect();
            expect.extend(m.generated_of(i));
            assert_eq!(p, expect);
            if m.is_expert(i) {
                assert_eq!(p.len(), 3);
            }
        }
    }

    #[test]
    fn batch_rejects_mismatched_lengths() {
        let m = IndexMap::build_two_view(2).unwrap();
        let views = Tensor::zeros(&[3, 1, 2, 2]);
        assert!(MultiviewBatch::new(views, vec![0, 1, 0], m).is_err());
    }

    proptest! {
        #[test]
        fn positives_are_exactly_the_views_sharing_an_anchor(n in 2usize..20, m in 0usize..4) {
            let mut map = IndexMap::build_two_view(n).unwrap();
            if m > 0 {
                map = map.append_generated(m).unwrap();
            }
            prop_assert_eq!(map.len(), (2 + m) * n);
            for i in map.expert_indices() {
                let mut same: Vec<usize> = (0..map.len())
                    .filter(|&v| v != i && map.anchor_of(v) == map.anchor_of(i))
                    .collect();
                let mut p = map.positives(i);
                same.sort_unstable();
                p.sort_unstable();
                prop_assert_eq!(p, same);
                prop_assert!(!map.complement(i).contains(&i));
                prop_assert_eq!(map.complement(i).len(), map.len() - 1);
            }
        }
    }
}
