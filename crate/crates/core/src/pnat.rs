//! Partially non-autoregressive decoding: target groups, the matching decoder
//! self-attention mask, and the grouped loss.
//!
//! Groups are half-open ranges `[l_j, r_j)` tiling the target. A prediction at
//! position `i` of group `j` may condition on the source and on target tokens
//! `l_j..i` only. With one group this is ordinary teacher forcing.

use ndarray::Array2;

use crate::corruption::{Task, TrainingExample};
use crate::error::{bail, Result};
use crate::vocab::TokenId;

pub const DEFAULT_GROUPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    ranges: Vec<(usize, usize)>,
}

impl GroupPartition {
    /// Validates that `ranges` tile `[0, target_len)` in order.
    pub fn from_ranges(ranges: Vec<(usize, usize)>, target_len: usize) -> Result<Self> {
        if target_len == 0 {
            bail!(InvalidArgument, "cannot partition an empty target");
        }
        let mut expect = 0;
        for &(l, r) in &ranges {
            if l != expect || r <= l {
                bail!(InvalidArgument, "ranges {ranges:?} do not tile [0, {target_len})");
            }
            expect = r;
        }
        if expect != target_len {
            bail!(InvalidArgument, "ranges {ranges:?} do not tile [0, {target_len})");
        }
        Ok(Self { ranges })
    }

    /// A single group: standard left-to-right decoding.
    pub fn single(target_len: usize) -> Result<Self> {
        Self::from_ranges(vec![(0, target_len)], target_len)
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn n_groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn target_len(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1)
    }

    /// Group index of every target position.
    pub fn group_of(&self) -> Vec<usize> {
        let mut g = Vec::with_capacity(self.target_len());
        for (j, &(l, r)) in self.ranges.iter().enumerate() {
            g.extend(std::iter::repeat_n(j, r - l));
        }
        g
    }

    pub fn is_group_start(&self, i: usize) -> bool {
        self.ranges.iter().any(|&(l, _)| l == i)
    }
}

/// Sizes of `n_parts` near-equal parts of `total`; the first `total % n_parts`
/// parts take one extra.
fn balanced(total: usize, n_parts: usize) -> Vec<usize> {
    let base = total / n_parts;
    let extra = total % n_parts;
    (0..n_parts).map(|j| base + usize::from(j < extra)).collect()
}

/// Splits the target of `example` into at most `n_groups` decoding groups.
///
/// Span-bearing targets are grouped by runs of consecutive spans, each group
/// starting at its first span's sentinel; `n_groups` is clamped to the span
/// count. MT targets carry no sentinels and are cut into near-equal token
/// segments instead.
pub fn partition_groups(example: &TrainingExample, n_groups: usize) -> Result<GroupPartition> {
    let t = example.target.len();
    if t == 0 {
        bail!(InvalidArgument, "cannot partition an empty target");
    }
    if n_groups == 0 {
        bail!(InvalidArgument, "group count must be >= 1");
    }
    let starts: Vec<usize> = if example.task == Task::Mt {
        let mut acc = 0;
        balanced(t, n_groups.min(t))
            .into_iter()
            .map(|n| {
                let s = acc;
                acc += n;
                s
            })
            .collect()
    } else {
        let spans = &example.span_starts;
        if spans.is_empty() {
            bail!(InvalidArgument, "{} example has no span starts", example.task);
        }
        if spans[0] != 0 {
            bail!(InvalidArgument, "first span must start at target position 0");
        }
        if spans.windows(2).any(|w| w[0] >= w[1]) || *spans.last().unwrap() >= t {
            bail!(InvalidArgument, "span starts {spans:?} not increasing within target");
        }
        let m = spans.len();
        let mut first_span = 0;
        balanced(m, n_groups.min(m))
            .into_iter()
            .map(|n| {
                let s = spans[first_span];
                first_span += n;
                s
            })
            .collect()
    };
    let ranges = starts
        .iter()
        .enumerate()
        .map(|(j, &l)| (l, starts.get(j + 1).copied().unwrap_or(t)))
        .collect();
    GroupPartition::from_ranges(ranges, t)
}

/// Decoder self-attention mask: query `i` may attend to key `k` iff both lie
/// in the same group and `k <= i`. Cross-attention to the source is never
/// restricted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    group_of: Vec<usize>,
}

impl AttentionMaskSpec {
    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        key <= query && self.group_of[query] == self.group_of[key]
    }

    pub fn causal(len: usize) -> Self {
        Self {
            group_of: vec![0; len],
        }
    }

    pub fn to_matrix(&self) -> Array2<bool> {
        let n = self.len();
        Array2::from_shape_fn((n, n), |(i, k)| self.allowed(i, k))
    }
}

pub fn build_decoder_mask(partition: &GroupPartition, target_len: usize) -> Result<AttentionMaskSpec> {
    if partition.target_len() != target_len {
        bail!(
            InvalidArgument,
            "partition covers {} positions, target has {target_len}",
            partition.target_len()
        );
    }
    Ok(AttentionMaskSpec {
        group_of: partition.group_of(),
    })
}

fn gather_gold(log_probs: &Array2<f64>, target: &[TokenId]) -> Result<Vec<f64>> {
    if log_probs.nrows() != target.len() {
        bail!(
            InvalidArgument,
            "{} log-prob rows for a target of {} tokens",
            log_probs.nrows(),
            target.len()
        );
    }
    target
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            log_probs
                .get((i, y as usize))
                .copied()
                .ok_or_else(|| crate::error::Error::InvalidArgument(format!("target id {y} outside vocabulary")))
        })
        .collect()
}

/// `-sum_j sum_{i in [l_j, r_j)} log p(y_i | x, y_{l_j..i})`, given per-position
/// log-probabilities computed under the matching group mask.
pub fn pnat_loss(log_probs: &Array2<f64>, target: &[TokenId], partition: &GroupPartition) -> Result<f64> {
    if partition.target_len() != target.len() {
        bail!(
            InvalidArgument,
            "partition covers {} positions, target has {}",
            partition.target_len(),
            target.len()
        );
    }
    let gold = gather_gold(log_probs, target)?;
    let mut loss = 0.0;
    for &(l, r) in partition.ranges() {
        for lp in &gold[l..r] {
            loss -= lp;
        }
    }
    Ok(loss)
}

/// Plain text-to-text loss `-sum_i log p(y_i | x, y_<i)`.
pub fn text_to_text_loss(log_probs: &Array2<f64>, target: &[TokenId]) -> Result<f64> {
    Ok(-gather_gold(log_probs, target)?.iter().sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn span_example(span_starts: Vec<usize>, target_len: usize) -> TrainingExample {
        TrainingExample {
            task: Task::Sc,
            input: vec![20],
            target: vec![20; target_len],
            span_starts,
            groups: vec![],
        }
    }

    #[test]
    fn six_spans_three_groups() {
        let ex = span_example(vec![0, 2, 4, 6, 8, 10], 12);
        let p = partition_groups(&ex, 3).unwrap();
        assert_eq!(p.ranges(), &[(0, 4), (4, 8), (8, 12)]);
    }

    #[test]
    fn one_group_is_whole_target() {
        let ex = span_example(vec![0, 3, 5], 9);
        assert_eq!(partition_groups(&ex, 1).unwrap().ranges(), &[(0, 9)]);
    }

    #[test]
    fn five_spans_three_groups_by_hand() {
        // spans start at 0,2,5,6,9 in a 12-token target; runs of 2,2,1 spans
        let ex = span_example(vec![0, 2, 5, 6, 9], 12);
        let p = partition_groups(&ex, 3).unwrap();
        assert_eq!(p.ranges(), &[(0, 5), (5, 9), (9, 12)]);
    }

    #[test]
    fn group_count_clamped_to_span_count() {
        let ex = span_example(vec![0, 4], 7);
        assert_eq!(partition_groups(&ex, 5).unwrap().ranges(), &[(0, 4), (4, 7)]);
    }

    #[test]
    fn mt_targets_split_evenly() {
        let ex = TrainingExample {
            task: Task::Mt,
            input: vec![1],
            target: vec![9; 7],
            span_starts: vec![0],
            groups: vec![],
        };
        assert_eq!(partition_groups(&ex, 3).unwrap().ranges(), &[(0, 3), (3, 5), (5, 7)]);
        let short = TrainingExample {
            target: vec![9; 2],
            ..ex.clone()
        };
        assert_eq!(partition_groups(&short, 3).unwrap().ranges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn partition_errors() {
        assert!(partition_groups(&span_example(vec![], 0), 2).is_err());
        assert!(partition_groups(&span_example(vec![0], 3), 0).is_err());
        assert!(partition_groups(&span_example(vec![1], 3), 1).is_err());
        assert!(GroupPartition::from_ranges(vec![(0, 2), (3, 4)], 4).is_err());
        assert!(GroupPartition::from_ranges(vec![(0, 2)], 4).is_err());
    }

    #[test]
    fn mask_worked_example() {
        let p = GroupPartition::from_ranges(vec![(0, 2), (2, 4)], 4).unwrap();
        let m = build_decoder_mask(&p, 4).unwrap().to_matrix();
        let allowed: Vec<(usize, usize)> = m
            .indexed_iter()
            .filter(|(_, &a)| a)
            .map(|(ik, _)| ik)
            .collect();
        assert_eq!(allowed, vec![(0, 0), (1, 0), (1, 1), (2, 2), (3, 2), (3, 3)]);
        assert!(build_decoder_mask(&p, 5).is_err());
    }

    #[test]
    fn single_group_mask_is_causal() {
        let p = GroupPartition::single(6).unwrap();
        assert_eq!(build_decoder_mask(&p, 6).unwrap(), AttentionMaskSpec::causal(6));
    }

    fn random_partition(rng: &mut impl Rng, len: usize) -> GroupPartition {
        let mut cuts: Vec<usize> = (1..len).filter(|_| rng.random_bool(0.3)).collect();
        cuts.push(len);
        let mut l = 0;
        let ranges = cuts
            .into_iter()
            .map(|r| {
                let g = (l, r);
                l = r;
                g
            })
            .collect();
        GroupPartition::from_ranges(ranges, len).unwrap()
    }

    #[test]
    fn mask_matches_brute_force_predicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let len = rng.random_range(1..=12);
            let p = random_partition(&mut rng, len);
            let mask = build_decoder_mask(&p, len).unwrap();
            for i in 0..len {
                let mut row = 0;
                for k in 0..len {
                    let expect = p.ranges().iter().any(|&(l, r)| l <= k && k <= i && i < r);
                    assert_eq!(mask.allowed(i, k), expect);
                    row += usize::from(mask.allowed(i, k));
                }
                let (l, _) = p.ranges().iter().copied().find(|&(l, r)| l <= i && i < r).unwrap();
                assert_eq!(row, i - l + 1);
            }
        }
    }

    #[test]
    fn uniform_model_loss_is_partition_independent() {
        let lp = Array2::from_elem((6, 4), -(4f64.ln()));
        let target = [0, 1, 2, 3, 0, 1];
        for ranges in [vec![(0, 6)], vec![(0, 2), (2, 6)], vec![(0, 1), (1, 3), (3, 6)]] {
            let p = GroupPartition::from_ranges(ranges, 6).unwrap();
            let l = pnat_loss(&lp, &target, &p).unwrap();
            assert!((l - 6.0 * 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_length_mismatch() {
        let lp = Array2::from_elem((3, 4), -1.0);
        let p = GroupPartition::single(4).unwrap();
        assert!(pnat_loss(&lp, &[0, 1, 2, 3], &p).is_err());
        let p = GroupPartition::single(3).unwrap();
        assert!(pnat_loss(&lp, &[0, 1, 2, 3], &p).is_err());
        assert!(pnat_loss(&lp, &[0, 1, 9], &p).is_err());
    }

    #[test]
    fn single_group_equals_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = rng.random_range(1..10);
            let lp = Array2::from_shape_fn((t, 5), |_| -rng.random_range(0.0..5.0));
            let target: Vec<TokenId> = (0..t).map(|_| rng.random_range(0..5)).collect();
            let p = GroupPartition::single(t).unwrap();
            let a = pnat_loss(&lp, &target, &p).unwrap();
            let b = text_to_text_loss(&lp, &target).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
