//! Token-budgeted batching.

use log::warn;

use crate::model::Batch;
use crate::rng;

/// A corpus already mapped to subword ids (no control symbols).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl EncodedCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn lengths(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|(s, t)| (s.len(), t.len())).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let pairs: Vec<(&[u32], &[u32])> = indices
            .iter()
            .map(|&i| (self.pairs[i].0.as_slice(), self.pairs[i].1.as_slice()))
            .collect();
        Batch::from_pairs(&pairs)
    }
}

/// Groups pair indices into batches whose padded size on the longer side,
/// `count * max(longest source, longest target)`, stays within `max_tokens`.
///
/// Pairs are shuffled, stably sorted by length so similar lengths share a
/// batch, cut greedily, and the batch order is shuffled again. A pair longer
/// than the budget becomes a batch of its own.
pub fn plan_token_batches(lengths: &[(usize, usize)], max_tokens: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    rng::shuffle(&mut order, &mut rng);
    let key = |i: usize| lengths[i].0.max(lengths[i].1);
    order.sort_by_key(|&i| key(i));

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widest = 0usize;
    for i in order {
        let len = key(i);
        if len > max_tokens {
            warn!("sentence pair {i} has {len} tokens, above the batch budget of {max_tokens}; batching it alone");
        }
        let grown = widest.max(len) * (current.len() + 1);
        if !current.is_empty() && grown > max_tokens {
            batches.push(std::mem::take(&mut current));
            widest = 0;
        }
        widest = widest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    rng::shuffle(&mut batches, &mut rng);
    batches
}

/// One epoch of batches over `corpus`.
pub fn make_token_batches(corpus: &EncodedCorpus, max_tokens: usize, seed: u64) -> Vec<Batch> {
    plan_token_batches(&corpus.lengths(), max_tokens, seed)
        .iter()
        .map(|idx| corpus.batch(idx))
        .collect()
}

/// Deterministic length-sorted batches for evaluation; no shuffling.
pub fn eval_batches(corpus: &EncodedCorpus, max_tokens: usize) -> Vec<Batch> {
    let lengths = corpus.lengths();
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i].0.max(lengths[i].1));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widest = 0;
    for i in order {
        let len = lengths[i].0.max(lengths[i].1) + 1;
        if !current.is_empty() && widest.max(len) * (current.len() + 1) > max_tokens {
            batches.push(corpus.batch(&current));
            current.clear();
            widest = 0;
        }
        widest = widest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(corpus.batch(&current));
    }
    batches
}

/// Endless stream of training batches, reshuffled every epoch.
pub struct BatchStream<'a> {
    corpus: &'a EncodedCorpus,
    max_tokens: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a EncodedCorpus, max_tokens: usize, seed: u64) -> Self {
        Self {
            corpus,
            max_tokens,
            seed,
            epoch: 0,
            queue: Vec::new().into_iter(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn epoch_seed(&self) -> u64 {
        self.seed ^ self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.corpus.is_empty() {
            return None;
        }
        loop {
            if let Some(idx) = self.queue.next() {
                return Some(self.corpus.batch(&idx));
            }
            self.epoch += 1;
            let plan = plan_token_batches(&self.corpus.lengths(), self.max_tokens, self.epoch_seed());
            self.queue = plan.into_iter();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closing_rule_with_padding() {
        let plan = plan_token_batches(&[(5, 5), (5, 5), (5, 5)], 10, 1);
        let mut sizes: Vec<usize> = plan.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, [2, 1]);
    }

    #[test]
    fn large_budget_single_batch() {
        let lengths = [(3, 4), (1, 2), (6, 2), (2, 2)];
        let plan = plan_token_batches(&lengths, 4 * 6, 9);
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].len(), 4);
    }

    #[test]
    fn oversize_pair_is_alone() {
        let plan = plan_token_batches(&[(2, 2), (50, 3), (2, 1)], 10, 3);
        assert!(plan.iter().any(|b| b == &vec![1]));
        assert_eq!(plan.iter().map(Vec::len).sum::<usize>(), 3);
    }

    #[test]
    fn padding_counted_on_longer_side() {
        // 2 pairs: longest source 2, longest target 6 -> 12 padded tokens
        let plan = plan_token_batches(&[(2, 6), (2, 1)], 11, 0);
        assert_eq!(plan.len(), 2);
        let plan = plan_token_batches(&[(2, 6), (2, 1)], 12, 0);
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn stream_cycles_epochs() {
        let corpus = EncodedCorpus {
            pairs: (0..5).map(|i| (vec![4 + i], vec![4])).collect(),
        };
        let mut s = BatchStream::new(&corpus, 2, 7);
        let first: usize = (&mut s).take(3).map(|b| b.size).sum();
        assert_eq!(first, 5);
        assert_eq!(s.epoch(), 1);
        s.next();
        assert_eq!(s.epoch(), 2);
    }

    #[test]
    fn eval_batches_cover_everything_in_order() {
        let corpus = EncodedCorpus {
            pairs: (0..7).map(|i| (vec![4; i + 1], vec![5; 7 - i])).collect(),
        };
        let batches = eval_batches(&corpus, 16);
        assert_eq!(batches.iter().map(|b| b.size).sum::<usize>(), 7);
        assert!(batches.iter().all(|b| b.size * b.src_len.max(b.tgt_len) <= 16 || b.size == 1));
    }
}
