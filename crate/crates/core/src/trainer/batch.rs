//! Group-stratified mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::group::Group;

/// Per-group queue that reshuffles itself whenever it runs dry.
#[derive(Debug, Clone)]
struct GroupQueue {
    members: Vec<usize>,
    order: Vec<usize>,
    next: usize,
}

impl GroupQueue {
    fn pop(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.next == self.order.len() {
            self.order.clone_from(&self.members);
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// An endless, seeded sequence of batches of training-utterance indices.
///
/// Each batch splits its slots evenly between the groups present, so both
/// groups contribute at least `batch_size / 2` utterances. Each group is
/// reshuffled independently every time its queue is exhausted.
#[derive(Debug, Clone)]
pub struct BatchStream {
    queues: Vec<GroupQueue>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let k = self.queues.len();
        let mut batch = Vec::with_capacity(self.batch_size);
        for (i, q) in self.queues.iter_mut().enumerate() {
            let quota = self.batch_size / k + usize::from(i < self.batch_size % k);
            for _ in 0..quota {
                batch.push(q.pop(&mut self.rng));
            }
        }
        Some(batch)
    }
}

/// Builds the batch stream over utterances labelled `groups`.
///
/// Returns `None` for an empty corpus. A single-group corpus yields valid
/// batches, on which the risk-variance penalty will be disabled.
pub fn make_batches(groups: &[Group], batch_size: usize, seed: u64) -> Option<BatchStream> {
    if groups.is_empty() || batch_size == 0 {
        return None;
    }
    let queues: Vec<GroupQueue> = Group::ALL
        .iter()
        .map(|g| {
            let members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == *g).collect();
            GroupQueue {
                order: Vec::new(),
                next: 0,
                members,
            }
        })
        .filter(|q| !q.members.is_empty())
        .collect();
    if queues.len() < Group::ALL.len() {
        log::warn!("training corpus contains a single group; the risk-variance penalty stays off");
    }
    Some(BatchStream {
        queues,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}
