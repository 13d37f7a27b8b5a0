use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A named set of sample indices that should be equally represented.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub name: String,
    pub members: Vec<usize>,
}

impl Group {
    pub fn new(name: impl Into<String>, members: Vec<usize>) -> Self {
        Group {
            name: name.into(),
            members,
        }
    }
}

/// Deterministic class-balanced batch sequence.
///
/// Every batch draws `batch_size / groups` items from each group, with the
/// remainder rotating across groups from batch to batch, so group counts in a
/// batch never differ by more than one. An epoch lasts until the largest group
/// has been seen once; smaller groups are cycled through fresh shuffles of
/// themselves to keep up, which oversamples them with replacement.
#[derive(Clone, Debug)]
pub struct BalancedBatcher {
    groups: Vec<Group>,
    batch_size: usize,
    seed: u64,
}

impl BalancedBatcher {
    pub fn new(groups: Vec<Group>, batch_size: usize, seed: u64) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidConfig(
                "balanced batching needs at least one group".into(),
            ));
        }
        if let Some(g) = groups.iter().find(|g| g.members.is_empty()) {
            return Err(Error::EmptyGroup(g.name.clone()));
        }
        if batch_size < groups.len() {
            return Err(Error::InvalidConfig(format!(
                "batch size {batch_size} is smaller than the number of groups {}",
                groups.len()
            )));
        }
        Ok(BalancedBatcher {
            groups,
            batch_size,
            seed,
        })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn batches_per_epoch(&self) -> usize {
        let largest = self.groups.iter().map(|g| g.members.len()).max().unwrap_or(0);
        if self.groups.len() == 1 {
            return largest.div_ceil(self.batch_size);
        }
        largest.div_ceil(self.batch_size / self.groups.len())
    }

    fn rng(&self, epoch: usize, group: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 16) | group as u64);
        rng
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        if self.groups.len() == 1 {
            let mut ids = self.groups[0].members.clone();
            ids.shuffle(&mut self.rng(epoch, 0));
            return ids.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        }
        let n_groups = self.groups.len();
        let base = self.batch_size / n_groups;
        let extra = self.batch_size % n_groups;
        let mut streams: Vec<GroupStream> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| GroupStream::new(&group.members, self.rng(epoch, g)))
            .collect();
        (0..self.batches_per_epoch())
            .map(|b| {
                let mut batch = Vec::with_capacity(self.batch_size);
                for (g, stream) in streams.iter_mut().enumerate() {
                    let bonus = usize::from((g + n_groups - b % n_groups) % n_groups < extra);
                    for _ in 0..base + bonus {
                        batch.push(stream.next());
                    }
                }
                batch
            })
            .collect()
    }

    /// The full sequence for `epochs` epochs, epoch after epoch.
    pub fn sequence(&self, epochs: usize) -> Vec<Vec<usize>> {
        (0..epochs).flat_map(|e| self.epoch(e)).collect()
    }
}

struct GroupStream {
    members: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl GroupStream {
    fn new(members: &[usize], rng: ChaCha8Rng) -> Self {
        GroupStream {
            members: members.to_vec(),
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.clone_from(&self.members);
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Convenience wrapper returning the batch sequence for `epochs` epochs.
pub fn balanced_batches(groups: Vec<Group>, batch_size: usize, seed: u64, epochs: usize) -> Result<Vec<Vec<usize>>> {
    Ok(BalancedBatcher::new(groups, batch_size, seed)?.sequence(epochs))
}
