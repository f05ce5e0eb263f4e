use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Endless shuffled passes over a list of indices.
#[derive(Clone, Debug)]
struct Cycle {
    items: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(items: Vec<usize>) -> Self {
        let pos = items.len();
        Self { items, pos }
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

/// Mini-batch sampler that puts at least `min_per_class` samples of every
/// class in each batch and fills the rest from a shuffled pass over all
/// samples. Indices within one batch are distinct.
#[derive(Clone, Debug)]
pub struct StratifiedSampler {
    batch_size: usize,
    min_per_class: usize,
    classes: Vec<Cycle>,
    all: Cycle,
    n: usize,
}

impl StratifiedSampler {
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize, min_per_class: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Config(format!("training label {l} outside [0, {num_classes})")));
            }
            members[l].push(i);
        }
        if let Some(c) = members.iter().position(|m| m.len() < min_per_class) {
            return Err(Error::Config(format!(
                "class {c} has {} training samples; stratified batches need at least {min_per_class}",
                members[c].len()
            )));
        }
        let batch_size = batch_size.min(labels.len());
        if batch_size < min_per_class * num_classes {
            return Err(Error::Config(format!(
                "batch size {batch_size} cannot hold {min_per_class} samples of each of {num_classes} classes"
            )));
        }
        Ok(Self {
            batch_size,
            min_per_class,
            classes: members.into_iter().map(Cycle::new).collect(),
            all: Cycle::new((0..labels.len()).collect()),
            n: labels.len(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        let mut taken = vec![false; self.n];
        let mut batch = Vec::with_capacity(self.batch_size);
        for cycle in &mut self.classes {
            let mut got = 0;
            while got < self.min_per_class {
                let i = cycle.next(rng);
                if !taken[i] {
                    taken[i] = true;
                    batch.push(i);
                    got += 1;
                }
            }
        }
        while batch.len() < self.batch_size {
            let i = self.all.next(rng);
            if !taken[i] {
                taken[i] = true;
                batch.push(i);
            }
        }
        batch
    }
}
