use std::collections::BTreeMap;

use awb_tensor::RngStream;

use crate::error::{invalid, Result};

/// Batches of `p` labels with `k` items each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchConfig {
    pub p: usize,
    pub k: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { p: 8, k: 4 }
    }
}

impl BatchConfig {
    pub fn size(&self) -> usize {
        self.p * self.k
    }
}

/// Identity-balanced sampler. Labels are visited in shuffled rounds and
/// each label's items are drawn without replacement from a shuffled queue
/// that refills when exhausted, so small groups repeat items.
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
    cfg: BatchConfig,
    rng: RngStream,
}

impl PkSampler {
    pub fn new(labels: &[usize], cfg: BatchConfig, rng: RngStream) -> Result<Self> {
        if cfg.p < 2 || cfg.k < 2 {
            return Err(invalid!("batches need at least two labels and two items each, got {cfg:?}"));
        }
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        if by_label.len() < 2 {
            return Err(invalid!("sampling needs at least two distinct labels, got {}", by_label.len()));
        }
        let groups: Vec<Vec<usize>> = by_label.into_values().collect();
        let queues = vec![Vec::new(); groups.len()];
        Ok(Self { groups, queues, order: Vec::new(), cursor: 0, cfg, rng })
    }

    fn next_label(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.groups.len()).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn next_item(&mut self, g: usize) -> usize {
        if self.queues[g].is_empty() {
            let mut q = self.groups[g].clone();
            self.rng.shuffle(&mut q);
            q.reverse();
            self.queues[g] = q;
        }
        self.queues[g].pop().expect("refilled queue")
    }

    /// Item indices of the next batch; labels within a batch are distinct
    /// whenever there are at least `p` labels.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let p = self.cfg.p.min(self.groups.len());
        let mut labels = Vec::with_capacity(p);
        while labels.len() < p {
            let l = self.next_label();
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        let mut out = Vec::with_capacity(p * self.cfg.k);
        for l in labels {
            for _ in 0..self.cfg.k {
                let item = self.next_item(l);
                out.push(item);
            }
        }
        out
    }

    pub fn rng(&self) -> &RngStream {
        &self.rng
    }
}
