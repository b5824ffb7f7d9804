//! Per-class embedding prototypes maintained from bounded exemplar queues.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::rng::Rng;

/// Smallest standard deviation a prototype may carry.
pub const MIN_SIGMA: f64 = 1e-8;
/// Added under the square root of batch deviations so the gradient stays finite at zero spread.
pub const SIGMA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Mean and deviation prototypes for every class whose queue has activated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub classes: BTreeMap<ClassId, Prototype>,
}

impl ClassPrototypes {
    pub fn get(&self, c: ClassId) -> Option<&Prototype> {
        self.classes.get(&c)
    }

    pub fn is_initialized(&self, c: ClassId) -> bool {
        self.classes.contains_key(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    /// Maximum exemplars kept per class.
    pub capacity: usize,
    /// Maximum exemplars pushed per class per step.
    pub push_per_step: usize,
    /// Queue length a class must exceed before its prototype is computed.
    pub min_len: usize,
    /// Polyak factor.
    pub eta: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { capacity: 1000, push_per_step: 2, min_len: 100, eta: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryQueue {
    pub config: QueueConfig,
    pub queues: BTreeMap<ClassId, VecDeque<Vec<f64>>>,
}

impl MemoryQueue {
    pub fn new(config: QueueConfig) -> Self {
        Self { config, queues: BTreeMap::new() }
    }

    pub fn len(&self, c: ClassId) -> usize {
        self.queues.get(&c).map_or(0, VecDeque::len)
    }

    fn push(&mut self, c: ClassId, v: Vec<f64>) {
        let q = self.queues.entry(c).or_default();
        q.push_back(v);
        while q.len() > self.config.capacity {
            q.pop_front();
        }
    }

    /// Element-wise mean and (population) standard deviation of a class queue.
    pub fn stats(&self, c: ClassId) -> Option<(Vec<f64>, Vec<f64>)> {
        let q = self.queues.get(&c).filter(|q| !q.is_empty())?;
        let n = q.len() as f64;
        let d = q[0].len();
        let mut mean = vec![0.0; d];
        for v in q {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for v in q {
            var.iter_mut().zip(v).zip(&mean).for_each(|((s, x), m)| *s += (x - m) * (x - m) / n);
        }
        Some((mean, var.into_iter().map(|s| s.sqrt().max(MIN_SIGMA)).collect()))
    }
}

/// Pushes up to `push_per_step` embeddings per class (uniformly without
/// replacement), evicts the oldest beyond capacity, then refreshes the
/// prototypes of every class whose queue is longer than `min_len` by Polyak
/// averaging. A class's first activation copies the queue statistics.
pub fn queue_update(
    queue: &mut MemoryQueue,
    protos: &mut ClassPrototypes,
    embeds_by_class: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    rng: &mut Rng,
) {
    let cfg = queue.config;
    for (&c, embeds) in embeds_by_class {
        let k = cfg.push_per_step.min(embeds.len());
        let mut picked: Vec<usize> = sample(rng, embeds.len(), k).into_vec();
        picked.sort_unstable();
        for i in picked {
            queue.push(c, embeds[i].clone());
        }
    }
    let ready: Vec<ClassId> = queue.queues.keys().copied().filter(|&c| queue.len(c) > cfg.min_len).collect();
    for c in ready {
        let (mean, std) = queue.stats(c).expect("non-empty queue");
        match protos.classes.get_mut(&c) {
            Some(p) => {
                for (m, x) in p.mu.iter_mut().zip(&mean) {
                    *m = cfg.eta * *m + (1.0 - cfg.eta) * x;
                }
                for (s, x) in p.sigma.iter_mut().zip(&std) {
                    *s = (cfg.eta * *s + (1.0 - cfg.eta) * x).max(MIN_SIGMA);
                }
            }
            None => {
                protos.classes.insert(c, Prototype { mu: mean, sigma: std });
            }
        }
    }
}

/// Per-class batch statistics: the batch mean and the root mean square
/// deviation of the batch from the class's prototype mean. Classes without a
/// prototype or without samples are left out.
pub fn batch_stats(
    embeds_by_class: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    protos: &ClassPrototypes,
) -> BTreeMap<ClassId, (Vec<f64>, Vec<f64>)> {
    embeds_by_class
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .filter_map(|(&c, vs)| {
            let proto = protos.get(c)?;
            let n = vs.len() as f64;
            let d = proto.mu.len();
            let mut mean = vec![0.0; d];
            let mut sq = vec![0.0; d];
            for v in vs {
                for j in 0..d {
                    mean[j] += v[j] / n;
                    let dev = v[j] - proto.mu[j];
                    sq[j] += dev * dev / n;
                }
            }
            Some((c, (mean, sq.into_iter().map(|s| (s + SIGMA_EPS).sqrt()).collect())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn one_class(c: ClassId, vs: Vec<Vec<f64>>) -> BTreeMap<ClassId, Vec<Vec<f64>>> {
        BTreeMap::from([(c, vs)])
    }

    fn proto_1d(mu: f64, sigma: f64) -> ClassPrototypes {
        ClassPrototypes { classes: BTreeMap::from([(0, Prototype { mu: vec![mu], sigma: vec![sigma] })]) }
    }

    #[test]
    fn batch_stats_hand_values() {
        let s = batch_stats(&one_class(0, vec![vec![-1.0], vec![1.0]]), &proto_1d(0.0, 1.0));
        let (m, sd) = &s[&0];
        assert_eq!(m[0], 0.0);
        assert!((sd[0] - 1.0).abs() < 1e-12);

        let s = batch_stats(&one_class(0, vec![vec![0.0], vec![2.0], vec![4.0]]), &proto_1d(1.0, 1.0));
        let (m, sd) = &s[&0];
        assert!((m[0] - 2.0).abs() < 1e-15);
        assert!((sd[0] - (11.0f64 / 3.0).sqrt()).abs() < 1e-12);

        let s = batch_stats(&one_class(0, vec![vec![0.5]; 4]), &proto_1d(0.5, 1.0));
        assert!(s[&0].1[0] < 1e-5);
    }

    #[test]
    fn batch_stats_skips_unknown_and_empty() {
        let mut m = one_class(3, vec![vec![1.0]]);
        m.insert(0, vec![]);
        assert!(batch_stats(&m, &proto_1d(0.0, 1.0)).is_empty());
    }

    #[test]
    fn first_activation_copies_then_polyak() {
        let cfg = QueueConfig { capacity: 1000, push_per_step: 2, min_len: 3, eta: 0.999 };
        let mut q = MemoryQueue::new(cfg);
        let mut p = ClassPrototypes::default();
        let mut rng = substream(0, 0);
        // 4 pushes of the value 0 activate the prototype at exactly 0
        q.queues.insert(0, std::iter::repeat_n(vec![0.0], 3).collect());
        queue_update(&mut q, &mut p, &one_class(0, vec![vec![0.0]]), &mut rng);
        assert_eq!(p.get(0).unwrap().mu, vec![0.0]);
        // replace the queue so its mean is 1: mu = 0.999 * 0 + 0.001 * 1
        q.queues.insert(0, std::iter::repeat_n(vec![1.0], 10).collect());
        queue_update(&mut q, &mut p, &one_class(0, vec![vec![1.0]]), &mut rng);
        assert!((p.get(0).unwrap().mu[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn eta_one_freezes_prototypes() {
        let cfg = QueueConfig { eta: 1.0, min_len: 0, ..QueueConfig::default() };
        let mut q = MemoryQueue::new(cfg);
        let mut p = proto_1d(5.0, 2.0);
        let before = p.clone();
        queue_update(&mut q, &mut p, &one_class(0, vec![vec![1.0], vec![3.0]]), &mut substream(0, 0));
        assert_eq!(p, before);
    }

    #[test]
    fn short_queue_leaves_prototypes() {
        let mut q = MemoryQueue::new(QueueConfig::default());
        let mut p = proto_1d(5.0, 2.0);
        let before = p.clone();
        for _ in 0..50 {
            queue_update(&mut q, &mut p, &one_class(0, vec![vec![1.0], vec![3.0], vec![2.0]]), &mut substream(0, 0));
        }
        assert_eq!(q.len(0), 100);
        assert_eq!(p, before);
    }

    #[test]
    fn push_cap_and_capacity() {
        let cfg = QueueConfig { capacity: 5, push_per_step: 2, min_len: 100, eta: 0.9 };
        let mut q = MemoryQueue::new(cfg);
        let mut p = ClassPrototypes::default();
        let mut rng = substream(0, 0);
        queue_update(&mut q, &mut p, &one_class(1, (0..7).map(|i| vec![i as f64]).collect()), &mut rng);
        assert_eq!(q.len(1), 2);
        for _ in 0..10 {
            queue_update(&mut q, &mut p, &one_class(1, (0..7).map(|i| vec![i as f64]).collect()), &mut rng);
            assert!(q.len(1) <= 5);
        }
    }
}
