//! Property suites shared by the `invariants` and `acceptance` test targets.
//! Each suite drives its own proptest runner and returns the first failure.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use citrack::assignment::{hungarian_min, max_weight_matching};
use citrack::config::{general_to_specific, ExperimentConfig};
use citrack::continual::{build_world, generate_det_pls, run_protocol};
use citrack::dataset::{load_dataset, save_dataset, ClassSet, SequenceDataset};
use citrack::labels::{merge_labels, select_sequences, strip_labels, Method};
use citrack::losses::contrastive::{pull_loss, push_distance, push_loss};
use citrack::losses::gaussian::bhattacharyya;
use citrack::losses::{queue_update, ClassPrototypes, MemoryQueue, Prototype, QueueConfig};
use citrack::metrics::evaluate;
use citrack::model::{ModelDims, ModelParams, OptState, OptimizerConfig, TrackingModel};
use citrack::rng::substream;
use citrack::simworld::{corrupt_detections, generate_world, NoiseConfig, WorldConfig};
use citrack::tracker::{assign, track_dataset, TrackerConfig};

pub type Suite = fn() -> Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn tiny_world(seed: u64) -> WorldConfig {
    WorldConfig {
        n_classes: 3,
        class_frequencies: vec![3.0, 2.0, 1.0],
        feature_dim: 6,
        latent_dim: 3,
        frames_per_sequence: 6,
        n_sequences: 3,
        n_val_sequences: 2,
        objects_per_sequence: 3,
        seed,
        ..WorldConfig::default()
    }
}

fn tiny_dataset(seed: u64) -> SequenceDataset {
    let w = tiny_world(seed);
    corrupt_detections(&generate_world(&w).unwrap(), &w, &NoiseConfig::default(), seed ^ 0x55).unwrap()
}

fn class_set() -> impl Strategy<Value = ClassSet> {
    proptest::collection::btree_set(0usize..3, 0..=3)
}

pub fn queue_bounds() -> Result<(), String> {
    let strat = (1usize..12, 1usize..4, 0usize..8, 0.0f64..=1.0, any::<u64>(), 1usize..30);
    run(64, strat, |(capacity, push_per_step, min_len, eta, seed, steps)| {
        let cfg = QueueConfig { capacity, push_per_step, min_len, eta };
        let mut q = MemoryQueue::new(cfg);
        let mut protos = ClassPrototypes::default();
        let mut rng = substream(seed, 0);
        for s in 0..steps {
            let batch: BTreeMap<usize, Vec<Vec<f64>>> = (0..2)
                .map(|c| (c, (0..(s + c) % 4).map(|i| vec![i as f64 + c as f64, s as f64 * 0.1]).collect()))
                .collect();
            let before = protos.clone();
            queue_update(&mut q, &mut protos, &batch, &mut rng);
            for c in 0..2 {
                prop_assert!(q.len(c) <= capacity);
                if q.len(c) <= min_len {
                    prop_assert_eq!(protos.get(c), before.get(c));
                }
            }
        }
        Ok(())
    })
}

pub fn classifier_extension_keeps_logits() -> Result<(), String> {
    let strat = (1usize..6, 1usize..5, 1usize..4, 0usize..4, 1usize..4, any::<u64>(), proptest::collection::vec(-3.0f64..3.0, 6));
    run(64, strat, |(feature_dim, hidden_dim, embed_dim, n_classes, n_new, seed, x)| {
        let dims = ModelDims { feature_dim, hidden_dim, embed_dim, n_classes };
        let mut rng = substream(seed, 1);
        let p = ModelParams::init(dims, &mut rng);
        let q = p.extend_classifier(n_new, &mut rng).unwrap();
        let x = &x[..feature_dim];
        let (a, ea) = p.forward(x).unwrap();
        let (b, eb) = q.forward(x).unwrap();
        prop_assert_eq!(&a[..n_classes], &b[..n_classes]);
        prop_assert_eq!(a[n_classes], b[n_classes + n_new]);
        prop_assert_eq!(ea, eb);
        Ok(())
    })
}

pub fn forward_pure_and_zero_lr_step_is_identity() -> Result<(), String> {
    run(32, (any::<u64>(), proptest::collection::vec(-2.0f64..2.0, 4)), |(seed, x)| {
        let dims = ModelDims { feature_dim: 4, hidden_dim: 5, embed_dim: 3, n_classes: 2 };
        let mut rng = substream(seed, 2);
        let mut p = ModelParams::init(dims, &mut rng);
        prop_assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
        let g = ModelParams::init(dims, &mut rng);
        let before = p.clone();
        let mut opt = OptState::new(&p, 0.0, OptimizerConfig::default());
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        prop_assert_eq!(p, before);
        Ok(())
    })
}

pub fn assignment_is_partial_bijection() -> Result<(), String> {
    let strat = (0usize..6, 0usize..6).prop_flat_map(|(t, d)| {
        (
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, d), t),
            proptest::collection::vec(0usize..2, t),
            proptest::collection::vec(0usize..2, d),
            0.0f64..0.8,
        )
    });
    run(128, strat, |(sim, tc, dc, thr)| {
        let a = assign(&sim, &tc, &dc, thr);
        let tracks: BTreeSet<usize> = a.matches.iter().map(|m| m.0).collect();
        let dets: BTreeSet<usize> = a.matches.iter().map(|m| m.1).collect();
        prop_assert_eq!(tracks.len(), a.matches.len());
        prop_assert_eq!(dets.len(), a.matches.len());
        for &(i, j) in &a.matches {
            prop_assert_eq!(tc[i], dc[j]);
            prop_assert!(sim[i][j] >= thr);
        }
        prop_assert_eq!(a.matches.len() + a.unmatched_tracks.len(), tc.len());
        prop_assert_eq!(a.matches.len() + a.unmatched_detections.len(), dc.len());
        prop_assert!(a.unmatched_tracks.iter().all(|t| !tracks.contains(t)));
        prop_assert!(a.unmatched_detections.iter().all(|d| !dets.contains(d)));
        Ok(())
    })
}

fn best_permutation(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

pub fn hungarian_is_optimal_permutation() -> Result<(), String> {
    let strat = (1usize..6).prop_flat_map(|n| proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, n), n));
    run(128, strat, |cost| {
        let perm = hungarian_min(&cost);
        let cols: BTreeSet<usize> = perm.iter().copied().collect();
        prop_assert_eq!(cols.len(), cost.len());
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        prop_assert!((total - best_permutation(&cost)).abs() < 1e-9);
        let w: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|c| c + 5.0).collect()).collect();
        let m = max_weight_matching(&w, cost.len(), |i, j| (i + j) % 2 == 0);
        prop_assert!(m.iter().all(|&(i, j)| (i + j) % 2 == 0));
        Ok(())
    })
}

pub fn dataset_round_trip() -> Result<(), String> {
    run(8, any::<u64>(), |seed| {
        let ds = tiny_dataset(seed);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        Ok(())
    })
}

pub fn label_algebra() -> Result<(), String> {
    run(32, (any::<u64>(), class_set(), class_set()), |(seed, k, other)| {
        let ds = tiny_dataset(seed);
        let s = strip_labels(&ds, &k);
        prop_assert_eq!(strip_labels(&s, &k), s.clone());
        let sel = select_sequences(&ds, &k);
        prop_assert_eq!(select_sequences(&sel, &k), sel.clone());
        prop_assert!(sel.sequences.iter().all(|q| ds.sequences.contains(q)));

        let pl_classes: ClassSet = other.difference(&k).copied().collect();
        let gt = strip_labels(&ds, &k);
        let pl = strip_labels(&ds.videos(), &ClassSet::new());
        let pl = {
            let mut pl = pl;
            for (ps, gs) in pl.sequences.iter_mut().zip(&ds.sequences) {
                for (pf, gf) in ps.frames.iter_mut().zip(&gs.frames) {
                    pf.annotations =
                        gf.annotations.iter().filter(|a| pl_classes.contains(&a.class_id)).cloned().collect();
                }
            }
            pl
        };
        let merged = merge_labels(&gt, &pl).unwrap();
        for ((m, g), p) in merged.sequences.iter().zip(&gt.sequences).zip(&pl.sequences) {
            for ((mf, gf), pf) in m.frames.iter().zip(&g.frames).zip(&p.frames) {
                prop_assert_eq!(mf.annotations.len(), gf.annotations.len() + pf.annotations.len());
            }
        }
        Ok(())
    })
}

pub fn proposals_overlap_their_source() -> Result<(), String> {
    run(16, (any::<u64>(), 0.0f64..=0.02), |(seed, jitter_std)| {
        let w = tiny_world(seed);
        let clean = generate_world(&w).unwrap();
        let noise = NoiseConfig { jitter_std, ..NoiseConfig::default() };
        let a = corrupt_detections(&clean, &w, &noise, seed).unwrap();
        prop_assert_eq!(&a, &corrupt_detections(&clean, &w, &noise, seed).unwrap());
        for (_, f) in a.frames() {
            for p in f.proposals.iter().filter(|p| p.class_id < w.n_classes) {
                let src = f.annotations.iter().find(|g| g.instance_id == p.instance_id && g.class_id == p.class_id);
                prop_assert!(src.is_some_and(|g| g.bbox.iou(&p.bbox) > 0.0));
            }
        }
        let seen = a.annotated_classes();
        prop_assert!(seen.len() <= w.n_classes);
        Ok(())
    })
}

pub fn gaussian_distance_properties() -> Result<(), String> {
    let g = || (proptest::collection::vec(-3.0f64..3.0, 3), proptest::collection::vec(0.1f64..3.0, 3));
    run(256, (g(), g()), |((m1, s1), (m2, s2))| {
        let ab = bhattacharyya(&m1, &s1, &m2, &s2).unwrap();
        let ba = bhattacharyya(&m2, &s2, &m1, &s1).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(bhattacharyya(&m1, &s1, &m1, &s1).unwrap().abs() < 1e-12);
        if m1 != m2 || s1 != s2 {
            prop_assert!(ab > 0.0);
        }
        Ok(())
    })
}

pub fn push_monotone_and_pull_zero() -> Result<(), String> {
    let strat = (proptest::collection::vec(-3.0f64..3.0, 2), 0.1f64..2.0, 1.0f64..20.0, proptest::collection::vec(0.01f64..0.5, 2));
    run(256, strat, |(mean, scale, delta, sig)| {
        let mut protos = ClassPrototypes::default();
        protos.classes.insert(0, Prototype { mu: vec![0.0, 0.0], sigma: vec![1.0, 1.0] });
        protos.classes.insert(1, Prototype { mu: vec![0.0, 0.0], sigma: vec![1.0, 1.0] });
        let near: BTreeMap<usize, Vec<f64>> = [(0, mean.clone()), (1, vec![0.0, 0.0])].into();
        let far_mean: Vec<f64> = mean.iter().map(|m| m * (1.0 + scale)).collect();
        let far: BTreeMap<usize, Vec<f64>> = [(0, far_mean.clone()), (1, vec![0.0, 0.0])].into();
        let one = [1.0, 1.0];
        prop_assert!(push_distance(&far_mean, &[0.0, 0.0], &one, &one) >= push_distance(&mean, &[0.0, 0.0], &one, &one));
        prop_assert!(push_loss(&far, &protos, delta).0 <= push_loss(&near, &protos, delta).0);

        let prior = vec![0.05, 0.05];
        let at_prior: BTreeMap<usize, Vec<f64>> = [(0, prior.clone()), (3, prior.clone())].into();
        prop_assert_eq!(pull_loss(&at_prior, &prior).0, 0.0);
        let off: BTreeMap<usize, Vec<f64>> = [(0, sig.clone())].into();
        prop_assert_eq!(pull_loss(&off, &prior).0 == 0.0, sig == prior);
        Ok(())
    })
}

fn relabel(ds: &SequenceDataset, perm: impl Fn(u64) -> u64) -> SequenceDataset {
    let mut out = ds.clone();
    for s in &mut out.sequences {
        for f in &mut s.frames {
            for a in &mut f.annotations {
                a.instance_id = a.instance_id.map(&perm);
            }
        }
    }
    out
}

fn as_prediction(gt: &SequenceDataset) -> SequenceDataset {
    let mut out = gt.videos();
    for (o, g) in out.sequences.iter_mut().zip(&gt.sequences) {
        for (of, gf) in o.frames.iter_mut().zip(&g.frames) {
            of.proposals.clear();
            of.annotations = gf.annotations.iter().cloned().map(|mut a| {
                a.confidence = Some(0.9);
                a
            }).collect();
        }
    }
    out
}

pub fn metric_invariances() -> Result<(), String> {
    run(16, (any::<u64>(), any::<u64>(), 1u64..1000), |(seed, pseed, offset)| {
        let gt = tiny_dataset(seed);
        let classes: ClassSet = (0..3).collect();
        let perfect = as_prediction(&gt);
        let r = evaluate(&gt, &perfect, &classes, 0, "x");
        for c in r.classes.iter().filter(|c| c.counts.gt > 0) {
            prop_assert_eq!(c.mota, Some(1.0));
            prop_assert_eq!(c.idf1, Some(1.0));
        }
        let noisy = {
            let mut p = as_prediction(&tiny_dataset(pseed));
            for (ps, gs) in p.sequences.iter_mut().zip(&gt.sequences) {
                ps.id = gs.id;
            }
            p
        };
        let base = evaluate(&gt, &noisy, &classes, 0, "x");
        let relabeled = evaluate(&gt, &relabel(&noisy, |i| i * 7919 + offset), &classes, 0, "x");
        prop_assert_eq!(&base.classes, &relabeled.classes);
        let mut rev_gt = gt.clone();
        rev_gt.sequences.reverse();
        let mut rev_pred = noisy.clone();
        rev_pred.sequences.reverse();
        let reordered = evaluate(&rev_gt, &rev_pred, &classes, 0, "x");
        for (a, b) in base.classes.iter().zip(&reordered.classes) {
            prop_assert_eq!(a.counts, b.counts);
            prop_assert_eq!(a.id_counts, b.id_counts);
            let same_ap = match (a.ap, b.ap) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                (x, y) => x == y,
            };
            prop_assert!(same_ap);
        }
        Ok(())
    })
}

fn random_model(seed: u64, feature_dim: usize, classes: Vec<usize>) -> TrackingModel {
    TrackingModel::init(feature_dim, 8, 4, classes, &mut substream(seed, 7))
}

pub fn majority_vote_and_det_pl_ids() -> Result<(), String> {
    run(8, any::<u64>(), |seed| {
        let ds = tiny_dataset(seed);
        let model = random_model(seed, 6, vec![0, 1, 2]);
        let cfg = TrackerConfig { det_conf_thresh: 0.2, init_conf_thresh: 0.2, match_sim_thresh: 0.0, ..TrackerConfig::default() };
        let out = track_dataset(&model, &ds.videos(), &cfg).unwrap();
        for s in &out.sequences {
            for t in &s.tracks {
                prop_assert!(t.boxes.iter().any(|b| b.class_id == t.class_id));
                prop_assert!(t.boxes.len() >= cfg.min_hits);
            }
        }
        let pls = generate_det_pls(&model, &ds.videos(), &cfg, 0.3).unwrap();
        for s in &pls.sequences {
            let ids: Vec<u64> = s.frames.iter().flat_map(|f| &f.annotations).filter_map(|a| a.instance_id).collect();
            let unique: BTreeSet<u64> = ids.iter().copied().collect();
            prop_assert_eq!(unique.len(), ids.len());
        }
        Ok(())
    })
}

fn tiny_experiment(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world = tiny_world(seed);
    cfg.training.epochs = 1;
    cfg.training.hidden_dim = 8;
    cfg.training.embed_dim = 4;
    cfg.training.seed = seed;
    cfg.queue.min_len = 4;
    cfg
}

pub fn protocol_determinism_and_config_round_trip() -> Result<(), String> {
    run(3, any::<u64>(), |seed| {
        let cfg = tiny_experiment(seed);
        let splits = build_world(&cfg).unwrap();
        let plan = general_to_specific(&cfg.world.class_frequencies, Method::Cooler).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = run_protocol(&splits, &plan, &cfg, Some(dir.path())).unwrap();

        let resolved = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&resolved, &cfg);
        let again = build_world(&resolved).unwrap();
        prop_assert_eq!(&again.train, &splits.train);
        let b = run_protocol(&again, &plan, &resolved, None).unwrap();
        prop_assert_eq!(&a.reports, &b.reports);
        prop_assert_eq!(&a.checkpoints, &b.checkpoints);
        let csv = std::fs::read_to_string(dir.path().join("stage_1/metrics.csv")).unwrap();
        prop_assert_eq!(csv, b.reports[1].to_csv().unwrap());
        prop_assert_eq!(a.stages[1].input_checkpoint.as_deref(), Some(a.stages[0].checkpoint_digest.as_str()));
        Ok(())
    })
}

pub const SUITES: &[(&str, Suite)] = &[
    ("queue bounds and activation", queue_bounds),
    ("classifier extension keeps logits", classifier_extension_keeps_logits),
    ("forward pure, zero-lr step identity", forward_pure_and_zero_lr_step_is_identity),
    ("assignment partial bijection", assignment_is_partial_bijection),
    ("hungarian optimality", hungarian_is_optimal_permutation),
    ("dataset round trip", dataset_round_trip),
    ("label algebra", label_algebra),
    ("proposals overlap their source", proposals_overlap_their_source),
    ("gaussian distance properties", gaussian_distance_properties),
    ("push monotone, pull zero", push_monotone_and_pull_zero),
    ("metric invariances", metric_invariances),
    ("majority vote, det pseudo-label ids", majority_vote_and_det_pl_ids),
    ("protocol determinism and config round trip", protocol_determinism_and_config_round_trip),
];
