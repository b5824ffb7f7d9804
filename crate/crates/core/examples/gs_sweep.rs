//! Runs the two-stage G->S protocol for every method over a few seeds and
//! prints old-class tracking quality, pseudo-label quality and prototype
//! separation.
//!
//! `cargo run --release -p citrack --example gs_sweep -- [n_seeds]`

use std::time::Instant;

use citrack::config::{general_to_specific, ExperimentConfig};
use citrack::continual::{build_world, generate_det_pls, generate_tracker_pls, run_protocol, train_stage};
use citrack::labels::{select_sequences, Method};
use citrack::losses::contrastive::min_prototype_distance;
use citrack::metrics::detection_f1;

fn main() -> citrack::Result<()> {
    let n_seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    for seed in 0..n_seeds {
        let t0 = Instant::now();
        let mut cfg = ExperimentConfig::default();
        cfg.world.seed = seed;
        cfg.training.seed = seed;
        let splits = build_world(&cfg)?;
        let plan = |m| general_to_specific(&cfg.world.class_frequencies, m);
        let old = plan(Method::Cooler)?.stages[0].clone();

        let mut line = format!("seed {seed}:");
        for method in [Method::Finetune, Method::DetPl, Method::Cooler, Method::Oracle] {
            let res = run_protocol(&splits, &plan(method)?, &cfg, None)?;
            let s0 = &res.reports[0];
            let s1 = &res.reports[1];
            line += &format!(
                " {method}[s0 idf1 {:.3} mota {:.3} | s1 old idf1 {:.3} mota {:.3} new idf1 {:.3}]",
                s0.mean_over(&old, |c| c.idf1).unwrap_or(f64::NAN),
                s0.mean_over(&old, |c| c.mota).unwrap_or(f64::NAN),
                s1.mean_over(&old, |c| c.idf1).unwrap_or(f64::NAN),
                s1.mean_over(&old, |c| c.mota).unwrap_or(f64::NAN),
                s1.mean_over(&plan(method)?.stages[1], |c| c.idf1).unwrap_or(f64::NAN),
            );
            if method == Method::Cooler {
                let sig = res.stages[1].history.last().and_then(|h| h.mean_batch_sigma);
                let d = min_prototype_distance(&res.checkpoints[1].prototypes);
                line += &format!(" [beta on: min D {d:?} sigma {sig:?}]");
            }
        }
        let mut off = cfg.clone();
        off.contrastive.beta1 = 0.0;
        off.contrastive.beta2 = 0.0;
        let res = run_protocol(&splits, &plan(Method::Cooler)?, &off, None)?;
        let sig = res.stages[1].history.last().and_then(|h| h.mean_batch_sigma);
        line += &format!(" [beta off: min D {:?} sigma {sig:?}]", min_prototype_distance(&res.checkpoints[1].prototypes));

        let p = plan(Method::Cooler)?;
        let base = train_stage(None, &splits.train, &p, 0, &cfg)?.checkpoint.model;
        let stage1 = select_sequences(&splits.train, &p.stages[1]);
        let videos = stage1.videos();
        let tr = generate_tracker_pls(&base, &videos, &cfg.tracker)?;
        let dp = generate_det_pls(&base, &videos, &cfg.tracker, cfg.training.det_pl_tau)?;
        line += &format!(
            " [PL F1 tracker {:.3} det {:.3}] {:.1}s",
            detection_f1(&stage1, &tr, &old),
            detection_f1(&stage1, &dp, &old),
            t0.elapsed().as_secs_f64()
        );
        println!("{line}");
    }
    Ok(())
}
