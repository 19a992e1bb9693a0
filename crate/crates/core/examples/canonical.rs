//! Runs the canonical recovery experiment and prints its report.
//!
//! `cargo run --release -p promptseg-core --example canonical [relation_probability]`

use std::time::Instant;

use promptseg::experiment::{evaluate_canonical, relation_trend, run_canonical, CanonicalConfig};

fn main() -> promptseg::Result<()> {
    let p: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let mut cfg = CanonicalConfig::default().with_relations(p);
    if let Some(s) = std::env::var("ORACLE_SCALE").ok().and_then(|s| s.parse().ok()) {
        cfg.oracle.scale = s;
    }
    let t = Instant::now();
    let run = run_canonical(&cfg)?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    for epoch in 1..=run.log.epochs() {
        let total = run.log.epoch_mean(epoch, |_| true, |e| e.loss.total).unwrap_or(f64::NAN);
        let text = run.log.epoch_mean(epoch, |_| true, |e| e.loss.text).unwrap_or(f64::NAN);
        println!("epoch {epoch:2}  total {total:.4}  text {text:.4}");
    }
    let p = &run.checkpoint.params;
    println!("alpha {:.4} beta {:.4}", p.alpha, p.beta);
    let report = evaluate_canonical(&run.data, p, &cfg)?;
    println!("{report:#?}");
    println!("max non-prompted shift {:.4}", report.max_nonprompted_shift());
    if let Some((first, last)) = relation_trend(&run.log) {
        println!("relation loss first {first:.4} last {last:.4}");
    }
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
