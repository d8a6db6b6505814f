use std::time::Instant;
use pathwarden::sim::experiment::{AttackMix, Experiment, ExperimentConfig};

fn main() {
    for seed in [7u64, 0, 13, 42] {
        let t0 = Instant::now();
        let mut cfg = ExperimentConfig::named("aarnet");
        cfg.seed = seed;
        cfg.flows = 400;
        cfg.attacks = Some(AttackMix::standard(50));
        let mut exp = Experiment::new(cfg).unwrap();
        let implants = exp.implant_configured_attacks().unwrap();
        let report = exp.run().unwrap();
        let m = report.final_metrics();
        println!(
            "seed {seed}: planned {} reachable {} detected {} fp {} in {:?}",
            implants.len(), m.reachable, m.detected, m.false_positives, t0.elapsed()
        );
    }
}
