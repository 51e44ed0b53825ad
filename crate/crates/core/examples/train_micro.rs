//! Trains the three-stage micro detector on synthetic scenes, then compares
//! accuracy and measured cost with and without pruning.
//!
//! `cargo run --release -p amped --example train_micro -- [iterations]`

use std::time::Instant;

use amped::data::{generate_splits, SynthSpec};
use amped::eval::{evaluate_model, EvalConfig};
use amped::model::{PruneMode, SedConfig, SedModel};
use amped::train::{train, NoObserver, TrainConfig};

fn main() -> amped::Result<()> {
    let iterations = std::env::args()
        .nth(1)
        .map_or(2000, |a| a.parse().expect("iteration count"));
    let (train_set, test_set) = generate_splits(&SynthSpec::default(), 50)?;
    let mut model = SedModel::new(SedConfig::micro_three_stage(), 7)?;
    let cfg = TrainConfig {
        iterations,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let history = train(&cfg, &train_set, &mut model, &mut NoObserver)?;
    for r in history.iter().step_by((iterations / 10).max(1)) {
        println!("step {:5}  loss {:8.2}  final {:8.2}", r.iteration, r.total, r.final_term);
    }
    println!("trained in {:.0}s", start.elapsed().as_secs_f64());

    let eval = EvalConfig {
        tolerance: 0.0166,
        ..EvalConfig::default()
    };
    let base = evaluate_model(&model, &test_set, &PruneMode::Disabled, &eval)?;
    println!("unpruned      ODS {:.4}  OIS {:.4}  AP {:.4}", base.summary.ods, base.summary.ois, base.summary.ap);
    for t in [[0.3, 0.4, 0.5], [0.4, 0.5, 0.6]] {
        let r = evaluate_model(&model, &test_set, &PruneMode::Thresholds(t.to_vec()), &eval)?;
        println!(
            "{t:?}  ODS {:.4}  OIS {:.4}  MAC reduction {:.2}%",
            r.summary.ods,
            r.summary.ois,
            100.0 * (1.0 - r.mean_macs() / base.mean_macs())
        );
    }
    Ok(())
}
