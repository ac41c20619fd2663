//! The three variants side by side on one seed: bargaining with and without
//! relational augmentation, and plain FedAvg. A variant whose training
//! diverges is reported as such.

use fedrane::federation::{self, Aggregator, DatasetSpec, RunConfig};

fn main() {
    let base = RunConfig {
        k: 5,
        rounds: 10,
        local_epochs: 2,
        batch_size: 16,
        lr: 0.1,
        extractor_hidden: vec![32],
        d_emb: 16,
        predictor_hidden: vec![16],
        dataset: DatasetSpec::Synthetic {
            classes: 4,
            dim: 8,
            per_class: 100,
            spread: 0.5,
        },
        ..RunConfig::default()
    };
    let variants = [
        ("gne+lra", base.clone()),
        (
            "gne+lra (softmax attention)",
            RunConfig {
                attention_softmax: true,
                ..base.clone()
            },
        ),
        (
            "gne",
            RunConfig {
                lra_enabled: false,
                ..base.clone()
            },
        ),
        (
            "fedavg",
            RunConfig {
                lra_enabled: false,
                aggregator: Aggregator::Fedavg,
                ..base.clone()
            },
        ),
    ];
    for (name, cfg) in variants {
        match federation::run(&cfg) {
            Ok(m) => {
                let last = m.last().expect("round 0 is always recorded");
                println!("{name:<28} G-FL {:.3}  P-FL {:.3}", last.gfl_accuracy, last.pfl_accuracy);
            }
            Err(e) => println!("{name:<28} {e}"),
        }
    }
}
