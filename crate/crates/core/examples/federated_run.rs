//! A short federated run with bargaining aggregation, printing one line per
//! round.

use fedrane::federation::{self, DatasetSpec, RunConfig};

fn main() -> fedrane::Result<()> {
    let config = RunConfig {
        k: 5,
        rounds: 10,
        local_epochs: 2,
        batch_size: 16,
        lr: 0.1,
        lra_enabled: false,
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
    println!("round  G-FL   P-FL   residual   min cos");
    for m in federation::run(&config)? {
        println!(
            "{:>5}  {:.3}  {:.3}  {:>9.2e}  {:+.3}",
            m.round,
            m.gfl_accuracy,
            m.pfl_accuracy,
            m.bargain_residual,
            m.min_cosine()
        );
    }
    Ok(())
}
