//! Relational augmentation of one batch: embeddings before and after
//! attentive message passing, and the contrastive loss tying them together.

use fedrane::data::{derived_rng, generate_synthetic};
use fedrane::lra::{self, LraConfig};
use fedrane::model::{Architecture, MLPParams};

fn main() -> fedrane::Result<()> {
    let ds = generate_synthetic(3, 6, 10, 0.3, 1)?;
    let arch = Architecture {
        input: 6,
        extractor_hidden: vec![16],
        d_emb: 8,
        predictor_hidden: vec![8],
        classes: 3,
        mp_steps: 2,
    };
    let params = MLPParams::init(&arch, &mut derived_rng(1, &[0]));
    let batch: Vec<usize> = (0..8).collect();
    let (x, y) = ds.subset(&batch);

    for softmax in [false, true] {
        let cfg = LraConfig {
            attention_softmax: softmax,
            ..LraConfig::default()
        };
        let (z, z_tilde, cd) = lra::lra_forward(&params, &x, &cfg)?;
        let (loss, _, _) = lra::loss_and_grad(&params, &x, &y, &cfg)?;
        println!("attention softmax: {softmax}");
        println!("  |z| = {:.4}, |z~| = {:.4}", z.frobenius_norm(), z_tilde.frobenius_norm());
        println!("  contrastive {cd:.4}, prediction {:.4}, total {:.4}", loss.pred, loss.total);
    }
    Ok(())
}
