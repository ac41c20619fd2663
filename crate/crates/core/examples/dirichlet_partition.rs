//! Label skew of Dirichlet partitions at several concentrations.

use fedrane::data::{self, generate_synthetic};

fn main() -> fedrane::Result<()> {
    let ds = generate_synthetic(4, 4, 250, 0.5, 0)?;
    for alpha in [0.1, 0.5, 5.0, 1e6] {
        let parts = data::dirichlet_partition(&ds, 5, alpha, 42)?;
        println!("alpha = {alpha}");
        let mut entropy = 0.0;
        for p in &parts {
            let labels: Vec<usize> = p.indices.iter().map(|&i| ds.labels[i]).collect();
            let h = data::histogram(&labels, ds.classes);
            entropy += data::label_entropy(&h);
            println!("  client {}: {:?}", p.client_id, h);
        }
        println!("  mean label entropy {:.3}", entropy / parts.len() as f64);
    }
    Ok(())
}
