//! Mines a relational graph from a batch of embeddings: Pearson
//! correlations, the low-rank zero-diagonal reconstruction and the
//! resulting adjacency and neighborhoods.

use fedrane::data::derived_rng;
use fedrane::lra::{self, SlimOptions};
use fedrane::numeric::Matrix;
use rand::Rng;

fn main() -> fedrane::Result<()> {
    let mut rng = derived_rng(7, &[0]);
    // Two groups of three rows around different directions.
    let base = [[1.0, 0.2, -0.5, 0.0, 0.3], [-0.4, 1.0, 0.1, 0.8, -0.2]];
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|i| base[i / 3].iter().map(|v| v + 0.2 * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let z = Matrix::from_rows(&rows);

    let (p, sol, graph) = lra::mine_graph(&z, &SlimOptions::default())?;
    println!("correlation:\n{p:.3}");
    println!(
        "B after {} iterations (converged: {}):\n{:.3}",
        sol.iterations, sol.converged, sol.b
    );
    let first = sol.objective.first().copied().unwrap_or(f64::NAN);
    let last = sol.objective.last().copied().unwrap_or(f64::NAN);
    println!("objective {first:.4} -> {last:.4}");
    println!("adjacency:\n{:.3}", graph.a);
    let mask = graph.neighborhoods(0.05);
    for i in 0..6 {
        let n: Vec<usize> = (0..6).filter(|&j| mask.keeps(i, j)).collect();
        println!("N({i}) = {n:?}");
    }
    Ok(())
}
