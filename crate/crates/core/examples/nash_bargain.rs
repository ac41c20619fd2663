//! Bargaining weights for three client deviations, two of which conflict.

use fedrane::gne::{self, DeviationMatrix, NashOptions};

fn main() -> fedrane::Result<()> {
    let g = DeviationMatrix::from_columns(vec![
        vec![1.0, 0.2, 0.0],
        vec![-0.6, 1.0, 0.1],
        vec![0.3, 0.3, 2.0],
    ])?;
    let sol = gne::nash_solve(&g, &NashOptions::default())?;
    println!("p          = {:?}", sol.p);
    println!("residual   = {:.3e} (converged: {}, {} outer iterations)", sol.residual, sol.converged, sol.iterations);
    println!("utilities  = {:?}", sol.utilities);

    let fedavg = gne::fedavg_weights(&[100, 100, 100])?;
    let step = g.combine(&fedavg)?;
    println!("fedavg utilities = {:?}", gne::utilities(&g, &step)?);
    Ok(())
}
