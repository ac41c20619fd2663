//! Reverse-mode gradients of a small two-layer expression, checked against
//! central differences.

use fedrane::numeric::{Matrix, Tape};

fn main() -> fedrane::Result<()> {
    let x = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25]]);
    let w = Matrix::from_rows(&[[0.3, -0.7], [1.1, 0.2]]);

    let loss_of = |w: &Matrix| -> fedrane::Result<(f64, Matrix)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let h = tape.matmul(xv, wv)?;
        let r = tape.relu(h)?;
        let e = tape.exp(r)?;
        let s = tape.sum(e)?;
        let loss = tape.log(s)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).get(0, 0), grads.wrt(wv).clone()))
    };

    let (loss, grad) = loss_of(&w)?;
    println!("loss = {loss:.6}");
    let h = 1e-6;
    for i in 0..2 {
        for j in 0..2 {
            let mut up = w.clone();
            let mut down = w.clone();
            up.set(i, j, w.get(i, j) + h);
            down.set(i, j, w.get(i, j) - h);
            let fd = (loss_of(&up)?.0 - loss_of(&down)?.0) / (2.0 * h);
            println!("dL/dW[{i},{j}]  tape {:+.8}  finite diff {fd:+.8}", grad.get(i, j));
        }
    }
    Ok(())
}
