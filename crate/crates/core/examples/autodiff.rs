//! Reverse-mode differentiation on a tape, including a gradient of a
//! gradient norm, checked against central differences.

use congan::{grad_check, Tape, Tensor};

fn main() -> congan::Result<()> {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[3], vec![0.5, -1.0, 2.0])?);
    let y = x.mul(x)?.sum()?.add(x.tanh()?.sum()?)?;
    let g = tape.grad(y, &[x], true)?[0];
    println!("y = {:.6}", y.item());
    println!("dy/dx = {:?}", g.value().data());

    // Differentiate the squared gradient norm once more.
    let norm = g.mul(g)?.sum()?;
    let gg = tape.grad(norm, &[x], false)?[0];
    println!("d|dy/dx|²/dx = {:?}", gg.value().data());

    let w = Tensor::new(&[2, 3, 3, 3], (0..54).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let img = Tensor::new(&[3, 6, 6], (0..108).map(|i| (i as f64 * 0.11).cos()).collect())?;
    let err = grad_check(
        |t, x| {
            let k = t.constant(w.clone());
            x.conv2d(k, 2, 1)?.relu()?.mean()
        },
        &img,
        1e-6,
    )?;
    println!("conv2d gradient check: max relative error {err:.2e}");
    Ok(())
}
