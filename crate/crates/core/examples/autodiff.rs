//! Reverse-mode differentiation on the tape: build `f(x) = Σ softmax(x·W) ⊙ x·W`,
//! read its gradient and compare it with central differences.

use rgbtseg::tensor::{gradcheck, Tape, Tensor};

fn main() -> rgbtseg::Result<()> {
    let w = Tensor::from_rows(&[[0.5, -1.0, 0.25], [1.5, 0.3, -0.7]]);
    let x = Tensor::from_rows(&[[0.2, -0.4], [1.0, 0.6]]);

    let f = |t: &mut Tape, v| {
        let wv = t.constant(w.clone());
        let h = t.matmul(v, wv)?;
        let s = t.softmax(h)?;
        let p = t.mul(s, h)?;
        t.sum(p)
    };

    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true);
    let y = f(&mut t, xv)?;
    t.backward(y)?;
    println!("f(x) = {:.6}", t.value(y).item());
    println!("df/dx = {:?}", t.grad(xv).expect("x requires grad").data());

    let report = gradcheck(f, &x, 1e-5, 1e-6)?;
    println!(
        "central differences: max relative error {:.2e} over {} coordinates ({})",
        report.max_rel_err,
        report.checked,
        if report.pass { "ok" } else { "FAIL" }
    );
    Ok(())
}
