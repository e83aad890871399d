//! Reverse-mode gradients of a small attention-style expression, checked
//! against central finite differences.

use flexilength::tensorgrad::{Tape, Tensor, Var};

fn forward(tape: &mut Tape, x: Var, w: Var) -> flexilength::Result<Var> {
    let q = tape.matmul(x, w)?;
    let kt = tape.transpose(x)?;
    let scores = tape.matmul(q, kt)?;
    let attn = tape.softmax(scores, 1)?;
    let y = tape.matmul(attn, x)?;
    let y = tape.gelu(y)?;
    Ok(tape.mean(y, None)?)
}

fn value(x: &Tensor, w: &Tensor) -> flexilength::Result<f64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone())?, tape.constant(w.clone())?);
    let y = forward(&mut tape, xv, wv)?;
    Ok(tape.value(y).item()?)
}

fn main() -> flexilength::Result<()> {
    let x = Tensor::from_fn(&[4, 3], |i| ((i * 5 + 1) % 7) as f64 / 3.0 - 1.0);
    let w = Tensor::from_fn(&[3, 3], |i| ((i * 3 + 2) % 5) as f64 / 4.0 - 0.5);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.param(x.clone())?, tape.param(w.clone())?);
    let y = forward(&mut tape, xv, wv)?;
    tape.backward(y)?;
    let grad = tape.grad(wv).expect("w is a parameter").clone();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..w.numel() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let fd = (value(&x, &up)? - value(&x, &down)?) / (2.0 * h);
        let err = (fd - grad.data()[i]).abs() / fd.abs().max(grad.data()[i].abs()).max(1e-6);
        println!("dL/dw[{i}]  tape {:+.8}  finite diff {fd:+.8}", grad.data()[i]);
        worst = worst.max(err);
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
