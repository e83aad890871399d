//! Gaussian-mixture likelihood, distillation KL and best-of-K sampling on a
//! hand-built two-mode prediction.

use flexilength::distributions::{draw_samples, kl_distill, nll, MixturePrediction, SampleMode};
use flexilength::eval::{ade, fde};
use flexilength::tensorgrad::{Tape, Tensor};

fn main() -> flexilength::Result<()> {
    // one scene, one agent, three future steps, two modes: left turn and straight
    let t = 3;
    let means = Tensor::from_fn(&[1, 1, t, 2, 2], |i| {
        let (step, mode, coord) = (i / 4, (i / 2) % 2, i % 2);
        let s = (step + 1) as f64;
        match (mode, coord) {
            (0, 0) => s * 0.8,
            (0, _) => s * 0.4,
            (_, 0) => s,
            _ => 0.0,
        }
    });
    let teacher = MixturePrediction::new(means.clone(), Tensor::full(&[1, 1, t, 2, 2], 0.3), Tensor::new(vec![1, 1, 2], vec![0.0, 1.0])?)?;
    let student = MixturePrediction::new(means, Tensor::full(&[1, 1, t, 2, 2], 0.5), Tensor::new(vec![1, 1, 2], vec![0.5, 0.0])?)?;
    let truth = Tensor::from_fn(&[1, 1, t, 2], |i| if i % 2 == 0 { (i / 2 + 1) as f64 } else { 0.05 });

    let mut tape = Tape::new();
    let tv = teacher.record(&mut tape, false)?;
    let sv = student.record(&mut tape, false)?;
    let l_teacher = nll(&mut tape, &tv, &truth)?;
    let l_student = nll(&mut tape, &sv, &truth)?;
    let kl = kl_distill(&mut tape, &tv, &sv, false)?;
    println!("teacher nll {:.4}", tape.value(l_teacher).item()?);
    println!("student nll {:.4}", tape.value(l_student).item()?);
    println!("KL(teacher || student) {:.4}", tape.value(kl).item()?);
    println!("mode weights {:?}", teacher.weights().data());

    let gt = truth.reshape(&[1, t, 2])?;
    for k in 1..=2 {
        let samples = draw_samples(&teacher, k, SampleMode::ModeMeans, 0)?.reshape(&[k, 1, t, 2])?;
        println!("mode means K={k}: ADE {:.4}  FDE {:.4}", ade(&samples, &gt)?, fde(&samples, &gt)?);
    }
    let drawn = draw_samples(&teacher, 20, SampleMode::Stochastic, 7)?.reshape(&[20, 1, t, 2])?;
    println!("20 random draws: ADE {:.4}  FDE {:.4}", ade(&drawn, &gt)?, fde(&drawn, &gt)?);
    Ok(())
}
