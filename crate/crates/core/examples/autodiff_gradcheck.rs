//! Reverse-mode tape on a small MLP loss, verified against central
//! differences.
//!
//!     cargo run --release --example autodiff_gradcheck

use d2etr::autodiff::{check_tape_gradients, Tape};
use d2etr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> d2etr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w1 = Tensor::randn(&[6, 8], 0.4, &mut rng);
    let w2 = Tensor::randn(&[8, 3], 0.4, &mut rng);

    // y = softmax(gelu(x·w1)·w2), loss = mean(ln y)
    let build = |t: &mut Tape, v: &[d2etr::autodiff::Var]| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.gelu(h)?;
        let o = t.matmul(h, v[2])?;
        let p = t.softmax(o, 1)?;
        let l = t.ln(p)?;
        t.mean(l)
    };

    let mut tape = Tape::new();
    let vars: Vec<_> = [&x, &w1, &w2].iter().map(|t| tape.variable((*t).clone())).collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    println!("|dL/dw1| = {:.6}", tape.grad(vars[1]).unwrap().data().iter().map(|g| g * g).sum::<f64>().sqrt());

    let check = check_tape_gradients(&[x, w1, w2], 1e-6, build)?;
    println!("checked {} coordinates, max relative error {:.2e}", check.checked, check.max_rel_error);
    Ok(())
}
