//! Reverse-mode gradients of a two-layer perceptron, checked against
//! central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seglstm::tensor::gradcheck::{gradcheck, GradcheckOptions};
use seglstm::{Result, Tape, Tensor, Var};

fn mlp(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let h = tape.matmul(v[0], v[1])?;
    let h = tape.silu(h);
    let y = tape.matmul(h, v[2])?;
    let y = tape.mul(y, y)?;
    Ok(tape.mean(y))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        Tensor::randn([4, 3], 1.0, &mut rng),
        Tensor::randn([3, 5], 0.5, &mut rng),
        Tensor::randn([5, 2], 0.5, &mut rng),
    ];

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = mlp(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    println!(
        "loss {:.6} over {} tape nodes",
        tape.value(loss).item()?,
        tape.len()
    );
    for (name, v) in ["x", "w1", "w2"].iter().zip(&vars) {
        println!(
            "|d loss / d {name}| = {:.6}",
            grads.get(*v).unwrap().l2_norm()
        );
    }

    let report = gradcheck(&inputs, mlp, GradcheckOptions::default())?;
    println!(
        "gradcheck: {} probes, max relative error {:.2e}",
        report.probes, report.max_rel_error
    );
    Ok(())
}
