//! Evaluates the composite training loss on one patch and checks its
//! analytic gradient against central finite differences.
//!
//! ```text
//! cargo run --release --example loss_gradients
//! ```

use simstudent::losses::{overall_loss, LabelVector, LossWeights};

fn main() -> anyhow::Result<()> {
    let y = LabelVector::one_hot(0);
    let y_hat = LabelVector([0.3, 0.7]);
    let logits = [0.2, -0.4];
    let z_s = vec![0.5, -1.0, 0.25, 2.0];
    let z_plus = vec![0.4, -0.8, 0.5, 1.5];
    let z_minus = vec![-1.0, 0.3, 0.9, -0.2];
    let (tau, w) = (0.5, LossWeights::default());

    let eval = |logits: [f64; 2], z: &[f64]| {
        let pred = LabelVector(simstudent::losses::softmax(&logits));
        overall_loss(&y, &y_hat, &pred, z, &z_plus, &z_minus, tau, &w)
    };
    let base = eval(logits, &z_s)?;
    println!(
        "total {:.6} = CE(y) {:.6} + CE(y_hat) {:.6} + SL {:.6}",
        base.total, base.ce_noisy, base.ce_pseudo, base.similarity
    );

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        let (mut a, mut b) = (logits, logits);
        a[k] += eps;
        b[k] -= eps;
        let fd = (eval(a, &z_s)?.total - eval(b, &z_s)?.total) / (2.0 * eps);
        worst = worst.max((fd - base.grad_logits[k]).abs() / fd.abs().max(1e-8));
        println!("d/dlogit[{k}]   analytic {:+.8}  numeric {fd:+.8}", base.grad_logits[k]);
    }
    for k in 0..z_s.len() {
        let (mut a, mut b) = (z_s.clone(), z_s.clone());
        a[k] += eps;
        b[k] -= eps;
        let fd = (eval(logits, &a)?.total - eval(logits, &b)?.total) / (2.0 * eps);
        worst = worst.max((fd - base.grad_embedding[k]).abs() / fd.abs().max(1e-8));
        println!("d/dz[{k}]       analytic {:+.8}  numeric {fd:+.8}", base.grad_embedding[k]);
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
