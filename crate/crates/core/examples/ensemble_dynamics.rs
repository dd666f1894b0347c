//! Walks the prediction ensemble and neighbour-consensus pseudo labels of a
//! few patches through several epochs of fixed teacher predictions.
//!
//! ```text
//! cargo run --release --example ensemble_dynamics -- [alpha_pred]
//! ```

use simstudent::ensemble::{ema_prediction, similarity_ensemble, NeighborPooling};
use simstudent::losses::LabelVector;

fn main() -> anyhow::Result<()> {
    let alpha: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.9);
    // A noisy-labelled cancer patch (label benign) inside a lesion whose two
    // neighbours the teacher already calls cancer.
    let mut ybar = [LabelVector::one_hot(0), LabelVector::one_hot(1), LabelVector::one_hot(1)];
    let teacher = [LabelVector([0.4, 0.6]), LabelVector([0.2, 0.8]), LabelVector([0.25, 0.75])];

    println!("epoch   ybar[0]  yhat[0] (half-mean)  yhat[0] (pooled)");
    for epoch in 0..15 {
        for (yb, t) in ybar.iter_mut().zip(&teacher) {
            *yb = ema_prediction(*yb, *t, alpha);
        }
        let half = similarity_ensemble(ybar[0], &ybar[1..], NeighborPooling::HalfMean);
        let pooled = similarity_ensemble(ybar[0], &ybar[1..], NeighborPooling::Pooled);
        println!("{epoch:>5}   {:.4}   {:.4}               {:.4}", ybar[0].cancer(), half.cancer(), pooled.cancer());
    }
    Ok(())
}
