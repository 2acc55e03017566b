//! The three loss terms on hand-picked distributions.

use fmla::losses::{
    cross_entropy_loss, kl_divergence, online_distill_loss, self_distill_loss, softmax,
    LossBreakdown,
};
use fmla::Tensor;

fn main() -> fmla::Result<()> {
    let random_passes = vec![
        softmax(&[1.2, 0.1, -0.3]),
        softmax(&[0.9, 0.4, -0.1]),
        softmax(&[1.5, -0.2, 0.0]),
    ];
    let regular = softmax(&[0.8, 0.3, 0.1]);
    let y_dcn = softmax(&[2.0, 0.0, -1.0]);
    let y_cla = softmax(&[0.5, 0.4, 0.3]);
    let logits = Tensor::new(&[1, 3], vec![1.0, 0.2, -0.5])?;

    let (alpha, beta) = (1.0, 1.0);
    let loss1 = self_distill_loss(&random_passes, &regular, beta)?;
    let loss2 = online_distill_loss(&y_dcn, &y_cla, alpha)?;
    let loss3 = cross_entropy_loss(&logits, &[0])?;
    let b = LossBreakdown::new(loss1, loss2, loss3, alpha, beta, random_passes.len());
    println!("self-distillation   {:.6}", b.loss1);
    println!("online distillation {:.6}", b.loss2);
    println!("cross entropy       {:.6}", b.loss3);
    println!("total               {:.6}", b.total);
    println!("KL(p||p) = {}", kl_divergence(&regular, &regular)?);
    Ok(())
}
