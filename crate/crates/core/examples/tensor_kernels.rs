//! The numeric building blocks: softmax, pooling, top-k and singular values.

use speckv_lab::linalg::{spectral_norm, svd};
use speckv_lab::tensor::{arg_topk, avg_pool_1d, max_pool_1d, softmax, Tensor};

fn main() -> speckv_lab::Result<()> {
    let logits = [2.0, 1.0, 0.1, -1.0];
    let p = softmax(&logits)?;
    println!("softmax{logits:?} = {p:.4?} (sum {:.12})", p.iter().sum::<f64>());

    // pooling clips at the edges instead of padding
    let scores = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5];
    println!("avg_pool(k=3) = {:.3?}", avg_pool_1d(&scores, 3)?);
    println!("max_pool(k=3) = {:?}", max_pool_1d(&scores, 3)?);

    // ties resolve toward the lower index; the result is sorted ascending
    println!("top-2 of [3, 1, 3, 2] = {:?}", arg_topk(&[3.0, 1.0, 3.0, 2.0], 2));

    let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![4.0, 5.0]])?;
    let s = svd(&a)?;
    println!("singular values of [[3,0],[4,5]] = {:.6?}", s.s);
    println!("spectral norm = {:.6} (exact sqrt(45) = {:.6})", spectral_norm(&a)?, 45f64.sqrt());
    Ok(())
}
