//! Draft error versus retrieval quality: noisier drafts give a larger
//! hidden-state error ε and lower SpecKV needle recall.

use speckv_lab::theory::fig2a_default;

fn main() -> speckv_lab::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let table = fig2a_default(count, 0)?;
    for r in &table.rows {
        println!("{:<20} eps {:>9.2}  recall {:.3}  accuracy {:.3}", r.draft, r.epsilon, r.needle_recall, r.accuracy);
    }
    println!("spearman(eps, recall) = {:.3}", table.spearman_recall);
    Ok(())
}
