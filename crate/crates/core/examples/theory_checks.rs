//! Runs every inequality check at a modest trial count and prints the
//! worst observed lhs/rhs ratio for each.

use speckv_lab::theory::{check_lemma1, check_lemma2, check_theorem1, check_theorem2_rip, check_theorem4};

fn main() -> speckv_lab::Result<()> {
    let reports = [
        check_lemma1(10_000, 64, 1)?,
        check_lemma2(10_000, 32, 2)?,
        check_theorem1(1_000, 16, 32, 4, 0.1, 3)?,
        check_theorem2_rip(12, 10, 1, 100, 0.1, 4)?,
        check_theorem4(200, 8, 8, 5)?,
    ];
    for r in &reports {
        println!(
            "{:<9} trials {:>6}  max ratio {:.6}  violations {}  rejections {}{}",
            r.claim,
            r.trials,
            r.max_ratio,
            r.violations,
            r.rejections,
            r.residual_mass.map(|m| format!("  residual mass {m:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}
