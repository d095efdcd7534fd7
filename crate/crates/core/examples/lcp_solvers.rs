//! Solve random monotone LCPs and non-negative QPs, checking each against enumeration.

use hybrid_reduction::solvers::lcp::{solve_lcp, solve_lcp_enum, LcpProblem};
use hybrid_reduction::solvers::qp::{solve_qp_nonneg, QpNonneg};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
}

fn main() -> hybrid_reduction::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=4);
        let g = random_matrix(&mut rng, n);
        let h = random_matrix(&mut rng, n);
        // GGᵀ + H − Hᵀ + I has a positive definite symmetric part.
        let m = &g * g.transpose() + &h - h.transpose() + DMatrix::identity(n, n);
        let q = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let p = LcpProblem::new(m, q)?;
        let lambda = solve_lcp(&p, 1e-10)?;
        let exact = solve_lcp_enum(&p)?;
        worst = worst.max((&lambda - &exact).amax());
    }
    println!("LCP: 200 instances, largest deviation from enumeration {worst:.2e}");

    let a = random_matrix(&mut rng, 5);
    let qp = QpNonneg::new(a.transpose() * &a + DMatrix::identity(5, 5), DVector::from_fn(5, |i, _| i as f64 - 2.0))?;
    let z = solve_qp_nonneg(&qp, 1e-10)?;
    println!("QP: z = {:.4?}, objective {:.6}, KKT residual {:.2e}", z.as_slice(), qp.objective(&z), qp.kkt_residual(&z));
    Ok(())
}
