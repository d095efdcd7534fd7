//! Build a small LCS by hand, simulate it and print the hybrid mode of every step.

use hybrid_reduction::lcs::io::{params_from_json, params_to_json};
use hybrid_reduction::lcs::{lcs_rollout, LcsDims, LcsParams, LcsParts};
use nalgebra::{DMatrix, DVector};

fn main() -> hybrid_reduction::Result<()> {
    // A scalar system with one contact-like constraint: the multiplier pushes back
    // once Dx + Eu + c turns negative.
    let mut parts = LcsParts::zeros(LcsDims::new(1, 1, 1));
    parts.a = DMatrix::from_element(1, 1, 0.8);
    parts.b = DMatrix::from_element(1, 1, 0.5);
    parts.c = DMatrix::from_element(1, 1, -1.5);
    parts.lcp_d = DMatrix::from_element(1, 1, 1.0);
    parts.lcp_e = DMatrix::from_element(1, 1, -0.7);
    parts.g = DMatrix::from_element(1, 1, 1.0);
    parts.lcp_c = DVector::from_element(1, 0.3);
    let theta = LcsParams::new(parts)?;

    let inputs: Vec<_> = (0..8).map(|t| DVector::from_element(1, if t < 4 { 2.0 } else { -2.0 })).collect();
    let traj = lcs_rollout(&theta, &DVector::from_element(1, 1.0), &inputs)?;
    for (t, sig) in traj.signatures.iter().enumerate() {
        println!(
            "t={t} x={:+.4} u={:+.1} lambda={:.4} mode {}",
            traj.states[t][0],
            inputs[t][0],
            traj.lambdas[t][0],
            sig.to_bit_string(1)
        );
    }

    let text = params_to_json(&theta);
    let back = params_from_json(&text, "<memory>")?;
    assert_eq!(back, theta);
    println!("parameters round-trip through {} bytes of JSON", text.len());
    Ok(())
}
