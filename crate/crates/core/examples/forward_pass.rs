//! One prompt through the attention layer, then the same prompt reduced to
//! feature counts.
use icl_lab::attention::{attention_profile, embed, forward, lift, token_attention};
use icl_lab::{BasisMode, FeatureBasis, Prompt, ReducedWeights};
use nalgebra::{DMatrix, DVector};

fn main() -> icl_lab::Result<()> {
    let basis = FeatureBasis::build(5, 3, 42, BasisMode::RandomOrthonormal)?;
    let m = ReducedWeights::from_matrix(DMatrix::from_row_slice(
        3,
        3,
        &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0],
    ))?;
    let q = lift(&m, &basis);
    let w = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);

    let prompt = Prompt::new(vec![0, 2, 1, 0, 2, 2, 1], 2, Some(w.clone()))?;
    let emb = embed(&prompt, &basis)?;
    let attn = token_attention(&emb, &q)?;
    let y_hat = forward(&emb, &q)?;
    let target = basis.vector(prompt.query).dot(&w);

    println!("token attention: {:?}", attn.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>());
    println!("y_hat = {y_hat:.6}, target <w, v_q> = {target:.6}");

    let profile = attention_profile(&prompt.counts(3)?, prompt.query, &m)?;
    println!("per-feature attention from counts: {:?}", profile.scores);
    Ok(())
}
