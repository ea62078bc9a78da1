//! Projection to the shared width, question-guided attention and Gram-matrix
//! modality fusion.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Number of fused modality streams: visual features, visual concepts, subtitles.
pub const NUM_MODALITIES: usize = 3;

/// Bound parameters of one downsize block.
#[derive(Clone, Copy, Debug)]
pub struct DownsizeParams {
    /// `[d_in × d_h]` linear pre-projection.
    pub proj: Var,
    /// `[d_h × d_h]` residual branch.
    pub w_d: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// `y0 = x·proj`, `y = LayerNorm(ReLU(y0·W_d) + y0)`.
pub fn downsize_encode<S: Scalar>(g: &Graph<S>, x: Var, p: &DownsizeParams) -> Result<Var> {
    let y0 = g.matmul(x, p.proj)?;
    let branch = g.matmul(y0, p.w_d)?;
    let branch = g.relu(branch);
    let sum = g.add(branch, y0)?;
    g.layer_norm(sum, p.ln_gain, p.ln_bias)
}

#[derive(Clone, Copy, Debug)]
pub struct QuestionAttention {
    /// Pre-softmax `[L_q × n]` scores `h · mᵀ`.
    pub logits: Var,
    /// Row-wise softmax of `logits`.
    pub scores: Var,
    /// `[L_q × d_h]` attended representation `scores · m`.
    pub attended: Var,
}

/// Attends from each hypothesis token over the `n` rows of a modality.
pub fn question_guided_attention<S: Scalar>(g: &Graph<S>, hypothesis: Var, modality: Var) -> Result<QuestionAttention> {
    let mt = g.transpose(modality)?;
    let logits = g.matmul(hypothesis, mt)?;
    let scores = g.softmax(logits, 1)?;
    let attended = g.matmul(scores, modality)?;
    Ok(QuestionAttention {
        logits,
        scores,
        attended,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct FusedStream {
    /// `[L_q × d_h]` average of the three reweighted streams.
    pub fused: Var,
    /// `[3 × 3]` weights `w[j, i]`; every column is a distribution over `j`.
    pub weights: Var,
}

/// Fuses three `[L_q × d_h]` streams.
///
/// `Z_m = flatten(X_m · W_F) / sqrt(L_q · d̂_h)`, `G = ZᵀZ` over modalities,
/// `w = softmax(G)` down each column, `Y_i = Σ_j w[j, i] X_j`, and the output
/// is the mean of the three `Y_i`.
pub fn multimodal_attention<S: Scalar>(g: &Graph<S>, streams: [Var; NUM_MODALITIES], w_f: Var) -> Result<FusedStream> {
    let shape = g.shape(streams[0]);
    let [lq, dh] = shape[..] else {
        return Err(Error::shape("multimodal_attention", &shape, &[0, 0]));
    };
    for &s in &streams[1..] {
        let other = g.shape(s);
        if other != shape {
            return Err(Error::shape("multimodal_attention", &shape, &other));
        }
    }
    let wf = g.shape(w_f);
    if wf.len() != 2 || wf[0] != dh {
        return Err(Error::shape("multimodal_attention", &wf, &[dh, 0]));
    }
    let low = wf[1];
    let norm = S::one() / S::lit((lq * low) as f64).sqrt();

    let mut zs = Vec::with_capacity(NUM_MODALITIES);
    let mut xs = Vec::with_capacity(NUM_MODALITIES);
    for &x in &streams {
        let z = g.matmul(x, w_f)?;
        let z = g.reshape(z, vec![1, lq * low])?;
        zs.push(g.scale(z, norm));
        xs.push(g.reshape(x, vec![1, lq * dh])?);
    }
    let z = g.concat(&zs, 0)?; // [3 × L_q·d̂]
    let zt = g.transpose(z)?;
    let gram = g.matmul(z, zt)?;
    if !g.value(gram).all_finite() {
        return Err(Error::NonFinite("modality Gram matrix".into()));
    }
    let weights = g.softmax(gram, 0)?;

    let x = g.concat(&xs, 0)?; // [3 × L_q·d_h], row j = X_j
    let wt = g.transpose(weights)?;
    let y = g.matmul(wt, x)?; // row i = Y_i
    let mean = g.constant(Tensor::filled(
        vec![1, NUM_MODALITIES],
        S::one() / S::lit(NUM_MODALITIES as f64),
    ));
    let fused = g.matmul(mean, y)?;
    let fused = g.reshape(fused, vec![lq, dh])?;
    Ok(FusedStream { fused, weights })
}
