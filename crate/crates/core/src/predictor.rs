//! Temporal encoding, span heads, span proposals, answer scoring and losses.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TimeSpan;
use crate::numerics::{Graph, Scalar, Tensor, Var};

pub const NUM_HYPOTHESES: usize = 5;
pub const CONV_KERNEL: usize = 3;

/// Affine map `x·w + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn apply<S: Scalar>(&self, g: &Graph<S>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        g.add_bias(y, self.b)
    }
}

/// Token-axis convolution (kernel 3, zero padding) + ReLU, then a max over
/// tokens. `y` is `[T × L_q × d_h]`; `conv.w` is `[3·d_h × d_h]` with the
/// previous, current and next token blocks stacked in that order.
pub fn temporal_encode<S: Scalar>(g: &Graph<S>, y: Var, conv: &Linear) -> Result<Var> {
    let shape = g.shape(y);
    let [t, lq, d] = shape[..] else {
        return Err(Error::shape("temporal_encode", &shape, &[0, 0, 0]));
    };
    if lq < CONV_KERNEL {
        return Err(Error::shape("temporal_encode", &shape, &[t, CONV_KERNEL, d]));
    }
    let flat = g.reshape(y, vec![t * lq, d])?;
    let half = CONV_KERNEL / 2;
    let mut rows = Vec::with_capacity(t * lq * CONV_KERNEL);
    for f in 0..t {
        for l in 0..lq {
            for k in 0..CONV_KERNEL {
                let pos = (l + k).checked_sub(half).filter(|&p| p < lq);
                rows.push(pos.map(|p| f * lq + p));
            }
        }
    }
    let windows = g.gather_rows(flat, &rows)?;
    let windows = g.reshape(windows, vec![t * lq, CONV_KERNEL * d])?;
    let h = conv.apply(g, windows)?;
    let h = g.relu(h);
    let h = g.reshape(h, vec![t, lq, d])?;
    g.max_pool(h, 1)
}

/// Start and end distributions over the `T` frames of `a: [T × d_h]`.
pub fn span_heads<S: Scalar>(g: &Graph<S>, a: Var, start: &Linear, end: &Linear) -> Result<(Var, Var)> {
    let t = g.shape(a)[0];
    let head = |p: &Linear| -> Result<Var> {
        let logits = p.apply(g, a)?;
        let logits = g.reshape(logits, vec![t])?;
        g.softmax(logits, 0)
    };
    Ok((head(start)?, head(end)?))
}

/// Best span `[s, e + 1)` maximizing `p_start[s]·p_end[e]` with
/// `s ≤ e < s + max_len`. Ties go to the smallest `s`, then the smallest `e`.
///
/// Runs in linear time with a sliding-window maximum over `p_start`.
pub fn dp_span_proposal<S: Scalar>(p_start: &[S], p_end: &[S], max_len: usize) -> Result<TimeSpan> {
    let t = p_start.len();
    if t == 0 || p_end.len() != t {
        return Err(Error::LengthMismatch {
            left: t,
            right: p_end.len(),
        });
    }
    if max_len == 0 || max_len > t {
        return Err(Error::Config(format!("max_len {max_len} outside 1..={t}")));
    }
    if p_start.iter().chain(p_end).any(|p| !p.is_finite() || *p < S::zero()) {
        return Err(Error::NonFinite("span probabilities".into()));
    }

    let mut window: VecDeque<usize> = VecDeque::new();
    let mut best = (S::zero(), 0, 0);
    let mut found = false;
    for e in 0..t {
        while window.back().is_some_and(|&b| p_start[b] < p_start[e]) {
            window.pop_back();
        }
        window.push_back(e);
        let lo = (e + 1).saturating_sub(max_len);
        while window.front().is_some_and(|&f| f < lo) {
            window.pop_front();
        }
        let top = window[0];
        let score = p_start[top] * p_end[e];
        // a zero product ties with every start in the window
        let s = if score == S::zero() { lo } else { top };
        if !found || score > best.0 || (score == best.0 && s < best.1) {
            best = (score, s, e);
            found = true;
        }
    }
    TimeSpan::new(best.1, best.2 + 1, t)
}

#[derive(Clone, Copy, Debug)]
pub struct AnswerParams {
    /// `d_h → d_h` map applied per frame before pooling.
    pub frame: Linear,
    /// `2·d_h → 1` scoring layer on `[G_global; G_local]`.
    pub score: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct AnswerOutput {
    /// `[5]` pre-softmax scores.
    pub logits: Var,
    /// `[5]` answer distribution.
    pub probs: Var,
}

/// Scores each hypothesis from its frame representations `a[k]: [T × d_h]`
/// and its proposed span.
pub fn answer_scores<S: Scalar>(g: &Graph<S>, a: &[Var], spans: &[TimeSpan], p: &AnswerParams) -> Result<AnswerOutput> {
    if a.len() != spans.len() || a.is_empty() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: spans.len(),
        });
    }
    let mut scores = Vec::with_capacity(a.len());
    for (&ak, span) in a.iter().zip(spans) {
        let t = g.shape(ak)[0];
        if span.is_empty() || span.end > t {
            return Err(Error::Internal(format!(
                "span [{}, {}) for {t} frames",
                span.start, span.end
            )));
        }
        let h = p.frame.apply(g, ak)?;
        let h = g.relu(h);
        let global = g.max_pool(h, 0)?;
        let local = g.narrow(h, 0, span.start, span.len())?;
        let local = g.max_pool(local, 0)?;
        let pooled = g.concat(&[global, local], 0)?;
        let width = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, vec![1, width])?;
        scores.push(p.score.apply(g, pooled)?);
    }
    let logits = g.concat(&scores, 1)?;
    let logits = g.reshape(logits, vec![a.len()])?;
    let probs = g.softmax(logits, 0)?;
    Ok(AnswerOutput { logits, probs })
}

/// Pairwise ranking loss on one frame: every positive object's token-max
/// logit is pushed above every negative's, `Σ softplus(s_neg − s_pos)`.
/// `logits` is `[L_q × N_o]`; frames without a positive/negative pair
/// contribute nothing.
pub fn spatial_frame_loss<S: Scalar>(g: &Graph<S>, logits: Var, positive: &[bool]) -> Result<Option<Var>> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[1] != positive.len() {
        return Err(Error::shape("spatial_loss", &shape, &[0, positive.len()]));
    }
    let pos: Vec<usize> = (0..positive.len()).filter(|&i| positive[i]).collect();
    let neg: Vec<usize> = (0..positive.len()).filter(|&i| !positive[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let scores = g.max_pool(logits, 0)?;
    let pairs = pos.len() * neg.len();
    let (mut pi, mut ni) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    for &p in &pos {
        for &n in &neg {
            pi.push(Some(p));
            ni.push(Some(n));
        }
    }
    let sp = g.gather(scores, pi, vec![pairs])?;
    let sn = g.gather(scores, ni, vec![pairs])?;
    let margin = g.sub(sn, sp)?;
    Ok(Some(g.sum(g.softplus(margin))))
}

/// Sum of [`spatial_frame_loss`] over frames; zero when no frame has a pair.
pub fn spatial_loss<S: Scalar>(g: &Graph<S>, frames: &[(Var, Vec<bool>)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (t, (logits, positive)) in frames.iter().enumerate() {
        if let Some(l) = spatial_frame_loss(g, *logits, positive).map_err(|e| e.in_frame(t))? {
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(S::zero()))))
}

/// `(CE(p_start, start) + CE(p_end, end − 1)) / 2`.
pub fn temporal_loss<S: Scalar>(g: &Graph<S>, p_start: Var, p_end: Var, gt: TimeSpan) -> Result<Var> {
    let t = g.shape(p_start)[0];
    if gt.is_empty() || gt.end > t {
        return Err(Error::InvalidSpan {
            start: gt.start,
            end: gt.end,
            len: t,
        });
    }
    let a = g.cross_entropy(p_start, gt.start)?;
    let b = g.cross_entropy(p_end, gt.end - 1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, S::lit(0.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub answer: f64,
    pub spatial: f64,
    pub temporal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            answer: 1.0,
            spatial: 0.5,
            temporal: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("answer", self.answer),
            ("spatial", self.spatial),
            ("temporal", self.temporal),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Weighted sum of the three losses. Each component must be finite and ≥ 0.
pub fn total_loss<S: Scalar>(g: &Graph<S>, answer: Var, spatial: Var, temporal: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    for (name, v) in [("answer", answer), ("spatial", spatial), ("temporal", temporal)] {
        let value = g.scalar(v).as_f64();
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidLoss { name, value });
        }
    }
    let a = g.scale(answer, S::lit(w.answer));
    let s = g.scale(spatial, S::lit(w.spatial));
    let t = g.scale(temporal, S::lit(w.temporal));
    let at = g.add(a, s)?;
    g.add(at, t)
}
