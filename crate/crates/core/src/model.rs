//! Model configuration, symbol-keyed parameters and the per-instance forward
//! pass from raw instance tensors to answer, span and losses.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_eval::{Dims, Prediction, QAInstance};
use crate::error::{Error, Result};
use crate::fusion::{downsize_encode, multimodal_attention, question_guided_attention, DownsizeParams};
use crate::geometry::{frame_diagonal, RelationRules, TimeSpan};
use crate::numerics::{derive_seed, Graph, Scalar, Tensor, Var};
use crate::predictor::{
    answer_scores, dp_span_proposal, span_heads, spatial_loss, temporal_encode, temporal_loss, total_loss,
    AnswerOutput, AnswerParams, Linear, LossWeights, CONV_KERNEL, NUM_HYPOTHESES,
};
use crate::relation_encoder::{build_spatial_graph, encode_video, FrameNodes, GatParams, NUM_EDGE_LABELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimsProfile {
    Paper,
    Reduced,
}

impl std::str::FromStr for DimsProfile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(DimsProfile::Paper),
            "reduced" => Ok(DimsProfile::Reduced),
            other => Err(format!("unknown dims profile {other:?}, expected paper or reduced")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: Dims,
    /// Shared width after downsizing.
    pub d_h: usize,
    /// Projection width of the modality Gram matrix.
    pub d_hat: usize,
    /// Attention heads in both graph layers.
    pub heads: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Longest proposed span in frames; the whole video when absent.
    #[serde(default)]
    pub max_span_len: Option<usize>,
    #[serde(default)]
    pub relations: RelationRules,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            dims: Dims::PAPER,
            d_h: 128,
            d_hat: 32,
            heads: 15,
            dropout: 0.1,
            max_span_len: None,
            relations: RelationRules::default(),
            loss_weights: LossWeights::default(),
        }
    }

    pub fn reduced() -> Self {
        ModelConfig {
            dims: Dims::REDUCED,
            d_h: 16,
            d_hat: 8,
            heads: 4,
            ..Self::paper()
        }
    }

    pub fn for_profile(profile: DimsProfile) -> Self {
        match profile {
            DimsProfile::Paper => Self::paper(),
            DimsProfile::Reduced => Self::reduced(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if [d.d_o, d.d_l, d.d_s, d.d_q, self.d_h, self.d_hat].contains(&0) {
            return Err(Error::Config("all widths must be positive".into()));
        }
        if self.d_h < 2 {
            return Err(Error::DegenerateNormalization);
        }
        if self.heads == 0 || !d.d_l.is_multiple_of(self.heads) || !d.d_o.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_l = {} and d_o = {}",
                self.heads, d.d_l, d.d_o
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {}", self.dropout)));
        }
        if self.max_span_len == Some(0) {
            return Err(Error::Config("max_span_len must be at least 1".into()));
        }
        self.loss_weights.validate()
    }
}

/// How a parameter tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Modalities that pass through a downsize block, in stream order.
pub const MODALITIES: [&str; 4] = ["object", "concept", "subtitle", "hypothesis"];

/// Every trainable tensor, in canonical order. Names follow the symbols
/// they hold.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let Dims { d_o, d_l, d_s, d_q } = cfg.dims;
    let (dh, dhat) = (cfg.d_h, cfg.d_hat);
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    for sym in ["W", "U", "V_dir1", "V_dir2"] {
        add(format!("spatial.{sym}"), vec![d_l, d_l], Init::Glorot);
    }
    add("spatial.b_lab".into(), vec![NUM_EDGE_LABELS, d_l], Init::Zeros);
    for sym in ["W", "U", "V"] {
        add(format!("semantic.{sym}"), vec![d_o, d_o], Init::Glorot);
    }
    add("semantic.W_s".into(), vec![2 * d_o, 1], Init::Glorot);
    for (m, d_in) in MODALITIES.iter().zip([d_o, d_l, d_s, d_q]) {
        add(format!("downsize.{m}.proj"), vec![d_in, dh], Init::Glorot);
        add(format!("downsize.{m}.W_d"), vec![dh, dh], Init::Glorot);
        add(format!("downsize.{m}.ln_gain"), vec![dh], Init::Ones);
        add(format!("downsize.{m}.ln_bias"), vec![dh], Init::Zeros);
    }
    add("fusion.W_F".into(), vec![dh, dhat], Init::Glorot);
    add("predictor.conv.W".into(), vec![CONV_KERNEL * dh, dh], Init::Glorot);
    add("predictor.conv.b".into(), vec![dh], Init::Zeros);
    // output heads start at zero so every distribution starts uniform
    for head in ["start", "end"] {
        add(format!("predictor.{head}.w"), vec![dh, 1], Init::Zeros);
        add(format!("predictor.{head}.b"), vec![1], Init::Zeros);
    }
    add("predictor.answer.W".into(), vec![dh, dh], Init::Glorot);
    add("predictor.answer.b".into(), vec![dh], Init::Zeros);
    add("predictor.score.w".into(), vec![2 * dh, 1], Init::Zeros);
    add("predictor.score.b".into(), vec![1], Init::Zeros);
    specs
}

/// Module a parameter belongs to, from its name.
pub fn param_module(name: &str) -> &'static str {
    match name.split('.').next() {
        Some("spatial" | "semantic") => "relation_encoder",
        Some("downsize" | "fusion") => "fusion",
        _ => "predictor",
    }
}

/// All trainable tensors keyed by name, in [`param_layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    tensors: IndexMap<String, Tensor<S>>,
}

fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [a, b] => (*a, *b),
        _ => (shape.iter().product(), 1),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<S: Scalar> ModelParams<S> {
    /// Standard initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_layout(cfg)
            .into_iter()
            .map(|spec| {
                let n = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Zeros => vec![S::zero(); n],
                    Init::Ones => vec![S::one(); n],
                    Init::Glorot => {
                        let a = glorot_bound(&spec.shape);
                        (0..n).map(|_| S::lit(rng.gen_range(-a..a))).collect()
                    }
                };
                Ok((spec.name, Tensor::new(spec.shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { tensors })
    }

    /// Every tensor random, including biases, gains and output heads, so no
    /// gradient is structurally zero. Used by the gradient check.
    pub fn init_dense(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_layout(cfg)
            .into_iter()
            .map(|spec| {
                let n = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Glorot => {
                        let a = glorot_bound(&spec.shape);
                        (0..n).map(|_| S::lit(rng.gen_range(-a..a))).collect()
                    }
                    Init::Ones => (0..n).map(|_| S::lit(rng.gen_range(0.8..1.2))).collect(),
                    Init::Zeros => (0..n).map(|_| S::lit(rng.gen_range(-0.2..0.2))).collect(),
                };
                Ok((spec.name, Tensor::new(spec.shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { tensors })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = param_layout(cfg)
            .into_iter()
            .map(|spec| (spec.name, Tensor::zeros(spec.shape)))
            .collect();
        Ok(ModelParams { tensors })
    }

    /// Builds parameters from named tensors, checking names and shapes
    /// against the layout of `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: IndexMap<String, Tensor<S>>) -> Result<Self> {
        let layout = param_layout(cfg);
        let mut tensors = IndexMap::with_capacity(layout.len());
        for spec in layout {
            let t = named
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Dimension {
                    id: "checkpoint".into(),
                    field: spec.name,
                    expected: spec.shape.iter().product(),
                    found: t.len(),
                });
            }
            tensors.insert(spec.name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Config(format!("unknown parameter {extra}")));
        }
        Ok(ModelParams { tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.values_mut()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &Graph<S>, cfg: &ModelConfig) -> Result<BoundParams> {
        let vars: Vec<Var> = self.tensors.values().map(|t| g.param(t.clone())).collect();
        BoundParams::from_vars(cfg, &vars)
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

/// Parameters registered in a graph, grouped by the block that uses them.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub spatial: GatParams,
    pub semantic: GatParams,
    pub w_s: Var,
    /// Downsize blocks in [`MODALITIES`] order.
    pub downsize: [DownsizeParams; 4],
    pub w_f: Var,
    pub conv: Linear,
    pub start: Linear,
    pub end: Linear,
    pub answer: AnswerParams,
    /// All vars in layout order.
    pub vars: Vec<Var>,
}

impl BoundParams {
    /// Groups vars given in [`param_layout`] order.
    pub fn from_vars(cfg: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let layout = param_layout(cfg);
        if vars.len() != layout.len() {
            return Err(Error::LengthMismatch {
                left: vars.len(),
                right: layout.len(),
            });
        }
        let index: IndexMap<&str, Var> = layout
            .iter()
            .map(|s| s.name.as_str())
            .zip(vars.iter().copied())
            .collect();
        let v = |name: &str| index[name];
        let linear = |w: &str, b: &str| Linear { w: v(w), b: v(b) };
        let downsize = MODALITIES.map(|m| DownsizeParams {
            proj: v(&format!("downsize.{m}.proj")),
            w_d: v(&format!("downsize.{m}.W_d")),
            ln_gain: v(&format!("downsize.{m}.ln_gain")),
            ln_bias: v(&format!("downsize.{m}.ln_bias")),
        });
        Ok(BoundParams {
            spatial: GatParams {
                w: v("spatial.W"),
                u: v("spatial.U"),
                v: vec![v("spatial.V_dir1"), v("spatial.V_dir2")],
                label_bias: Some(v("spatial.b_lab")),
                heads: cfg.heads,
            },
            semantic: GatParams {
                w: v("semantic.W"),
                u: v("semantic.U"),
                v: vec![v("semantic.V")],
                label_bias: None,
                heads: cfg.heads,
            },
            w_s: v("semantic.W_s"),
            downsize,
            w_f: v("fusion.W_F"),
            conv: linear("predictor.conv.W", "predictor.conv.b"),
            start: linear("predictor.start.w", "predictor.start.b"),
            end: linear("predictor.end.w", "predictor.end.b"),
            answer: AnswerParams {
                frame: linear("predictor.answer.W", "predictor.answer.b"),
                score: linear("predictor.score.w", "predictor.score.b"),
            },
            vars: vars.to_vec(),
        })
    }
}

/// Where dropout masks come from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutSeed {
    pub seed: u64,
    pub epoch: u64,
    pub instance: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub answer: Var,
    pub spatial: Var,
    pub temporal: Var,
    pub total: Var,
}

/// Everything the forward pass produces for one instance.
#[derive(Clone, Debug)]
pub struct InstanceOutput {
    pub answer: AnswerOutput,
    /// Per hypothesis, `[T]` start and end distributions.
    pub p_start: Vec<Var>,
    pub p_end: Vec<Var>,
    /// Per hypothesis, its proposed span.
    pub spans: Vec<TimeSpan>,
    /// Per hypothesis and frame, `[L_q × N_o]` pre-softmax object scores.
    pub object_logits: Vec<Vec<Var>>,
    /// `[3 × 3]` modality weights per hypothesis and frame.
    pub modality_weights: Vec<Vec<Var>>,
    pub losses: LossVars,
    pub prediction: Prediction,
}

fn rows_tensor<S: Scalar>(rows: &[&[f64]]) -> Result<Tensor<S>> {
    let width = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| S::lit(v))).collect();
    Tensor::new(vec![rows.len(), width], data)
}

/// Full forward pass on one instance, including the three losses.
///
/// With a training graph and `dropout` set, dropout is applied to each
/// downsized stream with a seed derived from the seed, epoch, instance and
/// stream.
pub fn forward<S: Scalar>(
    g: &Graph<S>,
    cfg: &ModelConfig,
    p: &BoundParams,
    inst: &QAInstance,
    dropout: Option<DropoutSeed>,
) -> Result<InstanceOutput> {
    let t_len = inst.num_frames();
    let gt_span = inst.gt_span()?;
    let [fw, fh] = inst.frame_size();
    let diag = frame_diagonal(fw, fh);

    let mut frames = Vec::with_capacity(t_len);
    for (t, f) in inst.frames.iter().enumerate() {
        let boxes: Vec<_> = f.objects.iter().map(|o| o.bbox).collect();
        let spatial = build_spatial_graph(&boxes, diag, &cfg.relations).map_err(|e| e.in_frame(t))?;
        let labels: Vec<&[f64]> = f.objects.iter().map(|o| o.label_embedding.as_slice()).collect();
        let features: Vec<&[f64]> = f.objects.iter().map(|o| o.feature.as_slice()).collect();
        frames.push(FrameNodes {
            labels: g.constant(rows_tensor(&labels)?),
            features: g.constant(rows_tensor(&features)?),
            spatial,
        });
    }
    let encoded = encode_video(g, &frames, &p.spatial, &p.semantic, p.w_s)?;

    // Downsize each modality over all its rows at once, then split.
    let mut site = 0u64;
    let mut downsize = |parts: &[Var], block: &DownsizeParams| -> Result<Vec<Var>> {
        let stacked = g.concat(parts, 0)?;
        let mut y = downsize_encode(g, stacked, block)?;
        if let Some(d) = dropout {
            y = g.dropout(y, cfg.dropout, derive_seed(&[d.seed, d.epoch, d.instance, site]))?;
        }
        site += 1;
        let mut out = Vec::with_capacity(parts.len());
        let mut at = 0;
        for &part in parts {
            let n = g.shape(part)[0];
            out.push(g.narrow(y, 0, at, n)?);
            at += n;
        }
        Ok(out)
    };
    let objects = downsize(&encoded.iter().map(|e| e.features).collect::<Vec<_>>(), &p.downsize[0])?;
    let concepts = downsize(&encoded.iter().map(|e| e.labels).collect::<Vec<_>>(), &p.downsize[1])?;
    let subtitles = {
        let parts = inst
            .frames
            .iter()
            .map(|f| Ok(g.constant(rows_tensor(&f.subtitle.iter().map(Vec::as_slice).collect::<Vec<_>>())?)))
            .collect::<Result<Vec<_>>>()?;
        downsize(&parts, &p.downsize[2])?
    };
    let hypotheses = {
        let parts = inst
            .hypotheses
            .iter()
            .map(|h| Ok(g.constant(rows_tensor(&h.iter().map(Vec::as_slice).collect::<Vec<_>>())?)))
            .collect::<Result<Vec<_>>>()?;
        downsize(&parts, &p.downsize[3])?
    };

    let max_len = cfg.max_span_len.unwrap_or(t_len).min(t_len);
    let (mut reps, mut p_start, mut p_end, mut spans) = (vec![], vec![], vec![], vec![]);
    let (mut object_logits, mut modality_weights) = (vec![], vec![]);
    for &h in &hypotheses {
        let lq = g.shape(h)[0];
        let mut fused = Vec::with_capacity(t_len);
        let (mut logits_k, mut weights_k) = (Vec::with_capacity(t_len), Vec::with_capacity(t_len));
        for t in 0..t_len {
            let o = question_guided_attention(g, h, objects[t])?;
            let l = question_guided_attention(g, h, concepts[t])?;
            let s = question_guided_attention(g, h, subtitles[t])?;
            let f = multimodal_attention(g, [o.attended, l.attended, s.attended], p.w_f)?;
            fused.push(g.reshape(f.fused, vec![1, lq, cfg.d_h])?);
            logits_k.push(o.logits);
            weights_k.push(f.weights);
        }
        let y = g.concat(&fused, 0)?;
        let a = temporal_encode(g, y, &p.conv)?;
        let (ps, pe) = span_heads(g, a, &p.start, &p.end)?;
        let span = dp_span_proposal(&g.data(ps), &g.data(pe), max_len)?;
        reps.push(a);
        p_start.push(ps);
        p_end.push(pe);
        spans.push(span);
        object_logits.push(logits_k);
        modality_weights.push(weights_k);
    }
    let answer = answer_scores(g, &reps, &spans, &p.answer)?;

    let gt = inst.gt.answer_idx;
    let answer_loss = g.cross_entropy(answer.probs, gt)?;
    let temporal = temporal_loss(g, p_start[gt], p_end[gt], gt_span)?;
    let spatial_frames: Vec<(Var, Vec<bool>)> = (gt_span.start..gt_span.end)
        .map(|t| (object_logits[gt][t], inst.positive_objects(t)))
        .collect();
    let spatial = spatial_loss(g, &spatial_frames)?;
    let total = total_loss(g, answer_loss, spatial, temporal, &cfg.loss_weights)?;

    let probs = g.data(answer.probs);
    let best = (0..probs.len()).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
    Ok(InstanceOutput {
        answer,
        p_start,
        p_end,
        prediction: Prediction {
            answer: best,
            span: spans[best],
        },
        spans,
        object_logits,
        modality_weights,
        losses: LossVars {
            answer: answer_loss,
            spatial,
            temporal,
            total,
        },
    })
}

/// Checks that an instance fits the model before running it.
pub fn check_instance(cfg: &ModelConfig, inst: &QAInstance) -> Result<()> {
    inst.validate(&cfg.dims)?;
    for (k, h) in inst.hypotheses.iter().enumerate() {
        if h.len() < CONV_KERNEL {
            return Err(Error::Schema {
                id: inst.id.clone(),
                field: format!("hypotheses[{k}]"),
                message: format!("needs at least {CONV_KERNEL} tokens, found {}", h.len()),
            });
        }
    }
    debug_assert_eq!(inst.hypotheses.len(), NUM_HYPOTHESES);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_eval::{generate_synthetic, SyntheticConfig};

    fn toy(seed: u64) -> QAInstance {
        let cfg = SyntheticConfig {
            frames: 4,
            ..SyntheticConfig::reduced(1, seed)
        };
        generate_synthetic(&cfg).unwrap().dataset.instances.remove(0)
    }

    #[test]
    fn layout_is_unique_and_matches_init() {
        let cfg = ModelConfig::reduced();
        let layout = param_layout(&cfg);
        let names: std::collections::HashSet<_> = layout.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), layout.len());
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        for (spec, (name, t)) in layout.iter().zip(p.iter()) {
            assert_eq!(&spec.name, name);
            assert_eq!(spec.shape.as_slice(), t.shape());
        }
        let a = glorot_bound(&[24, 24]);
        let w = p.get("spatial.W").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= a));
        assert!(p.get("predictor.score.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p
            .get("downsize.object.ln_gain")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert_eq!(param_module("semantic.W_s"), "relation_encoder");
        assert_eq!(param_module("fusion.W_F"), "fusion");
        assert_eq!(param_module("predictor.conv.W"), "predictor");
    }

    #[test]
    fn paper_profile_shapes() {
        let cfg = ModelConfig::paper();
        cfg.validate().unwrap();
        let layout = param_layout(&cfg);
        let shape = |n: &str| layout.iter().find(|s| s.name == n).unwrap().shape.clone();
        assert_eq!(shape("spatial.W"), vec![300, 300]);
        assert_eq!(shape("downsize.subtitle.proj"), vec![768, 128]);
        assert_eq!(shape("fusion.W_F"), vec![128, 32]);
        assert_eq!(300 / cfg.heads, 20);
        let bad = ModelConfig {
            heads: 7,
            ..ModelConfig::reduced()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fresh_model_has_uniform_outputs() {
        let cfg = ModelConfig::reduced();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let inst = toy(2);
        let g = Graph::new();
        let b = params.bind(&g, &cfg).unwrap();
        let out = forward(&g, &cfg, &b, &inst, None).unwrap();
        assert_eq!(g.data(out.answer.probs), vec![0.2; 5]);
        assert!((g.scalar(out.losses.answer) - 5f64.ln()).abs() < 1e-12);
        assert!((g.scalar(out.losses.temporal) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(out.prediction.answer, 0);
        for k in 0..5 {
            assert_eq!(g.data(out.p_start[k]), vec![0.25; 4]);
            assert_eq!(out.spans[k], TimeSpan::new(0, 1, 4).unwrap());
        }
        let total = g.scalar(out.losses.total);
        let expect =
            g.scalar(out.losses.answer) + 0.5 * g.scalar(out.losses.spatial) + 0.5 * g.scalar(out.losses.temporal);
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn distributions_are_valid() {
        let cfg = ModelConfig::reduced();
        let params = ModelParams::<f64>::init_dense(&cfg, 5).unwrap();
        let inst = toy(6);
        let g = Graph::new();
        let b = params.bind(&g, &cfg).unwrap();
        let out = forward(&g, &cfg, &b, &inst, None).unwrap();
        let check = |v: Var| {
            let d = g.data(v);
            assert!(d.iter().all(|&x| x >= 0.0));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        };
        check(out.answer.probs);
        for k in 0..5 {
            check(out.p_start[k]);
            check(out.p_end[k]);
            assert!(out.spans[k].start < out.spans[k].end);
            for w in &out.modality_weights[k] {
                let w = g.data(*w);
                for col in 0..3 {
                    assert!(((0..3).map(|r| w[r * 3 + col]).sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert_eq!(out.prediction.span, out.spans[out.prediction.answer]);
    }

    #[test]
    fn training_dropout_is_seeded() {
        let cfg = ModelConfig::reduced();
        let params = ModelParams::<f64>::init_dense(&cfg, 5).unwrap();
        let inst = toy(6);
        let run = |seed: u64, train: bool| {
            let g = if train { Graph::training() } else { Graph::new() };
            let b = params.bind(&g, &cfg).unwrap();
            let d = DropoutSeed {
                seed,
                epoch: 0,
                instance: 0,
            };
            let out = forward(&g, &cfg, &b, &inst, Some(d)).unwrap();
            g.scalar(out.losses.total)
        };
        assert_eq!(run(1, true).to_bits(), run(1, true).to_bits());
        assert_ne!(run(1, true), run(2, true));
        assert_eq!(run(1, false), run(2, false));
    }

    #[test]
    fn f32_forward_runs() {
        let cfg = ModelConfig::reduced();
        let params = ModelParams::<f64>::init_dense(&cfg, 5).unwrap().cast::<f32>();
        let g = Graph::<f32>::new();
        let b = params.bind(&g, &cfg).unwrap();
        let out = forward(&g, &cfg, &b, &toy(6), None).unwrap();
        assert!(g.scalar(out.losses.total).is_finite());
    }

    #[test]
    fn short_hypotheses_are_rejected() {
        let cfg = ModelConfig::reduced();
        let mut inst = toy(1);
        inst.hypotheses[2].truncate(2);
        assert!(matches!(check_instance(&cfg, &inst), Err(Error::Schema { .. })));
    }
}
