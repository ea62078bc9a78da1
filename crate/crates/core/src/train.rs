//! Training loop, batch prediction and the full-model gradient check.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_eval::{evaluate, generate_synthetic, Dataset, Dims, Metrics, Prediction, QAInstance, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{
    check_instance, forward, param_module, BoundParams, DimsProfile, DropoutSeed, ModelConfig, ModelParams,
};
use crate::numerics::{derive_seed, grad_check, Graph, DEFAULT_EPS};
use crate::optim::{step_decay, Adam, AdamConfig};
use crate::predictor::LossWeights;

fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_decay_every() -> usize {
    10
}
fn default_dropout() -> f64 {
    0.1
}
fn default_profile() -> DimsProfile {
    DimsProfile::Paper
}
fn default_checkpoint() -> PathBuf {
    PathBuf::from("checkpoint.json")
}

/// Training run settings, read from JSON. Relative paths are resolved
/// against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset manifest.
    pub data: PathBuf,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub seed: u64,
    #[serde(default = "default_profile")]
    pub profile: DimsProfile,
    #[serde(default)]
    pub max_span_len: Option<usize>,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    /// Per-epoch log, one JSON object per line.
    #[serde(default)]
    pub log: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(data: impl Into<PathBuf>, epochs: usize, seed: u64, profile: DimsProfile) -> Self {
        TrainConfig {
            data: data.into(),
            epochs,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            lr_decay_factor: default_decay_factor(),
            lr_decay_every: default_decay_every(),
            dropout: default_dropout(),
            loss_weights: LossWeights::default(),
            seed,
            profile,
            max_span_len: None,
            checkpoint: default_checkpoint(),
            log: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "learning-rate decay needs a positive factor and period".into(),
            ));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dropout: self.dropout,
            max_span_len: self.max_span_len,
            loss_weights: self.loss_weights,
            ..ModelConfig::for_profile(self.profile)
        }
    }
}

/// Loss components of one instance or averaged over many.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub answer: f64,
    pub spatial: f64,
    pub temporal: f64,
}

impl LossValues {
    fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.answer += o.answer;
        self.spatial += o.spatial;
        self.temporal += o.temporal;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.total *= k;
        self.answer *= k;
        self.spatial *= k;
        self.temporal *= k;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over the epoch's training passes.
    pub loss: LossValues,
    /// Metrics of the predictions made during the epoch's training passes.
    pub metrics: Metrics,
}

/// Result of one forward (and optionally backward) pass.
#[derive(Clone, Debug)]
pub struct InstanceResult {
    pub losses: LossValues,
    pub prediction: Prediction,
    /// Gradients in layout order, when requested.
    pub grads: Option<Vec<Vec<f64>>>,
}

/// Runs one instance. With `dropout` set the pass uses a training graph.
pub fn run_instance(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    inst: &QAInstance,
    dropout: Option<DropoutSeed>,
    with_grads: bool,
) -> Result<InstanceResult> {
    let g = if dropout.is_some() {
        Graph::training()
    } else {
        Graph::new()
    };
    let b = params.bind(&g, cfg)?;
    let out = forward(&g, cfg, &b, inst, dropout)?;
    let l = &out.losses;
    let losses = LossValues {
        total: g.scalar(l.total),
        answer: g.scalar(l.answer),
        spatial: g.scalar(l.spatial),
        temporal: g.scalar(l.temporal),
    };
    let grads = if with_grads {
        g.backward(l.total)?;
        Some(
            b.vars
                .iter()
                .map(|&v| {
                    g.value(v)
                        .grad()
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::Internal("missing gradient".into()))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(InstanceResult {
        losses,
        prediction: out.prediction,
        grads,
    })
}

fn with_id<T>(inst: &QAInstance, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ (Error::Schema { .. } | Error::Dimension { .. }) => e,
        other => Error::Schema {
            id: inst.id.clone(),
            field: "forward".into(),
            message: other.to_string(),
        },
    })
}

pub fn check_dims(cfg: &ModelConfig, dims: &Dims) -> Result<()> {
    if cfg.dims != *dims {
        return Err(Error::Config(format!(
            "model dims {:?} do not match dataset dims {:?}",
            cfg.dims, dims
        )));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub params: ModelParams<f64>,
    pub log: Vec<EpochLog>,
}

/// Trains from the standard initialization with Adam and a step-decayed
/// learning rate. Batch items run in parallel; gradients are summed in
/// dataset order, so results do not depend on the thread count.
pub fn train(tc: &TrainConfig, ds: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    tc.validate()?;
    let cfg = tc.model_config();
    check_dims(&cfg, &ds.dims)?;
    ds.validate()?;
    for inst in &ds.instances {
        check_instance(&cfg, inst)?;
    }
    let gts = ground_truths(ds)?;

    let mut params = ModelParams::<f64>::init(&cfg, derive_seed(&[tc.seed, 0x1417]))?;
    let mut adam = Adam::new(AdamConfig::default(), params.tensors());
    let mut log = Vec::with_capacity(tc.epochs);
    let n = ds.instances.len();
    for epoch in 0..tc.epochs {
        let lr = step_decay(tc.learning_rate, tc.lr_decay_factor, tc.lr_decay_every, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            tc.seed,
            epoch as u64,
            0x5eed,
        ])));
        let mut sum = LossValues::default();
        let mut preds = vec![None; n];
        for chunk in order.chunks(tc.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let results = batch
                .par_iter()
                .map(|&i| {
                    let inst = &ds.instances[i];
                    let d = DropoutSeed {
                        seed: tc.seed,
                        epoch: epoch as u64,
                        instance: i as u64,
                    };
                    with_id(inst, run_instance(&cfg, &params, inst, Some(d), true))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
            let scale = 1.0 / batch.len() as f64;
            for (&i, r) in batch.iter().zip(&results) {
                sum.add(&r.losses);
                preds[i] = Some(r.prediction);
                let rg = r
                    .grads
                    .as_ref()
                    .ok_or_else(|| Error::Internal("missing gradients".into()))?;
                for (acc, g) in grads.iter_mut().zip(rg) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += scale * x;
                    }
                }
            }
            adam.step(params.tensors_mut(), &grads, lr)?;
        }
        let preds: Vec<Prediction> = preds.into_iter().map(|p| p.expect("every instance visited")).collect();
        let entry = EpochLog {
            epoch,
            learning_rate: lr,
            loss: sum.scaled(1.0 / n as f64),
            metrics: evaluate(&preds, &gts)?,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

pub fn ground_truths(ds: &Dataset) -> Result<Vec<Prediction>> {
    ds.instances
        .iter()
        .map(|i| {
            Ok(Prediction {
                answer: i.gt.answer_idx,
                span: i.gt_span()?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub id: String,
    pub prediction: Prediction,
    pub losses: LossValues,
}

/// Inference (no dropout) on every instance, in dataset order.
pub fn predict(cfg: &ModelConfig, params: &ModelParams<f64>, ds: &Dataset) -> Result<Vec<InstancePrediction>> {
    check_dims(cfg, &ds.dims)?;
    ds.validate()?;
    ds.instances
        .par_iter()
        .map(|inst| {
            check_instance(cfg, inst)?;
            let r = with_id(inst, run_instance(cfg, params, inst, None, false))?;
            Ok(InstancePrediction {
                id: inst.id.clone(),
                prediction: r.prediction,
                losses: r.losses,
            })
        })
        .collect()
}

/// Worst finite-difference mismatch of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub module: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic − numeric|` at the worst coordinate.
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCheck {
    pub module: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub profile: DimsProfile,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub modules: Vec<ModuleCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Toy instance for the full-model check: `T = 4`, `N_o = 3`, `L_q = 6`,
/// `L_s = 4`.
pub fn gradcheck_instance(seed: u64, dims: Dims) -> Result<QAInstance> {
    let cfg = SyntheticConfig {
        num_instances: 1,
        frames: 4,
        objects: 3,
        question_len: 6,
        subtitle_len: 4,
        signal: 1.0,
        dims,
        ..SyntheticConfig::reduced(1, seed)
    };
    Ok(generate_synthetic(&cfg)?.dataset.instances.remove(0))
}

/// Central-difference check of the total loss against autodiff for every
/// parameter tensor. The reduced profile takes seconds; the full one is
/// far slower.
pub fn full_model_gradcheck(profile: DimsProfile, seed: u64, zeroed: bool) -> Result<GradcheckReport> {
    let started = Instant::now();
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::for_profile(profile)
    };
    let inst = gradcheck_instance(seed, cfg.dims)?;
    let params = if zeroed {
        ModelParams::<f64>::zeros(&cfg)?
    } else {
        ModelParams::<f64>::init_dense(&cfg, derive_seed(&[seed, 0x9c]))?
    };
    let tensors: Vec<_> = params.tensors().cloned().collect();
    let checks = grad_check(&tensors, DEFAULT_EPS, |g, vars| {
        let b = BoundParams::from_vars(&cfg, vars)?;
        Ok(forward(g, &cfg, &b, &inst, None)?.losses.total)
    })?;
    let groups: Vec<GroupCheck> = params
        .iter()
        .zip(checks)
        .map(|((name, t), c)| GroupCheck {
            name: name.clone(),
            module: param_module(name).to_string(),
            size: t.len(),
            max_rel_error: c.max_rel_error,
            worst_index: c.worst_index,
            analytic: c.analytic,
            numeric: c.numeric,
            abs_error: (c.analytic - c.numeric).abs(),
        })
        .collect();
    let mut modules: Vec<ModuleCheck> = Vec::new();
    for gc in &groups {
        match modules.iter_mut().find(|m| m.module == gc.module) {
            Some(m) => m.max_rel_error = m.max_rel_error.max(gc.max_rel_error),
            None => modules.push(ModuleCheck {
                module: gc.module.clone(),
                max_rel_error: gc.max_rel_error,
            }),
        }
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        profile,
        seed,
        eps: DEFAULT_EPS,
        tolerance: GRADCHECK_TOLERANCE,
        groups,
        modules,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOLERANCE,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, seed: u64) -> Dataset {
        let cfg = SyntheticConfig {
            frames: 4,
            ..SyntheticConfig::reduced(n, seed)
        };
        generate_synthetic(&cfg).unwrap().dataset
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            ..TrainConfig::new("unused", epochs, 3, DimsProfile::Reduced)
        }
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let tc: TrainConfig = serde_json::from_str(r#"{"data": "d/manifest.json", "epochs": 2, "seed": 1}"#).unwrap();
        assert_eq!(tc.batch_size, 16);
        assert_eq!(tc.learning_rate, 1e-3);
        assert_eq!(tc.lr_decay_factor, 0.1);
        assert_eq!(tc.lr_decay_every, 10);
        assert_eq!(tc.profile, DimsProfile::Paper);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"data": "d", "epochs": 1, "seed": 1, "bogus": 0}"#).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..tiny_config(1)
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_follows_the_schedule() {
        let ds = tiny(4, 8);
        let tc = TrainConfig {
            lr_decay_every: 1,
            ..tiny_config(2)
        };
        let a = train(&tc, &ds, |_| {}).unwrap();
        let b = train(&tc, &ds, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log[0].learning_rate, 1e-3);
        assert!((a.log[1].learning_rate - 1e-4).abs() < 1e-18);
        assert!(a.log.iter().all(|e| e.loss.total.is_finite()));
        let init = ModelParams::<f64>::init(&tc.model_config(), derive_seed(&[tc.seed, 0x1417])).unwrap();
        assert_ne!(a.params, init);
    }

    #[test]
    fn initial_answer_loss_is_uniform() {
        let ds = tiny(3, 2);
        let cfg = ModelConfig::reduced();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        for p in predict(&cfg, &params, &ds).unwrap() {
            assert!((p.losses.answer - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let ds = tiny(2, 1);
        let tc = TrainConfig::new("unused", 1, 0, DimsProfile::Paper);
        assert!(matches!(train(&tc, &ds, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_gradcheck_passes() {
        let r = full_model_gradcheck(DimsProfile::Reduced, 1, true).unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
        assert_eq!(
            r.groups.len(),
            ModelParams::<f64>::zeros(&ModelConfig::reduced())
                .unwrap()
                .names()
                .count()
        );
    }
}
