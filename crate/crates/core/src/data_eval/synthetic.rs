use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::{Dataset, Dims, FrameRecord, GroundTruth, GtBox, ObjectRecord, QAInstance, DEFAULT_FRAME_SIZE};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::derive_seed;
use crate::predictor::NUM_HYPOTHESES;

/// Settings of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_instances: usize,
    /// Frames per video (`T`).
    pub frames: usize,
    /// Objects per frame (`N_o`).
    pub objects: usize,
    /// Hypothesis tokens (`L_q`).
    pub question_len: usize,
    /// Subtitle tokens per frame (`L_s`).
    pub subtitle_len: usize,
    pub dims: Dims,
    /// Scale of the planted signal relative to unit-variance noise.
    pub signal: f64,
    pub seed: u64,
    /// Size of the pool of concept directions instances draw from.
    #[serde(default = "default_concepts")]
    pub concepts: usize,
}

fn default_concepts() -> usize {
    4
}

impl SyntheticConfig {
    /// Reduced-dimension defaults with a strong signal.
    pub fn reduced(num_instances: usize, seed: u64) -> Self {
        SyntheticConfig {
            num_instances,
            frames: 8,
            objects: 3,
            question_len: 6,
            subtitle_len: 4,
            dims: Dims::REDUCED,
            signal: 2.0,
            seed,
            concepts: default_concepts(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.objects < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs T ≥ 2 and N_o ≥ 2, got T = {} and N_o = {}",
                self.frames, self.objects
            )));
        }
        if self.num_instances == 0 || self.question_len == 0 || self.subtitle_len == 0 || self.concepts == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if !(self.signal.is_finite() && self.signal >= 0.0) {
            return Err(Error::Config(format!("signal strength {}", self.signal)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Accuracy of the object/hypothesis dot-product probe on the dataset.
    pub probe_accuracy: f64,
}

const UNIT_HALF_WIDTH: f64 = 1.732_050_807_568_877_2; // sqrt(3): unit variance

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(-UNIT_HALF_WIDTH..UNIT_HALF_WIDTH))
        .collect()
}

fn plant(v: &mut [f64], direction: &[f64], scale: f64) {
    for (x, d) in v.iter_mut().zip(direction) {
        *x += scale * d;
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let [fw, fh] = DEFAULT_FRAME_SIZE;
    let w = rng.gen_range(40.0..200.0);
    let h = rng.gen_range(40.0..150.0);
    let x1 = rng.gen_range(0.0..fw - w);
    let y1 = rng.gen_range(0.0..fh - h);
    BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("positive extents")
}

/// Builds a dataset with a learnable signal.
///
/// Each instance draws a span and an answer. A concept direction from a small
/// shared pool is added to one object per span frame (feature and label
/// embedding) and to every token of the correct hypothesis; distractor
/// hypotheses are pure noise. Fixed start and end cue vectors are added to
/// the subtitle tokens of the first and last span frames. All noise is
/// unit-variance uniform, so the dataset depends only on integer arithmetic
/// and the seed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let d = cfg.dims;
    let wide = d.d_o.max(d.d_l).max(d.d_q);
    let mut shared = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, u64::MAX]));
    let pool: Vec<Vec<f64>> = (0..cfg.concepts).map(|_| noise(&mut shared, wide)).collect();
    let start_cue = noise(&mut shared, d.d_s);
    let end_cue = noise(&mut shared, d.d_s);
    let s = cfg.signal;

    let instances = (0..cfg.num_instances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, i as u64]));
            let t = cfg.frames;
            let start = rng.gen_range(0..t);
            let end = rng.gen_range(start + 1..=t);
            let answer = rng.gen_range(0..NUM_HYPOTHESES);
            let concept = &pool[rng.gen_range(0..cfg.concepts)];

            let mut boxes = Vec::new();
            let frames = (0..t)
                .map(|f| {
                    let positive = (start..end).contains(&f).then(|| rng.gen_range(0..cfg.objects));
                    let objects = (0..cfg.objects)
                        .map(|o| {
                            let mut feature = noise(&mut rng, d.d_o);
                            let mut label_embedding = noise(&mut rng, d.d_l);
                            let bbox = random_box(&mut rng);
                            let label_id = rng.gen_range(0..80);
                            if positive == Some(o) {
                                plant(&mut feature, concept, s);
                                plant(&mut label_embedding, concept, s);
                                boxes.push(GtBox { frame: f, bbox });
                            }
                            ObjectRecord {
                                feature,
                                label_embedding,
                                bbox,
                                label_id,
                            }
                        })
                        .collect();
                    let subtitle = (0..cfg.subtitle_len)
                        .map(|_| {
                            let mut tok = noise(&mut rng, d.d_s);
                            if f == start {
                                plant(&mut tok, &start_cue, s);
                            }
                            if f + 1 == end {
                                plant(&mut tok, &end_cue, s);
                            }
                            tok
                        })
                        .collect();
                    FrameRecord { objects, subtitle }
                })
                .collect();
            let hypotheses = (0..NUM_HYPOTHESES)
                .map(|k| {
                    (0..cfg.question_len)
                        .map(|_| {
                            let mut tok = noise(&mut rng, d.d_q);
                            if k == answer {
                                plant(&mut tok, concept, s);
                            }
                            tok
                        })
                        .collect()
                })
                .collect();
            QAInstance {
                id: format!("syn-{:05}", i),
                fps: 1.0,
                frame_size: Some(DEFAULT_FRAME_SIZE),
                frames,
                hypotheses,
                gt: GroundTruth {
                    answer_idx: answer,
                    span_start_sec: start as f64,
                    span_end_sec: end as f64,
                    boxes,
                },
            }
        })
        .collect();
    let dataset = Dataset { dims: d, instances };
    dataset.validate()?;
    let probe_accuracy = linear_probe_accuracy(&dataset)?;
    Ok(Synthetic {
        dataset,
        probe_accuracy,
    })
}

/// Scores each hypothesis by the dot product of its mean token with the mean
/// object feature over the ground-truth span (on the shared leading
/// coordinates) and reports how often the top score is the correct answer.
pub fn linear_probe_accuracy(ds: &Dataset) -> Result<f64> {
    let width = ds.dims.d_o.min(ds.dims.d_q);
    let mut correct = 0usize;
    for inst in &ds.instances {
        let span = inst.gt_span()?;
        let mut video = vec![0.0; width];
        let mut count = 0.0;
        for f in span.start..span.end {
            for o in &inst.frames[f].objects {
                plant(&mut video, &o.feature[..width], 1.0);
                count += 1.0;
            }
        }
        let scores: Vec<f64> = inst
            .hypotheses
            .iter()
            .map(|h| {
                let mut mean = vec![0.0; width];
                for tok in h {
                    plant(&mut mean, &tok[..width], 1.0 / h.len() as f64);
                }
                mean.iter().zip(&video).map(|(a, b)| a * b / count).sum()
            })
            .collect();
        let best = (0..scores.len()).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
        correct += usize::from(best == inst.gt.answer_idx);
    }
    Ok(correct as f64 / ds.instances.len() as f64)
}
