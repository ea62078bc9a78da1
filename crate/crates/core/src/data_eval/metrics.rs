use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{temporal_iou, TimeSpan};

/// IoU a span needs to count toward answer-span joint accuracy.
pub const ASA_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: usize,
    pub span: TimeSpan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub temp_miou: f64,
    /// Fraction with the correct answer and span IoU ≥ 0.5.
    pub asa: f64,
}

pub fn evaluate(predictions: &[Prediction], gts: &[Prediction]) -> Result<Metrics> {
    if predictions.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: gts.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let (mut correct, mut iou_sum, mut joint) = (0usize, 0.0, 0usize);
    for (p, g) in predictions.iter().zip(gts) {
        let hit = p.answer == g.answer;
        let iou = temporal_iou(&p.span, &g.span);
        correct += usize::from(hit);
        iou_sum += iou;
        joint += usize::from(hit && iou >= ASA_IOU);
    }
    let n = predictions.len() as f64;
    Ok(Metrics {
        accuracy: correct as f64 / n,
        temp_miou: iou_sum / n,
        asa: joint as f64 / n,
    })
}
