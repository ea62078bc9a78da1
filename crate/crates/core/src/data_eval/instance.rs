use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, TimeSpan};
use crate::predictor::NUM_HYPOTHESES;

/// Frame size assumed when an instance does not carry one.
pub const DEFAULT_FRAME_SIZE: [f64; 2] = [640.0, 360.0];

/// Input embedding widths of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Visual object features.
    pub d_o: usize,
    /// Object label embeddings.
    pub d_l: usize,
    /// Subtitle tokens.
    pub d_s: usize,
    /// Hypothesis tokens.
    pub d_q: usize,
}

impl Dims {
    pub const PAPER: Dims = Dims {
        d_o: 300,
        d_l: 300,
        d_s: 768,
        d_q: 768,
    };
    pub const REDUCED: Dims = Dims {
        d_o: 24,
        d_l: 24,
        d_s: 32,
        d_q: 32,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub feature: Vec<f64>,
    pub label_embedding: Vec<f64>,
    pub bbox: BoundingBox,
    pub label_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub objects: Vec<ObjectRecord>,
    /// `[L_s × d_s]` subtitle token embeddings.
    pub subtitle: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub frame: usize,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answer_idx: usize,
    pub span_start_sec: f64,
    pub span_end_sec: f64,
    pub boxes: Vec<GtBox>,
}

/// One multiple-choice question over a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub fps: f64,
    /// `[width, height]` in pixels; [`DEFAULT_FRAME_SIZE`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_size: Option<[f64; 2]>,
    pub frames: Vec<FrameRecord>,
    /// `[5 × L_q × d_q]` hypothesis token embeddings.
    pub hypotheses: Vec<Vec<Vec<f64>>>,
    pub gt: GroundTruth,
}

impl QAInstance {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_size(&self) -> [f64; 2] {
        self.frame_size.unwrap_or(DEFAULT_FRAME_SIZE)
    }

    /// Ground-truth span snapped to frame indices.
    pub fn gt_span(&self) -> Result<TimeSpan> {
        TimeSpan::from_seconds(
            self.gt.span_start_sec,
            self.gt.span_end_sec,
            self.fps,
            self.num_frames(),
        )
        .map_err(|e| self.schema("gt.span_start_sec", e.to_string()))
    }

    /// Objects of frame `t` whose box has IoU above 0.5 with a ground-truth box
    /// of that frame.
    pub fn positive_objects(&self, t: usize) -> Vec<bool> {
        let gt: Vec<&BoundingBox> = self.gt.boxes.iter().filter(|b| b.frame == t).map(|b| &b.bbox).collect();
        self.frames[t]
            .objects
            .iter()
            .map(|o| gt.iter().any(|b| iou(&o.bbox, b) > 0.5))
            .collect()
    }

    fn schema(&self, field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Schema {
            id: self.id.clone(),
            field: field.into(),
            message: message.into(),
        }
    }

    fn check_width(&self, field: &str, expected: usize, rows: &[Vec<f64>]) -> Result<()> {
        for row in rows {
            if row.len() != expected {
                return Err(Error::Dimension {
                    id: self.id.clone(),
                    field: field.into(),
                    expected,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(self.schema(field, "non-finite value"));
            }
        }
        Ok(())
    }

    /// Checks structure and widths against `dims`.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.id.is_empty() {
            return Err(self.schema("id", "empty"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(self.schema("fps", format!("must be positive, got {}", self.fps)));
        }
        if let Some([w, h]) = self.frame_size {
            if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
                return Err(self.schema("frame_size", format!("invalid size {w} × {h}")));
            }
        }
        if self.frames.is_empty() {
            return Err(self.schema("frames", "no frames"));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.objects.is_empty() {
                return Err(self.schema(format!("frames[{t}].objects"), "no objects"));
            }
            if f.subtitle.is_empty() {
                return Err(self.schema(format!("frames[{t}].subtitle"), "no tokens"));
            }
            for o in &f.objects {
                self.check_width("d_o", dims.d_o, std::slice::from_ref(&o.feature))?;
                self.check_width("d_l", dims.d_l, std::slice::from_ref(&o.label_embedding))?;
            }
            self.check_width("d_s", dims.d_s, &f.subtitle)?;
        }
        if self.hypotheses.len() != NUM_HYPOTHESES {
            return Err(self.schema(
                "hypotheses",
                format!("expected {NUM_HYPOTHESES} hypotheses, found {}", self.hypotheses.len()),
            ));
        }
        for (k, h) in self.hypotheses.iter().enumerate() {
            if h.is_empty() {
                return Err(self.schema(format!("hypotheses[{k}]"), "no tokens"));
            }
            self.check_width("d_q", dims.d_q, h)?;
        }
        if self.gt.answer_idx >= NUM_HYPOTHESES {
            return Err(self.schema(
                "gt.answer_idx",
                format!("{} is not in 0..{NUM_HYPOTHESES}", self.gt.answer_idx),
            ));
        }
        self.gt_span()?;
        for b in &self.gt.boxes {
            if b.frame >= self.num_frames() {
                return Err(self.schema("gt.boxes", format!("frame {} of {}", b.frame, self.num_frames())));
            }
        }
        Ok(())
    }
}

/// Reads and validates one instance file.
pub fn load_instance(path: impl AsRef<Path>, dims: &Dims) -> Result<QAInstance> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let inst: QAInstance = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    inst.validate(dims)?;
    Ok(inst)
}

pub fn save_instance(path: impl AsRef<Path>, inst: &QAInstance) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(inst).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Dataset index: global dims and instance files relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dims: Dims,
    pub instances: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub instances: Vec<QAInstance>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::Config("dataset has no instances".into()));
        }
        let mut seen = HashSet::new();
        for inst in &self.instances {
            inst.validate(&self.dims)?;
            if !seen.insert(inst.id.as_str()) {
                return Err(inst.schema("id", "duplicate id"));
            }
        }
        Ok(())
    }
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let instances = m
        .instances
        .iter()
        .map(|p| load_instance(base.join(p), &m.dims))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        dims: m.dims,
        instances,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes one file per instance plus `manifest.json` into `dir`; returns the
/// manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ds.instances.len());
    for (i, inst) in ds.instances.iter().enumerate() {
        let name = PathBuf::from(format!("instance_{i:05}.json"));
        save_instance(dir.join(&name), inst)?;
        files.push(name);
    }
    let manifest = Manifest {
        dims: ds.dims,
        instances: files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
