//! Dataset containers and readers: numeric CSV (last column is the
//! label/target) and IDX tensors (big-endian, u8 payloads rescaled to
//! [0, 1]).

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::models::network::{Target, TensorShape};
use crate::models::ModelError;
use crate::rng::{stream_rng, STREAM_DATA, STREAM_SPLIT};

/// Per-sample targets.
#[derive(Debug, Clone)]
pub enum TargetData {
    Classes(Vec<usize>),
    Values { data: Vec<f64>, dim: usize },
}

/// An in-memory dataset: row-major inputs plus targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<f64>,
    input_shape: TensorShape,
    targets: TargetData,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        input_shape: TensorShape,
        targets: TargetData,
    ) -> Result<Self, ModelError> {
        let flat = input_shape.flat_len();
        if flat == 0 || inputs.len() % flat != 0 {
            return Err(ModelError::InvalidParams(format!(
                "input buffer of {} does not tile into rows of {flat}",
                inputs.len()
            )));
        }
        let n = inputs.len() / flat;
        let n_targets = match &targets {
            TargetData::Classes(c) => c.len(),
            TargetData::Values { data, dim } => {
                if *dim == 0 || data.len() % dim != 0 {
                    return Err(ModelError::InvalidParams("bad target dimension".into()));
                }
                data.len() / dim
            }
        };
        if n_targets != n {
            return Err(ModelError::InvalidParams(format!(
                "{n} inputs but {n_targets} targets"
            )));
        }
        if n == 0 {
            return Err(ModelError::InvalidParams("dataset is empty".into()));
        }
        Ok(Dataset { inputs, input_shape, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_shape.flat_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn input(&self, j: usize) -> &[f64] {
        let flat = self.input_shape.flat_len();
        &self.inputs[j * flat..(j + 1) * flat]
    }

    pub fn target(&self, j: usize) -> Target<'_> {
        match &self.targets {
            TargetData::Classes(c) => Target::Class(c[j]),
            TargetData::Values { data, dim } => Target::Values(&data[j * dim..(j + 1) * dim]),
        }
    }

    pub fn class_label(&self, j: usize) -> Option<usize> {
        match &self.targets {
            TargetData::Classes(c) => Some(c[j]),
            TargetData::Values { .. } => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            TargetData::Classes(c) => c.iter().max().map(|m| m + 1),
            TargetData::Values { .. } => None,
        }
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let flat = self.input_shape.flat_len();
        let mut inputs = Vec::with_capacity(idx.len() * flat);
        for &j in idx {
            inputs.extend_from_slice(self.input(j));
        }
        let targets = match &self.targets {
            TargetData::Classes(c) => TargetData::Classes(idx.iter().map(|&j| c[j]).collect()),
            TargetData::Values { data, dim } => {
                let mut out = Vec::with_capacity(idx.len() * dim);
                for &j in idx {
                    out.extend_from_slice(&data[j * dim..(j + 1) * dim]);
                }
                TargetData::Values { data: out, dim: *dim }
            }
        };
        Dataset { inputs, input_shape: self.input_shape, targets }
    }

    /// Seeded shuffle split into (train, eval). `eval_fraction = 0` keeps
    /// everything in the training set.
    pub fn split(
        &self,
        eval_fraction: f64,
        seed: u64,
    ) -> Result<(Dataset, Option<Dataset>), ModelError> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(ModelError::InvalidParams(format!(
                "eval fraction {eval_fraction} not in [0, 1)"
            )));
        }
        if eval_fraction == 0.0 {
            return Ok((self.clone(), None));
        }
        let n = self.len();
        let n_eval = ((n as f64) * eval_fraction).round() as usize;
        let n_eval = n_eval.min(n.saturating_sub(1));
        if n_eval == 0 {
            return Ok((self.clone(), None));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
        let (train_idx, eval_idx) = idx.split_at(n - n_eval);
        let mut train_idx = train_idx.to_vec();
        let mut eval_idx = eval_idx.to_vec();
        train_idx.sort_unstable();
        eval_idx.sort_unstable();
        Ok((self.subset(&train_idx), Some(self.subset(&eval_idx))))
    }
}

/// Task kind for CSV datasets, deciding how the last column is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvTask {
    Classification,
    Regression,
}

/// Reads a numeric CSV: rows are samples, the last column is the class
/// label (nonnegative integer) or regression target.
pub fn read_numeric_csv(path: &Path, task: CsvTask) -> Result<Dataset, ModelError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ModelError::Csv(e.to_string()))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ModelError::Csv(e.to_string()))?;
        let fields: Vec<f64> = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| ModelError::Csv(format!("row {row}: non-numeric field {f:?}")))
            })
            .collect::<Result<_, _>>()?;
        if fields.len() < 2 {
            return Err(ModelError::Csv(format!("row {row}: needs features plus a target")));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(ModelError::Csv(format!(
                    "row {row}: {} columns, expected {w}",
                    fields.len()
                )))
            }
            _ => {}
        }
        let (features, target) = fields.split_at(fields.len() - 1);
        inputs.extend_from_slice(features);
        match task {
            CsvTask::Classification => {
                let t = target[0];
                if t < 0.0 || t.fract() != 0.0 {
                    return Err(ModelError::Csv(format!(
                        "row {row}: label {t} is not a nonnegative integer"
                    )));
                }
                labels.push(t as usize);
            }
            CsvTask::Regression => values.push(target[0]),
        }
    }
    let width = width.ok_or_else(|| ModelError::Csv("empty csv".into()))?;
    let targets = match task {
        CsvTask::Classification => TargetData::Classes(labels),
        CsvTask::Regression => TargetData::Values { data: values, dim: 1 },
    };
    Dataset::new(inputs, TensorShape::Vector(width - 1), targets)
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX u8 image tensor (magic `0x00000803`), rescaling values to
/// [0, 1]. Returns `(values, n, rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<f64>, usize, usize, usize), ModelError> {
    let mut file = std::fs::File::open(path)?;
    let magic = read_be_u32(&mut file)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(ModelError::Idx(format!("bad image magic {magic:#010x}")));
    }
    let n = read_be_u32(&mut file)? as usize;
    let rows = read_be_u32(&mut file)? as usize;
    let cols = read_be_u32(&mut file)? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    file.read_exact(&mut bytes)?;
    let values = bytes.iter().map(|b| *b as f64 / 255.0).collect();
    Ok((values, n, rows, cols))
}

/// Reads an IDX u8 label vector (magic `0x00000801`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>, ModelError> {
    let mut file = std::fs::File::open(path)?;
    let magic = read_be_u32(&mut file)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(ModelError::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = read_be_u32(&mut file)? as usize;
    let mut bytes = vec![0u8; n];
    file.read_exact(&mut bytes)?;
    Ok(bytes.iter().map(|b| *b as usize).collect())
}

/// Pairs an IDX image file with an IDX label file into a classification
/// dataset of single-channel images.
pub fn read_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset, ModelError> {
    let (values, n, rows, cols) = read_idx_images(images)?;
    let classes = read_idx_labels(labels)?;
    if classes.len() != n {
        return Err(ModelError::Idx(format!(
            "{n} images but {} labels",
            classes.len()
        )));
    }
    Dataset::new(
        values,
        TensorShape::Image { c: 1, h: rows, w: cols },
        TargetData::Classes(classes),
    )
}

/// Two Gaussian blobs in `d` dimensions whose centers sit `separation`
/// apart along the diagonal; labels alternate 0/1. Deterministic per seed.
pub fn two_blobs_dataset(
    n: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, ModelError> {
    if n == 0 {
        return Err(ModelError::InvalidParams("two_blobs needs n >= 1".into()));
    }
    if d == 0 {
        return Err(ModelError::InvalidParams("two_blobs needs d >= 1".into()));
    }
    let mut rng = stream_rng(seed, STREAM_DATA);
    let offset = separation / (2.0 * (d as f64).sqrt());
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let center = if class == 0 { -offset } else { offset };
        for _ in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(center + z);
        }
        labels.push(class);
    }
    Dataset::new(inputs, TensorShape::Vector(d), TargetData::Classes(labels))
}
