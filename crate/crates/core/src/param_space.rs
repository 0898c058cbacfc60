//! Flat parameter vectors partitioned into named groups, plus support and
//! sparsity queries.
//!
//! A [`GroupLayout`] splits the coordinates `[0, d)` into contiguous groups.
//! Groups are the unit of regularization and of restriction/prolongation;
//! convolutional kernel groups are additionally sub-addressable by
//! (input-channel, output-channel) kernel slices.

use std::ops::Range;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by layout construction and sparsity queries.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("layout has no groups")]
    Empty,
    #[error("group {id:?} has size 0")]
    ZeroSize { id: String },
    #[error("conv group {id:?}: size {size} != c_in*c_out*k*k = {expected}")]
    ConvShapeMismatch { id: String, size: usize, expected: usize },
    #[error("group {id:?} has a conv shape but role {role:?}")]
    ConvShapeOnNonConv { id: String, role: GroupRole },
    #[error("conv group {id:?} is missing its kernel shape")]
    MissingConvShape { id: String },
    #[error("duplicate group id {id:?}")]
    DuplicateId { id: String },
    #[error("vector length {got} does not match layout dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("layout has no convolutional groups")]
    NoConvLayers,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

/// What a parameter group represents in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    Weight,
    Bias,
    ConvKernel,
}

/// Kernel shape of a convolutional weight group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvShape {
    /// Number of (input, output) kernel slices in the group.
    pub fn num_slices(&self) -> usize {
        self.c_in * self.c_out
    }

    /// Flat range of slice `(i, j)` relative to the group start.
    pub fn slice_range(&self, i: usize, j: usize) -> Range<usize> {
        let kk = self.k * self.k;
        let start = (i * self.c_out + j) * kk;
        start..start + kk
    }
}

/// One named group of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: String,
    pub size: usize,
    pub role: GroupRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvShape>,
}

impl GroupSpec {
    pub fn new(id: impl Into<String>, size: usize, role: GroupRole) -> Self {
        GroupSpec { id: id.into(), size, role, conv: None }
    }

    pub fn conv_kernel(id: impl Into<String>, shape: ConvShape) -> Self {
        GroupSpec {
            id: id.into(),
            size: shape.c_in * shape.c_out * shape.k * shape.k,
            role: GroupRole::ConvKernel,
            conv: Some(shape),
        }
    }
}

/// Partition of the flat parameter vector into disjoint contiguous groups
/// covering `[0, total_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    groups: Vec<GroupSpec>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl GroupLayout {
    pub fn new(groups: Vec<GroupSpec>) -> Result<Self, LayoutError> {
        if groups.is_empty() {
            return Err(LayoutError::Empty);
        }
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            if g.size == 0 {
                return Err(LayoutError::ZeroSize { id: g.id.clone() });
            }
            if !seen.insert(g.id.as_str()) {
                return Err(LayoutError::DuplicateId { id: g.id.clone() });
            }
            match (&g.role, &g.conv) {
                (GroupRole::ConvKernel, Some(shape)) => {
                    let expected = shape.c_in * shape.c_out * shape.k * shape.k;
                    if g.size != expected {
                        return Err(LayoutError::ConvShapeMismatch {
                            id: g.id.clone(),
                            size: g.size,
                            expected,
                        });
                    }
                }
                (GroupRole::ConvKernel, None) => {
                    return Err(LayoutError::MissingConvShape { id: g.id.clone() })
                }
                (role, Some(_)) => {
                    return Err(LayoutError::ConvShapeOnNonConv { id: g.id.clone(), role: *role })
                }
                _ => {}
            }
        }
        let mut offsets = Vec::with_capacity(groups.len());
        let mut acc = 0usize;
        for g in &groups {
            offsets.push(acc);
            acc += g.size;
        }
        Ok(GroupLayout { groups, offsets, total_dim: acc })
    }

    /// `d` singleton weight groups, one per coordinate.
    pub fn scalar_weights(d: usize) -> Arc<GroupLayout> {
        let groups = (0..d)
            .map(|i| GroupSpec::new(format!("w{i}"), 1, GroupRole::Weight))
            .collect();
        Arc::new(GroupLayout::new(groups).expect("scalar layout is valid"))
    }

    /// A single weight group spanning the whole vector.
    pub fn single(d: usize) -> Arc<GroupLayout> {
        Arc::new(
            GroupLayout::new(vec![GroupSpec::new("w", d, GroupRole::Weight)])
                .expect("single-group layout is valid"),
        )
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &GroupSpec {
        &self.groups[g]
    }

    /// Index range of group `g` in the flat vector.
    pub fn range(&self, g: usize) -> Range<usize> {
        let start = self.offsets[g];
        start..start + self.groups[g].size
    }

    pub fn has_conv(&self) -> bool {
        self.groups.iter().any(|g| g.role == GroupRole::ConvKernel)
    }

    pub fn check_dim(&self, len: usize) -> Result<(), LayoutError> {
        if len == self.total_dim {
            Ok(())
        } else {
            Err(LayoutError::DimensionMismatch { got: len, expected: self.total_dim })
        }
    }
}

/// A real vector of length `layout.total_dim()`. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<GroupLayout>,
}

impl ParamVector {
    pub fn new(layout: Arc<GroupLayout>, values: Vec<f64>) -> Result<Self, LayoutError> {
        layout.check_dim(values.len())?;
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<GroupLayout>) -> Self {
        let values = vec![0.0; layout.total_dim()];
        ParamVector { values, layout }
    }

    pub fn layout(&self) -> &Arc<GroupLayout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of group `g`.
    pub fn group(&self, g: usize) -> &[f64] {
        &self.values[self.layout.range(g)]
    }

    pub fn num_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// Per-group activity flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    active: Vec<bool>,
}

impl SupportMask {
    pub fn new(active: Vec<bool>) -> Self {
        SupportMask { active }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, g: usize) -> bool {
        self.active[g]
    }

    pub fn flags(&self) -> &[bool] {
        &self.active
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Indices of active groups, in increasing order.
    pub fn active_groups(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(g, a)| a.then_some(g))
            .collect()
    }
}

/// Flags each group whose components exceed `tol` in absolute value.
///
/// The default `tol = 0.0` detects exact zeros; the prox operators emit
/// exact zeros, so no hidden threshold is involved. A positive tolerance
/// is only meaningful for externally loaded vectors.
pub fn nonzero_groups(theta: &ParamVector, tol: f64) -> SupportMask {
    debug_assert!(tol >= 0.0, "tolerance must be nonnegative");
    let layout = theta.layout();
    let active = (0..layout.num_groups())
        .map(|g| theta.group(g).iter().any(|v| v.abs() > tol))
        .collect();
    SupportMask::new(active)
}

/// Fraction of exactly-zero components.
pub fn total_sparsity(theta: &ParamVector) -> f64 {
    let zeros = theta.as_slice().iter().filter(|v| **v == 0.0).count();
    zeros as f64 / theta.len() as f64
}

/// Fraction of all-zero (input-channel, output-channel) kernel slices over
/// the convolutional groups.
pub fn conv_sparsity(theta: &ParamVector) -> Result<f64, LayoutError> {
    let layout = theta.layout();
    let mut total_slices = 0usize;
    let mut nonzero_slices = 0usize;
    for g in 0..layout.num_groups() {
        let spec = layout.group(g);
        let Some(shape) = spec.conv else { continue };
        let vals = theta.group(g);
        total_slices += shape.num_slices();
        for i in 0..shape.c_in {
            for j in 0..shape.c_out {
                if vals[shape.slice_range(i, j)].iter().any(|v| *v != 0.0) {
                    nonzero_slices += 1;
                }
            }
        }
    }
    if total_slices == 0 {
        return Err(LayoutError::NoConvLayers);
    }
    Ok(1.0 - nonzero_slices as f64 / total_slices as f64)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    groups: Vec<GroupSpec>,
    values: String,
}

fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_f64s(encoded: &str) -> Result<Vec<f64>, LayoutError> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|e| LayoutError::Checkpoint(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(LayoutError::Checkpoint(format!(
            "value payload of {} bytes is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Serializes a parameter vector as JSON: the group list plus the values as
/// a base64-encoded little-endian f64 array.
pub fn to_checkpoint_json(theta: &ParamVector) -> String {
    let file = CheckpointFile {
        groups: theta.layout().groups().to_vec(),
        values: encode_f64s(theta.as_slice()),
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serialization cannot fail")
}

/// Parses a checkpoint produced by [`to_checkpoint_json`], revalidating the
/// layout.
pub fn from_checkpoint_json(json: &str) -> Result<ParamVector, LayoutError> {
    let file: CheckpointFile =
        serde_json::from_str(json).map_err(|e| LayoutError::Checkpoint(e.to_string()))?;
    let layout = Arc::new(GroupLayout::new(file.groups)?);
    let values = decode_f64s(&file.values)?;
    ParamVector::new(layout, values)
}
