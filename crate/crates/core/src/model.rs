//! Avatar data model.
//!
//! Gaussians are stored sorted by part so that every part owns a contiguous
//! index range; nodes are sorted the same way. Rotations are unit quaternions
//! in `[x, y, z, w]` order and scales are stored as natural logarithms.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Number of per-Gaussian blendshape components: rotation (4), scale (3), color (3).
pub const BLEND_COMPONENTS: usize = 10;

/// Offset of each attribute inside the 10-component blendshape row.
pub const ROTATION_OFFSET: usize = 0;
pub const SCALE_OFFSET: usize = 4;
pub const COLOR_OFFSET: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Rotation,
    Scale,
    Color,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Rotation, Attribute::Scale, Attribute::Color];

    pub fn components(self) -> usize {
        match self {
            Attribute::Rotation => 4,
            Attribute::Scale | Attribute::Color => 3,
        }
    }

    /// Component offset inside a dense 10-wide blendshape row.
    pub fn offset(self) -> usize {
        match self {
            Attribute::Rotation => ROTATION_OFFSET,
            Attribute::Scale => SCALE_OFFSET,
            Attribute::Color => COLOR_OFFSET,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Attribute::Rotation => 0,
            Attribute::Scale => 1,
            Attribute::Color => 2,
        }
    }
}

/// Precision the real-valued parameters are representable in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F16,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_gaussians: usize,
    pub n_parts: usize,
    pub n_blend: usize,
    pub n_nodes: usize,
    pub n_pruned_keep: usize,
    pub n_joints: usize,
    pub pose_dim: usize,
    pub expr_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub precision: Precision,
}

impl ModelConfig {
    /// Full-size configuration: 200K Gaussians, 256 parts, 16 blendshapes,
    /// 10K nodes, 20K retained blendshapes per attribute.
    pub fn paper() -> Self {
        Self {
            n_gaussians: 200_000,
            n_parts: 256,
            n_blend: 16,
            n_nodes: 10_000,
            n_pruned_keep: 20_000,
            ..Self::base()
        }
    }

    /// A uniform 10x shrink of [`ModelConfig::paper`].
    pub fn desk() -> Self {
        Self {
            n_gaussians: 20_000,
            n_parts: 64,
            n_blend: 16,
            n_nodes: 1_000,
            n_pruned_keep: 2_000,
            ..Self::base()
        }
    }

    pub fn tiny() -> Self {
        Self {
            n_gaussians: 2_000,
            n_parts: 16,
            n_blend: 16,
            n_nodes: 200,
            n_pruned_keep: 200,
            ..Self::base()
        }
    }

    fn base() -> Self {
        Self {
            n_gaussians: 0,
            n_parts: 0,
            n_blend: 16,
            n_nodes: 0,
            n_pruned_keep: 0,
            n_joints: 22,
            pose_dim: 63,
            expr_dim: 10,
            hidden_width: 64,
            hidden_layers: 3,
            precision: Precision::F32,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pose_dim + self.expr_dim
    }

    pub fn posed_joints(&self) -> usize {
        self.pose_dim / 3
    }

    /// Layer shapes `(in, out)` of one part's MLP.
    pub fn mlp_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        shapes.push((fan_in, self.n_blend));
        shapes
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeutralGaussians {
    pub positions: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub log_scales: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub opacities: Vec<f32>,
    pub part_ids: Vec<u32>,
    pub skin_joints: Vec<[u16; 4]>,
    pub skin_weights: Vec<[f32; 4]>,
}

impl NeutralGaussians {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorders every per-Gaussian array by `order` (new index -> old index).
    pub fn permute(&mut self, order: &[usize]) {
        fn apply<T: Copy>(v: &mut Vec<T>, order: &[usize]) {
            *v = order.iter().map(|&i| v[i]).collect();
        }
        apply(&mut self.positions, order);
        apply(&mut self.rotations, order);
        apply(&mut self.log_scales, order);
        apply(&mut self.colors, order);
        apply(&mut self.opacities, order);
        apply(&mut self.part_ids, order);
        apply(&mut self.skin_joints, order);
        apply(&mut self.skin_weights, order);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartRange {
    pub gaussian_start: u32,
    pub gaussian_end: u32,
    pub node_start: u32,
    pub node_end: u32,
    /// Head parts see the expression coefficients; all others get them zeroed.
    pub is_head: bool,
}

impl PartRange {
    pub fn gaussians(&self) -> Range<usize> {
        self.gaussian_start as usize..self.gaussian_end as usize
    }

    pub fn nodes(&self) -> Range<usize> {
        self.node_start as usize..self.node_end as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionTable {
    pub parts: Vec<PartRange>,
}

impl PartitionTable {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Part owning Gaussian `k`, by binary search over the contiguous ranges.
    pub fn part_of(&self, k: usize) -> Option<usize> {
        let k = k as u32;
        let i = self.parts.partition_point(|p| p.gaussian_end <= k);
        (i < self.parts.len() && self.parts[i].gaussian_start <= k).then_some(i)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseAttribute {
    /// Retained global Gaussian indices, strictly increasing.
    pub indices: Vec<u32>,
    /// Coefficients `[indices.len(), n_blend, components]`.
    pub coeffs: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseBlendshapes {
    /// Indexed by [`Attribute::index`].
    pub attributes: [SparseAttribute; 3],
}

impl SparseBlendshapes {
    pub fn get(&self, a: Attribute) -> &SparseAttribute {
        &self.attributes[a.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttributeBlendshapes {
    /// `[n_gaussians, n_blend, 10]`, rows in Gaussian order.
    Dense(Vec<f32>),
    Sparse(SparseBlendshapes),
}

impl Default for AttributeBlendshapes {
    fn default() -> Self {
        AttributeBlendshapes::Dense(Vec::new())
    }
}

impl AttributeBlendshapes {
    pub fn is_sparse(&self) -> bool {
        matches!(self, AttributeBlendshapes::Sparse(_))
    }

    /// Number of stored blendshape coefficients.
    pub fn parameter_count(&self) -> usize {
        match self {
            AttributeBlendshapes::Dense(c) => c.len(),
            AttributeBlendshapes::Sparse(s) => s.attributes.iter().map(|a| a.coeffs.len()).sum(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeSet {
    /// Gaussian index of each node, grouped by part.
    pub gaussian_index: Vec<u32>,
    /// Position blendshapes `[n_nodes, n_blend, 3]`.
    pub blendshapes: Vec<f32>,
    /// Three nearest nodes per Gaussian.
    pub knn_nodes: Vec<[u32; 3]>,
    /// Normalized inverse-distance weights matching `knn_nodes`.
    pub knn_weights: Vec<[f32; 3]>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.gaussian_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussian_index.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub parent: Option<usize>,
    pub rest_rotation: [f32; 4],
    pub rest_translation: [f32; 3],
}

/// Joint 0 is the unposed root; joints `1..` each consume three pose values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim, in_dim]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartMlp {
    pub layers: Vec<DenseLayer>,
}

impl PartMlp {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            layers: shapes.iter().map(|&(i, o)| DenseLayer::zeros(i, o)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MlpWeights {
    pub parts: Vec<PartMlp>,
}

/// Affine PCA subspace of training pose+expression vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseBasis {
    pub mean: Vec<f32>,
    /// Row-major `[k, mean.len()]`, orthonormal rows.
    pub basis: Vec<f32>,
    pub k: usize,
}

impl PoseBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.basis[i * d..(i + 1) * d]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AvatarModel {
    pub config: ModelConfig,
    pub neutral: NeutralGaussians,
    pub partitions: PartitionTable,
    pub mlp: MlpWeights,
    pub blendshapes: AttributeBlendshapes,
    pub nodes: NodeSet,
    pub skeleton: Skeleton,
    pub pose_basis: Option<PoseBasis>,
}

impl AvatarModel {
    /// A model with no Gaussians; what an empty container decodes to.
    pub fn empty(config: ModelConfig) -> Self {
        Self {
            config: ModelConfig {
                n_gaussians: 0,
                n_parts: 0,
                n_nodes: 0,
                n_pruned_keep: 0,
                ..config
            },
            ..Default::default()
        }
    }

    pub fn node_positions(&self) -> Vec<[f32; 3]> {
        self.nodes
            .gaussian_index
            .iter()
            .map(|&g| self.neutral.positions[g as usize])
            .collect()
    }
}

/// Model section a diagnostic refers to, displayed by its type name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Section {
    ModelConfig,
    NeutralGaussians,
    PartitionTable,
    MlpWeights,
    AttributeBlendshapes,
    NodeSet,
    Skeleton,
    PoseBasis,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub section: Section,
    /// Element index (Gaussian, part, node, joint, ...) when one applies.
    pub index: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(section: Section, index: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            section,
            index,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.section, i, self.message),
            None => write!(f, "{}: {}", self.section, self.message),
        }
    }
}
