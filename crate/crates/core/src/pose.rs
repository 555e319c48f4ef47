//! Per-part MLP inference and pose-space projection.

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{AvatarModel, DenseLayer, ModelConfig, PartMlp, PoseBasis};

/// Body pose (axis-angle per posed joint) plus expression coefficients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pose {
    pub theta_p: Vec<f32>,
    pub theta_e: Vec<f32>,
}

fn wrap_angle(a: f32) -> f32 {
    if a.abs() <= PI {
        a
    } else {
        let two_pi = 2.0 * PI;
        let w = a - two_pi * (a / two_pi).round();
        w.clamp(-PI, PI)
    }
}

impl Pose {
    /// Builds a pose, wrapping joint angles into `[-pi, pi]`.
    pub fn new(theta_p: Vec<f32>, theta_e: Vec<f32>) -> Result<Self> {
        if theta_p.iter().chain(&theta_e).any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePose);
        }
        Ok(Self {
            theta_p: theta_p.into_iter().map(wrap_angle).collect(),
            theta_e,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            theta_p: vec![0.0; config.pose_dim],
            theta_e: vec![0.0; config.expr_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta_p.iter().chain(&self.theta_e).all(|v| v.is_finite())
    }

    /// `theta_p ++ theta_e`.
    pub fn concat(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.theta_p.len() + self.theta_e.len());
        v.extend_from_slice(&self.theta_p);
        v.extend_from_slice(&self.theta_e);
        v
    }

    pub fn from_concat(v: &[f32], pose_dim: usize) -> Self {
        Self {
            theta_p: v[..pose_dim].to_vec(),
            theta_e: v[pose_dim..].to_vec(),
        }
    }

    /// MLP input for a part: expression is zeroed unless the part is a head part.
    pub fn part_input(&self, is_head: bool) -> Vec<f32> {
        let mut v = self.concat();
        if !is_head {
            v[self.theta_p.len()..].fill(0.0);
        }
        v
    }
}

/// Feature matrix `[n_parts, n_blend]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalFeatures {
    pub n_parts: usize,
    pub n_blend: usize,
    pub values: Vec<f32>,
}

impl LocalFeatures {
    pub fn zeros(n_parts: usize, n_blend: usize) -> Self {
        Self {
            n_parts,
            n_blend,
            values: vec![0.0; n_parts * n_blend],
        }
    }

    pub fn row(&self, part: usize) -> &[f32] {
        &self.values[part * self.n_blend..(part + 1) * self.n_blend]
    }

    pub fn row_mut(&mut self, part: usize) -> &mut [f32] {
        &mut self.values[part * self.n_blend..(part + 1) * self.n_blend]
    }
}

fn layer_forward(layer: &DenseLayer, input: &[f32], out: &mut Vec<f32>, relu: bool) {
    out.clear();
    for (row, &b) in layer.weights.chunks_exact(layer.in_dim).zip(&layer.bias) {
        let mut acc = 0f32;
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        let v = acc + b;
        out.push(if relu { v.max(0.0) } else { v });
    }
}

/// Affine + ReLU for every hidden layer, then a linear output layer.
pub fn mlp_forward(mlp: &PartMlp, input: &[f32]) -> Result<Vec<f32>> {
    if mlp.layers.is_empty() {
        return Err(Error::Shape("MLP has no layers".into()));
    }
    if input.len() != mlp.input_dim() {
        return Err(Error::Shape(format!(
            "MLP input has {} values, expected {}",
            input.len(),
            mlp.input_dim()
        )));
    }
    for pair in mlp.layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Shape("MLP layer widths do not chain".into()));
        }
    }
    let mut a = input.to_vec();
    let mut b = Vec::new();
    let last = mlp.layers.len() - 1;
    for (l, layer) in mlp.layers.iter().enumerate() {
        if layer.weights.len() != layer.in_dim * layer.out_dim || layer.bias.len() != layer.out_dim {
            return Err(Error::Shape(format!("layer {l} buffers do not match its shape")));
        }
        layer_forward(layer, &a, &mut b, l != last);
        std::mem::swap(&mut a, &mut b);
    }
    Ok(a)
}

/// Local pose feature of every part. Non-head parts see a zeroed expression.
pub fn encode_pose(model: &AvatarModel, pose: &Pose) -> Result<LocalFeatures> {
    if !pose.is_finite() {
        return Err(Error::NonFinitePose);
    }
    let c = &model.config;
    if pose.theta_p.len() != c.pose_dim || pose.theta_e.len() != c.expr_dim {
        return Err(Error::Shape(format!(
            "pose is {}+{}, model expects {}+{}",
            pose.theta_p.len(),
            pose.theta_e.len(),
            c.pose_dim,
            c.expr_dim
        )));
    }
    let body = pose.part_input(false);
    let full = pose.part_input(true);
    let mut features = LocalFeatures::zeros(c.n_parts, c.n_blend);
    for (i, (part, mlp)) in model.partitions.parts.iter().zip(&model.mlp.parts).enumerate() {
        let input = if part.is_head { &full } else { &body };
        let e = mlp_forward(mlp, input)?;
        if e.len() != c.n_blend {
            return Err(Error::Shape(format!("part {i} MLP emits {} features", e.len())));
        }
        features.row_mut(i).copy_from_slice(&e);
    }
    Ok(features)
}

/// Orthogonal projection onto the affine pose subspace: `mean + B^T B (p - mean)`.
pub fn project_pose(pose: &Pose, basis: &PoseBasis) -> Result<Pose> {
    let v = pose.concat();
    let d = basis.dim();
    if v.len() != d || basis.basis.len() != basis.k * d {
        return Err(Error::Shape(format!(
            "pose has {} values, basis is {}x{}",
            v.len(),
            basis.k,
            d
        )));
    }
    let centered: Vec<f64> = v.iter().zip(&basis.mean).map(|(&x, &m)| x as f64 - m as f64).collect();
    let mut out: Vec<f64> = basis.mean.iter().map(|&m| m as f64).collect();
    for i in 0..basis.k {
        let row = basis.row(i);
        let a: f64 = row.iter().zip(&centered).map(|(&b, &c)| b as f64 * c).sum();
        for (o, &b) in out.iter_mut().zip(row) {
            *o += a * b as f64;
        }
    }
    let out: Vec<f32> = out.into_iter().map(|x| x as f32).collect();
    Ok(Pose::from_concat(&out, pose.theta_p.len()))
}

/// He-normal hidden layers, scaled-normal output layer, zero biases.
pub fn init_part_mlp<R: Rng>(shapes: &[(usize, usize)], rng: &mut R) -> PartMlp {
    let last = shapes.len().saturating_sub(1);
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(l, &(fin, fout))| {
            let gain = if l == last { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fin as f64).sqrt()).unwrap();
            DenseLayer {
                in_dim: fin,
                out_dim: fout,
                weights: (0..fin * fout).map(|_| normal.sample(rng) as f32).collect(),
                bias: vec![0.0; fout],
            }
        })
        .collect();
    PartMlp { layers }
}
