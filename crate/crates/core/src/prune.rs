//! Variance-based blendshape pruning and the corrective-magnitude loss.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corrective::{combine_into, Correctives};
use crate::error::{Error, Result};
use crate::model::{
    Attribute, AttributeBlendshapes, AvatarModel, SparseAttribute, SparseBlendshapes, BLEND_COMPONENTS,
};
use crate::pose::{encode_pose, Pose};

/// Per-Gaussian variance of the attribute correctives over a pose set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub r_hat: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
    /// Population variance of each of the 10 components.
    pub components: Vec<[f64; BLEND_COMPONENTS]>,
}

impl VarianceReport {
    pub fn len(&self) -> usize {
        self.r_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_hat.is_empty()
    }

    pub fn get(&self, a: Attribute) -> &[f64] {
        match a {
            Attribute::Rotation => &self.r_hat,
            Attribute::Scale => &self.s_hat,
            Attribute::Color => &self.c_hat,
        }
    }

    /// Reduces per-component variances by trace over each attribute.
    pub fn from_components(components: Vec<[f64; BLEND_COMPONENTS]>) -> Self {
        let trace = |a: Attribute| -> Vec<f64> {
            components
                .iter()
                .map(|c| c[a.offset()..a.offset() + a.components()].iter().sum())
                .collect()
        };
        Self {
            r_hat: trace(Attribute::Rotation),
            s_hat: trace(Attribute::Scale),
            c_hat: trace(Attribute::Color),
            components,
        }
    }
}

/// Single-pass shifted-mean variance accumulator for `[N_g, 10]` rows.
#[derive(Clone, Debug, Default)]
pub struct VarianceAccumulator {
    count: usize,
    shift: Vec<[f64; BLEND_COMPONENTS]>,
    sum: Vec<[f64; BLEND_COMPONENTS]>,
    sum_sq: Vec<[f64; BLEND_COMPONENTS]>,
}

impl VarianceAccumulator {
    pub fn new(n_gaussians: usize) -> Self {
        Self {
            count: 0,
            shift: vec![[0.0; BLEND_COMPONENTS]; n_gaussians],
            sum: vec![[0.0; BLEND_COMPONENTS]; n_gaussians],
            sum_sq: vec![[0.0; BLEND_COMPONENTS]; n_gaussians],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, corr: &Correctives) -> Result<()> {
        if corr.len() != self.shift.len() {
            return Err(Error::Shape(format!(
                "correctives for {} Gaussians, accumulator holds {}",
                corr.len(),
                self.shift.len()
            )));
        }
        let first = self.count == 0;
        for k in 0..corr.len() {
            let row = corr.attribute_row(k);
            if first {
                self.shift[k] = row.map(|v| v as f64);
            }
            let (shift, sum, sum_sq) = (&self.shift[k], &mut self.sum[k], &mut self.sum_sq[k]);
            for c in 0..BLEND_COMPONENTS {
                let d = row[c] as f64 - shift[c];
                sum[c] += d;
                sum_sq[c] += d * d;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Population variances; needs at least two samples.
    pub fn finish(&self) -> Result<VarianceReport> {
        compute_variances(self)
    }
}

/// Population variance per component, reduced per attribute by trace.
pub fn compute_variances(acc: &VarianceAccumulator) -> Result<VarianceReport> {
    if acc.count < 2 {
        return Err(Error::Precondition(format!(
            "variance needs at least 2 poses, got {}",
            acc.count
        )));
    }
    let n = acc.count as f64;
    let components = acc
        .sum
        .iter()
        .zip(&acc.sum_sq)
        .map(|(s1, s2)| {
            let mut v = [0f64; BLEND_COMPONENTS];
            for c in 0..BLEND_COMPONENTS {
                let mean = s1[c] / n;
                v[c] = (s2[c] / n - mean * mean).max(0.0);
            }
            v
        })
        .collect();
    Ok(VarianceReport::from_components(components))
}

/// Streams the attribute correctives of every pose through `visit` and a
/// variance accumulator. The model must be dense.
pub fn collect_correctives_with<F>(model: &AvatarModel, poses: &[Pose], mut visit: F) -> Result<VarianceAccumulator>
where
    F: FnMut(usize, &Correctives),
{
    if model.blendshapes.is_sparse() {
        return Err(Error::Precondition("model is already pruned".into()));
    }
    if poses.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 poses, got {}",
            poses.len()
        )));
    }
    let mut acc = VarianceAccumulator::new(model.neutral.len());
    let mut corr = Correctives::default();
    for (i, pose) in poses.iter().enumerate() {
        let features = encode_pose(model, pose)?;
        combine_into(model, &features, &mut corr)?;
        visit(i, &corr);
        acc.push(&corr)?;
    }
    Ok(acc)
}

pub fn collect_correctives(model: &AvatarModel, poses: &[Pose]) -> Result<VarianceAccumulator> {
    collect_correctives_with(model, poses, |_, _| {})
}

/// Retained Gaussian indices per attribute, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSets {
    pub rotation: Vec<u32>,
    pub scale: Vec<u32>,
    pub color: Vec<u32>,
}

impl RetainedSets {
    pub fn get(&self, a: Attribute) -> &[u32] {
        match a {
            Attribute::Rotation => &self.rotation,
            Attribute::Scale => &self.scale,
            Attribute::Color => &self.color,
        }
    }

    pub fn all(n: usize) -> Self {
        let v: Vec<u32> = (0..n as u32).collect();
        Self {
            rotation: v.clone(),
            scale: v.clone(),
            color: v,
        }
    }
}

fn by_variance_desc(v: &[f64]) -> impl Fn(&u32, &u32) -> Ordering + '_ {
    move |&a, &b| v[b as usize].total_cmp(&v[a as usize]).then(a.cmp(&b))
}

fn topk(v: &[f64], n_keep: usize) -> Vec<u32> {
    let n_keep = n_keep.min(v.len());
    let mut idx: Vec<u32> = (0..v.len() as u32).collect();
    if n_keep == 0 {
        return Vec::new();
    }
    if n_keep < idx.len() {
        idx.select_nth_unstable_by(n_keep - 1, by_variance_desc(v));
        idx.truncate(n_keep);
    }
    idx.sort_unstable();
    idx
}

/// The `n_keep` largest-variance Gaussians of each attribute; ties go to the
/// smaller index.
pub fn select_topk(report: &VarianceReport, n_keep: usize) -> RetainedSets {
    RetainedSets {
        rotation: topk(&report.r_hat, n_keep),
        scale: topk(&report.s_hat, n_keep),
        color: topk(&report.c_hat, n_keep),
    }
}

fn check_retained(model: &AvatarModel, retained: &RetainedSets) -> Result<()> {
    let n = model.neutral.len();
    let len = retained.rotation.len();
    for a in Attribute::ALL {
        let idx = retained.get(a);
        if idx.len() != len {
            return Err(Error::Precondition("retained sets differ in size".into()));
        }
        if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&l| l as usize >= n) {
            return Err(Error::Precondition(format!(
                "{a:?} indices are not sorted, unique and in range"
            )));
        }
    }
    Ok(())
}

/// Repacks the dense blendshapes to hold only the retained rows. Node
/// blendshapes are never pruned.
pub fn prune(model: &AvatarModel, retained: &RetainedSets) -> Result<AvatarModel> {
    let AttributeBlendshapes::Dense(dense) = &model.blendshapes else {
        return Err(Error::Precondition("model is already pruned".into()));
    };
    check_retained(model, retained)?;
    let nb = model.config.n_blend;
    let attributes = Attribute::ALL.map(|a| {
        let idx = retained.get(a);
        let w = a.components();
        let mut coeffs = Vec::with_capacity(idx.len() * nb * w);
        for &k in idx {
            let row = &dense[k as usize * nb * BLEND_COMPONENTS..(k as usize + 1) * nb * BLEND_COMPONENTS];
            for b in 0..nb {
                let base = b * BLEND_COMPONENTS + a.offset();
                coeffs.extend_from_slice(&row[base..base + w]);
            }
        }
        SparseAttribute {
            indices: idx.to_vec(),
            coeffs,
        }
    });
    let mut out = model.clone();
    out.blendshapes = AttributeBlendshapes::Sparse(SparseBlendshapes { attributes });
    out.config.n_pruned_keep = retained.rotation.len();
    Ok(out)
}

/// Dense model with the blendshape rows outside `retained` set to zero.
pub fn zero_pruned_rows(model: &AvatarModel, retained: &RetainedSets) -> Result<AvatarModel> {
    let AttributeBlendshapes::Dense(dense) = &model.blendshapes else {
        return Err(Error::Precondition("model is already pruned".into()));
    };
    check_retained(model, retained)?;
    let n = model.neutral.len();
    let nb = model.config.n_blend;
    let mut coeffs = dense.clone();
    for a in Attribute::ALL {
        let mut keep = vec![false; n];
        for &k in retained.get(a) {
            keep[k as usize] = true;
        }
        for (k, _) in keep.iter().enumerate().filter(|(_, &kept)| !kept) {
            for b in 0..nb {
                let base = k * nb * BLEND_COMPONENTS + b * BLEND_COMPONENTS + a.offset();
                coeffs[base..base + a.components()].fill(0.0);
            }
        }
    }
    let mut out = model.clone();
    out.blendshapes = AttributeBlendshapes::Dense(coeffs);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintWeights {
    pub lambda_dr: f64,
    pub lambda_dc: f64,
}

impl Default for ConstraintWeights {
    fn default() -> Self {
        Self {
            lambda_dr: 0.02,
            lambda_dc: 0.002,
        }
    }
}

/// Mean over Gaussians of `λr |δr|₁ + |δs|₁ + λc |δc|₁`.
pub fn constraint_loss(corr: &Correctives, w: &ConstraintWeights) -> f64 {
    let n = corr.len();
    if n == 0 {
        return 0.0;
    }
    let l1 = |v: &[f32]| v.iter().map(|x| x.abs() as f64).sum::<f64>();
    let total: f64 = (0..n)
        .map(|k| w.lambda_dr * l1(&corr.rotation[k]) + l1(&corr.scale[k]) + w.lambda_dc * l1(&corr.color[k]))
        .sum();
    total / n as f64
}
