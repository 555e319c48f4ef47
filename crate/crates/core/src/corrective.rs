//! Local blendshape combination, node position offsets and corrective application.

use crate::error::{Error, Result};
use crate::model::{Attribute, AttributeBlendshapes, AvatarModel, NeutralGaussians, NodeSet, BLEND_COMPONENTS};
use crate::pose::LocalFeatures;

/// Per-Gaussian corrective offsets for one pose.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correctives {
    pub rotation: Vec<[f32; 4]>,
    pub scale: Vec<[f32; 3]>,
    pub color: Vec<[f32; 3]>,
    pub position: Vec<[f32; 3]>,
}

impl Correctives {
    pub fn zeros(n: usize) -> Self {
        Self {
            rotation: vec![[0.0; 4]; n],
            scale: vec![[0.0; 3]; n],
            color: vec![[0.0; 3]; n],
            position: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rotation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotation.is_empty()
    }

    fn resize(&mut self, n: usize) {
        self.rotation.clear();
        self.rotation.resize(n, [0.0; 4]);
        self.scale.clear();
        self.scale.resize(n, [0.0; 3]);
        self.color.clear();
        self.color.resize(n, [0.0; 3]);
        self.position.clear();
        self.position.resize(n, [0.0; 3]);
    }

    /// The 10-wide `[r, s, c]` row of Gaussian `k`.
    pub fn attribute_row(&self, k: usize) -> [f32; BLEND_COMPONENTS] {
        let mut row = [0f32; BLEND_COMPONENTS];
        row[0..4].copy_from_slice(&self.rotation[k]);
        row[4..7].copy_from_slice(&self.scale[k]);
        row[7..10].copy_from_slice(&self.color[k]);
        row
    }

    fn set_components(&mut self, k: usize, attr: Attribute, v: &[f32]) {
        match attr {
            Attribute::Rotation => self.rotation[k].copy_from_slice(v),
            Attribute::Scale => self.scale[k].copy_from_slice(v),
            Attribute::Color => self.color[k].copy_from_slice(v),
        }
    }
}

/// Gaussians after correctives, in canonical or posed space. Scales are linear.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub scales: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub opacities: Vec<f32>,
}

pub type CanonicalGaussians = GaussianSet;
pub type PosedGaussians = GaussianSet;

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn check_features(model: &AvatarModel, features: &LocalFeatures) -> Result<()> {
    let c = &model.config;
    if features.n_parts != c.n_parts || features.n_blend != c.n_blend || features.values.len() != c.n_parts * c.n_blend
    {
        return Err(Error::Shape(format!(
            "features are {}x{}, model expects {}x{}",
            features.n_parts, features.n_blend, c.n_parts, c.n_blend
        )));
    }
    Ok(())
}

/// `sum_b e[b] * coeffs[b * width + c]` for every component `c`.
#[inline]
fn contract<const W: usize>(coeffs: &[f32], e: &[f32]) -> [f32; W] {
    let mut acc = [0f32; W];
    for (row, &eb) in coeffs.chunks_exact(W).zip(e) {
        for c in 0..W {
            acc[c] += row[c] * eb;
        }
    }
    acc
}

/// Attribute offsets `B^i e^i` for every Gaussian. Positions are left at zero.
/// Dense and sparse storage accumulate in the same order, so a sparse model
/// reproduces a dense model with zeroed rows bit for bit.
pub fn combine_blendshapes(model: &AvatarModel, features: &LocalFeatures) -> Result<Correctives> {
    let mut out = Correctives::default();
    combine_into(model, features, &mut out)?;
    Ok(out)
}

pub fn combine_into(model: &AvatarModel, features: &LocalFeatures, out: &mut Correctives) -> Result<()> {
    check_features(model, features)?;
    let n = model.neutral.len();
    let nb = model.config.n_blend;
    out.resize(n);
    match &model.blendshapes {
        AttributeBlendshapes::Dense(coeffs) => {
            if coeffs.len() != n * nb * BLEND_COMPONENTS {
                return Err(Error::Shape("dense blendshape buffer has the wrong length".into()));
            }
            for (i, part) in model.partitions.parts.iter().enumerate() {
                let e = features.row(i);
                for k in part.gaussians() {
                    let row = &coeffs[k * nb * BLEND_COMPONENTS..(k + 1) * nb * BLEND_COMPONENTS];
                    // Contract each attribute separately so the accumulation
                    // order matches the sparse path exactly.
                    for attr in Attribute::ALL {
                        let w = attr.components();
                        let off = attr.offset();
                        let mut acc = [0f32; 4];
                        for (b, &eb) in e.iter().enumerate() {
                            let base = b * BLEND_COMPONENTS + off;
                            for c in 0..w {
                                acc[c] += row[base + c] * eb;
                            }
                        }
                        out.set_components(k, attr, &acc[..w]);
                    }
                }
            }
        }
        AttributeBlendshapes::Sparse(sparse) => {
            for attr in Attribute::ALL {
                let sa = sparse.get(attr);
                let w = attr.components();
                if sa.coeffs.len() != sa.indices.len() * nb * w {
                    return Err(Error::Shape(format!(
                        "sparse {attr:?} coefficients have the wrong length"
                    )));
                }
                for (j, &k) in sa.indices.iter().enumerate() {
                    let k = k as usize;
                    if k >= n {
                        return Err(Error::Shape(format!("sparse index {k} out of range")));
                    }
                    let e = features.row(model.neutral.part_ids[k] as usize);
                    let block = &sa.coeffs[j * nb * w..(j + 1) * nb * w];
                    match w {
                        4 => out.set_components(k, attr, &contract::<4>(block, e)),
                        _ => out.set_components(k, attr, &contract::<3>(block, e)),
                    }
                }
            }
        }
    }
    Ok(())
}

/// Position offset of every node: `B_s^i e^i`.
pub fn compute_node_offsets(model: &AvatarModel, features: &LocalFeatures) -> Result<Vec<[f32; 3]>> {
    check_features(model, features)?;
    let nb = model.config.n_blend;
    let nodes = &model.nodes;
    if nodes.blendshapes.len() != nodes.len() * nb * 3 {
        return Err(Error::Shape("node blendshape buffer has the wrong length".into()));
    }
    let mut out = vec![[0f32; 3]; nodes.len()];
    for (i, part) in model.partitions.parts.iter().enumerate() {
        let e = features.row(i);
        for n in part.nodes() {
            out[n] = contract::<3>(&nodes.blendshapes[n * nb * 3..(n + 1) * nb * 3], e);
        }
    }
    Ok(out)
}

/// Per-Gaussian position offsets from the three nearest nodes.
///
/// Evaluated as `v0 + w1 (v1 - v0) + w2 (v2 - v0)`, which equals the weighted
/// sum for normalized weights and returns a shared value exactly.
pub fn interpolate_positions(nodes: &NodeSet, node_offsets: &[[f32; 3]]) -> Result<Vec<[f32; 3]>> {
    if node_offsets.len() != nodes.len() {
        return Err(Error::Shape(format!(
            "{} node offsets for {} nodes",
            node_offsets.len(),
            nodes.len()
        )));
    }
    let mut out = Vec::with_capacity(nodes.knn_nodes.len());
    for (idx, w) in nodes.knn_nodes.iter().zip(&nodes.knn_weights) {
        let v0 = node_offsets[idx[0] as usize];
        let v1 = node_offsets[idx[1] as usize];
        let v2 = node_offsets[idx[2] as usize];
        let mut d = v0;
        for c in 0..3 {
            d[c] += w[1] * (v1[c] - v0[c]) + w[2] * (v2[c] - v0[c]);
        }
        out.push(d);
    }
    Ok(out)
}

const ROTATION_EPS: f32 = 1e-6;

/// Adds correctives to the neutral Gaussians in canonical space.
///
/// Rotation is renormalized (falling back to the neutral rotation when the sum
/// degenerates), scale is offset in log space, color is clamped to `[0, 1]` and
/// opacity passes through.
pub fn apply_correctives(neutral: &NeutralGaussians, corr: &Correctives) -> Result<CanonicalGaussians> {
    let n = neutral.len();
    if corr.rotation.len() != n || corr.scale.len() != n || corr.color.len() != n || corr.position.len() != n {
        return Err(Error::Shape(format!(
            "correctives for {} Gaussians, model has {n}",
            corr.len()
        )));
    }
    let mut out = GaussianSet {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        opacities: neutral.opacities.clone(),
    };
    for k in 0..n {
        let p = neutral.positions[k];
        let dx = corr.position[k];
        out.positions.push([p[0] + dx[0], p[1] + dx[1], p[2] + dx[2]]);

        let r = neutral.rotations[k];
        let dr = corr.rotation[k];
        let rot = if dr == [0.0; 4] {
            r
        } else {
            let q = [r[0] + dr[0], r[1] + dr[1], r[2] + dr[2], r[3] + dr[3]];
            let norm = q.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm < ROTATION_EPS {
                r
            } else {
                q.map(|x| x / norm)
            }
        };
        out.rotations.push(rot);

        let s = neutral.log_scales[k];
        let ds = corr.scale[k];
        out.scales
            .push([(s[0] + ds[0]).exp(), (s[1] + ds[1]).exp(), (s[2] + ds[2]).exp()]);

        let c = neutral.colors[k];
        let dc = corr.color[k];
        out.colors.push([
            (c[0] + dc[0]).clamp(0.0, 1.0),
            (c[1] + dc[1]).clamp(0.0, 1.0),
            (c[2] + dc[2]).clamp(0.0, 1.0),
        ]);
    }
    Ok(out)
}

/// Neutral Gaussians with scales exponentiated and no correctives.
pub fn neutral_set(neutral: &NeutralGaussians) -> CanonicalGaussians {
    GaussianSet {
        positions: neutral.positions.clone(),
        rotations: neutral.rotations.clone(),
        scales: neutral.log_scales.iter().map(|s| s.map(f32::exp)).collect(),
        colors: neutral.colors.clone(),
        opacities: neutral.opacities.clone(),
    }
}
