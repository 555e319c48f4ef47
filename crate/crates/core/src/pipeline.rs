//! Builds a runtime model from the synthetic oracle: per-part local
//! blendshapes from the oracle's corrective stacks, MLPs regressing the
//! per-pose features, then a least-squares refit of the blendshapes against
//! the features the MLPs actually produce.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::corrective::{combine_blendshapes, compute_node_offsets};
use crate::error::{Error, Result};
use crate::fit::{fit_part_mlps, FitConfig, PartFitStats};
use crate::linalg::cholesky_solve;
use crate::model::{Attribute, AttributeBlendshapes, AvatarModel, PoseBasis, BLEND_COMPONENTS};
use crate::pca::{fit_local_blendshapes, pca};
use crate::pose::{encode_pose, mlp_forward, LocalFeatures, Pose};
use crate::synth::{Oracle, ORACLE_COMPONENTS};

/// Fraction of pose variance retained by the stored pose basis.
pub const POSE_BASIS_VARIANCE: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub fit: FitConfig,
    /// Tikhonov weight of the blendshape refit, relative to the mean feature energy.
    pub ridge: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig {
                iterations: 4000,
                batch_size: 128,
                ..FitConfig::default()
            },
            ridge: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub poses: usize,
    pub dynamic_parts: usize,
    pub part_stats: Vec<PartFitStats>,
    /// Mean L1 of the rank-`N_B` truncation of the oracle stacks.
    pub truncation_floor: f64,
    /// Mean L1 between decoded and oracle correctives on the fitting poses.
    pub corrective_l1: f64,
    pub pose_basis_k: usize,
}

/// Columns of part `i`'s stack: ten attribute components per Gaussian, then
/// three position components per node.
pub fn part_columns(model: &AvatarModel, part: usize) -> usize {
    let p = &model.partitions.parts[part];
    p.gaussians().len() * BLEND_COMPONENTS + p.nodes().len() * 3
}

/// Entries compared per pose: every Gaussian's attributes and every node's position.
pub fn entries_per_pose(model: &AvatarModel) -> usize {
    model.neutral.len() * BLEND_COMPONENTS + model.nodes.len() * 3
}

/// `[F, part_columns]` oracle corrective stack of every non-static part.
pub fn oracle_stacks(model: &AvatarModel, oracle: &Oracle, poses: &[Pose]) -> Vec<Option<Array2<f64>>> {
    (0..model.partitions.len())
        .into_par_iter()
        .map(|i| {
            if oracle.is_static(i) {
                return None;
            }
            let part = &model.partitions.parts[i];
            let n_g = part.gaussians().len();
            let node_local: Vec<usize> = part
                .nodes()
                .map(|n| model.nodes.gaussian_index[n] as usize - part.gaussian_start as usize)
                .collect();
            let mut x = Array2::zeros((poses.len(), part_columns(model, i)));
            for (f, pose) in poses.iter().enumerate() {
                let rows = oracle.part_rows(pose, i, n_g);
                let mut out = x.row_mut(f);
                for (k, row) in rows.iter().enumerate() {
                    for c in 0..BLEND_COMPONENTS {
                        out[k * BLEND_COMPONENTS + c] = row[c] as f64;
                    }
                }
                for (j, &k) in node_local.iter().enumerate() {
                    for c in 0..3 {
                        out[n_g * BLEND_COMPONENTS + j * 3 + c] = rows[k][BLEND_COMPONENTS + c] as f64;
                    }
                }
            }
            Some(x)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Buffer {
    Dense,
    Sparse(usize),
    Node,
}

/// Storage of one stack column: coefficient `b` lives at `base + b * stride`.
#[derive(Clone, Copy, Debug)]
struct Slot {
    column: usize,
    buffer: Buffer,
    base: usize,
    stride: usize,
}

/// Stack columns of part `i` that the model stores blendshapes for: every
/// column for a dense model, retained attribute rows plus all node columns
/// for a pruned one.
fn part_slots(model: &AvatarModel, part: usize) -> Vec<Slot> {
    let nb = model.config.n_blend;
    let p = &model.partitions.parts[part];
    let n_g = p.gaussians().len();
    let mut slots = Vec::new();
    for (local, k) in p.gaussians().enumerate() {
        match &model.blendshapes {
            AttributeBlendshapes::Dense(_) => {
                for c in 0..BLEND_COMPONENTS {
                    slots.push(Slot {
                        column: local * BLEND_COMPONENTS + c,
                        buffer: Buffer::Dense,
                        base: k * nb * BLEND_COMPONENTS + c,
                        stride: BLEND_COMPONENTS,
                    });
                }
            }
            AttributeBlendshapes::Sparse(sparse) => {
                for a in Attribute::ALL {
                    let w = a.components();
                    if let Ok(pos) = sparse.get(a).indices.binary_search(&(k as u32)) {
                        for c in 0..w {
                            slots.push(Slot {
                                column: local * BLEND_COMPONENTS + a.offset() + c,
                                buffer: Buffer::Sparse(a.index()),
                                base: pos * nb * w + c,
                                stride: w,
                            });
                        }
                    }
                }
            }
        }
    }
    for (j, n) in p.nodes().enumerate() {
        for c in 0..3 {
            slots.push(Slot {
                column: n_g * BLEND_COMPONENTS + j * 3 + c,
                buffer: Buffer::Node,
                base: n * nb * 3 + c,
                stride: 3,
            });
        }
    }
    slots
}

/// Writes a `[N_B, slots]` basis into the model's blendshape storage.
fn write_part_basis(model: &mut AvatarModel, slots: &[Slot], basis: ArrayView2<f64>) {
    let nb = model.config.n_blend;
    for (j, slot) in slots.iter().enumerate() {
        let buf: &mut [f32] = match (slot.buffer, &mut model.blendshapes) {
            (Buffer::Node, _) => &mut model.nodes.blendshapes,
            (Buffer::Dense, AttributeBlendshapes::Dense(d)) => d,
            (Buffer::Sparse(a), AttributeBlendshapes::Sparse(s)) => &mut s.attributes[a].coeffs,
            _ => unreachable!("slots are derived from the model's storage"),
        };
        for b in 0..nb {
            buf[slot.base + b * slot.stride] = basis[[b, j]] as f32;
        }
    }
}

fn clear_blendshapes(model: &mut AvatarModel) {
    match &mut model.blendshapes {
        AttributeBlendshapes::Dense(d) => d.fill(0.0),
        AttributeBlendshapes::Sparse(s) => s.attributes.iter_mut().for_each(|a| a.coeffs.fill(0.0)),
    }
    model.nodes.blendshapes.fill(0.0);
}

/// Columns of each dynamic part's stack that the model stores, with their slots.
fn restrict(model: &AvatarModel, stacks: &[Option<Array2<f64>>]) -> Vec<Option<(Array2<f64>, Vec<Slot>)>> {
    stacks
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            s.as_ref().map(|x| {
                let slots = part_slots(model, i);
                let cols: Vec<usize> = slots.iter().map(|s| s.column).collect();
                (x.select(Axis(1), &cols), slots)
            })
        })
        .collect()
}

/// Sets every part's output bias so that the zero pose maps to an exactly
/// zero feature vector in float32.
pub fn anchor_rest(model: &mut AvatarModel) -> Result<()> {
    let zero = vec![0f32; model.config.input_dim()];
    for mlp in &mut model.mlp.parts {
        let Some(last) = mlp.layers.last_mut() else {
            return Err(Error::Shape("MLP has no layers".into()));
        };
        last.bias.fill(0.0);
        let acc = mlp_forward(mlp, &zero)?;
        let last = mlp.layers.last_mut().unwrap();
        last.bias.iter_mut().zip(&acc).for_each(|(b, a)| *b = -a);
    }
    Ok(())
}

fn features_for(model: &AvatarModel, poses: &[Pose]) -> Result<Vec<LocalFeatures>> {
    poses.par_iter().map(|p| encode_pose(model, p)).collect()
}

/// Least-squares blendshapes for the features the model's MLPs produce on
/// `poses`, per part: `min ||E B - X||^2 + ridge ||B||^2` over the stored
/// columns. Static parts keep zero blendshapes.
pub fn refit_blendshapes(
    model: &mut AvatarModel,
    stacks: &[Option<Array2<f64>>],
    poses: &[Pose],
    ridge: f64,
) -> Result<()> {
    let restricted = restrict(model, stacks);
    refit_restricted(model, &restricted, poses, ridge)
}

fn refit_restricted(
    model: &mut AvatarModel,
    restricted: &[Option<(Array2<f64>, Vec<Slot>)>],
    poses: &[Pose],
    ridge: f64,
) -> Result<()> {
    let nb = model.config.n_blend;
    let features = features_for(model, poses)?;
    let bases: Vec<Option<Array2<f64>>> = restricted
        .par_iter()
        .enumerate()
        .map(|(i, stack)| {
            let Some((x, _)) = stack else { return Ok(None) };
            let e = Array2::from_shape_fn((poses.len(), nb), |(f, b)| features[f].row(i)[b] as f64);
            let mut g = e.t().dot(&e);
            let scale = (0..nb).map(|b| g[[b, b]]).sum::<f64>() / nb.max(1) as f64;
            let lambda = (ridge * scale).max(1e-12);
            for b in 0..nb {
                g[[b, b]] += lambda;
            }
            let rhs = e.t().dot(x);
            cholesky_solve(g.view(), rhs.view())
                .map(Some)
                .ok_or_else(|| Error::Precondition(format!("part {i}: feature Gram matrix is singular")))
        })
        .collect::<Result<_>>()?;
    for (b, r) in bases.iter().zip(restricted) {
        if let (Some(b), Some((_, slots))) = (b, r) {
            write_part_basis(model, slots, b.view());
        }
    }
    Ok(())
}

/// Affine PCA basis of the concatenated pose vectors keeping `variance` of
/// their total variance.
pub fn build_pose_basis(poses: &[Pose], variance: f64) -> Result<PoseBasis> {
    let dim = poses.first().map_or(0, |p| p.theta_p.len() + p.theta_e.len());
    if poses.len() < 2 || dim == 0 {
        return Err(Error::Precondition("a pose basis needs at least two poses".into()));
    }
    let x = Array2::from_shape_fn((poses.len(), dim), |(f, d)| {
        let p = &poses[f];
        if d < p.theta_p.len() {
            p.theta_p[d] as f64
        } else {
            p.theta_e[d - p.theta_p.len()] as f64
        }
    });
    let full = pca(x.view(), dim.min(poses.len()))?;
    let mut k = 0;
    let mut cum = 0.0;
    while k < full.explained_ratio.len() && cum < variance {
        cum += full.explained_ratio[k];
        k += 1;
    }
    let k = k.max(1);
    Ok(PoseBasis {
        mean: full.mean.iter().map(|&m| m as f32).collect(),
        basis: full
            .basis
            .rows()
            .into_iter()
            .take(k)
            .flatten()
            .map(|&v| v as f32)
            .collect(),
        k,
    })
}

/// Mean absolute difference between the model's correctives and the oracle's
/// over every Gaussian attribute component and every node position component.
pub fn corrective_l1(model: &AvatarModel, oracle: &Oracle, poses: &[Pose]) -> Result<f64> {
    if poses.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = poses
        .par_iter()
        .map(|pose| -> Result<f64> {
            let features = encode_pose(model, pose)?;
            let corr = combine_blendshapes(model, &features)?;
            let node_offsets = compute_node_offsets(model, &features)?;
            let mut sum = 0f64;
            for (i, part) in model.partitions.parts.iter().enumerate() {
                let range = part.gaussians();
                let rows = oracle.part_rows(pose, i, range.len());
                for (local, k) in range.clone().enumerate() {
                    let got = corr.attribute_row(k);
                    for c in 0..BLEND_COMPONENTS {
                        sum += (got[c] as f64 - rows[local][c] as f64).abs();
                    }
                }
                for n in part.nodes() {
                    let local = model.nodes.gaussian_index[n] as usize - range.start;
                    for c in 0..3 {
                        sum += (node_offsets[n][c] as f64 - rows[local][BLEND_COMPONENTS + c] as f64).abs();
                    }
                }
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / (poses.len() * entries_per_pose(model)) as f64)
}

/// Mean L1 of the best rank-`k` approximation of each part's stack, over the
/// same entries as [`corrective_l1`].
pub fn truncation_floor(model: &AvatarModel, stacks: &[Option<Array2<f64>>], k: usize) -> Result<f64> {
    let dynamic: Vec<Array2<f64>> = stacks.iter().flatten().cloned().collect();
    let f = stacks.iter().flatten().next().map_or(0, |s| s.nrows());
    if f == 0 {
        return Ok(0.0);
    }
    let facts = fit_local_blendshapes(&dynamic, k.min(f))?;
    Ok(
        residual_l1(&dynamic, &facts.iter().map(|fa| fa.reconstruct()).collect::<Vec<_>>())
            / (f * entries_per_pose(model)) as f64,
    )
}

fn residual_l1(stacks: &[Array2<f64>], recon: &[Array2<f64>]) -> f64 {
    stacks
        .iter()
        .zip(recon)
        .map(|(x, r)| x.iter().zip(r.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum()
}

/// Fits the model's MLPs and stored blendshapes to the oracle on `poses`.
/// On a pruned model only the retained rows are fitted, which is the
/// fine-tuning step after pruning.
pub fn fit_avatar(
    model: &mut AvatarModel,
    oracle: &Oracle,
    poses: &[Pose],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<FitReport> {
    let c = model.config.clone();
    if let Some(p) = poses
        .iter()
        .find(|p| p.theta_p.len() != c.pose_dim || p.theta_e.len() != c.expr_dim)
    {
        return Err(Error::Shape(format!(
            "pose is {}+{}, model expects {}+{}",
            p.theta_p.len(),
            p.theta_e.len(),
            c.pose_dim,
            c.expr_dim
        )));
    }
    if poses.len() < 2 * c.n_blend {
        return Err(Error::Precondition(format!(
            "{} poses, at least {} required",
            poses.len(),
            2 * c.n_blend
        )));
    }
    let stacks = oracle_stacks(model, oracle, poses);
    let floor = truncation_floor(model, &stacks, c.n_blend)?;
    let restricted = restrict(model, &stacks);
    drop(stacks);
    let dynamic_idx: Vec<usize> = (0..restricted.len()).filter(|&i| restricted[i].is_some()).collect();
    let dynamic: Vec<Array2<f64>> = restricted.iter().flatten().map(|(x, _)| x.clone()).collect();
    let facts = fit_local_blendshapes(&dynamic, c.n_blend)?;
    drop(dynamic);

    // Start from cleared blendshapes so static parts stay exactly zero.
    clear_blendshapes(model);
    let mut targets = vec![Array2::zeros((poses.len(), c.n_blend)); c.n_parts];
    for (fa, &i) in facts.iter().zip(&dynamic_idx) {
        let (_, slots) = restricted[i].as_ref().unwrap();
        write_part_basis(model, slots, fa.basis.view());
        targets[i] = fa.features.clone();
    }

    let inputs: Vec<Vec<f32>> = poses.iter().map(Pose::concat).collect();
    let head: Vec<bool> = model.partitions.parts.iter().map(|p| p.is_head).collect();
    let (mlp, part_stats) = fit_part_mlps(&inputs, &targets, &head, c.pose_dim, &c.mlp_shapes(), &cfg.fit, seed)?;
    model.mlp = mlp;
    anchor_rest(model)?;
    refit_restricted(model, &restricted, poses, cfg.ridge)?;
    let basis = build_pose_basis(poses, POSE_BASIS_VARIANCE)?;
    let pose_basis_k = basis.k;
    model.pose_basis = Some(basis);
    let l1 = corrective_l1(model, oracle, poses)?;
    Ok(FitReport {
        poses: poses.len(),
        dynamic_parts: dynamic_idx.len(),
        part_stats,
        truncation_floor: floor,
        corrective_l1: l1,
        pose_basis_k,
    })
}

/// `[F, N_g * ORACLE_COMPONENTS]` oracle correctives of every Gaussian, for
/// global and random-group PCA experiments.
pub fn oracle_matrix(
    model: &AvatarModel,
    oracle: &Oracle,
    poses: &[Pose],
    components: std::ops::Range<usize>,
) -> Array2<f64> {
    let n = model.neutral.len();
    let w = components.len();
    assert!(components.end <= ORACLE_COMPONENTS);
    let rows: Vec<Vec<f64>> = poses
        .par_iter()
        .map(|pose| {
            let mut row = vec![0f64; n * w];
            for (i, part) in model.partitions.parts.iter().enumerate() {
                let range = part.gaussians();
                for (local, r) in oracle.part_rows(pose, i, range.len()).iter().enumerate() {
                    for (j, c) in components.clone().enumerate() {
                        row[(range.start + local) * w + j] = r[c] as f64;
                    }
                }
            }
            row
        })
        .collect();
    Array2::from_shape_fn((poses.len(), n * w), |(f, d)| rows[f][d])
}
