//! Synthetic capsule humanoid, surface-sampled Gaussians, body partitioning,
//! node selection, an analytic corrective oracle and pose sequences.

use std::f32::consts::PI;

use glam::{Mat3, Quat, Vec3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corrective::{Correctives, PosedGaussians};
use crate::error::{Error, Result};
use crate::model::{
    AttributeBlendshapes, AvatarModel, Joint, MlpWeights, ModelConfig, NeutralGaussians, NodeSet, PartRange,
    PartitionTable, Skeleton, BLEND_COMPONENTS,
};
use crate::pose::{init_part_mlp, Pose};
use crate::render::Camera;
use crate::spatial::{knn_table, KdTree};

/// Corrective components per Gaussian: rotation, scale, color, position.
pub const ORACLE_COMPONENTS: usize = BLEND_COMPONENTS + 3;

struct JointSpec {
    parent: Option<usize>,
    pos: [f32; 3],
    a: [f32; 3],
    b: [f32; 3],
    radius: f32,
    color: [f32; 3],
}

const SKIN: [f32; 3] = [0.87, 0.70, 0.60];
const SHIRT: [f32; 3] = [0.20, 0.40, 0.75];
const PANTS: [f32; 3] = [0.25, 0.25, 0.32];
const SHOES: [f32; 3] = [0.12, 0.09, 0.08];
const HEAD_JOINT: usize = 5;

const fn js(parent: Option<usize>, pos: [f32; 3], a: [f32; 3], b: [f32; 3], radius: f32, color: [f32; 3]) -> JointSpec {
    JointSpec {
        parent,
        pos,
        a,
        b,
        radius,
        color,
    }
}

/// Root plus 21 posed joints, parents before children, in meters with y up.
#[rustfmt::skip]
const HUMANOID: [JointSpec; 22] = [
    js(None,     [0.0, 0.95, 0.0],   [-0.09, 0.95, 0.0], [0.09, 0.95, 0.0],   0.11,  PANTS),
    js(Some(0),  [0.0, 1.02, 0.0],   [0.0, 1.02, 0.0],   [0.0, 1.15, 0.0],    0.12,  SHIRT),
    js(Some(1),  [0.0, 1.15, 0.0],   [0.0, 1.15, 0.0],   [0.0, 1.28, 0.0],    0.13,  SHIRT),
    js(Some(2),  [0.0, 1.28, 0.0],   [0.0, 1.28, 0.0],   [0.0, 1.42, 0.0],    0.14,  SHIRT),
    js(Some(3),  [0.0, 1.45, 0.0],   [0.0, 1.45, 0.0],   [0.0, 1.55, 0.0],    0.05,  SKIN),
    js(Some(4),  [0.0, 1.55, 0.0],   [0.0, 1.63, 0.0],   [0.0, 1.72, 0.0],    0.10,  SKIN),
    js(Some(0),  [0.09, 0.92, 0.0],  [0.09, 0.92, 0.0],  [0.09, 0.52, 0.0],   0.075, PANTS),
    js(Some(6),  [0.09, 0.52, 0.0],  [0.09, 0.52, 0.0],  [0.09, 0.10, 0.0],   0.055, PANTS),
    js(Some(7),  [0.09, 0.10, 0.0],  [0.09, 0.10, 0.0],  [0.09, 0.05, 0.07],  0.045, SHOES),
    js(Some(8),  [0.09, 0.05, 0.07], [0.09, 0.05, 0.07], [0.09, 0.04, 0.15],  0.04,  SHOES),
    js(Some(0),  [-0.09, 0.92, 0.0], [-0.09, 0.92, 0.0], [-0.09, 0.52, 0.0],  0.075, PANTS),
    js(Some(10), [-0.09, 0.52, 0.0], [-0.09, 0.52, 0.0], [-0.09, 0.10, 0.0],  0.055, PANTS),
    js(Some(11), [-0.09, 0.10, 0.0], [-0.09, 0.10, 0.0], [-0.09, 0.05, 0.07], 0.045, SHOES),
    js(Some(12), [-0.09, 0.05, 0.07],[-0.09, 0.05, 0.07],[-0.09, 0.04, 0.15], 0.04,  SHOES),
    js(Some(3),  [0.04, 1.40, 0.0],  [0.04, 1.40, 0.0],  [0.17, 1.40, 0.0],   0.055, SHIRT),
    js(Some(14), [0.17, 1.40, 0.0],  [0.17, 1.40, 0.0],  [0.44, 1.40, 0.0],   0.05,  SHIRT),
    js(Some(15), [0.44, 1.40, 0.0],  [0.44, 1.40, 0.0],  [0.68, 1.40, 0.0],   0.04,  SHIRT),
    js(Some(16), [0.68, 1.40, 0.0],  [0.68, 1.40, 0.0],  [0.78, 1.40, 0.0],   0.035, SKIN),
    js(Some(3),  [-0.04, 1.40, 0.0], [-0.04, 1.40, 0.0], [-0.17, 1.40, 0.0],  0.055, SHIRT),
    js(Some(18), [-0.17, 1.40, 0.0], [-0.17, 1.40, 0.0], [-0.44, 1.40, 0.0],  0.05,  SHIRT),
    js(Some(19), [-0.44, 1.40, 0.0], [-0.44, 1.40, 0.0], [-0.68, 1.40, 0.0],  0.04,  SHIRT),
    js(Some(20), [-0.68, 1.40, 0.0], [-0.68, 1.40, 0.0], [-0.78, 1.40, 0.0],  0.035, SKIN),
];

/// Number of posed joints of the built-in humanoid.
pub const HUMANOID_POSED_JOINTS: usize = HUMANOID.len() - 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateParams {
    /// Posed joints taken from the humanoid hierarchy, at most 21.
    pub posed_joints: usize,
    pub segments: usize,
    pub cap_rings: usize,
    /// Target spacing of cylinder rings along a capsule axis (m).
    pub ring_spacing: f32,
    /// Distance scale of the skinning falloff between capsules (m).
    pub skin_falloff: f32,
    /// Relative jitter applied to capsule radii.
    pub radius_jitter: f32,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            posed_joints: HUMANOID_POSED_JOINTS,
            segments: 12,
            cap_rings: 3,
            ring_spacing: 0.04,
            skin_falloff: 0.02,
            radius_jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemplateMesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub skin_joints: Vec<[u16; 4]>,
    pub skin_weights: Vec<[f32; 4]>,
    pub head: Vec<bool>,
    /// Base color of each joint's capsule.
    pub joint_colors: Vec<[f32; 3]>,
}

impl TemplateMesh {
    pub fn triangle_area(&self, t: usize) -> f32 {
        let [a, b, c] = self.triangles[t].map(|i| Vec3::from_array(self.vertices[i as usize]));
        0.5 * (b - a).cross(c - a).length()
    }
}

fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f32 {
    let ab = b - a;
    let len2 = ab.length_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).length()
}

fn any_perpendicular(d: Vec3) -> Vec3 {
    let helper = if d.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
    d.cross(helper).normalize()
}

/// Appends one capsule's vertices and triangles; returns the vertex range.
fn tessellate_capsule(
    a: Vec3,
    b: Vec3,
    r: f32,
    params: &TemplateParams,
    vertices: &mut Vec<[f32; 3]>,
    triangles: &mut Vec<[u32; 3]>,
) -> std::ops::Range<usize> {
    let axis = b - a;
    let len = axis.length();
    let d = if len > 1e-6 { axis / len } else { Vec3::Y };
    let u = any_perpendicular(d);
    let v = d.cross(u);
    let segs = params.segments.max(3);
    let caps = params.cap_rings.max(1);
    // (axial offset from a, ring radius) for every ring, pole to pole.
    let mut rings: Vec<(f32, f32)> = Vec::new();
    for i in 1..=caps {
        let phi = -PI / 2.0 + i as f32 * (PI / 2.0) / caps as f32;
        rings.push((r * phi.sin(), r * phi.cos()));
    }
    if len > 1e-6 {
        let m = ((len / params.ring_spacing).ceil() as usize).max(1);
        for i in 1..m {
            rings.push((len * i as f32 / m as f32, r));
        }
    }
    let first_top = if len > 1e-6 { 0 } else { 1 };
    for i in first_top..caps {
        let phi = i as f32 * (PI / 2.0) / caps as f32;
        rings.push((len + r * phi.sin(), r * phi.cos()));
    }
    let start = vertices.len();
    let south = start as u32;
    vertices.push((a - d * r).to_array());
    for &(ax, rad) in &rings {
        for s in 0..segs {
            let t = 2.0 * PI * s as f32 / segs as f32;
            let p = a + d * ax + (u * t.cos() + v * t.sin()) * rad;
            vertices.push(p.to_array());
        }
    }
    let north = vertices.len() as u32;
    vertices.push((a + d * (len + r)).to_array());
    let ring = |i: usize, s: usize| south + 1 + (i * segs + s % segs) as u32;
    for s in 0..segs {
        triangles.push([south, ring(0, s + 1), ring(0, s)]);
    }
    for i in 0..rings.len() - 1 {
        for s in 0..segs {
            triangles.push([ring(i, s), ring(i, s + 1), ring(i + 1, s + 1)]);
            triangles.push([ring(i, s), ring(i + 1, s + 1), ring(i + 1, s)]);
        }
    }
    let last = rings.len() - 1;
    for s in 0..segs {
        triangles.push([north, ring(last, s), ring(last, s + 1)]);
    }
    start..vertices.len()
}

/// Articulated capsule humanoid and its skeleton. Each joint owns one capsule;
/// vertex skinning blends the four nearest capsules by surface distance.
pub fn generate_template(params: &TemplateParams, seed: u64) -> Result<(TemplateMesh, Skeleton)> {
    if params.posed_joints > HUMANOID_POSED_JOINTS {
        return Err(Error::Precondition(format!(
            "at most {HUMANOID_POSED_JOINTS} posed joints are available"
        )));
    }
    let n_joints = params.posed_joints + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = &HUMANOID[..n_joints];
    let radii: Vec<f32> = specs
        .iter()
        .map(|s| s.radius * (1.0 + params.radius_jitter * rng.random_range(-1.0f32..1.0)))
        .collect();

    let skeleton = Skeleton {
        joints: specs
            .iter()
            .map(|s| {
                let parent_pos = s.parent.map_or([0.0; 3], |p| HUMANOID[p].pos);
                Joint {
                    parent: s.parent,
                    rest_rotation: [0.0, 0.0, 0.0, 1.0],
                    rest_translation: [
                        s.pos[0] - parent_pos[0],
                        s.pos[1] - parent_pos[1],
                        s.pos[2] - parent_pos[2],
                    ],
                }
            })
            .collect(),
    };

    let mut mesh = TemplateMesh {
        joint_colors: specs.iter().map(|s| s.color).collect(),
        ..Default::default()
    };
    let mut owner = Vec::new();
    for (j, s) in specs.iter().enumerate() {
        let range = tessellate_capsule(
            Vec3::from_array(s.a),
            Vec3::from_array(s.b),
            radii[j],
            params,
            &mut mesh.vertices,
            &mut mesh.triangles,
        );
        owner.extend(std::iter::repeat_n(j, range.len()));
    }

    for (vi, p) in mesh.vertices.iter().enumerate() {
        let p = Vec3::from_array(*p);
        let mut dists: Vec<(f32, usize)> = specs
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let d = point_segment_distance(p, Vec3::from_array(s.a), Vec3::from_array(s.b)) - radii[j];
                (d.max(0.0), j)
            })
            .collect();
        dists.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        dists.truncate(4);
        let d0 = dists[0].0;
        let mut w: Vec<(f32, usize)> = dists
            .iter()
            .map(|&(d, j)| ((-(d - d0) / params.skin_falloff).exp(), j))
            .filter(|&(w, _)| w >= 1e-4)
            .collect();
        let total: f32 = w.iter().map(|x| x.0).sum();
        w.iter_mut().for_each(|x| x.0 /= total);
        let mut joints = [w[0].1 as u16; 4];
        let mut weights = [0f32; 4];
        for (slot, &(wt, j)) in w.iter().enumerate() {
            joints[slot] = j as u16;
            weights[slot] = wt;
        }
        mesh.skin_joints.push(joints);
        mesh.skin_weights.push(weights);
        mesh.head.push(owner[vi] == HEAD_JOINT);
    }
    Ok((mesh, skeleton))
}

/// A point on the mesh surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub triangle: u32,
    pub bary: [f32; 3],
}

/// Area-weighted uniform surface samples.
pub fn sample_surface(mesh: &TemplateMesh, n: usize, seed: u64) -> Vec<SurfaceSample> {
    if n == 0 || mesh.triangles.is_empty() {
        return Vec::new();
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0f64;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t) as f64;
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rng.random::<f64>() * total;
            let t = cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1);
            let r1: f32 = rng.random();
            let r2: f32 = rng.random();
            let s = r1.sqrt();
            SurfaceSample {
                triangle: t as u32,
                bary: [1.0 - s, s * (1.0 - r2), s * r2],
            }
        })
        .collect()
}

/// Position of a surface sample.
pub fn surface_point(mesh: &TemplateMesh, s: &SurfaceSample) -> [f32; 3] {
    let tri = mesh.triangles[s.triangle as usize];
    let mut p = Vec3::ZERO;
    for i in 0..3 {
        p += Vec3::from_array(mesh.vertices[tri[i] as usize]) * s.bary[i];
    }
    p.to_array()
}

/// Gaussians sampled uniformly over the surface, oriented to the triangle's
/// tangent frame, sized by the mean sample spacing, skinned by barycentric
/// interpolation of the vertex weights.
pub fn sample_gaussians(mesh: &TemplateMesh, n: usize, seed: u64) -> NeutralGaussians {
    let samples = sample_surface(mesh, n, seed);
    let mut g = NeutralGaussians::default();
    if samples.is_empty() {
        return g;
    }
    let total_area: f64 = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t) as f64).sum();
    let spacing = (total_area / n as f64).sqrt() as f32;
    let tangent = (0.5 * spacing).ln();
    let normal = (0.1 * spacing).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for s in &samples {
        let tri = mesh.triangles[s.triangle as usize];
        let [a, b, c] = tri.map(|i| Vec3::from_array(mesh.vertices[i as usize]));
        g.positions.push(surface_point(mesh, s));
        let e1 = (b - a).normalize();
        let nrm = (b - a).cross(c - a).normalize();
        let e2 = nrm.cross(e1);
        let q = Quat::from_mat3(&Mat3::from_cols(e1, e2, nrm)).normalize();
        g.rotations.push(q.to_array());
        g.log_scales.push([tangent, tangent, normal]);

        let mut acc: Vec<(u16, f32)> = Vec::with_capacity(12);
        for (vi, &bw) in tri.iter().zip(&s.bary) {
            let joints = mesh.skin_joints[*vi as usize];
            let weights = mesh.skin_weights[*vi as usize];
            for (&j, &w) in joints.iter().zip(&weights) {
                if w * bw > 0.0 {
                    match acc.iter_mut().find(|e| e.0 == j) {
                        Some(e) => e.1 += w * bw,
                        None => acc.push((j, w * bw)),
                    }
                }
            }
        }
        if acc.is_empty() {
            acc.push((mesh.skin_joints[tri[0] as usize][0], 1.0));
        }
        acc.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        acc.truncate(4);
        let total: f32 = acc.iter().map(|e| e.1).sum();
        let mut joints = [acc[0].0; 4];
        let mut weights = [0f32; 4];
        for (slot, &(j, w)) in acc.iter().enumerate() {
            joints[slot] = j;
            weights[slot] = w / total;
        }
        g.skin_joints.push(joints);
        g.skin_weights.push(weights);

        let base = mesh.joint_colors[joints[0] as usize];
        g.colors
            .push(base.map(|c| (c + rng.random_range(-0.04f32..0.04)).clamp(0.0, 1.0)));
        g.opacities.push(0.9);
        g.part_ids.push(0);
    }
    g
}

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Greedy farthest-point sampling from `start`; ties go to the lower index.
pub fn farthest_point_sampling(points: &[[f32; 3]], k: usize, start: usize) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut seeds = vec![start];
    let mut nearest: Vec<f32> = points.iter().map(|p| dist2(p, &points[start])).collect();
    while seeds.len() < k.min(points.len()) {
        let mut best = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = i;
            }
        }
        seeds.push(best);
        let q = points[best];
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &q);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    seeds
}

/// Splits the Gaussians into `n_parts` by nearest farthest-point seed, then
/// reorders them so every part is a contiguous index range. A part is a head
/// part when most of its Gaussians lie nearest to head-labelled vertices.
pub fn partition_body(
    gaussians: &mut NeutralGaussians,
    mesh: &TemplateMesh,
    n_parts: usize,
    seed: u64,
) -> Result<PartitionTable> {
    let n = gaussians.len();
    if n_parts == 0 {
        return Err(Error::Precondition("at least one part is required".into()));
    }
    if n_parts > n {
        return Err(Error::Precondition(format!("{n_parts} parts for {n} Gaussians")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..n);
    let mut seeds = farthest_point_sampling(&gaussians.positions, n_parts, start);
    let mut assignment = vec![0usize; n];
    for _ in 0..=n_parts {
        let seed_pos: Vec<[f32; 3]> = seeds.iter().map(|&s| gaussians.positions[s]).collect();
        let tree = KdTree::new(&seed_pos);
        let mut counts = vec![0usize; n_parts];
        let mut far = vec![(f32::NEG_INFINITY, 0usize); n_parts];
        for (k, p) in gaussians.positions.iter().enumerate() {
            let (best, _) = tree.nearest::<1>(p);
            let part = best[0].1 as usize;
            assignment[k] = part;
            counts[part] += 1;
            if best[0].0 > far[part].0 {
                far[part] = (best[0].0, k);
            }
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        // Re-seed the empty part at the point farthest from its seed within
        // the largest part.
        let largest = (0..n_parts).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        if far[largest].0 <= 0.0 {
            return Err(Error::Precondition(
                "too few distinct positions for the requested parts".into(),
            ));
        }
        seeds[empty] = far[largest].1;
    }
    let mut counts = vec![0usize; n_parts];
    for &a in &assignment {
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Precondition("could not populate every part".into()));
    }

    let head_of_gaussian: Vec<bool> = if mesh.vertices.is_empty() {
        vec![false; n]
    } else {
        let tree = KdTree::new(&mesh.vertices);
        gaussians
            .positions
            .iter()
            .map(|p| mesh.head[tree.nearest::<1>(p).0[0].1 as usize])
            .collect()
    };
    let mut head_votes = vec![0isize; n_parts];
    for (k, &a) in assignment.iter().enumerate() {
        head_votes[a] += if head_of_gaussian[k] { 1 } else { -1 };
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&k| (assignment[k], k));
    gaussians.permute(&order);
    let mut parts = Vec::with_capacity(n_parts);
    let mut start = 0u32;
    for (i, &c) in counts.iter().enumerate() {
        let end = start + c as u32;
        for k in start..end {
            gaussians.part_ids[k as usize] = i as u32;
        }
        parts.push(PartRange {
            gaussian_start: start,
            gaussian_end: end,
            node_start: 0,
            node_end: 0,
            is_head: head_votes[i] > 0,
        });
        start = end;
    }
    Ok(PartitionTable { parts })
}

/// Uniformly samples node Gaussians, resampling until every part holds one,
/// and fills the node ranges of `partitions`. Blendshapes start at zero.
pub fn sample_nodes(
    gaussians: &NeutralGaussians,
    partitions: &mut PartitionTable,
    n_nodes: usize,
    n_blend: usize,
    seed: u64,
) -> Result<NodeSet> {
    let n = gaussians.len();
    let n_parts = partitions.len();
    if n_nodes > n {
        return Err(Error::Precondition(format!("{n_nodes} nodes for {n} Gaussians")));
    }
    if n_nodes < n_parts {
        return Err(Error::Precondition(format!(
            "{n_nodes} nodes cannot cover {n_parts} parts"
        )));
    }
    let part_of = |g: usize| gaussians.part_ids[g] as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..64 {
        chosen = rand::seq::index::sample(&mut rng, n, n_nodes).into_vec();
        let mut covered = vec![false; n_parts];
        chosen.iter().for_each(|&g| covered[part_of(g)] = true);
        if covered.iter().all(|&c| c) {
            break;
        }
    }
    // Force coverage if resampling did not succeed.
    loop {
        let mut per_part = vec![Vec::new(); n_parts];
        for (slot, &g) in chosen.iter().enumerate() {
            per_part[part_of(g)].push(slot);
        }
        let Some(empty) = per_part.iter().position(Vec::is_empty) else {
            break;
        };
        let donor = (0..n_parts)
            .max_by_key(|&i| (per_part[i].len(), std::cmp::Reverse(i)))
            .unwrap();
        let slot = *per_part[donor].last().unwrap();
        let range = partitions.parts[empty].gaussians();
        chosen[slot] = rng.random_range(range);
    }
    chosen.sort_unstable();
    let mut start = 0u32;
    for (i, part) in partitions.parts.iter_mut().enumerate() {
        let count = chosen.iter().filter(|&&g| part_of(g) == i).count() as u32;
        part.node_start = start;
        part.node_end = start + count;
        start += count;
    }
    let gaussian_index: Vec<u32> = chosen.iter().map(|&g| g as u32).collect();
    let (knn_nodes, knn_weights) = knn_table(&gaussians.positions, &gaussian_index);
    Ok(NodeSet {
        blendshapes: vec![0.0; n_nodes * n_blend * 3],
        gaussian_index,
        knn_nodes,
        knn_weights,
    })
}

/// A dense, unfitted avatar: neutral Gaussians on the template, partitions,
/// nodes, skeleton, zero blendshapes and randomly initialized MLPs.
#[derive(Clone, Debug)]
pub struct SynthAvatar {
    pub model: AvatarModel,
    pub mesh: TemplateMesh,
}

pub fn build_synthetic_avatar(config: &ModelConfig, seed: u64) -> Result<SynthAvatar> {
    if config.n_joints == 0 || config.pose_dim != 3 * (config.n_joints - 1) {
        return Err(Error::Precondition(format!(
            "pose_dim {} does not match {} joints",
            config.pose_dim, config.n_joints
        )));
    }
    let params = TemplateParams {
        posed_joints: config.n_joints - 1,
        ..TemplateParams::default()
    };
    let (mesh, skeleton) = generate_template(&params, seed)?;
    let mut neutral = sample_gaussians(&mesh, config.n_gaussians, seed.wrapping_add(1));
    let mut partitions = partition_body(&mut neutral, &mesh, config.n_parts, seed.wrapping_add(2))?;
    let nodes = sample_nodes(
        &neutral,
        &mut partitions,
        config.n_nodes,
        config.n_blend,
        seed.wrapping_add(3),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let shapes = config.mlp_shapes();
    let mlp = MlpWeights {
        parts: (0..config.n_parts).map(|_| init_part_mlp(&shapes, &mut rng)).collect(),
    };
    let mut cfg = config.clone();
    cfg.n_pruned_keep = config.n_pruned_keep.min(config.n_gaussians);
    let model = AvatarModel {
        config: cfg,
        blendshapes: AttributeBlendshapes::Dense(vec![0.0; config.n_gaussians * config.n_blend * BLEND_COMPONENTS]),
        neutral,
        partitions,
        mlp,
        nodes,
        skeleton,
        pose_basis: None,
    };
    Ok(SynthAvatar { model, mesh })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAmplitudes {
    pub rotation: f32,
    pub scale: f32,
    pub color: f32,
    pub position: f32,
}

/// Settings of the analytic corrective generator; the per-part generators
/// are derived from these and the model geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub seed: u64,
    /// Latent factors per part, at most `N_B`.
    pub factors: usize,
    pub static_fraction: f64,
    /// Noise amplitude relative to the signal amplitude.
    pub noise: f32,
    pub amplitude: OracleAmplitudes,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            seed: 0,
            factors: 6,
            static_fraction: 0.9,
            noise: 0.1,
            amplitude: OracleAmplitudes {
                rotation: 0.04,
                scale: 0.12,
                color: 0.1,
                position: 0.006,
            },
        }
    }
}

impl OracleParams {
    fn component_amplitude(&self, c: usize) -> f32 {
        match c {
            0..4 => self.amplitude.rotation,
            4..7 => self.amplitude.scale,
            7..10 => self.amplitude.color,
            _ => self.amplitude.position,
        }
    }
}

#[derive(Clone, Debug)]
struct Factor {
    u: Vec<f32>,
    omega: f32,
    u2: Vec<f32>,
    omega2: f32,
    beta: f32,
}

impl Factor {
    fn eval(&self, x: &[f32]) -> f32 {
        let a: f32 = self.u.iter().zip(x).map(|(u, v)| u * v).sum();
        let a2: f32 = self.u2.iter().zip(x).map(|(u, v)| u * v).sum();
        (self.omega * a).sin() + self.beta * (1.0 - (self.omega2 * a2).cos())
    }
}

#[derive(Clone, Debug)]
struct PartGenerator {
    inputs: Vec<usize>,
    factors: Vec<Factor>,
    start: usize,
    /// `[n_gaussians_in_part, factors, ORACLE_COMPONENTS]`, envelope included.
    loadings: Vec<f32>,
    envelope: Vec<f32>,
}

/// Analytic pose-dependent correctives. Within a part the correctives are
/// `sum_l phi_l(pose) L_l(x)` with spatially smooth loadings, so the part's
/// corrective matrix has rank at most `factors` before noise. Every term
/// vanishes at the zero pose.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub params: OracleParams,
    n_gaussians: usize,
    parts: Vec<Option<PartGenerator>>,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic value with zero mean and unit variance.
fn hash_unit(h: u64) -> f32 {
    let u = (mix64(h) >> 40) as f32 / (1u64 << 24) as f32;
    (2.0 * u - 1.0) * 3f32.sqrt()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    loop {
        let v: Vec<f32> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Oracle {
    pub fn new(params: OracleParams, model: &AvatarModel) -> Result<Self> {
        let c = &model.config;
        if params.factors > c.n_blend {
            return Err(Error::Precondition(format!(
                "{} oracle factors exceed N_B = {}",
                params.factors, c.n_blend
            )));
        }
        if !(0.0..=1.0).contains(&params.static_fraction) || !params.noise.is_finite() {
            return Err(Error::Precondition("oracle parameters out of range".into()));
        }
        let g = &model.neutral;
        let n_parts = model.partitions.len();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut order: Vec<usize> = (0..n_parts).collect();
        order.shuffle(&mut rng);
        let mut n_static = (params.static_fraction * n_parts as f64).round() as usize;
        if params.static_fraction < 1.0 && n_static == n_parts && n_parts > 0 {
            n_static -= 1;
        }
        let mut is_static = vec![false; n_parts];
        order[..n_static].iter().for_each(|&i| is_static[i] = true);

        let mut parts = Vec::with_capacity(n_parts);
        for (i, part) in model.partitions.parts.iter().enumerate() {
            let mut prng = ChaCha8Rng::seed_from_u64(mix64(params.seed ^ (i as u64 + 1)));
            let range = part.gaussians();
            if is_static[i] || range.is_empty() {
                parts.push(None);
                continue;
            }
            // Dominant posed joints by total skin weight.
            let mut weight = vec![0f32; c.n_joints.max(1)];
            for k in range.clone() {
                for (&j, &w) in g.skin_joints[k].iter().zip(&g.skin_weights[k]) {
                    if (j as usize) < weight.len() {
                        weight[j as usize] += w;
                    }
                }
            }
            let mut joints: Vec<usize> = (1..weight.len()).filter(|&j| weight[j] > 0.0).collect();
            joints.sort_by(|&a, &b| weight[b].total_cmp(&weight[a]).then(a.cmp(&b)));
            joints.truncate(2);
            let mut inputs: Vec<usize> = joints.iter().flat_map(|&j| 3 * (j - 1)..3 * j).collect();
            if part.is_head {
                inputs.extend(c.pose_dim..c.pose_dim + c.expr_dim);
            }
            if inputs.is_empty() {
                parts.push(None);
                continue;
            }
            let factors: Vec<Factor> = (0..params.factors)
                .map(|_| Factor {
                    u: random_unit(&mut prng, inputs.len()),
                    omega: prng.random_range(0.8..1.6),
                    u2: random_unit(&mut prng, inputs.len()),
                    omega2: prng.random_range(0.8..1.6),
                    beta: prng.random_range(0.2..0.6),
                })
                .collect();
            let n_g = range.len();
            let mut center = Vec3::ZERO;
            for k in range.clone() {
                center += Vec3::from_array(g.positions[k]);
            }
            center /= n_g as f32;
            let rho2 = range
                .clone()
                .map(|k| (Vec3::from_array(g.positions[k]) - center).length_squared())
                .sum::<f32>()
                / n_g as f32;
            let rho = rho2.sqrt().max(1e-3);
            let wave = 2.0 * PI / (4.0 * rho);
            let freqs: Vec<Vec3> = (0..params.factors)
                .map(|_| Vec3::from_slice(&random_unit(&mut prng, 3)) * wave)
                .collect();
            let phases: Vec<f32> = (0..params.factors * ORACLE_COMPONENTS)
                .map(|_| prng.random_range(0.0..2.0 * PI))
                .collect();
            let mut loadings = Vec::with_capacity(n_g * params.factors * ORACLE_COMPONENTS);
            let mut envelope = Vec::with_capacity(n_g);
            for k in range.clone() {
                let x = Vec3::from_array(g.positions[k]);
                let env = (-(x - center).length_squared() / (2.0 * rho2.max(1e-6))).exp();
                envelope.push(env);
                for (l, f) in freqs.iter().enumerate() {
                    let base = f.dot(x - center);
                    for comp in 0..ORACLE_COMPONENTS {
                        let amp = params.component_amplitude(comp);
                        loadings.push(env * amp * (base + phases[l * ORACLE_COMPONENTS + comp]).cos());
                    }
                }
            }
            parts.push(Some(PartGenerator {
                inputs,
                factors,
                start: range.start,
                loadings,
                envelope,
            }));
        }
        Ok(Self {
            params,
            n_gaussians: g.len(),
            parts,
        })
    }

    pub fn is_static(&self, part: usize) -> bool {
        self.parts[part].is_none()
    }

    /// Corrective rows `[r(4), s(3), c(3), x(3)]` for every Gaussian of a part.
    pub fn part_rows(&self, pose: &Pose, part: usize, n_part_gaussians: usize) -> Vec<[f32; ORACLE_COMPONENTS]> {
        let mut rows = vec![[0f32; ORACLE_COMPONENTS]; n_part_gaussians];
        let Some(gen) = &self.parts[part] else {
            return rows;
        };
        let full = pose.concat();
        let x: Vec<f32> = gen.inputs.iter().map(|&i| full[i]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm == 0.0 {
            return rows;
        }
        let phi: Vec<f32> = gen.factors.iter().map(|f| f.eval(&x)).collect();
        let gate = norm.tanh() * self.params.noise;
        let mut pose_hash = mix64(self.params.seed ^ 0x5bd1_e995 ^ part as u64);
        for v in &x {
            pose_hash = mix64(pose_hash ^ v.to_bits() as u64);
        }
        let nf = gen.factors.len();
        for (local, row) in rows.iter_mut().enumerate() {
            let load = &gen.loadings[local * nf * ORACLE_COMPONENTS..(local + 1) * nf * ORACLE_COMPONENTS];
            for (l, &p) in phi.iter().enumerate() {
                for c in 0..ORACLE_COMPONENTS {
                    row[c] += p * load[l * ORACLE_COMPONENTS + c];
                }
            }
            if gate != 0.0 {
                let k = (gen.start + local) as u64;
                for (c, r) in row.iter_mut().enumerate() {
                    let h = hash_unit(pose_hash ^ mix64(k * ORACLE_COMPONENTS as u64 + c as u64));
                    *r += gate * self.params.component_amplitude(c) * gen.envelope[local] * h;
                }
            }
        }
        rows
    }

    /// Correctives of every Gaussian for `pose`.
    pub fn correctives(&self, model: &AvatarModel, pose: &Pose) -> Correctives {
        let mut out = Correctives::zeros(self.n_gaussians);
        for (i, part) in model.partitions.parts.iter().enumerate() {
            if self.parts[i].is_none() {
                continue;
            }
            let range = part.gaussians();
            let rows = self.part_rows(pose, i, range.len());
            for (k, row) in range.zip(rows) {
                out.rotation[k].copy_from_slice(&row[0..4]);
                out.scale[k].copy_from_slice(&row[4..7]);
                out.color[k].copy_from_slice(&row[7..10]);
                out.position[k].copy_from_slice(&row[10..13]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "style")]
pub enum PoseStyle {
    Random,
    Walk { period: usize },
    Talk { period: usize },
}

/// Standard deviation of the random-style axis-angle components (rad).
pub const RANDOM_POSE_STD: f32 = 0.2;
/// Standard deviation of the random-style expression coefficients.
pub const RANDOM_EXPRESSION_STD: f32 = 0.5;

/// Axis-angle component index of joint `j` (1-based posed joint), axis `a`.
fn comp(j: usize, a: usize) -> usize {
    3 * (j - 1) + a
}

/// Deterministic pose sequences: i.i.d. clamped random poses, or periodic
/// walking / talking cycles.
pub fn generate_pose_sequence(n: usize, seed: u64, style: PoseStyle, pose_dim: usize, expr_dim: usize) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clamp = |v: f32| v.clamp(-PI, PI);
    match style {
        PoseStyle::Random => {
            let body = Normal::new(0.0, RANDOM_POSE_STD).unwrap();
            let expr = Normal::new(0.0, RANDOM_EXPRESSION_STD).unwrap();
            (0..n)
                .map(|_| Pose {
                    theta_p: (0..pose_dim).map(|_| clamp(body.sample(&mut rng))).collect(),
                    theta_e: (0..expr_dim).map(|_| clamp(expr.sample(&mut rng))).collect(),
                })
                .collect()
        }
        PoseStyle::Walk { period } | PoseStyle::Talk { period } => {
            let talk = matches!(style, PoseStyle::Talk { .. });
            // (component, amplitude, harmonic, phase, offset)
            let mut tracks: Vec<(usize, f32, f32, f32, f32)> = Vec::new();
            let phase0 = rng.random_range(0.0..2.0 * PI);
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.9f32..1.1);
            if talk {
                tracks.push((comp(4, 0), 0.08 * jitter(&mut rng), 1.0, phase0, 0.0));
                tracks.push((comp(5, 1), 0.12 * jitter(&mut rng), 2.0, phase0 + 1.0, 0.0));
                tracks.push((comp(5, 0), 0.06 * jitter(&mut rng), 3.0, phase0 + 2.0, 0.0));
            } else {
                let swing = 0.45 * jitter(&mut rng);
                tracks.push((comp(6, 0), swing, 1.0, phase0, 0.0));
                tracks.push((comp(10, 0), swing, 1.0, phase0 + PI, 0.0));
                let knee = 0.3 * jitter(&mut rng);
                tracks.push((comp(7, 0), -knee, 1.0, phase0 + PI / 2.0, knee));
                tracks.push((comp(11, 0), -knee, 1.0, phase0 + 3.0 * PI / 2.0, knee));
                let arm = 0.3 * jitter(&mut rng);
                tracks.push((comp(15, 0), arm, 1.0, phase0 + PI, 0.0));
                tracks.push((comp(19, 0), arm, 1.0, phase0, 0.0));
                let elbow = 0.15 * jitter(&mut rng);
                tracks.push((comp(16, 1), elbow, 1.0, phase0, elbow));
                tracks.push((comp(20, 1), -elbow, 1.0, phase0, -elbow));
                tracks.push((comp(1, 1), 0.05 * jitter(&mut rng), 1.0, phase0, 0.0));
                tracks.push((comp(3, 2), 0.03 * jitter(&mut rng), 2.0, phase0, 0.0));
            }
            let expr_tracks: Vec<(f32, f32, f32)> = (0..expr_dim)
                .map(|i| {
                    if talk {
                        (
                            0.6 * jitter(&mut rng),
                            (1 + i % 3) as f32,
                            rng.random_range(0.0..2.0 * PI),
                        )
                    } else {
                        (0.0, 1.0, 0.0)
                    }
                })
                .collect();
            let period = period.max(1) as f64;
            (0..n)
                .map(|t| {
                    let base = 2.0 * std::f64::consts::PI * (t as f64 % period) / period;
                    let mut theta_p = vec![0f32; pose_dim];
                    for &(c, amp, harmonic, phase, offset) in &tracks {
                        if c < pose_dim {
                            let v = amp as f64 * (harmonic as f64 * base + phase as f64).sin() + offset as f64;
                            theta_p[c] = clamp(v as f32);
                        }
                    }
                    let theta_e = expr_tracks
                        .iter()
                        .map(|&(amp, h, ph)| clamp((amp as f64 * (h as f64 * base + ph as f64).sin()) as f32))
                        .collect();
                    Pose { theta_p, theta_e }
                })
                .collect()
        }
    }
}

/// Fills every stored blendshape coefficient with uniform values in
/// `[-scale, scale]`, for exercising decode paths without fitting.
pub fn randomize_blendshapes(model: &mut AvatarModel, scale: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |v: &mut [f32]| v.iter_mut().for_each(|x| *x = rng.random_range(-scale..=scale));
    match &mut model.blendshapes {
        AttributeBlendshapes::Dense(d) => fill(d),
        AttributeBlendshapes::Sparse(s) => s.attributes.iter_mut().for_each(|a| fill(&mut a.coeffs)),
    }
    fill(&mut model.nodes.blendshapes);
}

/// A small avatar with random blendshapes for tests and benchmarks.
pub fn random_avatar(config: &ModelConfig, seed: u64) -> Result<AvatarModel> {
    let mut model = build_synthetic_avatar(config, seed)?.model;
    randomize_blendshapes(&mut model, 0.05, seed ^ 0xb1e5);
    Ok(model)
}

/// `n` random Gaussians in front of a square camera at the origin looking
/// down +z, for renderer cross-checks.
pub fn random_scene(n: usize, size: u32, seed: u64) -> (PosedGaussians, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = PosedGaussians::default();
    for _ in 0..n {
        g.positions.push([
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
            rng.random_range(2.0..6.0),
        ]);
        let q = Quat::from_xyzw(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        g.rotations.push(q.to_array());
        g.scales.push([(); 3].map(|_| rng.random_range(-4.5f32..-1.2).exp()));
        g.colors.push([(); 3].map(|_| rng.random_range(0.0..1.0)));
        g.opacities.push(rng.random_range(0.05..1.0));
    }
    let cam = Camera::look_at([0.0; 3], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], 0.8, size, size);
    (g, cam)
}
