use std::time::Instant;

use bytemuck::{Pod, Zeroable};
use lbsplat_core::skinning::skinning_rows;
use lbsplat_core::{
    pose_to_joint_transforms, Attribute, AttributeBlendshapes, AvatarModel, Camera, Image, Pose, PosedGaussians,
    StageTimings, BLEND_COMPONENTS,
};

use crate::context::{dispatch, groups, WG};
use crate::{Gpu, GpuError, Result};

const MAX_WIDTH: usize = 128;

#[repr(C)]
#[derive(Clone, Copy, Pod, Zeroable)]
struct DecodeParams {
    n_gaussians: u32,
    n_parts: u32,
    n_blend: u32,
    n_nodes: u32,
    input_dim: u32,
    pose_dim: u32,
    hidden: u32,
    layers: u32,
    per_part: u32,
    attribute: u32,
    retained: u32,
    _pad: u32,
}

struct Params {
    mlp: wgpu::BindGroup,
    dense: wgpu::BindGroup,
    nodes: wgpu::BindGroup,
    interpolate: wgpu::BindGroup,
    skin: wgpu::BindGroup,
}

enum Blend {
    Dense(wgpu::BindGroup),
    /// Shared group 1, then per attribute: params with `attribute` and
    /// `retained` set, group 2, retained count.
    Sparse(wgpu::BindGroup, Vec<(wgpu::BindGroup, wgpu::BindGroup, u32)>),
}

/// An avatar resident on the GPU. Each [`GpuAvatar::decode`] leaves the posed
/// Gaussians in device memory for [`GpuAvatar::render`] or readback.
pub struct GpuAvatar<'a> {
    gpu: &'a Gpu,
    n: u32,
    n_parts: u32,
    n_nodes: u32,
    pose_dim: usize,
    expr_dim: usize,
    skeleton: lbsplat_core::Skeleton,
    // Auto layouts tie a bind group to one pipeline, hence one per kernel.
    params: Params,
    pose_input: wgpu::Buffer,
    joints: wgpu::Buffer,
    corr: wgpu::Buffer,
    posed: wgpu::Buffer,
    mlp_bg: wgpu::BindGroup,
    blend: Blend,
    nodes_bg: wgpu::BindGroup,
    interp_bg: wgpu::BindGroup,
    skin_bg: wgpu::BindGroup,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| GpuError::Unsupported(format!("{what} = {v} does not fit in u32")))
}

impl<'a> GpuAvatar<'a> {
    pub fn new(gpu: &'a Gpu, model: &AvatarModel) -> Result<Self> {
        let c = &model.config;
        let n = model.neutral.len();
        if [c.input_dim(), c.hidden_width, c.n_blend]
            .iter()
            .any(|&w| w > MAX_WIDTH)
        {
            return Err(GpuError::Unsupported(format!("MLP widths above {MAX_WIDTH}")));
        }
        let shapes = c.mlp_shapes();
        let mut weights = Vec::new();
        for (i, part) in model.mlp.parts.iter().enumerate() {
            let got: Vec<_> = part.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
            if got != shapes {
                return Err(GpuError::Unsupported(format!(
                    "part {i} MLP deviates from the configured shape"
                )));
            }
            for l in &part.layers {
                weights.extend_from_slice(&l.weights);
                weights.extend_from_slice(&l.bias);
            }
        }
        if model.mlp.parts.len() != c.n_parts || model.partitions.len() != c.n_parts {
            return Err(lbsplat_core::Error::Shape("part count does not match the configuration".into()).into());
        }
        let per_part: usize = shapes.iter().map(|&(i, o)| i * o + o).sum();
        let n_nodes = model.nodes.len();
        let base = DecodeParams {
            n_gaussians: u32_of(n, "n_gaussians")?,
            n_parts: u32_of(c.n_parts, "n_parts")?,
            n_blend: u32_of(c.n_blend, "n_blend")?,
            n_nodes: u32_of(n_nodes, "n_nodes")?,
            input_dim: u32_of(c.input_dim(), "input_dim")?,
            pose_dim: u32_of(c.pose_dim, "pose_dim")?,
            hidden: u32_of(c.hidden_width, "hidden")?,
            layers: u32_of(c.hidden_layers, "layers")?,
            per_part: u32_of(per_part, "per_part")?,
            attribute: 0,
            retained: 0,
            _pad: 0,
        };
        let p = &gpu.pipelines;
        let params = gpu.uniform("decode params", &base);
        let params = Params {
            mlp: gpu.bind(&p.mlp, 0, &[(0, &params)]),
            dense: gpu.bind(&p.combine_dense, 0, &[(0, &params)]),
            nodes: gpu.bind(&p.nodes, 0, &[(0, &params)]),
            interpolate: gpu.bind(&p.interpolate, 0, &[(0, &params)]),
            skin: gpu.bind(&p.skin, 0, &[(0, &params)]),
        };

        let mlp_weights = gpu.storage("mlp weights", bytemuck::cast_slice(&weights));
        let heads: Vec<u32> = model.partitions.parts.iter().map(|p| p.is_head as u32).collect();
        let part_head = gpu.storage("part head", bytemuck::cast_slice(&heads));
        let pose_input = gpu.scratch("pose input", c.input_dim() as u64 * 4);
        let features = gpu.scratch("features", (c.n_parts * c.n_blend) as u64 * 4);
        let mlp_bg = gpu.bind(
            &p.mlp,
            1,
            &[(0, &mlp_weights), (1, &part_head), (2, &pose_input), (3, &features)],
        );

        let part_ids = gpu.storage("part ids", bytemuck::cast_slice(&model.neutral.part_ids));
        let corr = gpu.scratch("correctives", n as u64 * 64);
        let blend = match &model.blendshapes {
            AttributeBlendshapes::Dense(coeffs) => {
                if coeffs.len() != n * c.n_blend * BLEND_COMPONENTS {
                    return Err(
                        lbsplat_core::Error::Shape("dense blendshape buffer has the wrong length".into()).into(),
                    );
                }
                let buf = gpu.storage("dense blendshapes", bytemuck::cast_slice(coeffs));
                let bg = gpu.bind(
                    &p.combine_dense,
                    1,
                    &[(0, &buf), (1, &part_ids), (2, &features), (3, &corr)],
                );
                Blend::Dense(bg)
            }
            AttributeBlendshapes::Sparse(sparse) => {
                let mut passes = Vec::new();
                for a in Attribute::ALL {
                    let sa = sparse.get(a);
                    if sa.coeffs.len() != sa.indices.len() * c.n_blend * a.components()
                        || sa.indices.iter().any(|&k| k as usize >= n)
                    {
                        return Err(
                            lbsplat_core::Error::Shape(format!("sparse {a:?} blendshapes are malformed")).into(),
                        );
                    }
                    let retained = u32_of(sa.indices.len(), "retained")?;
                    let params = gpu.uniform(
                        "sparse params",
                        &DecodeParams {
                            attribute: a.index() as u32,
                            retained,
                            ..base
                        },
                    );
                    let indices = gpu.storage("sparse indices", bytemuck::cast_slice(&sa.indices));
                    let coeffs = gpu.storage("sparse coeffs", bytemuck::cast_slice(&sa.coeffs));
                    passes.push((
                        gpu.bind(&p.combine_sparse, 0, &[(0, &params)]),
                        gpu.bind(&p.combine_sparse, 2, &[(0, &indices), (1, &coeffs)]),
                        retained,
                    ));
                }
                let combine = gpu.bind(&p.combine_sparse, 1, &[(1, &part_ids), (2, &features), (3, &corr)]);
                Blend::Sparse(combine, passes)
            }
        };

        if model.nodes.blendshapes.len() != n_nodes * c.n_blend * 3 || model.nodes.knn_nodes.len() != n {
            return Err(lbsplat_core::Error::Shape("node set does not match the model".into()).into());
        }
        let mut node_parts = vec![0u32; n_nodes];
        for (i, part) in model.partitions.parts.iter().enumerate() {
            for k in part.nodes() {
                node_parts[k] = i as u32;
            }
        }
        let node_coeffs = gpu.storage("node blendshapes", bytemuck::cast_slice(&model.nodes.blendshapes));
        let node_parts = gpu.storage("node parts", bytemuck::cast_slice(&node_parts));
        let node_offsets = gpu.scratch("node offsets", n_nodes as u64 * 16);
        let nodes_bg = gpu.bind(
            &p.nodes,
            1,
            &[(0, &node_coeffs), (1, &node_parts), (2, &features), (3, &node_offsets)],
        );
        let knn: Vec<[u32; 8]> = model
            .nodes
            .knn_nodes
            .iter()
            .zip(&model.nodes.knn_weights)
            .map(|(i, w)| [i[0], i[1], i[2], 0, w[0].to_bits(), w[1].to_bits(), w[2].to_bits(), 0])
            .collect();
        let knn = gpu.storage("knn", bytemuck::cast_slice(&knn));
        let interp_bg = gpu.bind(&p.interpolate, 1, &[(0, &knn), (1, &node_offsets), (2, &corr)]);

        let g = &model.neutral;
        let neutral: Vec<[f32; 16]> = (0..n)
            .map(|k| {
                let (p, r, s, col) = (g.positions[k], g.rotations[k], g.log_scales[k], g.colors[k]);
                [
                    p[0],
                    p[1],
                    p[2],
                    g.opacities[k],
                    r[0],
                    r[1],
                    r[2],
                    r[3],
                    s[0],
                    s[1],
                    s[2],
                    0.0,
                    col[0],
                    col[1],
                    col[2],
                    0.0,
                ]
            })
            .collect();
        let skin: Vec<[u32; 8]> = g
            .skin_joints
            .iter()
            .zip(&g.skin_weights)
            .map(|(j, w)| {
                let j = j.map(u32::from);
                [
                    j[0],
                    j[1],
                    j[2],
                    j[3],
                    w[0].to_bits(),
                    w[1].to_bits(),
                    w[2].to_bits(),
                    w[3].to_bits(),
                ]
            })
            .collect();
        if skin.len() != n
            || g.skin_joints
                .iter()
                .flatten()
                .any(|&j| j as usize >= model.skeleton.len())
        {
            return Err(lbsplat_core::Error::Shape("skinning table does not match the skeleton".into()).into());
        }
        let neutral = gpu.storage("neutral", bytemuck::cast_slice(&neutral));
        let skin = gpu.storage("skin", bytemuck::cast_slice(&skin));
        let joints = gpu.scratch("joints", model.skeleton.len() as u64 * 48);
        let posed = gpu.scratch("posed", n as u64 * 64);
        let skin_bg = gpu.bind(
            &p.skin,
            1,
            &[(0, &neutral), (1, &skin), (2, &corr), (3, &joints), (4, &posed)],
        );

        Ok(Self {
            gpu,
            n: base.n_gaussians,
            n_parts: base.n_parts,
            n_nodes: base.n_nodes,
            pose_dim: c.pose_dim,
            expr_dim: c.expr_dim,
            skeleton: model.skeleton.clone(),
            params,
            pose_input,
            joints,
            corr,
            posed,
            mlp_bg,
            blend,
            nodes_bg,
            interp_bg,
            skin_bg,
        })
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Decodes `pose` into the device-resident posed Gaussians.
    pub fn decode(&self, pose: &Pose) -> Result<StageTimings> {
        if !pose.is_finite() {
            return Err(lbsplat_core::Error::NonFinitePose.into());
        }
        if pose.theta_p.len() != self.pose_dim || pose.theta_e.len() != self.expr_dim {
            return Err(lbsplat_core::Error::Shape(format!(
                "pose is {}+{}, model expects {}+{}",
                pose.theta_p.len(),
                pose.theta_e.len(),
                self.pose_dim,
                self.expr_dim
            ))
            .into());
        }
        let gpu = self.gpu;
        let p = &gpu.pipelines;
        let mut timings = StageTimings::default();

        let t = Instant::now();
        gpu.queue
            .write_buffer(&self.pose_input, 0, bytemuck::cast_slice(&pose.concat()));
        let mut enc = gpu.encoder();
        dispatch(
            &mut enc,
            &p.mlp,
            &[&self.params.mlp, &self.mlp_bg],
            groups(self.n_parts, 64)?,
            1,
        );
        timings.mlp_ms = gpu.submit_wait(enc, t)?;

        let t = Instant::now();
        let mut enc = gpu.encoder();
        let g = groups(self.n, WG)?;
        match &self.blend {
            Blend::Dense(bg) => dispatch(&mut enc, &p.combine_dense, &[&self.params.dense, bg], g, 1),
            Blend::Sparse(combine, passes) => {
                enc.clear_buffer(&self.corr, 0, None);
                for (params, group2, retained) in passes {
                    dispatch(
                        &mut enc,
                        &p.combine_sparse,
                        &[params, combine, group2],
                        groups(*retained, WG)?,
                        1,
                    );
                }
            }
        }
        dispatch(
            &mut enc,
            &p.nodes,
            &[&self.params.nodes, &self.nodes_bg],
            groups(self.n_nodes, WG)?,
            1,
        );
        dispatch(
            &mut enc,
            &p.interpolate,
            &[&self.params.interpolate, &self.interp_bg],
            g,
            1,
        );
        timings.blendshape_ms = gpu.submit_wait(enc, t)?;

        let t = Instant::now();
        let transforms = pose_to_joint_transforms(&self.skeleton, &pose.theta_p)?;
        let rows = skinning_rows(&transforms);
        gpu.queue.write_buffer(&self.joints, 0, bytemuck::cast_slice(&rows));
        let mut enc = gpu.encoder();
        dispatch(&mut enc, &p.skin, &[&self.params.skin, &self.skin_bg], g, 1);
        timings.lbs_ms = gpu.submit_wait(enc, t)?;
        Ok(timings)
    }

    /// Copies the posed Gaussians of the last decode back to the host.
    pub fn read_posed(&self) -> Result<PosedGaussians> {
        let bytes = self.gpu.read(&self.posed, self.n as u64 * 64)?;
        let rows: &[[f32; 16]] = bytemuck::cast_slice(&bytes);
        let mut out = PosedGaussians::default();
        for r in rows {
            out.positions.push([r[0], r[1], r[2]]);
            out.opacities.push(r[3]);
            out.rotations.push([r[4], r[5], r[6], r[7]]);
            out.scales.push([r[8], r[9], r[10]]);
            out.colors.push([r[12], r[13], r[14]]);
        }
        Ok(out)
    }

    /// Decode and render one frame entirely on the GPU.
    pub fn render(&self, pose: &Pose, cam: &Camera) -> Result<(Image, StageTimings)> {
        cam.check()?;
        let mut timings = self.decode(pose)?;
        let image = self.gpu.render_device(&self.posed, self.n, cam, &mut timings)?;
        Ok((image, timings))
    }
}
