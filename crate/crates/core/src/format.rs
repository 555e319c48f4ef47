//! AVTR binary container.
//!
//! ```text
//! "AVTR" | version u32 | endianness u8 (0 = little) | section count u16
//! | section table: (id u16, offset u64, length u64, crc32 u32) ...
//! | section payloads
//! ```
//!
//! All multi-byte values are little-endian. Section ids: 1 config,
//! 2 neutral, 3 partitions, 4 mlp, 5 blendshapes, 6 nodes, 7 skeleton,
//! 8 pose basis. Real values are float32, or float16 when the container is
//! quantized (recorded in the config section). Every index array is preceded
//! by a width byte (2 or 4); quantized containers use 16-bit indices whenever
//! the index domain fits.
//!
//! MLP section layout: parts back to back, each part's layers in order, each
//! layer as row-major `[out, in]` weights followed by `out` biases. Part `p`
//! therefore starts at real offset `p * params_per_part`, which is also the
//! offset table used by the GPU decode buffer.
//!
//! The node interpolation table is a function of Gaussian positions and the
//! node list, so it is rebuilt on load rather than stored. Per-Gaussian part
//! ids are likewise implied by the partition ranges.

use serde::Serialize;

use crate::error::{Error, ParseErrorKind, Result};
use crate::model::{
    Attribute, AttributeBlendshapes, AvatarModel, DenseLayer, Joint, MlpWeights, ModelConfig, NeutralGaussians,
    NodeSet, PartMlp, PartRange, PartitionTable, PoseBasis, Precision, Skeleton, SparseAttribute, SparseBlendshapes,
    BLEND_COMPONENTS,
};
use crate::quant::to_f16;
use crate::validate::validate;

pub const MAGIC: &[u8; 4] = b"AVTR";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 0;
const TABLE_ENTRY_BYTES: usize = 2 + 8 + 8 + 4;
const PREAMBLE_BYTES: usize = 4 + 4 + 1 + 2;

pub mod section {
    pub const CONFIG: u16 = 1;
    pub const NEUTRAL: u16 = 2;
    pub const PARTITIONS: u16 = 3;
    pub const MLP: u16 = 4;
    pub const BLENDSHAPES: u16 = 5;
    pub const NODES: u16 = 6;
    pub const SKELETON: u16 = 7;
    pub const POSE_BASIS: u16 = 8;

    pub fn name(id: u16) -> &'static str {
        match id {
            CONFIG => "config",
            NEUTRAL => "neutral",
            PARTITIONS => "partitions",
            MLP => "mlp",
            BLENDSHAPES => "blendshapes",
            NODES => "nodes",
            SKELETON => "skeleton",
            POSE_BASIS => "pose-basis",
            _ => "unknown",
        }
    }
}

const DENSE: u8 = 0;
const SPARSE: u8 = 1;

/// Byte accounting of a quantized container, by content category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SizeReport {
    /// Preamble, section table, config and the small per-array headers.
    pub header: u64,
    pub neutral_attributes: u64,
    pub blendshapes: u64,
    pub node_blendshapes: u64,
    pub mlp_weights: u64,
    /// Skinning joints and weights plus the skeleton.
    pub skinning: u64,
    pub indices: u64,
    pub pose_basis: u64,
    pub total: u64,
}

impl SizeReport {
    pub fn sections(&self) -> [(&'static str, u64); 8] {
        [
            ("header", self.header),
            ("neutral_attributes", self.neutral_attributes),
            ("blendshapes", self.blendshapes),
            ("node_blendshapes", self.node_blendshapes),
            ("mlp_weights", self.mlp_weights),
            ("skinning", self.skinning),
            ("indices", self.indices),
            ("pose_basis", self.pose_basis),
        ]
    }

    fn add(&mut self, cat: Category, n: u64) {
        let slot = match cat {
            Category::Header => &mut self.header,
            Category::Neutral => &mut self.neutral_attributes,
            Category::Blendshapes => &mut self.blendshapes,
            Category::NodeBlendshapes => &mut self.node_blendshapes,
            Category::Mlp => &mut self.mlp_weights,
            Category::Skinning => &mut self.skinning,
            Category::Indices => &mut self.indices,
            Category::PoseBasis => &mut self.pose_basis,
        };
        *slot += n;
        self.total += n;
    }
}

#[derive(Clone, Copy)]
enum Category {
    Header,
    Neutral,
    Blendshapes,
    NodeBlendshapes,
    Mlp,
    Skinning,
    Indices,
    PoseBasis,
}

/// Index width in bytes for values in `0..=max_value`.
fn index_width(max_value: u64, quantize: bool) -> u8 {
    if quantize && max_value <= u16::MAX as u64 {
        2
    } else {
        4
    }
}

struct SectionWriter<'r> {
    id: u16,
    buf: Vec<u8>,
    quantize: bool,
    report: &'r mut SizeReport,
}

impl SectionWriter<'_> {
    fn bytes(&mut self, b: &[u8], cat: Category) {
        self.buf.extend_from_slice(b);
        self.report.add(cat, b.len() as u64);
    }

    fn u8(&mut self, v: u8, cat: Category) {
        self.bytes(&[v], cat);
    }

    fn u32(&mut self, v: u32, cat: Category) {
        self.bytes(&v.to_le_bytes(), cat);
    }

    fn reals<'a>(&mut self, vals: impl IntoIterator<Item = &'a f32>, cat: Category) -> Result<()> {
        let start = self.buf.len();
        if self.quantize {
            for &v in vals {
                let h = to_f16(v).ok_or_else(|| Error::Serialize {
                    section: section::name(self.id),
                    message: format!("value {v} is outside the finite float16 range"),
                })?;
                self.buf.extend_from_slice(&h.to_bits().to_le_bytes());
            }
        } else {
            for &v in vals {
                if !v.is_finite() {
                    return Err(Error::Serialize {
                        section: section::name(self.id),
                        message: format!("non-finite value {v}"),
                    });
                }
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let n = (self.buf.len() - start) as u64;
        self.report.add(cat, n);
        Ok(())
    }

    fn indices(&mut self, vals: impl IntoIterator<Item = u32>, max_value: u64, cat: Category) {
        let width = index_width(max_value, self.quantize);
        self.u8(width, Category::Header);
        let start = self.buf.len();
        for v in vals {
            if width == 2 {
                self.buf.extend_from_slice(&(v as u16).to_le_bytes());
            } else {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let n = (self.buf.len() - start) as u64;
        self.report.add(cat, n);
    }
}

fn encode(model: &AvatarModel, quantize: bool) -> Result<(Vec<u8>, SizeReport)> {
    let mut report = SizeReport::default();
    let mut sections: Vec<(u16, Vec<u8>)> = Vec::new();
    let c = &model.config;
    let n_g = model.neutral.len();

    macro_rules! section {
        ($id:expr, |$w:ident| $body:block) => {{
            let mut $w = SectionWriter {
                id: $id,
                buf: Vec::new(),
                quantize,
                report: &mut report,
            };
            $body;
            sections.push(($id, $w.buf));
        }};
    }

    section!(section::CONFIG, |w| {
        for v in [
            n_g,
            c.n_parts,
            c.n_blend,
            c.n_nodes,
            c.n_pruned_keep,
            c.n_joints,
            c.pose_dim,
            c.expr_dim,
            c.hidden_width,
            c.hidden_layers,
        ] {
            w.u32(v as u32, Category::Header);
        }
        let stored = if quantize { Precision::F16 } else { Precision::F32 };
        w.u8(stored as u8, Category::Header);
    });

    if n_g > 0 {
        let g = &model.neutral;
        section!(section::NEUTRAL, |w| {
            w.reals(g.positions.iter().flatten(), Category::Neutral)?;
            w.reals(g.rotations.iter().flatten(), Category::Neutral)?;
            w.reals(g.log_scales.iter().flatten(), Category::Neutral)?;
            w.reals(g.colors.iter().flatten(), Category::Neutral)?;
            w.reals(&g.opacities, Category::Neutral)?;
            w.indices(
                g.skin_joints.iter().flatten().map(|&j| j as u32),
                c.n_joints.saturating_sub(1) as u64,
                Category::Skinning,
            );
            w.reals(g.skin_weights.iter().flatten(), Category::Skinning)?;
        });

        let parts = &model.partitions.parts;
        section!(section::PARTITIONS, |w| {
            w.indices(
                parts.iter().flat_map(|p| [p.gaussian_start, p.gaussian_end]),
                n_g as u64,
                Category::Indices,
            );
            w.indices(
                parts.iter().flat_map(|p| [p.node_start, p.node_end]),
                model.nodes.len() as u64,
                Category::Indices,
            );
            for p in parts {
                w.u8(p.is_head as u8, Category::Indices);
            }
        });

        section!(section::MLP, |w| {
            for part in &model.mlp.parts {
                for layer in &part.layers {
                    w.reals(&layer.weights, Category::Mlp)?;
                    w.reals(&layer.bias, Category::Mlp)?;
                }
            }
        });

        section!(section::BLENDSHAPES, |w| {
            match &model.blendshapes {
                AttributeBlendshapes::Dense(coeffs) => {
                    w.u8(DENSE, Category::Header);
                    w.reals(coeffs, Category::Blendshapes)?;
                }
                AttributeBlendshapes::Sparse(s) => {
                    w.u8(SPARSE, Category::Header);
                    for a in &s.attributes {
                        w.u32(a.indices.len() as u32, Category::Header);
                        w.indices(
                            a.indices.iter().copied(),
                            n_g.saturating_sub(1) as u64,
                            Category::Indices,
                        );
                        w.reals(&a.coeffs, Category::Blendshapes)?;
                    }
                }
            }
        });

        section!(section::NODES, |w| {
            w.indices(
                model.nodes.gaussian_index.iter().copied(),
                n_g.saturating_sub(1) as u64,
                Category::Indices,
            );
            w.reals(&model.nodes.blendshapes, Category::NodeBlendshapes)?;
        });

        let joints = &model.skeleton.joints;
        section!(section::SKELETON, |w| {
            w.u32(joints.len() as u32, Category::Header);
            w.indices(
                joints.iter().map(|j| j.parent.map_or(0, |p| p as u32 + 1)),
                joints.len() as u64,
                Category::Skinning,
            );
            w.reals(joints.iter().flat_map(|j| &j.rest_rotation), Category::Skinning)?;
            w.reals(joints.iter().flat_map(|j| &j.rest_translation), Category::Skinning)?;
        });

        if let Some(b) = &model.pose_basis {
            section!(section::POSE_BASIS, |w| {
                w.u32(b.k as u32, Category::Header);
                w.reals(&b.mean, Category::PoseBasis)?;
                w.reals(&b.basis, Category::PoseBasis)?;
            });
        }
    }

    let table_len = PREAMBLE_BYTES + TABLE_ENTRY_BYTES * sections.len();
    let mut out = Vec::with_capacity(table_len + sections.iter().map(|s| s.1.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(LITTLE_ENDIAN);
    out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
    let mut offset = table_len as u64;
    for (id, payload) in &sections {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        offset += payload.len() as u64;
    }
    for (_, payload) in &sections {
        out.extend_from_slice(payload);
    }
    report.add(Category::Header, table_len as u64);
    debug_assert_eq!(report.total, out.len() as u64);
    Ok((out, report))
}

/// Serializes a valid model. With `quantize`, reals are stored as float16
/// (round-to-nearest-even; out-of-range values are an error) and indices as
/// narrowly as their domain allows.
pub fn save_model(model: &AvatarModel, quantize: bool) -> Result<Vec<u8>> {
    let diags = validate(model);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    encode(model, quantize).map(|(bytes, _)| bytes)
}

/// Byte counts of `save_model(model, true)`, by category.
pub fn size_report(model: &AvatarModel) -> Result<SizeReport> {
    encode(model, true).map(|(_, report)| report)
}

/// Parses, dequantizes, checks checksums and validates a container.
pub fn load_model(bytes: &[u8]) -> Result<AvatarModel> {
    let model = parse_model(bytes)?;
    let diags = validate(&model);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    Ok(model)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    base: u64,
    id: u16,
    precision: Precision,
}

impl<'a> Reader<'a> {
    fn err(&self, kind: ParseErrorKind) -> Error {
        Error::Parse {
            offset: self.base + self.pos as u64,
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(ParseErrorKind::Truncated(section::name(self.id))));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f32>> {
        match self.precision {
            Precision::F16 => {
                let raw = self.take(n.checked_mul(2).ok_or_else(|| self.overflow())?)?;
                Ok(raw
                    .chunks_exact(2)
                    .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                    .collect())
            }
            Precision::F32 => {
                let raw = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
        }
    }

    fn arrays<const N: usize>(&mut self, count: usize) -> Result<Vec<[f32; N]>> {
        let flat = self.reals(count.checked_mul(N).ok_or_else(|| self.overflow())?)?;
        Ok(flat.chunks_exact(N).map(|c| c.try_into().unwrap()).collect())
    }

    fn indices(&mut self, n: usize) -> Result<Vec<u32>> {
        let width = self.u8()?;
        let bytes = n.checked_mul(width as usize).ok_or_else(|| self.overflow())?;
        match width {
            2 => Ok(self
                .take(bytes)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect()),
            4 => Ok(self
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()),
            w => Err(self.invalid(format!("index width {w}"))),
        }
    }

    fn overflow(&self) -> Error {
        self.invalid("element count overflows".into())
    }

    fn invalid(&self, detail: String) -> Error {
        self.err(ParseErrorKind::Invalid {
            section: section::name(self.id),
            detail,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.invalid(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parses a container without running [`validate`]; used by inspection
/// tooling that reports diagnostics instead of failing.
pub fn parse_model(bytes: &[u8]) -> Result<AvatarModel> {
    let mut head = Reader {
        data: bytes,
        pos: 0,
        base: 0,
        id: 0,
        precision: Precision::F32,
    };
    let magic = head.take(4).map_err(|_| head.err(ParseErrorKind::BadMagic))?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            kind: ParseErrorKind::BadMagic,
        });
    }
    let version = head.u32()?;
    if version != VERSION {
        return Err(head.err(ParseErrorKind::UnsupportedVersion(version)));
    }
    let endian = head.u8()?;
    if endian != LITTLE_ENDIAN {
        return Err(head.err(ParseErrorKind::BadEndianness(endian)));
    }
    let count = head.u16()? as usize;
    let mut payloads: [Option<(u64, &[u8])>; 9] = Default::default();
    for _ in 0..count {
        let entry_at = head.pos as u64;
        let id = head.u16()?;
        let offset = head.u64()?;
        let length = head.u64()?;
        let crc = head.u32()?;
        if !(1..=8).contains(&id) {
            return Err(Error::Parse {
                offset: entry_at,
                kind: ParseErrorKind::UnknownSection(id),
            });
        }
        if payloads[id as usize].is_some() {
            return Err(Error::Parse {
                offset: entry_at,
                kind: ParseErrorKind::DuplicateSection(id),
            });
        }
        let end = offset.checked_add(length).filter(|&e| e <= bytes.len() as u64);
        let Some(end) = end else {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                kind: ParseErrorKind::Truncated(section::name(id)),
            });
        };
        let payload = &bytes[offset as usize..end as usize];
        if crc32fast::hash(payload) != crc {
            return Err(Error::Parse {
                offset,
                kind: ParseErrorKind::Checksum(id),
            });
        }
        payloads[id as usize] = Some((offset, payload));
    }

    let reader = |id: u16, precision: Precision| -> Result<Reader<'_>> {
        let (base, data) = payloads[id as usize].ok_or(Error::Parse {
            offset: head.pos as u64,
            kind: ParseErrorKind::MissingSection(id),
        })?;
        Ok(Reader {
            data,
            pos: 0,
            base,
            id,
            precision,
        })
    };

    let mut r = reader(section::CONFIG, Precision::F32)?;
    let mut vals = [0usize; 10];
    for v in &mut vals {
        *v = r.u32()? as usize;
    }
    let precision = match r.u8()? {
        0 => Precision::F32,
        1 => Precision::F16,
        p => return Err(r.invalid(format!("precision tag {p}"))),
    };
    r.finish()?;
    let config = ModelConfig {
        n_gaussians: vals[0],
        n_parts: vals[1],
        n_blend: vals[2],
        n_nodes: vals[3],
        n_pruned_keep: vals[4],
        n_joints: vals[5],
        pose_dim: vals[6],
        expr_dim: vals[7],
        hidden_width: vals[8],
        hidden_layers: vals[9],
        precision,
    };
    let n_g = config.n_gaussians;
    if n_g == 0 {
        return Ok(AvatarModel::empty(config));
    }

    let mut r = reader(section::NEUTRAL, precision)?;
    let mut neutral = NeutralGaussians {
        positions: r.arrays::<3>(n_g)?,
        rotations: r.arrays::<4>(n_g)?,
        log_scales: r.arrays::<3>(n_g)?,
        colors: r.arrays::<3>(n_g)?,
        opacities: r.reals(n_g)?,
        ..Default::default()
    };
    let joints = r.indices(n_g * 4)?;
    neutral.skin_joints = joints
        .chunks_exact(4)
        .map(|c| [c[0] as u16, c[1] as u16, c[2] as u16, c[3] as u16])
        .collect();
    neutral.skin_weights = r.arrays::<4>(n_g)?;
    r.finish()?;

    let mut r = reader(section::PARTITIONS, precision)?;
    let g_bounds = r.indices(config.n_parts * 2)?;
    let n_bounds = r.indices(config.n_parts * 2)?;
    let mut parts = Vec::with_capacity(config.n_parts);
    for i in 0..config.n_parts {
        let head = r.u8()?;
        parts.push(PartRange {
            gaussian_start: g_bounds[2 * i],
            gaussian_end: g_bounds[2 * i + 1],
            node_start: n_bounds[2 * i],
            node_end: n_bounds[2 * i + 1],
            is_head: head != 0,
        });
    }
    r.finish()?;
    neutral.part_ids = vec![u32::MAX; n_g];
    for (i, p) in parts.iter().enumerate() {
        let range = p.gaussian_start as usize..(p.gaussian_end as usize).min(n_g);
        for id in neutral.part_ids.get_mut(range).into_iter().flatten() {
            *id = i as u32;
        }
    }

    let mut r = reader(section::MLP, precision)?;
    let shapes = config.mlp_shapes();
    let mut mlp = MlpWeights::default();
    for _ in 0..config.n_parts {
        let mut part = PartMlp::default();
        for &(fin, fout) in &shapes {
            part.layers.push(DenseLayer {
                in_dim: fin,
                out_dim: fout,
                weights: r.reals(fin * fout)?,
                bias: r.reals(fout)?,
            });
        }
        mlp.parts.push(part);
    }
    r.finish()?;

    let mut r = reader(section::BLENDSHAPES, precision)?;
    let blendshapes = match r.u8()? {
        DENSE => AttributeBlendshapes::Dense(r.reals(n_g * config.n_blend * BLEND_COMPONENTS)?),
        SPARSE => {
            let mut s = SparseBlendshapes::default();
            for a in Attribute::ALL {
                let n = r.u32()? as usize;
                let indices = r.indices(n)?;
                let coeffs = r.reals(n * config.n_blend * a.components())?;
                s.attributes[a.index()] = SparseAttribute { indices, coeffs };
            }
            AttributeBlendshapes::Sparse(s)
        }
        d => return Err(r.invalid(format!("blendshape mode {d}"))),
    };
    r.finish()?;

    let mut r = reader(section::NODES, precision)?;
    let gaussian_index = r.indices(config.n_nodes)?;
    let node_blend = r.reals(config.n_nodes * config.n_blend * 3)?;
    r.finish()?;
    if let Some(&bad) = gaussian_index.iter().find(|&&g| g as usize >= n_g) {
        return Err(r.invalid(format!("node Gaussian index {bad} out of range")));
    }
    let (knn_nodes, knn_weights) = crate::spatial::knn_table(&neutral.positions, &gaussian_index);
    let nodes = NodeSet {
        gaussian_index,
        blendshapes: node_blend,
        knn_nodes,
        knn_weights,
    };

    let mut r = reader(section::SKELETON, precision)?;
    let n_joints = r.u32()? as usize;
    let parents = r.indices(n_joints)?;
    let rots = r.arrays::<4>(n_joints)?;
    let trans = r.arrays::<3>(n_joints)?;
    r.finish()?;
    let skeleton = Skeleton {
        joints: (0..n_joints)
            .map(|j| Joint {
                parent: parents[j].checked_sub(1).map(|p| p as usize),
                rest_rotation: rots[j],
                rest_translation: trans[j],
            })
            .collect(),
    };

    let pose_basis = if payloads[section::POSE_BASIS as usize].is_some() {
        let mut r = reader(section::POSE_BASIS, precision)?;
        let k = r.u32()? as usize;
        let d = config.input_dim();
        let mean = r.reals(d)?;
        let basis = r.reals(k * d)?;
        r.finish()?;
        Some(PoseBasis { mean, basis, k })
    } else {
        None
    };

    Ok(AvatarModel {
        config,
        neutral,
        partitions: PartitionTable { parts },
        mlp,
        blendshapes,
        nodes,
        skeleton,
        pose_basis,
    })
}
