//! Invariant checks over a whole [`AvatarModel`].

use crate::model::{AttributeBlendshapes, AvatarModel, Diagnostic, Precision, Section, BLEND_COMPONENTS};

/// Norm tolerance for unit quaternions and weight sums. Float16 storage
/// rounds each component by up to 2^-11 relative, so quantized models get a
/// wider band.
fn unit_tolerance(p: Precision) -> f32 {
    match p {
        Precision::F32 => 1e-4,
        Precision::F16 => 2e-3,
    }
}

fn finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Returns every violated invariant; empty iff the model is well-formed.
pub fn validate(model: &AvatarModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    check_config(model, &mut out);
    check_neutral(model, &mut out);
    check_partitions(model, &mut out);
    check_nodes(model, &mut out);
    check_blendshapes(model, &mut out);
    check_mlp(model, &mut out);
    check_skeleton(model, &mut out);
    check_pose_basis(model, &mut out);
    out
}

fn check_config(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    let c = &m.config;
    let mut push = |msg: String| out.push(Diagnostic::new(Section::ModelConfig, None, msg));
    if c.n_nodes > c.n_gaussians {
        push(format!("n_nodes {} exceeds n_gaussians {}", c.n_nodes, c.n_gaussians));
    }
    if c.n_pruned_keep > c.n_gaussians {
        push(format!(
            "n_pruned_keep {} exceeds n_gaussians {}",
            c.n_pruned_keep, c.n_gaussians
        ));
    }
    if c.n_gaussians > 0 && c.n_parts == 0 {
        push("n_parts must be at least 1".into());
    }
    if c.pose_dim != 3 * c.n_joints.saturating_sub(1) {
        push(format!(
            "pose_dim {} is not 3 x posed joints ({})",
            c.pose_dim,
            c.n_joints.saturating_sub(1)
        ));
    }
    if c.n_gaussians != m.neutral.len() {
        push(format!(
            "n_gaussians {} but {} neutral Gaussians",
            c.n_gaussians,
            m.neutral.len()
        ));
    }
    if c.n_parts != m.partitions.len() {
        push(format!("n_parts {} but {} partitions", c.n_parts, m.partitions.len()));
    }
    if c.n_nodes != m.nodes.len() {
        push(format!("n_nodes {} but {} nodes", c.n_nodes, m.nodes.len()));
    }
    if c.n_joints != m.skeleton.len() && c.n_gaussians > 0 {
        push(format!(
            "n_joints {} but {} skeleton joints",
            c.n_joints,
            m.skeleton.len()
        ));
    }
}

fn check_neutral(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    let g = &m.neutral;
    let n = g.len();
    let sec = Section::NeutralGaussians;
    let lens = [
        ("rotations", g.rotations.len()),
        ("log_scales", g.log_scales.len()),
        ("colors", g.colors.len()),
        ("opacities", g.opacities.len()),
        ("part_ids", g.part_ids.len()),
        ("skin_joints", g.skin_joints.len()),
        ("skin_weights", g.skin_weights.len()),
    ];
    let mut consistent = true;
    for (name, len) in lens {
        if len != n {
            out.push(Diagnostic::new(
                sec,
                None,
                format!("{name} has {len} entries, expected {n}"),
            ));
            consistent = false;
        }
    }
    if !consistent {
        return;
    }
    let tol = unit_tolerance(m.config.precision);
    for k in 0..n {
        let mut bad = |msg: String| out.push(Diagnostic::new(sec, Some(k), msg));
        if !finite(&g.positions[k]) {
            bad("position not finite".into());
        }
        let r = g.rotations[k];
        let norm = r.iter().map(|x| x * x).sum::<f32>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > tol {
            bad(format!("rotation norm {norm} is not 1"));
        }
        if !finite(&g.log_scales[k]) {
            bad("log-scale not finite".into());
        }
        if g.colors[k].iter().any(|c| !(0.0..=1.0).contains(c)) {
            bad(format!("color {:?} outside [0,1]", g.colors[k]));
        }
        let o = g.opacities[k];
        if !(o > 0.0 && o <= 1.0) {
            bad(format!("opacity {o} outside (0,1]"));
        }
        if g.part_ids[k] as usize >= m.config.n_parts {
            bad(format!("part_id {} >= n_parts {}", g.part_ids[k], m.config.n_parts));
        }
        let w = g.skin_weights[k];
        let sum: f32 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > tol {
            bad(format!("skin weights {w:?} sum to {sum}"));
        }
        if let Some(j) = g.skin_joints[k].iter().find(|&&j| j as usize >= m.config.n_joints) {
            bad(format!("skin joint {j} >= n_joints {}", m.config.n_joints));
        }
    }
}

fn check_partitions(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    let sec = Section::PartitionTable;
    let mut next_g = 0usize;
    let mut next_n = 0usize;
    for (i, p) in m.partitions.parts.iter().enumerate() {
        let mut bad = |msg: String| out.push(Diagnostic::new(sec, Some(i), msg));
        let gr = p.gaussians();
        let nr = p.nodes();
        if gr.start != next_g || gr.end < gr.start {
            bad(format!("Gaussian range {gr:?} does not continue at {next_g}"));
        }
        if gr.is_empty() {
            bad("part has no Gaussians".into());
        }
        if nr.start != next_n || nr.end < nr.start {
            bad(format!("node range {nr:?} does not continue at {next_n}"));
        }
        if nr.is_empty() {
            bad("part has no nodes".into());
        }
        if gr.end <= m.neutral.part_ids.len() {
            if let Some(k) = gr.clone().find(|&k| m.neutral.part_ids[k] as usize != i) {
                bad(format!("Gaussian {k} in range has part_id {}", m.neutral.part_ids[k]));
            }
        }
        if nr.end <= m.nodes.gaussian_index.len() {
            for n in nr.clone() {
                let g = m.nodes.gaussian_index[n] as usize;
                if !gr.contains(&g) {
                    bad(format!("node {n} (Gaussian {g}) lies outside the part"));
                    break;
                }
            }
        }
        next_g = gr.end.max(next_g);
        next_n = nr.end.max(next_n);
    }
    if next_g != m.neutral.len() {
        out.push(Diagnostic::new(
            sec,
            None,
            format!("ranges cover [0,{next_g}) but there are {} Gaussians", m.neutral.len()),
        ));
    }
    if next_n != m.nodes.len() {
        out.push(Diagnostic::new(
            sec,
            None,
            format!("node ranges cover [0,{next_n}) but there are {} nodes", m.nodes.len()),
        ));
    }
}

fn check_nodes(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    let sec = Section::NodeSet;
    let ns = &m.nodes;
    let n_nodes = ns.len();
    let n_g = m.neutral.len();
    for (i, &g) in ns.gaussian_index.iter().enumerate() {
        if g as usize >= n_g {
            out.push(Diagnostic::new(
                sec,
                Some(i),
                format!("node Gaussian index {g} >= {n_g}"),
            ));
        }
    }
    let expect = n_nodes * m.config.n_blend * 3;
    if ns.blendshapes.len() != expect {
        out.push(Diagnostic::new(
            sec,
            None,
            format!(
                "node blendshapes have {} values, expected {expect}",
                ns.blendshapes.len()
            ),
        ));
    } else if !finite(&ns.blendshapes) {
        out.push(Diagnostic::new(sec, None, "node blendshapes not finite"));
    }
    if ns.knn_nodes.len() != n_g || ns.knn_weights.len() != n_g {
        out.push(Diagnostic::new(
            sec,
            None,
            format!(
                "knn table has {}/{} rows, expected {n_g}",
                ns.knn_nodes.len(),
                ns.knn_weights.len()
            ),
        ));
        return;
    }
    for k in 0..n_g {
        let w = ns.knn_weights[k];
        let sum: f32 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
            out.push(Diagnostic::new(sec, Some(k), format!("knn weights {w:?} sum to {sum}")));
        }
        if let Some(j) = ns.knn_nodes[k].iter().find(|&&j| j as usize >= n_nodes) {
            out.push(Diagnostic::new(sec, Some(k), format!("knn node {j} >= {n_nodes}")));
        }
    }
}

fn check_blendshapes(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    let sec = Section::AttributeBlendshapes;
    let n_g = m.neutral.len();
    let nb = m.config.n_blend;
    match &m.blendshapes {
        AttributeBlendshapes::Dense(c) => {
            let expect = n_g * nb * BLEND_COMPONENTS;
            if c.len() != expect {
                out.push(Diagnostic::new(
                    sec,
                    None,
                    format!("dense blendshapes have {} values, expected {expect}", c.len()),
                ));
            } else if !finite(c) {
                out.push(Diagnostic::new(sec, None, "dense blendshapes not finite"));
            }
        }
        AttributeBlendshapes::Sparse(s) => {
            let keep = m.config.n_pruned_keep.min(n_g);
            for a in crate::model::Attribute::ALL {
                let sa = s.get(a);
                if sa.indices.len() != keep {
                    out.push(Diagnostic::new(
                        sec,
                        None,
                        format!("{a:?} keeps {} Gaussians, expected {keep}", sa.indices.len()),
                    ));
                }
                if let Some(w) = sa.indices.windows(2).position(|w| w[1] <= w[0]) {
                    out.push(Diagnostic::new(
                        sec,
                        Some(w + 1),
                        format!("{a:?} retained indices not strictly increasing"),
                    ));
                }
                if let Some(&bad) = sa.indices.iter().find(|&&i| i as usize >= n_g) {
                    out.push(Diagnostic::new(
                        sec,
                        None,
                        format!("{a:?} retained index {bad} >= {n_g}"),
                    ));
                }
                let expect = sa.indices.len() * nb * a.components();
                if sa.coeffs.len() != expect {
                    out.push(Diagnostic::new(
                        sec,
                        None,
                        format!("{a:?} has {} coefficients, expected {expect}", sa.coeffs.len()),
                    ));
                } else if !finite(&sa.coeffs) {
                    out.push(Diagnostic::new(sec, None, format!("{a:?} coefficients not finite")));
                }
            }
        }
    }
}

fn check_mlp(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    let sec = Section::MlpWeights;
    if m.mlp.parts.len() != m.config.n_parts {
        out.push(Diagnostic::new(
            sec,
            None,
            format!("{} part MLPs for {} parts", m.mlp.parts.len(), m.config.n_parts),
        ));
    }
    let shapes = m.config.mlp_shapes();
    for (i, part) in m.mlp.parts.iter().enumerate() {
        if part.layers.len() != shapes.len() {
            out.push(Diagnostic::new(
                sec,
                Some(i),
                format!("{} layers, expected {}", part.layers.len(), shapes.len()),
            ));
            continue;
        }
        for (l, (layer, &(fin, fout))) in part.layers.iter().zip(&shapes).enumerate() {
            if layer.in_dim != fin
                || layer.out_dim != fout
                || layer.weights.len() != fin * fout
                || layer.bias.len() != fout
            {
                out.push(Diagnostic::new(
                    sec,
                    Some(i),
                    format!(
                        "layer {l} shape {}x{} expected {fin}x{fout}",
                        layer.in_dim, layer.out_dim
                    ),
                ));
            } else if !finite(&layer.weights) || !finite(&layer.bias) {
                out.push(Diagnostic::new(sec, Some(i), format!("layer {l} not finite")));
            }
        }
    }
}

fn check_skeleton(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    if m.skeleton.is_empty() {
        if m.config.n_gaussians > 0 {
            out.push(Diagnostic::new(Section::Skeleton, None, "skeleton has no joints"));
        }
        return;
    }
    let sec = Section::Skeleton;
    let tol = unit_tolerance(m.config.precision);
    let mut roots = 0;
    for (j, joint) in m.skeleton.joints.iter().enumerate() {
        match joint.parent {
            None => roots += 1,
            Some(p) if p >= j => out.push(Diagnostic::new(
                sec,
                Some(j),
                format!("parent {p} does not precede joint"),
            )),
            Some(_) => {}
        }
        let norm = joint.rest_rotation.iter().map(|x| x * x).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > tol || !finite(&joint.rest_translation) {
            out.push(Diagnostic::new(sec, Some(j), "rest transform invalid"));
        }
    }
    if roots != 1 {
        out.push(Diagnostic::new(
            sec,
            None,
            format!("{roots} roots, expected exactly one"),
        ));
    }
}

fn check_pose_basis(m: &AvatarModel, out: &mut Vec<Diagnostic>) {
    let Some(b) = &m.pose_basis else { return };
    let sec = Section::PoseBasis;
    let d = m.config.input_dim();
    if b.mean.len() != d || b.basis.len() != b.k * d {
        out.push(Diagnostic::new(
            sec,
            None,
            format!(
                "basis is {}x{} with mean {}, expected width {d}",
                b.k,
                b.dim(),
                b.mean.len()
            ),
        ));
        return;
    }
    let tol = match m.config.precision {
        Precision::F32 => 1e-5,
        Precision::F16 => 4e-3,
    };
    for i in 0..b.k {
        for j in i..b.k {
            let dot: f64 = b.row(i).iter().zip(b.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > tol {
                out.push(Diagnostic::new(
                    sec,
                    Some(i),
                    format!("rows {i},{j} inner product {dot:.6}, expected {want}"),
                ));
            }
        }
    }
}
