use lbsplat_core::model::{AttributeBlendshapes, Section};
use lbsplat_core::pipeline::{anchor_rest, build_pose_basis, POSE_BASIS_VARIANCE};
use lbsplat_core::prune::{prune, RetainedSets};
use lbsplat_core::synth::{generate_pose_sequence, random_avatar, PoseStyle};
use lbsplat_core::{validate, AvatarModel, ModelConfig};

fn base() -> AvatarModel {
    let mut m = random_avatar(&ModelConfig::tiny(), 1).unwrap();
    anchor_rest(&mut m).unwrap();
    let poses = generate_pose_sequence(50, 1, PoseStyle::Random, 63, 10);
    m.pose_basis = Some(build_pose_basis(&poses, POSE_BASIS_VARIANCE).unwrap());
    m
}

fn sparse() -> AvatarModel {
    let m = base();
    let keep: Vec<u32> = (0..m.config.n_pruned_keep as u32).map(|i| 3 * i).collect();
    prune(
        &m,
        &RetainedSets {
            rotation: keep.clone(),
            scale: keep.clone(),
            color: keep,
        },
    )
    .unwrap()
}

#[test]
fn well_formed_models_have_no_diagnostics() {
    assert!(validate(&base()).is_empty());
    assert!(validate(&sparse()).is_empty());
}

#[test]
fn half_weight_row_gives_one_diagnostic_with_its_index() {
    let mut m = base();
    m.neutral.skin_weights[17] = [0.25, 0.25, 0.0, 0.0];
    let d = validate(&m);
    assert_eq!(d.len(), 1, "{d:?}");
    assert_eq!(d[0].section, Section::NeutralGaussians);
    assert_eq!(d[0].index, Some(17));
}

#[test]
fn part_without_nodes_is_named() {
    let mut m = base();
    // Hand part 0's nodes to part 1 so only the emptiness is wrong.
    let parts = &mut m.partitions.parts;
    parts[0].node_end = parts[0].node_start;
    parts[1].node_start = parts[0].node_start;
    let d = validate(&m);
    assert!(
        d.iter().any(|d| d.message == "part has no nodes" && d.index == Some(0)),
        "{d:?}"
    );
}

type Mutation = (&'static str, fn(&mut AvatarModel));

#[test]
fn every_single_invariant_violation_is_caught() {
    let dense: Vec<Mutation> = vec![
        ("n_nodes > n_gaussians", |m| m.config.n_nodes = m.config.n_gaussians + 1),
        ("pose_dim", |m| m.config.pose_dim += 3),
        ("short positions", |m| {
            m.neutral.positions.pop();
        }),
        ("rotation norm", |m| m.neutral.rotations[5] = [0.0, 0.0, 0.0, 2.0]),
        ("color range", |m| m.neutral.colors[5][1] = 1.5),
        ("opacity zero", |m| m.neutral.opacities[5] = 0.0),
        ("opacity above one", |m| m.neutral.opacities[5] = 1.01),
        ("nan position", |m| m.neutral.positions[5][0] = f32::NAN),
        ("part id", |m| m.neutral.part_ids[5] = 99),
        ("skin joint", |m| m.neutral.skin_joints[5][0] = 40),
        ("gaussian ranges overlap", |m| m.partitions.parts[1].gaussian_start -= 1),
        ("partition does not cover", |m| {
            m.partitions.parts.last_mut().unwrap().gaussian_end -= 1;
        }),
        ("node outside part", |m| {
            let r = m.partitions.parts[1].gaussians();
            let n = m.partitions.parts[0].node_start as usize;
            m.nodes.gaussian_index[n] = r.start as u32;
        }),
        ("node index out of range", |m| m.nodes.gaussian_index[0] = 1_000_000),
        ("node blendshape length", |m| {
            m.nodes.blendshapes.pop();
        }),
        ("node blendshape nan", |m| m.nodes.blendshapes[3] = f32::INFINITY),
        ("knn weights", |m| m.nodes.knn_weights[9] = [0.5, 0.1, 0.1]),
        ("knn node", |m| m.nodes.knn_nodes[9][1] = 9999),
        ("dense length", |m| {
            if let AttributeBlendshapes::Dense(c) = &mut m.blendshapes {
                c.pop();
            }
        }),
        ("dense nan", |m| {
            if let AttributeBlendshapes::Dense(c) = &mut m.blendshapes {
                c[11] = f32::NAN;
            }
        }),
        ("missing mlp", |m| {
            m.mlp.parts.pop();
        }),
        ("mlp layer shape", |m| m.mlp.parts[2].layers[0].out_dim += 1),
        ("mlp nan", |m| m.mlp.parts[2].layers[1].bias[0] = f32::NAN),
        ("two roots", |m| m.skeleton.joints[3].parent = None),
        ("parent order", |m| m.skeleton.joints[3].parent = Some(7)),
        ("rest rotation", |m| m.skeleton.joints[2].rest_rotation = [0.0; 4]),
        ("pose basis width", |m| {
            m.pose_basis.as_mut().unwrap().mean.pop();
        }),
        ("pose basis orthonormality", |m| {
            m.pose_basis.as_mut().unwrap().basis[0] += 0.5;
        }),
    ];
    for (name, mutate) in dense {
        let mut m = base();
        mutate(&mut m);
        assert!(!validate(&m).is_empty(), "{name} not detected");
    }

    let sparse_cases: Vec<Mutation> = vec![
        ("unsorted indices", |m| {
            if let AttributeBlendshapes::Sparse(s) = &mut m.blendshapes {
                s.attributes[1].indices.swap(0, 1);
            }
        }),
        ("duplicate indices", |m| {
            if let AttributeBlendshapes::Sparse(s) = &mut m.blendshapes {
                s.attributes[2].indices[1] = s.attributes[2].indices[0];
            }
        }),
        ("index out of range", |m| {
            if let AttributeBlendshapes::Sparse(s) = &mut m.blendshapes {
                *s.attributes[0].indices.last_mut().unwrap() = 1_000_000;
            }
        }),
        ("wrong retained count", |m| {
            if let AttributeBlendshapes::Sparse(s) = &mut m.blendshapes {
                s.attributes[0].indices.pop();
            }
        }),
        ("coefficient count", |m| {
            if let AttributeBlendshapes::Sparse(s) = &mut m.blendshapes {
                s.attributes[0].coeffs.pop();
            }
        }),
    ];
    for (name, mutate) in sparse_cases {
        let mut m = sparse();
        mutate(&mut m);
        let d = validate(&m);
        assert!(
            d.iter().any(|d| d.section == Section::AttributeBlendshapes),
            "{name} not detected"
        );
    }
}
