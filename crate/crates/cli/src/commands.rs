use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use lbsplat_core::io::{parse_matrix, parse_poses, write_matrix, write_poses, Dtype};
use lbsplat_core::pca::{local_pca_experiment, random_grouping, COLUMNS_PER_GAUSSIAN};
use lbsplat_core::pipeline::oracle_matrix;
use lbsplat_core::pipeline::{fit_avatar, FitReport, PipelineConfig};
use lbsplat_core::prune::{collect_correctives, prune, select_topk, VarianceReport};
use lbsplat_core::render::render_posed;
use lbsplat_core::synth::{build_synthetic_avatar, generate_pose_sequence, Oracle, OracleParams, PoseStyle};
use lbsplat_core::{
    decode_frame, load_model, parse_model, render_frame, save_model, size_report, validate, Attribute, AvatarModel,
    Camera, Diagnostic, Image, ModelConfig, Pose, SizeReport, StageTimings,
};
use lbsplat_gpu::{Gpu, GpuAvatar};
use serde::Serialize;

use crate::output::{emit, read, write, write_json, write_png, CmdResult, Failure, Grouping, Stats};
use crate::{
    BenchArgs, Cli, Command, FitArgs, InspectArgs, PcaArgs, Preset, PruneArgs, RenderArgs, Style, SynthArgs, ViewArgs,
};

/// Pose sequences are seeded apart from the avatar built with the same seed.
const POSE_SEED_SALT: u64 = 0x706f_7365;
/// Columns of the oracle written by `synth --matrix`: position correctives.
const MATRIX_COMPONENTS: std::ops::Range<usize> = 10..13;

pub fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Prune(a) => prune_cmd(cli, a),
        Command::Inspect(a) => inspect(cli, a),
        Command::Render(a) => render(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Pca(a) => pca(cli, a),
        Command::View(a) => view(cli, a),
    }
}

fn load(path: &Path) -> CmdResult<AvatarModel> {
    load_model(&read(path)?).map_err(|e| Failure::domain(format!("{}: {e}", path.display())))
}

fn load_poses(path: &Path, model: &AvatarModel) -> CmdResult<Vec<Pose>> {
    let poses = parse_poses(&read(path)?).map_err(|e| Failure::domain(format!("{}: {e}", path.display())))?;
    let c = &model.config;
    if let Some(p) = poses.first() {
        if p.theta_p.len() != c.pose_dim || p.theta_e.len() != c.expr_dim {
            return Err(Failure::domain(format!(
                "{}: poses are {}+{}, model expects {}+{}",
                path.display(),
                p.theta_p.len(),
                p.theta_e.len(),
                c.pose_dim,
                c.expr_dim
            )));
        }
    }
    Ok(poses)
}

fn stage_lines(t: &StageTimings) -> Vec<String> {
    let mut lines: Vec<String> = t
        .stages()
        .iter()
        .map(|(name, ms)| format!("{name}_ms {ms:.4}"))
        .collect();
    lines.push(format!("total_ms {:.4}", t.total_ms()));
    lines
}

#[derive(Serialize)]
struct SynthOutput {
    schema: &'static str,
    preset: String,
    seed: u64,
    n_gaussians: usize,
    n_parts: usize,
    n_nodes: usize,
    model_bytes: usize,
    frames: Option<usize>,
    oracle: OracleParams,
}

fn synth(cli: &Cli, a: &SynthArgs) -> CmdResult {
    let config = match a.preset {
        Preset::Tiny => ModelConfig::tiny(),
        Preset::Desk => ModelConfig::desk(),
        Preset::Paper => ModelConfig::paper(),
    };
    let t = Instant::now();
    let model = build_synthetic_avatar(&config, cli.seed)?.model;
    log::info!("built {} Gaussians in {:.2?}", model.neutral.len(), t.elapsed());
    let bytes = save_model(&model, false)?;
    write(&a.out, &bytes)?;
    let params = OracleParams {
        seed: cli.seed,
        ..Default::default()
    };
    if let Some(path) = &a.oracle {
        write_json(path, &params)?;
    }
    let mut frames = None;
    if let Some(path) = &a.poses {
        let period = a.period as usize;
        let style = match a.style {
            Style::Random => PoseStyle::Random,
            Style::Walk => PoseStyle::Walk { period },
            Style::Talk => PoseStyle::Talk { period },
        };
        let poses = generate_pose_sequence(
            a.frames,
            cli.seed ^ POSE_SEED_SALT,
            style,
            config.pose_dim,
            config.expr_dim,
        );
        let mut buf = Vec::new();
        write_poses(&mut buf, &poses)?;
        write(path, &buf)?;
        frames = Some(poses.len());
        if let Some(mpath) = &a.matrix {
            let oracle = Oracle::new(params, &model)?;
            let x = oracle_matrix(&model, &oracle, &poses, MATRIX_COMPONENTS);
            let mut buf = Vec::new();
            write_matrix(&mut buf, &x, Dtype::F32)?;
            write(mpath, &buf)?;
        }
    }
    let out = SynthOutput {
        schema: "lbsplat.synth/v1",
        preset: format!("{:?}", a.preset).to_lowercase(),
        seed: cli.seed,
        n_gaussians: model.neutral.len(),
        n_parts: model.partitions.len(),
        n_nodes: model.nodes.len(),
        model_bytes: bytes.len(),
        frames,
        oracle: params,
    };
    emit(cli.json, &out, || {
        let mut l = vec![
            format!("model {}", a.out.display()),
            format!("gaussians {}", out.n_gaussians),
            format!("parts {}", out.n_parts),
            format!("nodes {}", out.n_nodes),
            format!("bytes {}", out.model_bytes),
        ];
        if let Some(f) = frames {
            l.push(format!("frames {f}"));
        }
        l
    })
}

#[derive(Serialize)]
struct FitOutput {
    schema: &'static str,
    sparse: bool,
    model_bytes: usize,
    /// corrective_l1 / truncation_floor.
    l1_over_floor: f64,
    #[serde(flatten)]
    report: FitReport,
}

fn fit(cli: &Cli, a: &FitArgs) -> CmdResult {
    let mut model = load(&a.model)?;
    let poses = load_poses(&a.samples, &model)?;
    let params = match &a.oracle {
        Some(path) => {
            serde_json::from_slice(&read(path)?).map_err(|e| Failure::domain(format!("{}: {e}", path.display())))?
        }
        None => OracleParams {
            seed: cli.seed,
            ..Default::default()
        },
    };
    let oracle = Oracle::new(params, &model)?;
    let mut cfg = PipelineConfig::default();
    if let Some(it) = a.iterations {
        cfg.fit.iterations = it as usize;
    }
    let t = Instant::now();
    let report = fit_avatar(&mut model, &oracle, &poses, &cfg, cli.seed)?;
    log::info!("fit finished in {:.2?}", t.elapsed());
    let bytes = save_model(&model, a.quantize)?;
    write(&a.out, &bytes)?;
    let out = FitOutput {
        schema: "lbsplat.fit/v1",
        sparse: model.blendshapes.is_sparse(),
        model_bytes: bytes.len(),
        l1_over_floor: if report.truncation_floor > 0.0 {
            report.corrective_l1 / report.truncation_floor
        } else {
            f64::INFINITY
        },
        report,
    };
    if let Some(path) = &a.report {
        write_json(path, &out)?;
    }
    emit(cli.json, &out, || {
        vec![
            format!("poses {}", out.report.poses),
            format!("dynamic_parts {}", out.report.dynamic_parts),
            format!("corrective_l1 {:.6e}", out.report.corrective_l1),
            format!("truncation_floor {:.6e}", out.report.truncation_floor),
            format!("l1_over_floor {:.4}", out.l1_over_floor),
            format!("pose_basis_k {}", out.report.pose_basis_k),
            format!("sparse {}", out.sparse),
            format!("bytes {}", out.model_bytes),
        ]
    })
}

#[derive(Serialize)]
struct AttributeSummary {
    retained: usize,
    max_variance: f64,
    mean_variance: f64,
    /// Smallest variance among the retained blendshapes.
    retained_min_variance: f64,
}

#[derive(Serialize)]
struct PruneOutput {
    schema: &'static str,
    keep: usize,
    frames: usize,
    dense_parameters: usize,
    sparse_parameters: usize,
    parameter_fraction: f64,
    attributes: BTreeMap<&'static str, AttributeSummary>,
    size_dense: SizeReport,
    size_pruned: SizeReport,
    model_bytes: usize,
}

fn attribute_name(a: Attribute) -> &'static str {
    match a {
        Attribute::Rotation => "rotation",
        Attribute::Scale => "scale",
        Attribute::Color => "color",
    }
}

fn prune_cmd(cli: &Cli, a: &PruneArgs) -> CmdResult {
    let model = load(&a.model)?;
    if model.blendshapes.is_sparse() {
        return Err(Failure::domain(format!("{} is already pruned", a.model.display())));
    }
    let poses = load_poses(&a.poses, &model)?;
    let report: VarianceReport = collect_correctives(&model, &poses)?.finish()?;
    let retained = select_topk(&report, a.keep);
    let pruned = prune(&model, &retained)?;
    let bytes = save_model(&pruned, a.quantize)?;
    write(&a.out, &bytes)?;
    let attributes = Attribute::ALL
        .iter()
        .map(|&at| {
            let v = report.get(at);
            let kept = retained.get(at);
            let summary = AttributeSummary {
                retained: kept.len(),
                max_variance: v.iter().copied().fold(0.0, f64::max),
                mean_variance: v.iter().sum::<f64>() / v.len().max(1) as f64,
                retained_min_variance: kept.iter().map(|&k| v[k as usize]).fold(f64::INFINITY, f64::min),
            };
            (attribute_name(at), summary)
        })
        .collect();
    let dense_parameters = model.blendshapes.parameter_count();
    let sparse_parameters = pruned.blendshapes.parameter_count();
    let out = PruneOutput {
        schema: "lbsplat.prune/v1",
        keep: a.keep,
        frames: poses.len(),
        dense_parameters,
        sparse_parameters,
        parameter_fraction: sparse_parameters as f64 / dense_parameters.max(1) as f64,
        attributes,
        size_dense: size_report(&model)?,
        size_pruned: size_report(&pruned)?,
        model_bytes: bytes.len(),
    };
    if let Some(path) = &a.report {
        write_json(path, &out)?;
    }
    emit(cli.json, &out, || {
        let mut l = vec![
            format!("keep {}", out.keep),
            format!("frames {}", out.frames),
            format!("dense_parameters {}", out.dense_parameters),
            format!("sparse_parameters {}", out.sparse_parameters),
            format!("parameter_fraction {:.4}", out.parameter_fraction),
        ];
        for (name, s) in &out.attributes {
            l.push(format!("{name}.retained {}", s.retained));
            l.push(format!("{name}.retained_min_variance {:.6e}", s.retained_min_variance));
        }
        l.push(format!("size_dense {}", out.size_dense.total));
        l.push(format!("size_pruned {}", out.size_pruned.total));
        l.push(format!("bytes {}", out.model_bytes));
        l
    })
}

#[derive(Serialize)]
struct InspectOutput {
    schema: &'static str,
    file_bytes: usize,
    config: ModelConfig,
    sparse: bool,
    blendshape_parameters: usize,
    has_pose_basis: bool,
    /// Quantized container size by category; absent when the model cannot be encoded.
    size: Option<SizeReport>,
    diagnostics: Vec<Diagnostic>,
}

fn inspect(cli: &Cli, a: &InspectArgs) -> CmdResult {
    let bytes = read(&a.model)?;
    let model = parse_model(&bytes).map_err(|e| Failure::domain(format!("{}: {e}", a.model.display())))?;
    let diagnostics = validate(&model);
    let out = InspectOutput {
        schema: "lbsplat.inspect/v1",
        file_bytes: bytes.len(),
        config: model.config.clone(),
        sparse: model.blendshapes.is_sparse(),
        blendshape_parameters: model.blendshapes.parameter_count(),
        has_pose_basis: model.pose_basis.is_some(),
        size: size_report(&model).ok(),
        diagnostics,
    };
    emit(cli.json, &out, || {
        let c = &out.config;
        let mut l = vec![
            format!("file_bytes {}", out.file_bytes),
            format!("gaussians {}", c.n_gaussians),
            format!("parts {}", c.n_parts),
            format!("blendshapes {}", c.n_blend),
            format!("nodes {}", c.n_nodes),
            format!("precision {:?}", c.precision).to_lowercase(),
            format!("sparse {}", out.sparse),
            format!("blendshape_parameters {}", out.blendshape_parameters),
            format!("pose_basis {}", out.has_pose_basis),
        ];
        if let Some(s) = &out.size {
            l.extend(s.sections().iter().map(|(name, b)| format!("size.{name} {b}")));
            l.push(format!("size.total {}", s.total));
        }
        l.push(format!("diagnostics {}", out.diagnostics.len()));
        l.extend(out.diagnostics.iter().map(|d| format!("diagnostic {d}")));
        l
    })?;
    if out.diagnostics.is_empty() {
        Ok(())
    } else {
        Err(Failure::domain(format!(
            "{} validation diagnostics",
            out.diagnostics.len()
        )))
    }
}

#[derive(Serialize)]
struct RenderOutput {
    schema: &'static str,
    backend: String,
    width: u32,
    height: u32,
    frame: usize,
    timings: StageTimings,
    total_ms: f64,
}

fn pick_pose(path: Option<&Path>, frame: usize, model: &AvatarModel) -> CmdResult<Pose> {
    match path {
        None => Ok(Pose::zeros(&model.config)),
        Some(p) => {
            let poses = load_poses(p, model)?;
            let n = poses.len();
            poses
                .into_iter()
                .nth(frame)
                .ok_or_else(|| Failure::domain(format!("frame {frame} out of range for {n} poses")))
        }
    }
}

fn render(cli: &Cli, a: &RenderArgs) -> CmdResult {
    let model = load(&a.model)?;
    let pose = pick_pose(a.pose.as_deref(), a.frame, &model)?;
    let cam = match &a.camera {
        Some(path) => serde_json::from_slice::<Camera>(&read(path)?)
            .map_err(|e| Failure::domain(format!("{}: {e}", path.display())))?,
        None => Camera::front(a.width, a.height),
    };
    cam.check()?;
    let (image, timings, backend): (Image, StageTimings, String) = if a.gpu {
        let gpu = Gpu::new()?;
        let (img, t) = GpuAvatar::new(&gpu, &model)?.render(&pose, &cam)?;
        (img, t, format!("gpu {}", gpu.adapter_name()))
    } else {
        let (img, t) = render_frame(&model, &pose, &cam)?;
        (img, t, "cpu".into())
    };
    write_png(&a.out, &image)?;
    let out = RenderOutput {
        schema: "lbsplat.render/v1",
        backend,
        width: image.width,
        height: image.height,
        frame: a.frame,
        total_ms: timings.total_ms(),
        timings,
    };
    emit(cli.json, &out, || {
        let mut l = vec![format!("image {}", a.out.display()), format!("backend {}", out.backend)];
        l.extend(stage_lines(&out.timings));
        l
    })
}

#[derive(Serialize)]
struct BenchOutput {
    schema: &'static str,
    backend: String,
    n_gaussians: usize,
    sparse: bool,
    frames: u32,
    warmup: u32,
    width: u32,
    height: u32,
    decode_only: bool,
    stages: BTreeMap<&'static str, Stats>,
    decode: Stats,
    render: Stats,
    total: Stats,
}

fn bench_poses(path: Option<&Path>, model: &AvatarModel, seed: u64) -> CmdResult<Vec<Pose>> {
    let poses = match path {
        Some(p) => load_poses(p, model)?,
        None => {
            let c = &model.config;
            generate_pose_sequence(
                64,
                seed ^ POSE_SEED_SALT,
                PoseStyle::Walk { period: 64 },
                c.pose_dim,
                c.expr_dim,
            )
        }
    };
    if poses.is_empty() {
        return Err(Failure::domain("pose sequence is empty"));
    }
    Ok(poses)
}

fn bench(cli: &Cli, a: &BenchArgs) -> CmdResult {
    let model = load(&a.model)?;
    let poses = bench_poses(a.poses.as_deref(), &model, cli.seed)?;
    let cam = Camera::front(a.width, a.height);
    let gpu = if a.gpu { Some(Gpu::new()?) } else { None };
    let avatar = match &gpu {
        Some(g) => Some(GpuAvatar::new(g, &model)?),
        None => None,
    };
    let frame = |pose: &Pose| -> CmdResult<StageTimings> {
        Ok(match (&avatar, a.decode_only) {
            (Some(av), true) => av.decode(pose)?,
            (Some(av), false) => av.render(pose, &cam)?.1,
            (None, true) => decode_frame(&model, pose)?.1,
            (None, false) => {
                let (posed, mut t) = decode_frame(&model, pose)?;
                render_posed(&posed, &cam, &mut t)?;
                t
            }
        })
    };
    for i in 0..a.warmup as usize {
        frame(&poses[i % poses.len()])?;
    }
    let mut samples = Vec::with_capacity(a.frames as usize);
    for i in 0..a.frames as usize {
        samples.push(frame(&poses[i % poses.len()])?);
    }
    let series = |f: &dyn Fn(&StageTimings) -> f64| Stats::of(&samples.iter().map(f).collect::<Vec<_>>());
    let mut stages = BTreeMap::new();
    for (i, (name, _)) in StageTimings::default().stages().iter().enumerate() {
        stages.insert(*name, series(&|t: &StageTimings| t.stages()[i].1));
    }
    let out = BenchOutput {
        schema: "lbsplat.bench/v1",
        backend: gpu
            .as_ref()
            .map_or("cpu".into(), |g| format!("gpu {}", g.adapter_name())),
        n_gaussians: model.neutral.len(),
        sparse: model.blendshapes.is_sparse(),
        frames: a.frames,
        warmup: a.warmup,
        width: a.width,
        height: a.height,
        decode_only: a.decode_only,
        stages,
        decode: series(&|t: &StageTimings| t.decode_ms()),
        render: series(&|t: &StageTimings| t.render_ms()),
        total: series(&|t: &StageTimings| t.total_ms()),
    };
    emit(cli.json, &out, || {
        let mut l = vec![
            format!("backend {}", out.backend),
            format!("gaussians {}", out.n_gaussians),
            format!("sparse {}", out.sparse),
            format!("frames {}", out.frames),
        ];
        let row = |name: &str, s: &Stats| {
            format!(
                "{name} mean {:.4} median {:.4} p95 {:.4} min {:.4} max {:.4}",
                s.mean, s.median, s.p95, s.min, s.max
            )
        };
        for (name, s) in &out.stages {
            l.push(row(name, s));
        }
        l.push(row("decode", &out.decode));
        l.push(row("render", &out.render));
        l.push(row("total", &out.total));
        l
    })
}

#[derive(Serialize)]
struct PcaOutput {
    schema: &'static str,
    rows: usize,
    cols: usize,
    k: usize,
    grouping: String,
    groups: usize,
    pooled_error: f64,
    mean_explained_ratio: Vec<f64>,
    group_errors: Vec<f64>,
}

/// `n` columns of per-Gaussian triples split into `groups` contiguous runs of Gaussians.
fn contiguous_groups(n_cols: usize, groups: usize) -> CmdResult<Vec<Vec<usize>>> {
    if n_cols % COLUMNS_PER_GAUSSIAN != 0 {
        return Err(Failure::domain(format!(
            "{n_cols} columns are not whole Gaussians of {COLUMNS_PER_GAUSSIAN} columns"
        )));
    }
    let n = n_cols / COLUMNS_PER_GAUSSIAN;
    if groups == 0 || groups > n {
        return Err(Failure::domain(format!(
            "cannot split {n} Gaussians into {groups} groups"
        )));
    }
    Ok((0..groups)
        .map(|g| (g * n / groups * COLUMNS_PER_GAUSSIAN..(g + 1) * n / groups * COLUMNS_PER_GAUSSIAN).collect())
        .collect())
}

fn pca(cli: &Cli, a: &PcaArgs) -> CmdResult {
    let x = parse_matrix(&read(&a.matrix)?).map_err(|e| Failure::domain(format!("{}: {e}", a.matrix.display())))?;
    let d = x.ncols();
    let model = a.model.as_deref().map(load).transpose()?;
    let n_groups = match &model {
        Some(m) => m.partitions.len(),
        None => a.groups.unwrap_or(64),
    };
    let grouping: Vec<Vec<usize>> = match a.grouping {
        Grouping::Global => vec![(0..d).collect()],
        Grouping::Parts => match &model {
            Some(m) => {
                if d != m.neutral.len() * COLUMNS_PER_GAUSSIAN {
                    return Err(Failure::domain(format!(
                        "matrix has {d} columns, model has {} Gaussians",
                        m.neutral.len()
                    )));
                }
                m.partitions
                    .parts
                    .iter()
                    .map(|p| {
                        p.gaussians()
                            .flat_map(|g| g * COLUMNS_PER_GAUSSIAN..(g + 1) * COLUMNS_PER_GAUSSIAN)
                            .collect()
                    })
                    .collect()
            }
            None => contiguous_groups(d, n_groups)?,
        },
        Grouping::Random(seed) => random_grouping(d, n_groups, seed)?,
    };
    let report = local_pca_experiment(x.view(), &grouping, a.k as usize)?;
    let out = PcaOutput {
        schema: "lbsplat.pca/v1",
        rows: x.nrows(),
        cols: d,
        k: a.k as usize,
        grouping: a.grouping.to_string(),
        groups: grouping.len(),
        pooled_error: report.pooled_error,
        mean_explained_ratio: report.mean_explained_ratio,
        group_errors: report.group_errors,
    };
    if let Some(path) = &a.report {
        write_json(path, &out)?;
    }
    emit(cli.json, &out, || {
        let cumulative: f64 = out.mean_explained_ratio.iter().take(4).sum();
        vec![
            format!("matrix {}x{}", out.rows, out.cols),
            format!("grouping {} ({} groups)", out.grouping, out.groups),
            format!("k {}", out.k),
            format!("pooled_error {:.6e}", out.pooled_error),
            format!("top4_explained {:.4}", cumulative),
        ]
    })
}

#[derive(Serialize)]
struct ViewOutput {
    schema: &'static str,
    backend: String,
    frames: usize,
    frame_ms: Stats,
    stage_sum_ms: Stats,
}

/// Headless playback: renders every frame on the GPU and prints a timing
/// line per frame.
fn view(cli: &Cli, a: &ViewArgs) -> CmdResult {
    let model = load(&a.model)?;
    let gpu = Gpu::new().map_err(|e| Failure::domain(format!("view needs a GPU: {e}")))?;
    let avatar = GpuAvatar::new(&gpu, &model)?;
    let poses = bench_poses(a.poses.as_deref(), &model, cli.seed)?;
    let cam = Camera::front(a.width, a.height);
    let mut wall = Vec::with_capacity(a.frames);
    let mut sums = Vec::with_capacity(a.frames);
    for i in 0..a.frames {
        let t = Instant::now();
        let (_, timings) = avatar.render(&poses[i % poses.len()], &cam)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        wall.push(ms);
        sums.push(timings.total_ms());
        if !cli.json {
            let stages: Vec<String> = timings.stages().iter().map(|(n, v)| format!("{n} {v:.3}")).collect();
            println!("frame {i} wall_ms {ms:.3} {}", stages.join(" "));
        }
    }
    let out = ViewOutput {
        schema: "lbsplat.view/v1",
        backend: gpu.adapter_name(),
        frames: a.frames,
        frame_ms: Stats::of(&wall),
        stage_sum_ms: Stats::of(&sums),
    };
    emit(cli.json, &out, || {
        vec![format!(
            "frames {} mean_frame_ms {:.3} mean_stage_sum_ms {:.3}",
            out.frames, out.frame_ms.mean, out.stage_sum_ms.mean
        )]
    })
}
