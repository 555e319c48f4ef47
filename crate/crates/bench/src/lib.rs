//! Shared fixtures for the criterion benches.

use lbsplat_core::prune::{collect_correctives, prune, select_topk};
use lbsplat_core::synth::{generate_pose_sequence, random_avatar, PoseStyle};
use lbsplat_core::{AvatarModel, ModelConfig, Pose};

pub struct Fixture {
    pub dense: AvatarModel,
    pub pruned: AvatarModel,
    pub poses: Vec<Pose>,
}

/// Preset chosen by `LBSPLAT_BENCH_PRESET` (tiny, desk or paper; desk by default).
pub fn preset() -> (&'static str, ModelConfig) {
    match std::env::var("LBSPLAT_BENCH_PRESET").as_deref() {
        Ok("tiny") => ("tiny", ModelConfig::tiny()),
        Ok("paper") => ("paper", ModelConfig::paper()),
        _ => ("desk", ModelConfig::desk()),
    }
}

/// A random dense avatar, its top-N_P pruning and a walk cycle.
pub fn fixture(config: &ModelConfig, seed: u64) -> Fixture {
    let dense = random_avatar(config, seed).expect("synthetic avatar");
    let poses = generate_pose_sequence(
        32,
        seed,
        PoseStyle::Walk { period: 32 },
        config.pose_dim,
        config.expr_dim,
    );
    let report = collect_correctives(&dense, &poses[..8])
        .and_then(|acc| acc.finish())
        .expect("variances");
    let pruned = prune(&dense, &select_topk(&report, config.n_pruned_keep)).expect("prune");
    Fixture { dense, pruned, poses }
}
