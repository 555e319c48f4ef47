//! Full per-frame decode: pose features, correctives, skinning.

use std::time::Instant;

use serde::Serialize;

use crate::corrective::{
    apply_correctives, combine_into, compute_node_offsets, interpolate_positions, CanonicalGaussians, Correctives,
    PosedGaussians,
};
use crate::error::Result;
use crate::model::AvatarModel;
use crate::pose::{encode_pose, LocalFeatures, Pose};
use crate::skinning::{pose_to_joint_transforms, skin_gaussians};

/// Wall-clock time spent in each stage of a frame, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub mlp_ms: f64,
    pub blendshape_ms: f64,
    pub lbs_ms: f64,
    pub projection_ms: f64,
    pub sort_ms: f64,
    pub raster_ms: f64,
}

impl StageTimings {
    pub fn decode_ms(&self) -> f64 {
        self.mlp_ms + self.blendshape_ms + self.lbs_ms
    }

    pub fn render_ms(&self) -> f64 {
        self.projection_ms + self.sort_ms + self.raster_ms
    }

    pub fn total_ms(&self) -> f64 {
        self.decode_ms() + self.render_ms()
    }

    pub fn stages(&self) -> [(&'static str, f64); 6] {
        [
            ("mlp", self.mlp_ms),
            ("blendshape", self.blendshape_ms),
            ("lbs", self.lbs_ms),
            ("projection", self.projection_ms),
            ("sort", self.sort_ms),
            ("raster", self.raster_ms),
        ]
    }

    pub fn accumulate(&mut self, other: &StageTimings) {
        self.mlp_ms += other.mlp_ms;
        self.blendshape_ms += other.blendshape_ms;
        self.lbs_ms += other.lbs_ms;
        self.projection_ms += other.projection_ms;
        self.sort_ms += other.sort_ms;
        self.raster_ms += other.raster_ms;
    }

    pub fn scaled(&self, f: f64) -> StageTimings {
        StageTimings {
            mlp_ms: self.mlp_ms * f,
            blendshape_ms: self.blendshape_ms * f,
            lbs_ms: self.lbs_ms * f,
            projection_ms: self.projection_ms * f,
            sort_ms: self.sort_ms * f,
            raster_ms: self.raster_ms * f,
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// All attribute and position correctives for the given features.
pub fn correctives_from_features(model: &AvatarModel, features: &LocalFeatures) -> Result<Correctives> {
    let mut corr = Correctives::default();
    combine_into(model, features, &mut corr)?;
    let node_offsets = compute_node_offsets(model, features)?;
    corr.position = interpolate_positions(&model.nodes, &node_offsets)?;
    Ok(corr)
}

/// Correctives for a pose.
pub fn decode_correctives(model: &AvatarModel, pose: &Pose) -> Result<Correctives> {
    let features = encode_pose(model, pose)?;
    correctives_from_features(model, &features)
}

/// Canonical-space Gaussians for a pose, before skinning.
pub fn decode_canonical(model: &AvatarModel, pose: &Pose) -> Result<CanonicalGaussians> {
    apply_correctives(&model.neutral, &decode_correctives(model, pose)?)
}

/// Decodes a pose into posed Gaussians and reports per-stage timings.
pub fn decode_frame(model: &AvatarModel, pose: &Pose) -> Result<(PosedGaussians, StageTimings)> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let features = encode_pose(model, pose)?;
    timings.mlp_ms = ms(t);

    let t = Instant::now();
    let corr = correctives_from_features(model, &features)?;
    timings.blendshape_ms = ms(t);

    let t = Instant::now();
    let canonical = apply_correctives(&model.neutral, &corr)?;
    let transforms = pose_to_joint_transforms(&model.skeleton, &pose.theta_p)?;
    let posed = skin_gaussians(
        &canonical,
        &model.neutral.skin_joints,
        &model.neutral.skin_weights,
        &transforms,
    )?;
    timings.lbs_ms = ms(t);
    Ok((posed, timings))
}
