//! Pose-driven 3D Gaussian avatars: model, decoding, pruning and rendering.

pub mod corrective;
pub mod decode;
pub mod error;
pub mod fit;
pub mod format;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pca;
pub mod pipeline;
pub mod pose;
pub mod prune;
pub mod quant;
pub mod render;
pub mod skinning;
pub mod spatial;
pub mod synth;
pub mod validate;

pub use corrective::{
    apply_correctives, combine_blendshapes, compute_node_offsets, interpolate_positions, CanonicalGaussians,
    Correctives, GaussianSet, PosedGaussians,
};
pub use decode::{decode_frame, StageTimings};
pub use error::{Error, ParseErrorKind, Result};
pub use format::{load_model, parse_model, save_model, size_report, SizeReport};
pub use model::*;
pub use pose::{encode_pose, mlp_forward, project_pose, LocalFeatures, Pose};
pub use prune::{constraint_loss, prune, select_topk, ConstraintWeights, RetainedSets, VarianceReport};
pub use render::{project_gaussians, rasterize_cpu, render_frame, Camera, Image, Splat2D};
pub use skinning::{pose_to_joint_transforms, skin_gaussians, JointTransforms};
pub use validate::validate;
