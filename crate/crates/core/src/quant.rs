//! Float16 quantization helpers.

use half::f16;

use crate::model::{AttributeBlendshapes, AvatarModel, Precision};

pub const F16_MAX: f32 = 65504.0;

/// Round-to-nearest-even conversion; `None` for non-finite or out-of-range input.
pub fn to_f16(v: f32) -> Option<f16> {
    if !v.is_finite() || v.abs() > F16_MAX {
        return None;
    }
    Some(f16::from_f32(v))
}

/// Value after a float16 round trip. Out-of-range input saturates to infinity.
pub fn round_f16(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

fn round_slice(v: &mut [f32]) {
    for x in v {
        *x = round_f16(*x);
    }
}

fn round_arrays<const N: usize>(v: &mut [[f32; N]]) {
    for a in v {
        round_slice(a);
    }
}

/// Rounds every real-valued parameter of `model` to float16 and marks it as
/// float16-precision. The node interpolation table is rebuilt from the rounded
/// positions, matching what a quantized container decodes to.
pub fn quantize_model(model: &mut AvatarModel) {
    let g = &mut model.neutral;
    round_arrays(&mut g.positions);
    round_arrays(&mut g.rotations);
    round_arrays(&mut g.log_scales);
    round_arrays(&mut g.colors);
    round_slice(&mut g.opacities);
    round_arrays(&mut g.skin_weights);
    for part in &mut model.mlp.parts {
        for layer in &mut part.layers {
            round_slice(&mut layer.weights);
            round_slice(&mut layer.bias);
        }
    }
    match &mut model.blendshapes {
        AttributeBlendshapes::Dense(c) => round_slice(c),
        AttributeBlendshapes::Sparse(s) => {
            for a in &mut s.attributes {
                round_slice(&mut a.coeffs);
            }
        }
    }
    round_slice(&mut model.nodes.blendshapes);
    for j in &mut model.skeleton.joints {
        round_slice(&mut j.rest_rotation);
        round_slice(&mut j.rest_translation);
    }
    if let Some(b) = &mut model.pose_basis {
        round_slice(&mut b.mean);
        round_slice(&mut b.basis);
    }
    let (idx, w) = crate::spatial::knn_table(&model.neutral.positions, &model.nodes.gaussian_index);
    model.nodes.knn_nodes = idx;
    model.nodes.knn_weights = w;
    model.config.precision = Precision::F16;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(to_f16(65504.0).is_some());
        assert!(to_f16(65505.0).is_none());
        assert!(to_f16(-1e6).is_none());
        assert!(to_f16(f32::NAN).is_none());
    }

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-11 lies halfway between 1 and 1 + 2^-10.
        assert_eq!(round_f16(1.0 + 2f32.powi(-11)), 1.0);
        assert_eq!(round_f16(1.0 + 3.0 * 2f32.powi(-11)), 1.0 + 2.0 * 2f32.powi(-10));
    }

    proptest! {
        #[test]
        fn quantization_error_bound(v in -8.0f32..8.0) {
            let err = (round_f16(v) - v).abs();
            prop_assert!(err <= 2f32.powi(-10) * v.abs() + 2f32.powi(-24));
        }
    }
}
