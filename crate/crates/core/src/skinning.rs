//! Forward kinematics and linear blend skinning.

use glam::{DQuat, DVec3, Mat3, Quat, Vec3};

use crate::corrective::{CanonicalGaussians, GaussianSet, PosedGaussians};
use crate::error::{Error, Result};
use crate::model::Skeleton;

/// Rotation followed by translation, in f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub rotation: DQuat,
    pub translation: DVec3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rotation: DQuat::IDENTITY,
        translation: DVec3::ZERO,
    };

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rotation: (self.rotation * other.rotation).normalize(),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let inv = self.rotation.conjugate();
        Rigid {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn apply(&self, p: DVec3) -> DVec3 {
        self.rotation * p + self.translation
    }
}

/// World transform of every joint and the skinning transform that maps rest
/// space to posed space.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms {
    pub world: Vec<Rigid>,
    pub rest_world: Vec<Rigid>,
    pub skinning: Vec<Rigid>,
    /// Skinning transform is exactly the identity.
    pub identity: Vec<bool>,
}

/// Rotation for an axis-angle vector; zero maps to the identity exactly.
pub fn axis_angle(v: [f32; 3]) -> DQuat {
    let v = DVec3::new(v[0] as f64, v[1] as f64, v[2] as f64);
    let angle = v.length();
    if angle == 0.0 {
        DQuat::IDENTITY
    } else {
        DQuat::from_axis_angle(v / angle, angle)
    }
}

fn rest_local(skeleton: &Skeleton, j: usize) -> Rigid {
    let joint = &skeleton.joints[j];
    let r = joint.rest_rotation;
    let t = joint.rest_translation;
    Rigid {
        rotation: DQuat::from_xyzw(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64).normalize(),
        translation: DVec3::new(t[0] as f64, t[1] as f64, t[2] as f64),
    }
}

/// Forward kinematics. Joint 0 is the unposed root and joint `j >= 1` reads
/// `theta_p[3(j-1)..3j]` as an axis-angle rotation about its rest frame.
///
/// Skinning transforms are accumulated as `S_j = S_parent ∘ C_j` where `C_j`
/// rotates about the joint's rest pivot, so joints whose whole chain is at
/// rest get the identity exactly.
pub fn pose_to_joint_transforms(skeleton: &Skeleton, theta_p: &[f32]) -> Result<JointTransforms> {
    let n = skeleton.len();
    if n == 0 {
        return Err(Error::Shape("skeleton has no joints".into()));
    }
    if theta_p.len() != 3 * (n - 1) {
        return Err(Error::Shape(format!(
            "pose has {} values, skeleton with {n} joints expects {}",
            theta_p.len(),
            3 * (n - 1)
        )));
    }
    if theta_p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePose);
    }
    let mut rest_world: Vec<Rigid> = Vec::with_capacity(n);
    let mut skinning: Vec<Rigid> = Vec::with_capacity(n);
    let mut identity: Vec<bool> = Vec::with_capacity(n);
    for j in 0..n {
        let local = rest_local(skeleton, j);
        let (rw, parent_s, parent_id) = match skeleton.joints[j].parent {
            None => (local, Rigid::IDENTITY, true),
            Some(p) if p < j => (rest_world[p].compose(&local), skinning[p], identity[p]),
            Some(p) => {
                return Err(Error::Shape(format!(
                    "joint {j} has parent {p} that does not precede it"
                )));
            }
        };
        let theta = if j == 0 {
            [0.0; 3]
        } else {
            [theta_p[3 * (j - 1)], theta_p[3 * (j - 1) + 1], theta_p[3 * (j - 1) + 2]]
        };
        let (s, is_id) = if theta == [0.0; 3] {
            (parent_s, parent_id)
        } else {
            let r = Rigid {
                rotation: axis_angle(theta),
                translation: DVec3::ZERO,
            };
            let c = rw.compose(&r).compose(&rw.inverse());
            let s = if parent_id { c } else { parent_s.compose(&c) };
            (s, false)
        };
        rest_world.push(rw);
        skinning.push(s);
        identity.push(is_id);
    }
    let world = skinning.iter().zip(&rest_world).map(|(s, rw)| s.compose(rw)).collect();
    Ok(JointTransforms {
        world,
        rest_world,
        skinning,
        identity,
    })
}

/// Single-precision skinning transform of every joint; exact identity for
/// joints flagged as such.
pub fn skinning_matrices(transforms: &JointTransforms) -> Vec<(Mat3, Vec3)> {
    transforms
        .skinning
        .iter()
        .zip(&transforms.identity)
        .map(|(s, &id)| {
            if id {
                (Mat3::IDENTITY, Vec3::ZERO)
            } else {
                (Mat3::from_quat(s.rotation.as_quat()), s.translation.as_vec3())
            }
        })
        .collect()
}

/// [`skinning_matrices`] as row-major 3x4 matrices, translation in the last column.
pub fn skinning_rows(transforms: &JointTransforms) -> Vec<[[f32; 4]; 3]> {
    skinning_matrices(transforms)
        .into_iter()
        .map(|(m, t)| {
            let r = m.transpose();
            [
                [r.x_axis.x, r.x_axis.y, r.x_axis.z, t.x],
                [r.y_axis.x, r.y_axis.y, r.y_axis.z, t.y],
                [r.z_axis.x, r.z_axis.y, r.z_axis.z, t.z],
            ]
        })
        .collect()
}

/// Blends the skinning transforms of up to four joints per Gaussian as 3x4
/// matrices, transforms the position and rotates the orientation by the
/// quaternion extracted from the blended linear part.
///
/// The blend is evaluated relative to the first joint,
/// `T = T0 + sum_k w_k (T_k - T0)`, so Gaussians bound only to identity
/// transforms come out bit-identical.
pub fn skin_gaussians(
    canonical: &CanonicalGaussians,
    skin_joints: &[[u16; 4]],
    skin_weights: &[[f32; 4]],
    transforms: &JointTransforms,
) -> Result<PosedGaussians> {
    let n = canonical.len();
    if skin_joints.len() != n || skin_weights.len() != n {
        return Err(Error::Shape(format!(
            "skinning data for {} Gaussians, expected {n}",
            skin_joints.len()
        )));
    }
    let n_joints = transforms.skinning.len();
    let mats = skinning_matrices(transforms);
    let mut out = GaussianSet {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: canonical.scales.clone(),
        colors: canonical.colors.clone(),
        opacities: canonical.opacities.clone(),
    };
    for k in 0..n {
        let joints = skin_joints[k];
        let w = skin_weights[k];
        if let Some(&bad) = joints.iter().find(|&&j| j as usize >= n_joints) {
            return Err(Error::Shape(format!("Gaussian {k} is bound to missing joint {bad}")));
        }
        let (m0, t0) = mats[joints[0] as usize];
        let mut m = m0;
        let mut t = t0;
        for i in 1..4 {
            if w[i] != 0.0 {
                let (mi, ti) = mats[joints[i] as usize];
                m += (mi - m0) * w[i];
                t += (ti - t0) * w[i];
            }
        }
        let p = Vec3::from_array(canonical.positions[k]);
        out.positions.push((m * p + t).to_array());
        let r = canonical.rotations[k];
        if m == Mat3::IDENTITY {
            out.rotations.push(r);
        } else {
            let q = Quat::from_mat3(&m).normalize();
            let posed = (q * Quat::from_array(r)).normalize();
            out.rotations.push(posed.to_array());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Joint;
    use nalgebra::{Matrix4, Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn joint(parent: Option<usize>, t: [f32; 3]) -> Joint {
        Joint {
            parent,
            rest_rotation: [0.0, 0.0, 0.0, 1.0],
            rest_translation: t,
        }
    }

    fn set(positions: Vec<[f32; 3]>) -> GaussianSet {
        let n = positions.len();
        GaussianSet {
            positions,
            rotations: vec![[0.0, 0.0, 0.0, 1.0]; n],
            scales: vec![[0.1; 3]; n],
            colors: vec![[0.5; 3]; n],
            opacities: vec![1.0; n],
        }
    }

    fn mat4(rot: Rotation3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
        let mut m = rot.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    #[test]
    fn rest_pose_is_identity() {
        let sk = Skeleton {
            joints: vec![
                joint(None, [0.0, 1.0, 0.0]),
                joint(Some(0), [0.0, 0.5, 0.0]),
                joint(Some(1), [0.3, 0.0, 0.0]),
            ],
        };
        let t = pose_to_joint_transforms(&sk, &[0.0; 6]).unwrap();
        assert!(t.identity.iter().all(|&b| b));
        assert!(t.skinning.iter().all(|s| *s == Rigid::IDENTITY));
        let g = set(vec![[0.1, 0.2, 0.3], [1.0, -2.0, 0.5]]);
        let posed = skin_gaussians(
            &g,
            &[[1, 2, 0, 0], [0, 0, 0, 0]],
            &[[0.3, 0.7, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
            &t,
        )
        .unwrap();
        assert_eq!(posed, g);
    }

    #[test]
    fn quarter_turn_about_z() {
        let sk = Skeleton {
            joints: vec![joint(None, [0.0; 3]), joint(Some(0), [0.0; 3])],
        };
        let half_pi = std::f32::consts::FRAC_PI_2;
        let t = pose_to_joint_transforms(&sk, &[0.0, 0.0, half_pi]).unwrap();
        let g = set(vec![[1.0, 0.0, 0.0]]);
        let posed = skin_gaussians(&g, &[[1, 0, 0, 0]], &[[1.0, 0.0, 0.0, 0.0]], &t).unwrap();
        let p = posed.positions[0];
        assert!((p[0] - 0.0).abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6 && p[2].abs() < 1e-6);
    }

    #[test]
    fn two_translations_average() {
        let t1 = DVec3::new(1.0, 2.0, 3.0);
        let t2 = DVec3::new(-3.0, 0.5, 1.0);
        let rig = |t| Rigid {
            rotation: DQuat::IDENTITY,
            translation: t,
        };
        let transforms = JointTransforms {
            world: vec![rig(t1), rig(t2)],
            rest_world: vec![Rigid::IDENTITY; 2],
            skinning: vec![rig(t1), rig(t2)],
            identity: vec![false, false],
        };
        let g = set(vec![[0.25, -0.5, 2.0]]);
        let posed = skin_gaussians(&g, &[[0, 1, 0, 0]], &[[0.5, 0.5, 0.0, 0.0]], &transforms).unwrap();
        let want = [0.25 - 1.0, -0.5 + 1.25, 2.0 + 2.0];
        for c in 0..3 {
            assert!((posed.positions[0][c] - want[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn chain_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut joints = vec![joint(None, [rng.random_range(-1.0..1.0), 0.0, 0.0])];
            for j in 1..5 {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                );
                let q = nalgebra::UnitQuaternion::from_axis_angle(
                    &nalgebra::Unit::new_normalize(axis),
                    rng.random_range(-1.0..1.0),
                );
                joints.push(Joint {
                    parent: Some(j - 1),
                    rest_rotation: [q.i as f32, q.j as f32, q.k as f32, q.w as f32],
                    rest_translation: [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ],
                });
            }
            let sk = Skeleton { joints };
            let theta: Vec<f32> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = pose_to_joint_transforms(&sk, &theta).unwrap();
            // Oracle: world_j = world_parent * T_rest_j * R(theta_j) as 4x4 matrices.
            let mut world: Vec<Matrix4<f64>> = Vec::new();
            for (j, jt) in sk.joints.iter().enumerate() {
                let r = jt.rest_rotation;
                let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    r[3] as f64,
                    r[0] as f64,
                    r[1] as f64,
                    r[2] as f64,
                ));
                let tr = jt.rest_translation;
                let rest = mat4(
                    q.to_rotation_matrix(),
                    Vector3::new(tr[0] as f64, tr[1] as f64, tr[2] as f64),
                );
                let pose = if j == 0 {
                    Matrix4::identity()
                } else {
                    let v = Vector3::new(
                        theta[3 * j - 3] as f64,
                        theta[3 * j - 2] as f64,
                        theta[3 * j - 1] as f64,
                    );
                    Rotation3::new(v).to_homogeneous()
                };
                let local = rest * pose;
                let w = match jt.parent {
                    Some(p) => world[p] * local,
                    None => local,
                };
                world.push(w);
            }
            for j in 0..5 {
                let w = &world[j];
                let got = t.world[j];
                let origin = got.translation;
                for c in 0..3 {
                    assert!((origin[c] - w[(c, 3)]).abs() < 1e-6);
                }
                let m = glam::DMat3::from_quat(got.rotation);
                for r in 0..3 {
                    for c in 0..3 {
                        assert!((m.col(c)[r] - w[(r, c)]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_pose_length_is_rejected() {
        let sk = Skeleton {
            joints: vec![joint(None, [0.0; 3]), joint(Some(0), [0.0; 3])],
        };
        assert!(matches!(pose_to_joint_transforms(&sk, &[0.0; 4]), Err(Error::Shape(_))));
        assert!(matches!(
            pose_to_joint_transforms(&sk, &[f32::NAN, 0.0, 0.0]),
            Err(Error::NonFinitePose)
        ));
    }
}
