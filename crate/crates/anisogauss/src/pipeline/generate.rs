//! Procedural fixture scenes: a plane+box room, two anisotropic
//! cluster shells, and a textureless wall, each with per-Gaussian
//! class labels and an orbit camera rig.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{empty_sh, Camera, Scene, SemanticGaussian};
use crate::splat::sh::SH_C0;

/// Ground-truth scene plus the degraded copy training starts from.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub gt: Scene,
    pub init: Scene,
    /// Class label per ground-truth Gaussian.
    pub labels: Vec<usize>,
    /// One row per class, each of the scene's semantic dimension.
    pub class_embeddings: Vec<Vec<f64>>,
    /// Ground-truth indices of the high-detail patch (room only).
    pub patch_indices: Vec<usize>,
    /// Ground-truth indices with view-dependent color (clusters only).
    pub view_dependent: Vec<bool>,
}

fn set_dc(g: &mut SemanticGaussian, rgb: [f64; 3]) {
    for ch in 0..3 {
        g.sh_coeffs[0][ch] = (rgb[ch] - 0.5) / SH_C0;
    }
}

/// Higher-degree blocks drawn uniformly with per-degree amplitude.
fn set_view_dependent(g: &mut SemanticGaussian, rng: &mut ChaCha8Rng, amps: [f64; 3]) {
    for l in 1..4 {
        let a = amps[l - 1];
        for c in g.sh_coeffs[l].iter_mut() {
            *c = rng.gen_range(-a..a);
        }
    }
}

/// One-hot class embeddings when the feature dimension allows,
/// otherwise seeded random unit vectors.
pub fn class_embeddings(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    if dim >= classes {
        (0..classes)
            .map(|c| {
                let mut e = vec![0.0; dim];
                e[c] = 1.0;
                e
            })
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE1B);
        (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }
}

fn flat_gaussian(
    center: Vector3<f64>,
    tangent_scale: f64,
    normal_scale: f64,
    normal_axis: usize,
    opacity: f64,
) -> SemanticGaussian {
    let mut scale = Vector3::new(tangent_scale, tangent_scale, tangent_scale);
    scale[normal_axis] = normal_scale;
    SemanticGaussian {
        center,
        rotation: UnitQuaternion::identity(),
        scale,
        opacity,
        sh_coeffs: empty_sh(),
        semantic_feature: Vec::new(),
    }
}

/// Plane floor with a box on it and one high-frequency detail patch.
/// Gaussian budget splits 55/30/15 across floor, box and patch; the
/// `redundancy` fraction appends jittered duplicates.
pub fn room(count: usize, semantic_dim: usize, redundancy: f64, seed: u64) -> GeneratedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::new();
    let mut labels = Vec::new();
    let mut patch_indices = Vec::new();

    let n_floor = (count as f64 * 0.55) as usize;
    let n_box = (count as f64 * 0.30) as usize;
    let n_patch = count.saturating_sub(n_floor + n_box);

    for _ in 0..n_floor {
        let x = rng.gen_range(-2.0..2.0);
        let z = rng.gen_range(-2.0..2.0);
        let mut g = flat_gaussian(
            Vector3::new(x, -1.0, z),
            0.16,
            0.03,
            1,
            rng.gen_range(0.75..0.95),
        );
        let checker = ((x.floor() as i64 + z.floor() as i64).rem_euclid(2)) == 0;
        let base = if checker { [0.72, 0.66, 0.55] } else { [0.35, 0.38, 0.45] };
        let jit = rng.gen_range(-0.04..0.04);
        set_dc(&mut g, [base[0] + jit, base[1] + jit, base[2] + jit]);
        gaussians.push(g);
        labels.push(0);
    }

    let face_colors = [
        [0.85, 0.30, 0.25],
        [0.25, 0.70, 0.35],
        [0.25, 0.40, 0.85],
        [0.85, 0.75, 0.25],
        [0.70, 0.30, 0.75],
        [0.30, 0.75, 0.75],
    ];
    let half = 0.55;
    let box_center = Vector3::new(0.0, -0.45, 0.0);
    for _ in 0..n_box {
        let face = rng.gen_range(0..6usize);
        let axis = face / 2;
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let u = rng.gen_range(-half..half);
        let v = rng.gen_range(-half..half);
        let mut offset = Vector3::zeros();
        offset[axis] = sign * half;
        offset[(axis + 1) % 3] = u;
        offset[(axis + 2) % 3] = v;
        let mut g = flat_gaussian(
            box_center + offset,
            0.11,
            0.02,
            axis,
            rng.gen_range(0.8..0.95),
        );
        set_dc(&mut g, face_colors[face]);
        if rng.gen_bool(0.4) {
            set_view_dependent(&mut g, &mut rng, [0.18, 0.08, 0.05]);
        }
        gaussians.push(g);
        labels.push(1);
    }

    let patch_center = Vector3::new(0.0, 0.12, 0.0);
    for _ in 0..n_patch {
        let r = rng.gen_range(0.0f64..1.0).sqrt() * 0.45;
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        let p = patch_center + Vector3::new(r * t.cos(), 0.0, r * t.sin());
        let mut g = flat_gaussian(p, 0.06, 0.02, 1, rng.gen_range(0.85..0.98));
        // binary red/white texture on top of the box, at a frequency
        // the coarse box splats cannot express, so an under-covered
        // patch costs measurable PSNR
        let s = (18.0 * p.x).sin() * (18.0 * p.z).sin();
        let dc = if s > 0.0 { [0.9, 0.18, 0.14] } else { [0.92, 0.88, 0.82] };
        set_dc(&mut g, dc);
        patch_indices.push(gaussians.len());
        gaussians.push(g);
        labels.push(2);
    }

    let n_dup = (count as f64 * redundancy) as usize;
    for k in 0..n_dup {
        let src = k % gaussians.len();
        let mut g = gaussians[src].clone();
        g.center += Vector3::new(
            rng.gen_range(-0.01..0.01),
            rng.gen_range(-0.01..0.01),
            rng.gen_range(-0.01..0.01),
        );
        let label = labels[src];
        gaussians.push(g);
        labels.push(label);
    }

    finish(gaussians, labels, patch_indices, Vec::new(), semantic_dim, seed)
}

/// Two ellipsoidal shells: the left cluster is matte (degree 0 only),
/// the right carries strong view-dependent SH.
pub fn clusters(count: usize, semantic_dim: usize, seed: u64) -> GeneratedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::new();
    let mut labels = Vec::new();
    let mut view_dependent = Vec::new();
    let radii = Vector3::new(0.85, 0.55, 0.45);
    for side in 0..2 {
        let cluster = Vector3::new(if side == 0 { -1.1 } else { 1.1 }, 0.0, 0.0);
        for _ in 0..count / 2 {
            // upper-hemisphere shells only: every member stays visible
            // from the elevated camera rig, so appearance terms are
            // constrained by observations rather than left free
            let d = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(0.05..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm_squared() > 1e-6 && v.norm_squared() <= 1.0 {
                    break v.normalize();
                }
            };
            let center = cluster + d.component_mul(&radii);
            let axis = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm_squared() > 1e-6 {
                    break v.normalize();
                }
            };
            let mut g = SemanticGaussian {
                center,
                rotation: UnitQuaternion::from_axis_angle(
                    &nalgebra::Unit::new_normalize(axis),
                    rng.gen_range(0.0..std::f64::consts::PI),
                ),
                scale: Vector3::new(
                    rng.gen_range(0.1..0.18),
                    rng.gen_range(0.05..0.1),
                    rng.gen_range(0.025..0.05),
                ),
                opacity: rng.gen_range(0.7..0.95),
                sh_coeffs: empty_sh(),
                semantic_feature: Vec::new(),
            };
            let tone = 0.35 + 0.5 * (0.5 + 0.5 * (3.0 * center.y).sin());
            if side == 0 {
                set_dc(&mut g, [tone, tone * 0.9, tone * 0.75]);
            } else {
                set_dc(&mut g, [tone * 0.7, tone * 0.85, tone]);
                // degree 3 is strong on purpose: behavioral checks need
                // its removal to be visibly punished; amplitudes stay
                // small enough that colors rarely clamp
                set_view_dependent(&mut g, &mut rng, [0.2, 0.1, 0.6]);
            }
            gaussians.push(g);
            labels.push(side);
            view_dependent.push(side == 1);
        }
    }
    finish(gaussians, labels, Vec::new(), view_dependent, semantic_dim, seed)
}

/// Textureless wall in the xy plane: uniform color, no view dependence.
pub fn wall(count: usize, semantic_dim: usize, seed: u64) -> GeneratedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::new();
    for _ in 0..count {
        let x = rng.gen_range(-1.5..1.5);
        let y = rng.gen_range(-1.5..1.5);
        let mut g = flat_gaussian(
            Vector3::new(x, y, 0.0),
            0.14,
            0.02,
            2,
            rng.gen_range(0.8..0.95),
        );
        set_dc(&mut g, [0.62, 0.57, 0.5]);
        gaussians.push(g);
    }
    let labels = vec![0; count];
    finish(gaussians, labels, Vec::new(), Vec::new(), semantic_dim, seed)
}

/// Two isotropic Gaussians a unit apart; the smallest scene the
/// descriptor pipeline accepts, used by `describe` checks.
pub fn fixture2(semantic_dim: usize, seed: u64) -> GeneratedScene {
    let mut a = SemanticGaussian::isotropic(Vector3::new(0.0, 0.0, 0.0), 0.3, 0.8);
    let mut b = SemanticGaussian::isotropic(Vector3::new(1.0, 0.0, 0.0), 0.3, 0.8);
    set_dc(&mut a, [0.6, 0.6, 0.6]);
    set_dc(&mut b, [0.4, 0.4, 0.4]);
    finish(vec![a, b], vec![0, 0], Vec::new(), Vec::new(), semantic_dim, seed)
}

/// Attaches class-embedding semantic features to the ground truth,
/// then derives the degraded training copy: gray color, tiny random
/// higher-degree SH, random features, patch Gaussians removed when a
/// hole is requested (by the caller via `carve_hole`).
fn finish(
    mut gaussians: Vec<SemanticGaussian>,
    labels: Vec<usize>,
    patch_indices: Vec<usize>,
    view_dependent: Vec<bool>,
    semantic_dim: usize,
    seed: u64,
) -> GeneratedScene {
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let embeddings = class_embeddings(classes, semantic_dim, seed);
    for (g, &l) in gaussians.iter_mut().zip(&labels) {
        g.semantic_feature = embeddings[l].clone();
    }
    let gt = Scene::new(gaussians, semantic_dim);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1217);
    let mut init_gaussians = gt.gaussians.clone();
    for g in init_gaussians.iter_mut() {
        for c in g.sh_coeffs[0].iter_mut() {
            *c = rng.gen_range(-0.15..0.15);
        }
        for l in 1..4 {
            for c in g.sh_coeffs[l].iter_mut() {
                *c = rng.gen_range(-0.02..0.02);
            }
        }
        for f in g.semantic_feature.iter_mut() {
            *f = rng.gen_range(-0.1..0.1);
        }
    }
    let init = Scene::new(init_gaussians, semantic_dim);
    GeneratedScene { gt, init, labels, class_embeddings: embeddings, patch_indices, view_dependent }
}

impl GeneratedScene {
    /// Removes most patch Gaussians from the training copy only,
    /// leaving the ground truth (and its renders) intact. Keeps every
    /// sixth patch member so the region is sparsely covered, not
    /// empty. Returns indices removed from the init scene.
    pub fn carve_hole(&mut self) -> Vec<usize> {
        let remove: Vec<usize> = self
            .patch_indices
            .iter()
            .enumerate()
            .filter(|(k, _)| k % 6 != 0)
            .map(|(_, &i)| i)
            .collect();
        let drop: std::collections::BTreeSet<usize> = remove.iter().copied().collect();
        let kept: Vec<SemanticGaussian> = self
            .init
            .gaussians
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, g)| g.clone())
            .collect();
        self.init = Scene::new(kept, self.init.semantic_dim);
        remove
    }
}

/// Evenly spaced orbit around `target`; the eye sits `elevation`
/// radius-fractions above the orbit plane. Cameras cycle through the
/// given elevation tiers; multiple tiers cover a 2D patch of the view
/// sphere, while a single tier keeps every eye on one cone and leaves
/// higher-degree appearance underdetermined.
pub fn orbit_cameras(
    target: Vector3<f64>,
    radius: f64,
    count: usize,
    elevations: &[f64],
    fx: f64,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / count as f64;
            let elevation = elevations[k % elevations.len()];
            let eye = target
                + Vector3::new(radius * theta.cos(), elevation * radius, radius * theta.sin());
            Camera::look_at(Point3::from(eye), Point3::from(target), fx, width, height, near, far)
        })
        .collect()
}
