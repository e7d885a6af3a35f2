//! Gaussian scene data model, ingestion, camera geometry, farthest
//! point sampling and neighborhood queries.

mod io;

pub use io::{load_scene, save_scene_json, SceneFormat};

use nalgebra::{Isometry3, Matrix3, Point3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Semantic feature dimension is per-scene; SH degrees are fixed 0..3.
pub const SH_DEGREES: usize = 4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("missing mandatory attribute: {0}")]
    Schema(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("sample count {requested} exceeds point count {available}")]
    Count { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One scene primitive: an anisotropic Gaussian with SH color and a
/// semantic feature vector.
#[derive(Debug, Clone)]
pub struct SemanticGaussian {
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Linear (not log) scales along the principal axes.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    /// SH blocks per degree l in 0..=3; block l holds (2l+1)*3 values,
    /// coefficient-major (each coefficient stores r,g,b).
    pub sh_coeffs: [Vec<f64>; SH_DEGREES],
    pub semantic_feature: Vec<f64>,
}

impl SemanticGaussian {
    pub fn isotropic(center: Vector3<f64>, scale: f64, opacity: f64) -> Self {
        Self {
            center,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(scale, scale, scale),
            opacity,
            sh_coeffs: empty_sh(),
            semantic_feature: Vec::new(),
        }
    }

    /// Covariance R diag(s^2) R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let d = Matrix3::from_diagonal(&self.scale.map(|s| s * s));
        r * d * r.transpose()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(SceneError::Value("rotation quaternion not unit".into()));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(SceneError::Value(format!("non-positive scale {:?}", self.scale)));
        }
        if !(-1e-6..=1.0 + 1e-6).contains(&self.opacity) {
            return Err(SceneError::Value(format!("opacity {} outside [0,1]", self.opacity)));
        }
        for (l, block) in self.sh_coeffs.iter().enumerate() {
            if block.len() != (2 * l + 1) * 3 {
                return Err(SceneError::Value(format!(
                    "SH degree {} block has {} entries, expected {}",
                    l,
                    block.len(),
                    (2 * l + 1) * 3
                )));
            }
        }
        Ok(())
    }
}

pub fn empty_sh() -> [Vec<f64>; SH_DEGREES] {
    [vec![0.0; 3], vec![0.0; 9], vec![0.0; 15], vec![0.0; 21]]
}

/// Pinhole camera with a rigid world-to-camera pose.
#[derive(Debug, Clone)]
pub struct Camera {
    pub pose: Isometry3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.near <= 0.0 || self.far <= self.near {
            return Err(SceneError::Value("camera near/far invalid".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(SceneError::Value("focal lengths must be positive".into()));
        }
        Ok(())
    }

    /// Looking at `target` from `eye` with +Y up in world space.
    /// Camera convention: +Z forward, +X right, +Y down in image.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        fx: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let world_up = Vector3::new(0.0, 1.0, 0.0);
        let right = forward.cross(&world_up);
        let right = if right.norm() < 1e-9 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            right.normalize()
        };
        let down = forward.cross(&right).normalize();
        let rot = Matrix3::from_columns(&[right, down, forward]).transpose();
        let rot = nalgebra::Rotation3::from_matrix_unchecked(rot);
        let iso = Isometry3::from_parts(
            nalgebra::Translation3::from(-(rot * eye.coords)),
            UnitQuaternion::from_rotation_matrix(&rot),
        );
        Camera {
            pose: iso,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near,
            far,
        }
    }
}

/// A frustum-restricted neighborhood of a local center.
#[derive(Debug, Clone)]
pub struct LocalRegion {
    pub center_index: usize,
    /// Sorted ascending; always contains `center_index`.
    pub member_indices: Vec<usize>,
    pub radius: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SceneMetadata {
    pub source: Option<String>,
    pub unit_scale: f64,
}

/// Ordered Gaussian collection. Indices are stable within a pipeline
/// phase; mutation happens only between phases.
#[derive(Debug, Clone)]
pub struct Scene {
    pub gaussians: Vec<SemanticGaussian>,
    pub semantic_dim: usize,
    pub metadata: SceneMetadata,
}

impl Scene {
    pub fn new(gaussians: Vec<SemanticGaussian>, semantic_dim: usize) -> Self {
        Self {
            gaussians,
            semantic_dim,
            metadata: SceneMetadata { source: None, unit_scale: 1.0 },
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.center).collect()
    }

    /// Largest pairwise extent along any axis.
    pub fn extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.center);
            hi = hi.sup(&g.center);
        }
        (hi - lo).amax().max(0.0)
    }
}

/// Signed distance from the six frustum planes; a point is inside when
/// all six values are >= -tol.
fn frustum_margins(camera: &Camera, p_world: &Vector3<f64>) -> [f64; 6] {
    let p = camera.pose * Point3::from(*p_world);
    let (x, y, z) = (p.x, p.y, p.z);
    // image-plane half extents at unit depth
    let x_hi = (camera.width as f64 - camera.cx) / camera.fx;
    let x_lo = -camera.cx / camera.fx;
    let y_hi = (camera.height as f64 - camera.cy) / camera.fy;
    let y_lo = -camera.cy / camera.fy;
    [
        z - camera.near,
        camera.far - z,
        x - x_lo * z,
        x_hi * z - x,
        y - y_lo * z,
        y_hi * z - y,
    ]
}

/// Indices of Gaussians whose centers lie inside the camera frustum,
/// order preserved.
pub fn frustum_cull(scene: &Scene, camera: &Camera) -> Vec<usize> {
    const TOL: f64 = 1e-9;
    scene
        .gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| frustum_margins(camera, &g.center).iter().all(|&m| m >= -TOL))
        .map(|(i, _)| i)
        .collect()
}

/// Deterministic greedy farthest point sampling over `points`,
/// restricted to the identity of the provided indices. Ties break
/// toward the lowest index.
pub fn farthest_point_sample(
    points: &[Vector3<f64>],
    domain: &[usize],
    k: usize,
    start: usize,
) -> Result<Vec<usize>, SceneError> {
    if k > domain.len() {
        return Err(SceneError::Count { requested: k, available: domain.len() });
    }
    assert!(domain.contains(&start), "start index not in domain");
    let mut selected = Vec::with_capacity(k);
    let mut min_dist: Vec<f64> = vec![f64::INFINITY; domain.len()];
    let mut picked = vec![false; domain.len()];
    let start_pos = domain.iter().position(|&i| i == start).unwrap();
    let mut current = start_pos;
    for _ in 0..k {
        picked[current] = true;
        selected.push(domain[current]);
        let cp = points[domain[current]];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (j, &idx) in domain.iter().enumerate() {
            if picked[j] {
                continue;
            }
            let d = (points[idx] - cp).norm();
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if min_dist[j] > best_d {
                best_d = min_dist[j];
                best = j;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(selected)
}

/// Radius query over `domain` by linear scan through a uniform grid.
/// Result is sorted ascending and always includes the center.
pub fn neighborhood_query(
    scene: &Scene,
    center: usize,
    radius: f64,
    domain: &[usize],
) -> LocalRegion {
    assert!(radius > 0.0, "radius must be positive");
    let c = scene.gaussians[center].center;
    let mut members: Vec<usize> = domain
        .iter()
        .copied()
        .filter(|&i| (scene.gaussians[i].center - c).norm() <= radius)
        .collect();
    if !members.contains(&center) {
        members.push(center);
    }
    members.sort_unstable();
    LocalRegion { center_index: center, member_indices: members, radius }
}

/// Uniform-grid spatial index over a fixed point set; cells are keyed
/// by floor(p / cell). Correctness is always defined by the linear
/// scan; the grid is an accelerator for repeated queries.
pub struct UniformGrid {
    cell: f64,
    map: std::collections::HashMap<(i64, i64, i64), Vec<usize>>,
}

impl UniformGrid {
    pub fn build(points: &[Vector3<f64>], indices: &[usize], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut map: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        for &i in indices {
            map.entry(Self::key(&points[i], cell)).or_default().push(i);
        }
        Self { cell, map }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// All indices within `radius` of `q` (radius must be <= cell).
    pub fn query(&self, points: &[Vector3<f64>], q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell + 1e-12);
        let (kx, ky, kz) = Self::key(q, self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in bucket {
                            if (points[i] - q).norm() <= radius {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}
