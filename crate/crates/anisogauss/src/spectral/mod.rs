//! Anisotropic metrics, the graph Laplacian over a local region and
//! rotated-metric Chebyshev descriptors.
//!
//! Per Gaussian the covariance eigenstructure defines a metric that
//! compresses distances along wide principal directions. Edge weights
//! between neighboring centers use the averaged metric, the resulting
//! random-walk Laplacian is diagonalized through its symmetric
//! similarity transform, and per-node descriptors are Chebyshev
//! moments of the scaled spectrum. Rotating the metric inside each
//! Gaussian's principal frame adds directional sensitivity.

use nalgebra::{Matrix3, UnitQuaternion, Unit, Vector3};
use thiserror::Error;

use crate::numerics::{sym_eig, DenseMatrix, NumericsError};
use crate::scene::{LocalRegion, Scene};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("covariance is not SPD (eigenvalue {0:e})")]
    NotSpd(f64),
    #[error("region has {0} members, need at least 2")]
    RegionTooSmall(usize),
    #[error("degenerate spectrum: largest selected eigenvalue {0:e}")]
    DegenerateSpectrum(f64),
    #[error("eigen count {k} outside 1..={n}")]
    BadEigCount { k: usize, n: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Metric matrix derived from a covariance: same eigenvectors, each
/// eigenvalue mapped to 1/(1 + beta * lambda).
#[derive(Debug, Clone)]
pub struct AnisotropicMetric {
    pub matrix: Matrix3<f64>,
    pub beta: f64,
}

/// Which frame the per-rotation metric conjugation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationFrame {
    /// Rotate about each Gaussian's minor-eigenvalue axis; keeps
    /// descriptors invariant under global rigid motions.
    Principal,
    /// Rotate about the world z axis.
    World,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum NeighborRule {
    /// Symmetric k-NN: an edge exists when either endpoint ranks the
    /// other among its k nearest.
    Knn(usize),
    /// All pairs within the given distance.
    Radius(f64),
}

/// Parameters shared by the descriptor pipeline.
#[derive(Debug, Clone)]
pub struct SpectralParams {
    pub beta: f64,
    /// Bandwidth; `None` uses the mean k-NN distance in the region.
    pub sigma: Option<f64>,
    pub k_eigs: usize,
    pub max_order: usize,
    pub angles: Vec<f64>,
    pub neighbor_rule: NeighborRule,
    pub rotation_frame: RotationFrame,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            sigma: None,
            k_eigs: 16,
            max_order: 4,
            angles: vec![
                0.0,
                std::f64::consts::FRAC_PI_4,
                std::f64::consts::FRAC_PI_2,
                3.0 * std::f64::consts::FRAC_PI_4,
            ],
            neighbor_rule: NeighborRule::Knn(8),
            rotation_frame: RotationFrame::Principal,
        }
    }
}

/// Graph Laplacian over a region with its edge weights and degrees.
#[derive(Debug, Clone)]
pub struct AlboGraph {
    pub node_indices: Vec<usize>,
    /// Dense symmetric weight matrix, zero diagonal.
    pub weights: DenseMatrix,
    pub degrees: Vec<f64>,
    /// Random-walk normalized Laplacian: identity diagonal, rows of
    /// connected nodes sum to zero.
    pub laplacian: DenseMatrix,
    pub sigma: f64,
}

/// Eigenpairs of the Laplacian, computed through the symmetric
/// similarity transform and mapped back.
#[derive(Debug, Clone)]
pub struct AlboEigen {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column k holds the unit-normalized eigenvector of L for
    /// eigenvalue k.
    pub phis: DenseMatrix,
}

/// Per-Gaussian rotated Chebyshev descriptor.
#[derive(Debug, Clone)]
pub struct SpectralDescriptor {
    /// Rotation-major blocks, each of length max_order + 1.
    pub values: Vec<f64>,
    pub orders: usize,
    pub rotations: Vec<f64>,
    pub k_eigs: usize,
}

impl SpectralDescriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Build the anisotropic metric of a single covariance.
pub fn build_metric(cov: &Matrix3<f64>, beta: f64) -> Result<AnisotropicMetric, SpectralError> {
    assert!(beta >= 0.0, "beta must be non-negative");
    let (vals, vecs) = eig3(cov)?;
    for &l in &vals {
        if l <= 1e-12 {
            return Err(SpectralError::NotSpd(l));
        }
    }
    let d = Matrix3::from_diagonal(&Vector3::new(
        1.0 / (1.0 + beta * vals[0]),
        1.0 / (1.0 + beta * vals[1]),
        1.0 / (1.0 + beta * vals[2]),
    ));
    Ok(AnisotropicMetric { matrix: vecs * d * vecs.transpose(), beta })
}

/// 3x3 symmetric eigendecomposition via the shared Jacobi solver.
/// Eigenvalues ascending, eigenvectors as columns.
fn eig3(m: &Matrix3<f64>) -> Result<([f64; 3], Matrix3<f64>), SpectralError> {
    let mut dm = DenseMatrix::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            dm[(i, j)] = m[(i, j)];
        }
    }
    let (vals, vecs) = sym_eig(&dm)?;
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            out[(i, j)] = vecs[(i, j)];
        }
    }
    Ok(([vals[0], vals[1], vals[2]], out))
}

fn neighbor_pairs(
    centers: &[Vector3<f64>],
    rule: NeighborRule,
) -> Vec<(usize, usize)> {
    let n = centers.len();
    let mut adj = vec![false; n * n];
    match rule {
        NeighborRule::Knn(k) => {
            for i in 0..n {
                let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                order.sort_by(|&a, &b| {
                    let da = (centers[a] - centers[i]).norm();
                    let db = (centers[b] - centers[i]).norm();
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                });
                for &j in order.iter().take(k) {
                    adj[i * n + j] = true;
                    adj[j * n + i] = true;
                }
            }
        }
        NeighborRule::Radius(r) => {
            for i in 0..n {
                for j in (i + 1)..n {
                    if (centers[i] - centers[j]).norm() <= r {
                        adj[i * n + j] = true;
                        adj[j * n + i] = true;
                    }
                }
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if adj[i * n + j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean nearest-neighbor distance, the adaptive bandwidth default.
fn mean_nn_distance(centers: &[Vector3<f64>]) -> f64 {
    let n = centers.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i != j {
                best = best.min((centers[i] - centers[j]).norm());
            }
        }
        total += best;
    }
    (total / n as f64).max(1e-12)
}

/// Build the Laplacian from explicit per-node centers and metrics.
pub fn build_albo_from_parts(
    node_indices: &[usize],
    centers: &[Vector3<f64>],
    metrics: &[Matrix3<f64>],
    sigma: Option<f64>,
    rule: NeighborRule,
) -> Result<AlboGraph, SpectralError> {
    let n = centers.len();
    if n < 2 {
        return Err(SpectralError::RegionTooSmall(n));
    }
    let sigma = sigma.unwrap_or_else(|| mean_nn_distance(centers));
    let mut weights = DenseMatrix::zeros(n, n);
    for (i, j) in neighbor_pairs(centers, rule) {
        let m_bar = (metrics[i] + metrics[j]) * 0.5;
        let d = centers[i] - centers[j];
        let q = (d.transpose() * m_bar * d)[(0, 0)];
        let w = (-q / (sigma * sigma)).exp();
        weights[(i, j)] = w;
        weights[(j, i)] = w;
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| weights[(i, j)]).sum())
        .collect();
    let mut laplacian = DenseMatrix::zeros(n, n);
    for i in 0..n {
        laplacian[(i, i)] = 1.0;
        if degrees[i] > 0.0 {
            for j in 0..n {
                if i != j {
                    laplacian[(i, j)] = -weights[(i, j)] / degrees[i];
                }
            }
        }
    }
    Ok(AlboGraph {
        node_indices: node_indices.to_vec(),
        weights,
        degrees,
        laplacian,
        sigma,
    })
}

/// Build the Laplacian of a region using unrotated per-Gaussian metrics.
pub fn build_albo(
    region: &LocalRegion,
    scene: &Scene,
    beta: f64,
    sigma: Option<f64>,
    rule: NeighborRule,
) -> Result<AlboGraph, SpectralError> {
    let centers: Vec<Vector3<f64>> = region
        .member_indices
        .iter()
        .map(|&i| scene.gaussians[i].center)
        .collect();
    let metrics: Result<Vec<Matrix3<f64>>, SpectralError> = region
        .member_indices
        .iter()
        .map(|&i| Ok(build_metric(&scene.gaussians[i].covariance(), beta)?.matrix))
        .collect();
    build_albo_from_parts(&region.member_indices, &centers, &metrics?, sigma, rule)
}

/// Eigendecomposition of the graph Laplacian. The non-symmetric
/// random-walk operator shares its spectrum with the similar symmetric
/// matrix `I - D^{-1/2} W D^{-1/2}`; eigenvectors are mapped back by
/// `D^{-1/2}` and unit-normalized.
pub fn albo_eigen(graph: &AlboGraph) -> Result<AlboEigen, SpectralError> {
    let n = graph.degrees.len();
    let mut sym = DenseMatrix::zeros(n, n);
    for i in 0..n {
        sym[(i, i)] = 1.0;
        for j in 0..n {
            if i != j && graph.degrees[i] > 0.0 && graph.degrees[j] > 0.0 {
                sym[(i, j)] =
                    -graph.weights[(i, j)] / (graph.degrees[i] * graph.degrees[j]).sqrt();
            }
        }
    }
    let (vals, vecs) = sym_eig(&sym)?;
    let mut phis = DenseMatrix::zeros(n, n);
    for k in 0..n {
        let mut col: Vec<f64> = (0..n)
            .map(|i| {
                let a = graph.degrees[i];
                if a > 0.0 {
                    vecs[(i, k)] / a.sqrt()
                } else {
                    vecs[(i, k)]
                }
            })
            .collect();
        let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in col.iter_mut() {
                *x /= norm;
            }
        }
        phis.set_column(k, &col);
    }
    Ok(AlboEigen { eigenvalues: vals, phis })
}

/// Expand `k` to include the full degenerate cluster at the cut
/// (eigenvalue gap below 1e-9), so descriptors stay basis-independent.
pub fn effective_eig_count(eigenvalues: &[f64], k: usize) -> usize {
    let n = eigenvalues.len();
    let mut k = k.min(n);
    while k < n && (eigenvalues[k] - eigenvalues[k - 1]).abs() < 1e-9 {
        k += 1;
    }
    k
}

/// Chebyshev moments of the scaled spectrum at one node: the stable
/// recurrence T0=1, T1=x, T_{d+1} = 2x T_d - T_{d-1}.
pub fn chebyshev_descriptor(
    eigen: &AlboEigen,
    k: usize,
    max_order: usize,
    node: usize,
) -> Result<Vec<f64>, SpectralError> {
    let n = eigen.eigenvalues.len();
    if k == 0 || k > n {
        return Err(SpectralError::BadEigCount { k, n });
    }
    let k = effective_eig_count(&eigen.eigenvalues, k);
    let lambda_max = eigen.eigenvalues[k - 1];
    if lambda_max <= 1e-12 {
        return Err(SpectralError::DegenerateSpectrum(lambda_max));
    }
    let mut out = vec![0.0; max_order + 1];
    for ki in 0..k {
        let lt = 2.0 * eigen.eigenvalues[ki] / lambda_max - 1.0;
        let phi2 = eigen.phis[(node, ki)] * eigen.phis[(node, ki)];
        let mut t_prev = 1.0;
        let mut t_cur = lt;
        out[0] += phi2;
        for d in 1..=max_order {
            out[d] += t_cur * phi2;
            let t_next = 2.0 * lt * t_cur - t_prev;
            t_prev = t_cur;
            t_cur = t_next;
        }
    }
    Ok(out)
}

/// Axis each per-rotation conjugation spins about, oriented by the
/// region centroid so the choice is rigid-motion equivariant.
fn principal_axis(
    cov: &Matrix3<f64>,
    center: &Vector3<f64>,
    centroid: &Vector3<f64>,
) -> Result<Unit<Vector3<f64>>, SpectralError> {
    let (_, vecs) = eig3(cov)?;
    // minor axis: eigenvector of the smallest covariance eigenvalue
    let mut axis = vecs.column(0).into_owned();
    let anchor = center - centroid;
    let d = axis.dot(&anchor);
    if d < 0.0 {
        axis = -axis;
    } else if d == 0.0 && (axis.z < 0.0 || (axis.z == 0.0 && axis.y < 0.0)) {
        // isolated fallback; not rotation-invariant but deterministic
        axis = -axis;
    }
    Ok(Unit::new_normalize(axis))
}

/// Rotated-metric descriptors for every region member, concatenated
/// rotation-major.
pub fn anisotropic_descriptor(
    region: &LocalRegion,
    scene: &Scene,
    params: &SpectralParams,
) -> Result<Vec<SpectralDescriptor>, SpectralError> {
    assert!(!params.angles.is_empty(), "need at least one rotation angle");
    let members = &region.member_indices;
    let n = members.len();
    if n < 2 {
        return Err(SpectralError::RegionTooSmall(n));
    }
    let centers: Vec<Vector3<f64>> =
        members.iter().map(|&i| scene.gaussians[i].center).collect();
    let centroid = centers.iter().sum::<Vector3<f64>>() / n as f64;
    let covs: Vec<Matrix3<f64>> =
        members.iter().map(|&i| scene.gaussians[i].covariance()).collect();
    let metrics: Result<Vec<Matrix3<f64>>, SpectralError> =
        covs.iter().map(|c| Ok(build_metric(c, params.beta)?.matrix)).collect();
    let metrics = metrics?;
    let axes: Result<Vec<Unit<Vector3<f64>>>, SpectralError> = match params.rotation_frame {
        RotationFrame::Principal => covs
            .iter()
            .zip(&centers)
            .map(|(c, p)| principal_axis(c, p, &centroid))
            .collect(),
        RotationFrame::World => {
            Ok(vec![Unit::new_normalize(Vector3::z()); n]).map(|v: Vec<_>| v)
        }
    };
    let axes = axes?;
    let k = params.k_eigs.min(n);

    let block = params.max_order + 1;
    let mut values = vec![vec![0.0; params.angles.len() * block]; n];
    // shared bandwidth across rotations so blocks are comparable
    let sigma = params.sigma.unwrap_or_else(|| mean_nn_distance(&centers));
    for (j, &theta) in params.angles.iter().enumerate() {
        let rotated: Vec<Matrix3<f64>> = metrics
            .iter()
            .zip(&axes)
            .map(|(m, axis)| {
                let r = UnitQuaternion::from_axis_angle(axis, theta).to_rotation_matrix();
                let rm = r.matrix();
                rm * m * rm.transpose()
            })
            .collect();
        let graph = build_albo_from_parts(
            members,
            &centers,
            &rotated,
            Some(sigma),
            params.neighbor_rule,
        )?;
        let eigen = albo_eigen(&graph)?;
        for node in 0..n {
            let g = chebyshev_descriptor(&eigen, k, params.max_order, node)?;
            values[node][j * block..(j + 1) * block].copy_from_slice(&g);
        }
    }
    Ok(values
        .into_iter()
        .map(|v| SpectralDescriptor {
            values: v,
            orders: params.max_order,
            rotations: params.angles.clone(),
            k_eigs: k,
        })
        .collect())
}

/// Write descriptors as `gaussian_index, q0..q{Q-1}` CSV rows.
pub fn descriptors_to_csv(
    indices: &[usize],
    descriptors: &[SpectralDescriptor],
    out: &mut dyn std::io::Write,
) -> std::io::Result<()> {
    let q = descriptors.first().map(|d| d.dim()).unwrap_or(0);
    write!(out, "gaussian_index")?;
    for i in 0..q {
        write!(out, ",q{}", i)?;
    }
    writeln!(out)?;
    for (idx, d) in indices.iter().zip(descriptors) {
        write!(out, "{}", idx)?;
        for v in &d.values {
            write!(out, ",{:.17e}", v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}
