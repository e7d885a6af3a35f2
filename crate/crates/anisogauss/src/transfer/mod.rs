//! Cross-scene knowledge transfer: projection of encoder matrices onto
//! a persistent orthonormal pattern basis, the modulated regularizer
//! pulling them toward it, and residual-driven basis growth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::autodiff::{Tape, Tensor, Var};
use crate::numerics::linalg::{orth, svd, DenseMatrix};
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix has vanishing Frobenius norm")]
    ZeroMatrix,
    #[error("basis file checksum mismatch")]
    Checksum,
    #[error("unsupported basis file version {0}")]
    Version(u32),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("basis file malformed: {0}")]
    Format(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BasisHistoryEntry {
    pub scene_id: String,
    pub rho: f64,
    pub rho_prime: f64,
    pub added: usize,
    pub eta: f64,
}

/// Orthonormal basis of the core knowledge space, q x r with r <= q.
#[derive(Debug, Clone)]
pub struct PatternBasis {
    pub basis: DenseMatrix,
    pub history: Vec<BasisHistoryEntry>,
}

impl PatternBasis {
    /// First-scene initialization: rank zero, projection is the zero
    /// map and rho is 1 for any nonzero matrix.
    pub fn empty(q: usize) -> Self {
        Self { basis: DenseMatrix::zeros(q, 0), history: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.basis.rows
    }

    pub fn rank(&self) -> usize {
        self.basis.cols
    }

    /// max |B^T B - I|.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = self.rank();
        let gram = self.basis.transpose().matmul(&self.basis);
        let mut defect = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                let expect = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((gram[(i, j)] - expect).abs());
            }
        }
        defect
    }
}

/// W projected onto the basis: (W_hat, residual, rho).
pub fn project_cks(
    w: &DenseMatrix,
    basis: &PatternBasis,
) -> Result<(DenseMatrix, DenseMatrix, f64), TransferError> {
    if w.rows != basis.dim() {
        return Err(TransferError::Dimension(format!(
            "W has {} rows, basis lives in dimension {}",
            w.rows,
            basis.dim()
        )));
    }
    let w_norm = w.frobenius_norm();
    if w_norm <= 1e-12 {
        return Err(TransferError::ZeroMatrix);
    }
    if basis.rank() == 0 {
        return Ok((DenseMatrix::zeros(w.rows, w.cols), w.clone(), 1.0));
    }
    let w_hat = basis.basis.matmul(&basis.basis.transpose().matmul(w));
    let mut residual = w.clone();
    for (r, h) in residual.data.iter_mut().zip(&w_hat.data) {
        *r -= h;
    }
    let rho = (residual.frobenius_norm() / w_norm).min(1.0);
    Ok((w_hat, residual, rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModActivation {
    Softplus,
    Sigmoid,
}

/// Single-layer modulation network mapping the mean local shape
/// feature to the non-negative factor in the regularizer.
pub struct ModNet {
    pub input_dim: usize,
    pub activation: ModActivation,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ModNet {
    pub fn new(input_dim: usize, activation: ModActivation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (input_dim + 1) as f64).sqrt();
        Self {
            input_dim,
            activation,
            weight: Tensor::matrix(
                input_dim,
                1,
                (0..input_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            ),
            bias: Tensor::matrix(1, 1, vec![0.0]),
        }
    }
}

pub struct RegLossVars {
    pub alpha_mod: Var,
    pub rho_sq: Var,
    pub loss: Var,
}

/// L_reg = alpha_mod * ||W - B B^T W||_F^2 / ||W||_F^2 on the tape,
/// differentiable in W and the modulation parameters.
pub fn reg_loss(
    tape: &Tape,
    w: &Var,
    basis: &PatternBasis,
    z_bar: &Tensor,
    mod_w: &Var,
    mod_b: &Var,
    activation: ModActivation,
) -> Result<RegLossVars, TransferError> {
    let shape = w.shape();
    if shape.len() != 2 || shape[0] != basis.dim() {
        return Err(TransferError::Dimension(format!(
            "W is {:?}, basis dimension {}",
            shape,
            basis.dim()
        )));
    }
    let w_norm_sq = w.mul(w).sum();
    if w_norm_sq.value().as_scalar() <= 1e-24 {
        return Err(TransferError::ZeroMatrix);
    }
    let residual = if basis.rank() == 0 {
        w.clone()
    } else {
        let b = tape.constant(Tensor::matrix(
            basis.basis.rows,
            basis.basis.cols,
            basis.basis.data.clone(),
        ));
        w.sub(&b.matmul(&b.transpose().matmul(w)))
    };
    let rho_sq = residual.mul(&residual).sum().div_scalar(&w_norm_sq).reshape(&[1, 1]);
    let z = tape.constant(z_bar.clone());
    let pre = z.matmul(mod_w).add_bias(mod_b);
    let alpha_mod = match activation {
        ModActivation::Softplus => pre.softplus(),
        ModActivation::Sigmoid => pre.sigmoid(),
    };
    let loss = alpha_mod.mul(&rho_sq).sum();
    Ok(RegLossVars { alpha_mod, rho_sq, loss })
}

/// sqrt of the mean squared deviation of descriptors from their mean.
pub fn sigma_f(descriptors: &[Vec<f64>]) -> f64 {
    assert!(!descriptors.is_empty());
    let dim = descriptors[0].len();
    let n = descriptors.len() as f64;
    let mut mean = vec![0.0; dim];
    for d in descriptors {
        assert_eq!(d.len(), dim);
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / n;
        }
    }
    let total: f64 = descriptors
        .iter()
        .map(|d| d.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    (total / n).sqrt()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TransferConfig {
    pub kappa: f64,
    pub epsilon: f64,
    pub eta: f64,
    /// Encoder parameter names kept under CKS regularization.
    pub tracked_matrices: Vec<String>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            epsilon: 0.15,
            eta: 0.9,
            tracked_matrices: vec!["layer0.wq".into()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpdateDecision {
    pub updated: bool,
    pub rho: f64,
    pub rho_prime: f64,
    pub sigma_f: f64,
    pub added: usize,
    /// rho against the new basis; equals `rho` when skipped.
    pub rho_after: f64,
}

/// End-of-scene basis update: grow by the dominant residual directions
/// when the complexity-weighted projection error crosses epsilon.
pub fn maybe_update_basis(
    w: &DenseMatrix,
    basis: &PatternBasis,
    descriptors: &[Vec<f64>],
    cfg: &TransferConfig,
    scene_id: &str,
) -> Result<(PatternBasis, UpdateDecision), TransferError> {
    if descriptors.is_empty() {
        return Err(TransferError::Dimension("no descriptors for sigma_f".into()));
    }
    let (_, residual, rho) = project_cks(w, basis)?;
    let sf = sigma_f(descriptors);
    let rho_prime = rho * (1.0 + cfg.kappa * sf);
    let mut out = basis.clone();
    if rho_prime <= cfg.epsilon {
        out.history.push(BasisHistoryEntry {
            scene_id: scene_id.into(),
            rho,
            rho_prime,
            added: 0,
            eta: cfg.eta,
        });
        return Ok((
            out,
            UpdateDecision { updated: false, rho, rho_prime, sigma_f: sf, added: 0, rho_after: rho },
        ));
    }
    let (u, sigmas, _) = svd(&residual)?;
    let energies: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
    let total: f64 = energies.iter().sum();
    let numerical_rank = sigmas.iter().filter(|&&s| s > 1e-12 * sigmas[0].max(1.0)).count();
    let mut r_new = 0;
    let mut acc = 0.0;
    while r_new < numerical_rank && acc / total < cfg.eta - 1e-15 {
        acc += energies[r_new];
        r_new += 1;
    }
    let mut picked = DenseMatrix::zeros(u.rows, r_new);
    for j in 0..r_new {
        for i in 0..u.rows {
            picked[(i, j)] = u[(i, j)];
        }
    }
    let union = if basis.rank() == 0 { picked } else { basis.basis.hcat(&picked) };
    let mut grown = orth(&union)?;
    // full-rank basis would make the regularizer vanish identically;
    // keep at most q-1 columns (earlier columns carry more energy)
    let q = basis.dim();
    if grown.cols >= q {
        let mut capped = DenseMatrix::zeros(q, q - 1);
        for j in 0..q - 1 {
            for i in 0..q {
                capped[(i, j)] = grown[(i, j)];
            }
        }
        grown = capped;
    }
    let added = grown.cols.saturating_sub(basis.rank());
    out.basis = grown;
    let (_, _, rho_after) = project_cks(w, &out)?;
    out.history.push(BasisHistoryEntry {
        scene_id: scene_id.into(),
        rho,
        rho_prime,
        added,
        eta: cfg.eta,
    });
    Ok((
        out,
        UpdateDecision { updated: true, rho, rho_prime, sigma_f: sf, added, rho_after },
    ))
}

const BASIS_MAGIC: &[u8; 4] = b"AGCB";
const BASIS_VERSION: u32 = 1;

/// Little-endian binary layout: magic, version, q, r, row-major f64
/// entries, JSON history block, SHA-256 of everything before it.
pub fn save_basis(basis: &PatternBasis, path: &std::path::Path) -> Result<(), TransferError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BASIS_MAGIC);
    buf.extend_from_slice(&BASIS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(basis.dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(basis.rank() as u64).to_le_bytes());
    for v in &basis.basis.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let history = serde_json::to_vec(&basis.history).expect("serializable history");
    buf.extend_from_slice(&(history.len() as u64).to_le_bytes());
    buf.extend_from_slice(&history);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_basis(path: &std::path::Path) -> Result<PatternBasis, TransferError> {
    let buf = std::fs::read(path)?;
    if buf.len() < 60 || &buf[..4] != BASIS_MAGIC {
        return Err(TransferError::Format("bad magic or truncated".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(TransferError::Checksum);
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != BASIS_VERSION {
        return Err(TransferError::Version(version));
    }
    let q = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let r = u64::from_le_bytes(body[16..24].try_into().unwrap()) as usize;
    let need = 24 + q * r * 8 + 8;
    if body.len() < need {
        return Err(TransferError::Format("truncated payload".into()));
    }
    let mut basis = DenseMatrix::zeros(q, r);
    for (idx, chunk) in body[24..24 + q * r * 8].chunks_exact(8).enumerate() {
        basis.data[idx] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    let hoff = 24 + q * r * 8;
    let hlen = u64::from_le_bytes(body[hoff..hoff + 8].try_into().unwrap()) as usize;
    if body.len() != hoff + 8 + hlen {
        return Err(TransferError::Format("history length mismatch".into()));
    }
    let history: Vec<BasisHistoryEntry> = serde_json::from_slice(&body[hoff + 8..])
        .map_err(|e| TransferError::Format(format!("history: {}", e)))?;
    Ok(PatternBasis { basis, history })
}
