//! Transformer encoder over spectral descriptors, covariance-aware
//! propagation of region encodings, and gated fusion with semantic
//! features.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("point is covered by no region")]
    NoRegion,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Descriptor dimension Q.
    pub input_dim: usize,
    /// Model width d, split across heads.
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Octaves in the Fourier positional encoding.
    pub pe_bands: usize,
}

impl EncoderConfig {
    pub fn default_for(input_dim: usize) -> Self {
        Self { input_dim, model_dim: 64, heads: 4, layers: 2, mlp_hidden: 128, pe_bands: 6 }
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.model_dim % self.heads != 0 {
            return Err(EncodeError::Dimension(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.input_dim == 0 || self.mlp_hidden == 0 {
            return Err(EncodeError::Dimension("layers, input_dim, mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn pe_dim(&self) -> usize {
        6 * self.pe_bands
    }
}

/// Ordered collection of named weight tensors. Order is fixed at
/// construction so bindings, gradients and checkpoints line up.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(self.get(name).is_none(), "duplicate parameter {}", name);
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: ParamSet) {
        for (n, t) in other.entries {
            self.insert(&n, t);
        }
    }

    /// Creates leaf variables for every tensor on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(t.clone())))
                .collect(),
            tape: tape.clone(),
        }
    }
}

/// Tape-bound view of a ParamSet.
pub struct BoundParams {
    pub tape: Tape,
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> &Var {
        &self
            .vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unbound parameter {}", name))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Fourier features sin/cos(2^b c) of the 3 coordinates, band-major.
pub fn positional_features(centers: &[Vector3<f64>], bands: usize) -> Tensor {
    let dim = 6 * bands;
    let mut data = Vec::with_capacity(centers.len() * dim);
    for c in centers {
        for b in 0..bands {
            let f = (1u64 << b) as f64;
            for axis in 0..3 {
                data.push((f * c[axis]).sin());
                data.push((f * c[axis]).cos());
            }
        }
    }
    Tensor::matrix(centers.len(), dim, data)
}

/// Transformer encoder weights. Layout per layer: query/key/value
/// projections at model width, then a two-layer feed-forward block;
/// the raw descriptor sequence (learnable token prepended) is embedded
/// from input_dim to model_dim first so layers compose and residuals
/// are well-typed.
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self, EncodeError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, d, h) = (cfg.input_dim, cfg.model_dim, cfg.mlp_hidden);
        let mut p = ParamSet::new();
        p.insert("token", glorot(&mut rng, 1, q));
        p.insert("pe_proj", glorot(&mut rng, cfg.pe_dim(), q));
        p.insert("pe_bias", Tensor::matrix(1, q, vec![0.0; q]));
        p.insert("embed_w", glorot(&mut rng, q, d));
        p.insert("embed_b", Tensor::matrix(1, d, vec![0.0; d]));
        for l in 0..cfg.layers {
            p.insert(&format!("layer{}.wq", l), glorot(&mut rng, d, d));
            p.insert(&format!("layer{}.wk", l), glorot(&mut rng, d, d));
            p.insert(&format!("layer{}.wv", l), glorot(&mut rng, d, d));
            p.insert(&format!("layer{}.ff1", l), glorot(&mut rng, d, h));
            p.insert(&format!("layer{}.fb1", l), Tensor::matrix(1, h, vec![0.0; h]));
            p.insert(&format!("layer{}.ff2", l), glorot(&mut rng, h, d));
            p.insert(&format!("layer{}.fb2", l), Tensor::matrix(1, d, vec![0.0; d]));
        }
        p.insert("head_w1", glorot(&mut rng, d, h));
        p.insert("head_b1", Tensor::matrix(1, h, vec![0.0; h]));
        p.insert("head_w2", glorot(&mut rng, h, d));
        p.insert("head_b2", Tensor::matrix(1, d, vec![0.0; d]));
        Ok(Self { cfg, params: p })
    }

    /// Region encoding p(S) as a 1 x model_dim node on the bound tape.
    pub fn encode_region(
        &self,
        bound: &BoundParams,
        descriptors: &Tensor,
        centers: &[Vector3<f64>],
    ) -> Result<Var, EncodeError> {
        let cfg = &self.cfg;
        let n = centers.len();
        if n == 0 {
            return Err(EncodeError::Dimension("empty region".into()));
        }
        if descriptors.shape != [n, cfg.input_dim] {
            return Err(EncodeError::Dimension(format!(
                "descriptors {:?}, expected [{}, {}]",
                descriptors.shape, n, cfg.input_dim
            )));
        }
        let tape = &bound.tape;
        let desc = tape.constant(descriptors.clone());
        let pe_raw = tape.constant(positional_features(centers, cfg.pe_bands));
        let pe = pe_raw.matmul(bound.var("pe_proj")).add_bias(bound.var("pe_bias"));
        let z = Var::concat_rows(&[bound.var("token").clone(), desc.add(&pe)]);
        let mut x = z.matmul(bound.var("embed_w")).add_bias(bound.var("embed_b"));

        let dh = cfg.model_dim / cfg.heads;
        let scale = 1.0 / (cfg.model_dim as f64).sqrt();
        for l in 0..cfg.layers {
            let wq = bound.var(&format!("layer{}.wq", l));
            let wk = bound.var(&format!("layer{}.wk", l));
            let wv = bound.var(&format!("layer{}.wv", l));
            let (q, k, v) = (x.matmul(wq), x.matmul(wk), x.matmul(wv));
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = q.slice_cols(s, e);
                let kh = k.slice_cols(s, e);
                let vh = v.slice_cols(s, e);
                let attn = qh.matmul(&kh.transpose()).scale(scale).softmax_rows();
                heads.push(attn.matmul(&vh));
            }
            let a = x.add(&Var::concat_cols(&heads));
            let ff = a
                .matmul(bound.var(&format!("layer{}.ff1", l)))
                .add_bias(bound.var(&format!("layer{}.fb1", l)))
                .tanh()
                .matmul(bound.var(&format!("layer{}.ff2", l)))
                .add_bias(bound.var(&format!("layer{}.fb2", l)));
            x = a.add(&ff);
        }
        let y0 = x.slice_rows(0, 1);
        Ok(y0
            .matmul(bound.var("head_w1"))
            .add_bias(bound.var("head_b1"))
            .tanh()
            .matmul(bound.var("head_w2"))
            .add_bias(bound.var("head_b2")))
    }
}

/// Normalized covariance-aware propagation weights of `q` over the
/// regions that contain it. Weights sum to one.
pub fn propagate_weights(
    q: &Vector3<f64>,
    regions: &[(Vector3<f64>, Matrix3<f64>)],
    tau: f64,
) -> Result<Vec<f64>, EncodeError> {
    if regions.is_empty() {
        return Err(EncodeError::NoRegion);
    }
    assert!(tau > 0.0, "temperature must be positive");
    let mut raw = Vec::with_capacity(regions.len());
    for (c, sigma) in regions {
        let inv = sigma
            .try_inverse()
            .ok_or_else(|| EncodeError::Dimension("region covariance is singular".into()))?;
        let d = q - c;
        raw.push((-(d.transpose() * inv * d)[(0, 0)] / tau).exp());
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(EncodeError::Dimension("propagation weights vanished".into()));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Convex combination of region encodings with fixed weights.
pub fn propagate(encodings: &[Var], weights: &[f64]) -> Var {
    assert_eq!(encodings.len(), weights.len());
    assert!(!encodings.is_empty());
    let mut out = encodings[0].scale(weights[0]);
    for (e, w) in encodings.iter().zip(weights).skip(1) {
        out = out.add(&e.scale(*w));
    }
    out
}

/// Gating weights: a projection of the shape encoding into the
/// semantic dimension plus the elementwise gate.
pub struct Fusion {
    pub model_dim: usize,
    pub feature_dim: usize,
    pub params: ParamSet,
}

impl Fusion {
    pub fn new(model_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("fuse.proj_w", glorot(&mut rng, model_dim, feature_dim));
        p.insert("fuse.proj_b", Tensor::matrix(1, feature_dim, vec![0.0; feature_dim]));
        p.insert("fuse.gate_w", glorot(&mut rng, 2 * feature_dim, feature_dim));
        p.insert("fuse.gate_b", Tensor::matrix(1, feature_dim, vec![0.0; feature_dim]));
        Self { model_dim, feature_dim, params: p }
    }
}

/// Tape nodes of one fused point feature.
pub struct FusedVars {
    pub shape: Var,
    pub semantic: Var,
    pub gate: Var,
    pub final_: Var,
}

/// Value-level snapshot of a fused feature.
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub shape: Vec<f64>,
    pub semantic: Vec<f64>,
    pub gate: Vec<f64>,
    pub final_: Vec<f64>,
}

impl FusedFeature {
    /// Fallback for points covered by no region: the semantic feature
    /// passes through untouched with a fully open gate.
    pub fn fallback(semantic: &[f64]) -> Self {
        Self {
            shape: vec![0.0; semantic.len()],
            semantic: semantic.to_vec(),
            gate: vec![1.0; semantic.len()],
            final_: semantic.to_vec(),
        }
    }
}

impl FusedVars {
    pub fn values(&self) -> FusedFeature {
        FusedFeature {
            shape: self.shape.value().data,
            semantic: self.semantic.value().data,
            gate: self.gate.value().data,
            final_: self.final_.value().data,
        }
    }
}

/// final = g (.) semantic + (1 - g) (.) shape, with the shape encoding
/// first projected to the semantic dimension.
pub fn gated_fuse(
    fusion: &Fusion,
    bound: &BoundParams,
    shape_enc: &Var,
    semantic: &Var,
) -> Result<FusedVars, EncodeError> {
    if shape_enc.shape() != [1, fusion.model_dim] {
        return Err(EncodeError::Dimension(format!(
            "shape encoding {:?}, expected [1, {}]",
            shape_enc.shape(),
            fusion.model_dim
        )));
    }
    if semantic.shape() != [1, fusion.feature_dim] {
        return Err(EncodeError::Dimension(format!(
            "semantic feature {:?}, expected [1, {}]",
            semantic.shape(),
            fusion.feature_dim
        )));
    }
    let shape = shape_enc
        .matmul(bound.var("fuse.proj_w"))
        .add_bias(bound.var("fuse.proj_b"));
    let u = Var::concat_cols(&[shape.clone(), semantic.clone()]);
    let gate = u.matmul(bound.var("fuse.gate_w")).add_bias(bound.var("fuse.gate_b")).sigmoid();
    let one_minus = gate.scale(-1.0).add_const(1.0);
    let final_ = gate.mul(semantic).add(&one_minus.mul(&shape));
    Ok(FusedVars { shape, semantic: semantic.clone(), gate, final_ })
}

const CKPT_MAGIC: &[u8; 4] = b"AGWT";
const CKPT_VERSION: u32 = 1;

/// Writes a ParamSet as a little-endian binary container: magic,
/// version, tensor count, then per tensor a name, rank, dims and f64
/// payload, followed by a SHA-256 of everything before it.
pub fn save_params(params: &ParamSet, path: &std::path::Path) -> Result<(), EncodeError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &std::path::Path) -> Result<ParamSet, EncodeError> {
    let buf = std::fs::read(path)?;
    if buf.len() < 44 || &buf[..4] != CKPT_MAGIC {
        return Err(EncodeError::Checkpoint("bad magic".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(EncodeError::Checkpoint("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(EncodeError::Checkpoint(format!("unsupported version {}", version)));
    }
    let count = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut take = |n: usize| -> Result<&[u8], EncodeError> {
        if off + n > body.len() {
            return Err(EncodeError::Checkpoint("truncated".into()));
        }
        let s = &body[off..off + n];
        off += n;
        Ok(s)
    };
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| EncodeError::Checkpoint("bad name".into()))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        params.insert(&name, Tensor { shape, data });
    }
    if off != body.len() {
        return Err(EncodeError::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests;
