//! Semantic-aware pruning, gradient-triggered densification and
//! soft-histogram-guided SH pruning, with their sparsity losses.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encode::{BoundParams, ParamSet};
use crate::numerics::autodiff::{Tensor, Var};
use crate::scene::{LocalRegion, Scene, SemanticGaussian};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bad histogram range: {0}")]
    Range(String),
    #[error("non-finite loss input")]
    NonFinite,
}

/// Per-Gaussian learnable mask parameters and gradient statistics.
/// Rows track the scene's Gaussians by index; commits that append new
/// Gaussians extend this in lockstep.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    /// Learnable pruning parameter per Gaussian.
    pub phi: Vec<f64>,
    /// Learnable raw SH mask parameter per Gaussian and degree.
    pub psi: Vec<[f64; 4]>,
    /// Running mean of screen-space center-gradient magnitude since
    /// the last reset.
    pub grad_accum: Vec<f64>,
    pub grad_count: u64,
    /// Last committed masks.
    pub masks: MaskSnapshot,
}

#[derive(Debug, Clone, Default)]
pub struct MaskSnapshot {
    pub m_hat: Vec<f64>,
    pub m: Vec<f64>,
    pub sh_soft: Vec<[f64; 4]>,
    pub sh_mask: Vec<[f64; 4]>,
}

impl AdaptationState {
    pub fn new(n: usize) -> Self {
        Self {
            phi: vec![0.0; n],
            psi: vec![[0.0; 4]; n],
            grad_accum: vec![0.0; n],
            grad_count: 0,
            masks: MaskSnapshot::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// Folds one iteration's screen-space gradients into the running
    /// means.
    pub fn record_render_gradients(&mut self, d_mean2d: &[Vector2<f64>]) {
        assert_eq!(d_mean2d.len(), self.phi.len());
        let c = self.grad_count as f64;
        for (acc, g) in self.grad_accum.iter_mut().zip(d_mean2d) {
            *acc = (*acc * c + g.norm()) / (c + 1.0);
        }
        self.grad_count += 1;
    }

    pub fn reset_gradients(&mut self) {
        self.grad_accum.iter_mut().for_each(|g| *g = 0.0);
        self.grad_count = 0;
    }

    /// Tensor views of the learnable parameters (column vectors).
    pub fn phi_tensor(&self) -> Tensor {
        Tensor::matrix(self.phi.len(), 1, self.phi.clone())
    }

    pub fn psi_tensor(&self) -> Tensor {
        Tensor::matrix(self.psi.len(), 4, self.psi.iter().flatten().copied().collect())
    }

    pub fn set_phi_from(&mut self, t: &Tensor) {
        assert_eq!(t.data.len(), self.phi.len());
        self.phi.copy_from_slice(&t.data);
    }

    pub fn set_psi_from(&mut self, t: &Tensor) {
        assert_eq!(t.data.len(), self.psi.len() * 4);
        for (i, row) in self.psi.iter_mut().enumerate() {
            row.copy_from_slice(&t.data[i * 4..(i + 1) * 4]);
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Two-stage gating network producing the soft pruning mask: the fused
/// feature is gated elementwise by a sigmoid linear layer, concatenated
/// with phi, passed through a gated hidden layer and mapped to one
/// logit.
pub struct PruneNet {
    pub feature_dim: usize,
    pub hidden: usize,
    pub params: ParamSet,
}

impl PruneNet {
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = feature_dim;
        p.insert("prune.gate1_w", glorot(&mut rng, d, d));
        p.insert("prune.gate1_b", Tensor::matrix(1, d, vec![0.0; d]));
        p.insert("prune.hid_a_w", glorot(&mut rng, d + 1, hidden));
        p.insert("prune.hid_a_b", Tensor::matrix(1, hidden, vec![0.0; hidden]));
        p.insert("prune.hid_g_w", glorot(&mut rng, d + 1, hidden));
        p.insert("prune.hid_g_b", Tensor::matrix(1, hidden, vec![0.0; hidden]));
        p.insert("prune.out_w", glorot(&mut rng, hidden, 1));
        p.insert("prune.out_b", Tensor::matrix(1, 1, vec![0.0]));
        Self { feature_dim, hidden, params: p }
    }
}

pub struct PruneOutput {
    /// Soft masks in (0,1), N x 1.
    pub soft: Var,
    /// Binarized masks through the straight-through threshold.
    pub hard: Var,
    /// mean of the soft masks.
    pub l_mask: Var,
}

pub fn prune_mask(
    net: &PruneNet,
    bound: &BoundParams,
    fused: &Var,
    phi: &Var,
    tau_prune: f64,
) -> Result<PruneOutput, AdaptError> {
    let shape = fused.shape();
    if shape.len() != 2 || shape[1] != net.feature_dim {
        return Err(AdaptError::Dimension(format!(
            "fused features {:?}, expected [N, {}]",
            shape, net.feature_dim
        )));
    }
    let n = shape[0];
    if phi.shape() != [n, 1] {
        return Err(AdaptError::Dimension(format!("phi {:?}, expected [{}, 1]", phi.shape(), n)));
    }
    let gate = fused
        .matmul(bound.var("prune.gate1_w"))
        .add_bias(bound.var("prune.gate1_b"))
        .sigmoid();
    let f_prime = gate.mul(fused);
    let u = Var::concat_cols(&[f_prime, phi.clone()]);
    let hid = u
        .matmul(bound.var("prune.hid_g_w"))
        .add_bias(bound.var("prune.hid_g_b"))
        .sigmoid()
        .mul(&u.matmul(bound.var("prune.hid_a_w")).add_bias(bound.var("prune.hid_a_b")));
    let soft = hid.matmul(bound.var("prune.out_w")).add_bias(bound.var("prune.out_b")).sigmoid();
    let hard = soft.ste_threshold(tau_prune);
    let l_mask = soft.mean();
    Ok(PruneOutput { soft, hard, l_mask })
}

/// Zeroes the opacity of masked-out Gaussians. Scale is left intact so
/// covariances stay SPD; with opacity 0 the Gaussian contributes
/// nothing to any blend. Returns the number pruned.
pub fn commit_prune(scene: &mut Scene, hard: &[f64]) -> usize {
    assert_eq!(hard.len(), scene.len());
    let mut pruned = 0;
    for (g, &m) in scene.gaussians.iter_mut().zip(hard) {
        if m < 0.5 {
            g.opacity = 0.0;
            pruned += 1;
        }
    }
    pruned
}

/// Physically removes zero-opacity Gaussians, shrinking the state in
/// lockstep. Index-invalidating, so only at adaptation boundaries.
pub fn compact(scene: &mut Scene, state: &mut AdaptationState) -> usize {
    assert_eq!(scene.len(), state.len());
    let keep: Vec<bool> = scene.gaussians.iter().map(|g| g.opacity > 0.0).collect();
    let removed = keep.iter().filter(|k| !**k).count();
    fn retain_by<T>(v: &mut Vec<T>, keep: &[bool]) {
        let mut it = keep.iter();
        v.retain(|_| *it.next().unwrap());
    }
    retain_by(&mut scene.gaussians, &keep);
    retain_by(&mut state.phi, &keep);
    retain_by(&mut state.psi, &keep);
    retain_by(&mut state.grad_accum, &keep);
    removed
}

#[derive(Debug, Clone)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    pub alpha_d: f64,
    pub n_max: usize,
    pub radius: f64,
    pub d_min: f64,
    pub d_max: f64,
}

/// Candidate budget: min(N_max, alpha_d * V_pc / N_ori), floored.
pub fn candidate_count(n_max: usize, alpha_d: f64, v_pc: f64, n_ori: usize) -> usize {
    ((alpha_d * v_pc / n_ori as f64).floor() as usize).min(n_max)
}

/// Axis-aligned bounding-box volume of the region's member centers,
/// floored so flat regions still densify.
pub fn region_volume(scene: &Scene, region: &LocalRegion, radius: f64) -> f64 {
    let mut lo = nalgebra::Vector3::repeat(f64::INFINITY);
    let mut hi = nalgebra::Vector3::repeat(f64::NEG_INFINITY);
    for &i in &region.member_indices {
        let c = scene.gaussians[i].center;
        lo = lo.inf(&c);
        hi = hi.sup(&c);
    }
    let ext = hi - lo;
    (ext.x * ext.y * ext.z).max(radius.powi(3) * 1e-3)
}

/// Draws candidates uniformly in a sphere around the region center,
/// rejects those whose nearest-neighbor distance falls outside
/// [d_min, d_max], and clones the nearest neighbor's attributes onto
/// the accepted centers. Existing Gaussians are never modified.
pub fn densify_region(
    scene: &Scene,
    region: &LocalRegion,
    state: &AdaptationState,
    p: &DensifyParams,
    rng_seed: u64,
) -> Vec<SemanticGaussian> {
    assert!(!region.member_indices.is_empty());
    let mean_grad = region
        .member_indices
        .iter()
        .map(|&i| state.grad_accum[i])
        .sum::<f64>()
        / region.member_indices.len() as f64;
    if mean_grad <= p.grad_threshold {
        return Vec::new();
    }
    let n_ori = region.member_indices.len();
    let v_pc = region_volume(scene, region, p.radius);
    let n_p = candidate_count(p.n_max, p.alpha_d, v_pc, n_ori);
    let center = scene.gaussians[region.center_index].center;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::new();
    for _ in 0..n_p {
        let dir = loop {
            let v = nalgebra::Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm_squared() <= 1.0 {
                break v;
            }
        };
        let cand = center + dir * p.radius;
        let (nn, dist) = scene
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| (i, (g.center - cand).norm()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap();
        if dist < p.d_min || dist > p.d_max {
            continue;
        }
        let mut g = scene.gaussians[nn].clone();
        g.center = cand;
        out.push(g);
    }
    out
}

/// Appends accepted candidates and grows the state rows.
pub fn commit_densify(
    scene: &mut Scene,
    state: &mut AdaptationState,
    new: Vec<SemanticGaussian>,
) -> usize {
    let added = new.len();
    for g in new {
        scene.gaussians.push(g);
        state.phi.push(0.0);
        state.psi.push([0.0; 4]);
        state.grad_accum.push(0.0);
    }
    added
}

/// Differentiable histogram with sigmoid bin edges.
#[derive(Debug, Clone)]
pub struct SoftHistogram {
    pub bins: Vec<f64>,
    pub range: (f64, f64),
    pub gamma: f64,
    pub delta: f64,
}

/// Default softness gamma = 50 / delta.
pub fn default_gamma(range: (f64, f64), bins: usize) -> f64 {
    50.0 / ((range.1 - range.0) / bins as f64)
}

pub fn soft_histogram(
    samples: &[f64],
    range: (f64, f64),
    bins: usize,
    gamma: f64,
) -> Result<SoftHistogram, AdaptError> {
    if !(range.1 > range.0) || bins == 0 || !(gamma > 0.0) {
        return Err(AdaptError::Range(format!(
            "range {:?}, bins {}, gamma {}",
            range, bins, gamma
        )));
    }
    let delta = (range.1 - range.0) / bins as f64;
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut counts = vec![0.0; bins];
    for &x in samples {
        for (b, c) in counts.iter_mut().enumerate() {
            let lo = range.0 + delta * b as f64;
            let hi = lo + delta;
            *c += sig(gamma * (x - lo)) - sig(gamma * (x - hi));
        }
    }
    Ok(SoftHistogram { bins: counts, range, gamma, delta })
}

/// Empirical sample range padded by 1% (at least 1e-6) on both sides.
pub fn padded_range(samples: &[f64]) -> (f64, f64) {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if samples.is_empty() { (0.0, 1.0) } else { (lo, hi) };
    let pad = (0.01 * (hi - lo)).max(1e-6);
    (lo - pad, hi + pad)
}

/// Flattened degree-l SH entries of the region members: the sample set
/// the degree-l histogram summarizes.
pub fn degree_samples(scene: &Scene, members: &[usize], l: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in members {
        out.extend_from_slice(&scene.gaussians[i].sh_coeffs[l]);
    }
    out
}

/// Per-degree mask networks: a per-degree MLP embeds the region
/// histogram, and a linear+sigmoid head maps [f_i, psi_i, eta] to the
/// soft mask.
pub struct ShPruneNets {
    pub feature_dim: usize,
    pub hist_bins: usize,
    pub hist_dim: usize,
    pub params: ParamSet,
}

impl ShPruneNets {
    pub fn new(feature_dim: usize, hist_bins: usize, hist_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for l in 0..4 {
            p.insert(&format!("sh{}.hist_w", l), glorot(&mut rng, hist_bins, hist_dim));
            p.insert(&format!("sh{}.hist_b", l), Tensor::matrix(1, hist_dim, vec![0.0; hist_dim]));
            p.insert(
                &format!("sh{}.out_w", l),
                glorot(&mut rng, feature_dim + 1 + hist_dim, 1),
            );
            p.insert(&format!("sh{}.out_b", l), Tensor::matrix(1, 1, vec![0.0]));
        }
        Self { feature_dim, hist_bins, hist_dim, params: p }
    }
}

pub struct ShPruneOutput {
    /// Soft per-degree masks, each N x 1.
    pub soft: [Var; 4],
    pub hard: [Var; 4],
    /// (1/N) sum_i sum_l (2l+1) delta_i^l.
    pub l_sh: Var,
}

/// Assembles one histogram row per Gaussian and degree: the first
/// listed region containing the Gaussian, falling back to a whole-scene
/// histogram for uncovered Gaussians.
pub fn assemble_degree_histograms(
    scene: &Scene,
    regions: &[LocalRegion],
    bins: usize,
) -> Result<[Tensor; 4], AdaptError> {
    let n = scene.len();
    let all: Vec<usize> = (0..n).collect();
    let mut assignment = vec![usize::MAX; n];
    for (ri, r) in regions.iter().enumerate() {
        for &i in &r.member_indices {
            if assignment[i] == usize::MAX {
                assignment[i] = ri;
            }
        }
    }
    let mut out: Vec<Tensor> = Vec::with_capacity(4);
    for l in 0..4 {
        let hist_of = |members: &[usize]| -> Result<Vec<f64>, AdaptError> {
            let samples = degree_samples(scene, members, l);
            let range = padded_range(&samples);
            Ok(soft_histogram(&samples, range, bins, default_gamma(range, bins))?.bins)
        };
        let global = hist_of(&all)?;
        let per_region: Vec<Vec<f64>> =
            regions.iter().map(|r| hist_of(&r.member_indices)).collect::<Result<_, _>>()?;
        let mut data = Vec::with_capacity(n * bins);
        for i in 0..n {
            let row = if assignment[i] == usize::MAX { &global } else { &per_region[assignment[i]] };
            data.extend_from_slice(row);
        }
        out.push(Tensor::matrix(n, bins, data));
    }
    Ok(out.try_into().unwrap())
}

pub fn sh_prune(
    nets: &ShPruneNets,
    bound: &BoundParams,
    fused: &Var,
    psi: &Var,
    hists: &[Var; 4],
    tau_l: [f64; 4],
) -> Result<ShPruneOutput, AdaptError> {
    let shape = fused.shape();
    if shape.len() != 2 || shape[1] != nets.feature_dim {
        return Err(AdaptError::Dimension(format!(
            "fused features {:?}, expected [N, {}]",
            shape, nets.feature_dim
        )));
    }
    let n = shape[0];
    if psi.shape() != [n, 4] {
        return Err(AdaptError::Dimension(format!("psi {:?}, expected [{}, 4]", psi.shape(), n)));
    }
    let mut soft = Vec::with_capacity(4);
    let mut hard = Vec::with_capacity(4);
    let mut l_sh: Option<Var> = None;
    for l in 0..4 {
        if hists[l].shape() != [n, nets.hist_bins] {
            return Err(AdaptError::Dimension(format!(
                "histogram {} is {:?}, expected [{}, {}]",
                l,
                hists[l].shape(),
                n,
                nets.hist_bins
            )));
        }
        let eta = hists[l]
            .matmul(bound.var(&format!("sh{}.hist_w", l)))
            .add_bias(bound.var(&format!("sh{}.hist_b", l)))
            .tanh();
        let v = Var::concat_cols(&[fused.clone(), psi.slice_cols(l, l + 1), eta]);
        let delta = v
            .matmul(bound.var(&format!("sh{}.out_w", l)))
            .add_bias(bound.var(&format!("sh{}.out_b", l)))
            .sigmoid();
        hard.push(delta.ste_threshold(tau_l[l]));
        let term = delta.mean().scale((2 * l + 1) as f64);
        l_sh = Some(match l_sh {
            Some(acc) => acc.add(&term),
            None => term,
        });
        soft.push(delta);
    }
    Ok(ShPruneOutput {
        soft: soft.try_into().map_err(|_| AdaptError::Dimension("degree count".into())).unwrap(),
        hard: hard.try_into().map_err(|_| AdaptError::Dimension("degree count".into())).unwrap(),
        l_sh: l_sh.unwrap(),
    })
}

/// Zeroes masked-out SH blocks; returns per-degree zeroed counts.
pub fn commit_sh_masks(scene: &mut Scene, hard: &[[f64; 4]]) -> [usize; 4] {
    assert_eq!(hard.len(), scene.len());
    let mut zeroed = [0usize; 4];
    for (g, masks) in scene.gaussians.iter_mut().zip(hard) {
        for l in 0..4 {
            if masks[l] < 0.5 {
                g.sh_coeffs[l].iter_mut().for_each(|c| *c = 0.0);
                zeroed[l] += 1;
            }
        }
    }
    zeroed
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub render: f64,
    pub semantic: f64,
    pub mask: f64,
    pub sh: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { render: 1.0, semantic: 1.0, mask: 5e-4, sh: 1e-4, reg: 1.0 }
    }
}

/// Weighted total objective; every input stays differentiable.
pub fn adaptation_losses(
    l_render: &Var,
    l_semantic: &Var,
    l_mask: &Var,
    l_sh: &Var,
    l_reg: &Var,
    w: &LossWeights,
) -> Result<Var, AdaptError> {
    for v in [l_render, l_semantic, l_mask, l_sh, l_reg] {
        if !v.value().as_scalar().is_finite() {
            return Err(AdaptError::NonFinite);
        }
    }
    Ok(l_render
        .scale(w.render)
        .add(&l_semantic.scale(w.semantic))
        .add(&l_mask.scale(w.mask))
        .add(&l_sh.scale(w.sh))
        .add(&l_reg.scale(w.reg)))
}

/// One line of the adaptation log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdaptationEvent {
    pub iteration: usize,
    pub pruned: usize,
    pub added: usize,
    pub sh_zeroed_per_degree: [usize; 4],
    pub l_mask: f64,
    pub l_sh: f64,
}

pub fn append_adaptation_log(
    path: &std::path::Path,
    event: &AdaptationEvent,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(event).expect("serializable event"))
}

#[cfg(test)]
mod tests;
