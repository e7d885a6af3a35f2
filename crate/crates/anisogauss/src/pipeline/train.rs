//! The train/adapt loop: render, losses, backward through both the
//! renderer and the tape, optimizer step, periodic adaptation commits
//! and the end-of-scene basis update.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::adapt::{
    append_adaptation_log, assemble_degree_histograms, commit_densify, compact, densify_region,
    AdaptationEvent, AdaptationState, DensifyParams, PruneNet, ShPruneNets,
};
use crate::encode::{propagate_weights, save_params, Encoder, Fusion, ParamSet};
use crate::numerics::{Tape, Tensor, Var};
use crate::scene::{
    farthest_point_sample, neighborhood_query, Camera, LocalRegion, Scene, SceneError,
};
use crate::spectral::{anisotropic_descriptor, SpectralParams};
use crate::splat::{
    l1_loss, l2_loss, psnr, render, render_backward, write_png, write_semantic_npy,
    RenderOptions, ALPHA_MAX, ALPHA_MIN,
};
use crate::transfer::{
    load_basis, maybe_update_basis, reg_loss, save_basis, ModNet, PatternBasis,
};

use super::generate::GeneratedScene;
use super::metrics::{emit_metrics, MetricsRecord};
use super::opt::{Adam, AdamConfig};
use super::{PipelineConfig, PipelineError, RegionCfg};

/// Linear-scan audit of one region's densification commit.
#[derive(Debug, Clone)]
pub struct DensifyAudit {
    pub iteration: usize,
    pub region_center: Vector3<f64>,
    /// Candidate budget N_p for the region.
    pub budget: usize,
    pub accepted: usize,
    /// Nearest-neighbor distance of each accepted Gaussian against
    /// the scene it was inserted into.
    pub nn_distances: Vec<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_psnr: f64,
    pub final_count: usize,
    pub final_l_render: f64,
    pub wall_seconds: f64,
    pub scene: Scene,
    pub densify_audits: Vec<DensifyAudit>,
    /// Final per-degree mask of each Gaussian (1 = block active,
    /// 0 = zeroed); indices match generator order while no
    /// densification ran.
    pub sh_masks: Vec<[f64; 4]>,
    pub pruned_alive: Vec<bool>,
}

/// FPS centers with radius neighborhoods, capped to the nearest
/// `max_members`; regions that cannot support a descriptor (< 2
/// members) are dropped.
pub fn build_regions(
    scene: &Scene,
    cfg: &RegionCfg,
    _seed: u64,
) -> Result<Vec<LocalRegion>, SceneError> {
    if scene.is_empty() {
        return Ok(Vec::new());
    }
    let domain: Vec<usize> = (0..scene.len()).collect();
    let points = scene.centers();
    let k = cfg.count.min(scene.len());
    let centers = farthest_point_sample(&points, &domain, k, 0)?;
    let radius = (scene.extent() * cfg.radius_scale).max(1e-6);
    let mut regions = Vec::new();
    for c in centers {
        let mut region = neighborhood_query(scene, c, radius, &domain);
        if region.member_indices.len() > cfg.max_members {
            let cp = points[c];
            let mut by_dist: Vec<usize> = region.member_indices.clone();
            by_dist.sort_by(|&a, &b| {
                let da = (points[a] - cp).norm();
                let db = (points[b] - cp).norm();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            by_dist.truncate(cfg.max_members);
            by_dist.sort_unstable();
            region.member_indices = by_dist;
        }
        if region.member_indices.len() >= 2 {
            regions.push(region);
        }
    }
    Ok(regions)
}

/// Geometry-derived quantities recomputed at adaptation boundaries:
/// regions, their descriptors, the propagation weights and the SH
/// histogram rows.
struct Phase {
    regions: Vec<LocalRegion>,
    /// Per region: descriptor rows (n x Q) and member centers.
    descriptors: Vec<Tensor>,
    member_centers: Vec<Vec<Vector3<f64>>>,
    /// N x R propagation weights; zero row means uncovered.
    w_prop: Tensor,
    /// N x D_f, one where the Gaussian is covered by some region.
    cover: Tensor,
    covered_any: bool,
    hists: Option<[Tensor; 4]>,
    /// Mean descriptor row, 1 x Q.
    zbar: Tensor,
    all_descriptor_rows: Vec<Vec<f64>>,
}

fn region_covariance(scene: &Scene, region: &LocalRegion) -> Matrix3<f64> {
    let pts: Vec<Vector3<f64>> =
        region.member_indices.iter().map(|&i| scene.gaussians[i].center).collect();
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= pts.len() as f64;
    cov + Matrix3::identity() * 1e-6
}

fn build_phase(
    scene: &Scene,
    cfg: &PipelineConfig,
    params: &SpectralParams,
    q: usize,
    need_hists: bool,
) -> Result<Phase, PipelineError> {
    let n = scene.len();
    let df = scene.semantic_dim;
    let empty = |hists| Phase {
        regions: Vec::new(),
        descriptors: Vec::new(),
        member_centers: Vec::new(),
        w_prop: Tensor::zeros(&[n, 1]),
        cover: Tensor::zeros(&[n, df]),
        covered_any: false,
        hists,
        zbar: Tensor::zeros(&[1, q]),
        all_descriptor_rows: Vec::new(),
    };
    if !cfg.encoder.enabled {
        return Ok(empty(None));
    }
    let regions = build_regions(scene, &cfg.regions, cfg.train.seed)
        .map_err(|e| PipelineError::Runtime(e.to_string()))?;
    if regions.is_empty() {
        return Ok(empty(None));
    }
    let mut descriptors = Vec::new();
    let mut member_centers = Vec::new();
    let mut all_rows: Vec<Vec<f64>> = Vec::new();
    for r in &regions {
        let descs = anisotropic_descriptor(r, scene, params)
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        let rows = descs.len();
        let mut data = Vec::with_capacity(rows * q);
        for d in &descs {
            assert_eq!(d.values.len(), q, "descriptor dimension drifted from config");
            data.extend_from_slice(&d.values);
            all_rows.push(d.values.clone());
        }
        descriptors.push(Tensor::matrix(rows, q, data));
        member_centers.push(r.member_indices.iter().map(|&i| scene.gaussians[i].center).collect());
    }
    let sigmas: Vec<Matrix3<f64>> = regions.iter().map(|r| region_covariance(scene, r)).collect();
    let region_centers: Vec<Vector3<f64>> =
        regions.iter().map(|r| scene.gaussians[r.center_index].center).collect();
    let mut w_prop = vec![0.0; n * regions.len()];
    let mut cover = vec![0.0; n * df];
    let mut covered_any = false;
    for i in 0..n {
        let containing: Vec<usize> = regions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.member_indices.binary_search(&i).is_ok())
            .map(|(ri, _)| ri)
            .collect();
        if containing.is_empty() {
            continue;
        }
        let picked: Vec<(Vector3<f64>, Matrix3<f64>)> =
            containing.iter().map(|&ri| (region_centers[ri], sigmas[ri])).collect();
        let w = propagate_weights(&scene.gaussians[i].center, &picked, cfg.train.tau_prop)
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        for (&ri, &wi) in containing.iter().zip(&w) {
            w_prop[i * regions.len() + ri] = wi;
        }
        for d in 0..df {
            cover[i * df + d] = 1.0;
        }
        covered_any = true;
    }
    let mut zbar = vec![0.0; q];
    if !all_rows.is_empty() {
        for row in &all_rows {
            for (z, v) in zbar.iter_mut().zip(row) {
                *z += v;
            }
        }
        for z in zbar.iter_mut() {
            *z /= all_rows.len() as f64;
        }
    }
    let hists = if need_hists {
        Some(
            assemble_degree_histograms(scene, &regions, cfg.sh.hist_bins)
                .map_err(|e| PipelineError::Runtime(e.to_string()))?,
        )
    } else {
        None
    };
    let r = regions.len();
    Ok(Phase {
        regions,
        descriptors,
        member_centers,
        w_prop: Tensor::matrix(n, r, w_prop),
        cover: Tensor::matrix(n, df, cover),
        covered_any,
        hists,
        zbar: Tensor::matrix(1, q, zbar),
        all_descriptor_rows: all_rows,
    })
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Flattens the renderer's SH gradient into the degree-major N x 48
/// layout of the parameter tensor.
fn flatten_d_sh(d_sh: &[[[f64; 16]; 3]]) -> Tensor {
    let n = d_sh.len();
    let mut data = Vec::with_capacity(n * 48);
    for g in d_sh {
        for l in 0..4usize {
            for m in 0..(2 * l + 1) {
                for ch in 0..3 {
                    data.push(g[ch][l * l + m]);
                }
            }
        }
    }
    Tensor::matrix(n, 48, data)
}

fn flat_sh(g: &crate::scene::SemanticGaussian) -> Vec<f64> {
    let mut out = Vec::with_capacity(48);
    for l in 0..4 {
        out.extend_from_slice(&g.sh_coeffs[l]);
    }
    out
}

fn heldout_psnr(scene: &Scene, cams: &[Camera], refs: &[Vec<f64>]) -> f64 {
    let opts = RenderOptions::default();
    let mut total = 0.0;
    for (cam, r) in cams.iter().zip(refs) {
        let img = render(scene, cam, &opts);
        total += psnr(&img.color, r).unwrap_or(f64::NAN);
    }
    total / cams.len() as f64
}

const SH_WIDTHS: [usize; 4] = [3, 9, 15, 21];

pub fn train(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, PipelineError> {
    let start = std::time::Instant::now();
    let generated: GeneratedScene = cfg.build_scene()?;
    let gt = &generated.gt;
    if gt.is_empty() {
        return Err(PipelineError::Runtime("scene is empty".into()));
    }
    let mut scene = generated.init.clone();
    let df = scene.semantic_dim;
    let q = cfg.spectral.descriptor_dim();
    let spectral_params = cfg.spectral.params();
    let seed = cfg.train.seed;

    let target = gt.centers().iter().sum::<Vector3<f64>>() / gt.len() as f64;
    let cameras = cfg.build_cameras(target);
    let split = cameras.len() - cfg.cameras.heldout;
    let (train_cams, held_cams) = cameras.split_at(split);
    let opts = RenderOptions::default();
    let ref_color: Vec<Vec<f64>> =
        train_cams.iter().map(|c| render(gt, c, &opts).color).collect();
    let ref_sem: Vec<Vec<f64>> =
        train_cams.iter().map(|c| render(gt, c, &opts).semantic).collect();
    let held_ref: Vec<Vec<f64>> = held_cams.iter().map(|c| render(gt, c, &opts).color).collect();

    // master parameters; per-Gaussian tensors grow under densification
    let mut master = ParamSet::new();
    let n0 = scene.len();
    {
        let mut sh_data = Vec::with_capacity(n0 * 48);
        let mut logits = Vec::with_capacity(n0);
        let mut feats = Vec::with_capacity(n0 * df);
        for g in &scene.gaussians {
            sh_data.extend(flat_sh(g));
            logits.push(logit(g.opacity));
            feats.extend_from_slice(&g.semantic_feature);
        }
        master.insert("gauss.sh", Tensor::matrix(n0, 48, sh_data));
        master.insert("gauss.alpha_logit", Tensor::matrix(n0, 1, logits));
        master.insert("gauss.feat", Tensor::matrix(n0, df, feats));
        master.insert("adapt.phi", Tensor::matrix(n0, 1, vec![0.0; n0]));
        master.insert("adapt.psi", Tensor::matrix(n0, 4, vec![0.0; n0 * 4]));
    }
    let encoder = if cfg.encoder.enabled {
        let enc = Encoder::new(cfg.encoder.to_encoder_config(q), seed ^ 0xA11CE)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        master.merge(enc.params.clone());
        let fusion = Fusion::new(cfg.encoder.model_dim, df, seed ^ 0xF0);
        master.merge(fusion.params.clone());
        Some((enc, fusion))
    } else {
        None
    };
    let prune_net = if cfg.prune.enabled {
        let net = PruneNet::new(df, cfg.prune.hidden, seed ^ 0x9121);
        master.merge(net.params.clone());
        Some(net)
    } else {
        None
    };
    let sh_nets = if cfg.sh.enabled {
        let nets = ShPruneNets::new(df, cfg.sh.hist_bins, cfg.sh.hist_dim, seed ^ 0x51);
        master.merge(nets.params.clone());
        Some(nets)
    } else {
        None
    };
    let activation = cfg.transfer.mod_activation()?;
    let tracked = cfg.transfer.tracked(cfg.encoder.layers);
    let mut basis: Option<PatternBasis> = if cfg.transfer.enabled {
        let modnet = ModNet::new(q, activation, seed ^ 0xB0B);
        master.insert("mod.w", modnet.weight.clone());
        master.insert("mod.b", modnet.bias.clone());
        Some(match &cfg.transfer.basis_in {
            Some(p) => load_basis(p).map_err(|e| PipelineError::Runtime(e.to_string()))?,
            None => PatternBasis::empty(cfg.encoder.model_dim),
        })
    } else {
        None
    };
    if cfg.transfer.enabled {
        if let Some(b) = &basis {
            if b.dim() != cfg.encoder.model_dim {
                return Err(PipelineError::Config(format!(
                    "basis dimension {} does not match model_dim {}",
                    b.dim(),
                    cfg.encoder.model_dim
                )));
            }
        }
    }

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.train.lr,
        groups: vec![
            ("gauss.sh".into(), cfg.train.lr_sh),
            ("gauss.feat".into(), cfg.train.lr_feat),
            ("gauss.alpha_logit".into(), cfg.train.lr_opacity),
        ],
        ..AdamConfig::default()
    });

    let mut state = AdaptationState::new(scene.len());
    let mut committed_alive: Vec<f64> = vec![1.0; scene.len()];
    let mut committed_sh: Vec<[f64; 4]> = vec![[1.0; 4]; scene.len()];
    let mut phase = build_phase(&scene, cfg, &spectral_params, q, cfg.sh.enabled)?;

    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut audits: Vec<DensifyAudit> = Vec::new();
    let mut last_psnr = f64::NAN;
    let mut last_l_render = f64::NAN;
    let mut last_hard: Vec<f64> = vec![1.0; scene.len()];
    let mut last_sh_hard: Vec<[f64; 4]> = vec![[1.0; 4]; scene.len()];

    for iter in 0..cfg.train.iterations {
        let n = scene.len();
        let tape = Tape::new();
        let bound = master.bind(&tape);

        // shape-semantic fusion; uncovered rows keep the raw feature
        let sem = bound.var("gauss.feat").clone();
        let f_final = match (&encoder, phase.covered_any) {
            (Some((enc, _fusion)), true) => {
                let mut encodings = Vec::with_capacity(phase.regions.len());
                for (d, centers) in phase.descriptors.iter().zip(&phase.member_centers) {
                    encodings.push(
                        enc.encode_region(&bound, d, centers)
                            .map_err(|e| PipelineError::Runtime(e.to_string()))?,
                    );
                }
                let p = Var::concat_rows(&encodings);
                let w_prop = tape.constant(phase.w_prop.clone());
                let shape_all = w_prop.matmul(&p);
                let proj = shape_all
                    .matmul(bound.var("fuse.proj_w"))
                    .add_bias(bound.var("fuse.proj_b"));
                let u = Var::concat_cols(&[proj.clone(), sem.clone()]);
                let gate = u
                    .matmul(bound.var("fuse.gate_w"))
                    .add_bias(bound.var("fuse.gate_b"))
                    .sigmoid();
                let one_minus = gate.scale(-1.0).add_const(1.0);
                let fused = gate.mul(&sem).add(&one_minus.mul(&proj));
                let cover = tape.constant(phase.cover.clone());
                let anti = cover.scale(-1.0).add_const(1.0);
                cover.mul(&fused).add(&anti.mul(&sem))
            }
            _ => sem.clone(),
        };

        // opacity with prune mask and committed kills baked in
        let alive_const = tape.constant(Tensor::matrix(n, 1, committed_alive.clone()));
        let phi = bound.var("adapt.phi").clone();
        let (alive, l_mask) = match &prune_net {
            Some(net) => {
                let out = crate::adapt::prune_mask(net, &bound, &f_final, &phi, cfg.prune.tau)
                    .map_err(|e| PipelineError::Runtime(e.to_string()))?;
                last_hard = out.hard.value().data.clone();
                (out.hard.mul(&alive_const), Some(out.l_mask))
            }
            None => {
                last_hard = vec![1.0; n];
                (alive_const.clone(), None)
            }
        };
        let alpha_tilde = bound.var("gauss.alpha_logit").sigmoid().mul(&alive);

        // SH with per-degree masks and committed zeros baked in
        let sh_var = bound.var("gauss.sh").clone();
        let (masked_sh, l_sh) = match (&sh_nets, &phase.hists) {
            (Some(nets), Some(hists)) => {
                let psi = bound.var("adapt.psi").clone();
                let hist_vars: [Var; 4] = [
                    tape.constant(hists[0].clone()),
                    tape.constant(hists[1].clone()),
                    tape.constant(hists[2].clone()),
                    tape.constant(hists[3].clone()),
                ];
                let out = crate::adapt::sh_prune(nets, &bound, &f_final, &psi, &hist_vars, cfg.sh.tau)
                    .map_err(|e| PipelineError::Runtime(e.to_string()))?;
                for (i, row) in last_sh_hard.iter_mut().enumerate().take(n) {
                    for l in 0..4 {
                        row[l] = out.hard[l].value().data[i] * committed_sh[i][l];
                    }
                }
                let mut blocks = Vec::with_capacity(4);
                for l in 0..4 {
                    let committed_col = tape.constant(Tensor::matrix(
                        n,
                        1,
                        committed_sh.iter().map(|c| c[l]).collect(),
                    ));
                    let gated = out.hard[l].mul(&committed_col);
                    let ones = tape.constant(Tensor::matrix(1, SH_WIDTHS[l], vec![1.0; SH_WIDTHS[l]]));
                    blocks.push(gated.matmul(&ones));
                }
                let mask_mat = Var::concat_cols(&blocks);
                (sh_var.mul(&mask_mat), Some(out.l_sh))
            }
            _ => {
                for row in last_sh_hard.iter_mut().take(n) {
                    *row = [1.0; 4];
                }
                (sh_var.clone(), None)
            }
        };

        // sync scene values for the renderer
        {
            let sh_vals = masked_sh.value();
            let a_vals = alpha_tilde.value();
            let f_vals = f_final.value();
            for (i, g) in scene.gaussians.iter_mut().enumerate() {
                let row = &sh_vals.data[i * 48..(i + 1) * 48];
                let mut off = 0;
                for l in 0..4 {
                    g.sh_coeffs[l].copy_from_slice(&row[off..off + SH_WIDTHS[l]]);
                    off += SH_WIDTHS[l];
                }
                g.opacity = a_vals.data[i].clamp(0.0, ALPHA_MAX);
                g.semantic_feature.copy_from_slice(&f_vals.data[i * df..(i + 1) * df]);
            }
        }

        let cam = &train_cams[iter % train_cams.len()];
        let img = render(&scene, cam, &opts);
        let (l_render, mut d_color) = l2_loss(&img.color, &ref_color[iter % train_cams.len()]);
        let (l_semantic, mut d_sem) = l1_loss(&img.semantic, &ref_sem[iter % train_cams.len()]);
        for g in d_color.iter_mut() {
            *g *= cfg.loss.render;
        }
        for g in d_sem.iter_mut() {
            *g *= cfg.loss.semantic;
        }
        let grads = render_backward(&scene, cam, &opts, &d_color, &d_sem);
        state.record_render_gradients(&grads.d_mean2d);

        // inject renderer gradients into the tape as inner products
        let mut total = masked_sh.inner_with(&flatten_d_sh(&grads.d_sh));
        total = total.add(&alpha_tilde.inner_with(&Tensor::matrix(n, 1, grads.d_opacity.clone())));
        let mut dfeat = Vec::with_capacity(n * df);
        for row in &grads.d_feature {
            dfeat.extend_from_slice(row);
        }
        total = total.add(&f_final.inner_with(&Tensor::matrix(n, df, dfeat)));
        if let Some(lm) = &l_mask {
            total = total.add(&lm.scale(cfg.loss.mask));
        }
        if let Some(ls) = &l_sh {
            total = total.add(&ls.scale(cfg.loss.sh));
        }
        let mut l_reg_val = 0.0;
        if let Some(b) = &basis {
            let mut reg_sum: Option<Var> = None;
            for name in &tracked {
                let r = reg_loss(
                    &tape,
                    bound.var(name),
                    b,
                    &phase.zbar,
                    bound.var("mod.w"),
                    bound.var("mod.b"),
                    activation,
                )
                .map_err(|e| PipelineError::Runtime(e.to_string()))?;
                reg_sum = Some(match reg_sum {
                    Some(acc) => acc.add(&r.loss),
                    None => r.loss,
                });
            }
            if let Some(r) = reg_sum {
                l_reg_val = r.value().as_scalar();
                total = total.add(&r.scale(cfg.loss.reg));
            }
        }

        let tape_grads = tape.backward(&total).map_err(|e| PipelineError::Runtime(e.to_string()))?;
        let named: Vec<(String, Tensor)> =
            bound.iter().map(|(name, var)| (name.to_string(), tape_grads.wrt(var))).collect();
        adam.step(&mut master, &named);

        // metrics
        let l_mask_val = l_mask.as_ref().map(|v| v.value().as_scalar()).unwrap_or(0.0);
        let l_sh_val = l_sh.as_ref().map(|v| v.value().as_scalar()).unwrap_or(0.0);
        last_l_render = l_render;
        if iter % cfg.train.psnr_interval == 0 {
            last_psnr = heldout_psnr(&scene, held_cams, &held_ref);
        }
        let mut sh_active = [0.0; 4];
        for row in last_sh_hard.iter().take(n) {
            for l in 0..4 {
                sh_active[l] += row[l];
            }
        }
        for a in sh_active.iter_mut() {
            *a /= n as f64;
        }
        let count = committed_alive.iter().filter(|&&a| a > 0.5).count();
        records.push(MetricsRecord {
            iteration: iter,
            l_render,
            l_semantic,
            l_mask: l_mask_val,
            l_sh: l_sh_val,
            l_reg: l_reg_val,
            total: cfg.loss.render * l_render
                + cfg.loss.semantic * l_semantic
                + cfg.loss.mask * l_mask_val
                + cfg.loss.sh * l_sh_val
                + cfg.loss.reg * l_reg_val,
            gaussian_count: count,
            psnr: last_psnr,
            sh_active_fraction: sh_active,
        });

        // adaptation boundary
        if (iter + 1) % cfg.train.adapt_interval == 0 {
            let mut pruned = 0;
            if prune_net.is_some() {
                for (a, &m) in committed_alive.iter_mut().zip(&last_hard) {
                    if *a > 0.5 && m < 0.5 {
                        *a = 0.0;
                        pruned += 1;
                    }
                }
            }
            let mut sh_zeroed = [0usize; 4];
            if sh_nets.is_some() {
                let sh_master = master.get_mut("gauss.sh").expect("gauss.sh");
                for i in 0..n {
                    for l in 0..4 {
                        if committed_sh[i][l] > 0.5 && last_sh_hard[i][l] < 0.5 {
                            committed_sh[i][l] = 0.0;
                            sh_zeroed[l] += 1;
                            let off: usize = SH_WIDTHS[..l].iter().sum();
                            for c in 0..SH_WIDTHS[l] {
                                sh_master.data[i * 48 + off + c] = 0.0;
                            }
                        }
                    }
                }
            }
            let mut added_total = 0;
            if cfg.densify.enabled {
                let regions = phase.regions.clone();
                for (ri, region) in regions.iter().enumerate() {
                    if std::env::var_os("AG_DEBUG_DENSIFY").is_some() {
                        let mg = region
                            .member_indices
                            .iter()
                            .map(|&i| state.grad_accum[i])
                            .sum::<f64>()
                            / region.member_indices.len() as f64;
                        let c = scene.gaussians[region.center_index].center;
                        eprintln!(
                            "densify-debug iter={} region={} center=({:.2},{:.2},{:.2}) mean_grad={:.3e}",
                            iter + 1, ri, c.x, c.y, c.z, mg
                        );
                    }
                    let radius = region.radius * cfg.densify.radius_scale;
                    let p = DensifyParams {
                        grad_threshold: cfg.densify.grad_threshold,
                        alpha_d: cfg.densify.alpha_d,
                        n_max: cfg.densify.n_max,
                        radius,
                        d_min: cfg.densify.d_min,
                        d_max: cfg.densify.d_max,
                    };
                    let rng_seed = seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(((iter as u64) << 20) | ri as u64);
                    let new = densify_region(&scene, region, &state, &p, rng_seed);
                    if new.is_empty() {
                        continue;
                    }
                    let mean_grad = region
                        .member_indices
                        .iter()
                        .map(|&i| state.grad_accum[i])
                        .sum::<f64>()
                        / region.member_indices.len() as f64;
                    debug_assert!(mean_grad > p.grad_threshold);
                    let v_pc = crate::adapt::region_volume(&scene, region, radius);
                    let budget = crate::adapt::candidate_count(
                        p.n_max,
                        p.alpha_d,
                        v_pc,
                        region.member_indices.len(),
                    );
                    let nn_distances: Vec<f64> = new
                        .iter()
                        .map(|g| {
                            scene
                                .gaussians
                                .iter()
                                .map(|e| (e.center - g.center).norm())
                                .fold(f64::INFINITY, f64::min)
                        })
                        .collect();
                    audits.push(DensifyAudit {
                        iteration: iter + 1,
                        region_center: scene.gaussians[region.center_index].center,
                        budget,
                        accepted: new.len(),
                        nn_distances,
                        d_min: p.d_min,
                        d_max: p.d_max,
                    });
                    // extend parameters with the clones' attributes
                    let sh_master = master.get_mut("gauss.sh").expect("gauss.sh");
                    for g in &new {
                        sh_master.data.extend(flat_sh(g));
                        sh_master.shape[0] += 1;
                    }
                    let logit_master = master.get_mut("gauss.alpha_logit").expect("logits");
                    for g in &new {
                        logit_master.data.push(logit(g.opacity));
                        logit_master.shape[0] += 1;
                    }
                    let feat_master = master.get_mut("gauss.feat").expect("feat");
                    for g in &new {
                        feat_master.data.extend_from_slice(&g.semantic_feature);
                        feat_master.shape[0] += 1;
                    }
                    let phi_master = master.get_mut("adapt.phi").expect("phi");
                    for _ in &new {
                        phi_master.data.push(0.0);
                        phi_master.shape[0] += 1;
                    }
                    let psi_master = master.get_mut("adapt.psi").expect("psi");
                    for _ in &new {
                        psi_master.data.extend_from_slice(&[0.0; 4]);
                        psi_master.shape[0] += 1;
                    }
                    for _ in &new {
                        committed_alive.push(1.0);
                        committed_sh.push([1.0; 4]);
                        last_hard.push(1.0);
                        last_sh_hard.push([1.0; 4]);
                    }
                    added_total += commit_densify(&mut scene, &mut state, new);
                }
            }
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                append_adaptation_log(
                    &dir.join("adapt.jsonl"),
                    &AdaptationEvent {
                        iteration: iter + 1,
                        pruned,
                        added: added_total,
                        sh_zeroed_per_degree: sh_zeroed,
                        l_mask: l_mask_val,
                        l_sh: l_sh_val,
                    },
                )?;
            }
            state.reset_gradients();
            if iter + 1 < cfg.train.iterations {
                phase = build_phase(&scene, cfg, &spectral_params, q, cfg.sh.enabled)?;
            } else if added_total > 0 {
                // keep descriptor rows in sync for the basis update
                phase = build_phase(&scene, cfg, &spectral_params, q, false)?;
            }
        }
    }

    // finalize: bake committed masks into the scene and compact
    {
        let logits = master.get("gauss.alpha_logit").expect("logits");
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            let a = 1.0 / (1.0 + (-logits.data[i]).exp());
            let m = committed_alive[i] * last_hard.get(i).copied().unwrap_or(1.0);
            g.opacity = (a * m).clamp(0.0, ALPHA_MAX);
            if g.opacity < ALPHA_MIN {
                g.opacity = 0.0;
            }
        }
    }
    let pruned_alive: Vec<bool> = scene.gaussians.iter().map(|g| g.opacity > 0.0).collect();
    let sh_masks_final: Vec<[f64; 4]> = (0..scene.len())
        .map(|i| {
            let mut m = [1.0; 4];
            for l in 0..4 {
                m[l] = committed_sh[i][l] * last_sh_hard.get(i).map(|r| r[l]).unwrap_or(1.0);
            }
            m
        })
        .collect();
    let final_count = pruned_alive.iter().filter(|&&a| a).count();
    let final_psnr = if cfg.train.iterations > 0 {
        heldout_psnr(&scene, held_cams, &held_ref)
    } else {
        f64::NAN
    };

    // end-of-scene basis update against the frozen in-scene basis
    if let Some(b) = basis.take() {
        let mut current = b;
        let rows = if phase.all_descriptor_rows.is_empty() {
            vec![vec![0.0; q]]
        } else {
            phase.all_descriptor_rows.clone()
        };
        let scene_label = format!("{}-{}", cfg.scene.generator, seed);
        for name in &tracked {
            let t = master.get(name).expect("tracked matrix");
            assert_eq!(t.shape, vec![cfg.encoder.model_dim, cfg.encoder.model_dim]);
            let mut w = crate::numerics::DenseMatrix::zeros(t.shape[0], t.shape[1]);
            w.data.copy_from_slice(&t.data);
            let tc = cfg.transfer.to_transfer_config(cfg.encoder.layers);
            let (next, _decision) =
                maybe_update_basis(&w, &current, &rows, &tc, &format!("{}:{}", scene_label, name))
                    .map_err(|e| PipelineError::Runtime(e.to_string()))?;
            current = next;
        }
        if let Some(p) = &cfg.transfer.basis_out {
            save_basis(&current, p).map_err(|e| PipelineError::Runtime(e.to_string()))?;
        }
        basis = Some(current);
    }
    let _ = basis;

    compact(&mut scene, &mut state);

    if let Some(dir) = out_dir {
        emit_metrics(&records, dir)?;
        save_params(&master, &dir.join("checkpoint.agwt"))
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        crate::scene::save_scene_json(&scene, &dir.join("scene_final.json"))
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        if cfg.train.iterations > 0 {
            let img = render(&scene, &held_cams[0], &opts);
            write_png(&img, &dir.join("heldout_00.png"))
                .map_err(|e| PipelineError::Runtime(e.to_string()))?;
            write_semantic_npy(&img, &dir.join("heldout_00.npy"))
                .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        }
    }

    Ok(TrainOutcome {
        records,
        final_psnr,
        final_count,
        final_l_render: last_l_render,
        wall_seconds: start.elapsed().as_secs_f64(),
        scene,
        densify_audits: audits,
        sh_masks: sh_masks_final,
        pruned_alive,
    })
}
