use super::*;
use crate::numerics::autodiff::{finite_diff_grad, max_rel_error, Tape};
use crate::scene::{Camera, LocalRegion, Scene, SemanticGaussian};
use crate::splat::{render, RenderOptions};
use nalgebra::{Point3, Vector3};
use rand::Rng;

fn random_fused(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_scene(n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = Vec::new();
    for _ in 0..n {
        let mut g = SemanticGaussian::isotropic(
            Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(4.0..6.0),
            ),
            rng.gen_range(0.05..0.2),
            rng.gen_range(0.3..0.9),
        );
        for l in 0..4 {
            for v in g.sh_coeffs[l].iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        g.semantic_feature = vec![rng.gen_range(0.0..1.0); 2];
        gs.push(g);
    }
    Scene::new(gs, 2)
}

fn run_prune(net: &PruneNet, fused: &Tensor, phi: &Tensor, tau: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let tape = Tape::new();
    let bound = net.params.bind(&tape);
    let fused_v = tape.constant(fused.clone());
    let phi_v = tape.param(phi.clone());
    let out = prune_mask(net, &bound, &fused_v, &phi_v, tau).unwrap();
    (out.soft.value().data, out.hard.value().data, out.l_mask.value().as_scalar())
}

#[test]
fn prune_saturation_selects_all_or_none() {
    let mut net = PruneNet::new(5, 7, 3);
    let fused = random_fused(6, 5, 1);
    let phi = Tensor::matrix(6, 1, vec![0.0; 6]);

    net.params.get_mut("prune.out_b").unwrap().data[0] = 800.0;
    let (soft, hard, l_mask) = run_prune(&net, &fused, &phi, 0.01);
    assert!(soft.iter().all(|&s| s == 1.0));
    assert!(hard.iter().all(|&m| m == 1.0));
    assert!((l_mask - 1.0).abs() < 1e-12);

    net.params.get_mut("prune.out_b").unwrap().data[0] = -800.0;
    let (soft, hard, l_mask) = run_prune(&net, &fused, &phi, 0.01);
    assert!(soft.iter().all(|&s| s < 1e-12));
    assert!(hard.iter().all(|&m| m == 0.0));
    assert!(l_mask < 1e-12);
}

#[test]
fn pruned_gaussians_render_as_if_deleted() {
    let mut scene = random_scene(12, 5);
    let camera = Camera::look_at(Point3::origin(), Point3::new(0.0, 0.0, 5.0), 24.0, 24, 24, 0.1, 100.0);
    let hard: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let pruned = commit_prune(&mut scene, &hard);
    assert_eq!(pruned, 4);
    let with_zeros = render(&scene, &camera, &RenderOptions::default());

    let mut state = AdaptationState::new(12);
    let mut compacted = scene.clone();
    let removed = compact(&mut compacted, &mut state);
    assert_eq!(removed, 4);
    assert_eq!(compacted.len(), 8);
    assert_eq!(state.len(), 8);
    let without = render(&compacted, &camera, &RenderOptions::default());
    for (a, b) in with_zeros.color.iter().zip(&without.color) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in with_zeros.semantic.iter().zip(&without.semantic) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn prune_gradients_match_finite_differences() {
    let net = PruneNet::new(4, 6, 11);
    let fused = random_fused(5, 4, 9);
    let phi0 = Tensor::matrix(5, 1, vec![0.1, -0.2, 0.3, 0.0, -0.1]);
    let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();

    let tape = Tape::new();
    let bound = net.params.bind(&tape);
    let fused_v = tape.constant(fused.clone());
    let phi_v = tape.param(phi0.clone());
    let out = prune_mask(&net, &bound, &fused_v, &phi_v, 0.01).unwrap();
    let grads = tape.backward(&out.l_mask).unwrap();
    let mut analytic: Vec<Tensor> = names.iter().map(|n| grads.wrt(bound.var(n))).collect();
    analytic.push(grads.wrt(&phi_v));

    let mut tensors: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
    tensors.push(phi0);
    let numeric = finite_diff_grad(&mut tensors, &mut |ts| {
        let mut params = ParamSet::new();
        for (n, t) in names.iter().zip(ts) {
            params.insert(n, t.clone());
        }
        let net = PruneNet { feature_dim: 4, hidden: 6, params };
        let tape = Tape::new();
        let bound = net.params.bind(&tape);
        let fused_v = tape.constant(fused.clone());
        let phi_v = tape.param(ts[ts.len() - 1].clone());
        prune_mask(&net, &bound, &fused_v, &phi_v, 0.01).unwrap().l_mask.value().as_scalar()
    });
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-4, "max rel error {}", err);
}

#[test]
fn ste_backward_is_bitwise_identity() {
    let net = PruneNet::new(3, 4, 21);
    let fused = random_fused(4, 3, 33);
    let phi0 = Tensor::matrix(4, 1, vec![0.2, -0.4, 0.1, 0.0]);

    let grads_for = |through_threshold: bool| -> Vec<Tensor> {
        let tape = Tape::new();
        let bound = net.params.bind(&tape);
        let fused_v = tape.constant(fused.clone());
        let phi_v = tape.param(phi0.clone());
        let out = prune_mask(&net, &bound, &fused_v, &phi_v, 0.3).unwrap();
        let loss = if through_threshold { out.hard.sum() } else { out.soft.sum() };
        let grads = tape.backward(&loss).unwrap();
        let mut all: Vec<Tensor> = net.params.iter().map(|(n, _)| grads.wrt(bound.var(n))).collect();
        all.push(grads.wrt(&phi_v));
        all
    };
    let hard = grads_for(true);
    let soft = grads_for(false);
    for (a, b) in hard.iter().zip(&soft) {
        assert_eq!(a.data, b.data, "STE gradients must be bitwise identical");
    }
}

#[test]
fn densify_trigger_and_arithmetic() {
    assert_eq!(candidate_count(100, 2.0, 50.0, 10), 10);
    assert_eq!(candidate_count(4, 2.0, 50.0, 10), 4);
    assert_eq!(candidate_count(100, 0.1, 1.0, 10), 0);

    let scene = random_scene(10, 2);
    let state = AdaptationState::new(10);
    let region = LocalRegion {
        center_index: 0,
        member_indices: (0..10).collect(),
        radius: 1.0,
    };
    let p = DensifyParams {
        grad_threshold: 0.5,
        alpha_d: 2.0,
        n_max: 20,
        radius: 0.5,
        d_min: 0.0,
        d_max: f64::INFINITY,
    };
    // all grad_accum are zero: below threshold, nothing happens
    assert!(densify_region(&scene, &region, &state, &p, 7).is_empty());
}

#[test]
fn densify_candidates_obey_contract() {
    let scene = random_scene(15, 8);
    let mut state = AdaptationState::new(15);
    state.grad_accum.iter_mut().for_each(|g| *g = 1.0);
    let region = LocalRegion {
        center_index: 3,
        member_indices: (0..15).collect(),
        radius: 1.0,
    };
    let p = DensifyParams {
        grad_threshold: 0.5,
        alpha_d: 400.0,
        n_max: 12,
        radius: 0.4,
        d_min: 0.01,
        d_max: 0.5,
    };
    let center = scene.gaussians[3].center;
    let new = densify_region(&scene, &region, &state, &p, 99);
    assert!(!new.is_empty());
    assert!(new.len() <= 12);
    for g in &new {
        assert!((g.center - center).norm() <= p.radius + 1e-12);
        // linear-scan nearest neighbor oracle
        let (nn, dist) = scene
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, o)| (i, (o.center - g.center).norm()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert!(dist >= p.d_min && dist <= p.d_max);
        let o = &scene.gaussians[nn];
        assert_eq!(g.opacity, o.opacity);
        assert_eq!(g.scale, o.scale);
        assert_eq!(g.sh_coeffs, o.sh_coeffs);
        assert_eq!(g.semantic_feature, o.semantic_feature);
        assert_ne!(g.center, o.center);
    }
    // deterministic under the seed
    let again = densify_region(&scene, &region, &state, &p, 99);
    assert_eq!(new.len(), again.len());
    for (a, b) in new.iter().zip(&again) {
        assert_eq!(a.center, b.center);
    }

    // committing grows scene and state together
    let mut scene2 = scene.clone();
    let mut state2 = state.clone();
    let added = commit_densify(&mut scene2, &mut state2, new);
    assert_eq!(scene2.len(), 15 + added);
    assert_eq!(state2.len(), 15 + added);
    // originals untouched
    for i in 0..15 {
        assert_eq!(scene2.gaussians[i].center, scene.gaussians[i].center);
    }
}

#[test]
fn soft_histogram_closed_form_and_limits() {
    // single sample on the center of the only bin, gamma*delta/2 = 2
    let h = soft_histogram(&[0.5], (0.0, 1.0), 1, 4.0).unwrap();
    let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((h.bins[0] - (2.0 * sig2 - 1.0)).abs() < 1e-12);
    assert!((h.bins[0] - 0.7616).abs() < 1e-4);

    // sharp gamma approaches the hard histogram
    let samples = [0.05, 0.15, 0.17, 0.55, 0.95];
    let h = soft_histogram(&samples, (0.0, 1.0), 10, 1e4).unwrap();
    let mut hard = vec![0.0; 10];
    for &x in &samples {
        hard[(x * 10.0) as usize] += 1.0;
    }
    for (s, e) in h.bins.iter().zip(&hard) {
        assert!((s - e).abs() < 1e-3, "{} vs {}", s, e);
    }

    let empty = soft_histogram(&[], (0.0, 1.0), 4, 10.0).unwrap();
    assert!(empty.bins.iter().all(|&b| b == 0.0));

    assert!(soft_histogram(&[0.1], (1.0, 0.0), 4, 10.0).is_err());
    assert!(soft_histogram(&[0.1], (0.0, 1.0), 0, 10.0).is_err());
}

#[test]
fn soft_histogram_telescopes_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    for _ in 0..20 {
        let x = rng.gen_range(-2.0..2.0);
        let (lo, hi) = (-1.5, 1.7);
        let gamma = rng.gen_range(1.0..30.0);
        let h = soft_histogram(&[x], (lo, hi), 16, gamma).unwrap();
        let total: f64 = h.bins.iter().sum();
        let expect = sig(gamma * (x - lo)) - sig(gamma * (x - hi));
        assert!((total - expect).abs() < 1e-12);
    }
}

fn run_sh(
    nets: &ShPruneNets,
    fused: &Tensor,
    psi: &Tensor,
    hists: &[Tensor; 4],
    tau: [f64; 4],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let tape = Tape::new();
    let bound = nets.params.bind(&tape);
    let fused_v = tape.constant(fused.clone());
    let psi_v = tape.param(psi.clone());
    let hist_v: [Var; 4] = std::array::from_fn(|l| tape.constant(hists[l].clone()));
    let out = sh_prune(nets, &bound, &fused_v, &psi_v, &hist_v, tau).unwrap();
    (
        out.soft.iter().map(|v| v.value().data).collect(),
        out.hard.iter().map(|v| v.value().data).collect(),
        out.l_sh.value().as_scalar(),
    )
}

fn sh_fixture(n: usize) -> (Tensor, Tensor, [Tensor; 4]) {
    let fused = random_fused(n, 3, 61);
    let psi = random_fused(n, 4, 62);
    let hists: [Tensor; 4] = std::array::from_fn(|l| random_fused(n, 5, 70 + l as u64));
    (fused, psi, hists)
}

#[test]
fn sh_saturation_hits_weight_sums() {
    let mut nets = ShPruneNets::new(3, 5, 4, 77);
    let (fused, psi, hists) = sh_fixture(4);
    for l in 0..4 {
        nets.params.get_mut(&format!("sh{}.out_b", l)).unwrap().data[0] = 800.0;
    }
    let (_, hard, l_sh) = run_sh(&nets, &fused, &psi, &hists, [0.01; 4]);
    assert!((l_sh - 16.0).abs() < 1e-9, "1+3+5+7 = 16, got {}", l_sh);
    assert!(hard.iter().all(|h| h.iter().all(|&m| m == 1.0)));

    for l in 0..4 {
        nets.params.get_mut(&format!("sh{}.out_b", l)).unwrap().data[0] = -800.0;
    }
    let (_, hard, l_sh) = run_sh(&nets, &fused, &psi, &hists, [0.01; 4]);
    assert!(l_sh < 1e-9);
    assert!(hard.iter().all(|h| h.iter().all(|&m| m == 0.0)));

    // committing all-zero masks zeroes every block
    let mut scene = random_scene(4, 30);
    let zeroed = commit_sh_masks(&mut scene, &vec![[0.0; 4]; 4]);
    assert_eq!(zeroed, [4, 4, 4, 4]);
    for g in &scene.gaussians {
        for l in 0..4 {
            assert!(g.sh_coeffs[l].iter().all(|&c| c == 0.0));
        }
    }
}

#[test]
fn degree0_masks_match_renderer_truncation() {
    let scene = random_scene(10, 44);
    let camera = Camera::look_at(Point3::origin(), Point3::new(0.0, 0.0, 5.0), 24.0, 20, 20, 0.1, 100.0);
    let masks = vec![[1.0, 0.0, 0.0, 0.0]; 10];
    let masked = render(&scene, &camera, &RenderOptions { sh_masks: Some(&masks), ..Default::default() });
    let truncated = render(&scene, &camera, &RenderOptions { max_degree: Some(0), ..Default::default() });
    assert_eq!(masked.color, truncated.color);
}

#[test]
fn sh_gradients_match_finite_differences() {
    let nets = ShPruneNets::new(3, 5, 4, 13);
    let (fused, psi0, hists) = sh_fixture(4);
    let names: Vec<String> = nets.params.iter().map(|(n, _)| n.to_string()).collect();

    let tape = Tape::new();
    let bound = nets.params.bind(&tape);
    let fused_v = tape.constant(fused.clone());
    let psi_v = tape.param(psi0.clone());
    let hist_v: [Var; 4] = std::array::from_fn(|l| tape.constant(hists[l].clone()));
    let out = sh_prune(&nets, &bound, &fused_v, &psi_v, &hist_v, [0.01; 4]).unwrap();
    let grads = tape.backward(&out.l_sh).unwrap();
    let mut analytic: Vec<Tensor> = names.iter().map(|n| grads.wrt(bound.var(n))).collect();
    analytic.push(grads.wrt(&psi_v));

    let mut tensors: Vec<Tensor> = nets.params.iter().map(|(_, t)| t.clone()).collect();
    tensors.push(psi0);
    let numeric = finite_diff_grad(&mut tensors, &mut |ts| {
        let mut params = ParamSet::new();
        for (n, t) in names.iter().zip(ts) {
            params.insert(n, t.clone());
        }
        let nets = ShPruneNets { feature_dim: 3, hist_bins: 5, hist_dim: 4, params };
        let tape = Tape::new();
        let bound = nets.params.bind(&tape);
        let fused_v = tape.constant(fused.clone());
        let psi_v = tape.param(ts[ts.len() - 1].clone());
        let hist_v: [Var; 4] = std::array::from_fn(|l| tape.constant(hists[l].clone()));
        sh_prune(&nets, &bound, &fused_v, &psi_v, &hist_v, [0.01; 4])
            .unwrap()
            .l_sh
            .value()
            .as_scalar()
    });
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-4, "max rel error {}", err);
}

#[test]
fn assembled_histograms_cover_every_gaussian() {
    let scene = random_scene(8, 55);
    let regions = vec![
        LocalRegion { center_index: 0, member_indices: vec![0, 1, 2], radius: 1.0 },
        LocalRegion { center_index: 4, member_indices: vec![2, 4, 5], radius: 1.0 },
    ];
    let hists = assemble_degree_histograms(&scene, &regions, 6).unwrap();
    for h in &hists {
        assert_eq!(h.shape, vec![8, 6]);
        assert!(h.data.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    // member 2 belongs to both regions: takes the first region's row
    let row = |h: &Tensor, i: usize| h.data[i * 6..(i + 1) * 6].to_vec();
    let direct = {
        let samples = degree_samples(&scene, &[0, 1, 2], 1);
        let range = padded_range(&samples);
        soft_histogram(&samples, range, 6, default_gamma(range, 6)).unwrap().bins
    };
    assert_eq!(row(&hists[1], 2), direct);
    // uncovered member 7 gets the whole-scene histogram
    let global = {
        let samples = degree_samples(&scene, &(0..8).collect::<Vec<_>>(), 1);
        let range = padded_range(&samples);
        soft_histogram(&samples, range, 6, default_gamma(range, 6)).unwrap().bins
    };
    assert_eq!(row(&hists[1], 7), global);
}

#[test]
fn loss_combination_is_linear() {
    let tape = Tape::new();
    let mk = |v: f64| tape.scalar(v);
    let (lr, ls, lm, lsh, lreg) = (mk(2.0), mk(0.5), mk(0.25), mk(8.0), mk(0.1));

    let only_render = LossWeights { render: 1.0, semantic: 0.0, mask: 0.0, sh: 0.0, reg: 0.0 };
    let t = adaptation_losses(&lr, &ls, &lm, &lsh, &lreg, &only_render).unwrap();
    assert_eq!(t.value().as_scalar(), 2.0);

    let zeros = (mk(0.0), mk(0.0), mk(0.0), mk(0.0), mk(0.0));
    let t = adaptation_losses(&zeros.0, &zeros.1, &zeros.2, &zeros.3, &zeros.4, &LossWeights::default()).unwrap();
    assert_eq!(t.value().as_scalar(), 0.0);

    let w = LossWeights { render: 0.3, semantic: 0.7, mask: 0.2, sh: 0.1, reg: 0.5 };
    let w2 = LossWeights { render: 0.6, semantic: 1.4, mask: 0.4, sh: 0.2, reg: 1.0 };
    let t1 = adaptation_losses(&lr, &ls, &lm, &lsh, &lreg, &w).unwrap().value().as_scalar();
    let t2 = adaptation_losses(&lr, &ls, &lm, &lsh, &lreg, &w2).unwrap().value().as_scalar();
    assert!((t2 - 2.0 * t1).abs() < 1e-12);

    let bad = mk(f64::NAN);
    assert!(matches!(
        adaptation_losses(&bad, &ls, &lm, &lsh, &lreg, &w),
        Err(AdaptError::NonFinite)
    ));
}

#[test]
fn mask_losses_are_monotone() {
    // raising any single soft mask raises the mean-based losses
    let tape = Tape::new();
    let base = tape.param(Tensor::matrix(3, 1, vec![0.2, 0.5, 0.7]));
    let l0 = base.mean().value().as_scalar();
    let bumped = tape.param(Tensor::matrix(3, 1, vec![0.2, 0.6, 0.7]));
    let l1 = bumped.mean().value().as_scalar();
    assert!(l1 > l0);
}

#[test]
fn state_tracks_gradient_running_mean() {
    let mut state = AdaptationState::new(2);
    state.record_render_gradients(&[Vector2::new(3.0, 4.0), Vector2::new(0.0, 0.0)]);
    assert_eq!(state.grad_accum, vec![5.0, 0.0]);
    state.record_render_gradients(&[Vector2::new(0.0, 1.0), Vector2::new(2.0, 0.0)]);
    assert_eq!(state.grad_accum, vec![3.0, 1.0]);
    assert_eq!(state.grad_count, 2);
    state.reset_gradients();
    assert_eq!(state.grad_accum, vec![0.0, 0.0]);
    assert_eq!(state.grad_count, 0);
}

#[test]
fn adaptation_log_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapt.jsonl");
    let e1 = AdaptationEvent {
        iteration: 100,
        pruned: 3,
        added: 5,
        sh_zeroed_per_degree: [0, 1, 2, 4],
        l_mask: 0.42,
        l_sh: 7.5,
    };
    let e2 = AdaptationEvent { iteration: 200, pruned: 0, added: 0, sh_zeroed_per_degree: [0; 4], l_mask: 0.1, l_sh: 2.0 };
    append_adaptation_log(&path, &e1).unwrap();
    append_adaptation_log(&path, &e2).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<AdaptationEvent> =
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].iteration, 100);
    assert_eq!(lines[0].sh_zeroed_per_degree, [0, 1, 2, 4]);
    assert_eq!(lines[1].l_mask, 0.1);
}
