use super::*;
use crate::numerics::autodiff::{finite_diff_grad, max_rel_error, Tape, Tensor};
use crate::numerics::linalg::DenseMatrix;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;

fn small_cfg() -> EncoderConfig {
    EncoderConfig { input_dim: 5, model_dim: 8, heads: 2, layers: 2, mlp_hidden: 10, pe_bands: 1 }
}

fn sample_inputs(n: usize, q: usize, seed: u64) -> (Tensor, Vec<Vector3<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let desc = Tensor::matrix(n, q, (0..n * q).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let centers = (0..n)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    (desc, centers)
}

fn dm(t: &Tensor) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(t.shape[0], t.shape[1]);
    m.data.copy_from_slice(&t.data);
    m
}

fn softmax_rows_plain(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let mx = (0..m.cols).map(|j| m[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..m.cols {
            let e = (m[(i, j)] - mx).exp();
            out[(i, j)] = e;
            total += e;
        }
        for j in 0..m.cols {
            out[(i, j)] /= total;
        }
    }
    out
}

fn tanh_plain(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for v in out.data.iter_mut() {
        *v = v.tanh();
    }
    out
}

fn add_bias_plain(m: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        for j in 0..m.cols {
            out[(i, j)] += b[(0, j)];
        }
    }
    out
}

fn add_plain(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    for (x, y) in out.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    out
}

/// Straight-line reimplementation of the encoder forward with plain
/// matrix arithmetic, no tape.
fn oracle_forward(enc: &Encoder, desc: &Tensor, centers: &[Vector3<f64>]) -> Vec<f64> {
    let cfg = &enc.cfg;
    let p = |name: &str| dm(enc.params.get(name).unwrap());
    let n = centers.len();
    let pe_raw = dm(&positional_features(centers, cfg.pe_bands));
    let pe = add_bias_plain(&pe_raw.matmul(&p("pe_proj")), &p("pe_bias"));
    let mut z = DenseMatrix::zeros(n + 1, cfg.input_dim);
    let token = p("token");
    for j in 0..cfg.input_dim {
        z[(0, j)] = token[(0, j)];
    }
    let d0 = dm(desc);
    for i in 0..n {
        for j in 0..cfg.input_dim {
            z[(i + 1, j)] = d0[(i, j)] + pe[(i, j)];
        }
    }
    let mut x = add_bias_plain(&z.matmul(&p("embed_w")), &p("embed_b"));
    let dh = cfg.model_dim / cfg.heads;
    let scale = 1.0 / (cfg.model_dim as f64).sqrt();
    for l in 0..cfg.layers {
        let q = x.matmul(&p(&format!("layer{}.wq", l)));
        let k = x.matmul(&p(&format!("layer{}.wk", l)));
        let v = x.matmul(&p(&format!("layer{}.wv", l)));
        let mut y = DenseMatrix::zeros(n + 1, cfg.model_dim);
        for h in 0..cfg.heads {
            let slice = |m: &DenseMatrix| {
                let mut s = DenseMatrix::zeros(n + 1, dh);
                for i in 0..n + 1 {
                    for j in 0..dh {
                        s[(i, j)] = m[(i, h * dh + j)];
                    }
                }
                s
            };
            let (qh, kh, vh) = (slice(&q), slice(&k), slice(&v));
            let mut logits = qh.matmul(&kh.transpose());
            for e in logits.data.iter_mut() {
                *e *= scale;
            }
            let oh = softmax_rows_plain(&logits).matmul(&vh);
            for i in 0..n + 1 {
                for j in 0..dh {
                    y[(i, h * dh + j)] = oh[(i, j)];
                }
            }
        }
        let a = add_plain(&x, &y);
        let ff = add_bias_plain(
            &tanh_plain(&add_bias_plain(
                &a.matmul(&p(&format!("layer{}.ff1", l))),
                &p(&format!("layer{}.fb1", l)),
            ))
            .matmul(&p(&format!("layer{}.ff2", l))),
            &p(&format!("layer{}.fb2", l)),
        );
        x = add_plain(&a, &ff);
    }
    let mut y0 = DenseMatrix::zeros(1, cfg.model_dim);
    for j in 0..cfg.model_dim {
        y0[(0, j)] = x[(0, j)];
    }
    let out = add_bias_plain(
        &tanh_plain(&add_bias_plain(&y0.matmul(&p("head_w1")), &p("head_b1")))
            .matmul(&p("head_w2")),
        &p("head_b2"),
    );
    out.data
}

fn forward(enc: &Encoder, desc: &Tensor, centers: &[Vector3<f64>]) -> Vec<f64> {
    let tape = Tape::new();
    let bound = enc.params.bind(&tape);
    enc.encode_region(&bound, desc, centers).unwrap().value().data
}

#[test]
fn forward_matches_plain_oracle() {
    let enc = Encoder::new(small_cfg(), 31).unwrap();
    let (desc, centers) = sample_inputs(5, 5, 7);
    let got = forward(&enc, &desc, &centers);
    let want = oracle_forward(&enc, &desc, &centers);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }
}

#[test]
fn zero_queries_attend_uniformly() {
    // zero W_q makes every attention row the column mean of the value
    // projection; derive the expected output through that shortcut
    let mut enc = Encoder::new(small_cfg(), 11).unwrap();
    for l in 0..enc.cfg.layers {
        let wq = enc.params.get_mut(&format!("layer{}.wq", l)).unwrap();
        wq.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let (desc, centers) = sample_inputs(1, 5, 3);
    let got = forward(&enc, &desc, &centers);

    let cfg = &enc.cfg;
    let p = |name: &str| dm(enc.params.get(name).unwrap());
    let pe = add_bias_plain(
        &dm(&positional_features(&centers, cfg.pe_bands)).matmul(&p("pe_proj")),
        &p("pe_bias"),
    );
    let mut z = DenseMatrix::zeros(2, cfg.input_dim);
    let token = p("token");
    let d0 = dm(&desc);
    for j in 0..cfg.input_dim {
        z[(0, j)] = token[(0, j)];
        z[(1, j)] = d0[(0, j)] + pe[(0, j)];
    }
    let mut x = add_bias_plain(&z.matmul(&p("embed_w")), &p("embed_b"));
    for l in 0..cfg.layers {
        let v = x.matmul(&p(&format!("layer{}.wv", l)));
        // uniform attention: every output row is the mean of v's rows
        let mut y = DenseMatrix::zeros(2, cfg.model_dim);
        for j in 0..cfg.model_dim {
            let mean = (v[(0, j)] + v[(1, j)]) / 2.0;
            y[(0, j)] = mean;
            y[(1, j)] = mean;
        }
        let a = add_plain(&x, &y);
        let ff = add_bias_plain(
            &tanh_plain(&add_bias_plain(
                &a.matmul(&p(&format!("layer{}.ff1", l))),
                &p(&format!("layer{}.fb1", l)),
            ))
            .matmul(&p(&format!("layer{}.ff2", l))),
            &p(&format!("layer{}.fb2", l)),
        );
        x = add_plain(&a, &ff);
    }
    let mut y0 = DenseMatrix::zeros(1, cfg.model_dim);
    for j in 0..cfg.model_dim {
        y0[(0, j)] = x[(0, j)];
    }
    let want = add_bias_plain(
        &tanh_plain(&add_bias_plain(&y0.matmul(&p("head_w1")), &p("head_b1")))
            .matmul(&p("head_w2")),
        &p("head_b2"),
    );
    for (a, b) in got.iter().zip(&want.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permutation_invariant_encoding() {
    let enc = Encoder::new(small_cfg(), 5).unwrap();
    let (desc, centers) = sample_inputs(6, 5, 21);
    let base = forward(&enc, &desc, &centers);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut pdesc = Tensor::zeros(&[6, 5]);
    let mut pcenters = vec![Vector3::zeros(); 6];
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..5 {
            pdesc.data[dst * 5 + j] = desc.data[src * 5 + j];
        }
        pcenters[dst] = centers[src];
    }
    let permuted = forward(&enc, &pdesc, &pcenters);
    for (a, b) in base.iter().zip(&permuted) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let enc = Encoder::new(small_cfg(), 97).unwrap();
    let (desc, centers) = sample_inputs(4, 5, 13);
    let names: Vec<String> = enc.params.iter().map(|(n, _)| n.to_string()).collect();
    let cfg = enc.cfg.clone();

    let tape = Tape::new();
    let bound = enc.params.bind(&tape);
    let p = enc.encode_region(&bound, &desc, &centers).unwrap();
    let loss = p.sum();
    let grads = tape.backward(&loss).unwrap();
    let analytic: Vec<Tensor> = names.iter().map(|n| grads.wrt(bound.var(n))).collect();

    let mut tensors: Vec<Tensor> = enc.params.iter().map(|(_, t)| t.clone()).collect();
    let numeric = finite_diff_grad(&mut tensors, &mut |ts| {
        let mut params = ParamSet::new();
        for (n, t) in names.iter().zip(ts) {
            params.insert(n, t.clone());
        }
        let enc = Encoder { cfg: cfg.clone(), params };
        let tape = Tape::new();
        let bound = enc.params.bind(&tape);
        enc.encode_region(&bound, &desc, &centers).unwrap().sum().value().as_scalar()
    });
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-4, "max rel error {}", err);
}

#[test]
fn propagate_closed_forms() {
    let c = Vector3::new(0.2, -0.1, 0.4);
    // q at the center of a single region: weight exactly one
    let w = propagate_weights(&c, &[(c, Matrix3::identity())], 1.0).unwrap();
    assert_eq!(w, vec![1.0]);

    // two symmetric regions: equal weights, mean encoding
    let q = Vector3::zeros();
    let regions = [
        (Vector3::new(1.0, 0.0, 0.0), Matrix3::identity()),
        (Vector3::new(-1.0, 0.0, 0.0), Matrix3::identity()),
    ];
    let w = propagate_weights(&q, &regions, 1.0).unwrap();
    assert!((w[0] - 0.5).abs() < 1e-15);
    let tape = Tape::new();
    let e0 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]));
    let e1 = tape.constant(Tensor::matrix(1, 2, vec![5.0, 7.0]));
    let f = propagate(&[e0, e1], &w);
    assert_eq!(f.value().data, vec![3.0, 5.0]);

    // unit covariance, tau 1, unit distance: raw weight e^{-1}
    let one = Vector3::new(1.0, 0.0, 0.0);
    let raw: f64 =
        (-(one.transpose() * Matrix3::<f64>::identity().try_inverse().unwrap() * one)[(0, 0)]).exp();
    assert!((raw - (-1.0f64).exp()).abs() < 1e-15);

    assert!(matches!(propagate_weights(&q, &[], 1.0), Err(EncodeError::NoRegion)));
}

#[test]
fn propagate_weights_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..50 {
        let q = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let regions: Vec<(Vector3<f64>, Matrix3<f64>)> = (0..rng.gen_range(1..6))
            .map(|_| {
                let c = Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                let s = rng.gen_range(0.3..1.5);
                (c, Matrix3::identity() * s)
            })
            .collect();
        let w = propagate_weights(&q, &regions, 0.7).unwrap();
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

fn fused_setup(bias: Option<f64>, zero_gate: bool) -> FusedFeature {
    let mut fusion = Fusion::new(4, 3, 8);
    if let Some(b) = bias {
        for v in fusion.params.get_mut("fuse.gate_b").unwrap().data.iter_mut() {
            *v = b;
        }
    }
    if zero_gate {
        for v in fusion.params.get_mut("fuse.gate_w").unwrap().data.iter_mut() {
            *v = 0.0;
        }
    }
    let tape = Tape::new();
    let bound = fusion.params.bind(&tape);
    let shape_enc = tape.constant(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.8, 0.1]));
    let semantic = tape.constant(Tensor::matrix(1, 3, vec![0.9, 0.1, 0.5]));
    gated_fuse(&fusion, &bound, &shape_enc, &semantic).unwrap().values()
}

#[test]
fn gate_saturation_selects_branch() {
    let sat_sem = fused_setup(Some(800.0), true);
    assert_eq!(sat_sem.final_, sat_sem.semantic);
    assert!(sat_sem.gate.iter().all(|&g| g == 1.0));

    let sat_shape = fused_setup(Some(-800.0), true);
    assert_eq!(sat_shape.final_, sat_shape.shape);

    let mid = fused_setup(None, true);
    assert!(mid.gate.iter().all(|&g| g == 0.5));
    for k in 0..3 {
        assert!((mid.final_[k] - 0.5 * (mid.semantic[k] + mid.shape[k])).abs() < 1e-15);
    }
}

#[test]
fn fused_identity_holds() {
    let f = fused_setup(None, false);
    for k in 0..3 {
        let lhs = f.final_[k];
        let rhs = f.gate[k] * f.semantic[k] + (1.0 - f.gate[k]) * f.shape[k];
        assert_eq!(lhs, rhs, "construction identity must be exact");
        let alt = f.shape[k] + f.gate[k] * (f.semantic[k] - f.shape[k]);
        assert!((lhs - alt).abs() < 1e-15);
    }
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let fusion = Fusion::new(4, 3, 64);
    let names: Vec<String> = fusion.params.iter().map(|(n, _)| n.to_string()).collect();
    let shape_t = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.8, 0.1]);
    let sem_t = Tensor::matrix(1, 3, vec![0.9, 0.1, 0.5]);

    let tape = Tape::new();
    let bound = fusion.params.bind(&tape);
    let shape_enc = tape.constant(shape_t.clone());
    let semantic = tape.constant(sem_t.clone());
    let fused = gated_fuse(&fusion, &bound, &shape_enc, &semantic).unwrap();
    let loss = fused.final_.sum();
    let grads = tape.backward(&loss).unwrap();
    let analytic: Vec<Tensor> = names.iter().map(|n| grads.wrt(bound.var(n))).collect();

    let mut tensors: Vec<Tensor> = fusion.params.iter().map(|(_, t)| t.clone()).collect();
    let numeric = finite_diff_grad(&mut tensors, &mut |ts| {
        let mut params = ParamSet::new();
        for (n, t) in names.iter().zip(ts) {
            params.insert(n, t.clone());
        }
        let f = Fusion { model_dim: 4, feature_dim: 3, params };
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let shape_enc = tape.constant(shape_t.clone());
        let semantic = tape.constant(sem_t.clone());
        gated_fuse(&f, &bound, &shape_enc, &semantic).unwrap().final_.sum().value().as_scalar()
    });
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-4, "max rel error {}", err);
}

#[test]
fn no_region_fallback_passes_semantic_through() {
    let f = FusedFeature::fallback(&[0.4, 0.6]);
    assert_eq!(f.final_, vec![0.4, 0.6]);
    assert_eq!(f.gate, vec![1.0, 1.0]);
    assert_eq!(f.shape, vec![0.0, 0.0]);
}

#[test]
fn checkpoint_roundtrips_bit_exact() {
    let enc = Encoder::new(small_cfg(), 123).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    save_params(&enc.params, &path).unwrap();
    let loaded = load_params(&path).unwrap();
    assert_eq!(loaded.len(), enc.params.len());
    for (n, t) in enc.params.iter() {
        let lt = loaded.get(n).unwrap();
        assert_eq!(lt.shape, t.shape);
        assert_eq!(lt.data, t.data, "tensor {} not bit-identical", n);
    }
}

#[test]
fn checkpoint_detects_corruption_and_version() {
    let enc = Encoder::new(small_cfg(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    save_params(&enc.params, &path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let corrupt = dir.path().join("corrupt.bin");
    std::fs::write(&corrupt, &bytes).unwrap();
    assert!(matches!(load_params(&corrupt), Err(EncodeError::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 9; // version field
    let tail = bytes.len() - 32;
    let digest = sha2::Sha256::digest(&bytes[..tail]);
    bytes[tail..].copy_from_slice(&digest);
    let versioned = dir.path().join("versioned.bin");
    std::fs::write(&versioned, &bytes).unwrap();
    assert!(matches!(load_params(&versioned), Err(EncodeError::Checkpoint(_))));
}

#[test]
fn initialization_is_seed_deterministic() {
    let a = Encoder::new(small_cfg(), 9).unwrap();
    let b = Encoder::new(small_cfg(), 9).unwrap();
    for ((_, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(ta.data, tb.data);
    }
    let c = Encoder::new(small_cfg(), 10).unwrap();
    assert_ne!(a.params.get("embed_w").unwrap().data, c.params.get("embed_w").unwrap().data);
}

#[test]
fn config_validation_rejects_bad_dims() {
    let mut cfg = small_cfg();
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
    assert!(Encoder::new(cfg, 0).is_err());
    let cfg = EncoderConfig::default_for(48);
    cfg.validate().unwrap();
    assert_eq!(cfg.model_dim, 64);
    assert_eq!(cfg.pe_dim(), 36);
}
