use super::*;
use crate::scene::{Camera, Scene, SemanticGaussian};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cam(w: usize, h: usize, fx: f64) -> Camera {
    Camera::look_at(Point3::origin(), Point3::new(0.0, 0.0, 5.0), fx, w, h, 0.1, 100.0)
}

fn dc_gaussian(center: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> SemanticGaussian {
    let mut g = SemanticGaussian::isotropic(center, scale, opacity);
    // dc coefficient reproducing `rgb` after the 0.5 offset
    for ch in 0..3 {
        g.sh_coeffs[0][ch] = (rgb[ch] - 0.5) / sh::SH_C0;
    }
    g
}

fn random_scene(n: usize, df: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = Vec::new();
    for _ in 0..n {
        let center = Vector3::new(
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(4.0..6.0),
        );
        let mut g = dc_gaussian(
            center,
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.3..0.9),
            [
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
            ],
        );
        for l in 1..4 {
            for v in g.sh_coeffs[l].iter_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        g.semantic_feature = (0..df).map(|_| rng.gen_range(0.0..1.0)).collect();
        gs.push(g);
    }
    Scene::new(gs, df)
}

#[test]
fn single_splat_closed_form() {
    let camera = cam(16, 16, 40.0);
    let g = dc_gaussian(Vector3::new(0.0, 0.0, 5.0), 0.2, 0.6, [0.8, 0.3, 0.5]);
    let scene = Scene::new(vec![g], 0);
    let t = render(&scene, &camera, &RenderOptions::default());
    // the center projects exactly onto pixel (8, 8)
    let pix = 8 * 16 + 8;
    assert!((t.color[pix * 3] - 0.8 * 0.6).abs() < 1e-12);
    assert!((t.color[pix * 3 + 1] - 0.3 * 0.6).abs() < 1e-12);
    assert!((t.color[pix * 3 + 2] - 0.5 * 0.6).abs() < 1e-12);
    assert!((t.transmittance[pix] - 0.4).abs() < 1e-12);
    assert_eq!(t.contributors[pix], 1);
}

#[test]
fn two_splat_blend_closed_form() {
    let camera = cam(16, 16, 40.0);
    let front = dc_gaussian(Vector3::new(0.0, 0.0, 5.0), 0.2, 0.6, [1.0, 0.2, 0.2]);
    let back = dc_gaussian(Vector3::new(0.0, 0.0, 6.0), 0.24, 0.5, [0.2, 1.0, 0.2]);
    let scene = Scene::new(vec![back, front], 0);
    let t = render(&scene, &camera, &RenderOptions::default());
    let pix = 8 * 16 + 8;
    // front-to-back: c1 a1 + c2 a2 (1 - a1)
    let expect_r = 1.0 * 0.6 + 0.2 * 0.5 * 0.4;
    let expect_g = 0.2 * 0.6 + 1.0 * 0.5 * 0.4;
    assert!((t.color[pix * 3] - expect_r).abs() < 1e-12);
    assert!((t.color[pix * 3 + 1] - expect_g).abs() < 1e-12);
    assert!((t.transmittance[pix] - 0.4 * 0.5).abs() < 1e-12);
}

/// Untiled oracle: reprojects every Gaussian from scratch and blends
/// over the full image without bounding boxes or row buckets.
fn oracle_render(scene: &Scene, camera: &Camera, max_degree: usize) -> (Vec<f64>, Vec<f64>) {
    struct OSplat {
        mean: Vector2<f64>,
        conic: nalgebra::Matrix2<f64>,
        depth: f64,
        color: [f64; 3],
        feature: Vec<f64>,
        alpha: f64,
    }
    let rot = camera.pose.rotation.to_rotation_matrix();
    let cam_pos = camera.pose.inverse() * Point3::origin();
    let mut splats = Vec::new();
    for g in &scene.gaussians {
        let pc = camera.pose * Point3::from(g.center);
        if pc.z <= camera.near || pc.z >= camera.far || g.opacity < ALPHA_MIN {
            continue;
        }
        let j = nalgebra::Matrix2x3::new(
            camera.fx / pc.z,
            0.0,
            -camera.fx * pc.x / (pc.z * pc.z),
            0.0,
            camera.fy / pc.z,
            -camera.fy * pc.y / (pc.z * pc.z),
        ) * rot.matrix();
        let mut c2 = j * g.covariance() * j.transpose();
        c2[(0, 0)] += COV2D_REG;
        c2[(1, 1)] += COV2D_REG;
        let det = c2[(0, 0)] * c2[(1, 1)] - c2[(0, 1)] * c2[(1, 0)];
        let conic =
            nalgebra::Matrix2::new(c2[(1, 1)], -c2[(0, 1)], -c2[(1, 0)], c2[(0, 0)]) / det;
        let dir = (g.center - cam_pos.coords).normalize();
        let basis = sh::eval_basis(&dir);
        let mut color = [0.5; 3];
        for l in 0..=max_degree {
            for (m, bi) in sh::degree_range(l).enumerate() {
                for ch in 0..3 {
                    color[ch] += g.sh_coeffs[l][m * 3 + ch] * basis[bi];
                }
            }
        }
        for c in color.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        splats.push(OSplat {
            mean: Vector2::new(
                camera.fx * pc.x / pc.z + camera.cx,
                camera.fy * pc.y / pc.z + camera.cy,
            ),
            conic,
            depth: pc.z,
            color,
            feature: g.semantic_feature.clone(),
            alpha: g.opacity,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
    let (w, h, df) = (camera.width, camera.height, scene.semantic_dim);
    let mut color = vec![0.0; w * h * 3];
    let mut semantic = vec![0.0; w * h * df];
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            for s in &splats {
                let d = Vector2::new(x as f64 - s.mean.x, y as f64 - s.mean.y);
                let q = (d.transpose() * s.conic * d)[(0, 0)];
                let a = (s.alpha * (-0.5 * q).exp()).min(ALPHA_MAX);
                if a < ALPHA_MIN {
                    continue;
                }
                let pix = y * w + x;
                for ch in 0..3 {
                    color[pix * 3 + ch] += s.color[ch] * a * t;
                }
                for (k, f) in s.feature.iter().enumerate() {
                    semantic[pix * df + k] += f * a * t;
                }
                t *= 1.0 - a;
            }
        }
    }
    (color, semantic)
}

#[test]
fn matches_untiled_oracle() {
    let scene = random_scene(50, 3, 17);
    let camera = cam(32, 32, 24.0);
    let t = render(&scene, &camera, &RenderOptions::default());
    let (oc, os) = oracle_render(&scene, &camera, 3);
    let max_c = t
        .color
        .iter()
        .zip(&oc)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let max_s = t
        .semantic
        .iter()
        .zip(&os)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_c < 1e-10, "color deviates by {}", max_c);
    assert!(max_s < 1e-10, "semantic deviates by {}", max_s);
}

#[test]
fn blending_conserves_unit_features() {
    let mut scene = random_scene(40, 1, 3);
    for g in scene.gaussians.iter_mut() {
        g.semantic_feature = vec![1.0];
    }
    let camera = cam(24, 24, 20.0);
    let t = render(&scene, &camera, &RenderOptions::default());
    for pix in 0..24 * 24 {
        let total = t.semantic[pix] + t.transmittance[pix];
        assert!((total - 1.0).abs() < 1e-12, "pixel {} sums to {}", pix, total);
    }
}

#[test]
fn degree_mask_equals_truncation() {
    let scene = random_scene(20, 2, 9);
    let camera = cam(24, 24, 20.0);
    let masks = vec![[1.0, 1.0, 0.0, 0.0]; scene.len()];
    let masked = render(
        &scene,
        &camera,
        &RenderOptions { sh_masks: Some(&masks), ..Default::default() },
    );
    let truncated = render(
        &scene,
        &camera,
        &RenderOptions { max_degree: Some(1), ..Default::default() },
    );
    assert_eq!(masked.color, truncated.color);
    assert_eq!(masked.semantic, truncated.semantic);
}

#[test]
fn zero_opacity_is_invisible() {
    let scene = random_scene(10, 2, 5);
    let camera = cam(16, 16, 20.0);
    let zeros = vec![0.0; scene.len()];
    let t = render(
        &scene,
        &camera,
        &RenderOptions { opacity_override: Some(&zeros), ..Default::default() },
    );
    assert!(t.color.iter().all(|&v| v == 0.0));
    assert!(t.transmittance.iter().all(|&v| v == 1.0));
    assert!(t.contributors.iter().all(|&c| c == 0));
}

#[test]
fn psnr_closed_forms() {
    let a = vec![0.5; 64];
    let b = vec![0.0; 64];
    let p = psnr(&a, &b).unwrap();
    assert!((p - 10.0 * (1.0 / 0.25f64).log10()).abs() < 1e-12);
    assert!(psnr(&a, &a).unwrap().is_infinite());
    assert!(psnr(&a, &b[..32].to_vec()).is_err());
}

/// Scene whose forward map is smooth everywhere on the image: broad
/// splats cover every pixel well above the alpha cutoff, colors stay
/// inside (0, 1), alphas below the clamp.
fn smooth_scene(df: usize) -> (Scene, Camera) {
    let camera = cam(12, 12, 30.0);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut gs = Vec::new();
    for i in 0..3 {
        let mut g = dc_gaussian(
            Vector3::new(0.02 * i as f64 - 0.02, 0.03 * i as f64 - 0.03, 5.0 + 0.4 * i as f64),
            1.2,
            0.4 + 0.1 * i as f64,
            [0.6, 0.45, 0.55],
        );
        for l in 1..4 {
            for v in g.sh_coeffs[l].iter_mut() {
                *v = rng.gen_range(-0.02..0.02);
            }
        }
        g.semantic_feature = (0..df).map(|_| rng.gen_range(0.2..0.8)).collect();
        gs.push(g);
    }
    (Scene::new(gs, df), camera)
}

fn total_loss(scene: &Scene, camera: &Camera, ref_c: &[f64], ref_s: &[f64]) -> f64 {
    let t = render(scene, camera, &RenderOptions::default());
    let (lc, _) = l2_loss(&t.color, ref_c);
    let (ls, _) = l2_loss(&t.semantic, ref_s);
    lc + ls
}

/// Blends the projected splats untiled with one splat's screen-space
/// mean displaced, isolating the d_mean2d sensitivity from the other
/// projection terms.
fn blend_loss_with_mean_shift(
    scene: &Scene,
    camera: &Camera,
    ref_c: &[f64],
    ref_s: &[f64],
    shifted: usize,
    shift: [f64; 2],
) -> f64 {
    let opts = RenderOptions::default();
    let (splats, _) = project_scene(scene, camera, &opts);
    let (w, h, df) = (camera.width, camera.height, scene.semantic_dim);
    let mut color = vec![0.0; w * h * 3];
    let mut semantic = vec![0.0; w * h * df];
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            for s in &splats {
                let mut mean = s.mean2d;
                if s.index == shifted {
                    mean.x += shift[0];
                    mean.y += shift[1];
                }
                let d = Vector2::new(x as f64 - mean.x, y as f64 - mean.y);
                let q = (d.transpose() * s.conic * d)[(0, 0)];
                let a = (s.alpha_base * (-0.5 * q).exp()).min(ALPHA_MAX);
                if a < ALPHA_MIN {
                    continue;
                }
                let pix = y * w + x;
                for ch in 0..3 {
                    color[pix * 3 + ch] += s.color[ch] * a * t;
                }
                for (k, f) in scene.gaussians[s.index].semantic_feature.iter().enumerate() {
                    semantic[pix * df + k] += f * a * t;
                }
                t *= 1.0 - a;
            }
        }
    }
    let (lc, _) = l2_loss(&color, ref_c);
    let (ls, _) = l2_loss(&semantic, ref_s);
    lc + ls
}

#[test]
fn backward_matches_finite_differences() {
    let (scene, camera) = smooth_scene(2);
    // reference from a jittered copy so gradients are nonzero
    let mut ref_scene = scene.clone();
    for g in ref_scene.gaussians.iter_mut() {
        g.center.x += 0.05;
        g.opacity = (g.opacity - 0.07).max(0.05);
    }
    let rt = render(&ref_scene, &camera, &RenderOptions::default());
    let (ref_c, ref_s) = (rt.color, rt.semantic);

    let t = render(&scene, &camera, &RenderOptions::default());
    let (_, d_color) = l2_loss(&t.color, &ref_c);
    let (_, d_semantic) = l2_loss(&t.semantic, &ref_s);
    let grads = render_backward(&scene, &camera, &RenderOptions::default(), &d_color, &d_semantic);

    let h = 1e-5;
    let mut checked = 0;
    let mut check = |an: f64, fd: f64, what: &str| {
        let denom = an.abs().max(fd.abs()).max(1e-6);
        assert!(
            (an - fd).abs() / denom < 2e-4,
            "{}: analytic {} vs fd {}",
            what,
            an,
            fd
        );
        checked += 1;
    };
    for gi in 0..scene.len() {
        for axis in 0..2 {
            let mut shift = [0.0, 0.0];
            shift[axis] = h;
            let fd = (blend_loss_with_mean_shift(&scene, &camera, &ref_c, &ref_s, gi, shift)
                - blend_loss_with_mean_shift(&scene, &camera, &ref_c, &ref_s, gi, [
                    -shift[0], -shift[1],
                ]))
                / (2.0 * h);
            check(grads.d_mean2d[gi][axis], fd, &format!("mean2d[{}][{}]", gi, axis));
        }
        {
            let mut plus = scene.clone();
            plus.gaussians[gi].opacity += h;
            let mut minus = scene.clone();
            minus.gaussians[gi].opacity -= h;
            let fd = (total_loss(&plus, &camera, &ref_c, &ref_s)
                - total_loss(&minus, &camera, &ref_c, &ref_s))
                / (2.0 * h);
            check(grads.d_opacity[gi], fd, &format!("opacity[{}]", gi));
        }
        for (l, m) in [(0usize, 0usize), (1, 1), (2, 2), (3, 3)] {
            let ch = 1;
            let mut plus = scene.clone();
            plus.gaussians[gi].sh_coeffs[l][m * 3 + ch] += h;
            let mut minus = scene.clone();
            minus.gaussians[gi].sh_coeffs[l][m * 3 + ch] -= h;
            let fd = (total_loss(&plus, &camera, &ref_c, &ref_s)
                - total_loss(&minus, &camera, &ref_c, &ref_s))
                / (2.0 * h);
            let bi = l * l + m;
            check(grads.d_sh[gi][ch][bi], fd, &format!("sh[{}][l{}m{}]", gi, l, m));
        }
        for k in 0..2 {
            let mut plus = scene.clone();
            plus.gaussians[gi].semantic_feature[k] += h;
            let mut minus = scene.clone();
            minus.gaussians[gi].semantic_feature[k] -= h;
            let fd = (total_loss(&plus, &camera, &ref_c, &ref_s)
                - total_loss(&minus, &camera, &ref_c, &ref_s))
                / (2.0 * h);
            check(grads.d_feature[gi][k], fd, &format!("feature[{}][{}]", gi, k));
        }
    }
    assert!(checked >= 27);
}

#[test]
fn mean2d_gradient_points_toward_reference() {
    // camera looks down +z with image-x mapped to world -x, so the
    // splat at world x = -0.1 sits right of the reference at +0.1;
    // moving it image-left reduces the loss, so d loss / d mean2d.x > 0
    // and d loss / d center.x < 0 (world +x approaches the reference)
    let camera = cam(16, 16, 40.0);
    let scene = Scene::new(
        vec![dc_gaussian(Vector3::new(-0.1, 0.0, 5.0), 0.3, 0.6, [0.9, 0.9, 0.9])],
        0,
    );
    let ref_scene = Scene::new(
        vec![dc_gaussian(Vector3::new(0.1, 0.0, 5.0), 0.3, 0.6, [0.9, 0.9, 0.9])],
        0,
    );
    let rt = render(&ref_scene, &camera, &RenderOptions::default());
    let t = render(&scene, &camera, &RenderOptions::default());
    let (_, d_color) = l2_loss(&t.color, &rt.color);
    let grads = render_backward(&scene, &camera, &RenderOptions::default(), &d_color, &[]);
    assert!(grads.d_mean2d[0].x > 0.0);
    assert!(grads.d_center[0].x < 0.0);
    assert!(grads.d_mean2d[0].norm() > 0.0);
}

#[test]
fn l1_loss_gradient_is_sign_scaled() {
    let a = vec![0.3, 0.7, 0.5];
    let b = vec![0.5, 0.5, 0.5];
    let (loss, grad) = l1_loss(&a, &b);
    assert!((loss - 0.4 / 3.0).abs() < 1e-15);
    assert_eq!(grad[0], -1.0 / 3.0);
    assert_eq!(grad[1], 1.0 / 3.0);
    assert_eq!(grad[2], 0.0);
}

#[test]
fn image_outputs_roundtrip() {
    let scene = random_scene(15, 2, 11);
    let camera = cam(16, 16, 20.0);
    let t = render(&scene, &camera, &RenderOptions::default());
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("out.png");
    write_png(&t, &png).unwrap();
    let img = image::open(&png).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (16, 16));
    let npy = dir.path().join("sem.npy");
    write_semantic_npy(&t, &npy).unwrap();
    let bytes = std::fs::read(&npy).unwrap();
    assert_eq!(&bytes[..6], b"\x93NUMPY");
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
    assert!(header.contains("'shape': (16, 16, 2)"));
    let data = &bytes[10 + header_len..];
    assert_eq!(data.len(), 16 * 16 * 2 * 8);
    let first = f64::from_le_bytes(data[..8].try_into().unwrap());
    assert_eq!(first, t.semantic[0]);
}
