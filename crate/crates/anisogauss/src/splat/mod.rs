//! CPU reference forward renderer with depth-sorted alpha blending and
//! the backward pass that feeds adaptation statistics.

pub mod sh;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::scene::{Camera, Scene};

/// Contributions with evaluated alpha below this are skipped, in both
/// the tiled renderer and the untiled oracle used by tests.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Evaluated alpha is clamped here before blending.
pub const ALPHA_MAX: f64 = 0.999;
/// Screen-space covariance regularization, in pixels squared.
pub const COV2D_REG: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("gradient tracking was not enabled for this render")]
    State,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-render knobs. Overrides let the adaptation phase render with
/// masked opacities / SH blocks / fused features without mutating the
/// scene.
#[derive(Default, Clone)]
pub struct RenderOptions<'a> {
    /// Highest SH degree evaluated (0..=3). Defaults to 3.
    pub max_degree: Option<usize>,
    /// Per-Gaussian, per-degree SH mask multipliers.
    pub sh_masks: Option<&'a [[f64; 4]]>,
    /// Replaces each Gaussian's opacity.
    pub opacity_override: Option<&'a [f64]>,
    /// Replaces each Gaussian's semantic feature.
    pub feature_override: Option<&'a [Vec<f64>]>,
}

/// A Gaussian after perspective projection.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// Evaluated SH radiance toward the camera, clamped to [0,1].
    pub color: [f64; 3],
    /// Pre-clamp radiance, kept for the backward clamp mask.
    pub color_raw: [f64; 3],
    pub alpha_base: f64,
    /// Inclusive pixel bounds guaranteed to contain every contribution
    /// above ALPHA_MIN.
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
}

/// Rendered color + semantic maps with blending diagnostics.
pub struct RenderTarget {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// H*W*3 row-major, linear light in [0,1].
    pub color: Vec<f64>,
    /// H*W*feature_dim row-major.
    pub semantic: Vec<f64>,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// Contributors blended per pixel.
    pub contributors: Vec<u32>,
    pub skipped_degenerate: usize,
}

/// Per-Gaussian gradients of a scalar image loss. All fields are exact
/// except `d_center`, which chains `d_mean2d` through the projection
/// Jacobian and omits the covariance / view-direction paths.
pub struct RenderGradients {
    pub d_center: Vec<Vector3<f64>>,
    pub d_opacity: Vec<f64>,
    /// Gradients for the flat 16-coefficient SH vector per channel.
    pub d_sh: Vec<[[f64; 16]; 3]>,
    pub d_feature: Vec<Vec<f64>>,
    pub d_mean2d: Vec<Vector2<f64>>,
}

fn effective_degree_gain(opts: &RenderOptions, index: usize, l: usize) -> f64 {
    let max_degree = opts.max_degree.unwrap_or(3);
    if l > max_degree {
        return 0.0;
    }
    match opts.sh_masks {
        Some(masks) => masks[index][l],
        None => 1.0,
    }
}

/// Project one Gaussian through the EWA perspective approximation.
pub fn project_gaussian(
    scene: &Scene,
    camera: &Camera,
    index: usize,
    opts: &RenderOptions,
) -> Option<ProjectedGaussian> {
    let g = &scene.gaussians[index];
    let p_cam = camera.pose * nalgebra::Point3::from(g.center);
    let z = p_cam.z;
    if z <= camera.near || z >= camera.far {
        return None;
    }
    let alpha_base = match opts.opacity_override {
        Some(o) => o[index],
        None => g.opacity,
    };
    if alpha_base < ALPHA_MIN {
        return None;
    }
    let mean2d = Vector2::new(
        camera.fx * p_cam.x / z + camera.cx,
        camera.fy * p_cam.y / z + camera.cy,
    );
    let rot = camera.pose.rotation.to_rotation_matrix();
    let w = rot.matrix();
    let jproj = nalgebra::Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * p_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * p_cam.y / (z * z),
    );
    let jw = jproj * w;
    let cov3d: Matrix3<f64> = g.covariance();
    let mut cov2d: Matrix2<f64> = jw * cov3d * jw.transpose();
    cov2d[(0, 0)] += COV2D_REG;
    cov2d[(1, 1)] += COV2D_REG;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

    // view direction from camera position toward the center
    let cam_pos = camera.pose.inverse() * nalgebra::Point3::origin();
    let dir_raw = g.center - cam_pos.coords;
    let dir = if dir_raw.norm() > 1e-12 { dir_raw.normalize() } else { Vector3::z() };
    let basis = sh::eval_basis(&dir);
    let mut color_raw = [0.5f64; 3];
    for l in 0..4 {
        let gain = effective_degree_gain(opts, index, l);
        if gain == 0.0 {
            continue;
        }
        let block = &g.sh_coeffs[l];
        for (m, bi) in sh::degree_range(l).enumerate() {
            for ch in 0..3 {
                color_raw[ch] += gain * block[m * 3 + ch] * basis[bi];
            }
        }
    }
    let color = [
        color_raw[0].clamp(0.0, 1.0),
        color_raw[1].clamp(0.0, 1.0),
        color_raw[2].clamp(0.0, 1.0),
    ];

    // bounding box from the largest cov2d eigenvalue
    let trace_half = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let disc = (trace_half * trace_half - det).max(0.0).sqrt();
    let lambda_max = trace_half + disc;
    let q_max = 2.0 * (alpha_base.min(ALPHA_MAX) / ALPHA_MIN).ln();
    if q_max <= 0.0 {
        return None;
    }
    let radius = (q_max * lambda_max).sqrt().ceil() + 1.0;
    let x_lo = (mean2d.x - radius).floor().max(0.0) as usize;
    let x_hi = (mean2d.x + radius).ceil().min((camera.width - 1) as f64);
    let y_lo = (mean2d.y - radius).floor().max(0.0) as usize;
    let y_hi = (mean2d.y + radius).ceil().min((camera.height - 1) as f64);
    if x_hi < 0.0 || y_hi < 0.0 || mean2d.x + radius < 0.0 || mean2d.y + radius < 0.0 {
        return None;
    }
    let (x_hi, y_hi) = (x_hi as usize, y_hi as usize);
    if x_lo > x_hi || y_lo > y_hi {
        return None;
    }
    Some(ProjectedGaussian {
        index,
        mean2d,
        cov2d,
        conic,
        depth: z,
        color,
        color_raw,
        alpha_base,
        x_range: (x_lo, x_hi),
        y_range: (y_lo, y_hi),
    })
}

/// Depth-sorted projection of the whole scene (ties break by index).
pub fn project_scene(scene: &Scene, camera: &Camera, opts: &RenderOptions) -> (Vec<ProjectedGaussian>, usize) {
    let mut skipped = 0;
    let mut splats: Vec<ProjectedGaussian> = (0..scene.len())
        .filter_map(|i| {
            let p = project_gaussian(scene, camera, i, opts);
            if p.is_none() {
                skipped += 1;
            }
            p
        })
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    (splats, skipped)
}

fn eval_alpha(splat: &ProjectedGaussian, px: f64, py: f64) -> Option<f64> {
    let d = Vector2::new(px - splat.mean2d.x, py - splat.mean2d.y);
    let q = (d.transpose() * splat.conic * d)[(0, 0)];
    if q < 0.0 {
        return None;
    }
    let alpha = (splat.alpha_base * (-0.5 * q).exp()).min(ALPHA_MAX);
    if alpha < ALPHA_MIN {
        None
    } else {
        Some(alpha)
    }
}

/// Render color and semantic maps by front-to-back alpha blending.
/// Pixel centers sit at integer coordinates.
pub fn render(scene: &Scene, camera: &Camera, opts: &RenderOptions) -> RenderTarget {
    let (splats, skipped) = project_scene(scene, camera, opts);
    let (w, h) = (camera.width, camera.height);
    let df = scene.semantic_dim;
    let mut target = RenderTarget {
        width: w,
        height: h,
        feature_dim: df,
        color: vec![0.0; w * h * 3],
        semantic: vec![0.0; w * h * df],
        transmittance: vec![1.0; w * h],
        contributors: vec![0; w * h],
        skipped_degenerate: skipped,
    };

    // splats per row, preserving depth order
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (si, s) in splats.iter().enumerate() {
        for row in rows.iter_mut().take(s.y_range.1 + 1).skip(s.y_range.0) {
            row.push(si);
        }
    }

    use rayon::prelude::*;
    let feature_of = |index: usize| -> &[f64] {
        match opts.feature_override {
            Some(f) => &f[index],
            None => &scene.gaussians[index].semantic_feature,
        }
    };

    let row_results: Vec<(usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut color = vec![0.0; w * 3];
            let mut semantic = vec![0.0; w * df];
            let mut trans = vec![1.0; w];
            let mut contrib = vec![0u32; w];
            for &si in &rows[y] {
                let s = &splats[si];
                let f = feature_of(s.index);
                for x in s.x_range.0..=s.x_range.1 {
                    if let Some(alpha) = eval_alpha(s, x as f64, y as f64) {
                        let t = trans[x];
                        let wgt = alpha * t;
                        for ch in 0..3 {
                            color[x * 3 + ch] += s.color[ch] * wgt;
                        }
                        for (k, fv) in f.iter().enumerate() {
                            semantic[x * df + k] += fv * wgt;
                        }
                        trans[x] = t * (1.0 - alpha);
                        contrib[x] += 1;
                    }
                }
            }
            (y, color, semantic, trans, contrib)
        })
        .collect();
    for (y, color, semantic, trans, contrib) in row_results {
        target.color[y * w * 3..(y + 1) * w * 3].copy_from_slice(&color);
        if df > 0 {
            target.semantic[y * w * df..(y + 1) * w * df].copy_from_slice(&semantic);
        }
        target.transmittance[y * w..(y + 1) * w].copy_from_slice(&trans);
        target.contributors[y * w..(y + 1) * w].copy_from_slice(&contrib);
    }
    target
}

/// Backward pass: given per-pixel loss gradients for the color and
/// semantic maps, accumulate per-Gaussian parameter gradients. The
/// traversal mirrors `render` exactly (same sort, cutoff and clamp).
pub fn render_backward(
    scene: &Scene,
    camera: &Camera,
    opts: &RenderOptions,
    d_color: &[f64],
    d_semantic: &[f64],
) -> RenderGradients {
    let (splats, _) = project_scene(scene, camera, opts);
    let (w, h) = (camera.width, camera.height);
    let df = scene.semantic_dim;
    let n = scene.len();
    let mut grads = RenderGradients {
        d_center: vec![Vector3::zeros(); n],
        d_opacity: vec![0.0; n],
        d_sh: vec![[[0.0; 16]; 3]; n],
        d_feature: vec![vec![0.0; df]; n],
        d_mean2d: vec![Vector2::zeros(); n],
    };
    let feature_of = |index: usize| -> &[f64] {
        match opts.feature_override {
            Some(f) => &f[index],
            None => &scene.gaussians[index].semantic_feature,
        }
    };

    // forward per pixel to recover final transmittance, then reverse
    // sweep with suffix accumulators
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (si, s) in splats.iter().enumerate() {
        for row in rows.iter_mut().take(s.y_range.1 + 1).skip(s.y_range.0) {
            row.push(si);
        }
    }

    // d alpha per (splat, pixel) chained into projection terms. Rows
    // are split into a fixed number of chunks and merged in chunk
    // order, so the result is identical across thread schedules.
    use rayon::prelude::*;
    struct Partial {
        d_opacity: Vec<f64>,
        d_sh: Vec<[[f64; 16]; 3]>,
        d_feature: Vec<Vec<f64>>,
        d_mean2d: Vec<Vector2<f64>>,
    }
    let chunk_count = 8.min(h).max(1);
    let chunk_size = h.div_ceil(chunk_count);
    let partials: Vec<Partial> = (0..chunk_count)
        .into_par_iter()
        .map(|ci| {
            let mut part = Partial {
                d_opacity: vec![0.0; n],
                d_sh: vec![[[0.0; 16]; 3]; n],
                d_feature: vec![vec![0.0; df]; n],
                d_mean2d: vec![Vector2::zeros(); n],
            };
            for y in ci * chunk_size..((ci + 1) * chunk_size).min(h) {
                // forward: transmittance after all splats
                let mut trans_final = vec![1.0; w];
                for &si in &rows[y] {
                    let s = &splats[si];
                    for x in s.x_range.0..=s.x_range.1 {
                        if let Some(alpha) = eval_alpha(s, x as f64, y as f64) {
                            trans_final[x] *= 1.0 - alpha;
                        }
                    }
                }
                let mut trans = trans_final;
                let mut suffix_c = vec![0.0; w * 3]; // sum_{j>i} dC.c_j alpha_j T_j per channel premultiplied
                let mut suffix_f = vec![0.0; w];
                for &si in rows[y].iter().rev() {
                    let s = &splats[si];
                    let f = feature_of(s.index);
                    let gi = s.index;
                    for x in s.x_range.0..=s.x_range.1 {
                        let (px, py) = (x as f64, y as f64);
                        let alpha = match eval_alpha(s, px, py) {
                            Some(a) => a,
                            None => continue,
                        };
                        let t_here = trans[x] / (1.0 - alpha);
                        let pix = y * w + x;
                        let dc = &d_color[pix * 3..pix * 3 + 3];
                        let wgt = alpha * t_here;

                        // color / feature gradients
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            let d_col_i = dc[ch] * wgt;
                            // chain through clamp into SH coefficients
                            if s.color_raw[ch] > 0.0 && s.color_raw[ch] < 1.0 {
                                let basis = sh_basis_for(scene, camera, gi);
                                for l in 0..4 {
                                    let gain = effective_degree_gain(opts, gi, l);
                                    if gain == 0.0 {
                                        continue;
                                    }
                                    for bi in sh::degree_range(l) {
                                        part.d_sh[gi][ch][bi] += d_col_i * gain * basis[bi];
                                    }
                                }
                            }
                            d_alpha += dc[ch] * s.color[ch] * t_here;
                            d_alpha -= dc[ch] * suffix_c[x * 3 + ch] / (1.0 - alpha);
                        }
                        if df > 0 {
                            let ds = &d_semantic[pix * df..(pix + 1) * df];
                            for k in 0..df {
                                part.d_feature[gi][k] += ds[k] * wgt;
                                d_alpha += ds[k] * f[k] * t_here;
                            }
                            d_alpha -= suffix_f[x] / (1.0 - alpha);
                        }

                        // alpha clamp: no gradient when saturated at ALPHA_MAX
                        let d2 = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
                        let q = (d2.transpose() * s.conic * d2)[(0, 0)];
                        let alpha_unclamped = s.alpha_base * (-0.5 * q).exp();
                        if alpha_unclamped < ALPHA_MAX {
                            part.d_opacity[gi] += d_alpha * (-0.5 * q).exp();
                            let conic_d = s.conic * d2;
                            let d_mean = conic_d * alpha;
                            part.d_mean2d[gi] += d_mean * d_alpha;
                        }

                        // update suffix accumulators and transmittance
                        for ch in 0..3 {
                            suffix_c[x * 3 + ch] += s.color[ch] * wgt;
                        }
                        if df > 0 {
                            let ds = &d_semantic[pix * df..(pix + 1) * df];
                            let mut fdot = 0.0;
                            for k in 0..df {
                                fdot += ds[k] * f[k];
                            }
                            suffix_f[x] += fdot * wgt;
                        }
                        trans[x] = t_here;
                    }
                }
            }
            part
        })
        .collect();
    for part in partials {
        for gi in 0..n {
            grads.d_opacity[gi] += part.d_opacity[gi];
            for ch in 0..3 {
                for bi in 0..16 {
                    grads.d_sh[gi][ch][bi] += part.d_sh[gi][ch][bi];
                }
            }
            for k in 0..df {
                grads.d_feature[gi][k] += part.d_feature[gi][k];
            }
            grads.d_mean2d[gi] += part.d_mean2d[gi];
        }
    }

    // chain mean2d gradients into world centers through the projection
    // Jacobian only; the covariance and view-direction dependence on the
    // center is not propagated (d_opacity / d_sh / d_feature / d_mean2d
    // are exact, d_center is first-order in the projected mean)
    for s in &splats {
        let gi = s.index;
        let dm = grads.d_mean2d[gi];
        if dm == Vector2::zeros() {
            continue;
        }
        let g = &scene.gaussians[gi];
        let p_cam = camera.pose * nalgebra::Point3::from(g.center);
        let z = p_cam.z;
        let jproj = nalgebra::Matrix2x3::new(
            camera.fx / z,
            0.0,
            -camera.fx * p_cam.x / (z * z),
            0.0,
            camera.fy / z,
            -camera.fy * p_cam.y / (z * z),
        );
        let jw = jproj * camera.pose.rotation.to_rotation_matrix().matrix();
        grads.d_center[gi] += jw.transpose() * dm;
    }
    grads
}

fn sh_basis_for(scene: &Scene, camera: &Camera, index: usize) -> [f64; 16] {
    let cam_pos = camera.pose.inverse() * nalgebra::Point3::origin();
    let dir_raw = scene.gaussians[index].center - cam_pos.coords;
    let dir = if dir_raw.norm() > 1e-12 { dir_raw.normalize() } else { Vector3::z() };
    sh::eval_basis(&dir)
}

/// Mean squared error loss and its per-pixel gradient.
pub fn l2_loss(image: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(image.len(), reference.len());
    let n = image.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; image.len()];
    for i in 0..image.len() {
        let d = image[i] - reference[i];
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Mean absolute error loss and its per-pixel gradient.
pub fn l1_loss(image: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(image.len(), reference.len());
    let n = image.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; image.len()];
    for i in 0..image.len() {
        let d = image[i] - reference[i];
        loss += d.abs();
        grad[i] = if d == 0.0 { 0.0 } else { d.signum() / n };
    }
    (loss / n, grad)
}

/// Peak signal-to-noise ratio in dB; +inf for identical images.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, SplatError> {
    if a.len() != b.len() {
        return Err(SplatError::Shape(a.len(), 1, b.len(), 1));
    }
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn srgb_encode(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Write the color buffer as an 8-bit sRGB PNG.
pub fn write_png(target: &RenderTarget, path: &std::path::Path) -> Result<(), SplatError> {
    let mut buf = Vec::with_capacity(target.width * target.height * 3);
    for v in &target.color {
        buf.push((srgb_encode(*v) * 255.0).round() as u8);
    }
    let img = image::RgbImage::from_raw(target.width as u32, target.height as u32, buf)
        .expect("buffer size matches dimensions");
    img.save(path).map_err(|e| SplatError::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Dump the semantic map as NPY (little-endian f64, shape H x W x D).
pub fn write_semantic_npy(target: &RenderTarget, path: &std::path::Path) -> Result<(), SplatError> {
    use std::io::Write;
    let header_dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        target.height, target.width, target.feature_dim
    );
    let mut header = header_dict.into_bytes();
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(b' ', pad));
    header.push(b'\n');
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"\x93NUMPY\x01\x00")?;
    f.write_all(&(header.len() as u16).to_le_bytes())?;
    f.write_all(&header)?;
    for v in &target.semantic {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
