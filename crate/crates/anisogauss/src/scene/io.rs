//! Scene ingestion: PLY (ascii / binary little-endian) and a JSON
//! schema documented in the repository README.
//!
//! PLY properties: x, y, z are mandatory. Recognized optional
//! properties: opacity, scale_0..2 (log scales, exponentiated on
//! load), rot_0..3 (quaternion w,x,y,z), f_dc_0..2, f_rest_0..44,
//! sem_0..D-1, red/green/blue (uchar, converted to a degree-0 SH
//! block). Missing attributes fall back to defaults: opacity 1, an
//! isotropic scale of 1% of the scene extent, zero high-degree SH and
//! a zero semantic feature.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{empty_sh, Scene, SceneError, SceneMetadata, SemanticGaussian};

/// Y_0^0, used to convert plain RGB into a degree-0 SH block.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneFormat {
    Ply,
    Json,
}

impl SceneFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ply") => Some(Self::Ply),
            Some("json") => Some(Self::Json),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonGaussian {
    center: [f64; 3],
    /// Quaternion (w, x, y, z); identity when omitted.
    #[serde(default = "default_rotation")]
    rotation: [f64; 4],
    /// Linear scales; filled from the scene extent when omitted.
    #[serde(default)]
    scale: Option<[f64; 3]>,
    #[serde(default = "default_opacity")]
    opacity: f64,
    /// SH blocks per degree, lengths 3/9/15/21. Missing degrees are zero.
    #[serde(default)]
    sh: Vec<Vec<f64>>,
    #[serde(default)]
    semantic_feature: Vec<f64>,
}

fn default_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn default_opacity() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct JsonScene {
    gaussians: Vec<JsonGaussian>,
    #[serde(default)]
    semantic_dim: usize,
}

pub fn load_scene(path: &Path, format: SceneFormat) -> Result<Scene, SceneError> {
    let mut scene = match format {
        SceneFormat::Json => load_json(path)?,
        SceneFormat::Ply => load_ply(path)?,
    };
    scene.metadata.source = Some(path.display().to_string());
    finalize(&mut scene)?;
    Ok(scene)
}

/// Normalize quaternions, fill default scales, validate invariants.
fn finalize(scene: &mut Scene) -> Result<(), SceneError> {
    if scene.gaussians.is_empty() {
        return Err(SceneError::Schema("scene has no gaussians".into()));
    }
    let extent = scene.extent().max(1e-6);
    let default_scale = 0.01 * extent;
    for g in &mut scene.gaussians {
        let q = g.rotation.into_inner();
        let norm = q.norm();
        if norm < 1e-12 {
            return Err(SceneError::Value("zero quaternion".into()));
        }
        g.rotation = UnitQuaternion::from_quaternion(q / norm);
        if g.scale == Vector3::zeros() {
            g.scale = Vector3::repeat(default_scale);
        }
        g.validate()?;
    }
    Ok(())
}

fn load_json(path: &Path) -> Result<Scene, SceneError> {
    let text = fs::read_to_string(path)?;
    let parsed: JsonScene =
        serde_json::from_str(&text).map_err(|e| SceneError::Parse(e.to_string()))?;
    let semantic_dim = parsed.semantic_dim;
    let mut gaussians = Vec::with_capacity(parsed.gaussians.len());
    for (i, jg) in parsed.gaussians.into_iter().enumerate() {
        if !(-1e-6..=1.0 + 1e-6).contains(&jg.opacity) {
            return Err(SceneError::Value(format!(
                "gaussian {}: opacity {} outside [0,1]",
                i, jg.opacity
            )));
        }
        if let Some(s) = &jg.scale {
            if s.iter().any(|&x| x <= 0.0) {
                return Err(SceneError::Value(format!("gaussian {}: non-positive scale", i)));
            }
        }
        let mut sh = empty_sh();
        for (l, block) in jg.sh.iter().enumerate().take(4) {
            if block.len() != (2 * l + 1) * 3 {
                return Err(SceneError::Parse(format!(
                    "gaussian {}: SH degree {} has {} values, expected {}",
                    i,
                    l,
                    block.len(),
                    (2 * l + 1) * 3
                )));
            }
            sh[l] = block.clone();
        }
        let mut feature = jg.semantic_feature;
        if feature.is_empty() {
            feature = vec![0.0; semantic_dim];
        } else if feature.len() != semantic_dim {
            return Err(SceneError::Parse(format!(
                "gaussian {}: semantic feature length {} != semantic_dim {}",
                i,
                feature.len(),
                semantic_dim
            )));
        }
        gaussians.push(SemanticGaussian {
            center: Vector3::from(jg.center),
            rotation: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                jg.rotation[0],
                jg.rotation[1],
                jg.rotation[2],
                jg.rotation[3],
            )),
            scale: jg.scale.map(Vector3::from).unwrap_or_else(Vector3::zeros),
            opacity: jg.opacity,
            sh_coeffs: sh,
            semantic_feature: feature,
        });
    }
    Ok(Scene {
        gaussians,
        semantic_dim,
        metadata: SceneMetadata::default(),
    })
}

pub fn save_scene_json(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    let out = JsonScene {
        semantic_dim: scene.semantic_dim,
        gaussians: scene
            .gaussians
            .iter()
            .map(|g| {
                let q = g.rotation.into_inner();
                JsonGaussian {
                    center: [g.center.x, g.center.y, g.center.z],
                    rotation: [q.w, q.i, q.j, q.k],
                    scale: Some([g.scale.x, g.scale.y, g.scale.z]),
                    opacity: g.opacity,
                    sh: g.sh_coeffs.iter().map(|b| b.clone()).collect(),
                    semantic_feature: g.semantic_feature.clone(),
                }
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&out).map_err(|e| SceneError::Parse(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    Float,
    Double,
    Uchar,
    Int,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(Self::Float),
            "double" | "float64" => Some(Self::Double),
            "uchar" | "uint8" => Some(Self::Uchar),
            "int" | "int32" => Some(Self::Int),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::Float => 4,
            Self::Double => 8,
            Self::Uchar => 1,
            Self::Int => 4,
        }
    }
}

fn load_ply(path: &Path) -> Result<Scene, SceneError> {
    let file = fs::File::open(path)?;
    let mut reader = BufReader::new(file);

    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(SceneError::Parse("not a PLY file".into()));
    }

    let mut binary = false;
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex_element = false;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(SceneError::Parse("unexpected EOF in header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", other, _] => {
                return Err(SceneError::Parse(format!("unsupported PLY format {}", other)))
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                vertex_count =
                    Some(n.parse().map_err(|_| SceneError::Parse("bad vertex count".into()))?);
                in_vertex_element = true;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", ty, name] if in_vertex_element => {
                let ty = PlyType::parse(ty)
                    .ok_or_else(|| SceneError::Parse(format!("unsupported type {}", ty)))?;
                props.push((name.to_string(), ty));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            [] => {}
            _ => return Err(SceneError::Parse(format!("bad header line: {}", line.trim()))),
        }
    }
    let count = vertex_count.ok_or_else(|| SceneError::Schema("no vertex element".into()))?;

    // column-major table of property values
    let mut table = vec![vec![0.0f64; props.len()]; count];
    if binary {
        let row_size: usize = props.iter().map(|(_, t)| t.size()).sum();
        let mut buf = vec![0u8; row_size];
        for row in table.iter_mut() {
            reader.read_exact(&mut buf).map_err(|_| {
                SceneError::Parse("truncated binary vertex data".into())
            })?;
            let mut offset = 0;
            for (slot, (_, ty)) in row.iter_mut().zip(&props) {
                *slot = match ty {
                    PlyType::Float => f32::from_le_bytes(
                        buf[offset..offset + 4].try_into().unwrap(),
                    ) as f64,
                    PlyType::Double => {
                        f64::from_le_bytes(buf[offset..offset + 8].try_into().unwrap())
                    }
                    PlyType::Uchar => buf[offset] as f64,
                    PlyType::Int => {
                        i32::from_le_bytes(buf[offset..offset + 4].try_into().unwrap()) as f64
                    }
                };
                offset += ty.size();
            }
        }
    } else {
        for row in table.iter_mut() {
            line.clear();
            loop {
                if reader.read_line(&mut line)? == 0 {
                    return Err(SceneError::Parse("truncated ascii vertex data".into()));
                }
                if !line.trim().is_empty() {
                    break;
                }
                line.clear();
            }
            let values: Result<Vec<f64>, _> =
                line.split_whitespace().map(|t| t.parse::<f64>()).collect();
            let values = values.map_err(|_| SceneError::Parse("bad ascii vertex line".into()))?;
            if values.len() != props.len() {
                return Err(SceneError::Parse("vertex line width mismatch".into()));
            }
            row.copy_from_slice(&values);
        }
    }

    let find = |name: &str| props.iter().position(|(n, _)| n == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(SceneError::Schema("positions x,y,z".into())),
    };
    let i_opacity = find("opacity");
    let i_scale: Vec<Option<usize>> = (0..3).map(|k| find(&format!("scale_{}", k))).collect();
    let i_rot: Vec<Option<usize>> = (0..4).map(|k| find(&format!("rot_{}", k))).collect();
    let i_dc: Vec<Option<usize>> = (0..3).map(|k| find(&format!("f_dc_{}", k))).collect();
    let i_rest: Vec<Option<usize>> = (0..45).map(|k| find(&format!("f_rest_{}", k))).collect();
    let has_rest = i_rest.iter().all(|o| o.is_some());
    let i_rgb: Vec<Option<usize>> = ["red", "green", "blue"].iter().map(|n| find(n)).collect();
    let mut sem_indices = Vec::new();
    while let Some(i) = find(&format!("sem_{}", sem_indices.len())) {
        sem_indices.push(i);
    }
    let semantic_dim = sem_indices.len();

    let mut gaussians = Vec::with_capacity(count);
    for row in &table {
        let center = Vector3::new(row[ix], row[iy], row[iz]);
        let opacity = match i_opacity {
            Some(i) => {
                let v = row[i];
                if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                    return Err(SceneError::Value(format!("opacity {} outside [0,1]", v)));
                }
                v.clamp(0.0, 1.0)
            }
            None => 1.0,
        };
        let scale = if i_scale.iter().all(|o| o.is_some()) {
            // 3DGS convention stores log scales
            Vector3::new(
                row[i_scale[0].unwrap()].exp(),
                row[i_scale[1].unwrap()].exp(),
                row[i_scale[2].unwrap()].exp(),
            )
        } else {
            Vector3::zeros() // filled by finalize
        };
        let rotation = if i_rot.iter().all(|o| o.is_some()) {
            UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                row[i_rot[0].unwrap()],
                row[i_rot[1].unwrap()],
                row[i_rot[2].unwrap()],
                row[i_rot[3].unwrap()],
            ))
        } else {
            UnitQuaternion::identity()
        };
        let mut sh = empty_sh();
        if i_dc.iter().all(|o| o.is_some()) {
            for k in 0..3 {
                sh[0][k] = row[i_dc[k].unwrap()];
            }
        } else if i_rgb.iter().all(|o| o.is_some()) {
            for k in 0..3 {
                sh[0][k] = (row[i_rgb[k].unwrap()] / 255.0 - 0.5) / SH_C0;
            }
        }
        if has_rest {
            // f_rest is channel-major over 15 coefficients (3DGS layout)
            for coeff in 0..15 {
                let (l, m) = match coeff {
                    0..=2 => (1usize, coeff),
                    3..=7 => (2, coeff - 3),
                    _ => (3, coeff - 8),
                };
                for ch in 0..3 {
                    sh[l][m * 3 + ch] = row[i_rest[ch * 15 + coeff].unwrap()];
                }
            }
        }
        let semantic_feature: Vec<f64> = sem_indices.iter().map(|&i| row[i]).collect();
        gaussians.push(SemanticGaussian {
            center,
            rotation,
            scale,
            opacity,
            sh_coeffs: sh,
            semantic_feature,
        });
    }
    Ok(Scene {
        gaussians,
        semantic_dim,
        metadata: SceneMetadata::default(),
    })
}
