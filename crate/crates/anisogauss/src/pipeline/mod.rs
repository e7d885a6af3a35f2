//! Configuration, the `anisogauss` CLI and the train/adapt
//! orchestration loop.

pub mod generate;
pub mod metrics;
pub mod opt;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::LossWeights;
use crate::encode::EncoderConfig;
use crate::scene::Scene;
use crate::spectral::{NeighborRule, RotationFrame, SpectralParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneCfg {
    /// One of "room", "clusters", "wall", "fixture2"; ignored when
    /// `path` points at a scene file.
    pub generator: String,
    pub path: Option<PathBuf>,
    pub count: usize,
    pub semantic_dim: usize,
    /// Fraction of jittered duplicate Gaussians appended (room).
    pub redundancy: f64,
    /// Remove most of the detail patch from the training copy (room).
    pub hole: bool,
}

impl Default for SceneCfg {
    fn default() -> Self {
        Self {
            generator: "room".into(),
            path: None,
            count: 240,
            semantic_dim: 8,
            redundancy: 0.0,
            hole: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraCfg {
    pub count: usize,
    /// Trailing cameras held out of training for PSNR.
    pub heldout: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
    /// Eye heights above the orbit plane, as fractions of the radius;
    /// cameras cycle through them in order.
    pub elevations: Vec<f64>,
}

impl Default for CameraCfg {
    fn default() -> Self {
        Self {
            count: 6,
            heldout: 2,
            width: 48,
            height: 48,
            fx: 55.0,
            radius: 4.5,
            near: 0.1,
            far: 100.0,
            elevations: vec![0.25, 0.55, 0.85],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralCfg {
    pub beta: f64,
    pub sigma: Option<f64>,
    pub k_eigs: usize,
    pub max_order: usize,
    /// Rotation angles in radians; `None` means the module default
    /// set {0, pi/4, pi/2, 3pi/4}.
    pub angles: Option<Vec<f64>>,
    pub neighbor_k: usize,
    pub rotation_frame: RotationFrame,
}

impl Default for SpectralCfg {
    fn default() -> Self {
        let p = SpectralParams::default();
        let k = match p.neighbor_rule {
            NeighborRule::Knn(k) => k,
            NeighborRule::Radius(_) => 8,
        };
        Self {
            beta: p.beta,
            sigma: p.sigma,
            k_eigs: p.k_eigs,
            max_order: p.max_order,
            angles: None,
            neighbor_k: k,
            rotation_frame: p.rotation_frame,
        }
    }
}

impl SpectralCfg {
    pub fn params(&self) -> SpectralParams {
        let mut p = SpectralParams::default();
        p.beta = self.beta;
        p.sigma = self.sigma;
        p.k_eigs = self.k_eigs;
        p.max_order = self.max_order;
        if let Some(a) = &self.angles {
            p.angles = a.clone();
        }
        p.neighbor_rule = NeighborRule::Knn(self.neighbor_k);
        p.rotation_frame = self.rotation_frame;
        p
    }

    /// Descriptor dimension Q = rotations * (max_order + 1).
    pub fn descriptor_dim(&self) -> usize {
        let rotations = self.angles.as_ref().map(|a| a.len()).unwrap_or(4);
        rotations * (self.max_order + 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionCfg {
    /// Local region centers placed by farthest point sampling.
    pub count: usize,
    /// Neighborhood radius as a fraction of the scene extent.
    pub radius_scale: f64,
    /// Regions larger than this keep only the nearest members.
    pub max_members: usize,
}

impl Default for RegionCfg {
    fn default() -> Self {
        Self { count: 6, radius_scale: 0.35, max_members: 48 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderCfg {
    /// Shape-encoder branch on/off; off falls back to raw semantic
    /// features everywhere.
    #[serde(default = "default_true")]
    pub enabled: bool,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub pe_bands: usize,
}

impl Default for EncoderCfg {
    fn default() -> Self {
        let d = EncoderConfig::default_for(1);
        Self {
            enabled: true,
            model_dim: d.model_dim,
            heads: d.heads,
            layers: d.layers,
            mlp_hidden: d.mlp_hidden,
            pe_bands: d.pe_bands,
        }
    }
}

impl EncoderCfg {
    pub fn to_encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            layers: self.layers,
            mlp_hidden: self.mlp_hidden,
            pe_bands: self.pe_bands,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub iterations: usize,
    pub seed: u64,
    /// Adaptation commits (prune/densify/SH) every this many steps.
    pub adapt_interval: usize,
    /// Network learning rate; per-Gaussian groups below.
    pub lr: f64,
    pub lr_sh: f64,
    pub lr_feat: f64,
    pub lr_opacity: f64,
    /// Propagation temperature tau for region-to-Gaussian weights.
    pub tau_prop: f64,
    /// Held-out PSNR recomputed every this many iterations.
    pub psnr_interval: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            iterations: 300,
            seed: 7,
            adapt_interval: 100,
            lr: 1e-2,
            lr_sh: 2.5e-2,
            lr_feat: 5e-2,
            lr_opacity: 2.5e-2,
            tau_prop: 1.0,
            psnr_interval: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneCfg {
    pub enabled: bool,
    pub tau: f64,
    pub hidden: usize,
}

impl Default for PruneCfg {
    fn default() -> Self {
        Self { enabled: false, tau: 0.01, hidden: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyCfg {
    pub enabled: bool,
    pub grad_threshold: f64,
    pub alpha_d: f64,
    pub n_max: usize,
    /// Sampling sphere radius as a fraction of the region radius.
    pub radius_scale: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DensifyCfg {
    fn default() -> Self {
        Self {
            enabled: false,
            grad_threshold: 0.05,
            alpha_d: 40.0,
            n_max: 48,
            radius_scale: 0.5,
            d_min: 0.02,
            d_max: 0.35,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShCfg {
    pub enabled: bool,
    pub tau: [f64; 4],
    pub hist_bins: usize,
    pub hist_dim: usize,
}

impl Default for ShCfg {
    fn default() -> Self {
        Self { enabled: false, tau: [0.01, 0.35, 0.35, 0.35], hist_bins: 16, hist_dim: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferCfg {
    pub enabled: bool,
    pub kappa: f64,
    pub epsilon: f64,
    pub eta: f64,
    /// Encoder parameter names under CKS regularization.
    pub tracked_matrices: Vec<String>,
    /// Softplus (default) or sigmoid modulation activation.
    pub activation: String,
    pub basis_in: Option<PathBuf>,
    pub basis_out: Option<PathBuf>,
}

impl Default for TransferCfg {
    fn default() -> Self {
        let t = crate::transfer::TransferConfig::default();
        Self {
            enabled: false,
            kappa: t.kappa,
            epsilon: t.epsilon,
            eta: t.eta,
            tracked_matrices: Vec::new(),
            activation: "softplus".into(),
            basis_in: None,
            basis_out: None,
        }
    }
}

impl TransferCfg {
    pub fn to_transfer_config(&self, layers: usize) -> crate::transfer::TransferConfig {
        crate::transfer::TransferConfig {
            kappa: self.kappa,
            epsilon: self.epsilon,
            eta: self.eta,
            tracked_matrices: self.tracked(layers),
        }
    }

    /// Defaults to the query/key/value projections of every layer.
    pub fn tracked(&self, layers: usize) -> Vec<String> {
        if !self.tracked_matrices.is_empty() {
            return self.tracked_matrices.clone();
        }
        let mut v = Vec::new();
        for l in 0..layers {
            for m in ["wq", "wk", "wv"] {
                v.push(format!("layer{}.{}", l, m));
            }
        }
        v
    }

    pub fn mod_activation(&self) -> Result<crate::transfer::ModActivation, PipelineError> {
        match self.activation.as_str() {
            "softplus" => Ok(crate::transfer::ModActivation::Softplus),
            "sigmoid" => Ok(crate::transfer::ModActivation::Sigmoid),
            other => Err(PipelineError::Config(format!("unknown activation {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputCfg {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneCfg,
    pub cameras: CameraCfg,
    pub spectral: SpectralCfg,
    pub regions: RegionCfg,
    pub encoder: EncoderCfg,
    pub train: TrainCfg,
    pub prune: PruneCfg,
    pub densify: DensifyCfg,
    pub sh: ShCfg,
    pub loss: LossWeights,
    pub transfer: TransferCfg,
    pub output: OutputCfg,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-module constraints checked up front so failures are
    /// config errors, not mid-run panics.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.scene.path.is_none()
            && !matches!(self.scene.generator.as_str(), "room" | "clusters" | "wall" | "fixture2")
        {
            return err(format!("unknown generator {:?}", self.scene.generator));
        }
        if self.scene.semantic_dim == 0 {
            return err("semantic_dim must be positive".into());
        }
        if !(0.0..=4.0).contains(&self.scene.redundancy) {
            return err(format!("redundancy {} outside [0, 4]", self.scene.redundancy));
        }
        if self.cameras.heldout >= self.cameras.count {
            return err(format!(
                "heldout {} must be below camera count {}",
                self.cameras.heldout, self.cameras.count
            ));
        }
        if self.cameras.width == 0 || self.cameras.height == 0 || self.cameras.fx <= 0.0 {
            return err("camera intrinsics invalid".into());
        }
        if self.cameras.near <= 0.0 || self.cameras.far <= self.cameras.near {
            return err("camera near/far invalid".into());
        }
        if self.spectral.beta < 0.0 {
            return err("beta must be non-negative".into());
        }
        if self.spectral.k_eigs == 0 || self.spectral.neighbor_k == 0 {
            return err("k_eigs and neighbor_k must be positive".into());
        }
        if let Some(a) = &self.spectral.angles {
            if a.is_empty() {
                return err("angles must be non-empty when given".into());
            }
        }
        if self.regions.count == 0 || self.regions.max_members < 2 {
            return err("regions.count >= 1 and max_members >= 2 required".into());
        }
        if !(self.regions.radius_scale > 0.0) {
            return err("regions.radius_scale must be positive".into());
        }
        let enc = self.encoder.to_encoder_config(self.spectral.descriptor_dim());
        enc.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.train.adapt_interval == 0 || self.train.psnr_interval == 0 {
            return err("adapt_interval and psnr_interval must be positive".into());
        }
        if !(0.0 < self.prune.tau && self.prune.tau < 1.0) {
            return err(format!("prune.tau {} outside (0, 1)", self.prune.tau));
        }
        if self.densify.d_min >= self.densify.d_max {
            return err(format!(
                "densify.d_min {} must be below d_max {}",
                self.densify.d_min, self.densify.d_max
            ));
        }
        if self.densify.alpha_d <= 0.0 || self.densify.radius_scale <= 0.0 {
            return err("densify.alpha_d and radius_scale must be positive".into());
        }
        if self.sh.tau.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return err("sh.tau entries must lie in (0, 1)".into());
        }
        if self.sh.hist_bins == 0 || self.sh.hist_dim == 0 {
            return err("sh.hist_bins and hist_dim must be positive".into());
        }
        if !(0.0 < self.transfer.epsilon) || !(0.0 < self.transfer.eta && self.transfer.eta <= 1.0)
        {
            return err("transfer.epsilon > 0 and eta in (0, 1] required".into());
        }
        self.transfer.mod_activation()?;
        if (self.prune.enabled || self.sh.enabled) && !self.encoder.enabled {
            return err("prune/sh masks need the encoder branch enabled".into());
        }
        Ok(())
    }

    /// Ground-truth and training scenes plus supervision metadata.
    pub fn build_scene(&self) -> Result<generate::GeneratedScene, PipelineError> {
        if let Some(path) = &self.scene.path {
            let format = crate::scene::SceneFormat::from_path(path)
                .ok_or_else(|| PipelineError::Config(format!("unknown scene format: {}", path.display())))?;
            let scene: Scene = crate::scene::load_scene(path, format)
                .map_err(|e| PipelineError::Runtime(e.to_string()))?;
            let labels = vec![0; scene.len()];
            let embeddings =
                generate::class_embeddings(1, scene.semantic_dim, self.train.seed);
            return Ok(generate::GeneratedScene {
                init: scene.clone(),
                gt: scene,
                labels,
                class_embeddings: embeddings,
                patch_indices: Vec::new(),
                view_dependent: Vec::new(),
            });
        }
        let seed = self.train.seed;
        let mut out = match self.scene.generator.as_str() {
            "room" => generate::room(
                self.scene.count,
                self.scene.semantic_dim,
                self.scene.redundancy,
                seed,
            ),
            "clusters" => generate::clusters(self.scene.count, self.scene.semantic_dim, seed),
            "wall" => generate::wall(self.scene.count, self.scene.semantic_dim, seed),
            "fixture2" => generate::fixture2(self.scene.semantic_dim, seed),
            other => return Err(PipelineError::Config(format!("unknown generator {:?}", other))),
        };
        if self.scene.hole {
            out.carve_hole();
        }
        Ok(out)
    }

    pub fn build_cameras(&self, target: nalgebra::Vector3<f64>) -> Vec<crate::scene::Camera> {
        generate::orbit_cameras(
            target,
            self.cameras.radius,
            self.cameras.count,
            &self.cameras.elevations,
            self.cameras.fx,
            self.cameras.width,
            self.cameras.height,
            self.cameras.near,
            self.cameras.far,
        )
    }
}

use clap::Parser;

#[derive(Parser, Debug)]
#[command(name = "anisogauss", about = "Spectral descriptors and adaptive density control for Gaussian scenes", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand, Debug)]
enum Command {
    /// Run the train/adapt loop and emit metrics and artifacts.
    Train(CommonArgs),
    /// Render all configured cameras from the scene.
    Render(CommonArgs),
    /// Emit per-region descriptor CSVs.
    Describe(CommonArgs),
    /// Print the persistent basis rank and history.
    TransferStatus(CommonArgs),
}

#[derive(clap::Args, Debug)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_common(args: &CommonArgs) -> Result<(PipelineConfig, PathBuf), PipelineError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output.dir = Some(o.clone());
    }
    let out = cfg
        .output
        .dir
        .clone()
        .ok_or_else(|| PipelineError::Config("no output directory (config [output] dir or --out)".into()))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, out) = load_common(&args)?;
            let outcome = train::train(&cfg, Some(&out))?;
            eprintln!(
                "trained {} iterations, {} gaussians, psnr {:.3}, wall {:.1}s",
                cfg.train.iterations,
                outcome.final_count,
                outcome.final_psnr,
                outcome.wall_seconds
            );
            Ok(())
        }
        Command::Render(args) => {
            let (cfg, out) = load_common(&args)?;
            run_render(&cfg, &out)
        }
        Command::Describe(args) => {
            let (cfg, out) = load_common(&args)?;
            run_describe(&cfg, &out)
        }
        Command::TransferStatus(args) => {
            let cfg = PipelineConfig::load(&args.config)?;
            run_transfer_status(&cfg)
        }
    }
}

fn run_render(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let gen = cfg.build_scene()?;
    let scene = &gen.gt;
    if scene.is_empty() {
        return Err(PipelineError::Runtime("scene is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    let target = scene.centers().iter().sum::<nalgebra::Vector3<f64>>() / scene.len() as f64;
    let cameras = cfg.build_cameras(target);
    let opts = crate::splat::RenderOptions::default();
    for (k, cam) in cameras.iter().enumerate() {
        let img = crate::splat::render(scene, cam, &opts);
        crate::splat::write_png(&img, &out.join(format!("view_{:02}.png", k)))
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        crate::splat::write_semantic_npy(&img, &out.join(format!("view_{:02}.npy", k)))
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run_describe(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let gen = cfg.build_scene()?;
    let scene = &gen.gt;
    let params = cfg.spectral.params();
    let regions = train::build_regions(scene, &cfg.regions, cfg.train.seed)
        .map_err(|e| PipelineError::Runtime(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    for (r, region) in regions.iter().enumerate() {
        let descs = crate::spectral::anisotropic_descriptor(region, scene, &params)
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        let mut file = std::fs::File::create(out.join(format!("descriptors_region{:02}.csv", r)))?;
        crate::spectral::descriptors_to_csv(&region.member_indices, &descs, &mut file)?;
    }
    Ok(())
}

fn run_transfer_status(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let path = cfg
        .transfer
        .basis_in
        .as_ref()
        .or(cfg.transfer.basis_out.as_ref())
        .ok_or_else(|| PipelineError::Config("no basis path in [transfer]".into()))?;
    let basis = crate::transfer::load_basis(path)
        .map_err(|e| PipelineError::Runtime(e.to_string()))?;
    println!(
        "basis {}: dim {}, rank {}, orthonormality defect {:.3e}",
        path.display(),
        basis.dim(),
        basis.rank(),
        basis.orthonormality_defect()
    );
    for h in &basis.history {
        println!(
            "scene {}: rho {:.4}, rho' {:.4}, added {}, eta {:.2}",
            h.scene_id, h.rho, h.rho_prime, h.added, h.eta
        );
    }
    Ok(())
}

/// CLI entry: 0 ok, 1 config/usage error, 2 runtime error.
pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version exit cleanly; bad usage is a config error
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
