//! Experiment configuration: structure, defaults, validation, and a stable
//! content hash used for stage caching and reproducibility checks.
//!
//! Config files are TOML. Every section and field has a default, so a config
//! file only states deviations. Unknown keys are rejected with the offending
//! key named.

use crate::dataset::windows::window_stride;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Synthetic dataset geometry and generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// EEG channel count.
    pub channels: usize,
    /// Samples per segment.
    pub samples: usize,
    pub sample_rate_hz: u32,
    /// Video frames decoded per clip.
    pub frames: usize,
    /// Sliding window length in samples.
    pub window: usize,
    /// Concept vocabulary size, at most 40.
    pub concepts: usize,
    /// Session blocks, at most 7. The last block is the test split.
    pub blocks: usize,
    /// Clips per block, spread evenly over concepts.
    pub clips_per_block: usize,
    /// EEG noise level (standard deviation).
    pub noise_eeg: f64,
    /// Modality-embedding noise level.
    pub noise_emb: f64,
    /// Per-frame latent dimensionality.
    pub latent_dim: usize,
    /// Joint semantic space dimensionality.
    pub joint_dim: usize,
    /// Text-condition token count.
    pub cond_tokens: usize,
    /// Text-condition per-token dimensionality.
    pub cond_dim: usize,
    /// Scale of the clip-specific frame trajectory relative to the unit
    /// concept prototype.
    pub motion_scale: f64,
    /// Independent synthetic subjects; reports aggregate clip-then-subject.
    pub subjects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            channels: 62,
            samples: 400,
            sample_rate_hz: 200,
            frames: 6,
            window: 150,
            concepts: 40,
            blocks: 7,
            clips_per_block: 200,
            noise_eeg: 0.0,
            noise_emb: 0.0,
            latent_dim: 32,
            joint_dim: 64,
            cond_tokens: 8,
            cond_dim: 64,
            motion_scale: 0.35,
            subjects: 1,
        }
    }
}

/// Rendered frame geometry for the fixed latent-to-image map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
        }
    }
}

/// Which encoder the semantic path trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Adapter,
}

/// Batch reduction for losses written as sums over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Literal sum over the batch.
    Sum,
    /// Sum divided by the batch size, so magnitudes are batch-size
    /// independent. Default for training.
    MeanBatch,
}

/// Semantic path: encoder, loss mixing, and optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    pub encoder: EncoderKind,
    /// MLP hidden widths.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the joint contrastive term.
    pub lambda: f64,
    /// Weight of the alignment term.
    pub mu: f64,
    /// Contrastive weights for the (image, text, depth) terms.
    pub alphas: [f64; 3],
    /// Initial temperature.
    pub tau_init: f64,
    /// Learn the temperature (in log space) or keep it fixed.
    pub learn_tau: bool,
    /// One temperature shared by all modality terms, or one per term.
    pub share_tau: bool,
    /// Average in the reversed-roles contrastive term.
    pub bidirectional: bool,
    pub reduction: Reduction,
    /// Keep the epoch with the best held-out loss instead of the last one.
    pub epoch_select: bool,
    /// Train block held out for epoch selection; defaults to the last train
    /// block.
    pub val_block: Option<usize>,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Mlp,
            hidden: vec![256, 128],
            epochs: 12,
            batch_size: 64,
            lr: 1e-3,
            lambda: 0.01,
            mu: 0.5,
            alphas: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            tau_init: 0.07,
            learn_tau: true,
            share_tau: true,
            bidirectional: true,
            reduction: Reduction::MeanBatch,
            epoch_select: true,
            val_block: None,
        }
    }
}

/// Perceptual path: window encoder and the causal seq2seq model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Window embedding dimensionality out of the EEG encoder.
    pub embed_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Temporal (per-channel) convolution kernel length.
    pub temporal_kernel: usize,
    /// Filters per channel in the temporal convolution.
    pub temporal_mult: usize,
    /// Output channels of the across-channel spatial convolution.
    pub spatial_filters: usize,
    /// Average-pooling window along time.
    pub pool: usize,
    /// Normalize queries and keys per head before the dot product.
    pub qk_norm: bool,
    /// Add sinusoidal position information (a learned table when
    /// `learned_pe` is set).
    pub use_pe: bool,
    pub learned_pe: bool,
    /// Feed decoded frames back in at inference instead of a one-shot pass.
    pub autoregressive: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub reduction: Reduction,
    pub epoch_select: bool,
    pub val_block: Option<usize>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            model_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            temporal_kernel: 9,
            temporal_mult: 4,
            spatial_filters: 16,
            pool: 2,
            qk_norm: true,
            use_pe: true,
            learned_pe: false,
            autoregressive: true,
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            reduction: Reduction::MeanBatch,
            epoch_select: true,
            val_block: None,
        }
    }
}

/// Toy generative backbone: schedule and denoiser size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Diffusion steps, at most 50.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Hidden width of the two-layer conditional denoiser.
    pub hidden: usize,
    /// Sinusoidal timestep embedding width.
    pub time_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of dropping each condition during denoiser training.
    pub cond_drop: f64,
    /// Sampling noise multiplier; 0 gives a deterministic sampler.
    pub sample_noise: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            beta_min: 0.05,
            beta_max: 0.35,
            hidden: 128,
            time_dim: 16,
            epochs: 8,
            batch_size: 128,
            lr: 2e-3,
            cond_drop: 0.15,
            sample_noise: 0.0,
        }
    }
}

/// Guidance configuration for sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Use the semantic condition at reconstruction.
    pub use_semantic: bool,
    /// Use the perceptual condition at reconstruction.
    pub use_perceptual: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 7.5,
            use_semantic: true,
            use_perceptual: true,
        }
    }
}

/// Hue comparison mode. Only per-pixel correlation is implemented; the
/// histogram variant is reserved and rejected by validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HueMode {
    PerPixel,
    Histogram,
}

/// SSIM channel handling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    Luma,
    PerChannel,
}

/// Which classifier scores the semantic metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Reads the ground-truth label; upper bound.
    Oracle,
    /// Label-blind seeded random logits; chance floor.
    CalibratedRandom,
    /// Small trainable classifier fit on ground-truth renders.
    Trainable,
}

/// Metric suite configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Monte-Carlo repeats per N-way trial set.
    pub nway_repeats: usize,
    /// Top-K rank that counts as success.
    pub top_k: usize,
    pub ssim_mode: SsimMode,
    pub hue_mode: HueMode,
    /// Saturation*value below this is treated as achromatic and masked out
    /// of the hue correlation.
    pub achromatic_threshold: f64,
    /// Cap applied to infinite PSNR values when averaging.
    pub psnr_cap_db: f64,
    pub classifier: ClassifierKind,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            nway_repeats: 100,
            top_k: 1,
            ssim_mode: SsimMode::Luma,
            hue_mode: HueMode::PerPixel,
            achromatic_threshold: 0.05,
            psnr_cap_db: 100.0,
            classifier: ClassifierKind::Trainable,
            classifier_epochs: 12,
            classifier_lr: 0.05,
        }
    }
}

/// Run-level settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// When false, the configured seed is replaced at launch by one drawn
    /// from OS entropy (logged so the run can be replayed) and stage
    /// caching is bypassed, since cached artifacts are only trustworthy
    /// when the run is a pure function of its config.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            deterministic: true,
        }
    }
}

/// The complete experiment configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub render: RenderConfig,
    pub semantic: SemanticConfig,
    pub perceptual: PerceptualConfig,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceConfig,
    pub metrics: MetricsConfig,
    pub run: RunConfig,
}

/// Pipeline stages in execution order. Each has its own input hash (see
/// [`ExperimentConfig::stage_hash`]) so cached artifacts survive config
/// changes that cannot affect them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Gen,
    TrainSemantic,
    TrainPerceptual,
    Reconstruct,
    Eval,
}

impl Stage {
    /// Directory-friendly stage name, matching the CLI subcommand.
    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::TrainSemantic => "train-semantic",
            Stage::TrainPerceptual => "train-perceptual",
            Stage::Reconstruct => "reconstruct",
            Stage::Eval => "eval",
        }
    }
}

/// Parse an override right-hand side as a TOML value, falling back to a
/// string so `--set semantic.encoder=adapter` works without quotes.
fn parse_toml_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.as_table_mut().and_then(|m| m.remove("v")))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parse a TOML config file. Unknown keys are rejected with the key named.
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config from an optional file plus `path=value` overrides.
    ///
    /// Overrides use dotted paths into the TOML structure and TOML value
    /// syntax on the right-hand side; a bare word is taken as a string.
    /// Unknown paths are rejected the same way unknown file keys are.
    pub fn from_layers(base: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Value = match base {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?
            }
            None => toml::Value::Table(toml::map::Map::new()),
        };
        for spec in overrides {
            let (path, raw) = spec.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {spec:?} must look like path=value"))
            })?;
            let (path, raw) = (path.trim(), raw.trim());
            let value = parse_toml_value(raw);
            let mut cur = &mut doc;
            let parts: Vec<&str> = path.split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("override path {path:?} is malformed")));
            }
            for part in &parts[..parts.len() - 1] {
                let table = cur.as_table_mut().ok_or_else(|| {
                    Error::Config(format!("override path {path:?} descends into a non-table"))
                })?;
                cur = table
                    .entry(*part)
                    .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
            }
            let table = cur.as_table_mut().ok_or_else(|| {
                Error::Config(format!("override path {path:?} descends into a non-table"))
            })?;
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        let cfg: Self = doc
            .try_into()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable content hash of the resolved configuration (hex SHA-256).
    #[must_use]
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha_hex(json.as_bytes())
    }

    /// Hash of only the settings a stage's output depends on. Artifacts are
    /// stamped and cached under this, so configs that differ elsewhere still
    /// share them; ablation variants reuse the dataset and checkpoints.
    #[must_use]
    pub fn stage_hash(&self, stage: Stage) -> String {
        let json = match stage {
            Stage::Gen => serde_json::to_string(&("gen", &self.data, &self.run)),
            Stage::TrainSemantic => {
                serde_json::to_string(&("train-semantic", &self.data, &self.semantic, &self.run))
            }
            Stage::TrainPerceptual => {
                serde_json::to_string(&("train-perceptual", &self.data, &self.perceptual, &self.run))
            }
            Stage::Reconstruct => serde_json::to_string(&(
                "reconstruct",
                &self.data,
                &self.semantic,
                &self.perceptual,
                &self.diffusion,
                &self.guidance,
                &self.render,
                &self.run,
            )),
            Stage::Eval => return self.hash(),
        };
        sha_hex(json.expect("config serializes").as_bytes())
    }

    /// Reject invalid settings before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.channels == 0 || d.samples == 0 || d.frames == 0 {
            return Err(Error::Config("data dims must be positive".into()));
        }
        if d.sample_rate_hz == 0 {
            return Err(Error::Config("sample_rate_hz must be positive".into()));
        }
        if d.concepts == 0 || d.concepts > 40 {
            return Err(Error::Config(format!(
                "concepts must be in 1..=40, got {}",
                d.concepts
            )));
        }
        if d.blocks < 2 || d.blocks > 7 {
            return Err(Error::Config(format!(
                "blocks must be in 2..=7 (the last block is the test split), got {}",
                d.blocks
            )));
        }
        if d.clips_per_block == 0 || d.clips_per_block % d.concepts != 0 {
            return Err(Error::Config(format!(
                "clips_per_block ({}) must be a positive multiple of concepts ({})",
                d.clips_per_block, d.concepts
            )));
        }
        if d.noise_eeg < 0.0 || d.noise_emb < 0.0 {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        if d.latent_dim == 0 || d.joint_dim == 0 || d.cond_tokens == 0 || d.cond_dim == 0 {
            return Err(Error::Config("embedding dims must be positive".into()));
        }
        if d.latent_dim > d.channels {
            return Err(Error::Config(format!(
                "latent_dim ({}) must not exceed channels ({}) or the EEG mixture loses rank",
                d.latent_dim, d.channels
            )));
        }
        if d.subjects == 0 {
            return Err(Error::Config("subjects must be >= 1".into()));
        }
        window_stride(d.samples, d.frames, d.window)?;

        if self.render.height < 11 || self.render.width < 11 {
            return Err(Error::Config(
                "render dims must be at least 11x11 for the SSIM window".into(),
            ));
        }

        let s = &self.semantic;
        if s.lambda < 0.0 || s.mu < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 (lambda = {}, mu = {})",
                s.lambda, s.mu
            )));
        }
        if s.alphas.iter().any(|&a| a < 0.0) {
            return Err(Error::Config(format!(
                "alphas must be >= 0, got {:?}",
                s.alphas
            )));
        }
        if s.tau_init <= 0.0 {
            return Err(Error::Config("tau_init must be > 0".into()));
        }
        if s.lr < 0.0 {
            return Err(Error::Config("semantic lr must be >= 0".into()));
        }
        if s.batch_size == 0 {
            return Err(Error::Config("semantic batch_size must be >= 1".into()));
        }
        if s.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let Some(vb) = s.val_block {
            if vb == 0 || vb >= d.blocks {
                return Err(Error::Config(format!(
                    "semantic val_block must be a train block in 1..={}, got {vb}",
                    d.blocks - 1
                )));
            }
        }

        let p = &self.perceptual;
        if p.model_dim == 0 || p.heads == 0 || p.model_dim % p.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim ({}) must be a positive multiple of heads ({})",
                p.model_dim, p.heads
            )));
        }
        if p.layers == 0 || p.embed_dim == 0 || p.ffn_dim == 0 {
            return Err(Error::Config("perceptual dims must be positive".into()));
        }
        if p.temporal_kernel == 0 || p.temporal_kernel > d.window {
            return Err(Error::Config(format!(
                "temporal_kernel ({}) must be in 1..={}",
                p.temporal_kernel, d.window
            )));
        }
        if p.temporal_mult == 0 || p.spatial_filters == 0 {
            return Err(Error::Config("conv widths must be positive".into()));
        }
        let conv_out = d.window - p.temporal_kernel + 1;
        if p.pool == 0 || conv_out % p.pool != 0 {
            return Err(Error::Config(format!(
                "pool ({}) must divide the conv output length ({conv_out})",
                p.pool
            )));
        }
        if p.lr < 0.0 {
            return Err(Error::Config("perceptual lr must be >= 0".into()));
        }
        if p.batch_size == 0 {
            return Err(Error::Config("perceptual batch_size must be >= 1".into()));
        }
        if let Some(vb) = p.val_block {
            if vb == 0 || vb >= d.blocks {
                return Err(Error::Config(format!(
                    "perceptual val_block must be a train block in 1..={}, got {vb}",
                    d.blocks - 1
                )));
            }
        }

        let df = &self.diffusion;
        if df.steps == 0 || df.steps > 50 {
            return Err(Error::Config(format!(
                "diffusion steps must be in 1..=50, got {}",
                df.steps
            )));
        }
        if !(0.0 < df.beta_min && df.beta_min <= df.beta_max && df.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got [{}, {}]",
                df.beta_min, df.beta_max
            )));
        }
        if !(0.0..=1.0).contains(&df.cond_drop) {
            return Err(Error::Config("cond_drop must be in [0, 1]".into()));
        }
        if df.sample_noise < 0.0 {
            return Err(Error::Config("sample_noise must be >= 0".into()));
        }
        if df.hidden == 0 || df.time_dim == 0 || df.batch_size == 0 {
            return Err(Error::Config("diffusion sizes must be positive".into()));
        }

        if !self.guidance.scale.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }

        let m = &self.metrics;
        if m.nway_repeats == 0 {
            return Err(Error::Config("nway_repeats must be >= 1".into()));
        }
        if m.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&m.achromatic_threshold) {
            return Err(Error::Config(
                "achromatic_threshold must be in [0, 1)".into(),
            ));
        }
        if m.psnr_cap_db <= 0.0 {
            return Err(Error::Config("psnr_cap_db must be > 0".into()));
        }
        if m.hue_mode == HueMode::Histogram {
            return Err(Error::Config(
                "hue_mode = \"histogram\" is reserved and not implemented; use \"per_pixel\""
                    .into(),
            ));
        }
        if m.classifier_lr <= 0.0 {
            return Err(Error::Config("classifier_lr must be > 0".into()));
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn sha_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn default_geometry_matches_recording_conventions() {
        let d = DataConfig::default();
        assert_eq!(d.channels, 62);
        assert_eq!(d.sample_rate_hz, 200);
        assert_eq!(d.samples, 400);
        assert_eq!(d.frames, 6);
        assert_eq!(d.concepts, 40);
        assert_eq!(d.blocks, 7);
        assert_eq!(d.blocks * d.clips_per_block, 1400);
        // two-second clips
        assert!((d.samples as f64 / f64::from(d.sample_rate_hz) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_loss_weights() {
        let s = SemanticConfig::default();
        assert_eq!(s.lambda, 0.01);
        assert_eq!(s.mu, 0.5);
        for a in s.alphas {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s.tau_init, 0.07);
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = ExperimentConfig::from_toml_str("[semantic]\nlambduh = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lambduh"), "message should name the key: {msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn negative_lambda_rejected() {
        let err = ExperimentConfig::from_toml_str("[semantic]\nlambda = -0.5\n").unwrap_err();
        assert!(err.to_string().contains("lambda"));
    }

    #[test]
    fn histogram_hue_mode_is_a_reserved_stub() {
        let err =
            ExperimentConfig::from_toml_str("[metrics]\nhue_mode = \"histogram\"\n").unwrap_err();
        assert!(err.to_string().contains("not implemented"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), a.hash());
        b.semantic.lambda = 0.02;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn stage_hashes_ignore_unrelated_sections() {
        let a = ExperimentConfig::default();
        // guidance only feeds reconstruction onwards
        let mut b = a.clone();
        b.guidance.scale = 3.0;
        assert_eq!(a.stage_hash(Stage::Gen), b.stage_hash(Stage::Gen));
        assert_eq!(
            a.stage_hash(Stage::TrainSemantic),
            b.stage_hash(Stage::TrainSemantic)
        );
        assert_eq!(
            a.stage_hash(Stage::TrainPerceptual),
            b.stage_hash(Stage::TrainPerceptual)
        );
        assert_ne!(a.stage_hash(Stage::Reconstruct), b.stage_hash(Stage::Reconstruct));
        assert_ne!(a.stage_hash(Stage::Eval), b.stage_hash(Stage::Eval));
        // a contrastive-weight delta shares the dataset and the perceptual
        // checkpoint but not the semantic one
        let mut c = a.clone();
        c.semantic.alphas = [0.0, 1.0, 0.0];
        assert_eq!(a.stage_hash(Stage::Gen), c.stage_hash(Stage::Gen));
        assert_eq!(
            a.stage_hash(Stage::TrainPerceptual),
            c.stage_hash(Stage::TrainPerceptual)
        );
        assert_ne!(
            a.stage_hash(Stage::TrainSemantic),
            c.stage_hash(Stage::TrainSemantic)
        );
        // the run seed feeds every stage
        let mut d = a.clone();
        d.run.seed = 5;
        assert_ne!(a.stage_hash(Stage::Gen), d.stage_hash(Stage::Gen));
        // stage hashes never collide with each other on one config
        assert_ne!(a.stage_hash(Stage::Gen), a.stage_hash(Stage::TrainSemantic));
    }

    #[test]
    fn window_divisibility_checked_at_config_level() {
        let err = ExperimentConfig::from_toml_str("[data]\nwindow = 151\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("150") || msg.contains("155"), "should name a nearby valid window: {msg}");
    }

    #[test]
    fn text_only_weights_are_expressible() {
        let cfg =
            ExperimentConfig::from_toml_str("[semantic]\nalphas = [0.0, 1.0, 0.0]\n").unwrap();
        assert_eq!(cfg.semantic.alphas, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn overrides_layer_on_top_of_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "[run]\nseed = 3\n[guidance]\nscale = 2.0\n").unwrap();
        let cfg = ExperimentConfig::from_layers(
            Some(&path),
            &[
                "run.seed=9".into(),
                "semantic.alphas=[0.0, 1.0, 0.0]".into(),
                "semantic.encoder=adapter".into(),
            ],
        )
        .unwrap();
        // the file set it, the flag wins
        assert_eq!(cfg.run.seed, 9);
        // untouched file values survive
        assert_eq!(cfg.guidance.scale, 2.0);
        assert_eq!(cfg.semantic.alphas, [0.0, 1.0, 0.0]);
        assert_eq!(cfg.semantic.encoder, EncoderKind::Adapter);
    }

    #[test]
    fn override_of_unknown_key_is_rejected() {
        let err = ExperimentConfig::from_layers(None, &["run.sneed=9".into()]).unwrap_err();
        assert!(err.to_string().contains("sneed"), "{err}");
        assert!(ExperimentConfig::from_layers(None, &["run.seed".into()]).is_err());
        assert!(ExperimentConfig::from_layers(None, &["run..seed=1".into()]).is_err());
    }

    #[test]
    fn no_file_no_overrides_gives_defaults() {
        let cfg = ExperimentConfig::from_layers(None, &[]).unwrap();
        assert_eq!(cfg.hash(), ExperimentConfig::default().hash());
    }
}
