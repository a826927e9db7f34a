//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use hideseek::hsn::HsnConfig;
use hideseek::hsplus::{DecodeMode, GeneratorConfig, HsPlusOptions, MaskerConfig, OrderVariant, DEFAULT_DECODE_CAP};
use hideseek::losses::LossWeights;
use hideseek::masking::{MaskStrategy, StrategyKind};
use hideseek::metrics::{decision_threshold, DEFAULT_FPR};
use hideseek::synth::SynthConfig;
use hideseek::watermark::{Manipulation, SS_BITS, RING_GROUPS};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const OUTPUT_DIR_ENV: &str = "HIDESEEK_OUTPUT_DIR";
pub const WORKERS_ENV: &str = "HIDESEEK_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for per-image work; 0 uses every core.
    pub workers: usize,
    pub data: DataConfig,
    pub checkpoints: CheckpointPaths,
    pub features: FeatureConfig,
    pub hsn: HsnConfig,
    pub masker: MaskerConfig,
    pub generator: GeneratorConfig,
    pub attack: AttackConfig,
    pub watermark: WatermarkConfig,
    pub evaluate: EvaluateConfig,
    pub ablation: AblationConfig,
    pub theorem: TheoremConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            workers: 0,
            data: DataConfig::default(),
            checkpoints: CheckpointPaths::default(),
            features: FeatureConfig::default(),
            hsn: HsnConfig::default(),
            masker: MaskerConfig::default(),
            generator: GeneratorConfig::default(),
            attack: AttackConfig::default(),
            watermark: WatermarkConfig::default(),
            evaluate: EvaluateConfig::default(),
            ablation: AblationConfig::default(),
            theorem: TheoremConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of PNGs. Synthetic images are generated when absent.
    pub dir: Option<PathBuf>,
    /// Images in `dir` already carry the watermark.
    pub watermarked: bool,
    pub count: usize,
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            watermarked: false,
            count: 16,
            synthetic: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub hsn: Option<PathBuf>,
    pub masker: Option<PathBuf>,
    pub generator: Option<PathBuf>,
}

/// Seeds of the fixed random feature networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub embedder_seed: u64,
    pub extractor_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            embedder_seed: 11,
            extractor_seed: 13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hsn,
    Hsplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderName {
    Original,
    Inverse,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    pub strategy: StrategyKind,
    pub beta: f64,
    pub gamma: f64,
    pub decode: Decode,
    pub temperature: f64,
    pub order: OrderName,
    pub decode_cap: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: Method::Hsn,
            strategy: StrategyKind::Random,
            beta: 0.6,
            gamma: 10.0,
            decode: Decode::Sample,
            temperature: 1.0,
            order: OrderName::Original,
            decode_cap: DEFAULT_DECODE_CAP,
        }
    }
}

impl AttackConfig {
    pub fn strategy(&self) -> Result<MaskStrategy, ConfigError> {
        MaskStrategy::new(self.strategy, self.beta).map_err(|e| ConfigError::field("attack.beta", e))
    }

    pub fn decode_mode(&self, seed: u64) -> DecodeMode {
        match self.decode {
            Decode::Argmax => DecodeMode::Argmax,
            Decode::Sample => DecodeMode::Sample {
                temperature: self.temperature,
                seed,
            },
        }
    }

    pub fn order_variant(&self, seed: u64) -> OrderVariant {
        match self.order {
            OrderName::Original => OrderVariant::Original,
            OrderName::Inverse => OrderVariant::Inverse,
            OrderName::Random => OrderVariant::Random { seed },
        }
    }

    pub fn hsplus_options(&self, seed: u64) -> HsPlusOptions {
        HsPlusOptions {
            gamma: self.gamma,
            mode: self.decode_mode(seed),
            order: self.order_variant(seed),
            decode_cap: self.decode_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SpreadSpectrum,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkConfig {
    pub scheme: Scheme,
    pub key_seed: u64,
    /// Payload bits (spread spectrum) or ring groups (ring).
    pub bits: usize,
    /// Overrides the default embedding strength.
    pub strength: Option<f64>,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::SpreadSpectrum,
            key_seed: 7,
            bits: SS_BITS,
            strength: None,
        }
    }
}

impl WatermarkConfig {
    fn effective_bits(&self) -> usize {
        match self.scheme {
            Scheme::SpreadSpectrum => self.bits,
            Scheme::Ring if self.bits == SS_BITS => RING_GROUPS,
            Scheme::Ring => self.bits,
        }
    }

    pub fn key(&self, width: usize, height: usize) -> hideseek::Result<hideseek::watermark::WatermarkKey> {
        use hideseek::watermark::WatermarkKey;
        match self.scheme {
            Scheme::SpreadSpectrum => {
                WatermarkKey::spread_spectrum(self.key_seed, width, height, self.effective_bits(), self.strength)
            }
            Scheme::Ring => WatermarkKey::ring(self.key_seed, width, height, self.effective_bits(), self.strength),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub fpr: f64,
    /// Purged images to score against the (watermarked) data set.
    pub purged_dir: Option<PathBuf>,
    /// Manipulations applied to the watermarked images and scored.
    pub manipulations: Vec<Manipulation>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            fpr: DEFAULT_FPR,
            purged_dir: None,
            manipulations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossVariant {
    pub name: String,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub betas: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
    /// Empty means: full weights, then each of λ1..λ3 switched off.
    pub loss_variants: Vec<LossVariant>,
    pub order_seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.60, 0.65, 0.70, 0.75, 0.80],
            strategies: StrategyKind::ALL.to_vec(),
            loss_variants: Vec::new(),
            order_seeds: (0..5).collect(),
        }
    }
}

impl AblationConfig {
    pub fn loss_variants(&self, base: LossWeights) -> Vec<LossVariant> {
        if !self.loss_variants.is_empty() {
            return self.loss_variants.clone();
        }
        let v = |name: &str, weights: LossWeights| LossVariant {
            name: name.into(),
            weights,
        };
        vec![
            v("full", base),
            v("no_area", LossWeights { lambda1: 0.0, ..base }),
            v("no_frequency", LossWeights { lambda2: 0.0, ..base }),
            v("no_semantic", LossWeights { lambda3: 0.0, ..base }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    pub instances: usize,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            n_min: 2,
            n_max: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(format!("cannot parse config: {e}")))
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read config: {e}")).with("path", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.dir,
            &mut self.checkpoints.hsn,
            &mut self.checkpoints.masker,
            &mut self.checkpoints.generator,
            &mut self.evaluate.purged_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Applies the output-directory and worker-count environment overrides.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        if let Ok(w) = std::env::var(WORKERS_ENV) {
            self.workers = w
                .trim()
                .parse()
                .map_err(|_| ConfigError::new(format!("{WORKERS_ENV} must be a non-negative integer")).with("value", w))?;
        }
        Ok(())
    }

    /// Checks fields used by every command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                return Err(ConfigError::new("data directory does not exist").with("path", dir.display()));
            }
        } else if self.data.count == 0 {
            return Err(ConfigError::new("data.count must be positive"));
        }
        for (name, p) in [
            ("checkpoints.hsn", &self.checkpoints.hsn),
            ("checkpoints.masker", &self.checkpoints.masker),
            ("checkpoints.generator", &self.checkpoints.generator),
            ("evaluate.purged_dir", &self.evaluate.purged_dir),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::new(format!("{name} does not exist")).with("path", p.display()));
                }
            }
        }
        self.hsn.validate().map_err(|e| ConfigError::field("hsn", e))?;
        self.masker.validate().map_err(|e| ConfigError::field("masker", e))?;
        self.generator.validate().map_err(|e| ConfigError::field("generator", e))?;
        self.attack.strategy()?;
        if !(self.attack.gamma > 0.0) {
            return Err(ConfigError::new("attack.gamma must be > 0"));
        }
        self.attack
            .decode_mode(0)
            .validate()
            .map_err(|e| ConfigError::field("attack.temperature", e))?;
        for m in &self.evaluate.manipulations {
            m.validate().map_err(|e| ConfigError::field("evaluate.manipulations", e))?;
        }
        if self.watermark.scheme == Scheme::SpreadSpectrum {
            decision_threshold(self.watermark.effective_bits(), self.evaluate.fpr)
                .map_err(|e| ConfigError::field("evaluate.fpr", e))?;
        }
        for b in &self.ablation.betas {
            MaskStrategy::new(StrategyKind::Random, *b).map_err(|e| ConfigError::field("ablation.betas", e))?;
        }
        for v in &self.ablation.loss_variants {
            v.weights.validate().map_err(|e| ConfigError::field("ablation.loss_variants", e))?;
        }
        let t = &self.theorem;
        if t.n_min == 0 || t.n_min > t.n_max || t.n_max > hideseek::order_theory::MAX_EXHAUSTIVE {
            return Err(ConfigError::new(format!(
                "theorem sizes must satisfy 1 <= n_min <= n_max <= {}",
                hideseek::order_theory::MAX_EXHAUSTIVE
            )));
        }
        Ok(())
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> Result<&'a Path, ConfigError> {
        p.as_deref()
            .ok_or_else(|| ConfigError::new(format!("checkpoints.{name} is required for this command")))
    }
}
