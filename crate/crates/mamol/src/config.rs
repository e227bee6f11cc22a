//! Run configuration: a single versioned JSON document with strict schema
//! (unknown keys are errors) plus dotted-path `--set key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MissingMode, ModalityInfo, SubsetSplit, SyntheticSpec};
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineFrozen,
    MoeRep,
    MoeAda,
    MoeTask,
    Mamol,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::BaselineFrozen, Variant::MoeRep, Variant::MoeAda, Variant::MoeTask, Variant::Mamol];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::BaselineFrozen => "baseline_frozen",
            Variant::MoeRep => "moe_rep",
            Variant::MoeAda => "moe_ada",
            Variant::MoeTask => "moe_task",
            Variant::Mamol => "mamol",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrunkMode {
    /// One frozen trunk over the concatenated modality tokens.
    #[default]
    Shared,
    /// One frozen tower per modality, each with its own injected experts.
    PerModality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionStrategy {
    /// Absent-modality encoder outputs become zero blocks.
    #[default]
    ZeroFill,
    /// Absent-modality encoder outputs become trainable placeholder blocks.
    LearnablePlaceholder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingGranularity {
    /// Gates computed per token.
    #[default]
    Token,
    /// Gates computed once per sample on mean-pooled tokens.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PatternEncoding {
    /// Raw M-dimensional presence vector.
    #[default]
    Bitmask,
    /// One-hot over the 2^M - 1 valid patterns.
    OneHot,
}

/// When a modality-specific static expert contributes on its tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StaticGateRule {
    /// Active when its modality is present.
    #[default]
    Present,
    /// Active when its modality is absent (placeholder tokens).
    Absent,
    /// Always active on its modality's tokens.
    Always,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// 0-based block indices that receive expert residuals.
    pub injection_layers: Vec<usize>,
    pub trunk_mode: TrunkMode,
    /// Overrides the run seed for backbone initialization when set.
    pub init_seed: Option<u64>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_layers: 4,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            injection_layers: vec![2, 3],
            trunk_mode: TrunkMode::Shared,
            init_seed: None,
        }
    }
}

impl BackboneConfig {
    /// Scaled-up layout analogous to the full-size configuration: 12 layers,
    /// experts in the last 6.
    pub fn paper_shaped() -> Self {
        BackboneConfig {
            num_layers: 12,
            d_model: 768,
            d_ff: 3072,
            heads: 12,
            injection_layers: (6..12).collect(),
            trunk_mode: TrunkMode::Shared,
            init_seed: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamolConfig {
    pub num_dynamic_experts: usize,
    pub top_k: usize,
    pub lora_rank: usize,
    /// Router projection width; 0 means d_model / 2.
    pub d_router: usize,
    pub routing_granularity: RoutingGranularity,
    pub pattern_encoding: PatternEncoding,
    pub static_gate_rule: StaticGateRule,
    pub dynamic_enabled: bool,
    pub static_shared_enabled: bool,
    pub static_modality_enabled: bool,
    /// Coefficient for the optional router importance-balance loss; 0 = off.
    pub balance_coeff: f64,
}

impl Default for MamolConfig {
    fn default() -> Self {
        MamolConfig {
            num_dynamic_experts: 2,
            top_k: 1,
            lora_rank: 4,
            d_router: 0,
            routing_granularity: RoutingGranularity::Token,
            pattern_encoding: PatternEncoding::Bitmask,
            static_gate_rule: StaticGateRule::Present,
            dynamic_enabled: true,
            static_shared_enabled: true,
            static_modality_enabled: true,
            balance_coeff: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeRepConfig {
    pub num_experts: usize,
    pub bottleneck: usize,
    /// Weight of the reconstruction loss on complete samples.
    pub recon_coeff: f64,
}

impl Default for MoeRepConfig {
    fn default() -> Self {
        MoeRepConfig { num_experts: 2, bottleneck: 8, recon_coeff: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeAdaConfig {
    pub num_experts: usize,
    pub bottleneck: usize,
    pub top_k: usize,
}

impl Default for MoeAdaConfig {
    fn default() -> Self {
        MoeAdaConfig { num_experts: 2, bottleneck: 8, top_k: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeTaskConfig {
    pub num_experts: usize,
    pub hidden: usize,
    pub top_k: usize,
}

impl Default for MoeTaskConfig {
    fn default() -> Self {
        MoeTaskConfig { num_experts: 3, hidden: 8, top_k: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub substitution: SubstitutionStrategy,
    pub mamol: MamolConfig,
    pub moe_rep: MoeRepConfig,
    pub moe_ada: MoeAdaConfig,
    pub moe_task: MoeTaskConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Mamol,
            backbone: BackboneConfig::default(),
            substitution: SubstitutionStrategy::default(),
            mamol: MamolConfig::default(),
            moe_rep: MoeRepConfig::default(),
            moe_ada: MoeAdaConfig::default(),
            moe_task: MoeTaskConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.num_layers == 0 || b.d_model == 0 || b.d_ff == 0 {
            return Err(Error::Validation("backbone dimensions must be positive".into()));
        }
        if b.heads == 0 || b.d_model % b.heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} must be divisible by heads {}",
                b.d_model, b.heads
            )));
        }
        if let Some(&bad) = b.injection_layers.iter().find(|&&l| l >= b.num_layers) {
            return Err(Error::Validation(format!(
                "injection layer {bad} out of range for {} layers",
                b.num_layers
            )));
        }
        let uses_injection =
            matches!(self.variant, Variant::Mamol | Variant::MoeAda | Variant::MoeTask);
        if uses_injection && b.injection_layers.is_empty() {
            return Err(Error::Validation(
                "injection_layers must be nonempty when experts are enabled".into(),
            ));
        }
        if self.variant == Variant::Mamol {
            let m = &self.mamol;
            if m.dynamic_enabled {
                if m.num_dynamic_experts == 0 {
                    return Err(Error::Validation("num_dynamic_experts must be > 0".into()));
                }
                if m.top_k == 0 || m.top_k > m.num_dynamic_experts {
                    return Err(Error::Validation(format!(
                        "top_k {} must be in 1..={}",
                        m.top_k, m.num_dynamic_experts
                    )));
                }
            }
            if m.lora_rank == 0 || m.lora_rank > b.d_model / 2 {
                return Err(Error::Validation(format!(
                    "lora_rank {} must be in 1..={} (d_model/2)",
                    m.lora_rank,
                    b.d_model / 2
                )));
            }
        }
        Ok(())
    }

    pub fn d_router(&self) -> usize {
        if self.mamol.d_router == 0 {
            self.backbone.d_model / 2
        } else {
            self.mamol.d_router
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Weight decay applied as a separate multiplicative shrink.
    #[default]
    Decoupled,
    /// Weight decay added to the gradient before the moment updates.
    Coupled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optional global gradient norm clip.
    pub grad_clip: Option<f64>,
    pub decay_mode: DecayMode,
    /// Batch-shuffle seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            weight_decay: 2e-2,
            warmup_fraction: 0.10,
            epochs: 30,
            batch_size: 32,
            grad_clip: None,
            decay_mode: DecayMode::Decoupled,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Validation(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Validation("batch_size and epochs must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingConfig {
    pub eta: f64,
    pub mode: MissingMode,
    pub subset_split: SubsetSplit,
    pub seed: u64,
}

impl Default for MissingConfig {
    fn default() -> Self {
        MissingConfig { eta: 0.7, mode: MissingMode::Both, subset_split: SubsetSplit::Uniform, seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Manifest { path: String },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(default_synthetic_spec())
    }
}

pub fn default_synthetic_spec() -> SyntheticSpec {
    SyntheticSpec {
        modalities: vec![
            ModalityInfo { name: "hs".into(), tokens: 4, dim: 16 },
            ModalityInfo { name: "sar".into(), tokens: 4, dim: 16 },
        ],
        num_classes: 6,
        num_samples: 3000,
        signal_strength: 1.0,
        correlation: 0.7,
        noise_scale: 0.5,
        seed: 7,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train-side fraction for the stratified split.
    pub split_fraction: f64,
    pub split_seed: u64,
    pub train_missing: MissingConfig,
    pub test_missing: MissingConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::default(),
            split_fraction: 0.8,
            split_seed: 13,
            train_missing: MissingConfig::default(),
            test_missing: MissingConfig { seed: 2, ..MissingConfig::default() },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub missing_rates: Vec<f64>,
    /// (train mode, test mode) pairs evaluated at each missing rate.
    pub protocols: Vec<(MissingMode, MissingMode)>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            missing_rates: vec![0.5, 0.7],
            protocols: vec![
                (MissingMode::OnlyModality(1), MissingMode::OnlyModality(1)),
                (MissingMode::OnlyModality(0), MissingMode::OnlyModality(0)),
                (MissingMode::Both, MissingMode::Both),
            ],
            variants: vec![Variant::BaselineFrozen, Variant::Mamol],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub missing_rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec { missing_rates: vec![0.5, 0.7, 0.9], seeds: vec![0] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralizationSpec {
    pub train_eta: f64,
    pub train_mode: MissingMode,
    pub test_mode: MissingMode,
    pub test_etas: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub emit_svg: bool,
}

impl Default for GeneralizationSpec {
    fn default() -> Self {
        GeneralizationSpec {
            train_eta: 0.7,
            train_mode: MissingMode::Both,
            test_mode: MissingMode::Both,
            test_etas: vec![0.5, 0.7, 0.9],
            variants: vec![Variant::BaselineFrozen, Variant::Mamol],
            seeds: vec![0],
            emit_svg: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub grid: GridSpec,
    pub ablation: AblationSpec,
    pub generalization: GeneralizationSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub seed: u64,
    pub output_dir: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            seed: 0,
            output_dir: "runs/out".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Validation(format!(
                "config_version {} unsupported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if let DataSource::Synthetic(spec) = &self.data.source {
            spec.validate()?;
        }
        if !(0.0..=1.0).contains(&self.data.split_fraction) {
            return Err(Error::Validation("split_fraction must be in [0, 1]".into()));
        }
        for mc in [&self.data.train_missing, &self.data.test_missing] {
            if !(0.0..=1.0).contains(&mc.eta) {
                return Err(Error::Validation(format!("missing eta must be in [0, 1], got {}", mc.eta)));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Loads a config file, applies `--set path=value` overrides, validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut value: serde_json::Value = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Validation(format!("config file not found: {}", p.display())));
                }
                serde_json::from_reader(std::fs::File::open(p)?)?
            }
            None => serde_json::json!({}),
        };
        for set in sets {
            apply_set(&mut value, set)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Validation(format!("config schema error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies one `dotted.path=value` override onto a JSON document. The value
/// is parsed as JSON if possible, falling back to a bare string.
fn apply_set(root: &mut serde_json::Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("--set expects key=value, got '{set}'")))?;
    if path.is_empty() {
        return Err(Error::Validation("--set key must be nonempty".into()));
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(Error::Validation(format!("--set path '{path}' crosses a non-object")));
        }
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    match cursor {
        serde_json::Value::Object(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Validation(format!("--set path '{path}' crosses a non-object"))),
    }
}
