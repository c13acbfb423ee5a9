//! Experiment configuration: one TOML file with sections per subsystem,
//! plus dotted-key command-line overrides (`trainer.lambda_local=0`).
//! Unknown keys are rejected; every run writes back the resolved config so
//! the snapshot alone reproduces the experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::LeBytes;
use crate::data::{Motif, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gan::{DiscriminatorCfg, GanGMode};
use crate::generator::GeneratorCfg;
use crate::global_align::{GlobalLossCfg, LikelihoodMode, RegularizationMode};
use crate::local_align::{
    AttentionProvider, FeatureExtractor, LayerReduce, LocalLossCfg,
};
use crate::scalar::{fl, Scalar};
use crate::style_encoder::{Readout, StyleEncoderCfg};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub resolution: usize,
    /// Folder of source-domain images; when absent the synthetic corpus
    /// is used.
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub motif: Motif,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            resolution: 64,
            source_dir: None,
            target_dir: None,
            synthetic_count: 8,
            motif: Motif::CirclesToSquares,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StyleSection {
    /// Style code dimension N.
    pub n: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub readout: Readout,
}

impl Default for StyleSection {
    fn default() -> Self {
        StyleSection {
            n: 32,
            patch: 8,
            embed_dim: 128,
            depth: 1,
            token_hidden: 256,
            channel_hidden: 256,
            readout: Readout::MeanPool,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            depth: 3,
            base_channels: 64,
            channel_cap: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub base_channels: usize,
    pub generator_mode: GanGMode,
}

impl Default for GanSection {
    fn default() -> Self {
        GanSection {
            base_channels: 64,
            generator_mode: GanGMode::NonSaturating,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalSection {
    pub likelihood_mode: LikelihoodMode,
    pub regularization_mode: RegularizationMode,
    pub lambda_l: f64,
    pub lambda_r: f64,
}

impl Default for GlobalSection {
    fn default() -> Self {
        GlobalSection {
            likelihood_mode: LikelihoodMode::Nll,
            regularization_mode: RegularizationMode::Standard,
            lambda_l: 1.0,
            lambda_r: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    SaliencyStub,
    PretrainedVit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    RandomStack,
    PretrainedConv16,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSection {
    pub provider: ProviderKind,
    pub provider_weights: Option<PathBuf>,
    pub extractor: ExtractorKind,
    pub extractor_weights: Option<PathBuf>,
    pub extractor_seed: u64,
    pub num_queries: usize,
    pub patch_radius: usize,
    pub layer_reduce: LayerReduce,
    /// Experimental: recompute the attention map from the translated image
    /// instead of reusing the source map.
    pub recompute_attention: bool,
}

impl Default for LocalSection {
    fn default() -> Self {
        LocalSection {
            provider: ProviderKind::SaliencyStub,
            provider_weights: None,
            extractor: ExtractorKind::RandomStack,
            extractor_weights: None,
            extractor_seed: 17,
            num_queries: 256,
            patch_radius: 4,
            layer_reduce: LayerReduce::Mean,
            recompute_attention: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub lr: f64,
    pub batch: usize,
    /// Desk-scale default; full-scale runs use a few hundred.
    pub epochs: u64,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub use_adain_new: bool,
    pub use_global: bool,
    pub use_local: bool,
    /// Emit a sample grid every this many steps.
    pub sample_every: u64,
    pub running_code_momentum: f64,
    pub checkpoint_every_epochs: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            lambda_global: 1.0,
            lambda_local: 10.0,
            lr: 1e-4,
            batch: 1,
            epochs: 20,
            max_steps: None,
            seed: 5,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            use_adain_new: true,
            use_global: true,
            use_local: true,
            sample_every: 100,
            running_code_momentum: 0.99,
            checkpoint_every_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub k: usize,
    pub kid_degree: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { k: 5, kid_degree: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub style: StyleSection,
    pub generator: GeneratorSection,
    pub gan: GanSection,
    pub global: GlobalSection,
    pub local: LocalSection,
    pub trainer: TrainerSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.data.resolution;
        if self.style.patch == 0 || !r.is_multiple_of(self.style.patch) {
            return Err(Error::Config(format!(
                "resolution {r} not divisible by style patch {}",
                self.style.patch
            )));
        }
        if !r.is_multiple_of(1 << self.generator.depth) {
            return Err(Error::Config(format!(
                "resolution {r} not divisible by 2^generator.depth"
            )));
        }
        if !r.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "resolution {r} must be divisible by 8 for the discriminator"
            )));
        }
        if self.style.n == 0 {
            return Err(Error::Config("style.n must be >= 1".into()));
        }
        for (name, v) in [
            ("trainer.lambda_global", self.trainer.lambda_global),
            ("trainer.lambda_local", self.trainer.lambda_local),
            ("global.lambda_l", self.global.lambda_l),
            ("global.lambda_r", self.global.lambda_r),
            ("trainer.lr", self.trainer.lr),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.trainer.batch == 0 {
            return Err(Error::Config("trainer.batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.trainer.running_code_momentum) {
            return Err(Error::Config(
                "trainer.running_code_momentum must be in [0,1)".into(),
            ));
        }
        if self.local.num_queries == 0 {
            return Err(Error::Config("local.num_queries must be >= 1".into()));
        }
        if self.data.source_dir.is_some() != self.data.target_dir.is_some() {
            return Err(Error::Config(
                "data.source_dir and data.target_dir must be set together".into(),
            ));
        }
        Ok(())
    }

    // ---- sub-configuration builders ----

    pub fn style_encoder_cfg(&self) -> StyleEncoderCfg {
        StyleEncoderCfg {
            resolution: self.data.resolution,
            patch: self.style.patch,
            embed_dim: self.style.embed_dim,
            depth: self.style.depth,
            token_hidden: self.style.token_hidden,
            channel_hidden: self.style.channel_hidden,
            n: self.style.n,
            readout: self.style.readout,
        }
    }

    pub fn generator_cfg(&self) -> GeneratorCfg {
        GeneratorCfg {
            resolution: self.data.resolution,
            depth: self.generator.depth,
            base_channels: self.generator.base_channels,
            channel_cap: self.generator.channel_cap,
            n: self.style.n,
            use_adain_new: self.trainer.use_adain_new,
        }
    }

    pub fn discriminator_cfg(&self) -> DiscriminatorCfg {
        DiscriminatorCfg {
            base_channels: self.gan.base_channels,
        }
    }

    pub fn global_loss_cfg<T: Scalar>(&self) -> GlobalLossCfg<T> {
        GlobalLossCfg {
            lambda_l: fl(self.global.lambda_l),
            lambda_r: fl(self.global.lambda_r),
            likelihood: self.global.likelihood_mode,
            regularization: self.global.regularization_mode,
        }
    }

    pub fn local_loss_cfg(&self) -> LocalLossCfg {
        LocalLossCfg {
            num_queries: self.local.num_queries,
            patch_radius: self.local.patch_radius,
            layer_reduce: self.local.layer_reduce,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            resolution: self.data.resolution,
            count: self.data.synthetic_count,
            motif: self.data.motif,
            seed: self.data.seed,
            patch_multiple: self.style.patch,
        }
    }

    pub fn attention_provider<T: Scalar + LeBytes>(&self) -> Result<AttentionProvider<T>> {
        match self.local.provider {
            ProviderKind::SaliencyStub => Ok(AttentionProvider::SaliencyStub),
            ProviderKind::PretrainedVit => {
                let path = self.local.provider_weights.as_ref().ok_or_else(|| {
                    Error::Config(
                        "attention provider `pretrained_vit` needs local.provider_weights".into(),
                    )
                })?;
                AttentionProvider::pretrained_vit(path)
            }
        }
    }

    pub fn feature_extractor<T: Scalar + LeBytes>(&self) -> Result<FeatureExtractor<T>> {
        match self.local.extractor {
            ExtractorKind::RandomStack => {
                Ok(FeatureExtractor::random_stack(self.local.extractor_seed))
            }
            ExtractorKind::PretrainedConv16 => {
                let path = self.local.extractor_weights.as_ref().ok_or_else(|| {
                    Error::Config(
                        "extractor `pretrained_conv16` needs local.extractor_weights".into(),
                    )
                })?;
                FeatureExtractor::conv16(path)
            }
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_dotted(value: &mut toml::Value, path: &str, leaf: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let mut cur = value;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{part}` is not a section")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{path}` does not address a key")))?;
    table.insert(parts[parts.len() - 1].to_string(), leaf);
    Ok(())
}

/// Load a config file (or the built-in defaults when `path` is `None`) and
/// apply `key=value` overrides with dotted keys. Unknown keys anywhere are
/// rejected.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("config {} does not parse: {e}", p.display())))?
        }
        None => toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("internal default config: {e}")))?,
    };
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{ov}` is not of the form key=value"))
        })?;
        set_dotted(&mut value, key.trim(), parse_override_value(raw.trim()))?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.style.n, 32);
        assert_eq!(cfg.trainer.lambda_global, 1.0);
        assert_eq!(cfg.trainer.lambda_local, 10.0);
        assert_eq!(cfg.trainer.lr, 1e-4);
        assert_eq!(cfg.trainer.batch, 1);
        let text = cfg.to_toml_string();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load_config(
            None,
            &[
                "trainer.lambda_local=0".into(),
                "data.resolution=32".into(),
                "local.provider=pretrained_vit".into(),
                "local.provider_weights=/tmp/vit.bin".into(),
                "gan.generator_mode=saturating".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.trainer.lambda_local, 0.0);
        assert_eq!(cfg.data.resolution, 32);
        assert_eq!(cfg.local.provider, ProviderKind::PretrainedVit);
        assert_eq!(cfg.gan.generator_mode, GanGMode::Saturating);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_config(None, &["trainer.no_such_knob=1".into()]).err().unwrap();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = load_config(None, &["nonsense.key=1".into()]).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(load_config(None, &["trainer.lambda_local=-1".into()]).is_err());
        assert!(load_config(None, &["data.resolution=60".into()]).is_err());
        assert!(load_config(None, &["trainer.batch=0".into()]).is_err());
        assert!(load_config(None, &["global.likelihood_mode=bogus".into()]).is_err());
    }

    #[test]
    fn config_file_loading_works() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[trainer]\nepochs = 3\n[data]\nresolution = 32\n").unwrap();
        let cfg = load_config(Some(&path), &["trainer.epochs=5".into()]).unwrap();
        assert_eq!(cfg.trainer.epochs, 5, "override wins over file");
        assert_eq!(cfg.data.resolution, 32);
        assert_eq!(cfg.style.n, 32, "unspecified keys fall back to defaults");
    }
}
