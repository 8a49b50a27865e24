//! Flat run configuration for an erasure job.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ScaleSet};
use crate::objective::LossReduction;

/// Which denoiser parameters receive updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainScope {
    #[default]
    All,
    /// Only the text-conditioning (cross-attention) path.
    Conditioning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErasureConfig {
    pub concept_name: String,
    pub prompt_bank_path: PathBuf,
    pub reference_set_path: PathBuf,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub scales: ScaleSet,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::n_reference_images")]
    pub n_reference_images: usize,

    /// Backend locator, `toy:<seed>` or an external model path.
    #[serde(default = "defaults::backend")]
    pub backend: String,
    /// Reference-image prompt; `{concept}` is replaced by the concept name.
    #[serde(default = "defaults::reference_template")]
    pub reference_template: String,
    /// Minimum classifier score for a generated reference image.
    #[serde(default = "defaults::filter_threshold")]
    pub filter_threshold: f64,
    /// Candidates tried per requested reference image before giving up.
    #[serde(default = "defaults::candidate_factor")]
    pub candidate_factor: usize,
    #[serde(default)]
    pub train_scope: TrainScope,
    #[serde(default)]
    pub reduction: LossReduction,
    #[serde(default = "defaults::fusion_depth")]
    pub fusion_depth: usize,
    #[serde(default = "defaults::fusion_heads")]
    pub fusion_heads: usize,
    #[serde(default = "defaults::fusion_width")]
    pub fusion_width: usize,
    #[serde(default = "defaults::fusion_ffn_ratio")]
    pub fusion_ffn_ratio: f64,
    #[serde(default = "defaults::fusion_zero_init")]
    pub fusion_zero_init: bool,
}

mod defaults {
    pub fn tau() -> f64 {
        0.7
    }
    pub fn gamma() -> f64 {
        1.0
    }
    pub fn lambda() -> f64 {
        0.5
    }
    pub fn noise_std() -> f64 {
        0.01
    }
    pub fn learning_rate() -> f64 {
        1e-5
    }
    pub fn batch_size() -> usize {
        1
    }
    pub fn n_reference_images() -> usize {
        200
    }
    pub fn backend() -> String {
        "toy:0".into()
    }
    pub fn reference_template() -> String {
        "a photo of {concept}".into()
    }
    pub fn filter_threshold() -> f64 {
        0.6
    }
    pub fn candidate_factor() -> usize {
        4
    }
    pub fn fusion_depth() -> usize {
        2
    }
    pub fn fusion_heads() -> usize {
        4
    }
    pub fn fusion_width() -> usize {
        32
    }
    pub fn fusion_ffn_ratio() -> f64 {
        4.0
    }
    pub fn fusion_zero_init() -> bool {
        true
    }
}

impl ErasureConfig {
    /// Defaults for everything optional.
    pub fn new(
        concept_name: impl Into<String>,
        prompt_bank_path: impl Into<PathBuf>,
        reference_set_path: impl Into<PathBuf>,
        steps: usize,
    ) -> Self {
        Self {
            concept_name: concept_name.into(),
            prompt_bank_path: prompt_bank_path.into(),
            reference_set_path: reference_set_path.into(),
            tau: defaults::tau(),
            gamma: defaults::gamma(),
            lambda: defaults::lambda(),
            noise_std: defaults::noise_std(),
            scales: ScaleSet::default(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            steps,
            seed: 0,
            n_reference_images: defaults::n_reference_images(),
            backend: defaults::backend(),
            reference_template: defaults::reference_template(),
            filter_threshold: defaults::filter_threshold(),
            candidate_factor: defaults::candidate_factor(),
            train_scope: TrainScope::default(),
            reduction: LossReduction::default(),
            fusion_depth: defaults::fusion_depth(),
            fusion_heads: defaults::fusion_heads(),
            fusion_width: defaults::fusion_width(),
            fusion_ffn_ratio: defaults::fusion_ffn_ratio(),
            fusion_zero_init: defaults::fusion_zero_init(),
        }
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.prompt_bank_path = resolve(base, &config.prompt_bank_path);
        config.reference_set_path = resolve(base, &config.reference_set_path);
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.concept_name.trim().is_empty() {
            return Err(Error::config("concept_name is empty"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !self.gamma.is_finite() {
            return Err(Error::config("gamma must be finite"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config(format!(
                "noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.filter_threshold) {
            return Err(Error::config("filter_threshold must lie in [0, 1]"));
        }
        if self.candidate_factor == 0 {
            return Err(Error::config("candidate_factor must be at least 1"));
        }
        if !self.reference_template.contains("{concept}") {
            return Err(Error::config(
                "reference_template must contain the {concept} placeholder",
            ));
        }
        self.fusion().validate()
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            depth: self.fusion_depth,
            heads: self.fusion_heads,
            ffn_ratio: self.fusion_ffn_ratio,
            width: self.fusion_width,
            zero_init_output: self.fusion_zero_init,
        }
    }

    pub fn reference_prompt(&self) -> String {
        self.reference_template
            .replace("{concept}", &self.concept_name)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
concept_name = "square"
prompt_bank_path = "bank.txt"
reference_set_path = "refs"
steps = 500
"#;

    #[test]
    fn defaults_fill_optional_fields() {
        let c = ErasureConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(
            (c.tau, c.gamma, c.lambda, c.noise_std),
            (0.7, 1.0, 0.5, 0.01)
        );
        assert_eq!((c.learning_rate, c.batch_size), (1e-5, 1));
        assert_eq!(c.n_reference_images, 200);
        assert_eq!(c.scales.scales(), &[1.0, 0.75, 0.5]);
        assert_eq!(c.filter_threshold, 0.6);
        assert_eq!(c, ErasureConfig::new("square", "bank.txt", "refs", 500));
    }

    #[test]
    fn zero_tau_is_rejected() {
        let err = ErasureConfig::from_toml(&format!("{MINIMAL}tau = 0.0\n")).unwrap_err();
        assert!(err.is_config() && err.to_string().contains("tau"));
    }

    #[test]
    fn missing_steps_and_unknown_keys_are_rejected() {
        let no_steps = MINIMAL.replace("steps = 500", "");
        assert!(ErasureConfig::from_toml(&no_steps).unwrap_err().is_config());
        let typo = format!("{MINIMAL}lamda = 0.3\n");
        assert!(ErasureConfig::from_toml(&typo).unwrap_err().is_config());
    }

    #[test]
    fn bad_scales_are_rejected() {
        let text = format!("{MINIMAL}scales = [0.5, 1.0]\n");
        assert!(ErasureConfig::from_toml(&text).unwrap_err().is_config());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let mut c = ErasureConfig::new("square", "bank.txt", "refs", 7);
        c.train_scope = TrainScope::Conditioning;
        let back = ErasureConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back.config_hash(), c.config_hash());
        let mut other = c.clone();
        other.seed = 1;
        assert_ne!(other.config_hash(), c.config_hash());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let c = ErasureConfig::load(&path).unwrap();
        assert_eq!(c.prompt_bank_path, dir.path().join("bank.txt"));
        assert_eq!(c.reference_set_path, dir.path().join("refs"));
    }
}
