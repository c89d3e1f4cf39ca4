//! Experiment configuration: one TOML document with every hyperparameter and
//! full defaults, so an empty file is a valid experiment.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, PromptSet, Vocabulary};
use crate::error::{Error, Result};
use crate::lora::{AdapterPolicy, ProjLayer};
use crate::objectives::VtcclConfig;
use crate::synthdata::{transform_chain, SceneParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPrompt {
    /// Domain label; names the adapter set in checkpoints and policies.
    pub label: String,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub source: String,
    pub targets: Vec<TargetPrompt>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            source: "an image taken during the day".into(),
            targets: vec![
                TargetPrompt {
                    label: "night".into(),
                    prompt: "an image taken on a night".into(),
                },
                TargetPrompt {
                    label: "rain".into(),
                    prompt: "an image taken on a rainy day".into(),
                },
            ],
        }
    }
}

impl PromptConfig {
    pub fn labels(&self) -> Vec<String> {
        self.targets.iter().map(|t| t.label.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `rank`, giving unit scale.
    pub alpha: Option<f64>,
    pub layers: Vec<ProjLayer>,
    /// One adapter set for all targets instead of one per target.
    pub shared: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: None,
            layers: ProjLayer::ALL.to_vec(),
            shared: false,
        }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    /// Crops per image, `N`.
    pub crops: usize,
    /// Draw each crop of a Stage-1 batch item from a different scene.
    pub distinct_scenes: bool,
    pub scene: SceneParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            crop_height: 16,
            crop_width: 16,
            crops: 4,
            distinct_scenes: false,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch: 4,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub adapter_policy: AdapterPolicy,
    pub depth_min: f64,
    pub depth_max: f64,
    pub optim: OptimConfig,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch: 4,
            seed: 0,
            adapter_policy: AdapterPolicy::MergeMean,
            depth_min: 1.0,
            depth_max: 80.0,
            optim: OptimConfig {
                lr: 1e-2,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub domains: Vec<String>,
    pub cap: f64,
    /// Held-out scenes per domain; the same scenes are rendered in every domain.
    pub heldout: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            domains: vec!["day-clear".into(), "night".into(), "rain".into()],
            cap: 80.0,
            heldout: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub ranks: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            ranks: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub prompts: PromptConfig,
    pub lora: LoraConfig,
    pub loss: VtcclConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub depth: DepthConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

fn check_optim(section: &str, o: &OptimConfig) -> Result<()> {
    let field = |f: &str| format!("{section}.optim.{f}");
    if !(o.lr > 0.0 && o.lr.is_finite()) {
        return Err(Error::config(field("lr"), "must be positive"));
    }
    for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::config(field(name), "must lie in [0, 1)"));
        }
    }
    if !(o.eps > 0.0) {
        return Err(Error::config(field("eps"), "must be positive"));
    }
    if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
        return Err(Error::config(field("weight_decay"), "must be nonnegative"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map_or_else(|| "config".to_string(), str::to_string);
            Error::config(field, e.to_string().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder.seed = seed;
        self.pretrain.seed = seed;
        self.depth.seed = seed;
        self.eval.seed = seed;
        self.gradcheck.seed = seed;
        self
    }

    pub fn prompt_set(&self) -> Result<PromptSet> {
        let vocab = Vocabulary::new(&self.encoder.vocab)?;
        PromptSet::new(
            self.prompts.source.clone(),
            self.prompts.targets.iter().map(|t| t.prompt.clone()).collect(),
            &vocab,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        if enc.dim == 0 || enc.blocks == 0 || enc.patch == 0 || enc.channels == 0 {
            return Err(Error::config("encoder", "dim, blocks, patch and channels must be positive"));
        }
        if enc.channels != self.data.scene.channels {
            return Err(Error::config("data.scene.channels", "must equal encoder.channels"));
        }

        self.prompt_set()?;
        let mut labels = HashSet::new();
        for t in &self.prompts.targets {
            if t.label.is_empty() || t.label.contains(char::is_whitespace) {
                return Err(Error::config("prompts.targets.label", format!("label '{}' must be one word", t.label)));
            }
            if !labels.insert(&t.label) {
                return Err(Error::config("prompts.targets.label", format!("duplicate label '{}'", t.label)));
            }
        }
        self.loss.validate(self.prompts.targets.len())?;

        let lora = &self.lora;
        if lora.rank == 0 || lora.rank > enc.dim {
            return Err(Error::config("lora.rank", format!("must lie in 1..={}", enc.dim)));
        }
        if !(lora.alpha() > 0.0 && lora.alpha().is_finite()) {
            return Err(Error::config("lora.alpha", "must be positive"));
        }
        if lora.layers.is_empty() {
            return Err(Error::config("lora.layers", "at least one layer is required"));
        }
        if lora.layers.iter().collect::<HashSet<_>>().len() != lora.layers.len() {
            return Err(Error::config("lora.layers", "duplicate layer"));
        }

        let data = &self.data;
        data.scene.validate()?;
        if data.crops == 0 {
            return Err(Error::config("data.crops", "must be at least 1"));
        }
        let (ch, cw) = (data.crop_height, data.crop_width);
        if ch == 0 || cw == 0 || ch % enc.patch != 0 || cw % enc.patch != 0 {
            return Err(Error::config("data.crop_height", "crop extents must be positive multiples of encoder.patch"));
        }
        if ch > data.scene.height || cw > data.scene.width {
            return Err(Error::config("data.crop_height", "crop exceeds the image"));
        }
        if data.scene.height % ch != 0 || data.scene.width % cw != 0 {
            return Err(Error::config("data.crop_height", "crops must tile the image for evaluation"));
        }

        for (name, optim, batch) in [
            ("pretrain", &self.pretrain.optim, self.pretrain.batch),
            ("depth", &self.depth.optim, self.depth.batch),
        ] {
            check_optim(name, optim)?;
            if batch == 0 {
                return Err(Error::config(format!("{name}.batch"), "must be at least 1"));
            }
        }
        let depth = &self.depth;
        if !(depth.depth_min > 0.0 && depth.depth_min < depth.depth_max && depth.depth_max.is_finite()) {
            return Err(Error::config("depth.depth_min", "need 0 < depth_min < depth_max"));
        }
        if let AdapterPolicy::Single(name) = &depth.adapter_policy {
            let known = self.prompts.targets.iter().any(|t| &t.label == name)
                || name.parse::<usize>().is_ok_and(|i| i < self.prompts.targets.len());
            if !known {
                return Err(Error::config("depth.adapter_policy", format!("no target labelled '{name}'")));
            }
        }

        let eval = &self.eval;
        if eval.domains.is_empty() {
            return Err(Error::config("eval.domains", "at least one domain is required"));
        }
        let mut seen = HashSet::new();
        for d in &eval.domains {
            transform_chain(d)?;
            if !seen.insert(d) {
                return Err(Error::config("eval.domains", format!("duplicate domain '{d}'")));
            }
        }
        if !(eval.cap > 0.0) {
            return Err(Error::config("eval.cap", "must be positive"));
        }
        if eval.heldout == 0 {
            return Err(Error::config("eval.heldout", "must be at least 1"));
        }

        if self.ablate.seeds.is_empty() {
            return Err(Error::config("ablate.seeds", "at least one seed is required"));
        }
        if let Some(r) = self.ablate.ranks.iter().find(|&&r| r == 0 || r > enc.dim) {
            return Err(Error::config("ablate.ranks", format!("rank {r} outside 1..={}", enc.dim)));
        }
        if !(self.gradcheck.step > 0.0) || !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::config("gradcheck", "step and tolerance must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(err: Error) -> String {
        match err {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_is_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.lora.alpha(), 8.0);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.tau = 0.1 + 0.2;
        cfg.lora.layers = vec![ProjLayer::V, ProjLayer::Q];
        cfg.depth.adapter_policy = AdapterPolicy::Single("rain".into());
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn lambda_length_names_field() {
        let err = ExperimentConfig::from_toml("[loss]\nlambdas = [1.0, 1.0]\n").unwrap_err();
        assert_eq!(field_of(err), "loss.lambdas");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_toml("[lora]\nrnak = 4\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn bad_layer_and_policy() {
        assert!(ExperimentConfig::from_toml("[lora]\nlayers = [\"o\"]\n").is_err());
        let err = ExperimentConfig::from_toml("[depth]\nadapter_policy = \"single:fog\"\n").unwrap_err();
        assert_eq!(field_of(err), "depth.adapter_policy");
    }

    #[test]
    fn unknown_prompt_word_is_tokenize_error() {
        let text = "[prompts]\nsource = \"an image taken during the day\"\n\
                    [[prompts.targets]]\nlabel = \"fog\"\nprompt = \"an image taken on a foggy day\"\n\
                    [loss]\nlambdas = [1.0, 1.0]\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Tokenize { .. })));
    }

    #[test]
    fn unknown_eval_domain() {
        let err = ExperimentConfig::from_toml("[eval]\ndomains = [\"fog\"]\n").unwrap_err();
        assert_eq!(field_of(err), "eval.domains");
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let cfg = ExperimentConfig::default().with_seed(7);
        assert_eq!(
            [cfg.encoder.seed, cfg.pretrain.seed, cfg.depth.seed, cfg.eval.seed, cfg.gradcheck.seed],
            [7; 5]
        );
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }
}
