use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Arch, MlpArch, TabularArch};
use crate::tasks::{build_stream, hash_json, StreamConfig, TaskStream};
use crate::training::{MethodKind, MethodSpec, OptimConfig, ProbeConfig};

pub const SCHEMA_VERSION: u32 = 1;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum ModelConfig {
    Mlp {
        embed_dim: usize,
        hidden_dim: usize,
        #[serde(default = "one_layer")]
        layers: usize,
        #[serde(default = "unit")]
        init_scale: f64,
    },
    Tabular {
        buckets: usize,
        #[serde(default = "unit")]
        init_scale: f64,
    },
}

fn one_layer() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp { embed_dim: 8, hidden_dim: 128, layers: 1, init_scale: 1.0 }
    }
}

impl ModelConfig {
    /// Architecture sized to the stream's vocabulary and token budgets.
    pub fn arch(&self, stream: &TaskStream) -> Arch {
        let v = &stream.alphabet.vocab;
        let t = &stream.tasks[0];
        match *self {
            ModelConfig::Mlp { embed_dim, hidden_dim, layers, .. } => Arch::Mlp(MlpArch {
                vocab_size: v.size,
                embed_dim,
                hidden_dim,
                layers,
                max_prompt: t.max_prompt_tokens,
                max_response: t.max_response_tokens,
                eos: Some(v.eos),
                pad: v.pad,
            }),
            ModelConfig::Tabular { buckets, .. } => Arch::Tabular(TabularArch {
                vocab_size: v.size,
                buckets,
                max_prompt: t.max_prompt_tokens,
                max_response: t.max_response_tokens,
                eos: Some(v.eos),
            }),
        }
    }

    pub fn init_scale(&self) -> f64 {
        match *self {
            ModelConfig::Mlp { init_scale, .. } | ModelConfig::Tabular { init_scale, .. } => init_scale,
        }
    }
}

/// What a continual run records beyond the accuracy matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Windowed KL/forgetting probe; off when absent.
    pub kl_probe: Option<ProbeConfig>,
    pub save_checkpoints: bool,
    /// Store the whole rollout pool (kept and dropped) in buffer snapshots.
    pub save_pools: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { kl_probe: None, save_checkpoints: true, save_pools: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub rho: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { rho: 0.10 }
    }
}

/// Tabular-backend numerical checks run by `diag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub seeds: Vec<u64>,
    /// Random pools for the loss-bound identity.
    pub pools: usize,
    pub etas: Vec<f64>,
    pub vocab: usize,
    pub buckets: usize,
    pub max_response: usize,
    pub prompts: usize,
    /// Fraction of each pool kept in the replay buffer.
    pub keep_fraction: f64,
    /// Logit scale of the random policies.
    pub init_scale: f64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            pools: 10,
            etas: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            vocab: 4,
            buckets: 5,
            max_response: 2,
            prompts: 48,
            keep_fraction: 0.25,
            init_scale: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
    #[serde(default)]
    pub diag: DiagConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_workers() -> usize {
    1
}

pub fn default_rhos() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.10]
}

impl ExperimentConfig {
    pub fn new(name: &str, stream: StreamConfig, methods: Vec<MethodSpec>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            seeds: default_seeds(),
            workers: 1,
            output_dir: None,
            stream,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            methods,
            rhos: default_rhos(),
            diagnostics: DiagnosticsConfig::default(),
            ablate: AblateConfig::default(),
            diag: DiagConfig::default(),
        }
    }

    /// The calibrated eight-task stream with the main method grid.
    pub fn main_grid() -> Self {
        let mut c = Self::new(
            "main",
            StreamConfig::default(),
            vec![
                MethodSpec::seq_sft(),
                MethodSpec::vanilla(0.01),
                MethodSpec::opr_ru(0.01),
                MethodSpec::opr_sc(0.01),
                MethodSpec::sdft(1.0),
            ],
        );
        c.seeds = vec![0, 1, 2];
        c
    }

    /// Two tasks, small datasets: a smoke configuration.
    pub fn toy() -> Self {
        let mut c = Self::new("toy", StreamConfig::toy(), vec![MethodSpec::seq_sft()]);
        c.optim.epochs = vec![3, 3];
        c.model = ModelConfig::Mlp { embed_dim: 8, hidden_dim: 32, layers: 1, init_scale: 1.0 };
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Parsed config plus the verbatim text for the run-directory snapshot.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn stream(&self) -> Result<TaskStream> {
        build_stream(&self.stream)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(config_err(format!("name {:?} must be non-empty and use [A-Za-z0-9-_.]", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        let stream = self.stream().map_err(|e| config_err(format!("stream: {e}")))?;
        self.optim.validate(stream.len()).map_err(|e| config_err(format!("optim: {e}")))?;
        let arch = self.model.arch(&stream);
        arch.validate().map_err(|e| config_err(format!("model: {e}")))?;
        if !(self.model.init_scale() > 0.0) {
            return Err(config_err("model.init_scale must be positive"));
        }
        if self.rhos.is_empty() {
            return Err(config_err("rhos must list at least one budget"));
        }
        if let Some(r) = self.rhos.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(config_err(format!("rho {r} outside (0, 1]")));
        }
        if !(self.ablate.rho > 0.0 && self.ablate.rho <= 1.0) {
            return Err(config_err("ablate.rho outside (0, 1]"));
        }
        for m in &self.methods {
            m.validate().map_err(|e| config_err(format!("method {}: {e}", m.name.name())))?;
        }
        if let Some(p) = &self.diagnostics.kl_probe {
            if p.window == 0 || p.prompts_per_task == 0 || p.eval_per_task == 0 || p.mc_samples == 0 {
                return Err(config_err("kl_probe fields must be positive"));
            }
        }
        let d = &self.diag;
        if d.seeds.is_empty() || d.pools == 0 || d.etas.is_empty() || d.prompts == 0 {
            return Err(config_err("diag needs seeds, pools, etas and prompts"));
        }
        if !(2..=64).contains(&d.vocab) || d.max_response == 0 || d.buckets == 0 {
            return Err(config_err("diag policy shape out of range"));
        }
        if !(d.keep_fraction > 0.0 && d.keep_fraction <= 1.0) {
            return Err(config_err("diag.keep_fraction outside (0, 1]"));
        }
        Ok(())
    }

    /// Replay methods of the config, one copy per budget in `rhos`.
    pub fn sweep_methods(&self) -> Vec<MethodSpec> {
        let mut out = Vec::new();
        for m in self.methods.iter().filter(|m| m.name.uses_replay()) {
            for &rho in &self.rhos {
                out.push(MethodSpec { rho, ..m.clone() });
            }
        }
        out
    }

    pub fn ablate_methods(&self) -> [MethodSpec; 3] {
        let rho = self.ablate.rho;
        let sampler = self
            .methods
            .iter()
            .find(|m| m.name == MethodKind::OprRu)
            .map(|m| m.sampler.clone())
            .unwrap_or_default();
        [
            MethodSpec::vanilla(rho),
            MethodSpec { sampler: sampler.clone(), ..MethodSpec::opr_ru(rho) },
            MethodSpec { sampler, ..MethodSpec::opr_low_score(rho) },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::main_grid();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let c = ExperimentConfig::from_toml(
            r#"
            schema_version = 1
            name = "tiny"
            [[methods]]
            name = "opr-ru"
            rho = 0.05
            "#,
        )
        .unwrap();
        assert_eq!(c.rhos, vec![0.01, 0.02, 0.05, 0.10]);
        assert_eq!(c.stream, StreamConfig::default());
        assert_eq!(c.methods[0].sampler.temperature, 0.1);
    }

    #[test]
    fn validation_errors() {
        let bad = |patch: &str| {
            let text = format!("schema_version = 1\nname = \"x\"\n{patch}");
            ExperimentConfig::from_toml(&text).unwrap_err()
        };
        assert!(matches!(bad("rhos = []"), Error::Config(_)));
        assert!(matches!(bad("seeds = []"), Error::Config(_)));
        assert!(matches!(bad("[optim]\nepochs = [1, 2]"), Error::Config(_)));
        assert!(matches!(bad("[[methods]]\nname = \"seq-sft\"\nrho = 0.1"), Error::Config(_)));
        assert!(bad("bogus = 3").to_string().contains("bogus"));
        let v2 = ExperimentConfig::from_toml("schema_version = 2\nname = \"x\"").unwrap_err();
        assert!(v2.to_string().contains("schema_version"));
    }

    #[test]
    fn sweep_expands_replay_methods_only() {
        let c = ExperimentConfig::main_grid();
        let s = c.sweep_methods();
        assert_eq!(s.len(), 3 * 4);
        assert!(s.iter().all(|m| m.name.uses_replay()));
        assert_eq!(s[0].rho, 0.01);
        assert_eq!(s[3].rho, 0.10);
    }
}
