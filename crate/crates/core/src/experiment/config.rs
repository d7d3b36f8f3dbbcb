use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::{DatasetSpec, OptimizerConfig};
use crate::petl::{PetlSpec, Sites};

pub const SCHEMA_VERSION: u32 = 1;

/// Model architecture: a named preset with optional field overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `swin-micro` (default) or `swin-b`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Defaults to the dataset class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_ratio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ln_eps: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self, default_classes: usize) -> Result<ModelConfig> {
        let classes = self.num_classes.unwrap_or(default_classes);
        let mut cfg = ModelConfig::preset(self.preset.as_deref().unwrap_or("swin-micro"), classes)?;
        if let Some(v) = self.input {
            cfg.input = v;
        }
        if let Some(v) = self.patch {
            cfg.patch = v;
        }
        if let Some(v) = &self.dims {
            cfg.dims = v.clone();
        }
        if let Some(v) = &self.blocks {
            cfg.blocks = v.clone();
        }
        if let Some(v) = &self.heads {
            cfg.heads = v.clone();
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
        if let Some(v) = self.ffn_ratio {
            cfg.ffn_ratio = v;
        }
        if let Some(v) = self.ln_eps {
            cfg.ln_eps = v;
        }
        Ok(cfg)
    }
}

/// Synthetic data settings; clip extents follow the model input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_classes: usize,
    pub per_class: usize,
    pub eval_per_class: usize,
    pub noise: f64,
    /// Defaults to the experiment seed, shared by every run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            n_classes: d.n_classes,
            per_class: d.per_class,
            eval_per_class: d.eval_per_class,
            noise: d.noise,
            seed: None,
        }
    }
}

/// Values swept in a cross product. A missing axis keeps the base value;
/// a present axis must be nonempty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_bottle: Option<Vec<usize>>,
    /// Sets both `s_adapter` and `s_patt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<Sites>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub checkpoints: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            checkpoints: true,
        }
    }
}

/// A whole experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub petl: PetlSpec,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub ablation: AblationAxes,
    #[serde(default)]
    pub output: OutputSection,
}

/// One point of the ablation cross product, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub index: usize,
    pub id: String,
    pub model: ModelConfig,
    pub spec: PetlSpec,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub frames: usize,
}

impl RunPlan {
    fn describe(&self) -> String {
        format!(
            "{} (d_bottle={}, s={}, sites={}, frames={})",
            self.id, self.spec.d_bottle, self.spec.s_patt, self.spec.patt_sites, self.frames
        )
    }
}

/// How strictly run plans are checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanCheck {
    /// Models will be allocated and trained.
    Train,
    /// Only shapes are counted.
    Count,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.display().to_string(),
            message: e.to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                path: origin.display().to_string(),
                message: format!(
                    "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                    cfg.schema_version
                ),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Base model with the dataset class count as default head width.
    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(self.dataset.n_classes)
    }

    /// Number of runs in the cross product.
    pub fn run_count(&self) -> Result<usize> {
        Ok(self.axes()?.iter().product())
    }

    fn axes(&self) -> Result<[usize; 4]> {
        let a = &self.ablation;
        let len = |name: &str, n: Option<usize>| -> Result<usize> {
            match n {
                Some(0) => Err(Error::config(format!("ablation axis `{name}` is empty"))),
                Some(n) => Ok(n),
                None => Ok(1),
            }
        };
        Ok([
            len("d_bottle", a.d_bottle.as_ref().map(Vec::len))?,
            len("s", a.s.as_ref().map(Vec::len))?,
            len("sites", a.sites.as_ref().map(Vec::len))?,
            len("frames", a.frames.as_ref().map(Vec::len))?,
        ])
    }

    /// Expands the cross product in the order d_bottle, s, sites, frames
    /// (frames fastest). Run `i` uses seed `seed + i`.
    pub fn plan(&self, check: PlanCheck) -> Result<Vec<RunPlan>> {
        let base_model = self.model_config()?;
        base_model.validate()?;
        self.optimizer.validate()?;
        if self.dataset.n_classes > base_model.num_classes {
            return Err(Error::config(format!(
                "dataset has {} classes but the model head has {}",
                self.dataset.n_classes, base_model.num_classes
            )));
        }
        let axes = self.axes()?;
        let a = &self.ablation;
        let d_values = a.d_bottle.clone().unwrap_or_else(|| vec![self.petl.d_bottle]);
        let s_values = a.s.clone().unwrap_or_else(|| vec![self.petl.s_patt]);
        let site_values = a.sites.clone().unwrap_or_else(|| vec![self.petl.patt_sites]);
        let frame_values = a.frames.clone().unwrap_or_else(|| vec![base_model.input[0]]);
        let scaled = a.s.is_some();

        let mut plans = Vec::with_capacity(axes.iter().product());
        for &d in &d_values {
            for &s in &s_values {
                for &sites in &site_values {
                    for &frames in &frame_values {
                        let index = plans.len();
                        let mut model = base_model.clone();
                        model.input[0] = frames;
                        let mut spec = self.petl.clone();
                        spec.d_bottle = d;
                        if scaled {
                            spec.s_adapter = s;
                            spec.s_patt = s;
                        }
                        spec.patt_sites = sites;
                        let dataset = DatasetSpec {
                            n_classes: self.dataset.n_classes,
                            per_class: self.dataset.per_class,
                            eval_per_class: self.dataset.eval_per_class,
                            clip: model.input,
                            seed: self.dataset.seed.unwrap_or(self.seed),
                            noise: self.dataset.noise,
                        };
                        let plan = RunPlan {
                            index,
                            id: format!("run_{index:03}"),
                            model,
                            spec,
                            dataset,
                            seed: self.seed.wrapping_add(index as u64),
                            frames,
                        };
                        let checked = plan.model.validate().and_then(|_| match check {
                            PlanCheck::Train => plan.spec.validate(&plan.model),
                            PlanCheck::Count => plan.spec.validate_counting(&plan.model),
                        });
                        if let Err(e) = checked {
                            return Err(Error::config(format!("invalid ablation point {}: {e}", plan.describe())));
                        }
                        plans.push(plan);
                    }
                }
            }
        }
        Ok(plans)
    }
}

/// Output directory: explicit flag, then `PETL_LAB_OUT`, then the config,
/// then `petl-lab-out`.
pub fn resolve_out_dir(flag: Option<&Path>, env: Option<&str>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(e) = env.filter(|e| !e.is_empty()) {
        return PathBuf::from(e);
    }
    config.map_or_else(|| PathBuf::from("petl-lab-out"), Path::to_path_buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\n";

    #[test]
    fn minimal_config_has_one_run() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.run_count().unwrap(), 1);
        let plans = cfg.plan(PlanCheck::Train).unwrap();
        assert_eq!(plans[0].model, ModelConfig::swin_micro(4));
        assert_eq!(plans[0].id, "run_000");
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let e = ExperimentConfig::parse("schema_version = 1\n[model]\npreset = \"swin-micro\"\ndepth = 3\n", Path::new("c.toml"))
            .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("depth") && msg.contains("line 4"), "{msg}");
        assert!(ExperimentConfig::parse("schema_version = 2\n", Path::new("c.toml")).is_err());
        assert!(ExperimentConfig::parse("seed = 1\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn out_dir_priority() {
        let flag = Path::new("flag");
        let conf = Path::new("conf");
        assert_eq!(resolve_out_dir(Some(flag), Some("env"), Some(conf)), flag);
        assert_eq!(resolve_out_dir(None, Some("env"), Some(conf)), Path::new("env"));
        assert_eq!(resolve_out_dir(None, Some(""), Some(conf)), conf);
        assert_eq!(resolve_out_dir(None, None, None), Path::new("petl-lab-out"));
    }
}
