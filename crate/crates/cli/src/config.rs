//! Run configuration: one JSON document, strict about unknown keys, with
//! defaults for every field.

use std::path::{Path, PathBuf};

use remem::data::ShapesSpec;
use remem::distill::{EvalProtocol, KdConfig, StudentConfig, StudentOptim};
use remem::finetune::{FinetuneConfig, PretrainConfig};
use remem::infometer::MiConfig;
use remem::nn::{LoraConfig, ReMemConfig, VitConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub pretrain: PretrainSection,
    pub vit: VitConfig,
    pub remem: ReMemConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub distill: DistillConfig,
    pub mi: MiConfig,
    pub expertness: ExpertnessConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            pretrain: PretrainSection::default(),
            vit: VitConfig {
                n_classes: 10,
                ..VitConfig::default()
            },
            remem: ReMemConfig::neutral(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            distill: DistillConfig::default(),
            mi: MiConfig::default(),
            expertness: ExpertnessConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedural shapes; `train` is the training split, the test and probe
    /// splits are fresh draws from the same generator.
    Shapes,
    /// A dataset file split into train and test; the test split doubles as
    /// the probe set.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub train: ShapesSpec,
    pub test_samples_per_class: usize,
    /// Images the information probes run on.
    pub probe_samples_per_class: usize,
    /// Pixel noise of the probe images.
    pub probe_noise: f64,
    pub train_frac: f64,
    pub test_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Shapes,
            path: None,
            train: ShapesSpec::memorization(0),
            test_samples_per_class: 50,
            probe_samples_per_class: 100,
            probe_noise: 0.1,
            train_frac: 0.8,
            test_frac: 0.2,
        }
    }
}

/// Optional upstream training that gives the teacher general features
/// before it is fine-tuned on the target task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub enabled: bool,
    pub data: ShapesSpec,
    pub optim: PretrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            enabled: true,
            data: ShapesSpec {
                n_classes: ShapesSpec::vocabulary(),
                image_size: 16,
                samples_per_class: 40,
                noise: 0.1,
                jitter: 0.2,
                ..ShapesSpec::default()
            },
            optim: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// SAM radius; 0 trains with plain SGD.
    pub sam_rho: f64,
    pub batch_size: usize,
    pub lora: Option<LoraConfig>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            sam_rho: 0.0,
            batch_size: 32,
            lora: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    /// Extra snapshots kept during fine-tuning.
    pub checkpoint_steps: Vec<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 600,
            warmup_steps: 30,
            checkpoint_steps: vec![60],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub kd: KdConfig,
    pub student: StudentConfig,
    pub optim: StudentOptim,
    /// Loads the teacher instead of training one.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Queries the teacher with the run's reweighting and pruning; when
    /// false the teacher runs as an unmodified transformer.
    pub teacher_remem: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            kd: KdConfig {
                steps: 600,
                ..KdConfig::default()
            },
            student: StudentConfig {
                n_classes: 10,
                ..StudentConfig::default()
            },
            optim: StudentOptim::default(),
            teacher_checkpoint: None,
            teacher_remem: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSplit {
    Train,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertnessConfig {
    /// Number of co-clusters; defaults to the class count.
    pub k: Option<usize>,
    /// Images the activation graphs are built from.
    pub split: ProbeSplit,
    /// Layers scored by `criticality`; all layers when empty.
    pub criticality_layers: Vec<usize>,
}

impl Default for ExpertnessConfig {
    fn default() -> Self {
        ExpertnessConfig {
            k: None,
            split: ProbeSplit::Train,
            criticality_layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub grid: EvalProtocol,
    pub rho_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            grid: EvalProtocol {
                checkpoint_steps: vec![300, 600],
                ..EvalProtocol::default()
            },
            rho_grid: vec![0.5, 0.05, 0.005],
            alpha_grid: vec![0.8, 0.9],
        }
    }
}

impl RunConfig {
    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.schedule.steps,
            batch_size: self.optimizer.batch_size,
            lr: self.optimizer.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            warmup_steps: self.schedule.warmup_steps,
            sam_rho: self.optimizer.sam_rho,
            checkpoint_steps: self.schedule.checkpoint_steps.clone(),
            lora: self.optimizer.lora,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.vit.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.remem.validate(self.vit.n_layers).map_err(|e| CliError::Config(e.to_string()))?;
        self.distill.kd.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.protocol.grid.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dataset.source == DataSource::File && self.dataset.path.is_none() {
            return bad("dataset.path is required when dataset.source is \"file\"".into());
        }
        if self.dataset.source == DataSource::Shapes {
            let t = &self.dataset.train;
            if t.n_classes != self.vit.n_classes || t.image_size != self.vit.image_size || t.channels != self.vit.channels {
                return bad(format!(
                    "dataset.train ({} classes, {} px, {} channels) does not match vit ({} classes, {} px, {} channels)",
                    t.n_classes, t.image_size, t.channels, self.vit.n_classes, self.vit.image_size, self.vit.channels
                ));
            }
        }
        if self.pretrain.enabled
            && (self.pretrain.data.image_size != self.vit.image_size || self.pretrain.data.channels != self.vit.channels)
        {
            return bad("pretrain.data must match the vit image size and channels".into());
        }
        let pixels = self.vit.channels * self.vit.image_size * self.vit.image_size;
        if self.distill.student.input_dim != pixels || self.distill.student.n_classes != self.vit.n_classes {
            return bad(format!(
                "distill.student expects {} inputs and {} classes, data has {pixels} and {}",
                self.distill.student.input_dim, self.distill.student.n_classes, self.vit.n_classes
            ));
        }
        if let Some(&s) = self.schedule.checkpoint_steps.iter().find(|&&s| s > self.schedule.steps) {
            return bad(format!("schedule.checkpoint_steps has {s} beyond {} steps", self.schedule.steps));
        }
        if self.protocol.rho_grid.iter().chain(&self.protocol.alpha_grid).any(|v| !v.is_finite() || *v < 0.0) {
            return bad("protocol grids must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Layers the file at `path` and then `key=value` overrides (dotted keys)
/// over the defaults, and parses the result. Override values are JSON when
/// they parse as JSON and plain strings otherwise.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let mut file: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        // A run.json echo replays the config it recorded.
        if let Some(inner) = file.get_mut("resolved_config") {
            file = inner.take();
        }
        if !file.is_object() {
            return Err(CliError::Config(format!("{}: top level must be an object", p.display())));
        }
        merge(&mut doc, file);
    }
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut patch = Value::Object(Default::default());
        set_path(&mut patch, key, value)?;
        merge(&mut doc, patch);
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty segment in key {key:?}")));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Config(format!("{} is not a section", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}
