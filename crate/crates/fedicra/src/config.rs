//! Experiment configuration: strict TOML in, fully resolved values out.
//!
//! Every section except `[[sites]]` is optional. Unknown keys are rejected
//! with the offending key and its line.

use std::path::{Path, PathBuf};

use fedicra_core::federation::{Ablation, FederationConfig, Mode, TrainConfig};
use fedicra_core::losses::{GatedCrfConfig, LossWeights};
use fedicra_core::optim::AdamWConfig;
use fedicra_core::segnet::UNetConfig;
use fedicra_core::synthdata::{AnnotationType, DomainShift, SiteSpec, Task};
use fedicra_core::treefilter::AffinityConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Fedicra,
    Fedavg,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Fedicra => Mode::FedIcra,
            ModeName::Fedavg => Mode::FedAvg,
        }
    }
}

impl std::str::FromStr for ModeName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fedicra" => Ok(ModeName::Fedicra),
            "fedavg" => Ok(ModeName::Fedavg),
            _ => Err(format!("unknown mode {:?} (expected fedicra or fedavg)", s)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Nested,
    Blob,
}

impl From<TaskName> for Task {
    fn from(t: TaskName) -> Task {
        match t {
            TaskName::Nested => Task::Nested,
            TaskName::Blob => Task::Blob,
        }
    }
}

const ANNOTATIONS: [(&str, AnnotationType); 5] = [
    ("point", AnnotationType::Point),
    ("scribble1", AnnotationType::Scribble1),
    ("scribble2", AnnotationType::Scribble2),
    ("bbox", AnnotationType::BBox),
    ("block", AnnotationType::Block),
];

pub fn annotation_name(kind: AnnotationType) -> &'static str {
    ANNOTATIONS.iter().find(|(_, k)| *k == kind).map(|(n, _)| *n).expect("all kinds are named")
}

pub fn parse_annotation(name: &str) -> std::result::Result<AnnotationType, String> {
    ANNOTATIONS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, k)| *k)
        .ok_or_else(|| format!("unknown annotation {:?}", name))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationName {
    Point,
    Scribble1,
    Scribble2,
    Bbox,
    Block,
}

impl From<AnnotationName> for AnnotationType {
    fn from(a: AnnotationName) -> AnnotationType {
        match a {
            AnnotationName::Point => AnnotationType::Point,
            AnnotationName::Scribble1 => AnnotationType::Scribble1,
            AnnotationName::Scribble2 => AnnotationType::Scribble2,
            AnnotationName::Bbox => AnnotationType::BBox,
            AnnotationName::Block => AnnotationType::Block,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channel_divisor: usize,
    pub scr_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channel_divisor: 2,
            scr_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr0: f64,
    pub lr_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    pub aa_lr: f64,
    pub aa_full_rounds: usize,
    pub aa_max_epochs: usize,
    pub aa_tol: f64,
    pub augment: bool,
    /// Intermediate evaluation period in rounds; 0 disables it.
    pub eval_every: usize,
    /// Worker threads for site-level parallelism; 1 runs sequentially and
    /// 0 uses every core. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr0: t.lr0,
            lr_power: t.lr_power,
            beta1: t.adamw.beta1,
            beta2: t.adamw.beta2,
            eps: t.adamw.eps,
            weight_decay: t.adamw.weight_decay,
            batch_size: t.batch_size,
            local_epochs: t.local_epochs,
            rounds: t.rounds,
            aa_lr: t.aa_lr,
            aa_full_rounds: t.aa_full_rounds,
            aa_max_epochs: t.aa_max_epochs,
            aa_tol: t.aa_tol,
            augment: t.augment,
            eval_every: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub crf_radius: usize,
    pub sigma_xy: f64,
    pub sigma_rgb: f64,
    pub sigma_a: f64,
    /// Affinity scale of the image tree; `sigma_a` when unset.
    pub sigma_a_low: Option<f64>,
    pub normalize_high: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let c = GatedCrfConfig::default();
        let a = AffinityConfig::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            crf_radius: c.radius,
            sigma_xy: c.sigma_xy,
            sigma_rgb: c.sigma_rgb,
            sigma_a: a.sigma,
            sigma_a_low: a.low_sigma,
            normalize_high: a.normalize_high,
        }
    }
}

/// Unset flags follow the mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub aa: Option<bool>,
    pub scr: Option<bool>,
    pub mstree: Option<bool>,
    pub gcrf: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write a snapshot of the global model after every round.
    pub checkpoints: bool,
    pub predictions: bool,
    pub attention: bool,
    /// Also write the generated dataset below the run directory.
    pub dump_data: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            checkpoints: false,
            predictions: true,
            attention: true,
            dump_data: false,
        }
    }
}

fn default_n_train() -> usize {
    40
}

fn default_n_test() -> usize {
    15
}

fn default_size() -> usize {
    48
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSection {
    pub task: TaskName,
    pub annotation: AnnotationName,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Domain-shift preset; defaults to the site's position.
    #[serde(default)]
    pub preset: Option<usize>,
    #[serde(default)]
    pub gain: Option<f64>,
    #[serde(default)]
    pub bias: Option<f64>,
    #[serde(default)]
    pub blur_sigma: Option<f64>,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub texture_freq: Option<f64>,
    #[serde(default)]
    pub texture_amp: Option<f64>,
    #[serde(default)]
    pub size_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Dataset cache: loaded when it holds a manifest, written otherwise.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub output: OutputSection,
    pub sites: Vec<SiteSection>,
}

fn default_seed() -> u64 {
    1
}

fn default_mode() -> ModeName {
    ModeName::Fedicra
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::parse_unresolved(text)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Strict parse without filling defaults that depend on other fields.
    pub fn parse_unresolved(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::load_unresolved(path)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load_unresolved(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse_unresolved(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    /// Fills every optional value so the serialized form is complete, and
    /// checks cross-field constraints.
    pub fn resolve(&mut self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Config("at least one [[sites]] entry is required".into()));
        }
        let task = self.sites[0].task;
        if self.sites.iter().any(|s| s.task != task) {
            return Err(Error::Config("all sites must share one task".into()));
        }
        let base = Mode::from(self.mode).ablation();
        self.loss.sigma_a_low.get_or_insert(self.loss.sigma_a);
        let a = &mut self.ablation;
        a.aa.get_or_insert(base.aa);
        a.scr.get_or_insert(base.scr);
        a.mstree.get_or_insert(base.mstree);
        a.gcrf.get_or_insert(base.gcrf);
        for (k, s) in self.sites.iter_mut().enumerate() {
            let preset = *s.preset.get_or_insert(k);
            let d = DomainShift::preset(preset);
            s.gain.get_or_insert(d.gain);
            s.bias.get_or_insert(d.bias);
            s.blur_sigma.get_or_insert(d.blur_sigma);
            s.noise_sigma.get_or_insert(d.noise_sigma);
            s.texture_freq.get_or_insert(d.texture_freq);
            s.texture_amp.get_or_insert(d.texture_amp);
            s.size_scale.get_or_insert(d.size_scale);
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for spec in self.site_specs() {
            spec.validate()?;
        }
        self.federation()?;
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        let base = Mode::from(self.mode).ablation();
        let a = &self.ablation;
        Ablation {
            aa: a.aa.unwrap_or(base.aa),
            scr: a.scr.unwrap_or(base.scr),
            mstree: a.mstree.unwrap_or(base.mstree),
            gcrf: a.gcrf.unwrap_or(base.gcrf),
        }
    }

    pub fn site_specs(&self) -> Vec<SiteSpec> {
        self.sites
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let d = DomainShift::preset(s.preset.unwrap_or(k));
                SiteSpec {
                    site_id: k,
                    n_train: s.n_train,
                    n_test: s.n_test,
                    size: s.size,
                    task: s.task.into(),
                    shift: DomainShift {
                        gain: s.gain.unwrap_or(d.gain),
                        bias: s.bias.unwrap_or(d.bias),
                        blur_sigma: s.blur_sigma.unwrap_or(d.blur_sigma),
                        noise_sigma: s.noise_sigma.unwrap_or(d.noise_sigma),
                        texture_freq: s.texture_freq.unwrap_or(d.texture_freq),
                        texture_amp: s.texture_amp.unwrap_or(d.texture_amp),
                        size_scale: s.size_scale.unwrap_or(d.size_scale),
                    },
                    annotation: s.annotation.into(),
                    seed: self.seed,
                }
            })
            .collect()
    }

    pub fn federation(&self) -> Result<FederationConfig> {
        let t = &self.train;
        let l = &self.loss;
        let task: Task = self.sites[0].task.into();
        let mut model = UNetConfig::scaled(1, task.num_classes(), self.sites.len(), self.model.channel_divisor)?;
        model.scr_hidden = self.model.scr_hidden;
        model.validate()?;
        Ok(FederationConfig {
            seed: self.seed,
            model,
            train: TrainConfig {
                lr0: t.lr0,
                lr_power: t.lr_power,
                adamw: AdamWConfig {
                    beta1: t.beta1,
                    beta2: t.beta2,
                    eps: t.eps,
                    weight_decay: t.weight_decay,
                },
                batch_size: t.batch_size,
                local_epochs: t.local_epochs,
                rounds: t.rounds,
                aa_lr: t.aa_lr,
                aa_full_rounds: t.aa_full_rounds,
                aa_max_epochs: t.aa_max_epochs,
                aa_tol: t.aa_tol,
                augment: t.augment,
            },
            weights: LossWeights {
                lambda1: l.lambda1,
                lambda2: l.lambda2,
                lambda3: l.lambda3,
            },
            crf: GatedCrfConfig {
                radius: l.crf_radius,
                sigma_xy: l.sigma_xy,
                sigma_rgb: l.sigma_rgb,
            },
            affinity: AffinityConfig {
                sigma: l.sigma_a,
                low_sigma: l.sigma_a_low,
                normalize_high: l.normalize_high,
            },
            ablation: self.ablation(),
            eval_every: (t.eval_every > 0).then_some(t.eval_every),
        })
    }

    /// Pretty JSON of every effective value.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
