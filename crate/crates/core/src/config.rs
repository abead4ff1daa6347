//! Run configuration: TOML on disk, `--section.key value` overrides on the
//! command line, and content hashes that tie artifacts to the settings
//! that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserShape, DenoiserTraining, DiffusionSchedule, StepGroups};
use crate::error::{Error, Result};
use crate::qlip::{Q2BTraining, T2QTraining, Variant};
use crate::quant::BitMenu;
use crate::synth::{QualityMetric, ToyShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub center_radius: f64,
    pub base_std: f64,
    pub detail_offset: f64,
    /// Prompt/sample pairs used to train the denoiser.
    pub train_size: usize,
    /// Samples from the data distribution used to fit the quality oracle.
    pub reference_size: usize,
    pub quality_metric: QualityMetric,
    pub gmm_components: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let t = ToyShape::default();
        DataConfig {
            center_radius: t.center_radius,
            base_std: t.base_std,
            detail_offset: t.detail_offset,
            train_size: 8000,
            reference_size: 4000,
            quality_metric: QualityMetric::Gmm,
            gmm_components: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Full-precision generations whose activations set the clip ranges.
    pub prompts: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { prompts: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T2QConfig {
    pub hidden: usize,
    /// Prompts whose full-precision generations are scored for labels.
    pub dataset_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
}

impl Default for T2QConfig {
    fn default() -> Self {
        let t = T2QTraining::default();
        T2QConfig {
            hidden: 128,
            dataset_size: 2000,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            val_fraction: t.val_fraction,
        }
    }
}

impl T2QConfig {
    pub fn training(&self) -> T2QTraining {
        T2QTraining {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Q2BConfig {
    pub lambda_bit: f64,
    /// Steps per parameter group (`M`); defaults to `T/5`.
    pub group_size: Option<usize>,
    /// Leading reverse steps kept off the low width (`m`); defaults to `T/10`.
    pub forced_steps: Option<usize>,
    pub variant: Variant,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Calibration prompts generated in full precision for training.
    pub prompts: usize,
    /// Scale the MSE and bit terms before weighting by `lambda_bit`.
    pub normalize: bool,
}

impl Default for Q2BConfig {
    fn default() -> Self {
        let t = Q2BTraining::default();
        Q2BConfig {
            lambda_bit: t.lambda_bit,
            group_size: None,
            forced_steps: None,
            variant: Variant::Full,
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            prompts: 1024,
            normalize: t.normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Generated samples per arm.
    pub count: usize,
    /// Prompts sharing one merged bit plan.
    pub batch: usize,
    /// Batch sizes for the merged-plan FAB sweep.
    pub batch_sweep: Vec<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            count: 500,
            batch: 1,
            batch_sweep: vec![1, 4, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// RBF bandwidth for MMD; median heuristic when unset.
    pub mmd_bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub lambda_bit: Vec<f64>,
    pub group_size: Vec<usize>,
    pub variant: Vec<Variant>,
    /// `[low, med, high]` activation menus.
    pub menu: Vec<[u32; 3]>,
    pub quality_metric: Vec<QualityMetric>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            lambda_bit: vec![0.1, 1.0, 10.0],
            group_size: vec![10, 20, 50],
            variant: Variant::ALL.to_vec(),
            menu: vec![[6, 8, 10], [4, 6, 8]],
            quality_metric: vec![QualityMetric::Gmm, QualityMetric::Realism],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Artifact root; `QLIP_CACHE_DIR` takes precedence.
    pub cache_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            cache_dir: PathBuf::from("qlip-cache"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: DenoiserShape,
    pub data: DataConfig,
    pub denoiser: DenoiserTraining,
    pub menu: BitMenu,
    pub calibration: CalibrationConfig,
    pub t2q: T2QConfig,
    pub q2b: Q2BConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            schedule: ScheduleConfig::default(),
            model: DenoiserShape::default(),
            data: DataConfig::default(),
            denoiser: DenoiserTraining::default(),
            menu: BitMenu {
                weight_bits: 8,
                ..BitMenu::default()
            },
            calibration: CalibrationConfig::default(),
            t2q: T2QConfig::default(),
            q2b: Q2BConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Applies `section.key = value` to a TOML table. Dashes in keys become
/// underscores; the value is parsed as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<String> = path.split('.').map(|k| k.replace('-', "_")).collect();
    if keys.iter().any(String::is_empty) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_json<T: Serialize>(parts: &T) -> String {
    sha256_hex(&serde_json::to_vec(parts).expect("config serializes"))
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Calibrate,
    TrainT2q,
    TrainQ2b,
    Sample,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Calibrate,
        Stage::TrainT2q,
        Stage::TrainQ2b,
        Stage::Sample,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Calibrate => "calibrate",
            Stage::TrainT2q => "train-t2q",
            Stage::TrainQ2b => "train-q2b",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults when `None`), applies
    /// overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.model.validate()?;
        self.menu.validate()?;
        if self.model.data_dim < 2 {
            return Err(Error::Config("model.data_dim must be at least 2".into()));
        }
        let t = self.schedule.steps;
        let m = self.group_size();
        if m == 0 || m > t {
            return Err(Error::Config(format!(
                "q2b.group_size must lie in [1, {t}], got {m}"
            )));
        }
        if self.forced_steps() > t {
            return Err(Error::Config(format!("q2b.forced_steps exceeds T = {t}")));
        }
        let positive = [
            ("data.train_size", self.data.train_size),
            ("data.reference_size", self.data.reference_size),
            ("calibration.prompts", self.calibration.prompts),
            ("t2q.hidden", self.t2q.hidden),
            ("t2q.batch_size", self.t2q.batch_size),
            ("q2b.batch_size", self.q2b.batch_size),
            ("q2b.prompts", self.q2b.prompts),
            ("sample.batch", self.sample.batch),
            ("denoiser.batch_size", self.denoiser.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.t2q.dataset_size < 5 {
            return Err(Error::Config("t2q.dataset_size must be at least 5".into()));
        }
        if self.sample.count < 2 {
            return Err(Error::Config("sample.count must be at least 2".into()));
        }
        if self.sample.batch_sweep.contains(&0) {
            return Err(Error::Config(
                "sample.batch_sweep entries must be positive".into(),
            ));
        }
        if !(self.q2b.lambda_bit >= 0.0) || !(self.q2b.lr > 0.0) || !(self.t2q.lr > 0.0) {
            return Err(Error::Config(
                "learning rates must be positive and lambda_bit ≥ 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.t2q.val_fraction) {
            return Err(Error::Config("t2q.val_fraction must lie in [0, 1)".into()));
        }
        if self.data.quality_metric == QualityMetric::Gmm && self.data.gmm_components == 0 {
            return Err(Error::Config("data.gmm_components must be positive".into()));
        }
        if let Some(h) = self.eval.mmd_bandwidth {
            if !(h > 0.0) {
                return Err(Error::Config("eval.mmd_bandwidth must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let s = &self.schedule;
        DiffusionSchedule::linear(s.steps, s.beta_start, s.beta_end)
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn group_size(&self) -> usize {
        self.q2b
            .group_size
            .unwrap_or((self.schedule.steps / 5).max(1))
    }

    pub fn forced_steps(&self) -> usize {
        self.q2b.forced_steps.unwrap_or(self.schedule.steps / 10)
    }

    pub fn step_groups(&self) -> Result<StepGroups> {
        StepGroups::new(self.schedule.steps, self.group_size())
    }

    pub fn toy_shape(&self) -> ToyShape {
        ToyShape {
            data_dim: self.model.data_dim,
            cond_dim: self.model.cond_dim,
            center_radius: self.data.center_radius,
            base_std: self.data.base_std,
            detail_offset: self.data.detail_offset,
        }
    }

    pub fn q2b_training(&self) -> Q2BTraining {
        Q2BTraining {
            iterations: self.q2b.iterations,
            batch_size: self.q2b.batch_size,
            lr: self.q2b.lr,
            lambda_bit: self.q2b.lambda_bit,
            normalize: self.q2b.normalize,
        }
    }

    /// Hash of every setting except paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        hash_json(&c)
    }

    /// Hash of the settings `stage` and its upstream stages depend on.
    /// Settings that only affect later stages are left out, so changing,
    /// say, `q2b.lambda_bit` reuses the calibration and predictor.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let calibrate = serde_json::json!({
            "seed": self.seed,
            "schedule": self.schedule,
            "model": self.model,
            "data": {
                "center_radius": self.data.center_radius,
                "base_std": self.data.base_std,
                "detail_offset": self.data.detail_offset,
                "train_size": self.data.train_size,
            },
            "denoiser": self.denoiser,
            "calibration": self.calibration,
            "groups": self.group_size(),
        });
        let parts = match stage {
            Stage::Calibrate => calibrate,
            Stage::TrainT2q => serde_json::json!({
                "up": self.stage_hash(Stage::Calibrate),
                "t2q": self.t2q,
                "reference_size": self.data.reference_size,
                "quality_metric": self.data.quality_metric,
                "gmm_components": self.data.gmm_components,
            }),
            Stage::TrainQ2b => serde_json::json!({
                "up": self.stage_hash(Stage::TrainT2q),
                "menu": self.menu,
                "q2b": self.q2b,
                "forced_steps": self.forced_steps(),
            }),
            Stage::Sample => serde_json::json!({
                "up": self.stage_hash(Stage::TrainQ2b),
                "sample": self.sample,
            }),
            Stage::Evaluate => serde_json::json!({
                "up": self.stage_hash(Stage::Sample),
                "eval": self.eval,
            }),
        };
        hash_json(&parts)
    }
}
