//! Experiment runner: calibrate → train-t2q → train-q2b → sample →
//! evaluate, with per-stage artifact directories keyed by content hash.
//!
//! Each stage writes into `<root>/<stage>/<hash>/` and finishes by writing
//! `manifest.json`; a directory with a manifest is a completed stage and is
//! reused unless `force` is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::diffusion::{
    collect_calibration, sample_batch, train_denoiser, Denoiser, DiffusionSchedule,
    QuantizedDenoiser, SampleJob, StepGroups,
};
use crate::error::{Error, Result};
use crate::eval::{
    bit_histogram, bit_histogram_csv, compute_bitops, compute_fab, median_pairwise_distance,
    metrics_csv, mmd_distance, CostModel, MetricsReport,
};
use crate::numerics::{Checkpoint, Payload, Tensor};
use crate::par::Parallelism;
use crate::qlip::{
    merge_bit_plans, train_q2b, train_t2q, BitPlan, Q2BData, Q2BParams, T2QFit, T2QModel, Variant,
};
use crate::quant::{ActivationRanges, BitMenu, QuantStore, IDENTITY_BITS};
use crate::rng::StreamKey;
use crate::synth::{
    dataset_csv, generate_dataset, PromptSample, QualityMetric, QualityOracle, ToyWorld,
};

pub const CACHE_ENV: &str = "QLIP_CACHE_DIR";
const MANIFEST: &str = "manifest.json";
const HASH_RECORD: &str = "meta/stage_hash";

/// Written last by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub stage_hash: String,
    pub config_hash: String,
    pub upstream: Option<String>,
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

/// Generated samples of one comparison arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub samples: Vec<Vec<f64>>,
    /// Plans actually used, one per sample; `None` for full precision.
    pub plans: Option<Vec<BitPlan>>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub root: PathBuf,
    pub force: bool,
    pub par: Parallelism,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn stamp(ck: &mut Checkpoint, hash: &str) -> Result<()> {
    let bytes: Vec<i32> = hash.bytes().map(i32::from).collect();
    ck.put_i32s(HASH_RECORD, &bytes)
}

fn load_stamped(path: &Path, hash: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let found: String = ck
        .i32s(HASH_RECORD)
        .map_err(|_| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "no stage hash stamp".into(),
        })?
        .into_iter()
        .map(|b| char::from(b as u8))
        .collect();
    if found != hash {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            found,
            expected: hash.to_string(),
        });
    }
    Ok(ck)
}

fn rows_csv(header: &str, rows: &[Vec<f64>]) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn parse_rows_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Checkpoint {
                        path: path.to_path_buf(),
                        reason: format!("bad number `{v}`: {e}"),
                    })
                })
                .collect()
        })
        .collect()
}

fn plans_to_checkpoint(ck: &mut Checkpoint, name: &str, plans: &[BitPlan]) -> Result<()> {
    let (k, t) = plans.first().map_or((0, 0), |p| (p.layers(), p.steps()));
    let data = plans
        .iter()
        .flat_map(|p| p.entries().iter().map(|&b| b as i32))
        .collect();
    ck.push(
        name,
        vec![plans.len() as u32, k as u32, t as u32],
        Payload::I32(data),
    )
}

fn plans_from_checkpoint(ck: &Checkpoint, name: &str) -> Result<Vec<BitPlan>> {
    let rec = ck
        .get(name)
        .ok_or_else(|| Error::contract(format!("checkpoint has no record `{name}`")))?;
    let [n, k, t] = rec.dims[..] else {
        return Err(Error::contract(format!("`{name}` must be [n, K, T]")));
    };
    let data = ck.i32s(name)?;
    let (n, k, t) = (n as usize, k as usize, t as usize);
    (0..n)
        .map(|i| {
            let rows: Vec<Vec<u32>> = (0..k)
                .map(|l| {
                    let start = (i * k + l) * t;
                    data[start..start + t].iter().map(|&b| b as u32).collect()
                })
                .collect();
            BitPlan::from_rows(&rows)
        })
        .collect()
}

/// Plans merged over consecutive groups of `batch` prompts, expanded back
/// to one plan per prompt.
pub fn batch_merged_plans(plans: &[BitPlan], batch: usize) -> Result<Vec<BitPlan>> {
    if batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut out = Vec::with_capacity(plans.len());
    for chunk in plans.chunks(batch) {
        let merged = merge_bit_plans(chunk)?;
        out.extend(std::iter::repeat_n(merged, chunk.len()));
    }
    Ok(out)
}

/// Sample stage outputs as reloaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Detail level of each evaluation prompt.
    pub levels: Vec<usize>,
    /// True conditional draws for the same prompts.
    pub reference: Vec<Vec<f64>>,
    pub arms: Vec<Arm>,
    /// Unmerged adaptive plans, one per prompt.
    pub per_sample: Vec<BitPlan>,
}

/// Everything the sample stage hands to evaluation.
struct Generated {
    prompts: Vec<(PromptSample, Vec<f64>)>,
    qualities: Vec<f64>,
    arms: Vec<Arm>,
    per_sample_plans: Vec<BitPlan>,
}

impl Pipeline {
    /// Artifact root from `QLIP_CACHE_DIR`, else `paths.cache_dir`.
    pub fn new(config: RunConfig, force: bool) -> Self {
        let root = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| config.paths.cache_dir.clone());
        Pipeline::with_root(config, root, force)
    }

    pub fn with_root(config: RunConfig, root: PathBuf, force: bool) -> Self {
        Pipeline {
            config,
            root,
            force,
            par: Parallelism::default(),
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        let h = self.config.stage_hash(stage);
        self.root.join(stage.name()).join(&h[..16])
    }

    fn upstream(stage: Stage) -> Option<Stage> {
        let i = Stage::ALL
            .iter()
            .position(|&s| s == stage)
            .expect("known stage");
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }

    /// Directory of a completed stage, or a missing-prerequisite error.
    pub fn completed(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("{} artifacts at {}", stage.name(), dir.display()),
                stage: stage.name().to_string(),
            });
        }
        let m: Manifest = serde_json::from_str(&read(&path)?)?;
        let expected = self.config.stage_hash(stage);
        if m.stage_hash != expected {
            return Err(Error::HashMismatch {
                path,
                found: m.stage_hash,
                expected,
            });
        }
        Ok(dir)
    }

    pub fn manifest(&self, stage: Stage) -> Result<Manifest> {
        let dir = self.completed(stage)?;
        Ok(serde_json::from_str(&read(&dir.join(MANIFEST))?)?)
    }

    /// Runs `stage` unless a completed copy exists; its upstream stage
    /// must already be complete.
    pub fn run(&self, stage: Stage) -> Result<PathBuf> {
        if let Some(up) = Self::upstream(stage) {
            self.completed(up)?;
        }
        let dir = self.stage_dir(stage);
        if !self.force && dir.join(MANIFEST).exists() {
            self.completed(stage)?;
            log::info!("{}: cache hit at {}", stage.name(), dir.display());
            return Ok(dir);
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let _ = fs::remove_file(dir.join(MANIFEST));
        log::info!("{}: running into {}", stage.name(), dir.display());
        let (artifacts, summary) = match stage {
            Stage::Calibrate => self.calibrate(&dir)?,
            Stage::TrainT2q => self.train_t2q_stage(&dir)?,
            Stage::TrainQ2b => self.train_q2b_stage(&dir)?,
            Stage::Sample => self.sample_stage(&dir)?,
            Stage::Evaluate => self.evaluate_stage(&dir)?,
        };
        let manifest = Manifest {
            stage,
            stage_hash: self.config.stage_hash(stage),
            config_hash: self.config.hash(),
            upstream: Self::upstream(stage).map(|u| self.config.stage_hash(u)),
            artifacts,
            summary,
        };
        write(
            &dir.join(MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(dir)
    }

    /// Runs `stages` in order; each must follow a completed stage.
    pub fn run_stages(&self, stages: &[Stage]) -> Result<PathBuf> {
        let mut last = None;
        for w in stages.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(
                    "stages must be listed in pipeline order".into(),
                ));
            }
        }
        for &s in stages {
            last = Some(self.run(s)?);
        }
        last.ok_or_else(|| Error::Config("no stages requested".into()))
    }

    pub fn run_all(&self) -> Result<PathBuf> {
        self.run_stages(&Stage::ALL)
    }

    fn key(&self, name: &str) -> StreamKey {
        StreamKey::new(self.config.seed, name)
    }

    fn world(&self) -> Result<ToyWorld> {
        ToyWorld::new(self.config.toy_shape(), self.key("world"))
    }

    fn schedule(&self) -> Result<DiffusionSchedule> {
        self.config.schedule()
    }

    fn groups(&self) -> Result<StepGroups> {
        self.config.step_groups()
    }

    /// Full-precision generations for `z`, one stream per index of `key`.
    fn generate_fp(&self, model: &Denoiser, z: &[&[f64]], key: StreamKey) -> Result<Vec<Vec<f64>>> {
        let jobs: Vec<SampleJob<'_>> = z
            .iter()
            .enumerate()
            .map(|(i, z)| SampleJob {
                z,
                key: key.child(i as u64),
                plan: None,
            })
            .collect();
        let out = sample_batch(
            model,
            None,
            &self.schedule()?,
            self.groups()?,
            &jobs,
            self.par,
        )?;
        Ok(out.into_iter().map(|o| o.x0).collect())
    }

    fn load_denoiser(&self) -> Result<Denoiser> {
        let dir = self.completed(Stage::Calibrate)?;
        let ck = load_stamped(
            &dir.join("denoiser.qlpb"),
            &self.config.stage_hash(Stage::Calibrate),
        )?;
        Denoiser::from_checkpoint(&ck)
    }

    fn load_ranges(&self) -> Result<ActivationRanges> {
        let dir = self.completed(Stage::Calibrate)?;
        let ck = load_stamped(
            &dir.join("ranges.qlpb"),
            &self.config.stage_hash(Stage::Calibrate),
        )?;
        ActivationRanges::from_checkpoint(&ck)
    }

    fn load_t2q(&self) -> Result<(T2QModel, T2QFit)> {
        let dir = self.completed(Stage::TrainT2q)?;
        let ck = load_stamped(
            &dir.join("t2q.qlpb"),
            &self.config.stage_hash(Stage::TrainT2q),
        )?;
        let fit: T2QFit = serde_json::from_str(&read(&dir.join("t2q_fit.json"))?)?;
        Ok((T2QModel::from_checkpoint(&ck)?, fit))
    }

    fn load_q2b(&self) -> Result<Q2BParams> {
        let dir = self.completed(Stage::TrainQ2b)?;
        let ck = load_stamped(
            &dir.join("q2b.qlpb"),
            &self.config.stage_hash(Stage::TrainQ2b),
        )?;
        Q2BParams::from_checkpoint(&ck)
    }

    fn quantized(&self, model: &Denoiser, menu: BitMenu) -> Result<QuantizedDenoiser> {
        let store = QuantStore::build(&self.load_ranges()?, menu)?;
        QuantizedDenoiser::new(model, store)
    }

    fn calibrate(&self, dir: &Path) -> Result<(Vec<String>, serde_json::Value)> {
        let cfg = &self.config;
        let hash = cfg.stage_hash(Stage::Calibrate);
        let world = self.world()?;
        let schedule = self.schedule()?;
        let train = generate_dataset(&world, cfg.data.train_size, self.key("train-data"))?;
        let x0: Vec<Vec<f64>> = train.iter().map(|(_, x)| x.clone()).collect();
        let z: Vec<Vec<f64>> = train.iter().map(|(p, _)| p.z.clone()).collect();
        let mut model = Denoiser::new(cfg.model, &mut self.key("denoiser-init").rng())?;
        let losses = train_denoiser(
            &mut model,
            &x0,
            &z,
            &schedule,
            &cfg.denoiser,
            self.key("denoiser-train"),
        )?;
        let tail = losses.len().min(100);
        let final_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
        log::info!("calibrate: denoiser trained, final loss {final_loss:.5}");

        let prompts = generate_dataset(
            &world,
            cfg.calibration.prompts,
            self.key("calibration-prompts"),
        )?;
        let jobs: Vec<SampleJob<'_>> = prompts
            .iter()
            .enumerate()
            .map(|(i, (p, _))| SampleJob {
                z: &p.z,
                key: self.key("calibration-sampling").child(i as u64),
                plan: None,
            })
            .collect();
        let set = collect_calibration(&model, &schedule, self.groups()?, &jobs, self.par)?;
        let ranges = set.ranges()?;

        let mut ck = Checkpoint::new();
        stamp(&mut ck, &hash)?;
        model.to_checkpoint(&mut ck)?;
        world.vocab.to_checkpoint(&mut ck)?;
        ck.save(&dir.join("denoiser.qlpb"))?;
        let mut ck = Checkpoint::new();
        stamp(&mut ck, &hash)?;
        ranges.to_checkpoint(&mut ck, None)?;
        ck.save(&dir.join("ranges.qlpb"))?;
        let mut csv = String::from("iteration,loss\n");
        for (i, l) in losses.iter().enumerate() {
            writeln!(csv, "{i},{l:.9}").expect("write to string");
        }
        write(&dir.join("denoiser_loss.csv"), csv)?;
        Ok((
            vec![
                "denoiser.qlpb".into(),
                "ranges.qlpb".into(),
                "denoiser_loss.csv".into(),
            ],
            serde_json::json!({ "denoiser_final_loss": final_loss }),
        ))
    }

    fn train_t2q_stage(&self, dir: &Path) -> Result<(Vec<String>, serde_json::Value)> {
        let cfg = &self.config;
        let hash = cfg.stage_hash(Stage::TrainT2q);
        let world = self.world()?;
        let model = self.load_denoiser()?;
        let reference: Vec<Vec<f64>> =
            generate_dataset(&world, cfg.data.reference_size, self.key("reference"))?
                .into_iter()
                .map(|(_, x)| x)
                .collect();
        let oracle = QualityOracle::fit(
            &reference,
            cfg.data.quality_metric,
            cfg.data.gmm_components,
            self.key("oracle"),
        )?;
        let prompts = generate_dataset(&world, cfg.t2q.dataset_size, self.key("t2q-prompts"))?;
        let z: Vec<&[f64]> = prompts.iter().map(|(p, _)| p.z.as_slice()).collect();
        let generated = self.generate_fp(&model, &z, self.key("t2q-sampling"))?;
        let labels: Vec<f64> = generated.iter().map(|x| oracle.score(x)).collect();

        let mut per_level = vec![(0.0, 0usize); world.levels()];
        for ((p, _), q) in prompts.iter().zip(&labels) {
            per_level[p.detail_level].0 += q;
            per_level[p.detail_level].1 += 1;
        }
        let level_means: Vec<f64> = per_level
            .iter()
            .map(|(s, n)| s / (*n).max(1) as f64)
            .collect();
        log::info!("train-t2q: mean label by detail level {level_means:?}");

        let mut t2q = T2QModel::new(
            cfg.model.cond_dim,
            cfg.t2q.hidden,
            &mut self.key("t2q-init").rng(),
        )?;
        let zs: Vec<Vec<f64>> = z.iter().map(|z| z.to_vec()).collect();
        let fit = train_t2q(
            &mut t2q,
            &zs,
            &labels,
            &cfg.t2q.training(),
            self.key("t2q-train"),
        )?;
        log::info!(
            "train-t2q: val SROCC {:?}, PLCC {:?}, val mse {:.5}",
            fit.srocc,
            fit.plcc,
            fit.val_loss
        );

        let mut ck = Checkpoint::new();
        stamp(&mut ck, &hash)?;
        t2q.to_checkpoint(&mut ck)?;
        ck.save(&dir.join("t2q.qlpb"))?;
        let mut ck = Checkpoint::new();
        stamp(&mut ck, &hash)?;
        oracle.to_checkpoint(&mut ck)?;
        ck.save(&dir.join("oracle.qlpb"))?;
        let labelled: Vec<(PromptSample, Vec<f64>)> = prompts
            .iter()
            .zip(&generated)
            .map(|((p, _), x)| (p.clone(), x.clone()))
            .collect();
        write(
            &dir.join("t2q_dataset.csv"),
            dataset_csv(&labelled, Some(&labels))?,
        )?;
        write(
            &dir.join("t2q_fit.json"),
            serde_json::to_string_pretty(&fit)?,
        )?;
        Ok((
            vec![
                "t2q.qlpb".into(),
                "oracle.qlpb".into(),
                "t2q_dataset.csv".into(),
                "t2q_fit.json".into(),
            ],
            serde_json::json!({
                "srocc": fit.srocc,
                "plcc": fit.plcc,
                "val_loss": fit.val_loss,
                "label_mean_by_level": level_means,
            }),
        ))
    }

    fn train_q2b_stage(&self, dir: &Path) -> Result<(Vec<String>, serde_json::Value)> {
        let cfg = &self.config;
        let hash = cfg.stage_hash(Stage::TrainQ2b);
        let world = self.world()?;
        let model = self.load_denoiser()?;
        let (t2q, _) = self.load_t2q()?;
        let quantized = self.quantized(&model, cfg.menu)?;
        let prompts = generate_dataset(&world, cfg.q2b.prompts, self.key("q2b-prompts"))?;
        let z: Vec<&[f64]> = prompts.iter().map(|(p, _)| p.z.as_slice()).collect();
        let x0 = self.generate_fp(&model, &z, self.key("q2b-sampling"))?;
        let zs: Vec<Vec<f64>> = z.iter().map(|z| z.to_vec()).collect();
        let mut params = Q2BParams::new(
            cfg.model.quant_layers,
            self.groups()?,
            cfg.forced_steps(),
            cfg.menu,
            cfg.q2b.variant,
        )?;
        let result = train_q2b(
            &mut params,
            Q2BData { z: &zs, x0: &x0 },
            &t2q,
            &model,
            &quantized,
            &self.schedule()?,
            &cfg.q2b_training(),
            self.key("q2b-train"),
        );
        let save = |p: &Q2BParams, name: &str| -> Result<()> {
            let mut ck = Checkpoint::new();
            stamp(&mut ck, &hash)?;
            p.to_checkpoint(&mut ck)?;
            self.load_ranges()?
                .to_checkpoint(&mut ck, Some(&cfg.menu))?;
            ck.save(&dir.join(name))
        };
        let log = match result {
            Ok(log) => log,
            Err(e) => {
                save(&params, "q2b.last_good.qlpb")?;
                log::error!("train-q2b: aborted, last good state in q2b.last_good.qlpb");
                return Err(e);
            }
        };
        save(&params, "q2b.qlpb")?;
        let mut csv = String::from("iteration,loss,mse,penalty,mean_bits\n");
        for r in &log {
            writeln!(
                csv,
                "{},{:.9},{:.9},{:.9},{:.6}",
                r.iteration, r.loss, r.mse, r.penalty, r.mean_bits
            )
            .expect("write to string");
        }
        write(&dir.join("q2b_log.csv"), csv)?;
        let tail = log.len().min(200);
        let mean = |f: fn(&crate::qlip::Q2BLogRow) -> f64| {
            log[log.len() - tail..].iter().map(f).sum::<f64>() / tail.max(1) as f64
        };
        Ok((
            vec!["q2b.qlpb".into(), "q2b_log.csv".into()],
            serde_json::json!({
                "final_mse": mean(|r| r.mse),
                "final_penalty": mean(|r| r.penalty),
                "final_mean_bits": mean(|r| r.mean_bits),
                "parameter_count": params.parameter_count(),
            }),
        ))
    }

    /// Uniform arms for each distinct menu width.
    fn uniform_widths(menu: &BitMenu) -> Vec<u32> {
        let mut b = menu.bits().to_vec();
        b.dedup();
        b
    }

    fn generate_arms(&self) -> Result<Generated> {
        let cfg = &self.config;
        let world = self.world()?;
        let model = self.load_denoiser()?;
        let (t2q, _) = self.load_t2q()?;
        let params = self.load_q2b()?;
        let quantized = self.quantized(&model, cfg.menu)?;
        let schedule = self.schedule()?;
        let groups = self.groups()?;
        let prompts = generate_dataset(&world, cfg.sample.count, self.key("eval-prompts"))?;
        let z = Tensor::from_rows(&prompts.iter().map(|(p, _)| p.z.clone()).collect::<Vec<_>>())?;
        let qualities = t2q.forward_batch(&z)?;
        let per_sample_plans = qualities
            .iter()
            .map(|&q| params.plan(q))
            .collect::<Result<Vec<_>>>()?;
        let qlip_plans = batch_merged_plans(&per_sample_plans, cfg.sample.batch)?;

        let key = self.key("eval-sampling");
        let run = |plans: Option<&[BitPlan]>| -> Result<Vec<Vec<f64>>> {
            let jobs: Vec<SampleJob<'_>> = prompts
                .iter()
                .enumerate()
                .map(|(i, (p, _))| SampleJob {
                    z: &p.z,
                    key: key.child(i as u64),
                    plan: plans.map(|ps| &ps[i]),
                })
                .collect();
            let q = plans.map(|_| &quantized);
            Ok(sample_batch(&model, q, &schedule, groups, &jobs, self.par)?
                .into_iter()
                .map(|o| o.x0)
                .collect())
        };

        let k = cfg.model.quant_layers;
        let t = cfg.schedule.steps;
        let mut arms = vec![
            Arm {
                name: "fp".into(),
                samples: run(None)?,
                plans: None,
            },
            Arm {
                name: "qlip".into(),
                samples: run(Some(&qlip_plans))?,
                plans: Some(qlip_plans.clone()),
            },
        ];
        for b in Self::uniform_widths(&cfg.menu) {
            let plans = vec![BitPlan::filled(k, t, b); prompts.len()];
            arms.push(Arm {
                name: format!("uniform-{b}"),
                samples: run(Some(&plans))?,
                plans: Some(plans),
            });
        }
        Ok(Generated {
            prompts,
            qualities,
            arms,
            per_sample_plans,
        })
    }

    fn sample_stage(&self, dir: &Path) -> Result<(Vec<String>, serde_json::Value)> {
        let hash = self.config.stage_hash(Stage::Sample);
        let g = self.generate_arms()?;
        let mut artifacts = Vec::new();
        let d = self.config.model.data_dim;
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        for arm in &g.arms {
            let name = format!("samples_{}.csv", arm.name);
            write(&dir.join(&name), rows_csv(&header.join(","), &arm.samples))?;
            artifacts.push(name);
        }
        let mut prompts = String::from("tokens,level,class,quality\n");
        for ((p, _), q) in g.prompts.iter().zip(&g.qualities) {
            writeln!(
                prompts,
                "{},{},{},{q:?}",
                p.tokens.join(" "),
                p.detail_level,
                p.class
            )
            .expect("write to string");
        }
        write(&dir.join("prompts.csv"), prompts)?;
        let reference: Vec<Vec<f64>> = g.prompts.iter().map(|(_, x)| x.clone()).collect();
        write(
            &dir.join("reference.csv"),
            rows_csv(&header.join(","), &reference),
        )?;
        let mut ck = Checkpoint::new();
        stamp(&mut ck, &hash)?;
        plans_to_checkpoint(&mut ck, "plans/per_sample", &g.per_sample_plans)?;
        for arm in &g.arms {
            if let Some(p) = &arm.plans {
                plans_to_checkpoint(&mut ck, &format!("plans/{}", arm.name), p)?;
            }
        }
        ck.save(&dir.join("plans.qlpb"))?;
        artifacts.extend([
            "prompts.csv".into(),
            "reference.csv".into(),
            "plans.qlpb".into(),
        ]);
        let arms: Vec<&str> = g.arms.iter().map(|a| a.name.as_str()).collect();
        Ok((
            artifacts,
            serde_json::json!({ "arms": arms, "count": g.prompts.len() }),
        ))
    }

    /// Reloads the sample stage outputs.
    pub fn load_samples(&self) -> Result<SampleSet> {
        let dir = self.completed(Stage::Sample)?;
        let m = self.manifest(Stage::Sample)?;
        let ck = load_stamped(
            &dir.join("plans.qlpb"),
            &self.config.stage_hash(Stage::Sample),
        )?;
        let names: Vec<String> = serde_json::from_value(m.summary["arms"].clone())?;
        let mut arms = Vec::new();
        for name in names {
            let plans = if name == "fp" {
                None
            } else {
                Some(plans_from_checkpoint(&ck, &format!("plans/{name}"))?)
            };
            arms.push(Arm {
                samples: parse_rows_csv(&dir.join(format!("samples_{name}.csv")))?,
                name,
                plans,
            });
        }
        let levels = read(&dir.join("prompts.csv"))?
            .lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| Error::contract("malformed prompts.csv"))
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = parse_rows_csv(&dir.join("reference.csv"))?;
        let per_sample = plans_from_checkpoint(&ck, "plans/per_sample")?;
        Ok(SampleSet {
            levels,
            reference,
            arms,
            per_sample,
        })
    }

    fn cost_model(&self, weight_bits: u32) -> Result<CostModel> {
        let s = &self.config.model;
        let unquantized = (s.input_dim() * s.hidden + s.hidden * s.data_dim) as u64;
        CostModel::new(s.quant_layer_macs(), weight_bits, unquantized)
    }

    fn evaluate_stage(&self, dir: &Path) -> Result<(Vec<String>, serde_json::Value)> {
        let cfg = &self.config;
        let SampleSet {
            levels,
            reference,
            arms,
            per_sample,
        } = self.load_samples()?;
        let (t2q, fit) = self.load_t2q()?;
        let n_levels = levels.iter().copied().max().map_or(0, |m| m + 1);
        let bandwidth = match cfg.eval.mmd_bandwidth {
            Some(h) => h,
            None => median_pairwise_distance(&reference, self.par)?,
        };
        let k = cfg.model.quant_layers;
        let t = cfg.schedule.steps;
        let mut reports = Vec::new();
        for arm in &arms {
            let (plans, weight_bits) = match &arm.plans {
                Some(p) => (p.clone(), cfg.menu.weight_bits),
                None => (
                    vec![BitPlan::filled(k, t, IDENTITY_BITS); arm.samples.len()],
                    IDENTITY_BITS,
                ),
            };
            let cost = self.cost_model(weight_bits)?;
            let mut bitops = 0.0;
            for p in &plans {
                bitops += compute_bitops(&cost, p)?;
            }
            let mut fab_by_level = Vec::with_capacity(n_levels);
            for l in 0..n_levels {
                let sel: Vec<BitPlan> = plans
                    .iter()
                    .zip(&levels)
                    .filter(|(_, &lv)| lv == l)
                    .map(|(p, _)| p.clone())
                    .collect();
                fab_by_level.push(if sel.is_empty() {
                    f64::NAN
                } else {
                    compute_fab(&sel)?
                });
            }
            let overhead = if arm.name == "qlip" {
                t2q.macs() as f64 * arm.samples.len() as f64
            } else {
                0.0
            };
            let mmd = mmd_distance(&arm.samples, &reference, Some(bandwidth), self.par)?;
            reports.push(MetricsReport {
                arm: arm.name.clone(),
                fab: compute_fab(&plans)?,
                bitops,
                overhead_bitops: overhead,
                mmd2: mmd.reported(),
                fab_by_level,
                t2q_srocc: fit.srocc.unwrap_or(f64::NAN),
                t2q_plcc: fit.plcc.unwrap_or(f64::NAN),
            });
        }
        write(&dir.join("metrics.csv"), metrics_csv(&reports))?;

        let qlip = arms
            .iter()
            .find(|a| a.name == "qlip")
            .and_then(|a| a.plans.as_ref())
            .ok_or_else(|| Error::Internal("qlip arm missing".into()))?;
        write(
            &dir.join("bit_histogram.csv"),
            bit_histogram_csv(&bit_histogram(qlip)),
        )?;

        let mut by_level = String::from("level,fab\n");
        let qlip_report = reports
            .iter()
            .find(|r| r.arm == "qlip")
            .expect("qlip report");
        for (l, f) in qlip_report.fab_by_level.iter().enumerate() {
            writeln!(by_level, "{l},{f:.6}").expect("write to string");
        }
        write(&dir.join("fab_by_level.csv"), by_level)?;

        let mut batch = String::from("batch,fab\n");
        let per_sample_fab = compute_fab(&per_sample)?;
        for &b in &cfg.sample.batch_sweep {
            let f = compute_fab(&batch_merged_plans(&per_sample, b)?)?;
            writeln!(batch, "{b},{f:.6}").expect("write to string");
        }
        write(&dir.join("batch_fab.csv"), batch)?;

        let summary: BTreeMap<String, serde_json::Value> = reports
            .iter()
            .map(|r| {
                (
                    r.arm.clone(),
                    serde_json::json!({ "fab": r.fab, "mmd2": r.mmd2, "bitops": r.bitops }),
                )
            })
            .collect();
        Ok((
            vec![
                "metrics.csv".into(),
                "bit_histogram.csv".into(),
                "fab_by_level.csv".into(),
                "batch_fab.csv".into(),
            ],
            serde_json::json!({
                "arms": summary,
                "mmd_bandwidth": bandwidth,
                "per_sample_fab": per_sample_fab,
                "batch": cfg.sample.batch,
            }),
        ))
    }
}

/// A sweep axis of [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    LambdaBit,
    GroupSize,
    Variant,
    Menu,
    QualityMetric,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::LambdaBit => "lambda_bit",
            Axis::GroupSize => "group_size",
            Axis::Variant => "variant",
            Axis::Menu => "menu",
            Axis::QualityMetric => "quality_metric",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        [
            Axis::LambdaBit,
            Axis::GroupSize,
            Axis::Variant,
            Axis::Menu,
            Axis::QualityMetric,
        ]
        .into_iter()
        .find(|a| a.name() == s || (s == "m" && *a == Axis::GroupSize))
        .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub fab: f64,
    pub mmd2: f64,
    pub fab_by_level: Vec<f64>,
    /// Distinct widths appearing in the emitted plans.
    pub widths: Vec<u32>,
}

/// Config variants of `axis`, labelled by value.
pub fn ablation_configs(base: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>> {
    let a = &base.ablate;
    let out: Vec<(String, RunConfig)> = match axis {
        Axis::LambdaBit => a
            .lambda_bit
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                c.q2b.lambda_bit = v;
                (format!("{v}"), c)
            })
            .collect(),
        Axis::GroupSize => a
            .group_size
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                c.q2b.group_size = Some(v);
                (format!("{v}"), c)
            })
            .collect(),
        Axis::Variant => a
            .variant
            .iter()
            .map(|&v: &Variant| {
                let mut c = base.clone();
                c.q2b.variant = v;
                (v.name().to_string(), c)
            })
            .collect(),
        Axis::Menu => a
            .menu
            .iter()
            .map(|&[l, m, h]| {
                let mut c = base.clone();
                c.menu.low = l;
                c.menu.med = m;
                c.menu.high = h;
                (format!("{l}/{m}/{h}"), c)
            })
            .collect(),
        Axis::QualityMetric => a
            .quality_metric
            .iter()
            .map(|&v: &QualityMetric| {
                let mut c = base.clone();
                c.data.quality_metric = v;
                (v.name().to_string(), c)
            })
            .collect(),
    };
    if out.is_empty() {
        return Err(Error::Config(format!(
            "ablate.{} lists no values",
            axis.name()
        )));
    }
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

/// Runs the full pipeline for every value of `axis` (shared seeds and
/// cache root) and writes `ablate_<axis>.csv` under `<root>/ablate/`.
pub fn ablate(
    base: &RunConfig,
    root: &Path,
    axis: Axis,
    force: bool,
    par: Parallelism,
) -> Result<(PathBuf, Vec<AblationRow>)> {
    let mut rows = Vec::new();
    for (value, cfg) in ablation_configs(base, axis)? {
        log::info!("ablate {}: {value}", axis.name());
        let mut p = Pipeline::with_root(cfg, root.to_path_buf(), force);
        p.par = par;
        p.run_all()?;
        let eval = p.manifest(Stage::Evaluate)?;
        let SampleSet { levels, arms, .. } = p.load_samples()?;
        let qlip = arms
            .iter()
            .find(|a| a.name == "qlip")
            .and_then(|a| a.plans.clone())
            .ok_or_else(|| Error::Internal("qlip arm missing".into()))?;
        let mut widths: Vec<u32> = qlip.iter().flat_map(|p| p.entries().to_vec()).collect();
        widths.sort_unstable();
        widths.dedup();
        let n_levels = levels.iter().copied().max().map_or(0, |m| m + 1);
        let fab_by_level = (0..n_levels)
            .map(|l| {
                let sel: Vec<BitPlan> = qlip
                    .iter()
                    .zip(&levels)
                    .filter(|(_, &lv)| lv == l)
                    .map(|(p, _)| p.clone())
                    .collect();
                compute_fab(&sel)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            value,
            fab: eval.summary["arms"]["qlip"]["fab"]
                .as_f64()
                .unwrap_or(f64::NAN),
            mmd2: eval.summary["arms"]["qlip"]["mmd2"]
                .as_f64()
                .unwrap_or(f64::NAN),
            fab_by_level,
            widths,
        });
    }
    let dir = root.join("ablate").join(&base.hash()[..16]);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut csv = String::from("value,fab,mmd2");
    let levels = rows.first().map_or(0, |r| r.fab_by_level.len());
    for l in 0..levels {
        write!(csv, ",fab_level{l}").expect("write to string");
    }
    csv.push_str(",widths\n");
    for r in &rows {
        write!(csv, "{},{:.6},{:.8}", r.value, r.fab, r.mmd2).expect("write to string");
        for f in &r.fab_by_level {
            write!(csv, ",{f:.6}").expect("write to string");
        }
        let w: Vec<String> = r.widths.iter().map(u32::to_string).collect();
        writeln!(csv, ",{}", w.join(" ")).expect("write to string");
    }
    let path = dir.join(format!("ablate_{}.csv", axis.name()));
    write(&path, csv)?;
    Ok((path, rows))
}

/// Writes `summary.md` next to the metrics of an evaluated run.
pub fn emit_report(run_dir: &Path) -> Result<PathBuf> {
    let need = |name: &str| -> Result<String> {
        let p = run_dir.join(name);
        if !p.exists() {
            return Err(Error::MissingPrerequisite {
                what: p.display().to_string(),
                stage: Stage::Evaluate.name().to_string(),
            });
        }
        read(&p)
    };
    let metrics = need("metrics.csv")?;
    let by_level = need("fab_by_level.csv")?;
    let hist = need("bit_histogram.csv")?;
    let batch = need("batch_fab.csv")?;

    let table = |csv: &str| -> String {
        let mut out = String::new();
        for (i, line) in csv.lines().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            writeln!(out, "| {} |", cells.join(" | ")).expect("write to string");
            if i == 0 {
                writeln!(out, "|{}", "---|".repeat(cells.len())).expect("write to string");
            }
        }
        out
    };
    let mut md = String::from("# Run summary\n\n## Metrics per arm\n\n");
    md.push_str(&table(&metrics));
    md.push_str("\n## FAB by prompt detail level (adaptive arm)\n\n");
    md.push_str(&table(&by_level));
    md.push_str("\n## FAB of merged plans by batch size\n\n");
    md.push_str(&table(&batch));

    let mut per_layer: BTreeMap<usize, Vec<(u32, u64)>> = BTreeMap::new();
    for line in hist.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        if let [k, b, c] = v[..] {
            let parse = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| Error::contract("malformed histogram"))
            };
            per_layer
                .entry(parse(k)? as usize)
                .or_default()
                .push((parse(b)? as u32, parse(c)?));
        }
    }
    md.push_str("\n## Bit usage per layer (adaptive arm)\n\n| layer | usage |\n|---|---|\n");
    for (k, entries) in &per_layer {
        let total: u64 = entries.iter().map(|e| e.1).sum();
        let cells: Vec<String> = entries
            .iter()
            .map(|(b, c)| format!("{b}b {:.1}%", 100.0 * *c as f64 / total as f64))
            .collect();
        writeln!(md, "| {k} | {} |", cells.join(", ")).expect("write to string");
    }
    let path = run_dir.join("summary.md");
    write(&path, md)?;
    Ok(path)
}
