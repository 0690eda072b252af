//! Experiment orchestration: the commands behind the CLI, their on-disk
//! layout, and run manifests.
//!
//! Work-directory layout:
//!
//! ```text
//! data/{train,test}.vdt            pixel clips + dataset manifest
//! models/teacher.vdt               teacher weights
//! models/backbone.vdt              frozen discriminator/eval backbone
//! models/stage{1,2}.vdt            student (+ EMA) and discriminator heads
//! logs/*.csv                       loss traces
//! samples/*.vdt                    generated clips, dataset format
//! eval/*.csv, eval/summary.toml    reports
//! manifests/<command>.toml         one per artifact-producing command
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::consistency::{Condition, ConditionEncoder, ConsistencyModel, DenoiserNet, LoraConfig};
use crate::container::Container;
use crate::discriminator::{Backbone, Discriminator};
use crate::distill::{self, CheckpointMeta, LossRecord, ModelContext, Student, TrainingState};
use crate::error::{Error, Result};
use crate::eval::{self, FeatureDiagnosticRow, FrechetReport};
use crate::nn::ParamSet;
use crate::samplers::{self, SampleResult, SamplerKind, SeededNoise};
use crate::seeds::{self, derive_seed, LabRng};
use crate::toyworld::{self, Dataset, DatasetManifest, LatentCodec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed purposes fanned out from the master seed.
pub const SEED_PURPOSES: &[&str] = &[
    "data-train",
    "data-test",
    "cond-encoder",
    "teacher",
    "backbone",
    "stage1",
    "stage2",
    "sample",
    "eval",
];

/// File locations inside a work directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train.vdt")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test.vdt")
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("models/teacher.vdt")
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("models/backbone.vdt")
    }

    pub fn stage(&self, stage: u8) -> PathBuf {
        self.root.join(format!("models/stage{stage}.vdt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join(format!("logs/{name}.csv"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join(format!("manifests/{name}.toml"))
    }

    fn require(&self, path: &Path, what: &str) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::Dependency {
                what: what.to_string(),
                path: path.to_path_buf(),
            })
        }
    }
}

/// Creates parent directories and refuses to replace an existing file.
pub fn prepare_output(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to overwrite an existing artifact"),
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// SHA-256 of a file. Containers are hashed with timestamp lines removed
/// from their manifest, so reruns with the same seed hash identically.
pub fn artifact_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_container = bytes.starts_with(crate::container::MAGIC);
    let canonical = if is_container {
        let mut c = Container::decode(&bytes)?;
        c.manifest = strip_timestamps(&c.manifest);
        c.encode()?
    } else {
        bytes
    };
    Ok(hex::encode(Sha256::digest(&canonical)))
}

fn strip_timestamps(manifest: &str) -> String {
    manifest
        .lines()
        .filter(|l| !l.trim_start().starts_with("created_unix"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Record of one artifact-producing command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Input artifact digests, keyed by path relative to the work dir.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            started_unix: toyworld::unix_now(),
            finished_unix: 0,
            seeds: SEED_PURPOSES
                .iter()
                .map(|p| (p.to_string(), derive_seed(cfg.seed, p)))
                .chain(std::iter::once(("master".to_string(), cfg.seed)))
                .collect(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    fn record(map: &mut BTreeMap<String, String>, ws: &Workspace, path: &Path) -> Result<()> {
        let key = path.strip_prefix(&ws.root).unwrap_or(path).display().to_string();
        map.insert(key, artifact_digest(path)?);
        Ok(())
    }

    fn input(&mut self, ws: &Workspace, path: &Path) -> Result<()> {
        Self::record(&mut self.inputs, ws, path)
    }

    fn output(&mut self, ws: &Workspace, path: &Path) -> Result<()> {
        Self::record(&mut self.outputs, ws, path)
    }

    fn finish(mut self, ws: &Workspace, name: &str) -> Result<Self> {
        self.finished_unix = toyworld::unix_now();
        let path = ws.manifest(name);
        prepare_output(&path)?;
        let text = toml::to_string(&self).map_err(|e| Error::Contract(format!("run manifest: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("bad run manifest: {e}"),
        })
    }

    /// The manifest with its timestamps zeroed, for reproducibility checks.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_unix: 0,
            finished_unix: 0,
            ..self.clone()
        }
    }
}

/// Output of one distillation stage.
pub struct StageOutput {
    pub stage: u8,
    pub student: Student,
    /// EMA copy of the student; stage 2 only.
    pub ema: Option<Student>,
    /// Discriminator upsampler and head weights.
    pub heads: ParamSet,
    pub records: Vec<LossRecord>,
}

/// How stage 2 is initialised.
pub enum Stage2Init<'a> {
    FromStage1(&'a StageOutput),
    /// Stage 2 only: student from the teacher, fresh discriminator heads.
    FromTeacher,
}

/// In-memory experiment: the configuration plus the fixed model context.
/// Every method is deterministic given the master seed.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub ctx: ModelContext,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = LatentCodec::default();
        let lc = codec.latent_channels(cfg.data.channels);
        let encoder = ConditionEncoder::new(
            (lc, cfg.data.height / 2, cfg.data.width / 2),
            cfg.model.embed_dim,
            derive_seed(cfg.seed, "cond-encoder"),
        )?;
        let ctx = ModelContext {
            net: DenoiserNet::new(cfg.model.clone())?,
            param: cfg.schedule.parametrization(),
            schedule: cfg.schedule.schedule()?,
            grid: cfg.schedule.grid()?,
            encoder,
        };
        Ok(Self { cfg, ctx })
    }

    /// Same model context (condition encoder included) under another
    /// master seed, for repeated distillation runs against one teacher.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.cfg.clone();
        cfg.seed = seed;
        Self {
            cfg,
            ctx: self.ctx.clone(),
        }
    }

    fn seed(&self, purpose: &str) -> u64 {
        derive_seed(self.cfg.seed, purpose)
    }

    fn rng(&self, purpose: &str) -> LabRng {
        seeds::rng_for(self.cfg.seed, purpose)
    }

    pub fn generate_split(&self, train: bool) -> Result<Dataset> {
        let (count, purpose) = if train {
            (self.cfg.split.train_count, "data-train")
        } else {
            (self.cfg.split.test_count, "data-test")
        };
        Dataset::generate(&self.cfg.data, count, self.seed(purpose))
    }

    /// Model-space latents of a dataset.
    pub fn model_latents(dataset: &Dataset) -> Result<Tensor> {
        toyworld::to_model_space(&dataset.latents()?)
    }

    pub fn train_teacher(&self, train_x: &Tensor) -> Result<(ParamSet, Vec<f64>)> {
        distill::train_teacher(&self.ctx, train_x, &self.cfg.teacher, &mut self.rng("teacher"))
    }

    /// The backbone sees decoded frames at native resolution (evaluation)
    /// and upsampled latents at `r / 2` times it (discriminator).
    pub fn pretrain_backbone(&self) -> Result<(Backbone, f64)> {
        let scale = (self.cfg.discriminator.upsample_factor / LatentCodec::default().factor).max(1);
        Backbone::pretrain(&self.cfg.discriminator, &self.cfg.data, scale, &mut self.rng("backbone"))
    }

    fn discriminator(&self, backbone: &Backbone, heads: Option<&ParamSet>, rng: &mut LabRng) -> Result<Discriminator> {
        let lc = self.cfg.model.latent_channels;
        let mut disc = Discriminator::new(self.cfg.discriminator.clone(), lc, backbone.clone(), rng)?;
        if let Some(h) = heads {
            disc.heads = h.deep_clone()?;
        }
        Ok(disc)
    }

    /// Stage 1 from the teacher. `distill` overrides the configured
    /// distillation section (used by ablations).
    pub fn run_stage1(
        &self,
        distill: &distill::DistillConfig,
        teacher: &ParamSet,
        backbone: &Backbone,
        train_x: &Tensor,
        on_checkpoint: &mut dyn FnMut(&TrainingState<'_>) -> Result<()>,
    ) -> Result<StageOutput> {
        let mut rng = self.rng("stage1");
        let student = Student::from_teacher(teacher, distill.lora, &mut rng)?;
        let disc = self.discriminator(backbone, None, &mut rng)?;
        let mut state = TrainingState::new(&self.ctx, distill.clone(), teacher, student, disc, 1, rng)?;
        let records = distill::run_stage(&mut state, train_x, distill.stage1_iters, on_checkpoint)?;
        Ok(StageOutput {
            stage: 1,
            student: state.student,
            ema: None,
            heads: state.disc.heads,
            records,
        })
    }

    pub fn run_stage2(
        &self,
        distill: &distill::DistillConfig,
        teacher: &ParamSet,
        backbone: &Backbone,
        train_x: &Tensor,
        init: Stage2Init<'_>,
        on_checkpoint: &mut dyn FnMut(&TrainingState<'_>) -> Result<()>,
    ) -> Result<StageOutput> {
        let mut rng = self.rng("stage2");
        let (student, disc) = match init {
            Stage2Init::FromStage1(s1) => (s1.student.deep_clone()?, self.discriminator(backbone, Some(&s1.heads), &mut rng)?),
            Stage2Init::FromTeacher => {
                let student = Student::from_teacher(teacher, distill.lora, &mut rng)?;
                (student, self.discriminator(backbone, None, &mut rng)?)
            }
        };
        let mut state = TrainingState::new(&self.ctx, distill.clone(), teacher, student, disc, 2, rng)?;
        let records = distill::run_stage(&mut state, train_x, distill.stage2_iters, on_checkpoint)?;
        let ema = state.ema.take().map(|(s, _)| s);
        Ok(StageOutput {
            stage: 2,
            student: state.student,
            ema,
            heads: state.disc.heads,
            records,
        })
    }

    /// Conditions from the first frames of `cond_x`, cycled to `count` rows.
    pub fn conditions(&self, cond_x: &Tensor, count: usize) -> Result<(Tensor, Condition)> {
        let n = cond_x.dim(0)?;
        let idx: Vec<u32> = (0..count).map(|i| (i % n) as u32).collect();
        let rows = cond_x.index_select(&Tensor::new(idx.as_slice(), cond_x.device())?, 0)?;
        let cond = self.ctx.condition(&rows)?;
        Ok((rows, cond))
    }

    /// Samples `count` clips from a consistency model, in chunks of 64.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        cf: &dyn ConsistencyModel,
        cond_x: &Tensor,
        count: usize,
        kind: SamplerKind,
        steps: usize,
        cfg_scale: f64,
        seed: u64,
    ) -> Result<SampleResult> {
        let s = &self.cfg.sampler;
        let sched = samplers::build_schedule(steps, s.spacing, self.ctx.schedule.kappa, self.ctx.schedule.t_max)?;
        let (rows, cond) = self.conditions(cond_x, count)?;
        let mut noise = SeededNoise::new(seed);
        let mut parts = Vec::new();
        let mut nfe = 0;
        let mut start = 0;
        while start < count {
            let len = 64.min(count - start);
            let c = cond.select(&(start as u32..(start + len) as u32).collect::<Vec<_>>())?;
            let mut shape = rows.dims().to_vec();
            shape[0] = len;
            let r = match kind {
                SamplerKind::Cm => samplers::consistency_sample(cf, &self.ctx.schedule, &c, &shape, &sched, &mut noise)?,
                SamplerKind::Tts => {
                    samplers::tts_sample(cf, &self.ctx.schedule, &c, &shape, &sched, s.tts_options(), &mut noise)?
                }
                SamplerKind::Cfg => samplers::cfg_sample(cf, &self.ctx.schedule, &c, &shape, &sched, cfg_scale, &mut noise)?,
            };
            nfe = r.nfe;
            parts.push(r.latents);
            start += len;
        }
        Ok(SampleResult {
            latents: Tensor::cat(&parts, 0)?,
            nfe,
            trace: Vec::new(),
        })
    }

    /// Guided multi-step teacher samples on the teacher's sampling grid.
    pub fn teacher_sample(&self, teacher: &ParamSet, cond_x: &Tensor, count: usize, seed: u64) -> Result<Tensor> {
        let tc = &self.cfg.teacher;
        let grid = crate::diffusion::TimeGrid::power(
            self.ctx.schedule.kappa,
            self.ctx.schedule.t_max,
            tc.sample_steps,
            tc.sample_rho,
        )?;
        let (rows, cond) = self.conditions(cond_x, count)?;
        let mut noise = SeededNoise::new(seed);
        samplers::teacher_sample(
            &self.ctx.teacher(teacher),
            &self.ctx.schedule,
            &cond,
            rows.dims(),
            &grid,
            tc.guidance,
            &mut noise,
        )
    }

    pub fn toy_fvd(&self, backbone: &Backbone, real_px: &Tensor, gen_latents: &Tensor) -> Result<FrechetReport> {
        eval::toy_fvd(backbone, real_px, &eval::latents_to_pixels(gen_latents)?)
    }

    /// Guided teacher trajectories over the training grid, started from
    /// pure noise at `T` and conditioned on (cycled) rows of `cond_x`.
    pub fn gap_trajectories(&self, teacher: &ParamSet, cond_x: &Tensor) -> Result<(Vec<(f64, Tensor)>, Condition)> {
        let count = self.cfg.eval.gap_trajectories;
        let (rows, cond) = self.conditions(cond_x, count)?;
        let mut rng = seeds::rng_from(self.seed("eval").wrapping_add(1));
        let x_top = (seeds::randn(&mut rng, rows.shape(), DType::F32)? * self.ctx.schedule.t_max)?;
        let traj = eval::teacher_trajectories(
            &self.ctx.teacher(teacher),
            &self.ctx.schedule,
            &self.ctx.grid,
            &cond,
            &x_top,
            self.cfg.distill.cfg_scale,
        )?;
        Ok((traj, cond))
    }

    /// Prediction-vs-target and prediction-vs-input feature MSE of `stage`'s
    /// model on held-out clips, using that stage's own training target.
    pub fn feature_diagnostic(
        &self,
        label: &str,
        stage: u8,
        model: &dyn ConsistencyModel,
        ema: Option<&dyn ConsistencyModel>,
        teacher: &ParamSet,
        backbone: &Backbone,
        test_x: &Tensor,
    ) -> Result<FeatureDiagnosticRow> {
        let count = self.cfg.eval.diagnostic_clips.min(test_x.dim(0)?);
        let x0 = test_x.narrow(0, 0, count)?;
        let cond = self.ctx.condition(&x0)?;
        let mut rng = seeds::rng_from(self.seed("eval").wrapping_add(2));
        let eps = seeds::randn(&mut rng, x0.shape(), DType::F32)?;
        let intervals = self.ctx.grid.intervals();
        let (pred, target) = if stage == 1 {
            let n: Vec<usize> = (0..count).map(|i| 1 + i % intervals).collect();
            let t: Vec<f64> = n.iter().map(|&ni| self.ctx.grid.t(ni)).collect();
            let xt = crate::diffusion::forward_perturb_batch(&self.ctx.schedule, &x0, &t, &eps)?;
            (model.apply(&xt, &t, &cond)?, x0.clone())
        } else {
            let top = intervals - self.cfg.distill.m;
            let n: Vec<usize> = (0..count).map(|i| i % (top + 1)).collect();
            let terms = distill::acd_terms(
                &self.ctx,
                &self.cfg.distill,
                model,
                ema.unwrap_or(model),
                &self.ctx.teacher(teacher),
                &x0,
                &cond,
                &n,
                &eps,
            )?;
            (terms.pred, terms.target)
        };
        FeatureDiagnosticRow::new(label, backbone, &pred, &target, &x0)
    }

    pub fn checkpoint_meta(&self, kind: &str, stage: u8, step: u64, backbone: &str, teacher: &str) -> CheckpointMeta {
        CheckpointMeta {
            kind: kind.to_string(),
            stage,
            step,
            schedule: self.cfg.schedule.kind,
            kappa: self.cfg.schedule.kappa,
            t_max: self.cfg.schedule.t_max,
            sigma_data: self.cfg.schedule.sigma_data,
            lora_rank: self.cfg.distill.lora.rank,
            lora_alpha: self.cfg.distill.lora.alpha,
            ema_decay: self.cfg.distill.ema_decay,
            net: self.cfg.model.clone(),
            backbone_checksum: backbone.to_string(),
            teacher_checksum: teacher.to_string(),
        }
    }
}

fn meta_text(meta: &CheckpointMeta) -> Result<String> {
    toml::to_string(meta).map_err(|e| Error::Contract(format!("checkpoint metadata: {e}")))
}

fn read_meta(c: &Container, path: &Path) -> Result<CheckpointMeta> {
    toml::from_str(&c.manifest).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("bad checkpoint metadata in {}: {e}", path.display()),
    })
}

fn write_params(path: &Path, meta: &CheckpointMeta, params: &ParamSet, prefix: &str) -> Result<()> {
    prepare_output(path)?;
    let mut c = Container::new(meta_text(meta)?);
    params.export(prefix, &mut c);
    c.write(path)
}

fn write_stage(path: &Path, meta: &CheckpointMeta, out: &StageOutput) -> Result<()> {
    prepare_output(path)?;
    let mut c = Container::new(meta_text(meta)?);
    out.student.export("student.", &mut c);
    if let Some(ema) = &out.ema {
        ema.export("ema.", &mut c);
    }
    out.heads.export("disc.", &mut c);
    c.write(path)
}

fn write_dataset_new(dataset: &Dataset, path: &Path) -> Result<()> {
    prepare_output(path)?;
    toyworld::write_dataset(dataset, path)
}

fn write_losses(records: &[LossRecord], path: &Path) -> Result<()> {
    prepare_output(path)?;
    distill::write_loss_csv(records, path)
}

/// Loaded artifacts needed by the later commands.
pub struct Loaded {
    pub test: Dataset,
    pub teacher: ParamSet,
    pub backbone: Backbone,
    pub teacher_checksum: String,
    pub backbone_checksum: String,
}

fn load_teacher(ws: &Workspace, m: &mut RunManifest) -> Result<(ParamSet, String)> {
    let path = ws.teacher();
    ws.require(&path, "teacher checkpoint (run train-teacher)")?;
    let c = Container::read(&path)?;
    read_meta(&c, &path)?;
    let teacher = ParamSet::import("teacher.", &c)?;
    m.input(ws, &path)?;
    let sum = teacher.checksum()?;
    Ok((teacher, sum))
}

fn load_backbone(lab: &Lab, ws: &Workspace, m: &mut RunManifest) -> Result<(Backbone, String)> {
    let path = ws.backbone();
    ws.require(&path, "backbone checkpoint (run train-teacher)")?;
    let c = Container::read(&path)?;
    let backbone = Backbone::from_params(&lab.cfg.discriminator, ParamSet::import("backbone.", &c)?)?;
    m.input(ws, &path)?;
    let sum = backbone.checksum()?;
    Ok((backbone, sum))
}

fn load_dataset(ws: &Workspace, path: &Path, m: &mut RunManifest) -> Result<Dataset> {
    ws.require(path, "dataset (run datagen)")?;
    let d = toyworld::read_dataset(path)?;
    m.input(ws, path)?;
    Ok(d)
}

fn load_common(lab: &Lab, ws: &Workspace, m: &mut RunManifest) -> Result<Loaded> {
    let test = load_dataset(ws, &ws.test_data(), m)?;
    let (teacher, teacher_checksum) = load_teacher(ws, m)?;
    let (backbone, backbone_checksum) = load_backbone(lab, ws, m)?;
    Ok(Loaded {
        test,
        teacher,
        backbone,
        teacher_checksum,
        backbone_checksum,
    })
}

/// Reads a stage checkpoint into a [`StageOutput`] (with empty records).
pub fn load_stage(path: &Path, lora: LoraConfig) -> Result<StageOutput> {
    let c = Container::read(path)?;
    let meta = read_meta(&c, path)?;
    let student = Student::import("student.", &c, lora)?;
    let ema = if c.with_prefix("ema.").next().is_some() {
        Some(Student::import("ema.", &c, lora)?)
    } else {
        None
    };
    Ok(StageOutput {
        stage: meta.stage,
        student,
        ema,
        heads: ParamSet::import("disc.", &c)?,
        records: Vec::new(),
    })
}

pub fn cmd_datagen(cfg: &ExperimentConfig, ws: &Workspace) -> Result<RunManifest> {
    let lab = Lab::new(cfg.clone())?;
    let mut m = RunManifest::start("datagen", cfg);
    for (train, path) in [(true, ws.train_data()), (false, ws.test_data())] {
        let d = lab.generate_split(train)?;
        write_dataset_new(&d, &path)?;
        m.output(ws, &path)?;
    }
    m.finish(ws, "datagen")
}

/// Trains the teacher and pretrains the frozen backbone.
pub fn cmd_train_teacher(cfg: &ExperimentConfig, ws: &Workspace) -> Result<RunManifest> {
    let lab = Lab::new(cfg.clone())?;
    let mut m = RunManifest::start("train-teacher", cfg);
    let train = load_dataset(ws, &ws.train_data(), &mut m)?;
    for path in [ws.teacher(), ws.backbone(), ws.log("teacher_loss")] {
        prepare_output(&path)?;
    }
    let train_x = Lab::model_latents(&train)?;
    let (teacher, losses) = lab.train_teacher(&train_x)?;
    let (backbone, acc) = lab.pretrain_backbone()?;
    log::info!("backbone pretraining accuracy {acc:.3}");

    let meta = lab.checkpoint_meta("teacher", 0, cfg.teacher.steps as u64, &backbone.checksum()?, &teacher.checksum()?);
    write_params(&ws.teacher(), &meta, &teacher, "teacher.")?;
    let bmeta = CheckpointMeta {
        kind: "backbone".into(),
        ..meta
    };
    write_params(&ws.backbone(), &bmeta, &backbone.params, "backbone.")?;
    let rows: Vec<Vec<String>> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), format!("{l:.9e}")])
        .collect();
    eval::write_csv(ws.log("teacher_loss"), &["step", "loss"], &rows)?;
    for path in [ws.teacher(), ws.backbone(), ws.log("teacher_loss")] {
        m.output(ws, &path)?;
    }
    m.finish(ws, "train-teacher")
}

/// Runs one distillation stage. Stage 2 needs the stage-1 checkpoint unless
/// `allow_skip_stage1` is set, in which case it starts from the teacher.
pub fn cmd_distill(cfg: &ExperimentConfig, ws: &Workspace, stage: u8, allow_skip_stage1: bool) -> Result<RunManifest> {
    if stage != 1 && stage != 2 {
        return Err(Error::config("stage", "must be 1 or 2"));
    }
    let lab = Lab::new(cfg.clone())?;
    let name = format!("distill-stage{stage}");
    let mut m = RunManifest::start(&name, cfg);
    let s1_path = ws.stage(1);
    let init = if stage == 2 {
        if s1_path.is_file() {
            m.input(ws, &s1_path)?;
            Some(load_stage(&s1_path, cfg.distill.lora)?)
        } else if allow_skip_stage1 {
            None
        } else {
            return Err(Error::Dependency {
                what: "stage-1 checkpoint (run distill --stage 1 or pass --allow-skip-stage1)".into(),
                path: s1_path,
            });
        }
    } else {
        None
    };
    let train = load_dataset(ws, &ws.train_data(), &mut m)?;
    let (teacher, teacher_sum) = load_teacher(ws, &mut m)?;
    let (backbone, backbone_sum) = load_backbone(&lab, ws, &mut m)?;
    let out_path = ws.stage(stage);
    let log_path = ws.log(&format!("stage{stage}_loss"));
    prepare_output(&out_path)?;
    prepare_output(&log_path)?;

    let train_x = Lab::model_latents(&train)?;
    let meta_for = |step: u64| lab.checkpoint_meta("student", stage, step, &backbone_sum, &teacher_sum);
    let mut periodic = Vec::new();
    let mut on_ckpt = |st: &TrainingState<'_>| -> Result<()> {
        let path = ws.root.join(format!("models/stage{stage}_step{}.vdt", st.step));
        prepare_output(&path)?;
        st.checkpoint(&meta_for(st.step))?.write(&path)?;
        periodic.push(path);
        Ok(())
    };
    let out = if stage == 1 {
        lab.run_stage1(&cfg.distill, &teacher, &backbone, &train_x, &mut on_ckpt)?
    } else {
        let init = match &init {
            Some(s1) => Stage2Init::FromStage1(s1),
            None => Stage2Init::FromTeacher,
        };
        lab.run_stage2(&cfg.distill, &teacher, &backbone, &train_x, init, &mut on_ckpt)?
    };
    let iters = if stage == 1 { cfg.distill.stage1_iters } else { cfg.distill.stage2_iters };
    write_stage(&out_path, &meta_for(iters as u64), &out)?;
    write_losses(&out.records, &log_path)?;
    for p in periodic.iter().chain([&out_path, &log_path]) {
        m.output(ws, p)?;
    }
    m.finish(ws, &name)
}

/// What to sample from and how.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    /// Checkpoint stage to sample from; 0 samples the teacher.
    pub stage: u8,
    pub kind: SamplerKind,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub count: usize,
    pub out: PathBuf,
    pub png: Option<PathBuf>,
}

impl SampleRequest {
    pub fn from_config(cfg: &ExperimentConfig, ws: &Workspace) -> Self {
        Self {
            stage: 2,
            kind: cfg.sampler.kind,
            steps: cfg.sampler.steps,
            cfg_scale: cfg.sampler.cfg_scale,
            seed: derive_seed(cfg.seed, "sample"),
            count: cfg.sampler.count,
            out: ws.root.join("samples/samples.vdt"),
            png: None,
        }
    }
}

/// Samples clips conditioned on test-set first frames and writes them in
/// the dataset format, so they can be read back with the dataset reader.
pub fn cmd_sample(cfg: &ExperimentConfig, ws: &Workspace, req: &SampleRequest) -> Result<RunManifest> {
    let lab = Lab::new(cfg.clone())?;
    let mut m = RunManifest::start("sample", cfg);
    m.seeds.insert("sample-request".into(), req.seed);
    let test = load_dataset(ws, &ws.test_data(), &mut m)?;
    let test_x = Lab::model_latents(&test)?;
    prepare_output(&req.out)?;
    if let Some(p) = &req.png {
        prepare_output(p)?;
    }
    let latents = if req.stage == 0 {
        let (teacher, _) = load_teacher(ws, &mut m)?;
        lab.teacher_sample(&teacher, &test_x, req.count, req.seed)?
    } else {
        let path = ws.stage(req.stage);
        ws.require(&path, "student checkpoint (run distill)")?;
        m.input(ws, &path)?;
        let st = load_stage(&path, cfg.distill.lora)?;
        let model = st.student.model(&lab.ctx);
        lab.sample(&model, &test_x, req.count, req.kind, req.steps, req.cfg_scale, req.seed)?
            .latents
    };
    let clips = eval::latents_to_pixels(&latents)?.clamp(0f32, 1f32)?;
    let manifest = DatasetManifest {
        count: req.count,
        seed: req.seed,
        latent_mean: Vec::new(),
        latent_std: Vec::new(),
        created_unix: toyworld::unix_now(),
        ..test.manifest.clone()
    };
    let out = Dataset { clips, manifest };
    toyworld::write_dataset(&out, &req.out)?;
    m.output(ws, &req.out)?;
    if let Some(p) = &req.png {
        toyworld::write_frame_grid(&out.clips.narrow(0, 0, req.count.min(8))?, p)?;
        m.output(ws, p)?;
    }
    let stem = req.out.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    m.finish(ws, &format!("sample-{stem}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FvdRow {
    pub label: String,
    pub sampler: String,
    pub steps: usize,
    pub nfe: usize,
    pub cfg_scale: f64,
    pub fvd: f64,
    pub ridge: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fvd: Vec<FvdRow>,
    pub gap_untrained: f64,
    pub gap_stage1: Option<f64>,
    pub gap_stage2: f64,
    pub features: Vec<FeatureDiagnosticRow>,
}

/// Toy-FVD of the teacher and of the stage-2 student under each sampler,
/// self-consistency gaps, and the feature diagnostic.
pub fn cmd_eval(cfg: &ExperimentConfig, ws: &Workspace) -> Result<RunManifest> {
    let lab = Lab::new(cfg.clone())?;
    let mut m = RunManifest::start("eval", cfg);
    let loaded = load_common(&lab, ws, &mut m)?;
    let s2_path = ws.stage(2);
    ws.require(&s2_path, "stage-2 checkpoint (run distill --stage 2)")?;
    m.input(ws, &s2_path)?;
    let s2 = load_stage(&s2_path, cfg.distill.lora)?;
    let s1_path = ws.stage(1);
    let s1 = if s1_path.is_file() {
        m.input(ws, &s1_path)?;
        Some(load_stage(&s1_path, cfg.distill.lora)?)
    } else {
        None
    };
    let dir = ws.eval_dir();
    let files = ["fvd.csv", "gap.csv", "features.csv", "summary.toml"].map(|f| dir.join(f));
    for f in &files {
        prepare_output(f)?;
    }
    let summary = evaluate(&lab, &loaded, s1.as_ref(), &s2)?;

    let fvd_rows: Vec<Vec<String>> = summary
        .fvd
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.sampler.clone(),
                r.steps.to_string(),
                r.nfe.to_string(),
                r.cfg_scale.to_string(),
                format!("{:.6}", r.fvd),
                r.ridge.to_string(),
            ]
        })
        .collect();
    eval::write_csv(&files[0], &["label", "sampler", "steps", "nfe", "cfg_scale", "fvd", "ridge"], &fvd_rows)?;
    let mut gap_rows = vec![vec!["untrained".to_string(), format!("{:.6e}", summary.gap_untrained)]];
    if let Some(g) = summary.gap_stage1 {
        gap_rows.push(vec!["stage1".into(), format!("{g:.6e}")]);
    }
    gap_rows.push(vec!["stage2".into(), format!("{:.6e}", summary.gap_stage2)]);
    eval::write_csv(&files[1], &["model", "gap"], &gap_rows)?;
    let feat_rows: Vec<Vec<String>> = summary
        .features
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.6e}", r.pred_vs_input),
                format!("{:.6e}", r.pred_vs_target),
                format!("{:.6e}", r.ratio()),
            ]
        })
        .collect();
    eval::write_csv(&files[2], &["checkpoint", "pred_vs_input", "pred_vs_target", "ratio"], &feat_rows)?;
    let text = toml::to_string(&summary).map_err(|e| Error::Contract(format!("eval summary: {e}")))?;
    std::fs::write(&files[3], text).map_err(|e| Error::io(&files[3], e))?;
    for f in &files {
        m.output(ws, f)?;
    }
    m.finish(ws, "eval")
}

/// The evaluation behind `cmd_eval`, on in-memory artifacts.
pub fn evaluate(lab: &Lab, loaded: &Loaded, s1: Option<&StageOutput>, s2: &StageOutput) -> Result<EvalSummary> {
    let cfg = &lab.cfg;
    let test_x = Lab::model_latents(&loaded.test)?;
    let real = &loaded.test.clips;
    let count = cfg.eval.clips;
    let seed = derive_seed(cfg.seed, "eval");
    let mut fvd = Vec::new();

    let teacher_lat = lab.teacher_sample(&loaded.teacher, &test_x, count, seed)?;
    let r = lab.toy_fvd(&loaded.backbone, real, &teacher_lat)?;
    fvd.push(FvdRow {
        label: "teacher".into(),
        sampler: "euler".into(),
        steps: cfg.teacher.sample_steps,
        nfe: 2 * cfg.teacher.sample_steps,
        cfg_scale: cfg.teacher.guidance,
        fvd: r.distance,
        ridge: r.ridge_applied,
    });
    let student = s2.student.model(&lab.ctx);
    let k = cfg.sampler.steps;
    let mut runs = vec![(SamplerKind::Cm, 1.0), (SamplerKind::Tts, 1.0)];
    runs.extend([1.5, 3.0].map(|w| (SamplerKind::Cfg, w)));
    for (kind, w) in runs {
        let r_s = lab.sample(&student, &test_x, count, kind, k, w, seed)?;
        let r = lab.toy_fvd(&loaded.backbone, real, &r_s.latents)?;
        fvd.push(FvdRow {
            label: "stage2".into(),
            sampler: format!("{kind:?}").to_lowercase(),
            steps: k,
            nfe: r_s.nfe,
            cfg_scale: w,
            fvd: r.distance,
            ridge: r.ridge_applied,
        });
    }

    let (traj, cond) = lab.gap_trajectories(&loaded.teacher, &test_x)?;
    let untrained = Student::from_teacher(&loaded.teacher, cfg.distill.lora, &mut seeds::rng_from(seed))?;
    let gap_untrained = eval::self_consistency_gap(&untrained.model(&lab.ctx), &traj, &cond)?;
    let gap_stage1 = s1
        .map(|s| eval::self_consistency_gap(&s.student.model(&lab.ctx), &traj, &cond))
        .transpose()?;
    let gap_stage2 = eval::self_consistency_gap(&student, &traj, &cond)?;

    let mut features = Vec::new();
    if let Some(s) = s1 {
        features.push(lab.feature_diagnostic(
            "stage1",
            1,
            &s.student.model(&lab.ctx),
            None,
            &loaded.teacher,
            &loaded.backbone,
            &test_x,
        )?);
    }
    let ema_model = s2.ema.as_ref().map(|e| e.model(&lab.ctx));
    features.push(lab.feature_diagnostic(
        "stage2",
        2,
        &student,
        ema_model.as_ref().map(|e| e as &dyn ConsistencyModel),
        &loaded.teacher,
        &loaded.backbone,
        &test_x,
    )?);
    Ok(EvalSummary {
        fvd,
        gap_untrained,
        gap_stage1,
        gap_stage2,
        features,
    })
}
