//! Desk-scale ablation study: one shared teacher and backbone, then per
//! distillation seed the full two-stage run and its ablations, scored by
//! toy-FVD, the feature diagnostic and the self-consistency gap.

use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::consistency::ConsistencyModel;
use crate::discriminator::Backbone;
use crate::distill::Student;
use crate::error::Result;
use crate::eval;
use crate::nn::ParamSet;
use crate::pipeline::{Lab, Stage2Init, StageOutput};
use crate::samplers::SamplerKind;
use crate::seeds::{self, derive_seed};

/// The reduced configuration the study runs at: 16x16 frames and a
/// narrower network, sized for a single CPU core. Stage 2 gets ten times
/// the iterations of stage 1, the proportion of the full-scale recipe.
pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.height = 16;
    cfg.data.width = 16;
    cfg.data.min_half_size = 2;
    cfg.data.max_half_size = 4;
    cfg.data.max_speed = 1;
    cfg.split.train_count = 1024;
    cfg.split.test_count = 128;
    cfg.model.width = 24;
    cfg.teacher.steps = 1500;
    cfg.distill.stage1_iters = 50;
    cfg.distill.stage2_iters = 500;
    cfg.eval.clips = 128;
    cfg.eval.gap_trajectories = 16;
    cfg
}

/// Artifacts shared by every distillation seed.
pub struct Shared {
    pub lab: Lab,
    pub train_x: Tensor,
    pub test_x: Tensor,
    pub test_clips: Tensor,
    pub teacher: ParamSet,
    pub backbone: Backbone,
    pub backbone_accuracy: f64,
    pub teacher_fvd: f64,
    pub seconds: f64,
}

pub fn prepare(cfg: ExperimentConfig) -> Result<Shared> {
    let start = Instant::now();
    let lab = Lab::new(cfg)?;
    let train = lab.generate_split(true)?;
    let test = lab.generate_split(false)?;
    let train_x = Lab::model_latents(&train)?;
    let test_x = Lab::model_latents(&test)?;
    let (teacher, _) = lab.train_teacher(&train_x)?;
    let (backbone, backbone_accuracy) = lab.pretrain_backbone()?;
    let seed = derive_seed(lab.cfg.seed, "eval");
    let teacher_lat = lab.teacher_sample(&teacher, &test_x, lab.cfg.eval.clips, seed)?;
    let teacher_fvd = lab.toy_fvd(&backbone, &test.clips, &teacher_lat)?.distance;
    Ok(Shared {
        lab,
        train_x,
        test_x,
        test_clips: test.clips,
        teacher,
        backbone,
        backbone_accuracy,
        teacher_fvd,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Metrics of one distillation seed. FVD values are at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub fvd_full_tts: f64,
    pub fvd_full_cm: f64,
    pub fvd_full_cfg15: f64,
    pub fvd_full_cfg30: f64,
    /// Both stages with zero adversarial weight, same iteration counts.
    pub fvd_no_adv_tts: f64,
    /// Stage 2 from the teacher, same stage-2 iteration count.
    pub fvd_stage2_only_tts: f64,
    pub feature_ratio_stage1: f64,
    pub feature_ratio_stage2: f64,
    pub gap_before: f64,
    pub gap_after: f64,
    /// Gaps of the ablations, for diagnosis only.
    pub gap_no_adv: f64,
    pub gap_stage2_only: f64,
    pub seconds: f64,
}

pub fn run_seed(shared: &Shared, seed: u64) -> Result<SeedMetrics> {
    let start = Instant::now();
    let lab = shared.lab.with_seed(seed);
    let cfg = &lab.cfg;
    let (teacher, backbone, train_x, test_x) = (&shared.teacher, &shared.backbone, &shared.train_x, &shared.test_x);
    let mut none = |_: &crate::distill::TrainingState<'_>| Ok(());

    let s1 = lab.run_stage1(&cfg.distill, teacher, backbone, train_x, &mut none)?;
    let s2 = lab.run_stage2(&cfg.distill, teacher, backbone, train_x, Stage2Init::FromStage1(&s1), &mut none)?;

    let mut plain = cfg.distill.clone();
    plain.lambda_lgp = 0.0;
    plain.lambda_acd = 0.0;
    let p1 = lab.run_stage1(&plain, teacher, backbone, train_x, &mut none)?;
    let p2 = lab.run_stage2(&plain, teacher, backbone, train_x, Stage2Init::FromStage1(&p1), &mut none)?;

    let only = lab.run_stage2(&cfg.distill, teacher, backbone, train_x, Stage2Init::FromTeacher, &mut none)?;

    let sample_seed = derive_seed(seed, "sample");
    let fvd = |st: &StageOutput, kind: SamplerKind, w: f64| -> Result<f64> {
        let model = st.student.model(&lab.ctx);
        let r = lab.sample(&model, test_x, cfg.eval.clips, kind, 1, w, sample_seed)?;
        Ok(lab.toy_fvd(backbone, &shared.test_clips, &r.latents)?.distance)
    };

    let ratio = |st: &StageOutput| -> Result<f64> {
        let model = st.student.model(&lab.ctx);
        let ema = st.ema.as_ref().map(|e| e.model(&lab.ctx));
        let row = lab.feature_diagnostic(
            &format!("stage{}", st.stage),
            st.stage,
            &model,
            ema.as_ref().map(|e| e as &dyn ConsistencyModel),
            teacher,
            backbone,
            test_x,
        )?;
        Ok(row.ratio())
    };

    let (traj, cond) = lab.gap_trajectories(teacher, test_x)?;
    let untrained = Student::from_teacher(teacher, cfg.distill.lora, &mut seeds::rng_from(seed))?;

    Ok(SeedMetrics {
        seed,
        fvd_full_tts: fvd(&s2, SamplerKind::Tts, 1.0)?,
        fvd_full_cm: fvd(&s2, SamplerKind::Cm, 1.0)?,
        fvd_full_cfg15: fvd(&s2, SamplerKind::Cfg, 1.5)?,
        fvd_full_cfg30: fvd(&s2, SamplerKind::Cfg, 3.0)?,
        fvd_no_adv_tts: fvd(&p2, SamplerKind::Tts, 1.0)?,
        fvd_stage2_only_tts: fvd(&only, SamplerKind::Tts, 1.0)?,
        feature_ratio_stage1: ratio(&s1)?,
        feature_ratio_stage2: ratio(&s2)?,
        gap_before: eval::self_consistency_gap(&untrained.model(&lab.ctx), &traj, &cond)?,
        gap_after: eval::self_consistency_gap(&s2.student.model(&lab.ctx), &traj, &cond)?,
        gap_no_adv: eval::self_consistency_gap(&p2.student.model(&lab.ctx), &traj, &cond)?,
        gap_stage2_only: eval::self_consistency_gap(&only.student.model(&lab.ctx), &traj, &cond)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
