//! Adam, the three training stages, training logs and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{LossConfig, ModalitySource, ModelConfig, SiteSelection, TrainConfig};
use crate::data::{count_labels, ScoreSeries, VideoLabel, VideoRecord};
use crate::error::{Error, Result};
use crate::losses::{l_align, l_distill, l_mil, l_pmg, objective, LossBreakdown, LossVars, Stage};
use crate::metrics::EvalReport;
use crate::model::{ForwardOptions, ForwardVars, PiVadModel, Teacher};
use crate::nn::{Bound, Gradients, ParamStore};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// First and second moments aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`. Nothing
/// is modified if any gradient is non-finite.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    hp: AdamParams,
) -> Result<()> {
    for ((_, p), g) in store.iter().zip(grads.iter()) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient in parameter {} at element {i}",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, g), m), v) in store
        .params_mut()
        .zip(grads.iter())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((x, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            *x -= hp.lr * (*mi / c1) / ((*vi / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub losses: LossBreakdown,
}

pub const LOG_HEADER: &str = "step\tl_mil\tl_align\tl_distill\tl_pmg\ttotal";

pub fn format_log(log: &[StepLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        let l = &e.losses;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.step, l.l_mil, l.l_align, l.l_distill, l.l_pmg, l.total
        );
    }
    s
}

pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    std::fs::write(path, format_log(log)).map_err(|e| Error::io(path, e))
}

/// The result of one stage: its step log, final optimizer state and any
/// warnings raised on the way.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub log: Vec<StepLog>,
    pub adam: AdamState,
    pub warnings: Vec<String>,
}

/// Per-epoch batches of `batch_normals` normal plus `batch_anomalies`
/// anomalous videos, each list reshuffled every epoch.
fn epoch_batches(
    videos: &[VideoRecord],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut normals: Vec<usize> = (0..videos.len())
        .filter(|&i| !videos[i].label.is_anomalous())
        .collect();
    let mut anomalies: Vec<usize> = (0..videos.len())
        .filter(|&i| videos[i].label.is_anomalous())
        .collect();
    normals.shuffle(rng);
    anomalies.shuffle(rng);
    let bn = cfg.batch_normals.min(normals.len());
    let ba = cfg.batch_anomalies.min(anomalies.len());
    let count = (normals.len() / bn).min(anomalies.len() / ba).max(1);
    (0..count)
        .map(|b| {
            let mut batch: Vec<usize> = normals[b * bn..(b + 1) * bn].to_vec();
            batch.extend_from_slice(&anomalies[b * ba..(b + 1) * ba]);
            batch
        })
        .collect()
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage))
}

fn require_both_classes(videos: &[VideoRecord]) -> Result<()> {
    match count_labels(videos) {
        (0, _) => Err(Error::Train("training set has no normal video".into())),
        (_, 0) => Err(Error::Train("training set has no anomalous video".into())),
        _ => Ok(()),
    }
}

fn require_epochs(epochs: usize, stage: &str) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Train(format!("{stage} needs at least one epoch")));
    }
    Ok(())
}

/// Trains a fresh backbone with the MIL loss alone.
pub fn pretrain_teacher(
    videos: &[VideoRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(Teacher, StageOutcome)> {
    require_epochs(cfg.epochs_pretrain, "teacher pretraining")?;
    require_both_classes(videos)?;
    for v in videos {
        v.check_dims(model_cfg, false)?;
    }
    let mut teacher = Teacher::new(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&teacher.store);
    let hp = AdamParams::from_config(cfg, cfg.lr_pretrain);
    let mut rng = stage_rng(cfg.seed, 1);
    let mut log = Vec::new();
    for _ in 0..cfg.epochs_pretrain {
        for batch in epoch_batches(videos, cfg, &mut rng) {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &teacher.store, true);
            let mut logits = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = g.constant(videos[i].rgb.clone());
                let (_, l) = teacher.backbone.forward(&mut g, &p, x)?;
                logits.push(l);
                labels.push(videos[i].label);
            }
            let loss = l_mil(&mut g, &logits, &labels, loss_cfg.top_k)?;
            g.backward(loss)?;
            let mut grads = Gradients::zeros_like(&teacher.store);
            grads.accumulate(&g, &p);
            adam_step(&mut teacher.store, &grads, &mut adam, hp)?;
            let l_mil = g.item(loss);
            log.push(StepLog {
                step: log.len(),
                losses: LossBreakdown {
                    l_mil,
                    total: l_mil,
                    ..LossBreakdown::default()
                },
            });
        }
    }
    Ok((
        teacher,
        StageOutcome {
            log,
            adam,
            warnings: Vec::new(),
        },
    ))
}

/// Auxiliary losses of one video, summed over its enabled sites.
fn video_aux(
    g: &mut Graph,
    model: &PiVadModel,
    vars: &ForwardVars,
    tau: f64,
) -> Result<(Var, Var, Var)> {
    let names = model.config.modality_names();
    let targets = vars
        .targets
        .as_ref()
        .ok_or_else(|| Error::Train("modality targets not loaded".into()))?;
    let target_map: BTreeMap<String, Var> =
        names.iter().cloned().zip(targets.iter().copied()).collect();
    let mut pmg = g.scalar(0.0);
    let mut align = g.scalar(0.0);
    let mut distill = g.scalar(0.0);
    for s in &vars.sites {
        let pseudo: BTreeMap<String, Var> = names
            .iter()
            .cloned()
            .zip(s.pseudo.iter().copied())
            .collect();
        let lp = l_pmg(g, &pseudo, &target_map)?;
        pmg = g.add(pmg, lp)?;
        let la = l_align(g, s.f_star, &s.aligned, tau)?;
        align = g.add(align, la)?;
        let teacher = s.teacher.ok_or(Error::MissingTeacher)?;
        let ld = l_distill(g, s.fused, teacher)?;
        distill = g.add(distill, ld)?;
    }
    Ok((pmg, align, distill))
}

fn mean_of(g: &mut Graph, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, 1.0 / vs.len() as f64))
}

fn student_stage(
    model: &mut PiVadModel,
    videos: &[VideoRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    stage: Stage,
) -> Result<(Vec<StepLog>, AdamState, Vec<String>)> {
    if model.teacher.is_none() {
        return Err(Error::MissingTeacher);
    }
    for v in videos {
        v.check_dims(&model.config, true)?;
    }
    let (epochs, lr, tag) = match stage {
        Stage::First => (cfg.epochs_warmup, cfg.lr_warmup, 2),
        Stage::Second => (cfg.epochs_main, cfg.lr_main, 3),
    };
    let opts = ForwardOptions::train(cfg.modality_source, cfg.sites);
    let hp = AdamParams::from_config(cfg, lr);
    let mut adam = AdamState::new(&model.student);
    let mut rng = stage_rng(cfg.seed, tag);
    let mut log = Vec::new();
    let mut warnings = Vec::new();
    for _ in 0..epochs {
        for batch in epoch_batches(videos, cfg, &mut rng) {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &model.student, true);
            let (mut pmg, mut align, mut distill, mut logits, mut labels) = (
                Vec::new(),
                Vec::new(),
                Vec::new(),
                Vec::new(),
                Vec::<VideoLabel>::new(),
            );
            for &i in &batch {
                let vars = model.forward(&mut g, &p, &videos[i], opts)?;
                let (lp, la, ld) = video_aux(&mut g, model, &vars, loss_cfg.tau)?;
                pmg.push(lp);
                align.push(la);
                distill.push(ld);
                logits.push(vars.logits);
                labels.push(videos[i].label);
            }
            let mil = match stage {
                Stage::First => None,
                Stage::Second => Some(l_mil(&mut g, &logits, &labels, loss_cfg.top_k)?),
            };
            let parts = LossVars {
                pmg: mean_of(&mut g, &pmg)?,
                align: mean_of(&mut g, &align)?,
                distill: mean_of(&mut g, &distill)?,
                mil,
            };
            let (total, losses) = objective(&mut g, &parts, stage, loss_cfg)?;
            g.backward(total)?;
            let mut grads = Gradients::zeros_like(&model.student);
            grads.accumulate(&g, &p);
            adam_step(&mut model.student, &grads, &mut adam, hp)?;
            for w in g.warnings() {
                if !warnings.contains(w) {
                    warnings.push(w.clone());
                }
            }
            log.push(StepLog {
                step: log.len(),
                losses,
            });
        }
    }
    Ok((log, adam, warnings))
}

/// Optimizes the MIL-free objective. The head and any block after the late
/// site take no part, so their gradients are zero and Adam leaves them
/// exactly unchanged.
pub fn warmup_stage(
    model: &mut PiVadModel,
    videos: &[VideoRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<StageOutcome> {
    require_epochs(cfg.epochs_warmup, "warm-up")?;
    let (log, adam, warnings) = student_stage(model, videos, cfg, loss_cfg, Stage::First)?;
    model.flags.warmed = true;
    Ok(StageOutcome {
        log,
        adam,
        warnings,
    })
}

/// Optimizes the full objective. An unwarmed model is refused unless
/// `allow_unwarmed` is set, in which case a warning is recorded.
pub fn main_stage(
    model: &mut PiVadModel,
    videos: &[VideoRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    allow_unwarmed: bool,
) -> Result<StageOutcome> {
    require_epochs(cfg.epochs_main, "main stage")?;
    require_both_classes(videos)?;
    let mut pre = Vec::new();
    if !model.flags.warmed {
        if !allow_unwarmed {
            return Err(Error::Train(
                "model has not been warmed up; run the warm-up stage first or allow an unwarmed start".into(),
            ));
        }
        pre.push("main stage started without warm-up".to_string());
    }
    let (log, adam, mut warnings) = student_stage(model, videos, cfg, loss_cfg, Stage::Second)?;
    pre.append(&mut warnings);
    model.flags.trained = true;
    Ok(StageOutcome {
        log,
        adam,
        warnings: pre,
    })
}

/// Scores every video in parallel and merges the series by video id.
pub fn score_all<F>(videos: &[VideoRecord], score: F) -> Result<Vec<ScoreSeries>>
where
    F: Fn(&VideoRecord) -> Result<ScoreSeries> + Sync + Send,
{
    let mut out = videos.par_iter().map(score).collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(out)
}

pub fn evaluate(
    model: &PiVadModel,
    videos: &[VideoRecord],
    source: ModalitySource,
    sites: SiteSelection,
) -> Result<EvalReport> {
    let series = score_all(videos, |v| model.infer(v, source, sites))?;
    EvalReport::from_scores(videos, &series)
}

pub fn evaluate_teacher(teacher: &Teacher, videos: &[VideoRecord]) -> Result<EvalReport> {
    let series = score_all(videos, |v| teacher.infer(v))?;
    EvalReport::from_scores(videos, &series)
}
