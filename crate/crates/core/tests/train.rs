use std::time::Instant;

use pivad_core::checkpoint::model_checkpoint;
use pivad_core::config::{
    LossConfig, ModalitySource, ModalitySpec, ModelConfig, SiteSelection, TrainConfig,
};
use pivad_core::data::{
    generate_split, SplitName, SynthConfig, SynthModality, SynthWorld, VideoRecord,
};
use pivad_core::model::PiVadModel;
use pivad_core::nn::{Gradients, ParamStore};
use pivad_core::tensor::Tensor;
use pivad_core::train::{
    adam_step, evaluate_teacher, format_log, main_stage, pretrain_teacher, warmup_stage,
    AdamParams, AdamState, LOG_HEADER,
};
use pivad_core::Error;

const ADAM: AdamParams = AdamParams {
    lr: 0.1,
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
};

fn two_params() -> ParamStore {
    let mut s = ParamStore::new();
    s.add("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    s.add("b", Tensor::new(vec![1], vec![3.0]).unwrap());
    s
}

#[test]
fn adam_examples() {
    let mut s = two_params();
    let mut st = AdamState::new(&s);
    let mut g = Gradients::zeros_like(&s);
    g.get_mut(s.find("a").unwrap()).copy_from_slice(&[1.0, 0.0]);
    adam_step(&mut s, &g, &mut st, ADAM).unwrap();
    assert_eq!(st.step, 1);
    let a = s.get(s.find("a").unwrap()).value.data().to_vec();
    // the first bias-corrected step has size lr regardless of gradient scale
    assert!((a[0] - 0.9).abs() < 1e-6, "{}", a[0]);
    assert_eq!(a[1], -2.0);
    assert_eq!(s.get(s.find("b").unwrap()).value.data(), &[3.0]);

    let before = s.clone();
    let (zero, mut fresh) = (Gradients::zeros_like(&s), AdamState::new(&s));
    adam_step(&mut s, &zero, &mut fresh, ADAM).unwrap();
    assert_eq!(fresh.step, 1);
    assert_eq!(s.l2_distance(&before), 0.0);

    let mut bad = Gradients::zeros_like(&s);
    bad.get_mut(s.find("b").unwrap())[0] = f64::NAN;
    let err = adam_step(&mut s, &bad, &mut st, ADAM).unwrap_err();
    assert!(err.to_string().contains("parameter b"), "{err}");
    assert_eq!(st.step, 1);
    assert_eq!(s.l2_distance(&before), 0.0);
}

#[test]
fn adam_matches_hand_rolled_recurrence() {
    let mut s = two_params();
    let mut st = AdamState::new(&s);
    let grads = [0.5, -1.5, 2.0, 0.25, -0.75];
    let (mut x, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
    for (t, &gr) in grads.iter().enumerate() {
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(s.find("b").unwrap())[0] = gr;
        adam_step(&mut s, &g, &mut st, ADAM).unwrap();
        m = 0.9 * m + 0.1 * gr;
        v = 0.999 * v + 0.001 * gr * gr;
        let t = (t + 1) as i32;
        x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    }
    assert!((s.get(s.find("b").unwrap()).value.data()[0] - x).abs() < 1e-12);
}

fn tiny_data(seed: u64, normals: usize, anomalies: usize) -> SynthConfig {
    SynthConfig {
        train_normal: normals,
        train_anomalous: anomalies,
        snippets: 16,
        rgb_dim: 12,
        latent_dim: 8,
        modalities: vec![
            SynthModality::new("P", 6, 1.0),
            SynthModality::new("D", 4, 0.5),
        ],
        seed,
        ..SynthConfig::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_dim: 12,
        hidden_dim: 8,
        latent_dim: 4,
        heads: 2,
        modalities: vec![ModalitySpec::new("P", 6), ModalitySpec::new("D", 4)],
        ..ModelConfig::default()
    }
}

fn train_videos(cfg: &SynthConfig) -> Vec<VideoRecord> {
    generate_split(cfg, &SynthWorld::new(cfg).unwrap(), SplitName::Train)
}

fn epochs(pretrain: usize, warmup: usize, main: usize) -> TrainConfig {
    TrainConfig {
        epochs_pretrain: pretrain,
        epochs_warmup: warmup,
        epochs_main: main,
        ..TrainConfig::default()
    }
}

fn student(videos: &[VideoRecord], train: &TrainConfig) -> PiVadModel {
    let (teacher, _) =
        pretrain_teacher(videos, &tiny_model(), train, &LossConfig::default()).unwrap();
    PiVadModel::new(&tiny_model(), train.seed)
        .unwrap()
        .with_teacher(teacher)
        .unwrap()
}

#[test]
fn warmup_leaves_head_and_teacher_untouched() {
    let videos = train_videos(&tiny_data(1, 8, 8));
    let train = epochs(2, 20, 1);
    let mut model = student(&videos, &train);
    let head_before = model.student.clone();
    let teacher_before = model.teacher.as_ref().unwrap().store.clone();
    let out = warmup_stage(&mut model, &videos, &train, &LossConfig::default()).unwrap();
    assert!(model.flags.warmed);
    for (_, p) in model.student.iter() {
        let old = &head_before.get(head_before.find(&p.name).unwrap()).value;
        if p.name.starts_with("backbone.head") {
            assert_eq!(&p.value, old, "{} moved", p.name);
        }
    }
    assert_eq!(
        model
            .teacher
            .as_ref()
            .unwrap()
            .store
            .l2_distance(&teacher_before),
        0.0
    );

    let first = out.log.first().unwrap().losses;
    let last = out.log.last().unwrap().losses;
    assert!(out.log.iter().all(|e| e.losses.l_mil == 0.0));
    assert!(
        last.l_distill < 0.5 * first.l_distill,
        "{} -> {}",
        first.l_distill,
        last.l_distill
    );
    assert!(
        last.total < first.total,
        "{} -> {}",
        first.total,
        last.total
    );
}

#[test]
fn one_default_warmup_epoch_is_fast() {
    let cfg = SynthConfig {
        train_normal: 4,
        train_anomalous: 4,
        ..SynthConfig::default()
    };
    let videos = train_videos(&cfg);
    let model_cfg = ModelConfig::default();
    let train = epochs(1, 1, 1);
    let (teacher, _) =
        pretrain_teacher(&videos, &model_cfg, &train, &LossConfig::default()).unwrap();
    let mut model = PiVadModel::new(&model_cfg, 0)
        .unwrap()
        .with_teacher(teacher)
        .unwrap();
    let start = Instant::now();
    warmup_stage(&mut model, &videos, &train, &LossConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "one epoch took {secs:.1}s");
}

#[test]
fn main_stage_checks_warmup_and_logs_every_term() {
    let videos = train_videos(&tiny_data(2, 4, 4));
    let train = epochs(1, 1, 2);
    let mut model = student(&videos, &train);
    let loss = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossConfig::default()
    };
    assert!(matches!(
        main_stage(&mut model, &videos, &train, &loss, false),
        Err(Error::Train(_))
    ));
    let out = main_stage(&mut model, &videos, &train, &loss, true).unwrap();
    assert!(out.warnings.iter().any(|w| w.contains("without warm-up")));
    assert!(model.flags.trained);
    for e in &out.log {
        let l = e.losses;
        assert!(l.l_align > 0.0 && l.l_distill > 0.0 && l.l_pmg > 0.0 && l.l_mil > 0.0);
        assert!((l.total - (l.l_mil + l.l_pmg)).abs() < 1e-12);
    }
    let text = format_log(&out.log);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert_eq!(lines.count(), out.log.len());
}

#[test]
fn training_is_deterministic() {
    let videos = train_videos(&tiny_data(3, 4, 4));
    let train = epochs(2, 2, 2);
    let run = || {
        let mut model = student(&videos, &train);
        let w = warmup_stage(&mut model, &videos, &train, &LossConfig::default()).unwrap();
        let m = main_stage(&mut model, &videos, &train, &LossConfig::default(), false).unwrap();
        (
            format_log(&w.log) + &format_log(&m.log),
            model_checkpoint(&model, Some(&m.adam)).encode(),
        )
    };
    let (log_a, ck_a) = run();
    let (log_b, ck_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(ck_a, ck_b);
}

#[test]
fn pretraining_preconditions() {
    let videos = train_videos(&tiny_data(4, 4, 4));
    let loss = LossConfig::default();
    assert!(pretrain_teacher(&videos, &tiny_model(), &epochs(0, 1, 1), &loss).is_err());
    let normals: Vec<VideoRecord> = videos
        .iter()
        .filter(|v| !v.label.is_anomalous())
        .cloned()
        .collect();
    let err = pretrain_teacher(&normals, &tiny_model(), &epochs(1, 1, 1), &loss).unwrap_err();
    assert!(err.to_string().contains("no anomalous"), "{err}");
    let wrong = ModelConfig {
        input_dim: 5,
        ..tiny_model()
    };
    assert!(pretrain_teacher(&videos, &wrong, &epochs(1, 1, 1), &loss).is_err());
}

#[test]
fn students_need_modality_streams() {
    let videos = train_videos(&tiny_data(5, 4, 4));
    let train = epochs(1, 1, 1);
    let mut model = student(&videos, &train);
    let bare: Vec<VideoRecord> = videos.iter().map(VideoRecord::rgb_only).collect();
    assert!(matches!(
        warmup_stage(&mut model, &bare, &train, &LossConfig::default()),
        Err(Error::MissingModalities { .. })
    ));
    let mut unpaired = PiVadModel::new(&tiny_model(), 0).unwrap();
    assert!(matches!(
        warmup_stage(&mut unpaired, &videos, &train, &LossConfig::default()),
        Err(Error::MissingTeacher)
    ));
}

/// One anomaly class, clear RGB evidence and a short-memory scene.
fn easy_data() -> SynthConfig {
    SynthConfig {
        rgb_strength: 1.0,
        classes: 1,
        scene_std: 0.3,
        walk_rho: 0.2,
        ..tiny_data(0, 32, 32)
    }
}

#[test]
fn teacher_learns_an_easy_task() {
    let videos = train_videos(&easy_data());
    let train = epochs(40, 1, 1);
    let (teacher, out) =
        pretrain_teacher(&videos, &tiny_model(), &train, &LossConfig::default()).unwrap();
    let report = evaluate_teacher(&teacher, &videos).unwrap();
    assert!(report.auc > 0.9, "train AUC {}", report.auc);

    // per-epoch means, then a ten-epoch moving average
    let per_epoch = out.log.len() / 40;
    let epoch_means: Vec<f64> = out
        .log
        .chunks(per_epoch)
        .map(|c| c.iter().map(|e| e.losses.l_mil).sum::<f64>() / c.len() as f64)
        .collect();
    let smooth: Vec<f64> = epoch_means
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect();
    for (i, w) in smooth.windows(2).enumerate() {
        assert!(
            w[1] <= w[0],
            "smoothed MIL rose at epoch {}: {} -> {}",
            i + 10,
            w[0],
            w[1]
        );
    }
}

#[test]
fn real_modalities_also_train() {
    let videos = train_videos(&tiny_data(7, 4, 4));
    let train = TrainConfig {
        modality_source: ModalitySource::Real,
        sites: SiteSelection::Late,
        ..epochs(1, 2, 1)
    };
    let mut model = student(&videos, &train);
    let out = warmup_stage(&mut model, &videos, &train, &LossConfig::default()).unwrap();
    assert!(out.log.iter().all(|e| e.losses.total.is_finite()));
}
