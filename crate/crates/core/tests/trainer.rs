use std::sync::Arc;

use vivi_core::autodiff::checkpoint::Checkpoint;
use vivi_core::model::{ModelBundle, NormKind, PredictorKind};
use vivi_core::trainer::*;
use vivi_core::videogen::{generate_corpus, Corpus, GenConfig};
use vivi_core::Error;

fn corpus() -> Arc<Corpus> {
    let cfg = GenConfig {
        videos: 40,
        size: 16,
        frames_per_shot: 8,
        ..GenConfig::default()
    };
    Arc::new(generate_corpus(&cfg, 1).unwrap())
}

fn small(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations,
        warmup_iterations: (iterations / 10).min(5),
        lr_schedule: format!("x0.1@{}", (iterations * 3 / 4).max(1)),
        lr: 0.05,
        videos: 4,
        shots: 2,
        frames: 4,
        nk_product: 8,
        record_wallclock: false,
        ..TrainConfig::default()
    };
    cfg.augment.exemplar_frames = 4;
    let m = &mut cfg.model;
    m.input_size = 16;
    m.channels = vec![4, 8];
    m.embed_dim = 16;
    m.exemplar_outputs = 8;
    m.video_projection_dim = 8;
    m.predictor.shots = 2;
    m.predictor.horizon = 1;
    m.predictor.recurrent_hidden = 8;
    m.predictor.recurrent_layers = 1;
    m.predictor.mlp_hidden = 8;
    m.predictor.mlp_output = 8;
    cfg
}

fn run(cfg: &TrainConfig, seed: u64, labeled: Option<Arc<LabeledSet>>) -> Trainer {
    let mut t = Trainer::new(cfg.clone(), seed, corpus(), labeled).unwrap();
    t.run().unwrap();
    t
}

fn bits(m: &ModelBundle<f32>, skip: &[vivi_core::autodiff::ParamId]) -> Vec<(String, Vec<u32>)> {
    m.params
        .iter()
        .filter(|(id, _)| !skip.contains(id))
        .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn trace(t: &Trainer) -> Vec<(f64, f64, f64)> {
    t.metrics.iter().map(|r| (r.lr, r.loss_s, r.loss_total)).collect()
}

fn cotrain(gamma: f64) -> TrainConfig {
    let mut cfg = small(30);
    cfg.mode = TrainMode::Cotrain;
    cfg.gamma = gamma;
    cfg.image_batch_size = 8;
    cfg.model.norm = NormKind::GroupNormWs;
    cfg.model.groups = 4;
    cfg.model.classifier_outputs = 8;
    cfg
}

fn labeled(seed: u64) -> Arc<LabeledSet> {
    let cfg = GenConfig {
        videos: 16,
        size: 16,
        frames_per_shot: 8,
        first_id: 1000,
        ..GenConfig::default()
    };
    Arc::new(LabeledSet::from_corpus(&generate_corpus(&cfg, seed).unwrap(), 64, seed).unwrap())
}

#[test]
fn zero_lambda_matches_shot_loss_only() {
    let mut with_video = small(100);
    with_video.lambda = 0.0;
    with_video.gamma = 0.0;
    let mut shot_only = with_video.clone();
    shot_only.video_loss = VideoLoss::None;
    let a = run(&with_video, 3, None);
    let b = run(&shot_only, 3, None);
    assert_eq!(trace(&a), trace(&b));
    assert!(a.metrics.iter().any(|r| r.loss_v != 0.0));
    assert!(a.video_grad_norms.iter().all(|&g| g == 0.0));
    let video = a.model.video_branch_params();
    assert_eq!(bits(&a.model, &video), bits(&b.model, &video));
}

#[test]
fn positive_lambda_reaches_the_video_branch() {
    let t = run(&small(5), 0, None);
    assert!(t.video_grad_norms.iter().all(|&g| g > 0.0));
}

#[test]
fn same_seed_same_trace_for_any_worker_count() {
    let cfg = small(40);
    let a = run(&cfg, 7, None);
    let b = run(&cfg, 7, None);
    assert_eq!(a.metrics, b.metrics);
    let mut threaded = cfg.clone();
    threaded.workers = 3;
    assert_eq!(run(&threaded, 7, None).metrics, a.metrics);
    assert_ne!(run(&cfg, 8, None).metrics, a.metrics);
}

#[test]
fn resume_equals_straight_through() {
    let cfg = small(200);
    let straight = run(&cfg, 5, None);

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone(), 5, corpus(), None).unwrap();
    first.run_until(100, &mut |_, _| Ok(())).unwrap();
    let path = dir.path().join("half.ckpt");
    first.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let mut second = Trainer::from_checkpoint(cfg, 5, corpus(), None, &ck).unwrap();
    assert_eq!(second.step(), 100);
    second.run().unwrap();

    let mut joined = first.metrics.clone();
    joined.extend(second.metrics.iter().cloned());
    assert_eq!(joined, straight.metrics);
    assert_eq!(bits(&straight.model, &[]), bits(&second.model, &[]));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let t = run(&small(3), 0, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.checkpoint().save(&path).unwrap();
    let (back, opt) = ModelBundle::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(opt.unwrap().step, 3);
    assert_eq!(bits(&t.model, &[]), bits(&back, &[]));

    let mut wider = small(3);
    wider.model.exemplar_outputs = 12;
    let mut other = ModelBundle::<f32>::new(wider.model, 0).unwrap();
    match other.load_params(&Checkpoint::load(&path).unwrap()) {
        Err(Error::ParamMismatch { name, .. }) => assert!(name.contains("exemplar"), "{name}"),
        r => panic!("expected a mismatch, got {r:?}"),
    }
}

#[test]
fn periodic_checkpoints_are_written() {
    let mut cfg = small(10);
    cfg.checkpoint_every = 4;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, 0, corpus(), None).unwrap();
    t.checkpoint_dir = Some(dir.path().to_path_buf());
    t.run().unwrap();
    for step in [4, 8] {
        assert!(checkpoint_path(dir.path(), step).exists());
    }
    assert!(!checkpoint_path(dir.path(), 10).exists());
}

#[test]
fn metrics_csv_round_trip() {
    let t = run(&small(5), 0, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics(&t.metrics, &path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "step,lr,loss_s,loss_v,loss_sup,loss_total,wallclock_ms");
    assert_eq!(read_metrics(&path).unwrap(), t.metrics);
}

#[test]
fn zero_gamma_ignores_labeled_contents() {
    let cfg = cotrain(0.0);
    let a = run(&cfg, 2, Some(labeled(1)));
    let b = run(&cfg, 2, Some(labeled(2)));
    assert_eq!(trace(&a), trace(&b));
    assert_ne!(
        a.metrics.iter().map(|r| r.loss_sup).collect::<Vec<_>>(),
        b.metrics.iter().map(|r| r.loss_sup).collect::<Vec<_>>()
    );
    let c = run(&cotrain(1.0), 2, Some(labeled(2)));
    assert_ne!(trace(&c), trace(&b));
}

#[test]
fn reversal_rate_is_one_half() {
    let mut cfg = small(10_000);
    cfg.video_loss = VideoLoss::Order;
    cfg.model.predictor.kind = PredictorKind::OrderMlp;
    cfg.model.input_size = 16;
    cfg.model.channels = vec![2];
    cfg.model.embed_dim = 4;
    cfg.model.exemplar_outputs = 4;
    cfg.model.video_projection_dim = 4;
    cfg.model.predictor.mlp_hidden = 4;
    cfg.augment = vivi_core::pipeline::AugmentConfig {
        exemplar_frames: 4,
        ..vivi_core::pipeline::AugmentConfig::identity()
    };
    cfg.lr = 0.001;
    let t = run(&cfg, 4, None);
    let (rev, total) = t.reversed;
    assert_eq!(total, 40_000);
    let frac = rev as f64 / total as f64;
    assert!((0.48..=0.52).contains(&frac), "{frac}");
}

#[test]
fn invalid_combinations_are_rejected() {
    let mut order_k4 = small(10);
    order_k4.video_loss = VideoLoss::Order;
    assert!(order_k4.validate().is_err());

    let mut no_head = cotrain(1.0);
    no_head.model.classifier_outputs = 0;
    assert!(no_head.validate().is_err());

    let mut bn = cotrain(1.0);
    bn.model.norm = NormKind::BatchNorm;
    assert!(bn.validate().is_err());

    let mut product = small(10);
    product.nk_product = 16;
    assert!(product.validate().is_err());

    assert!(Trainer::new(cotrain(1.0), 0, corpus(), Some(labeled(0))).is_ok());
}

#[test]
fn divergence_reports_the_step() {
    let mut cfg = small(50);
    cfg.lr = 1e9;
    cfg.warmup_iterations = 0;
    let mut t = Trainer::new(cfg, 0, corpus(), None).unwrap();
    match t.run() {
        Err(Error::Diverged { step, last_row }) => {
            assert!(step >= 1);
            assert_eq!(t.metrics.len(), step - 1);
            assert!(!last_row.is_empty());
        }
        r => panic!("expected divergence, got {r:?}"),
    }
}

#[test]
fn method_presets_keep_the_frame_budget() {
    let base = TrainConfig::default();
    let frames = |c: &TrainConfig| c.videos * c.shots * c.views_per_shot();
    for m in Method::ALL {
        let c = m.configure(&base);
        c.validate().unwrap();
        assert_eq!(frames(&c), 256, "{}", m.name());
        assert_eq!(c.videos * c.shots, base.nk_product);
    }
}
