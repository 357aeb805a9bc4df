use fgd_core::config::RunConfig;
use fgd_core::losses::{AblationMode, Adaptation};
use fgd_core::pipeline::run::{load_state, save_checkpoint, METRICS_HEADER};
use fgd_core::pipeline::{distill_run, Dataset, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(steps: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.steps = steps;
    c.teacher_pretrain_steps = 20;
    c.num_scenes = 4;
    c.batch_size = 2;
    c.scene.height = 16;
    c.scene.width = 16;
    c.scene.max_rect_size = 8;
    c
}

fn setup(cfg: &RunConfig) -> (Dataset, TrainState) {
    let data = Dataset::generate(&cfg.scene, cfg.seed, cfg.num_scenes).unwrap();
    let state = TrainState::init(cfg, &data).unwrap();
    (data, state)
}

fn bits(state: &TrainState) -> Vec<u64> {
    state.all_parameters().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn trajectories_are_bitwise_reproducible() {
    let cfg = small_config(0);
    let hp = cfg.hyper_params().unwrap();
    let run = || {
        let (data, mut state) = setup(&cfg);
        let reports: Vec<_> = (0..10).map(|k| state.train_step(&data.batch(k, 2), &hp, AblationMode::Full).unwrap()).collect();
        (reports, bits(&state))
    };
    let (r1, b1) = run();
    let (r2, b2) = run();
    assert_eq!(b1, b2);
    for (a, b) in r1.iter().zip(&r2) {
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.total_distill.to_bits(), b.total_distill.to_bits());
    }
}

#[test]
fn teacher_never_changes() {
    let cfg = small_config(0);
    let hp = cfg.hyper_params().unwrap();
    let (data, mut state) = setup(&cfg);
    let before = state.teacher.clone();
    for k in 0..15 {
        state.train_step(&data.batch(k, 2), &hp, AblationMode::Full).unwrap();
    }
    assert_eq!(state.teacher, before);
}

#[test]
fn gradients_reach_every_parameter_the_loss_depends_on() {
    let cfg = small_config(0);
    let hp = cfg.hyper_params().unwrap();
    let (data, mut state) = setup(&cfg);
    // the GcBlock output weights start at zero, which blocks the other
    // GcBlock parameters; one update makes them nonzero
    state.train_step(&data.batch(0, 2), &hp, AblationMode::Full).unwrap();
    let report = state.compute_gradients(&data.batch(1, 2), &hp, AblationMode::Full).unwrap();
    assert!(report.total_distill > 0.0 && report.global_ > 0.0);
    for p in state.trainable() {
        let g = p.grad();
        assert!(g.iter().any(|&v| v != 0.0), "{} has no gradient", p.name);
        assert!(g.iter().all(|v| v.is_finite()));
    }
    assert!(state.teacher.parameters().iter().all(|p| p.grad().iter().all(|&g| g == 0.0)));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut cfg = small_config(0);
    cfg.lr = 0.0;
    let hp = cfg.hyper_params().unwrap();
    let (data, mut state) = setup(&cfg);
    let before = bits(&state);
    let batch = data.batch(0, 2);
    let r1 = state.train_step(&batch, &hp, AblationMode::Full).unwrap();
    let r2 = state.train_step(&batch, &hp, AblationMode::Full).unwrap();
    assert_eq!(bits(&state), before);
    assert_eq!(r1, r2);
}

#[test]
fn student_equal_to_teacher_starts_with_zero_distillation() {
    let mut cfg = small_config(0);
    cfg.student_channels = cfg.teacher_channels;
    let hp = cfg.hyper_params().unwrap();
    let (data, mut state) = setup(&cfg);
    for (s, t) in state.student.stages.iter_mut().zip(&state.teacher.stages) {
        s.weight.tensor = t.weight.tensor.clone().with_requires_grad(true);
        s.bias.tensor = t.bias.tensor.clone().with_requires_grad(true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (l, a) in state.adapters.iter_mut().enumerate() {
        *a = Adaptation::new(&format!("adapt.l{l}"), 8, 8, &mut rng);
    }
    let r = state.compute_gradients(&data.batch(0, 2), &hp, AblationMode::Full).unwrap();
    assert_eq!((r.fea_fg, r.fea_bg, r.attention, r.global_, r.total_distill), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert!(r.task > 0.0);
}

#[test]
fn checkpoint_restores_the_exact_state() {
    let cfg = small_config(0);
    let hp = cfg.hyper_params().unwrap();
    let (data, mut state) = setup(&cfg);
    for k in 0..3 {
        state.train_step(&data.batch(k, 2), &hp, AblationMode::Full).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &state).unwrap();
    let restored = load_state(&cfg, &data, &path).unwrap();
    assert_eq!(bits(&restored), bits(&state));
}

#[test]
fn run_writes_artifacts_and_zero_steps_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(0);
    cfg.out_dir = dir.path().join("zero");
    let s = distill_run(&cfg).unwrap();
    assert!(s.reports.is_empty());
    assert_eq!(std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap(), format!("{METRICS_HEADER}\n"));

    let mut cfg = small_config(7);
    cfg.mask_dump_interval = 3;
    cfg.out_dir = dir.path().join("seven");
    let s = distill_run(&cfg).unwrap();
    let csv = std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert_eq!(s.gaps.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0, 3, 6, 7]);
    for f in ["config.txt", "checkpoint.bin", "attention_gap.csv", "masks/step_000007/level1_scale.txt"] {
        assert!(cfg.out_dir.join(f).is_file(), "{f}");
    }
    let echo = std::fs::read_to_string(cfg.out_dir.join("config.txt")).unwrap();
    assert_eq!(RunConfig::parse(&echo).unwrap(), cfg);
}

#[test]
fn identity_holds_on_every_logged_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(12);
    cfg.out_dir = dir.path().to_path_buf();
    for r in distill_run(&cfg).unwrap().reports {
        assert!(r.identity_error() < 1e-12);
    }
}
