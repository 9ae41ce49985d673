use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvpr_core::ablation::{run_ablation_suite, AblationCell, AblationGrid, CorpusSpec};
use tvpr_core::checkpoint::{encode_params, load_checkpoint, save_checkpoint};
use tvpr_core::config::{Ablation, TrainConfig};
use tvpr_core::dataset::synthetic::{generate_corpus, GeneratorConfig};
use tvpr_core::dataset::{MotionBank, Sample};
use tvpr_core::eval::evaluate;
use tvpr_core::tensor::{DenseArray, Init, ParamStore};
use tvpr_core::train::{train, Adam};
use tvpr_core::Error;

fn scalar_store(value: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.add("w", &[1], Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    store.get_mut(id).value = DenseArray::new(vec![1], vec![value]).unwrap();
    store
}

fn set_grad(store: &mut ParamStore<f64>, g: &[f64]) {
    store.zero_grad();
    let id = store.id("w").unwrap();
    store.accumulate_grad(id, g).unwrap();
}

fn w(store: &ParamStore<f64>) -> f64 {
    store.value(store.id("w").unwrap()).data()[0]
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    for lr in [1e-3, 3e-5, 0.5] {
        let mut store = scalar_store(2.0);
        let mut adam = Adam::new(&store, lr, (0.9, 0.999), 1e-8);
        set_grad(&mut store, &[1.0]);
        adam.step(&mut store).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((w(&store) - (2.0 - lr / (1.0 + 1e-8))).abs() < 1e-15, "lr {lr}");
    }
}

#[test]
fn adam_matches_recurrence_oracle() {
    let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
    let grads = [0.7, -1.3, 0.2, 0.2, 5.0];
    let mut store = scalar_store(0.4);
    let mut adam = Adam::new(&store, lr, (b1, b2), eps);
    let (mut x, mut m, mut v) = (0.4_f64, 0.0_f64, 0.0_f64);
    for (t, &g) in grads.iter().enumerate() {
        set_grad(&mut store, &[g]);
        adam.step(&mut store).unwrap();
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        assert!((w(&store) - x).abs() < 1e-10, "step {t}");
    }
    assert_eq!(adam.steps_taken(), grads.len() as u64);
}

#[test]
fn adam_zero_gradient_and_zero_rate_leave_values() {
    let mut store = scalar_store(1.5);
    let mut adam = Adam::new(&store, 1e-3, (0.9, 0.999), 1e-8);
    set_grad(&mut store, &[0.0]);
    adam.step(&mut store).unwrap();
    assert_eq!(w(&store), 1.5);

    let mut adam = Adam::new(&store, 0.0, (0.9, 0.999), 1e-8);
    for g in [3.0, -2.0, 0.5] {
        set_grad(&mut store, &[g]);
        adam.step(&mut store).unwrap();
    }
    assert_eq!(w(&store), 1.5);
}

#[test]
fn adam_requires_gradients() {
    let mut store = scalar_store(1.0);
    let mut adam = Adam::new(&store, 1e-3, (0.9, 0.999), 1e-8);
    assert!(matches!(adam.step(&mut store), Err(Error::MissingGradient(name)) if name == "w"));
}

fn corpus(n: usize, frames: usize) -> Vec<Sample> {
    let cfg = GeneratorConfig {
        num_videos: n,
        seed: 11,
        ..GeneratorConfig::default()
    };
    generate_corpus(&cfg)
        .unwrap()
        .iter()
        .map(|v| v.sample().unwrap().with_frames(frames).unwrap())
        .collect()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        num_frames: 4,
        ..TrainConfig::desk()
    }
}

#[test]
fn training_is_deterministic() {
    let samples = corpus(8, 4);
    let cfg = small_config(2);
    let run = || train(&cfg, &samples, &MotionBank::new(), |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(encode_params(&a.model.store), encode_params(&b.model.store));
}

#[test]
fn loss_falls_on_a_small_corpus() {
    let samples = corpus(8, 4);
    let outcome = train(&small_config(50), &samples, &MotionBank::new(), |_| {}).unwrap();
    let first = outcome.log[0].mean_loss;
    let last = outcome.log[49].mean_loss;
    assert!(last < first, "epoch 1 loss {first}, epoch 50 loss {last}");
}

#[test]
fn single_frame_runs_only_without_motion() {
    let samples = corpus(4, 1);
    let mut cfg = small_config(1);
    cfg.num_frames = 1;
    cfg.ablation = Ablation::MotionOnly;
    let err = train(&cfg, &samples, &MotionBank::new(), |_| {}).err().expect("motion needs frames");
    assert!(err.to_string().contains("frames"), "{err}");
    cfg.ablation = Ablation::VisualOnly;
    assert_eq!(train(&cfg, &samples, &MotionBank::new(), |_| {}).unwrap().log.len(), 1);
}

#[test]
fn batch_of_one_is_rejected_under_exclusive_loss() {
    let samples = corpus(4, 4);
    let mut cfg = small_config(1);
    cfg.batch_size = 1;
    assert!(matches!(train(&cfg, &samples, &MotionBank::new(), |_| {}), Err(Error::Config(_))));
    assert!(train(&cfg, &samples[..1], &MotionBank::new(), |_| {}).is_err());
}

#[test]
fn checkpoint_round_trip_and_evaluation_is_read_only() {
    let samples = corpus(6, 4);
    let cfg = small_config(1);
    let outcome = train(&cfg, &samples, &MotionBank::new(), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &cfg, &outcome.model).unwrap();
    let (cfg2, model) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    let before = encode_params(&model.store);
    assert_eq!(before, encode_params(&outcome.model.store));
    let a = evaluate(&model, &samples, cfg.ablation, &MotionBank::new()).unwrap();
    assert_eq!(encode_params(&model.store), before);
    let b = evaluate(&outcome.model, &samples, cfg.ablation, &MotionBank::new()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.ranks.len(), 2 * samples.len());

    std::fs::write(&path, b"TVPR1\x05").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn one_cell_grid_is_train_then_evaluate() {
    let generator = GeneratorConfig {
        num_videos: 10,
        seed: 5,
        ..GeneratorConfig::default()
    };
    let heldout = GeneratorConfig { seed: 6, num_videos: 4, ..generator.clone() };
    let grid = AblationGrid {
        seeds: vec![3],
        cells: vec![AblationCell {
            ablation: Ablation::VisualOnly,
            num_frames: 2,
        }],
        corpora: vec![CorpusSpec {
            name: "toy".into(),
            manifest: None,
            generator: Some(generator.clone()),
            heldout: Some(heldout.clone()),
        }],
        train: small_config(2),
    };
    let report = run_ablation_suite(&grid, |_| {}).unwrap();
    let cfg = grid.cell_config(&grid.cells[0], 3);
    let load = |g: &GeneratorConfig| -> Vec<Sample> {
        generate_corpus(g)
            .unwrap()
            .iter()
            .map(|v| v.sample().unwrap().with_frames(2).unwrap())
            .collect()
    };
    let outcome = train(&cfg, &load(&generator), &MotionBank::new(), |_| {}).unwrap();
    let direct = evaluate(&outcome.model, &load(&heldout), cfg.ablation, &MotionBank::new()).unwrap();
    let cell = &report.cells[0].results[0];
    assert_eq!(cell.runs, vec![direct.clone()]);
    assert_eq!(cell.median_recalls, direct.recalls());
    assert_eq!(report, run_ablation_suite(&grid, |_| {}).unwrap());
    let table = report.to_table();
    let row: Vec<&str> = table.lines().nth(4).unwrap().split_whitespace().collect();
    assert_eq!(row[..6], ["1", "x", "-", "-", "2", "|"], "{table}");
}

#[test]
fn paper_layout_cells_are_constructible() {
    let rows = [
        (Ablation::VisualOnly, 1),
        (Ablation::VisualOnly, 4),
        (Ablation::VisMoConcat, 4),
        (Ablation::FullFfa, 4),
        (Ablation::VisualOnly, 15),
        (Ablation::VisMoConcat, 15),
        (Ablation::FullFfa, 15),
        (Ablation::MotionOnly, 15),
    ];
    let text: String = rows
        .iter()
        .map(|(a, n)| format!("[[cells]]\nablation = \"{a}\"\nnum_frames = {n}\n"))
        .collect();
    let text = format!(
        "seeds = [0]\n{text}[[corpora]]\nname = \"synthetic\"\n[corpora.generator]\nnum_videos = 4\n[train]\npreset = \"paper\"\n"
    );
    let grid = AblationGrid::from_toml_str(&text).unwrap();
    assert_eq!(grid.cells.len(), 8);
    let flags: Vec<_> = grid.cells.iter().map(|c| c.ablation.components()).collect();
    assert_eq!(flags[0], (true, false, false));
    assert_eq!(flags[3], (true, true, true));
    assert_eq!(flags[7], (false, true, false));
    assert!(AblationGrid::from_toml_str("seeds = []\ncells = []\ncorpora = []\n").is_err());
}
