use crossing_profiler::data::*;
use crossing_profiler::models::*;
use crossing_profiler::numerics::Tensor;
use crossing_profiler::training::*;
use crossing_profiler::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_rmse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (s / a.len() as f64).sqrt()
}

fn naive_mae(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

#[test]
fn metrics_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (r, m) = (rmse(&a, &b).unwrap(), mae(&a, &b).unwrap());
        assert!((r - naive_rmse(&a, &b)).abs() < 1e-12);
        assert!((m - naive_mae(&a, &b)).abs() < 1e-12);
        assert!(m <= r + 1e-15);
    }
}

fn tiny_spec(variant: Variant, len: usize) -> ModelSpec {
    ModelSpec {
        variant,
        input_channels: 7,
        d_model: 4,
        lstm_hidden: 3,
        num_heads: 2,
        d_ff: 5,
        num_encoder_blocks: 1,
        sequence_length: len,
        dropout: 0.0,
    }
}

fn bundle(sources: usize, len: usize, seed: u64) -> DatasetBundle {
    let recs = synthesize_corpus(&SynthConfig::default(), seed, sources).unwrap();
    let seqs: Vec<_> = recs.iter().map(|r| preprocess(r).unwrap()).collect();
    let plan = AugmentationPlan {
        noisy_copies: 2,
        downsampled_pairs: 1,
        sequence_length: len,
        seed,
        ..AugmentationPlan::default()
    };
    build_dataset(&seqs, &plan).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 3,
        max_epochs: 6,
        patience: 5,
        seed,
        allow_dropout: false,
    }
}

#[test]
fn training_is_deterministic() {
    let b = bundle(4, 24, 1);
    let run = || {
        let m = HybridModel::build(tiny_spec(Variant::LstmThenTransformer, 24), 5).unwrap();
        train(m, &b, &quick(9)).unwrap()
    };
    let (x, y) = (run(), run());
    assert_eq!(x.history, y.history);
    assert_eq!(x.history.to_csv(), y.history.to_csv());
    for (p, q) in x.model.tensors().iter().zip(y.model.tensors()) {
        assert_eq!(p.data(), q.data());
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let b = bundle(3, 20, 2);
    let m = HybridModel::build(tiny_spec(Variant::ParallelLstmTransformer, 20), 1).unwrap();
    let before: Vec<Tensor> = m.tensors().into_iter().cloned().collect();
    let out = train(m, &b, &TrainConfig { learning_rate: 0.0, ..quick(0) }).unwrap();
    for (p, q) in out.model.tensors().iter().zip(&before) {
        assert_eq!(p.data(), q.data());
    }
    let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.val_rmse_m).collect();
    assert!(losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn best_validation_parameters_are_restored() {
    let b = bundle(4, 24, 3);
    let m = HybridModel::build(tiny_spec(Variant::TransformerThenLstm, 24), 2).unwrap();
    let out = train(m, &b, &TrainConfig { learning_rate: 5e-2, max_epochs: 10, patience: 3, ..quick(4) }).unwrap();
    let val = evaluate(&out.model, &b).unwrap().rows[1].rmse_m;
    for e in &out.history.epochs {
        assert!(val <= e.val_rmse_m + 1e-12, "{val} > {}", e.val_rmse_m);
    }
    let best = out.history.epochs.iter().find(|e| e.epoch == out.history.best_epoch).unwrap();
    assert!((best.val_rmse_m - val).abs() < 1e-12);
}

#[test]
fn dropout_requires_explicit_opt_in() {
    let b = bundle(3, 20, 4);
    let mut spec = tiny_spec(Variant::LstmThenTransformer, 20);
    spec.dropout = 0.1;
    let m = HybridModel::build(spec.clone(), 0).unwrap();
    assert!(matches!(train(m, &b, &quick(0)), Err(Error::Config(_))));
    let m = HybridModel::build(spec, 0).unwrap();
    let cfg = TrainConfig { allow_dropout: true, max_epochs: 2, patience: 1, ..quick(0) };
    assert!(train(m, &b, &cfg).is_ok());
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let mut b = bundle(3, 20, 5);
    for s in &mut b.train {
        s.data.set(0, TARGET_COLUMN, f64::NAN);
    }
    let m = HybridModel::build(tiny_spec(Variant::LstmThenTransformer, 20), 0).unwrap();
    match train(m, &b, &quick(0)) {
        Err(Error::Divergence { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 1)),
        other => panic!("{:?}", other.map(|o| o.history)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { patience: 200, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    TrainConfig::default().validate().unwrap();
}

#[test]
fn oracle_scores_zero_and_zero_model_scores_target_rms() {
    let b = bundle(4, 30, 6);
    let r = evaluate(&Oracle, &b).unwrap();
    assert_eq!(r.rows.len(), 3);
    for row in &r.rows {
        assert!(row.rmse_m < 1e-12 && row.mae_m < 1e-12, "{row:?}");
    }

    struct Zero(Standardization);
    impl Predictor for Zero {
        fn label(&self) -> String {
            "zero".into()
        }
        fn predict_standardized(&self, s: &Tensor) -> crossing_profiler::Result<Vec<f64>> {
            Ok(self.0.standardize_target(&vec![0.0; s.rows()]))
        }
    }
    let r = evaluate(&Zero(b.standardization.clone()), &b).unwrap();
    for (row, split) in r.rows.iter().zip(Split::ALL) {
        let targets: Vec<f64> = b
            .split(split)
            .iter()
            .flat_map(|s| b.standardization.destandardize_target(&s.target()))
            .collect();
        let rms = (targets.iter().map(|t| t * t).sum::<f64>() / targets.len() as f64).sqrt();
        assert!((row.rmse_m - rms).abs() < 1e-10, "{} vs {rms}", row.rmse_m);
        assert!(row.mae_m <= row.rmse_m);
    }
}

#[test]
fn report_layouts() {
    let b = bundle(3, 20, 7);
    let r = evaluate(&Oracle, &b).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,dataset,downsample_factor,sequences,rmse_m,mae_m");
    assert!(lines[1].starts_with("Oracle,train,-,"));
    let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}

fn heldout(n: usize, seed: u64) -> Vec<AlignedSequence> {
    let cfg = SynthConfig::default();
    (0..n)
        .map(|i| {
            let mut scene = cfg.scene(seed, 500 + i);
            scene.crossing_id = format!("heldout-{i:02}");
            preprocess(&synthesize_crossing(&scene).unwrap()).unwrap()
        })
        .collect()
}

#[test]
fn generalization_protocol() {
    let b = bundle(3, 32, 8);
    let h = heldout(3, 8);
    let model = HybridModel::build(tiny_spec(Variant::LstmThenTransformer, 32), 0).unwrap();
    let stats = &b.standardization;
    let r = generalization_eval(&model, &h, &[1, 2], stats, 32, Some(&b)).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.rows[0].downsample_factor, None);
    assert_eq!(r.rows[1].downsample_factor, Some(2));

    // Factor 1 is plain evaluation of the resampled, standardized sequences.
    let plain: Vec<StandardizedSequence> = h
        .iter()
        .map(|s| {
            let r = resample_to_length(s, 32).unwrap();
            StandardizedSequence { source_id: r.source_id.clone(), spacing_m: r.spacing_m, data: stats.apply(&r.data) }
        })
        .collect();
    let manual = DatasetBundle { train: plain.clone(), validation: plain.clone(), test: plain, ..b.clone() };
    let ev = evaluate(&model, &manual).unwrap();
    assert!((ev.rows[0].rmse_m - r.rows[0].rmse_m).abs() < 1e-12);

    let o = generalization_eval(&Oracle, &h, &[1, 2], stats, 32, None).unwrap();
    assert!(o.rows.iter().all(|row| row.rmse_m < 1e-12 && row.mae_m < 1e-12));
}

#[test]
fn generalization_rejects_training_sources() {
    let b = bundle(3, 20, 9);
    let leaked = preprocess(&synthesize_corpus(&SynthConfig::default(), 9, 1).unwrap()[0]).unwrap();
    match generalization_eval(&Oracle, &[leaked], &[1], &b.standardization, 20, Some(&b)) {
        Err(Error::Leakage(id)) => assert_eq!(id, "crossing-000"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn factor_two_halves_the_rows() {
    let data: Vec<f64> = (0..800).map(|v| v as f64).collect();
    let s = AlignedSequence::new("x", Tensor::matrix(100, 8, data).unwrap(), 0.01).unwrap();
    let d = downsample_rows(&s, 2).unwrap();
    assert_eq!(d.len(), 50);
    assert_eq!(d.data.row(1), s.data.row(2));
    assert_eq!(downsample_rows(&s, 1).unwrap().data, s.data);
    assert!(downsample_rows(&s, 0).is_err());
}
