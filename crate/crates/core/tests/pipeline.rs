use earth_core::data::{
    self, generate_synthetic, make_windows, simulate_synthetic, BetaChange, EpidemicDataset, Normalizer, SplitKind,
    Splits, SynthConfig,
};
use earth_core::eano::ClassicalSir;
use earth_core::tensor::Tensor;
use earth_core::train::{self, TrainConfig};
use proptest::prelude::*;

fn dataset(n: usize, len: usize, values: &[f64], train: f64, val: f64) -> EpidemicDataset {
    let data: Vec<f64> = values.iter().cycle().take(n * len).copied().collect();
    EpidemicDataset::new(
        (0..n).map(|v| format!("r{v}")).collect(),
        Tensor::matrix(n, len, data).unwrap(),
        Tensor::zeros(&[n, n]),
        Splits::chronological(len, train, val).unwrap(),
    )
    .unwrap()
}

fn single_region(beta: Vec<BetaChange>, length: usize) -> SynthConfig {
    SynthConfig {
        regions: 1,
        length,
        coupling: vec![vec![0.0]],
        beta_schedule: beta,
        beta_scale: vec![],
        gamma: 0.1,
        population: vec![1e6],
        initial_infected: vec![10.0],
        noise_rel: 0.0,
        seed: 1,
        train_frac: 0.6,
        val_frac: 0.2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalizer_round_trips(values in prop::collection::vec(0.0..1e4f64, 8..64), x in 0.0..1e5f64) {
        let ds = dataset(2, 40, &values, 0.6, 0.2);
        let norm = Normalizer::fit(&ds);
        for v in 0..2 {
            prop_assert!(norm.std[v] >= Normalizer::STD_FLOOR);
            let back = norm.denormalize(v, norm.normalize(v, x));
            prop_assert!((back - x).abs() <= 1e-10 * x.max(1.0));
        }
    }

    #[test]
    fn normalizer_ignores_later_splits(values in prop::collection::vec(0.0..100.0f64, 60), bump in 1.0..1e6f64) {
        let ds = dataset(1, 60, &values, 0.5, 0.25);
        let mut later = values.clone();
        for x in &mut later[30..] {
            *x += bump;
        }
        let bumped = dataset(1, 60, &later, 0.5, 0.25);
        prop_assert_eq!(Normalizer::fit(&ds), Normalizer::fit(&bumped));
    }

    #[test]
    fn windows_never_cross_splits(
        len in 60usize..160,
        train in 0.4..0.7f64,
        window in 3usize..10,
        horizon in 1usize..6,
        rate in 0.0..0.6f64,
    ) {
        let ds = dataset(2, len, &[1.0, 2.0, 3.0], train, 0.15);
        let norm = Normalizer::fit(&ds);
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let range = ds.splits.get(kind);
            let Ok(ws) = make_windows(&ds, &norm, kind, window, horizon, rate, 9) else {
                prop_assert!(range.len() < window + horizon);
                continue;
            };
            prop_assert_eq!(ws.len(), range.len() - window - horizon + 1);
            for w in ws {
                prop_assert!(w.start >= range.start);
                prop_assert!(w.last_input_index() + horizon < range.end);
                for v in 0..2 {
                    let times = w.knot_times(v);
                    prop_assert_eq!(times[0], 0.0);
                    prop_assert_eq!(*times.last().unwrap(), (window - 1) as f64);
                }
            }
        }
    }

    #[test]
    fn peak_error_with_low_threshold_is_mae(pred in prop::collection::vec(0.0..10.0f64, 1..20), shift in 0.0..5.0f64) {
        let truth: Vec<f64> = pred.iter().map(|x| x + shift).collect();
        let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
        let p = data::peak_time_error(&pred, &truth, min - 1.0).unwrap();
        prop_assert!((p - data::mae(&pred, &truth).unwrap()).abs() < 1e-12);
        prop_assert!((data::rmse(&pred, &truth).unwrap() - data::rmse(&truth, &pred).unwrap()).abs() == 0.0);
    }
}

#[test]
fn synthetic_data_is_reproducible() {
    let cfg = SynthConfig::benchmark(8, 300, 0.02, 42);
    let a = generate_synthetic(&cfg).unwrap();
    let b = generate_synthetic(&cfg).unwrap();
    let bits = |d: &EpidemicDataset| d.series.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(a.series.data().iter().all(|x| *x >= 0.0));
    let c = generate_synthetic(&SynthConfig::benchmark(8, 300, 0.02, 43)).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn decoupled_region_follows_classical_sir() {
    let cfg = single_region(vec![BetaChange { start: 0.0, beta: 0.3 }], 80);
    let traj = simulate_synthetic(&cfg).unwrap();
    let sir = ClassicalSir { beta: 0.3, gamma: 0.1, population: 1e6 };
    let reference = sir.simulate(1e6 - 10.0, 10.0, 0.0, 0.1, 800).unwrap();
    for t in 0..=80 {
        let (s, i, r) = reference[10 * t];
        assert!((traj.s[t][0] - s).abs() < 1e-6, "S at {t}");
        assert!((traj.i[t][0] - i).abs() < 1e-6, "I at {t}");
        assert!((traj.r[t][0] - r).abs() < 1e-6, "R at {t}");
    }
    for t in 0..80 {
        let drop = traj.s[t][0] - traj.s[t + 1][0];
        assert!((traj.incidence[0][t] - drop).abs() < 1e-6 * drop.max(1.0));
    }
}

#[test]
fn symmetric_setup_gives_identical_regions() {
    let mut cfg = SynthConfig::benchmark(4, 100, 0.0, 3);
    cfg.population = vec![1e6; 4];
    cfg.initial_infected = vec![100.0; 4];
    let ds = generate_synthetic(&cfg).unwrap();
    for v in 1..4 {
        assert_eq!(ds.region(v), ds.region(0));
    }
    assert_eq!(ds.adjacency.get(0, 1), 1.0);
    assert_eq!(ds.adjacency.get(0, 2), 0.0);
}

#[test]
fn halving_beta_slows_growth() {
    let cfg = single_region(
        vec![BetaChange { start: 0.0, beta: 0.4 }, BetaChange { start: 20.0, beta: 0.2 }],
        40,
    );
    let traj = simulate_synthetic(&cfg).unwrap();
    let growth = |t: usize| (traj.i[t + 1][0] / traj.i[t][0]).ln();
    assert!(growth(22) < growth(17));
    // Closed-form rates β·S/P − γ before and after the change.
    let s = traj.s[20][0] / 1e6;
    assert!((growth(17) - (0.4 * s - 0.1)).abs() < 0.01);
    assert!((growth(22) - (0.2 * s - 0.1)).abs() < 0.01);
}

#[test]
fn training_lowers_the_loss() {
    let ds = generate_synthetic(&SynthConfig::benchmark(4, 150, 0.02, 5)).unwrap();
    let cfg = TrainConfig {
        hidden: 8,
        window: 10,
        horizon: 5,
        epochs: 30,
        batch_size: 8,
        lr: 0.005,
        grad_clip: Some(1.0),
        substeps: 1,
        n_heads: 2,
        patience: 100,
        seed: 2,
        ..TrainConfig::default()
    };
    let graph = train::build_graph(&ds, cfg.top_k).unwrap();
    let out = train::train(&ds, &graph, &cfg, |_| {}).unwrap();
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "train loss {first} -> {last}");
    assert_eq!(out.history.len(), 30);
}

#[test]
fn repeat_statistics() {
    let (mean, std) = train::mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(mean, 3.0);
    assert!((std - 2.5f64.sqrt()).abs() < 1e-15);
}
