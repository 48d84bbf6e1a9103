use std::io::Cursor;
use std::path::{Path, PathBuf};

use earth::checkpoint::{read_checkpoint, write_checkpoint};
use earth::{checkpoint, config, csv_io, dtw_cache, metrics, Error};
use earth_core::data::{generate_synthetic, Normalizer, SplitKind, SynthConfig};
use earth_core::model::{predict_window, ModelParams};
use earth_core::tensor::Tensor;
use earth_core::train::{self, Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use proptest::prelude::*;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn format_line(e: Error) -> u64 {
    match e {
        Error::Format { line, .. } => line,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn series_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.csv", "a,b\n1,2\n3,4.5\n0,6\n");
    let t = csv_io::read_series(&p).unwrap();
    assert_eq!(t.region_names, ["a", "b"]);
    assert_eq!(t.series.shape(), [2, 3]);
    assert_eq!(t.series.row(1), [2.0, 4.5, 6.0]);
}

#[test]
fn series_csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("1,2\n3,4\n", 1),
        ("a,b\n1,2\n3\n", 3),
        ("a,b\n1,2\n3,-1\n", 3),
        ("a,b\n1,x\n", 2),
        ("a,a\n1,2\n", 1),
        ("a,b\n1,2\n\n4,5,6\n", 4),
    ];
    for (text, line) in cases {
        let p = write(dir.path(), "bad.csv", text);
        assert_eq!(format_line(csv_io::read_series(&p).unwrap_err()), line, "{text:?}");
    }
    let empty = write(dir.path(), "empty.csv", "");
    assert!(matches!(csv_io::read_series(&empty), Err(Error::Format { .. })));
}

#[test]
fn adjacency_is_symmetric_and_deduplicated() {
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let p = write(dir.path(), "adj.csv", "src,dst\na,b\nb,a\na,b\n");
    let adj = csv_io::read_adjacency(&p, &names).unwrap();
    assert_eq!(adj.get(0, 1), 1.0);
    assert_eq!(adj.get(1, 0), 1.0);
    assert_eq!(adj.data().iter().sum::<f64>(), 2.0);

    let unknown = write(dir.path(), "u.csv", "a,b\nb,zz\n");
    assert_eq!(format_line(csv_io::read_adjacency(&unknown, &names).unwrap_err()), 2);
    let looped = write(dir.path(), "l.csv", "src,dst\na,b\nc,c\n");
    assert_eq!(format_line(csv_io::read_adjacency(&looped, &names).unwrap_err()), 3);
    let wide = write(dir.path(), "w.csv", "a,b,c\n");
    assert_eq!(format_line(csv_io::read_adjacency(&wide, &names).unwrap_err()), 1);
}

#[test]
fn load_dataset_applies_split_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("x,y\n");
    for t in 0..10 {
        text.push_str(&format!("{t},{}\n", 2 * t));
    }
    let s = write(dir.path(), "s.csv", &text);
    let a = write(dir.path(), "a.csv", "x,y\n");
    let ds = csv_io::load_dataset(&s, &a, 0.6, 0.2).unwrap();
    assert_eq!(ds.splits.get(SplitKind::Train), 0..6);
    assert_eq!(ds.splits.get(SplitKind::Test), 8..10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn series_round_trips_bitwise(values in prop::collection::vec(0.0..1e9f64, 3..60)) {
        let dir = tempfile::tempdir().unwrap();
        let len = values.len() / 3;
        let series = Tensor::matrix(3, len, values[..3 * len].to_vec()).unwrap();
        let names: Vec<String> = ["p", "q", "r"].map(String::from).to_vec();
        let p = dir.path().join("s.csv");
        csv_io::write_series(&p, &names, &series).unwrap();
        let back = csv_io::read_series(&p).unwrap();
        prop_assert_eq!(back.region_names, names);
        prop_assert_eq!(back.series, series);
    }

    #[test]
    fn adjacency_round_trips(bits in any::<u32>()) {
        let dir = tempfile::tempdir().unwrap();
        let n = 5;
        let names: Vec<String> = (0..n).map(|v| format!("n{v}")).collect();
        let mut adj = Tensor::zeros(&[n, n]);
        let mut k = 0;
        for u in 0..n {
            for v in u + 1..n {
                if bits >> k & 1 == 1 {
                    adj.set(u, v, 1.0);
                    adj.set(v, u, 1.0);
                }
                k += 1;
            }
        }
        let p = dir.path().join("a.csv");
        csv_io::write_adjacency(&p, &names, &adj).unwrap();
        prop_assert_eq!(csv_io::read_adjacency(&p, &names).unwrap(), adj);
    }
}

fn sample_checkpoint() -> (Checkpoint, earth_core::data::EpidemicDataset) {
    let ds = generate_synthetic(&SynthConfig::benchmark(4, 120, 0.02, 1)).unwrap();
    let cfg = TrainConfig {
        hidden: 8,
        window: 10,
        n_heads: 2,
        edge_threshold: Some(0.25),
        grad_clip: Some(0.5),
        lr: 0.1 + 0.2,
        ..TrainConfig::default()
    };
    let graph = train::build_graph(&ds, 2).unwrap();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg,
        epoch: 3,
        best_val_rmse: 1.0 / 3.0,
        normalizer: Normalizer::fit(&ds),
        region_names: ds.region_names.clone(),
        adjacency: graph.adjacency.clone(),
        semantic: graph.semantic.clone(),
        params: ModelParams::init(8, 2, 11),
    };
    (ckpt, ds)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (ckpt, ds) = sample_checkpoint();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ckpt).unwrap();
    assert_eq!(&buf[..8], b"EARTHCKP");
    assert_eq!(&buf[8..12], &CHECKPOINT_VERSION.to_le_bytes());
    let back = read_checkpoint(Cursor::new(&buf)).unwrap();
    assert_eq!(back, ckpt);

    let norm = &ckpt.normalizer;
    let windows = earth_core::data::make_windows(&ds, norm, SplitKind::Test, 10, 5, 0.0, 0).unwrap();
    let run = |c: &Checkpoint| {
        predict_window(&c.params, &c.graph().unwrap(), &windows[0], &c.config.model_config()).unwrap()
    };
    let (a, b) = (run(&ckpt), run(&back));
    assert_eq!(
        a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );

    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (ckpt, _) = sample_checkpoint();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ckpt).unwrap();

    let mut magic = buf.clone();
    magic[0] = b'X';
    assert!(read_checkpoint(Cursor::new(&magic)).unwrap_err().contains("magic"));
    let mut version = buf.clone();
    version[8] = 99;
    assert!(read_checkpoint(Cursor::new(&version)).unwrap_err().contains("version"));
    for cut in [4, 20, buf.len() / 2, buf.len() - 1] {
        assert!(read_checkpoint(Cursor::new(&buf[..cut])).is_err());
    }
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(read_checkpoint(Cursor::new(&trailing)).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, &magic).unwrap();
    assert!(matches!(checkpoint::load(&p), Err(Error::File { .. })));
}

#[test]
fn dtw_cache_hits_only_for_the_same_data() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dtw.bin");
    let ds = generate_synthetic(&SynthConfig::benchmark(4, 120, 0.02, 1)).unwrap();
    assert!(dtw_cache::load(&p, &ds).unwrap().is_none());
    let (d, hit) = dtw_cache::load_or_compute(&p, &ds).unwrap();
    assert!(!hit);
    assert_eq!(d, train::semantic_distances(&ds).unwrap());
    let (again, hit) = dtw_cache::load_or_compute(&p, &ds).unwrap();
    assert!(hit);
    assert_eq!(again, d);

    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..8], b"EARTHDTW");
    assert_eq!(bytes.len(), 8 + 4 + 32 + 8 + 16 * 8);

    let other = generate_synthetic(&SynthConfig::benchmark(4, 120, 0.02, 2)).unwrap();
    assert_ne!(dtw_cache::dataset_hash(&ds), dtw_cache::dataset_hash(&other));
    assert!(dtw_cache::load(&p, &other).unwrap().is_none());

    std::fs::write(&p, &bytes[..30]).unwrap();
    assert!(dtw_cache::load(&p, &ds).is_err());
}

#[test]
fn train_config_toml() {
    let dir = Path::new("cfg.toml");
    let cfg = config::parse_train_config(
        dir,
        "lr = 0.01\nhidden = 16\nsolver = \"euler\"\ngraph = \"static\"\npeak_threshold = \"absolute:12.5\"\ngrad_clip = 2.0\n",
    )
    .unwrap();
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.hidden, 16);
    assert_eq!(cfg.solver, earth_core::ode::Method::Euler);
    assert_eq!(cfg.graph, earth_core::model::GraphMode::Static);
    assert_eq!(cfg.peak_threshold, train::PeakThreshold::Absolute(12.5));
    assert_eq!(cfg.grad_clip, Some(2.0));
    assert_eq!(cfg.window, TrainConfig::default().window);

    let full = config::train_config_to_toml(&TrainConfig::default());
    assert_eq!(config::parse_train_config(dir, &full).unwrap(), TrainConfig::default());

    let err = config::parse_train_config(dir, "lr = 0.1\nlearning_rate = 3\n").unwrap_err();
    assert_eq!(format_line(err), 2);
    assert!(config::parse_train_config(dir, "hidden = 0\n").is_err());
}

#[test]
fn synth_config_presets_and_full_form() {
    let p = Path::new("s.toml");
    let preset = config::parse_synth_config(p, "preset = \"benchmark\"\nseed = 4\n").unwrap();
    assert_eq!(preset, SynthConfig::benchmark(8, 300, 0.02, 4));
    assert!(config::parse_synth_config(p, "preset = \"other\"\n").is_err());

    let full = "regions = 2\nlength = 50\ncoupling = [[0.0, 0.1], [0.1, 0.0]]\n\
                beta_schedule = [{ start = 0.0, beta = 0.3 }]\ngamma = 0.1\n\
                population = [1e5, 2e5]\ninitial_infected = [10.0, 0.0]\nnoise_rel = 0.0\nseed = 1\n";
    let cfg = config::parse_synth_config(p, full).unwrap();
    assert_eq!(cfg.regions, 2);
    assert_eq!(cfg.train_frac, 0.6);
    assert!(config::parse_synth_config(p, "regions = 2\n").is_err());
}

#[test]
fn metrics_lines_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    let rec = metrics::MetricsRecord {
        dataset: "synthetic".into(),
        horizon: 5,
        seed: 2,
        rmse: 0.1 + 0.2,
        peak_time_error: None,
        wall_time: 1.5,
        persistence_rmse: 3.0,
        persistence_peak_time_error: Some(4.0),
        epoch: Some(7),
    };
    metrics::append(&p, &rec).unwrap();
    metrics::append(&p, &rec).unwrap();
    let back = metrics::read_all(&p).unwrap();
    assert_eq!(back, vec![rec.clone(), rec]);
    let line = std::fs::read_to_string(&p).unwrap();
    for key in ["dataset", "horizon", "seed", "rmse", "peak_time_error", "wall_time"] {
        assert!(line.contains(&format!("\"{key}\"")));
    }
}
