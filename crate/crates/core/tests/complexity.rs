//! Per-step cost should scale linearly in batch size, feature count, Monte-Carlo
//! draws and leaf count. Each doubling is timed on one thread and its ratio must
//! land within ±50% of 2.

use std::time::Instant;

use gphme::data::Dataset;
use gphme::features::KernelFamily;
use gphme::model::{LossConfig, ModelSpec, OmegaSharing, TreeModel};
use gphme::rng::rng_from;
use gphme::train::backward;
use rand::Rng;

struct Setup {
    batch: usize,
    features: usize,
    n_mc: usize,
    height: usize,
}

fn step_seconds(s: &Setup, data: &Dataset) -> f64 {
    let spec = ModelSpec::new(KernelFamily::Rbf, s.height, data.input_dim(), data.task())
        .with_features(s.features)
        .with_sharing(OmegaSharing::NisN);
    let model = TreeModel::new(&spec, 1).unwrap();
    let batch: Vec<usize> = (0..s.batch).collect();
    let noise = model.sample_noise(s.n_mc, 2).unwrap();
    let cfg = LossConfig::default();
    let mut times: Vec<f64> = (0..5)
        .map(|_| {
            let t = Instant::now();
            backward(&model, data, &batch, &cfg, &noise).unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[2]
}

#[test]
fn step_cost_is_linear() {
    let mut rng = rng_from(1, &[]);
    let d = 6;
    let n = 256;
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    let data = Dataset::classification("random", x, d, labels, 3).unwrap();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let base = || Setup { batch: 64, features: 32, n_mc: 1, height: 2 };
        let t0 = step_seconds(&base(), &data);
        let cases = [
            ("batch size", Setup { batch: 128, ..base() }),
            ("features", Setup { features: 64, ..base() }),
            ("MC draws", Setup { n_mc: 2, ..base() }),
            ("2^h", Setup { height: 3, ..base() }),
        ];
        for (name, setup) in cases {
            let ratio = step_seconds(&setup, &data) / t0;
            eprintln!("{name}: doubling ratio {ratio:.2}");
            assert!((1.0..=3.0).contains(&ratio), "{name}: doubling ratio {ratio:.2} outside [1, 3]");
        }
    });
}
