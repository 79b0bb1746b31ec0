// scratch experiment driver (deleted before release)
use irab_core::scene::{generate_scene, split_dataset, write_dataset, SceneSpec};
use irab_core::train::{run_training, DatasetSpec, Method, TrainConfig};
use irab_core::nn::ModelConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let methods: Vec<Method> = args.get(1).map(|s| s.split(',').map(|m| m.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![Method::LabelOnly, Method::Irast]);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(25);
    let steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(60);
    let lambda: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let sigma: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seed0: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0);

    let data_dir = std::path::PathBuf::from("/tmp/probe_data");
    if !data_dir.join("split.json").exists() {
        let spec = DatasetSpec::benchmark();
        let scenes: Vec<_> = (0..spec.total() as u64)
            .map(|i| generate_scene(i.wrapping_mul(0x9E3779B9), &spec.scene).unwrap())
            .collect();
        let split = split_dataset(scenes, spec.n_labeled, spec.n_unlabeled, spec.n_test, 0).unwrap();
        write_dataset(&split, &spec.scene, &data_dir).unwrap();
        println!("dataset written");
    }

    for method in methods {
        let mut maes = Vec::new();
        for seed in seed0..seed0 + seeds {
            let mut cfg = TrainConfig::default_desk(method, data_dir.clone(), seed);
            cfg.model = ModelConfig::slim_desk();
            cfg.epochs = epochs;
            cfg.steps_per_epoch = steps;
            cfg.lr = lr;
            cfg.lr_halve_epochs = (epochs / 3).max(1);
            cfg.eval_epochs = 5;
            cfg.sigma = sigma;
            cfg.weights = irab_core::loss::LossWeights { lambda1: lambda, lambda2: lambda };
            let t = Instant::now();
            let run_dir = std::path::PathBuf::from(format!("/tmp/probe_runs/{}-{}", method, seed));
            let (summary, _) = run_training(&cfg, &run_dir).unwrap();
            println!(
                "{:<14} seed {}  val {:6.2}  test MAE {:6.2}  MSE {:6.2}  [{:5.1}s]  pp={:?} pc={:?}",
                method.to_string(), seed, summary.best_val_mae, summary.test_mae, summary.test_mse,
                t.elapsed().as_secs_f64(), summary.pseudo_precision, summary.pseudo_coverage,
            );
            maes.push(summary.test_mae);
        }
        maes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("== {:<14} median test MAE {:.2}", method.to_string(), maes[maes.len()/2]);
    }
}
