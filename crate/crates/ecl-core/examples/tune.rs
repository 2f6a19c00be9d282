// scratch: final verification of criteria 3/4/6 constants
use ecl_core::collab::*;
use ecl_core::expertnet::ExpertArch;
use ecl_core::losses::KDConfig;
use ecl_core::ltdata::*;
use ecl_core::metrics::*;

fn desk_dataset(seed: u64) -> SyntheticDataset {
    let spec = LongTailSpec { num_classes: 10, n_max: 500, gamma: 100.0, seed };
    build_synthetic_lt_dataset(&spec, 16, 2.5, 300).unwrap()
}

fn desk_config(ds: &SyntheticDataset, k: usize, alpha: f64, beta: f64, tau_bc: f64, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        num_experts: k,
        epochs,
        batch_size: 64,
        learning_rate: 0.05,
        twin_momentum: 0.99,
        prior: ClassPrior::from_counts(&ds.counts, tau_bc).unwrap(),
        kd: KDConfig { alpha, beta, ..KDConfig::default() },
        seed,
        optimizer: OptimizerKind::SgdMomentum,
        sgd_momentum: 0.9,
        weight_decay: 0.0,
        jitter_sigma: 0.1,
        arch: ExpertArch { input_dim: 16, encoder_widths: vec![64, 64], num_classes: 10, embed_dim: 16 },
        queue_size: 256,
        bkt_scope: BktScope::Student,
        feature_kd_weighted: false,
    }
}

fn main() {
    // criterion 3 at 50 epochs, tpc=300
    let mut wins3 = 0;
    for seed in 0..5u64 {
        let ds = desk_dataset(1000 + seed);
        let groups = group_classes(&ds.counts).unwrap();
        let few = |cfg: &TrainConfig| -> f64 {
            let m = InferenceModel::from_state(&fit(&ds, cfg).unwrap());
            let z = predict_logits(&m, PredictMode::Single(0), &ds.test_x.view()).unwrap();
            let mut probs = ndarray::Array2::<f64>::zeros(z.dim());
            for (row, mut dst) in z.rows().into_iter().zip(probs.rows_mut()) {
                dst.assign(&ecl_core::losses::posthoc_adjust(&row, &cfg.prior, 0.0).unwrap());
            }
            evaluate(&probs.view(), &ds.test_y, &groups).unwrap().acc_few.unwrap()
        };
        let f_bc = few(&desk_config(&ds, 1, 0.0, 0.0, 1.0, 50, seed));
        let f_ce = few(&desk_config(&ds, 1, 0.0, 0.0, 0.0, 50, seed));
        let w = f_bc > f_ce;
        wins3 += w as u32;
        println!("c3 seed {seed}: BC few {f_bc:.4} CE few {f_ce:.4} win={w}");
    }
    println!("c3 wins: {wins3}/5\n");
}
