use inbox_core::eval::evaluate_all;
use inbox_core::synth::{generate_synthetic, SynthConfig};
use inbox_core::training::{run_pipeline, TrainConfig};

#[test]
#[ignore]
fn tune() {
    for (lr, n_neg) in [(5e-3, 8usize), (5e-3, 32), (1e-2, 8)] {
        let mut fulls = Vec::new();
        let mut abls = Vec::new();
        for seed in 1..=3u64 {
            let scfg = SynthConfig { seed, ..SynthConfig::default() };
            let (ds, _gt) = generate_synthetic(&scfg).unwrap();
            let cfg = TrainConfig {
                dim: 32, margin: 12.0, batch_size: 256, n_negatives: n_neg, base_lr: lr,
                epochs_pretrain: 30, epochs_intersection: 30, epochs_recommend: 15, seed,
                ..TrainConfig::default()
            };
            let result = run_pipeline(&ds, &cfg, None).unwrap();
            let report = evaluate_all(&result.store, &ds, 20, &cfg.interest_config(), false).unwrap();
            fulls.push(report.recall);
            let cfg_ab = TrainConfig { skip_pretrain: true, skip_intersection: true, ..cfg.clone() };
            let result_ab = run_pipeline(&ds, &cfg_ab, None).unwrap();
            let report_ab = evaluate_all(&result_ab.store, &ds, 20, &cfg_ab.interest_config(), false).unwrap();
            abls.push(report_ab.recall);
        }
        println!("== lr {:.0e} n_neg {}: full {:.4} {:.4} {:.4} mean {:.4} | ablated mean {:.4}",
            lr, n_neg, fulls[0], fulls[1], fulls[2],
            fulls.iter().sum::<f64>() / 3.0, abls.iter().sum::<f64>() / 3.0);
    }
}
