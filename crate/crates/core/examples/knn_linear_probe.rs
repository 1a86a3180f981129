//! Frozen-embedding probes on three synthetic classes: k-NN and linear
//! probes on a briefly pre-trained encoder against a randomly initialized one.
//!
//! cargo run --release --example knn_linear_probe -- [student_checkpoint_dir]

use jetdistill::augment::AugmentConfig;
use jetdistill::distill::{pretrain, DistillConfig};
use jetdistill::downstream::{
    classification_metrics, embed_dataset, knn_probe, linear_probe, LinearProbeConfig, DEFAULT_K,
};
use jetdistill::jetdata::{generate_synthetic, split_dataset, SyntheticSpec};
use jetdistill::network::{load_checkpoint, ModelParams, NetworkConfig, Preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(&SyntheticSpec::three_class(), 300, 7)?;
    let splits = split_dataset(&data, (0.7, 0.1, 0.2), 0)?;
    let mut net = NetworkConfig::preset(Preset::Small);
    net.dropout = 0.0;
    let trained = match std::env::args().nth(1) {
        Some(dir) => load_checkpoint::<f32>(dir.as_ref())?.params,
        None => {
            let cfg = DistillConfig {
                batch_size: 32,
                epochs: 8,
                warmup_epochs: 3.0,
                base_lr: 1e-3,
                log_every: 1000,
                ..DistillConfig::default()
            };
            pretrain(
                &splits.train,
                &net,
                &cfg,
                &AugmentConfig::default(),
                1,
                None,
                None,
            )?
            .state
            .student
        }
    };
    let random = ModelParams::<f32>::init(&trained.config, None, 1)?;
    for (name, params) in [("pre-trained", &trained), ("random init", &random)] {
        let train = embed_dataset(&splits.train, params)?;
        let test = embed_dataset(&splits.test, params)?;
        let knn = knn_probe(&train, &test.vectors, DEFAULT_K, 3, true)?;
        let lin = linear_probe(&train, &test.vectors, 3, &LinearProbeConfig::default())?;
        let mk = classification_metrics(&knn.scores, &test.labels)?;
        let ml = classification_metrics(&lin.scores, &test.labels)?;
        println!(
            "{name:<12} k-NN acc {:.3}  linear acc {:.3}  linear AUC per class {:?}",
            mk.accuracy,
            ml.accuracy,
            ml.auc
                .iter()
                .map(|a| a.map(|v| (v * 1000.0).round() / 1000.0))
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
