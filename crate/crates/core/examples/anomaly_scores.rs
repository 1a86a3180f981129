//! Background-only pre-training on q and g, then the four anomaly scores of
//! held-out w and t jets against a q/g reference set.
//!
//! cargo run --release --example anomaly_scores -- [student_checkpoint_dir]

use jetdistill::anomaly::{evaluate_anomaly, AnomalyConfig, ReferenceSet, ScoreMetric};
use jetdistill::augment::AugmentConfig;
use jetdistill::distill::{pretrain, DistillConfig};
use jetdistill::downstream::{embed_dataset, embed_jets};
use jetdistill::jetdata::{generate_synthetic, split_dataset, Jet, SyntheticSpec};
use jetdistill::network::{load_checkpoint, NetworkConfig, Preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(&SyntheticSpec::four_class(), 250, 7)?;
    let splits = split_dataset(&data, (0.7, 0.1, 0.2), 0)?;
    let background = ["q".to_string(), "g".to_string()];
    let bg_train = splits.train.filter_classes(&background)?;
    let mut net = NetworkConfig::preset(Preset::Small);
    net.dropout = 0.0;
    let params = match std::env::args().nth(1) {
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
                &bg_train,
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
    let cfg = AnomalyConfig::default();
    let reference = ReferenceSet::fit(&embed_dataset(&bg_train, &params)?, &cfg)?;
    let test = &splits.test;
    let jets: Vec<&Jet> = test.jets.iter().collect();
    let z = embed_jets(&jets, &params)?;
    let bg: Vec<usize> = background
        .iter()
        .filter_map(|b| test.class_index(b))
        .collect();
    println!("reference: {} background jets", reference.len());
    for metric in ScoreMetric::ALL {
        let s = reference.score_all(&z, metric, &cfg)?;
        let of = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
            s.iter()
                .zip(&test.jets)
                .filter(|(_, j)| keep(j.label))
                .map(|(v, _)| *v)
                .collect()
        };
        let signals: Vec<(String, Vec<f64>)> = ["w", "t"]
            .iter()
            .map(|n| {
                let c = test.class_index(n).expect("class present");
                (n.to_string(), of(&|l| l == c))
            })
            .collect();
        let ev = evaluate_anomaly(&of(&|l| bg.contains(&l)), &signals)?;
        let per: Vec<String> = ev
            .per_signal
            .iter()
            .map(|p| format!("{} {:.3}", p.signal, p.auc))
            .collect();
        println!(
            "{:<12} AUC {}  combined {:.3}",
            metric.name(),
            per.join("  "),
            ev.combined
        );
    }
    Ok(())
}
