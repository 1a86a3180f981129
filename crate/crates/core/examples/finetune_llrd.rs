//! Fine-tuning with layer-wise LR decay on 10% of the labels, next to the
//! same architecture trained from scratch over the same LR grid.
//!
//! cargo run --release --example finetune_llrd -- [student_checkpoint_dir]

use jetdistill::augment::AugmentConfig;
use jetdistill::distill::{pretrain, DistillConfig};
use jetdistill::downstream::{
    accuracy, grid_search, lr_groups, predict, scratch_baseline, FinetuneConfig, FinetuneGrid,
};
use jetdistill::jetdata::{generate_synthetic, split_dataset, Jet, SyntheticSpec};
use jetdistill::network::{load_checkpoint, NetworkConfig, Preset};
use jetdistill::pipeline::label_subset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(&SyntheticSpec::three_class(), 300, 7)?;
    let splits = split_dataset(&data, (0.7, 0.1, 0.2), 0)?;
    let mut net = NetworkConfig::preset(Preset::Small);
    net.dropout = 0.0;
    let pretrained = match std::env::args().nth(1) {
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
    for g in lr_groups(&pretrained.with_classifier(3, 0)?, 1e-3, 0.7) {
        println!("depth {} lr {:.2e}: {}", g.depth, g.lr, g.names.join(", "));
    }

    let labelled = label_subset(&splits.train, 0.1, 0);
    let grid = FinetuneGrid {
        decays: vec![0.6, 0.8],
        base_lrs: vec![4e-4, 2e-3],
    };
    let cfg = FinetuneConfig {
        epochs: 20,
        batch_size: 16,
        ..FinetuneConfig::default()
    };
    let tuned = grid_search(&pretrained, 3, &labelled, &splits.val, &grid, &cfg)?;
    let scratch = scratch_baseline(&pretrained.config, 3, &labelled, &splits.val, &grid, &cfg)?;
    let jets: Vec<&Jet> = splits.test.jets.iter().collect();
    let labels = splits.test.labels();
    for (name, r) in [("fine-tuned", &tuned), ("scratch", &scratch)] {
        let acc = accuracy(&predict(&r.best.params, &jets)?.argmax_rows(), &labels);
        println!(
            "{name:<10} {} labelled jets, best decay {} lr {:.0e} (val {:.3}), test acc {acc:.3}",
            labelled.len(),
            r.best_point.llrd_decay,
            r.best_point.base_lr,
            r.best_point.val_accuracy
        );
    }
    Ok(())
}
