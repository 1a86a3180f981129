//! Pre-trains the small model on synthetic three-class jets and prints the
//! monitored quantities once per epoch.
//!
//! cargo run --release --example pretrain_synthetic -- [jets_per_class] [epochs] [out_dir]

use std::time::Instant;

use jetdistill::augment::AugmentConfig;
use jetdistill::distill::{pretrain, DistillConfig, StepMetrics};
use jetdistill::jetdata::{generate_synthetic, SyntheticSpec};
use jetdistill::network::{NetworkConfig, Preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let per_class: usize = args.first().map_or(Ok(667), |s| s.parse())?;
    let epochs: usize = args.get(1).map_or(Ok(30), |s| s.parse())?;
    let out = args.get(2).map(std::path::PathBuf::from);

    let data = generate_synthetic(&SyntheticSpec::three_class(), per_class, 7)?;
    let cfg = DistillConfig {
        batch_size: 32,
        epochs,
        warmup_epochs: 3.0,
        base_lr: 1e-3,
        log_every: 10,
        ..DistillConfig::default()
    };
    let mut net = NetworkConfig::preset(Preset::Small);
    net.dropout = 0.0;
    let started = Instant::now();
    let mut last_epoch = u64::MAX;
    let mut report = |m: &StepMetrics| {
        if m.epoch != last_epoch {
            last_epoch = m.epoch;
            println!(
                "epoch {:>3} step {:>5} lr {:.2e} loss {:.4} (part {:.4} cls {:.4} koleo {:.4}) H_t {:.3} |c| {:.3}  {:.0}s",
                m.epoch,
                m.step,
                m.lr,
                m.total,
                m.l_part,
                m.l_cls,
                m.l_koleo,
                m.teacher_cls_entropy,
                m.center_cls_norm,
                started.elapsed().as_secs_f64()
            );
        }
    };
    let run = pretrain(
        &data,
        &net,
        &cfg,
        &AugmentConfig::default(),
        1,
        out.as_deref(),
        Some(&mut report),
    )?;
    println!(
        "{} steps in {:.1}s, final loss {:.4}",
        run.state.step,
        started.elapsed().as_secs_f64(),
        run.metrics.last().map_or(f64::NAN, |m| m.total)
    );
    Ok(())
}
