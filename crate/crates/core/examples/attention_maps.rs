//! Last-block `[CLS]` attention over the particles of a few jets, printed
//! per head next to each particle's position and momentum share.
//!
//! cargo run --release --example attention_maps -- [student_checkpoint_dir]

use jetdistill::augment::AugmentConfig;
use jetdistill::distill::{pretrain, DistillConfig};
use jetdistill::jetdata::{generate_synthetic, SyntheticSpec};
use jetdistill::network::{extract_cls_attention, load_checkpoint, NetworkConfig, Preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(&SyntheticSpec::three_class(), 200, 7)?;
    let mut net = NetworkConfig::preset(Preset::Small);
    net.dropout = 0.0;
    let params = match std::env::args().nth(1) {
        Some(dir) => load_checkpoint::<f32>(dir.as_ref())?.params,
        None => {
            let cfg = DistillConfig {
                batch_size: 32,
                epochs: 4,
                warmup_epochs: 1.0,
                base_lr: 1e-3,
                log_every: 1000,
                ..DistillConfig::default()
            };
            pretrain(&data, &net, &cfg, &AugmentConfig::default(), 1, None, None)?
                .state
                .student
        }
    };
    for jet in data.jets.iter().take(3) {
        let att = extract_cls_attention(jet, &params)?;
        let h = params.config.n_heads;
        let n = jet.capacity();
        println!(
            "class {} ({} particles)",
            data.class_names[jet.label],
            jet.valid_count()
        );
        print!("  {:>7} {:>7} {:>6}", "eta", "phi", "pt");
        for k in 0..h {
            print!(" {:>7}", format!("head{k}"));
        }
        println!();
        for (s, p) in jet.valid().enumerate().take(8) {
            print!("  {:>7.3} {:>7.3} {:>6.3}", p.eta, p.phi, p.pt);
            for k in 0..h {
                print!(" {:>7.3}", att.data()[k * n + s]);
            }
            println!();
        }
    }
    Ok(())
}
