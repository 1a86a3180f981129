//! 2-D PCA of frozen embeddings, written as a scatter CSV and summarized by
//! per-class centroids.
//!
//! cargo run --release --example project2d -- [student_checkpoint_dir] [out.csv]

use jetdistill::augment::AugmentConfig;
use jetdistill::distill::{pretrain, DistillConfig};
use jetdistill::downstream::{embed_dataset, pca_2d};
use jetdistill::jetdata::{generate_synthetic, SyntheticSpec};
use jetdistill::network::{load_checkpoint, NetworkConfig, Preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = generate_synthetic(&SyntheticSpec::three_class(), 200, 7)?;
    let mut net = NetworkConfig::preset(Preset::Small);
    net.dropout = 0.0;
    let params = match args.first().filter(|a| !a.ends_with(".csv")) {
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
            pretrain(&data, &net, &cfg, &AugmentConfig::default(), 1, None, None)?
                .state
                .student
        }
    };
    let emb = embed_dataset(&data, &params)?;
    let p = pca_2d(&emb.vectors)?;
    println!(
        "explained variance {:.4} {:.4}",
        p.explained_variance[0], p.explained_variance[1]
    );
    for (c, name) in data.class_names.iter().enumerate() {
        let rows: Vec<&[f64]> = (0..emb.len())
            .filter(|&i| emb.labels[i] == c)
            .map(|i| p.coords.row(i))
            .collect();
        let n = rows.len() as f64;
        let (x, y) = rows
            .iter()
            .fold((0.0, 0.0), |a, r| (a.0 + r[0] / n, a.1 + r[1] / n));
        println!("{name}: centroid ({x:>8.4}, {y:>8.4})");
    }
    if let Some(out) = args.iter().find(|a| a.ends_with(".csv")) {
        let mut csv = String::from("jet_id,label,pc1,pc2\n");
        for i in 0..emb.len() {
            let r = p.coords.row(i);
            csv.push_str(&format!(
                "{i},{},{},{}\n",
                data.class_names[emb.labels[i]], r[0], r[1]
            ));
        }
        std::fs::write(out, csv)?;
        println!("wrote {out}");
    }
    Ok(())
}
