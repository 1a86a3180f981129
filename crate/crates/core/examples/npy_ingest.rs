//! Round trip through the `.npy` interface: writes a features/labels pair
//! the way an external converter would, loads it back and splits it.
//!
//! cargo run --example npy_ingest -- [features.npy labels.npy]

use jetdistill::jetdata::{
    generate_synthetic, load_npy_dataset, split_dataset, SyntheticSpec, FEATURES,
};
use jetdistill::tensor::npy::{write_i64, write_tensor};
use jetdistill::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = tempfile_dir()?;
    let (features, labels) = if args.len() == 2 {
        (args[0].clone().into(), args[1].clone().into())
    } else {
        let d = generate_synthetic(&SyntheticSpec::four_class(), 50, 3)?;
        let data: Vec<f64> = d
            .jets
            .iter()
            .flat_map(|j| j.particles.iter().flat_map(|p| p.features()))
            .collect();
        let f = dir.join("features.npy");
        let l = dir.join("labels.npy");
        write_tensor(&f, &Tensor::new(vec![d.len(), d.capacity, FEATURES], data)?)?;
        let labels: Vec<i64> = d.jets.iter().map(|j| j.label as i64).collect();
        write_i64(&l, &[labels.len()], &labels)?;
        (f, l)
    };
    let names = ["q", "g", "w", "t"].map(String::from).to_vec();
    let d = load_npy_dataset(&features, &labels, Some(names))?;
    println!(
        "{} jets, capacity {}, class counts {:?}",
        d.len(),
        d.capacity,
        d.class_counts()
    );
    let s = split_dataset(&d, (0.8, 0.1, 0.1), 0)?;
    println!(
        "train {} / val {} / test {}",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    let j = &d.jets[0];
    println!(
        "jet 0: class {}, {} valid particles, leading pt {:.3}",
        d.class_names[j.label],
        j.valid_count(),
        j.particles[0].pt
    );
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("jetdistill_npy_{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
