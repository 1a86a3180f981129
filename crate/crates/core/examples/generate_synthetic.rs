//! Generates the four synthetic classes, prints per-class particle
//! statistics and optionally writes the dataset directory.
//!
//! cargo run --example generate_synthetic -- [jets_per_class] [out_dir]

use jetdistill::jetdata::{generate_synthetic, save_dataset, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let per_class: usize = args.first().map_or(Ok(500), |s| s.parse())?;
    let spec = SyntheticSpec::four_class();
    let d = generate_synthetic(&spec, per_class, 0)?;

    println!("class  prongs  mean mult  mean leading pt  mean width");
    for (c, class) in spec.classes.iter().enumerate() {
        let jets: Vec<_> = d.jets.iter().filter(|j| j.label == c).collect();
        let n = jets.len() as f64;
        let mult = jets.iter().map(|j| j.valid_count() as f64).sum::<f64>() / n;
        let lead = jets.iter().map(|j| j.particles[0].pt).sum::<f64>() / n;
        // pt-weighted mean distance from the axis
        let width = jets
            .iter()
            .map(|j| j.valid().map(|p| p.pt * p.delta_r()).sum::<f64>() / j.total_pt())
            .sum::<f64>()
            / n;
        println!(
            "{:<6} {:>6}  {:>9.2}  {:>15.3}  {:>10.3}",
            class.name, class.prongs, mult, lead, width
        );
    }
    if let Some(out) = args.get(1) {
        let m = save_dataset(&d, std::path::Path::new(out), Some(0))?;
        println!("wrote {} jets to {out}", m.num_jets);
    }
    Ok(())
}
