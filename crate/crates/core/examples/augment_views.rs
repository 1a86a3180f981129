//! One synthetic jet and its two augmented views. Masked particles are
//! flagged; the masked pt share is compared with the drawn target.
//!
//! cargo run --example augment_views -- [jet_index]

use jetdistill::augment::{make_view_pair, AugmentConfig};
use jetdistill::jetdata::{generate_synthetic, Jet, SyntheticSpec};

fn show(name: &str, j: &Jet, mask: Option<&[bool]>) {
    println!(
        "{name}: {} particles, sum pt {:.4}",
        j.valid_count(),
        j.total_pt()
    );
    for (i, p) in j.valid().enumerate() {
        let m = mask.is_some_and(|m| m[i]);
        println!(
            "  {i:>2}  eta {:>8.4}  phi {:>8.4}  pt {:.4}{}",
            p.eta,
            p.phi,
            p.pt,
            if m { "  [MASK]" } else { "" }
        );
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let index: usize = std::env::args().nth(1).map_or(Ok(2), |s| s.parse())?;
    let d = generate_synthetic(&SyntheticSpec::three_class(), 10, 0)?;
    let jet = d.jets.get(index).ok_or("jet index out of range")?;
    let cfg = AugmentConfig::default();
    let pair = make_view_pair(jet, &cfg, 0, 0, index as u64)?;

    show(
        &format!("original ({})", d.class_names[jet.label]),
        jet,
        None,
    );
    for (name, view, mask, target) in [
        ("view u", &pair.view_u, &pair.mask_u, pair.target_ratio_u),
        ("view v", &pair.view_v, &pair.mask_v, pair.target_ratio_v),
    ] {
        show(name, view, Some(mask));
        let masked: f64 = view
            .particles
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p.pt)
            .sum();
        println!(
            "  target ratio {target:.3}, masked pt share {:.3}",
            masked / view.total_pt()
        );
    }
    Ok(())
}
