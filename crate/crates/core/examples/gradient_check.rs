//! Finite-difference check of a few graph primitives and of the full
//! distillation loss on a toy model (4 jets of 3 particles, f64).
//!
//! cargo run --release --example gradient_check

use jetdistill::distill::{
    center_and_sharpen, student_loss, teacher_forward, DistillError, DistillTargets,
};
use jetdistill::jetdata::{Jet, Particle};
use jetdistill::network::{Batch, Bound, ForwardMode, ModelParams, NetworkConfig};
use jetdistill::rng::{stream_rng, Stream};
use jetdistill::tensor::TensorError;
use jetdistill::tensor::{gradient_check, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = stream_rng(seed, Stream::Init, &[99]);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (h, floor) = (1e-6, 1e-3);
    let x = random(&[3, 5], 1);
    let gamma = random(&[5], 2);
    let beta = random(&[5], 3);
    let checks = [
        (
            "layer_norm",
            gradient_check(&[x.clone(), gamma, beta], h, floor, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                let y = g.gelu(y);
                Ok::<_, TensorError>(g.sum(y))
            })?,
        ),
        (
            "softmax/log",
            gradient_check(&[x.clone()], h, floor, |g, v| {
                let p = g.softmax(v[0], 0.1)?;
                let l = g.log(p);
                let l = g.slice(l, 1, 2, 1)?;
                Ok::<_, TensorError>(g.sum(l))
            })?,
        ),
        (
            "pairwise_distance",
            gradient_check(&[x.clone()], h, floor, |g, v| {
                let z = g.l2_normalize(v[0], 1e-12)?;
                let d = g.pairwise_distance(z)?;
                let d = g.gather(d, &[1, 5, 6])?;
                let d = g.log(d);
                Ok::<_, TensorError>(g.mean(d))
            })?,
        ),
        (
            "matmul_nt",
            gradient_check(&[x.clone(), random(&[4, 5], 4)], h, floor, |g, v| {
                let y = g.matmul_nt(v[0], v[1])?;
                let y = g.exp(y);
                Ok::<_, TensorError>(g.mean(y))
            })?,
        ),
    ];
    for (name, c) in &checks {
        println!(
            "{name:<18} {:>3} entries  max rel err {:.2e}",
            c.checked, c.max_rel_err
        );
    }

    // Toy model and batch.
    let net = NetworkConfig {
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        d_ff: 12,
        d_proj: 4,
        proj_hidden: (8, 4),
        dropout: 0.1,
        final_norm: true,
    };
    let student = ModelParams::<f64>::init(&net, None, 3)?;
    let teacher = ModelParams::<f64>::init(&net, None, 4)?;
    let jets: Vec<Jet> = (0..8u64)
        .map(|i| {
            let mut r = stream_rng(i, Stream::Synthetic, &[]);
            let ps = (0..3)
                .map(|_| {
                    Particle::new(
                        r.random_range(-0.4..0.4),
                        r.random_range(-0.4..0.4),
                        r.random_range(0.05..0.5),
                    )
                })
                .collect();
            Jet::from_valid(ps, 4, 0)
        })
        .collect::<Result<_, _>>()?;
    let views: Vec<&Jet> = jets.iter().collect();
    let masks: Vec<Vec<bool>> = (0..8)
        .map(|i| vec![i % 3 == 0, i % 2 == 1, false, false])
        .collect();
    let mrefs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
    let t = teacher_forward(&teacher, &views, &mrefs)?;
    let targets = DistillTargets {
        rows: t.rows.clone(),
        counts: t.counts.clone(),
        p_cls: center_and_sharpen(&t.cls_logits, &[0.05; 4], 0.04),
        p_part: t
            .part_logits
            .as_ref()
            .map(|l| center_and_sharpen(l, &[-0.02; 4], 0.04)),
    };
    let batch = Batch::masked(&views, &mrefs)?;
    let c = gradient_check(&student.tensors, h, floor, |g, vars| {
        let p = Bound {
            vars: vars.to_vec(),
        };
        // Same dropout mask on every evaluation.
        let mut rng = stream_rng(0, Stream::Dropout, &[0]);
        let terms = student_loss(
            g,
            &p,
            &student,
            &batch,
            ForwardMode::Train(&mut rng),
            &targets,
            0.1,
            0.01,
        )?;
        Ok::<_, DistillError>(terms.total)
    })?;
    println!(
        "{:<18} {:>3} entries  max rel err {:.2e}",
        "full loss", c.checked, c.max_rel_err
    );
    if let Some((i, e, a, n)) = c.worst {
        println!(
            "  worst: {}[{e}] analytic {a:.6e} numeric {n:.6e}",
            student.info[i].name
        );
    }
    Ok(())
}
