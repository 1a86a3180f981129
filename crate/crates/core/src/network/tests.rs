use super::*;
use crate::jetdata::{Jet, Particle};
use crate::tensor::Graph;
use rand::Rng;

fn jet(ps: &[(f64, f64, f64)], capacity: usize) -> Jet {
    Jet::from_valid(
        ps.iter().map(|&(e, p, t)| Particle::new(e, p, t)).collect(),
        capacity,
        0,
    )
    .unwrap()
}

fn small() -> ModelParams<f64> {
    ModelParams::init(&NetworkConfig::preset(Preset::Small), None, 3).unwrap()
}

fn encode_eval(params: &ModelParams<f64>, jets: &[&Jet]) -> Tensor<f64> {
    let batch = Batch::unmasked(jets).unwrap();
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let enc = encode(&mut g, &p, params, &batch, ForwardMode::Eval, false).unwrap();
    g.value(enc.out).clone()
}

fn example_jet() -> Jet {
    jet(
        &[
            (0.1, 0.05, 0.5),
            (-0.2, 0.1, 0.3),
            (0.05, -0.3, 0.15),
            (0.3, 0.3, 0.05),
        ],
        8,
    )
}

#[test]
fn presets_match_table() {
    let s = NetworkConfig::preset(Preset::Small);
    assert_eq!(
        (
            s.d_model,
            s.n_blocks,
            s.n_heads,
            s.d_ff,
            s.d_proj,
            s.proj_hidden
        ),
        (32, 2, 4, 128, 16, (128, 16))
    );
    let b = NetworkConfig::preset(Preset::Base);
    assert_eq!((b.d_model, b.n_blocks, b.n_heads, b.d_proj), (64, 4, 6, 32));
    assert_eq!(b.head_dim(), 10);
    let p = ModelParams::<f32>::init(&b, Some(5), 0).unwrap();
    assert_eq!(p.get("blocks.0.attn.q.weight").unwrap().shape(), &[64, 60]);
    assert_eq!(
        p.get("blocks.3.attn.out.weight").unwrap().shape(),
        &[60, 64]
    );
    assert_eq!(p.get("head.2.weight").unwrap().shape(), &[64, 5]);
}

#[test]
fn init_statistics() {
    let p = ModelParams::<f64>::init(&NetworkConfig::preset(Preset::Base), None, 1).unwrap();
    for (info, t) in p.info.iter().zip(&p.tensors) {
        match info.kind {
            ParamKind::Bias => assert!(t.data().iter().all(|&x| x == 0.0)),
            ParamKind::Weight | ParamKind::Token => {
                assert!(t.data().iter().all(|&x| x.abs() <= 0.04))
            }
            ParamKind::Norm => {}
        }
    }
    let w = p.get("blocks.0.ff.0.weight").unwrap().data();
    let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
    // Truncation at 2 sigma shrinks the std by a factor ~0.88.
    assert!((std - 0.02 * 0.88).abs() < 0.001, "std {std}");
}

#[test]
fn tokenize_shape_and_mask_semantics() {
    let params = small();
    let j = example_jet();
    let (t, valid) = tokenize(&j, &[false; 8], &params).unwrap();
    assert_eq!(t.shape(), &[9, 32]);
    assert_eq!(
        valid,
        vec![true, true, true, true, true, false, false, false, false]
    );
    let mask_tok = params.get("mask_token").unwrap().data();
    assert!((0..9).all(|r| t.row(r) != mask_tok));
    assert_eq!(t.row(0), params.get("cls_token").unwrap().data());

    let mut m = [false; 8];
    m[1] = true;
    let mut other = j.clone();
    other.particles[1] = Particle::new(0.7, -0.7, 0.9);
    let (a, _) = tokenize(&j, &m, &params).unwrap();
    let (b, _) = tokenize(&other, &m, &params).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.row(2), mask_tok);

    let mut bad = [false; 8];
    bad[6] = true;
    assert!(matches!(
        tokenize(&j, &bad, &params),
        Err(NetworkError::MaskOnPadding { jet: 0, slot: 6 })
    ));
}

#[test]
fn padded_content_does_not_leak() {
    let params = small();
    let j = example_jet();
    let mut dirty = j.clone();
    for p in &mut dirty.particles[4..] {
        *p = Particle {
            eta: 3.0,
            phi: -2.0,
            pt: 0.0,
            valid: false,
        };
    }
    let a = encode_eval(&params, &[&j]);
    let b = encode_eval(&params, &[&dirty]);
    assert_eq!(&a.data()[..5 * 32], &b.data()[..5 * 32]);
}

#[test]
fn permutation_equivariance() {
    let params = small();
    let j = example_jet();
    let mut swapped = j.clone();
    swapped.particles.swap(0, 2);
    let a = encode_eval(&params, &[&j]);
    let b = encode_eval(&params, &[&swapped]);
    let d = 32;
    let row = |t: &Tensor<f64>, r: usize| t.data()[r * d..(r + 1) * d].to_vec();
    let close = |x: Vec<f64>, y: Vec<f64>| x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-6);
    assert!(close(row(&a, 0), row(&b, 0)));
    assert!(close(row(&a, 1), row(&b, 3)));
    assert!(close(row(&a, 3), row(&b, 1)));
    assert!(close(row(&a, 2), row(&b, 2)));
}

#[test]
fn batching_does_not_change_rows() {
    let params = small();
    let j = example_jet();
    let k = jet(&[(0.0, 0.0, 0.9)], 8);
    let both = encode_eval(&params, &[&j, &k]);
    let one = encode_eval(&params, &[&k]);
    let n = 9 * 32;
    for (x, y) in both.data()[n..].iter().zip(one.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn eval_is_deterministic_train_is_not() {
    let params = small();
    let j = example_jet();
    assert_eq!(encode_eval(&params, &[&j]), encode_eval(&params, &[&j]));
    let batch = Batch::unmasked(&[&j]).unwrap();
    let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Dropout, &[]);
    let mut g = Graph::new();
    let p = bind(&mut g, &params, false);
    let enc = encode(
        &mut g,
        &p,
        &params,
        &batch,
        ForwardMode::Train(&mut rng),
        false,
    )
    .unwrap();
    assert_ne!(g.value(enc.out), &encode_eval(&params, &[&j]));
}

#[test]
fn cls_depends_on_every_particle() {
    let params = small();
    let j = example_jet();
    let base = encode_eval(&params, &[&j]);
    for i in 0..j.valid_count() {
        let mut k = j.clone();
        k.particles[i].eta = 0.0;
        k.particles[i].phi = 0.0;
        k.particles[i].pt = 1e-9;
        let other = encode_eval(&params, &[&k]);
        assert!(base.data()[..32]
            .iter()
            .zip(&other.data()[..32])
            .any(|(a, b)| a != b));
    }
}

#[test]
fn projection_is_rowwise() {
    let params = small();
    let j = example_jet();
    let batch = Batch::unmasked(&[&j]).unwrap();
    let mut g = Graph::new();
    let p = bind(&mut g, &params, false);
    let enc = encode(&mut g, &p, &params, &batch, ForwardMode::Eval, false).unwrap();
    let all: Vec<(usize, usize)> = (0..9).map(|t| (0, t)).collect();
    let full = project(&mut g, &p, &params, enc.out, &all).unwrap();
    let cls = project(&mut g, &p, &params, enc.out, &[(0, 0)]).unwrap();
    assert_eq!(g.shape(full), &[9, 16]);
    assert_eq!(&g.value(full).data()[..16], g.value(cls).data());

    let mut zero = params.clone();
    for name in ["proj.0.weight", "proj.1.weight", "proj.2.weight"] {
        zero.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    zero.get_mut("proj.2.bias").unwrap().data_mut().fill(0.25);
    let mut g = Graph::new();
    let p = bind(&mut g, &zero, false);
    let enc = encode(&mut g, &p, &zero, &batch, ForwardMode::Eval, false).unwrap();
    let out = project(&mut g, &p, &zero, enc.out, &all).unwrap();
    assert!(g.value(out).data().iter().all(|&x| x == 0.25));
}

#[test]
fn cls_attention_properties() {
    let params = small();
    let j = example_jet();
    let a = extract_cls_attention(&j, &params).unwrap();
    assert_eq!(a.shape(), &[4, 8]);
    for h in 0..4 {
        let row = a.row(h);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row[4..].iter().all(|&x| x == 0.0));
    }
    let single = jet(&[(0.1, 0.1, 1.0)], 8);
    let s = extract_cls_attention(&single, &params).unwrap();
    for h in 0..4 {
        assert!((s.row(h)[0] - 1.0).abs() < 1e-12);
    }
    let mut scaled = j.clone();
    scaled.particles[1].pt *= 10.0;
    let b = extract_cls_attention(&scaled, &params).unwrap();
    let delta = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(delta > 0.0);
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        d_model: 6,
        n_blocks: 2,
        n_heads: 4,
        d_ff: 10,
        d_proj: 3,
        proj_hidden: (7, 5),
        dropout: 0.0,
        final_norm: true,
    }
}

/// Weighted sum of projected `[CLS]`/particle rows plus classifier logits.
fn scalar_objective(
    g: &mut Graph<f64>,
    p: &Bound,
    params: &ModelParams<f64>,
    batch: &Batch,
) -> crate::tensor::Var {
    let enc = encode(g, p, params, batch, ForwardMode::Eval, false).unwrap();
    let rows = [(0, 0), (0, 1), (0, 3), (1, 0), (1, 2)];
    let z = project(g, p, params, enc.out, &rows).unwrap();
    let n = g.value(z).len();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i * 7919) % 13) as f64 / 6.5 - 1.0)
        .collect();
    let z = g.mul_const(z, w).unwrap();
    let z = g.gelu(z);
    let a = g.sum(z);
    let cls = crate::network::encoder_cls(g, enc.out).unwrap();
    let logits = classify(g, p, params, cls).unwrap();
    let sm = g.softmax(logits, 1.0).unwrap();
    let l = g.log(sm);
    let l = g.slice(l, 1, 1, 1).unwrap();
    let b = g.sum(l);
    g.add(a, b).unwrap()
}

#[test]
fn full_forward_gradient_check() {
    let cfg = tiny_config();
    let mut params = ModelParams::<f64>::init(&cfg, Some(2), 11).unwrap();
    let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::Init, &[1]);
    for t in &mut params.tensors {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    let j0 = jet(&[(0.1, -0.2, 0.6), (-0.15, 0.05, 0.3), (0.2, 0.25, 0.1)], 4);
    let j1 = jet(&[(0.3, 0.1, 0.7), (-0.1, -0.1, 0.3)], 4);
    let m0 = [false, true, false, false];
    let m1 = [false, false, false, false];
    let batch = Batch::masked(&[&j0, &j1], &[&m0, &m1]).unwrap();

    let mut g = Graph::new();
    let p = bind(&mut g, &params, true);
    let root = scalar_objective(&mut g, &p, &params, &batch);
    let grads = g.backward(root).unwrap();

    let eval = |params: &ModelParams<f64>| {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let r = scalar_objective(&mut g, &p, params, &batch);
        g.value(r).item()
    };
    let h = 1e-5;
    let mut checked_groups = std::collections::BTreeSet::new();
    for (pi, info) in params.info.clone().iter().enumerate() {
        let analytic = grads
            .get(p.var(pi))
            .expect("every parameter receives a gradient")
            .clone();
        for e in 0..params.tensors[pi].len() {
            let orig = params.tensors[pi].data()[e];
            params.tensors[pi].data_mut()[e] = orig + h;
            let up = eval(&params);
            params.tensors[pi].data_mut()[e] = orig - h;
            let down = eval(&params);
            params.tensors[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            let tol = 1e-4 * a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() <= tol,
                "{}[{e}]: analytic {a} numeric {numeric}",
                info.name
            );
        }
        checked_groups.insert(info.name.split('.').next().unwrap().to_string());
    }
    for group in [
        "embed",
        "cls_token",
        "mask_token",
        "blocks",
        "final_ln",
        "proj",
        "head",
    ] {
        assert!(checked_groups.contains(group), "{group}");
    }
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = ModelParams::<f32>::init(&NetworkConfig::preset(Preset::Small), Some(3), 4).unwrap();
    let m = save_checkpoint(
        dir.path(),
        &p,
        "student",
        17,
        &["a".into(), "b".into(), "c".into()],
    )
    .unwrap();
    assert!(m.final_norm);
    let back = load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(back.params, p);
    assert_eq!(back.manifest.step, 17);
    assert_eq!(back.manifest.tag, "student");
    std::fs::remove_file(dir.path().join("proj.0.bias.npy")).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
}

#[test]
fn with_classifier_keeps_encoder() {
    let p = small();
    let c = p.with_classifier(3, 9).unwrap();
    assert_eq!(c.get("blocks.1.ff.0.weight"), p.get("blocks.1.ff.0.weight"));
    assert_eq!(c.get("head.2.weight").unwrap().shape(), &[32, 3]);
}
