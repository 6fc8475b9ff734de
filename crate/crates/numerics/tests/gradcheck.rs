use carpe_numerics::{grad_check, AttnMask, GradCheckConfig, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
        .with_requires_grad(true)
}

fn params(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random(&mut rng, s)).collect()
}

fn cfg(tol: f64) -> GradCheckConfig {
    GradCheckConfig { tol, ..GradCheckConfig::default() }
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe_loss(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let wv = g.constant(g.shape(y).to_vec().as_slice(), w)?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn assert_pass(name: &str, report: carpe_numerics::GradReport) {
    println!("{name}: max rel err {:.3e}", report.max_rel_error);
    assert!(report.pass, "{name} failed grad check: {report:?}");
}

#[test]
fn linear_layer_is_exact_to_tight_tolerance() {
    let mut ps = params(1, &[&[4, 3], &[5, 3], &[5]]);
    let r = grad_check(
        |g, p| {
            let x = g.param(0, &p[0]);
            let w = g.param(1, &p[1]);
            let b = g.param(2, &p[2]);
            let y = g.linear(x, w, Some(b))?;
            probe_loss(g, y)
        },
        &mut ps,
        &cfg(1e-6),
    )
    .unwrap();
    assert_pass("linear", r);
}

#[test]
fn softmax_cross_entropy_head() {
    let mut ps = params(2, &[&[4, 6], &[7, 6]]);
    let r = grad_check(
        |g, p| {
            let h = g.param(0, &p[0]);
            let w = g.param(1, &p[1]);
            let z = g.matmul_ex(h, w, true)?;
            g.cross_entropy(z, &[Some(1), None, Some(6), Some(0)])
        },
        &mut ps,
        &cfg(1e-5),
    )
    .unwrap();
    assert_pass("softmax-ce", r);
}

#[test]
fn every_op_passes_at_1e_minus_4() {
    type Build = fn(&mut Graph, &[Tensor]) -> Result<Var>;
    let cases: Vec<(&str, Vec<&[usize]>, Build)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], |g, p| {
            let (a, b) = (g.param(0, &p[0]), g.param(1, &p[1]));
            let y = g.matmul(a, b)?;
            probe_loss(g, y)
        }),
        ("add", vec![&[3, 4], &[3, 4]], |g, p| {
            let (a, b) = (g.param(0, &p[0]), g.param(1, &p[1]));
            let y = g.add(a, b)?;
            probe_loss(g, y)
        }),
        ("mul", vec![&[3, 4], &[3, 4]], |g, p| {
            let (a, b) = (g.param(0, &p[0]), g.param(1, &p[1]));
            let y = g.mul(a, b)?;
            probe_loss(g, y)
        }),
        ("add_row", vec![&[3, 4], &[4]], |g, p| {
            let (a, b) = (g.param(0, &p[0]), g.param(1, &p[1]));
            let y = g.add_row(a, b)?;
            probe_loss(g, y)
        }),
        ("scale_by", vec![&[3, 4], &[3]], |g, p| {
            let (a, s) = (g.param(0, &p[0]), g.param(1, &p[1]));
            let y = g.scale_by(a, s, 2)?;
            probe_loss(g, y)
        }),
        ("softmax", vec![&[3, 5]], |g, p| {
            let a = g.param(0, &p[0]);
            let y = g.softmax(a)?;
            probe_loss(g, y)
        }),
        ("layer_norm", vec![&[3, 6], &[6], &[6]], |g, p| {
            let (x, ga, b) = (g.param(0, &p[0]), g.param(1, &p[1]), g.param(2, &p[2]));
            let y = g.layer_norm(x, ga, b)?;
            probe_loss(g, y)
        }),
        ("gelu", vec![&[4, 5]], |g, p| {
            let a = g.param(0, &p[0]);
            let s = g.scale(a, 3.0)?;
            let y = g.gelu(s)?;
            probe_loss(g, y)
        }),
        ("embedding", vec![&[5, 3]], |g, p| {
            let t = g.param(0, &p[0]);
            let y = g.embedding(t, &[4, 0, 4, 2])?;
            probe_loss(g, y)
        }),
        ("cross_entropy", vec![&[4, 5]], |g, p| {
            let z = g.param(0, &p[0]);
            let s = g.scale(z, 2.0)?;
            g.cross_entropy(s, &[None, Some(3), Some(0), None])
        }),
        ("concat_slice_row", vec![&[2, 3], &[3], &[4, 3]], |g, p| {
            let (a, b, c) = (g.param(0, &p[0]), g.param(1, &p[1]), g.param(2, &p[2]));
            let cat = g.concat_rows(&[a, b, c])?;
            let s = g.slice_rows(cat, 1, 4)?;
            let r = g.row(cat, 6)?;
            let sq = g.mul(s, s)?;
            let l1 = probe_loss(g, sq)?;
            let l2 = probe_loss(g, r)?;
            g.add(l1, l2)
        }),
        ("mean_rows", vec![&[5, 3]], |g, p| {
            let a = g.param(0, &p[0]);
            let sq = g.mul(a, a)?;
            let y = g.mean_rows(sq)?;
            probe_loss(g, y)
        }),
        ("attention", vec![&[3, 8], &[5, 8], &[5, 8]], |g, p| {
            let (q, k, v) = (g.param(0, &p[0]), g.param(1, &p[1]), g.param(2, &p[2]));
            let mut mask = AttnMask::full(3, 5);
            mask.forbid(0, 4);
            mask.forbid(2, 1);
            let y = g.attention(q, k, v, Some(&mask), 2)?;
            probe_loss(g, y)
        }),
        ("self_attention_causal", vec![&[4, 6], &[6, 6]], |g, p| {
            let (x, w) = (g.param(0, &p[0]), g.param(1, &p[1]));
            let h = g.linear(x, w, None)?;
            let y = g.attention(h, x, h, Some(&AttnMask::causal(4)), 3)?;
            probe_loss(g, y)
        }),
    ];
    for (seed, (name, shapes, build)) in cases.into_iter().enumerate() {
        let mut ps = params(100 + seed as u64, &shapes);
        let r = grad_check(build, &mut ps, &cfg(1e-4)).unwrap();
        assert_pass(name, r);
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let mut ps = params(3, &[&[6]]);
    let r = grad_check(
        |g, p| {
            let x = g.param(0, &p[0]);
            let value: Vec<f64> = g.value(x).iter().map(|v| v * v).collect();
            // d(x²)/dx = 2x, deliberately doubled.
            let y = g.custom(&[x], vec![6], value, |inputs, _, up| {
                vec![inputs[0].iter().zip(up).map(|(x, u)| 2.0 * 2.0 * x * u).collect()]
            })?;
            g.sum(y)
        },
        &mut ps,
        &cfg(1e-4),
    )
    .unwrap();
    assert!(!r.pass);
    assert!(r.max_rel_error > 0.4);
}

#[test]
fn correct_custom_op_passes() {
    let mut ps = params(4, &[&[6]]);
    let r = grad_check(
        |g, p| {
            let x = g.param(0, &p[0]);
            let value: Vec<f64> = g.value(x).iter().map(|v| v * v).collect();
            let y = g.custom(&[x], vec![6], value, |inputs, _, up| {
                vec![inputs[0].iter().zip(up).map(|(x, u)| 2.0 * x * u).collect()]
            })?;
            g.sum(y)
        },
        &mut ps,
        &cfg(1e-6),
    )
    .unwrap();
    assert_pass("custom", r);
}

#[test]
fn large_tensors_are_subsampled() {
    let mut ps = params(5, &[&[40, 30]]);
    let r = grad_check(
        |g, p| {
            let x = g.param(0, &p[0]);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
        &mut ps,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(r.per_param[0].coords_checked, 64);
    assert!(r.pass);
}
