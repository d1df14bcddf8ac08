use proptest::prelude::*;

use super::*;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn p(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::param(data.to_vec(), shape).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let id = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
    assert_eq!(id.matmul(&b).unwrap().to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    let row = t(&[1.0, 2.0], &[1, 2]);
    let col = t(&[3.0, 4.0], &[2, 1]);
    assert_eq!(row.matmul(&col).unwrap().to_vec(), vec![11.0]);
    let z = Tensor::zeros(&[2, 3]);
    assert!(b.matmul(&z).unwrap().to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn elementwise_examples() {
    assert_eq!(t(&[-1.0, 0.0, 2.0], &[3]).relu().to_vec(), vec![0.0, 0.0, 2.0]);
    assert_eq!(t(&[1.0, 2.0, 3.0], &[3]).scale(2.0).to_vec(), vec![2.0, 4.0, 6.0]);
    assert!(t(&[1.0], &[1]).add(&t(&[1.0, 2.0], &[2])).is_err());

    let a = p(&[1.0, 2.0], &[2]);
    let b = p(&[3.0, 4.0], &[2]);
    a.add(&b).unwrap().sum().backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
    assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let x = p(&[0.0, 1.0, -1.0], &[3]);
    x.relu().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let s = t(&[0.0, 0.0], &[1, 2]).softmax(1.0).unwrap();
    assert!(close(&s.to_vec(), &[0.5, 0.5], 1e-12));
    let s = t(&[3f64.ln(), 0.0], &[1, 2]).softmax(1.0).unwrap();
    assert!(close(&s.to_vec(), &[0.75, 0.25], 1e-6));
    let s = t(&[1.0, -1.0, 0.3, 0.9], &[1, 4]).softmax(1000.0).unwrap();
    assert!(s.to_vec().iter().all(|v| (v - 0.25).abs() < 0.01));
    assert!(matches!(
        t(&[1.0, 2.0], &[1, 2]).softmax(0.0),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn layernorm_examples() {
    let ones = t(&[1.0, 1.0], &[2]);
    let zeros = t(&[0.0, 0.0], &[2]);
    let c = t(&[4.0, 4.0], &[1, 2]).layer_norm(&ones, &zeros, 1e-5).unwrap();
    assert_eq!(c.to_vec(), vec![0.0, 0.0]);

    let _m = precision_scope(Precision::F64);
    let x = t(&[1.0, 3.0], &[1, 2]).layer_norm(&ones, &zeros, 1e-12).unwrap();
    assert!(close(&x.to_vec(), &[-1.0, 1.0], 1e-9));

    let bias = t(&[0.3, -0.7], &[2]);
    let y = t(&[1.0, 3.0], &[1, 2]).layer_norm(&zeros, &bias, 1e-5).unwrap();
    assert_eq!(y.to_vec(), vec![0.3, -0.7]);
}

#[test]
fn loss_examples() {
    let _m = precision_scope(Precision::F64);
    let pdist = t(&[0.2, 0.3, 0.5], &[1, 3]);
    assert_eq!(pdist.kl_div(&pdist).unwrap().item(), 0.0);

    let kl = t(&[0.75, 0.25], &[1, 2]).kl_div(&t(&[0.5, 0.5], &[1, 2])).unwrap().item();
    let hand = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    assert!((kl - hand).abs() < 1e-12);
    assert!((kl - 0.130812).abs() < 1e-5);

    let half = Tensor::full(&[2, 3], 0.5);
    let target = t(&[0.0, 1.0, 0.3, 1.0, 0.0, 0.9], &[2, 3]);
    assert!((half.bce(&target).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);

    assert!(matches!(t(&[1.2], &[1]).bce(&t(&[1.0], &[1])), Err(Error::Domain(_))));
}

#[test]
fn loss_dispatch_matches_methods() {
    let z = t(&[0.1, -0.4, 2.0], &[1, 3]);
    let a = loss(LossKind::CrossEntropy, &z, LossTarget::Labels(&[2])).unwrap();
    assert_eq!(a.item(), z.cross_entropy(&[2]).unwrap().item());
    assert!(loss(LossKind::Bce, &z, LossTarget::Labels(&[0])).is_err());
}

#[test]
fn backward_examples() {
    let w = p(&[1.0, 2.0], &[2]);
    w.mul(&w).unwrap().sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);

    let a = p(&[1.0], &[1]);
    let unused = p(&[5.0], &[1]);
    a.scale(3.0).sum().backward().unwrap();
    assert_eq!(unused.grad_or_zeros(), vec![0.0]);

    let w = p(&[0.5, 2.0], &[2]);
    w.neg().relu().sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_accumulates() {
    let w = p(&[1.0, 2.0], &[2]);
    assert!(matches!(w.scale(2.0).backward(), Err(Error::Usage(_))));
    w.sum().backward().unwrap();
    w.sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn no_grad_records_nothing() {
    let w = p(&[1.0], &[1]);
    let y = {
        let _g = no_grad();
        w.scale(2.0)
    };
    assert!(!y.requires_grad());
    assert!(y.sum().backward().is_err());
}

#[test]
fn gradcheck_quadratic_is_tight() {
    let w = p(&[0.3, -1.2, 2.5], &[3]);
    let c = t(&[1.0, 2.0, -0.5], &[3]);
    let report = grad_check(
        || {
            let d = w.sub(&c)?;
            Ok(d.mul(&d)?.sum())
        },
        &[w.clone()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

fn seq(n: usize, offset: f64, step: f64) -> Vec<f64> {
    // Deterministic values kept away from 0 so relu kinks are not probed.
    (0..n)
        .map(|i| {
            let v = offset + step * ((i * 7 % 11) as f64 - 5.0);
            if v.abs() < 0.05 { v + 0.1 } else { v }
        })
        .collect()
}

#[test]
fn gradcheck_every_op() {
    let a = p(&seq(6, 0.13, 0.21), &[2, 3]);
    let b = p(&seq(6, -0.07, 0.17), &[2, 3]);
    let m = p(&seq(12, 0.02, 0.11), &[3, 4]);
    let g3 = p(&seq(3, 1.0, 0.05), &[3]);
    let b3 = p(&seq(3, 0.1, 0.05), &[3]);
    let probs_t = t(&[0.2, 0.5, 0.3, 0.6, 0.1, 0.3], &[2, 3]);
    let ba = p(&seq(12, 0.05, 0.1), &[2, 2, 3]);
    let bb = p(&seq(12, -0.02, 0.09), &[2, 3, 2]);
    let bt = p(&seq(12, 0.01, 0.08), &[2, 2, 3]);
    let params = vec![a.clone(), b.clone(), m.clone(), g3.clone(), b3.clone(), ba.clone(), bb.clone(), bt.clone()];

    let cases: Vec<(&str, Box<dyn Fn() -> Result<Tensor>>)> = vec![
        ("add", Box::new(|| Ok(a.add(&b)?.mul(&a)?.sum()))),
        ("sub", Box::new(|| Ok(a.sub(&b)?.mul(&b)?.sum()))),
        ("mul_scale", Box::new(|| Ok(a.mul(&b)?.scale(1.7).sum()))),
        ("relu", Box::new(|| Ok(a.relu().mul(&b)?.sum()))),
        ("sigmoid", Box::new(|| Ok(a.sigmoid().mul(&b)?.sum()))),
        ("matmul", Box::new(|| {
            let y = a.matmul(&m)?;
            Ok(y.mul(&y)?.mean())
        })),
        ("bmm", Box::new(|| {
            let y = ba.batch_matmul(&bb, false)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("bmm_t", Box::new(|| {
            let y = ba.batch_matmul(&bt, true)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("add_rows", Box::new(|| {
            let y = a.add_rows(&b3)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("softmax", Box::new(|| Ok(a.softmax(1.5)?.mul(&b)?.sum()))),
        ("log_softmax", Box::new(|| Ok(a.log_softmax(0.7)?.mul(&b)?.sum()))),
        ("layer_norm", Box::new(|| Ok(a.layer_norm(&g3, &b3, 1e-5)?.mul(&b)?.sum()))),
        ("transpose_gather", Box::new(|| {
            let y = a.transpose()?.matmul(&b)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("concat_select", Box::new(|| {
            let y = a.concat_rows(&b)?.select_rows(&[3, 0, 3])?;
            Ok(y.mul(&y)?.sum())
        })),
        ("reshape", Box::new(|| {
            let y = a.reshape(&[3, 2])?.matmul(&b)?;
            Ok(y.sum())
        })),
        ("cross_entropy", Box::new(|| a.cross_entropy(&[2, 0]))),
        ("soft_cross_entropy", Box::new(|| a.soft_cross_entropy(&probs_t))),
        ("kl_div", Box::new(|| probs_t.kl_div(&a.softmax(1.0)?))),
        ("kl_div_logits", Box::new(|| a.kl_div_from_logits(&b.softmax(2.0)?, 2.0))),
        ("bce", Box::new(|| a.sigmoid().bce(&probs_t))),
        ("pearson", Box::new(|| {
            let (r, _) = a.pearson_rows(&b)?;
            Ok(r.mul(&r)?.sum())
        })),
    ];
    for (name, f) in cases {
        let report = grad_check(&f, &params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let x = p(&seq(12, 0.3, 0.2), &[3, 4]);
        let w = p(&seq(8, -0.1, 0.15), &[4, 2]);
        let y = x.matmul(&w).unwrap().softmax(1.0).unwrap();
        y.mul(&y).unwrap().sum().backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn f32_mode_rounds_outputs() {
    let x = Tensor::scalar(0.1);
    assert_eq!(x.item(), 0.1f32 as f64);
    let _m = precision_scope(Precision::F64);
    assert_eq!(Tensor::scalar(0.1).item(), 0.1);
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(
        row in proptest::collection::vec(-20.0f64..20.0, 2..8),
        shift in -50.0f64..50.0,
        temp in 0.1f64..10.0,
    ) {
        let _m = precision_scope(Precision::F64);
        let n = row.len();
        let a = Tensor::new(row.clone(), &[1, n]).unwrap().softmax(temp).unwrap().to_vec();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let b = Tensor::new(shifted, &[1, n]).unwrap().softmax(temp).unwrap().to_vec();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative(
        p in proptest::collection::vec(0.01f64..1.0, 4),
        q in proptest::collection::vec(0.01f64..1.0, 4),
    ) {
        let _m = precision_scope(Precision::F64);
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let pt = Tensor::new(norm(&p), &[1, 4]).unwrap();
        let qt = Tensor::new(norm(&q), &[1, 4]).unwrap();
        let kl = pt.kl_div(&qt).unwrap().item();
        prop_assert!(kl >= -1e-12);
        prop_assert!(pt.kl_div(&pt).unwrap().item().abs() < 1e-9);
    }
}
