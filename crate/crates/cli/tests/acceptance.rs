//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 7 are exact property checks and fail the target when red.
//! Criteria 8 to 12 are directional desk-scale reproductions over five
//! seeds; their lines report the outcome, and they fail the target only
//! when `REMEM_ACCEPT_STRICT=1`. `REMEM_ACCEPT_DIRECTIONAL=0` skips them.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use remem::data::{generate_shapes, load_dataset, quantize_pixels, save_dataset, ShapesSpec};
use remem::distill::{dist_terms, kd_loss, StudentRun};
use remem::expertness::{
    expertness_bruteforce, expertness_profile, expertness_spectral, moe_mi_bound, moe_mi_empirical, ActivationGraph,
    MoeMlp, Router,
};
use remem::finetune::FinetuneConfig;
use remem::nn::{load_checkpoint, patchify, save_checkpoint, Linear, Param, ReMemConfig, VitConfig, VitModel};
use remem::optim::{sam_step, sgd_step, SamConfig, Schedule, SgdState};
use remem::rng::{indexed_seed, rng_for};
use remem::tensor::{grad_check, precision_scope, Precision};
use remem::{Error, Tensor};
use remem_cli::pipeline::{
    at_checkpoint, base_teacher, distill_student, finetune_teacher, info_point, prepare_data, Splits,
    TrainedTeacher,
};
use remem_cli::RunConfig;

type Check = Result<(bool, String), String>;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".into()),
    };
    let o = Outcome { id, name, pass, detail };
    println!(
        "criterion {:>2} {:<34} {} ({:.1}s) {}",
        o.id,
        o.name,
        if o.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        o.detail
    );
    o
}

fn e<T>(r: remem::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn tiny_vit(n_layers: usize) -> VitConfig {
    VitConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        d_embed: 8,
        d_mlp: 16,
        n_heads: 2,
        n_layers,
        n_classes: 3,
    }
}

fn images(cfg: &VitConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "images");
    let n = batch * cfg.pixels();
    let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(data, &[batch, cfg.channels, cfg.image_size, cfg.image_size]).unwrap()
}

fn seq(n: usize, offset: f64, step: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let v = offset + step * ((i * 7 % 11) as f64 - 5.0);
            if v.abs() < 0.05 { v + 0.1 } else { v }
        })
        .collect()
}

fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::param(data, shape).unwrap()
}

// ---------------------------------------------------------------- exact

fn gradient_fidelity() -> Check {
    let a = leaf(seq(6, 0.13, 0.21), &[2, 3]);
    let b = leaf(seq(6, -0.07, 0.17), &[2, 3]);
    let m = leaf(seq(12, 0.02, 0.11), &[3, 4]);
    let g3 = leaf(seq(3, 1.0, 0.05), &[3]);
    let b3 = leaf(seq(3, 0.1, 0.05), &[3]);
    let ba = leaf(seq(12, 0.05, 0.1), &[2, 2, 3]);
    let bb = leaf(seq(12, -0.02, 0.09), &[2, 3, 2]);
    let bt = leaf(seq(12, 0.01, 0.08), &[2, 2, 3]);
    let probs = Tensor::new(vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3], &[2, 3]).unwrap();
    let params = vec![a.clone(), b.clone(), m.clone(), g3.clone(), b3.clone(), ba.clone(), bb.clone(), bt.clone()];
    type Case<'a> = (&'a str, Box<dyn Fn() -> remem::Result<Tensor> + 'a>);
    let cases: Vec<Case> = vec![
        ("add", Box::new(|| a.add(&b)?.mul(&a).map(|t| t.sum()))),
        ("sub", Box::new(|| a.sub(&b)?.mul(&b).map(|t| t.sum()))),
        ("mul_scale_neg", Box::new(|| Ok(a.mul(&b)?.scale(1.7).neg().sum()))),
        ("relu", Box::new(|| a.relu().mul(&b).map(|t| t.sum()))),
        ("sigmoid", Box::new(|| a.sigmoid().mul(&b).map(|t| t.sum()))),
        ("matmul", Box::new(|| {
            let y = a.matmul(&m)?;
            Ok(y.mul(&y)?.mean())
        })),
        ("batch_matmul", Box::new(|| {
            let y = ba.batch_matmul(&bb, false)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("batch_matmul_t", Box::new(|| {
            let y = ba.batch_matmul(&bt, true)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("add_rows", Box::new(|| {
            let y = a.add_rows(&b3)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("softmax", Box::new(|| a.softmax(1.5)?.mul(&b).map(|t| t.sum()))),
        ("log_softmax", Box::new(|| a.log_softmax(0.7)?.mul(&b).map(|t| t.sum()))),
        ("layer_norm", Box::new(|| a.layer_norm(&g3, &b3, 1e-5)?.mul(&b).map(|t| t.sum()))),
        ("transpose", Box::new(|| {
            let y = a.transpose()?.matmul(&b)?;
            Ok(y.mul(&y)?.sum())
        })),
        ("concat_select", Box::new(|| {
            let y = a.concat_rows(&b)?.select_rows(&[3, 0, 3])?;
            Ok(y.mul(&y)?.sum())
        })),
        ("reshape", Box::new(|| Ok(a.reshape(&[3, 2])?.matmul(&b)?.sum()))),
        ("cross_entropy", Box::new(|| a.cross_entropy(&[2, 0]))),
        ("soft_cross_entropy", Box::new(|| a.soft_cross_entropy(&probs))),
        ("kl_div", Box::new(|| probs.kl_div(&a.softmax(1.0)?))),
        ("kl_div_logits", Box::new(|| a.kl_div_from_logits(&b.softmax(2.0)?, 2.0))),
        ("bce", Box::new(|| a.sigmoid().bce(&probs))),
        ("pearson", Box::new(|| {
            let (r, _) = a.pearson_rows(&b)?;
            Ok(r.mul(&r)?.sum())
        })),
    ];
    let mut worst = (0.0f64, "");
    for (name, f) in &cases {
        let r = e(grad_check(f, &params, 1e-5))?;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
    }

    // Full two-layer ViT under reweighting, trained through the
    // distillation loss against fixed teacher logits.
    let _m = precision_scope(Precision::F64);
    let cfg = tiny_vit(2);
    let model = e(VitModel::new(cfg, 10))?;
    let mut rng = rng_for(11, "scale");
    for p in model.parameters() {
        if p.decay {
            let v = (0..p.tensor.numel()).map(|_| rng.random_range(-0.4..0.4)).collect();
            e(p.tensor.set_data(v))?;
        }
    }
    // Image seed 8 puts a ReLU pre-activation within the probe step of its
    // kink, where central differences are meaningless.
    let x = images(&cfg, 2, 9);
    let teacher = Tensor::new(vec![1.0, -0.5, 0.3, 0.2, 0.9, -1.1], &[2, 3]).unwrap();
    let remem = ReMemConfig::reweight(0.8);
    let params: Vec<Tensor> = model.parameters().into_iter().map(|p| p.tensor).collect();
    let vit = e(grad_check(
        || kd_loss(&model.forward(&remem, &x)?.logits, &teacher, &[0, 2], 0.4, 2.0),
        &params,
        1e-5,
    ))?;
    let pass = worst.0 < 1e-4 && vit.max_rel_error < 1e-4;
    Ok((
        pass,
        format!(
            "{} ops, worst {:.2e} ({}); vit+kd {:.2e} over {} coords",
            cases.len(),
            worst.0,
            worst.1,
            vit.max_rel_error,
            vit.coordinates
        ),
    ))
}

fn param(values: Vec<f64>) -> Param {
    let n = values.len();
    Param {
        name: "w".into(),
        tensor: Tensor::param(values, &[n]).unwrap(),
        decay: true,
    }
}

fn sam_geometry() -> Check {
    // Zero radius is bit-identical to SGD with momentum and decay.
    let init = vec![0.7, -1.3, 0.2, 0.05];
    let (a, b) = (param(init.clone()), param(init));
    let target = Tensor::new(vec![0.1, 0.5, -0.4, 0.3], &[4]).unwrap();
    let loss = |p: &Param| -> remem::Result<Tensor> {
        let d = p.tensor.sub(&target)?;
        Ok(d.mul(&d)?.sigmoid().sum())
    };
    let mut oa = e(SgdState::new(e(Schedule::new(0.2, 2, 10))?, 0.9, 1e-4))?;
    let mut ob = oa.clone();
    for step in 0..8 {
        e(sam_step(&SamConfig { rho: 0.0 }, &mut oa, &[a.clone()], step, || loss(&a)))?;
        e(sgd_step(&mut ob, &[b.clone()], step, || loss(&b)))?;
    }
    let degenerate = bits(&a.tensor.to_vec()) == bits(&b.tensor.to_vec());

    // Applied perturbation norm equals the radius.
    let _m = precision_scope(Precision::F64);
    let mut worst_norm = 0.0f64;
    let mut rng = rng_for(5, "sam-norm");
    for trial in 0..20 {
        let ps: Vec<Param> = (0..3).map(|k| param((0..4 + k).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let rho = [0.5, 0.05, 0.005][trial % 3];
        let mut opt = e(SgdState::new(Schedule::constant(0.01), 0.0, 0.0))?;
        let info = e(sam_step(&SamConfig { rho }, &mut opt, &ps, 0, || {
            let mut total = ps[0].tensor.mul(&ps[0].tensor)?.sum();
            for p in &ps[1..] {
                total = total.add(&p.tensor.sigmoid().sum())?;
            }
            Ok(total)
        }))?;
        worst_norm = worst_norm.max((info.perturbation_norm - rho).abs() / rho);
    }

    // ½w² from w = 1 at radius 0.1: w' = 1 − 1.1η.
    let mut worst_1d = 0.0f64;
    for eta in [0.01, 0.05, 0.1, 0.3] {
        let p = param(vec![1.0]);
        let mut opt = e(SgdState::new(Schedule::constant(eta), 0.0, 0.0))?;
        e(sam_step(&SamConfig { rho: 0.1 }, &mut opt, &[p.clone()], 0, || {
            Ok(p.tensor.mul(&p.tensor)?.sum().scale(0.5))
        }))?;
        worst_1d = worst_1d.max((p.tensor.item() - (1.0 - 1.1 * eta)).abs());
    }
    let pass = degenerate && worst_norm <= 1e-6 && worst_1d <= 1e-7;
    Ok((
        pass,
        format!("rho=0 bit-equal {degenerate}; norm rel err {worst_norm:.1e}; 1-D err {worst_1d:.1e}"),
    ))
}

/// Pre-norm transformer forward written out with no reweighting code path.
fn plain_forward(model: &VitModel, x: &Tensor) -> remem::Result<Tensor> {
    let cfg = &model.config;
    let b = x.shape()[0];
    let emb = model.patch.forward(&patchify(x, cfg)?)?;
    let np = cfg.n_patches();
    let mut h: Option<Tensor> = None;
    for n in 0..b {
        let rows = model
            .cls_token
            .concat_rows(&emb.select_rows(&(n * np..(n + 1) * np).collect::<Vec<_>>())?)?;
        h = Some(match h {
            None => rows,
            Some(prev) => prev.concat_rows(&rows)?,
        });
    }
    let mut h = h.expect("non-empty batch").add_rows(&model.pos_embed)?;
    for layer in &model.layers {
        h = h.add(&layer.attention(&h, b, cfg)?)?;
        h = h.add(&layer.mlp(&h, None)?.0)?;
    }
    let cls: Vec<usize> = (0..b).map(|n| n * cfg.tokens()).collect();
    let c = h.select_rows(&cls)?.layer_norm(&model.final_gain, &model.final_bias, 1e-5)?;
    model.head.forward(&c)
}

fn remem_scaling() -> Check {
    let cfg = tiny_vit(2);
    let model = e(VitModel::new(cfg, 2))?;
    let x = images(&cfg, 4, 1);
    let neutral = e(model.forward(&ReMemConfig::neutral(), &x))?.logits.to_vec();
    let plain = e(plain_forward(&model, &x))?.to_vec();
    let neutral_equal = bits(&neutral) == bits(&plain);

    let _m = precision_scope(Precision::F64);
    let cfg = tiny_vit(3);
    let model = e(VitModel::new(cfg, 3))?;
    for layer in &model.layers {
        for t in [&layer.fc2.weight, &layer.fc2.bias, &layer.out.weight, &layer.out.bias] {
            e(t.set_data(vec![0.0; t.numel()]))?;
        }
    }
    let x = images(&cfg, 2, 2);
    let start: Vec<f64> = model
        .cls_token
        .to_vec()
        .iter()
        .zip(model.pos_embed.to_vec())
        .map(|(c, p)| c + p)
        .collect();
    let mut worst = 0.0f64;
    for alpha in [0.9, 0.8, 0.5] {
        let out = e(model.forward(&ReMemConfig::reweight(alpha), &x))?.residual_cls.to_vec();
        let factor = (2.0f64 - alpha).powi(cfg.n_layers as i32);
        for (i, got) in out.iter().enumerate() {
            let want = factor * start[i % cfg.d_embed];
            worst = worst.max((got - want).abs() / want.abs().max(1e-12));
        }
    }
    Ok((
        neutral_equal && worst <= 1e-5,
        format!("alpha=1 bit-equal {neutral_equal}; (2-a)^L rel err {worst:.1e}"),
    ))
}

fn linear(w: Vec<f64>, d_in: usize, d_out: usize) -> Linear {
    Linear {
        weight: Tensor::param(w, &[d_in, d_out]).unwrap(),
        bias: Tensor::param(vec![0.0; d_out], &[d_out]).unwrap(),
    }
}

fn expert_mi_bound() -> Check {
    let mut rng = rng_for(2024, "moe-instances");
    let (mut violations, mut tightest) = (0, f64::INFINITY);
    let trials = 250;
    for _ in 0..trials {
        let n_experts = rng.random_range(1..=4);
        let d_in = rng.random_range(1..=3);
        let d_mlp = rng.random_range(3..=6);
        let bits = rng.random_range(1..=3u32);
        let fc1 = (0..d_in * d_mlp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fc2 = (0..d_mlp * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let experts: Vec<Vec<usize>> = (0..n_experts)
            .map(|_| {
                let mut all: Vec<usize> = (0..d_mlp).collect();
                all.shuffle(&mut rng);
                all.truncate(rng.random_range(1..=3));
                all
            })
            .collect();
        let gate = (0..d_in * n_experts).map(|_| rng.random_range(-1.0..1.0)).collect();
        let router = e(Router::new(gate, d_in, n_experts))?;
        let mut moe = e(MoeMlp::new(linear(fc1, d_in, d_mlp), linear(fc2, d_mlp, 2), experts, router, Some(bits)))?;
        let support = rng.random_range(1..=256);
        let x = Tensor::new((0..support * d_in).map(|_| rng.random_range(-2.0..2.0)).collect(), &[support, d_in]).unwrap();
        e(moe.calibrate(&x))?;
        let w: Vec<f64> = (0..support).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / total).collect();
        let mi = e(moe_mi_empirical(&moe, &x, &probs))?;
        let bound = e(moe_mi_bound(n_experts, &moe.sizes(), bits))?;
        if mi > bound + 1e-9 {
            violations += 1;
        }
        tightest = tightest.min(bound - mi);
    }
    Ok((
        violations == 0,
        format!("{trials} instances, {violations} violations, smallest slack {tightest:.3} bits"),
    ))
}

fn graph(rows: &[&[f64]]) -> ActivationGraph {
    ActivationGraph::new(rows.concat(), rows.len(), rows[0].len()).unwrap()
}

fn same_up_to_relabel(a: &[usize], b: &[usize]) -> bool {
    let mut map = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *map.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

fn expertness_oracle() -> Check {
    let mut rng = rng_for(77, "random-graphs");
    let mut beaten = 0;
    let trials = 220;
    for t in 0..trials {
        let w = (0..36)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..2.0) })
            .collect();
        let g = e(ActivationGraph::new(w, 6, 6))?;
        if g.total_mass() == 0.0 {
            continue;
        }
        let exact = e(expertness_bruteforce(&g, 2))?.expertness;
        let spectral = e(expertness_spectral(&g, 2, t))?.expertness;
        if spectral > exact + 1e-12 {
            beaten += 1;
        }
    }

    let layouts: [&[(usize, usize)]; 4] = [
        &[(3, 4), (2, 3)],
        &[(2, 2), (3, 2), (2, 4)],
        &[(2, 3), (3, 2), (2, 2), (3, 3)],
        &[(1, 1), (4, 2)],
    ];
    let mut block_failures = 0;
    let mut fixtures = 0;
    for (li, sizes) in layouts.iter().enumerate() {
        for trial in 0..10u64 {
            let mut rng = rng_for(indexed_seed(li as u64, trial), "blocks");
            let mut rows = Vec::new();
            let mut cols = Vec::new();
            for (b, &(nu, nx)) in sizes.iter().enumerate() {
                rows.extend(std::iter::repeat_n(b, nu));
                cols.extend(std::iter::repeat_n(b, nx));
            }
            // Shuffle vertex order so recovery cannot lean on layout.
            rows.shuffle(&mut rng);
            cols.shuffle(&mut rng);
            let w = rows
                .iter()
                .flat_map(|r| cols.iter().map(move |c| (r, c)))
                .map(|(r, c)| if r == c { rng.random_range(0.1..2.0) } else { 0.0 })
                .collect();
            let g = e(ActivationGraph::new(w, rows.len(), cols.len()))?;
            let got = e(expertness_spectral(&g, sizes.len(), trial))?;
            let truth: Vec<usize> = rows.iter().chain(&cols).copied().collect();
            let labels: Vec<usize> =
                got.partition.neuron_labels.iter().chain(&got.partition.input_labels).copied().collect();
            fixtures += 1;
            if (got.expertness - 1.0).abs() > 1e-12 || !same_up_to_relabel(&truth, &labels) {
                block_failures += 1;
            }
        }
    }

    let identity = graph(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let ones = graph(&[&[1.0, 1.0], &[1.0, 1.0]]);
    let hand = [
        e(expertness_bruteforce(&identity, 2))?.expertness - 1.0,
        e(expertness_spectral(&identity, 2, 0))?.expertness - 1.0,
        e(expertness_bruteforce(&ones, 2))?.expertness - 0.5,
        e(expertness_spectral(&ones, 2, 0))?.expertness - 0.5,
    ];
    let hand_ok = hand.iter().all(|d| d.abs() <= 1e-9);
    Ok((
        beaten == 0 && block_failures == 0 && hand_ok,
        format!(
            "spectral>exact {beaten}/{trials}; block recovery failures {block_failures}/{fixtures}; hand values ok {hand_ok}"
        ),
    ))
}

fn loss_identities() -> Check {
    let s = Tensor::param(vec![0.3, -1.2, 2.0, 1.0, 0.5, -0.5], &[2, 3]).unwrap();
    let t = Tensor::new(vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0], &[2, 3]).unwrap();
    let y = [2, 0];
    let kd = e(kd_loss(&s, &t, &y, 1.0, 4.0))?.item();
    let ce = e(s.cross_entropy(&y))?.item();
    let label_only = kd.to_bits() == ce.to_bits();

    let _m = precision_scope(Precision::F64);
    let flat = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
    let teacher = Tensor::new(vec![0.75f64.ln(), 0.25f64.ln()], &[1, 2]).unwrap();
    let kl = e(kd_loss(&flat, &teacher, &[0], 0.0, 1.0))?.item();

    let rows = [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.25, 0.35, 0.4]];
    let p = Tensor::new(rows.concat(), &[3, 3]).unwrap();
    let same = e(dist_terms(&p, &p))?;
    let mut worst = same.inter.item().abs().max(same.intra.item().abs());
    let mut rng = rng_for(9, "affine");
    for _ in 0..20 {
        let affine: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let (a, b) = (rng.random_range(0.1..5.0), rng.random_range(-1.0..1.0));
                r.iter().map(move |v| a * v + b).collect::<Vec<_>>()
            })
            .collect();
        let terms = e(dist_terms(&Tensor::new(affine, &[3, 3]).unwrap(), &p))?;
        worst = worst.max(terms.inter.item().abs());
    }
    let pass = label_only && (kl - 0.130812).abs() <= 1e-5 && worst <= 1e-9;
    Ok((
        pass,
        format!("lambda=1 bit-equal CE {label_only}; KL {kl:.6}; DIST identical/affine max {worst:.1e}"),
    ))
}

fn serialization() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tiny_vit(2);
    let model = e(VitModel::new(cfg, 12))?;
    let ckpt = dir.path().join("m.rmem");
    e(save_checkpoint(&model, &ckpt))?;
    let loaded = e(load_checkpoint(cfg, &ckpt))?;
    let ckpt_exact = model
        .parameters()
        .iter()
        .zip(loaded.parameters())
        .all(|(a, b)| a.name == b.name && bits(&a.tensor.to_vec()) == bits(&b.tensor.to_vec()));

    let ds = e(generate_shapes(&ShapesSpec {
        n_classes: 6,
        image_size: 8,
        samples_per_class: 4,
        ..ShapesSpec::default()
    }))?;
    let dpath = dir.path().join("d.rmds");
    e(save_dataset(&ds, &dpath))?;
    let back = e(load_dataset(&dpath))?;
    let data_exact = bits(&back.images) == bits(&quantize_pixels(&ds.images))
        && back.labels == ds.labels
        && (back.channels, back.height, back.width, back.n_classes) == (ds.channels, ds.height, ds.width, ds.n_classes);

    let corrupt = |src: &std::path::Path, name: &str, edit: &dyn Fn(&mut Vec<u8>)| {
        let mut b = std::fs::read(src).unwrap();
        edit(&mut b);
        let p = dir.path().join(name);
        std::fs::write(&p, b).unwrap();
        p
    };
    let bad_magic = |b: &mut Vec<u8>| b[0] ^= 0xff;
    let bad_version = |b: &mut Vec<u8>| b[4] = 99;
    let cut = |b: &mut Vec<u8>| b.truncate(b.len() - 3);
    let kinds = [
        matches!(load_checkpoint(cfg, &corrupt(&ckpt, "m1", &bad_magic)), Err(Error::BadMagic { .. })),
        matches!(load_checkpoint(cfg, &corrupt(&ckpt, "m2", &bad_version)), Err(Error::Version { .. })),
        matches!(load_checkpoint(cfg, &corrupt(&ckpt, "m3", &cut)), Err(Error::Truncated { .. })),
        matches!(load_dataset(&corrupt(&dpath, "d1", &bad_magic)), Err(Error::BadMagic { .. })),
        matches!(load_dataset(&corrupt(&dpath, "d2", &bad_version)), Err(Error::Version { .. })),
        matches!(load_dataset(&corrupt(&dpath, "d3", &cut)), Err(Error::Truncated { .. })),
    ];
    let errors_ok = kinds.iter().all(|k| *k);
    Ok((
        ckpt_exact && data_exact && errors_ok,
        format!("checkpoint exact {ckpt_exact}; dataset exact {data_exact}; error kinds {kinds:?}"),
    ))
}

// ----------------------------------------------------------- directional

const SEEDS: u64 = 5;
const NEEDED: usize = 4;
/// SAM radii standing in for the large and small ends of the radius grid.
const LARGE_RHO: f64 = 0.05;
const SMALL_RHO: f64 = 0.005;
const REWEIGHT_ALPHA: f64 = 0.8;
/// Floor on the error increase when turning a pruning step into a slope.
const ERR_FLOOR: f64 = 0.01;

/// Everything measured for one seed.
struct SeedResult {
    mi_early: f64,
    mi_late: f64,
    vanilla_acc: f64,
    mi_vanilla: f64,
    sam_large_acc: f64,
    mi_sam_large: f64,
    student_sam_large: f64,
    student_sam_small: f64,
    mlp_slope: f64,
    attn_slope: f64,
    lower_expertness: f64,
    upper_expertness: f64,
    student_vanilla: f64,
    student_reweight: f64,
    student_remem: f64,
}

fn student(cfg: &RunConfig, t: &TrainedTeacher, remem: ReMemConfig, splits: &Splits) -> Result<f64, String> {
    let run: StudentRun = distill_student(cfg, Some((&t.model, remem)), splits, cfg.seed).map_err(|e| e.to_string())?;
    Ok(run.final_acc)
}

fn cli<T>(r: remem_cli::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn measure_seed(seed: u64) -> Result<SeedResult, String> {
    let start = Instant::now();
    let cfg = RunConfig { seed, ..RunConfig::default() };
    let splits = cli(prepare_data(&cfg))?;
    let base = cli(base_teacher(&cfg))?;
    let neutral = ReMemConfig::neutral();
    let reweight = ReMemConfig::reweight(REWEIGHT_ALPHA);
    let ft = |rho: f64| FinetuneConfig {
        sam_rho: rho,
        ..cfg.finetune()
    };
    let early_step = cfg.schedule.checkpoint_steps[0];

    let vanilla = cli(finetune_teacher(&base, &neutral, &ft(0.0), &splits, seed))?;
    let early = cli(at_checkpoint(&base, &vanilla.run, early_step))?;
    let p_early = cli(info_point(&cfg, "early", &early, &neutral, &splits, seed))?;
    let p_late = cli(info_point(&cfg, "late", &vanilla.model, &neutral, &splits, seed))?;

    let sam_large = cli(finetune_teacher(&base, &neutral, &ft(LARGE_RHO), &splits, seed))?;
    let sam_small = cli(finetune_teacher(&base, &neutral, &ft(SMALL_RHO), &splits, seed))?;
    let p_sam = cli(info_point(&cfg, "sam", &sam_large.model, &neutral, &splits, seed))?;

    let mut slopes = [0.0; 2];
    for (i, kind) in ["mlp", "attn"].iter().enumerate() {
        let mut total = 0.0;
        for k in 1..=2 {
            let remem = if *kind == "mlp" {
                ReMemConfig { prune_mlp_top_k: k, ..neutral }
            } else {
                ReMemConfig { prune_attn_top_k: k, ..neutral }
            };
            let t = cli(finetune_teacher(&base, &remem, &ft(0.0), &splits, seed))?;
            let p = cli(info_point(&cfg, kind, &t.model, &remem, &splits, seed))?;
            let gain = p.mi.mi_proxy - p_late.mi.mi_proxy;
            let cost = (p.teacher_err - p_late.teacher_err).max(ERR_FLOOR);
            total += gain / cost;
        }
        slopes[i] = total / 2.0;
    }

    let k = cfg.vit.n_classes;
    let profile = e(expertness_profile(&vanilla.model, &neutral, &splits.train, k, seed))?;
    let half = profile.len() / 2;
    let mean = |rows: &[remem::expertness::LayerExpertness]| rows.iter().map(|r| r.expertness).sum::<f64>() / rows.len() as f64;

    let reweighted = cli(finetune_teacher(&base, &reweight, &ft(0.0), &splits, seed))?;
    let remem_t = cli(finetune_teacher(&base, &reweight, &ft(LARGE_RHO), &splits, seed))?;
    let r = SeedResult {
        mi_early: p_early.mi.mi_proxy,
        mi_late: p_late.mi.mi_proxy,
        vanilla_acc: vanilla.test_acc,
        mi_vanilla: p_late.mi.mi_proxy,
        sam_large_acc: sam_large.test_acc,
        mi_sam_large: p_sam.mi.mi_proxy,
        student_sam_large: student(&cfg, &sam_large, neutral, &splits)?,
        student_sam_small: student(&cfg, &sam_small, neutral, &splits)?,
        mlp_slope: slopes[0],
        attn_slope: slopes[1],
        lower_expertness: mean(&profile[..half]),
        upper_expertness: mean(&profile[half..]),
        student_vanilla: student(&cfg, &vanilla, neutral, &splits)?,
        student_reweight: student(&cfg, &reweighted, reweight, &splits)?,
        student_remem: student(&cfg, &remem_t, reweight, &splits)?,
    };
    println!(
        "  seed {seed} ({:.0}s): mi early {:.4} late {:.4} sam {:.4} | acc vanilla {:.3} sam {:.3} | \
         slopes mlp {:.3} attn {:.3} | expertness lower {:.3} upper {:.3} | students vanilla {:.3} \
         reweight {:.3} sam {:.3} (small {:.3}) remem {:.3}",
        start.elapsed().as_secs_f64(),
        r.mi_early,
        r.mi_late,
        r.mi_sam_large,
        r.vanilla_acc,
        r.sam_large_acc,
        r.mlp_slope,
        r.attn_slope,
        r.lower_expertness,
        r.upper_expertness,
        r.student_vanilla,
        r.student_reweight,
        r.student_sam_large,
        r.student_sam_small,
        r.student_remem
    );
    Ok(r)
}

fn tally(results: &[SeedResult], f: impl Fn(&SeedResult) -> bool) -> usize {
    results.iter().filter(|r| f(r)).count()
}

fn mean_of(results: &[SeedResult], f: impl Fn(&SeedResult) -> f64) -> f64 {
    results.iter().map(f).sum::<f64>() / results.len() as f64
}

fn main() {
    let directional = std::env::var("REMEM_ACCEPT_DIRECTIONAL").map_or(true, |v| v != "0");
    let strict = std::env::var("REMEM_ACCEPT_STRICT").is_ok_and(|v| v == "1");

    let exact = [
        run(1, "gradient fidelity", gradient_fidelity),
        run(2, "SAM degeneracy and geometry", sam_geometry),
        run(3, "reweighting neutrality and scaling", remem_scaling),
        run(4, "expert MI bound", expert_mi_bound),
        run(5, "expertness oracle", expertness_oracle),
        run(6, "loss identities", loss_identities),
        run(7, "serialization", serialization),
    ];
    let mut directional_results = Vec::new();
    if directional {
        println!("directional suite over {SEEDS} seeds (pass = right direction in >= {NEEDED}):");
        let start = Instant::now();
        let mut results = Vec::new();
        let mut failure = None;
        for seed in 0..SEEDS {
            match catch_unwind(AssertUnwindSafe(|| measure_seed(seed))) {
                Ok(Ok(r)) => results.push(r),
                Ok(Err(e)) => failure = Some(format!("seed {seed}: {e}")),
                Err(_) => failure = Some(format!("seed {seed} panicked")),
            }
            if failure.is_some() {
                break;
            }
        }
        println!("  directional runs took {:.0}s", start.elapsed().as_secs_f64());
        let rs = &results;
        let guard = |f: &dyn Fn() -> Check| -> Check {
            match &failure {
                Some(msg) => Err(msg.clone()),
                None => f(),
            }
        };
        directional_results = vec![
            run(8, "MI depletion with training", || {
                guard(&|| {
                    let n = tally(rs, |r| r.mi_late < r.mi_early);
                    Ok((n >= NEEDED, format!("late < early in {n}/{SEEDS}")))
                })
            }),
            run(9, "large-radius SAM raises MI", || {
                guard(&|| {
                    let mi = tally(rs, |r| r.mi_sam_large > r.mi_vanilla && (r.sam_large_acc - r.vanilla_acc).abs() <= 0.05);
                    let st = tally(rs, |r| r.student_sam_large > r.student_sam_small);
                    Ok((
                        mi >= NEEDED && st >= NEEDED,
                        format!("higher MI within 5 points in {mi}/{SEEDS}; large beats small radius on students in {st}/{SEEDS}"),
                    ))
                })
            }),
            run(10, "MLP pruning beats attention", || {
                guard(&|| {
                    let n = tally(rs, |r| r.mlp_slope > r.attn_slope);
                    Ok((n >= NEEDED, format!("MI-per-error slope mlp > attn in {n}/{SEEDS}")))
                })
            }),
            run(11, "expertness concentrates on top", || {
                guard(&|| {
                    let n = tally(rs, |r| r.upper_expertness > r.lower_expertness);
                    Ok((n >= NEEDED, format!("upper-half mean > lower-half mean in {n}/{SEEDS}")))
                })
            }),
            run(12, "end-to-end ReMem benefit", || {
                guard(&|| {
                    let n = tally(rs, |r| r.student_remem > r.student_vanilla);
                    let (rem, rw, sam) = (
                        mean_of(rs, |r| r.student_remem),
                        mean_of(rs, |r| r.student_reweight),
                        mean_of(rs, |r| r.student_sam_large),
                    );
                    Ok((
                        n >= NEEDED && rem > rw && rem > sam,
                        format!("beats vanilla in {n}/{SEEDS}; mean student remem {rem:.3}, reweight {rw:.3}, sam {sam:.3}"),
                    ))
                })
            }),
        ];
    } else {
        println!("directional suite skipped (REMEM_ACCEPT_DIRECTIONAL=0)");
    }

    let exact_pass = exact.iter().filter(|o| o.pass).count();
    let dir_pass = directional_results.iter().filter(|o| o.pass).count();
    println!(
        "summary: exact {exact_pass}/{}, directional {dir_pass}/{}",
        exact.len(),
        directional_results.len()
    );
    let failed = exact_pass < exact.len() || (strict && dir_pass < directional_results.len());
    if failed {
        std::process::exit(1);
    }
}
