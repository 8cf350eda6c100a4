//! Acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use caswit::checkpoint::{Checkpoint, LoadMode};
use caswit::fusion::FusionConfig;
use caswit::geo::{
    crop, downsample_area2, find_neighbors, format_manifest, make_pair, parse_manifest, read_manifest,
    write_manifest, GeoTile, TileDescriptor,
};
use caswit::metrics::{confusion_and_scores, mbiou};
use caswit::model::{copy_prefix, Caswit, ModelConfig};
use caswit::nn::{ParamBuilder, ParamStore};
use caswit::objectives::{ce_loss, masked_l1, total_loss, LabelMap, VOID};
use caswit::ssl::{centered_lr_mask, pretrain_forward, sample_hr_mask, MaskSpec, ReconHead, SslHead};
use caswit::synthetic::{accuracy, constant_corpus, cue_dependent_mask, dataset, write_dataset, SceneConfig};
use caswit::tensor::{finite_diff_grad, max_rel_error};
use caswit::train::{evaluate, pretrain, train, AdamW, PretrainConfig, Sample, TrainConfig};
use caswit::{no_grad, Error, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: caswit::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

// ---------------------------------------------------------------- criterion 1

/// Relative error between the tape gradient and central differences of
/// `sum(f(x) ⊙ w)` for a fixed random weighting `w`.
fn grad_error(x: &Tensor<f64>, seed: u64, f: &dyn Fn(&Tensor<f64>) -> caswit::Result<Tensor<f64>>) -> Result<f64, String> {
    let probe = ok(f(x))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let w = rand_tensor(&mut rng, probe.shape());
    let xg = x.detach().requiring_grad();
    let out = ok(f(&xg))?;
    ok(ok(out.mul(&w))?.sum().backward())?;
    let analytic = xg.grad_vec().ok_or("no gradient reached the input")?;
    let loss = |t: &Tensor<f64>| Ok(f(t)?.mul(&w)?.sum().item());
    let numeric = ok(finite_diff_grad(loss, x, 1e-6))?;
    Ok(max_rel_error(&analytic, numeric.data()))
}

macro_rules! t {
    ($r:ident, [$($e:expr),*]) => {{
        let s = [$($e),*];
        rand_tensor($r, &s)
    }};
}

type OpCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> (Tensor<f64>, Box<dyn Fn(&Tensor<f64>) -> caswit::Result<Tensor<f64>>>)>);

fn op_cases() -> Vec<OpCase> {
    fn dim(rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(2..=4)
    }
    let mut v: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, |$rng:ident| $body:expr) => {
            v.push(($name, Box::new(move |$rng: &mut ChaCha8Rng| $body)));
        };
    }
    case!("add", |r| {
        let s = [dim(r), dim(r)];
        let o = rand_tensor(r, &s);
        (rand_tensor(r, &s), Box::new(move |x| x.add(&o)))
    });
    case!("sub(rhs)", |r| {
        let s = [dim(r), dim(r)];
        let o = rand_tensor(r, &s);
        (rand_tensor(r, &s), Box::new(move |x| o.sub(x)))
    });
    case!("mul", |r| {
        let s = [dim(r), dim(r)];
        let o = rand_tensor(r, &s);
        (rand_tensor(r, &s), Box::new(move |x| x.mul(&o)))
    });
    case!("add_bias(bias)", |r| {
        let (n, c) = (dim(r), dim(r));
        let a = t!(r, [n, c]);
        (t!(r, [c]), Box::new(move |b| a.add_bias(b)))
    });
    case!("scale", |r| {
        let f = r.random_range(-2.0..2.0);
        (t!(r, [dim(r), dim(r)]), Box::new(move |x| Ok(x.scale(f))))
    });
    case!("mul_scalar(scalar)", |r| {
        let a = t!(r, [dim(r), dim(r)]);
        (t!(r, [1]), Box::new(move |s| a.mul_scalar(s)))
    });
    case!("tanh", |r| (t!(r, [dim(r), dim(r)]), Box::new(|x| Ok(x.tanh()))));
    case!("gelu", |r| (t!(r, [dim(r), dim(r)]), Box::new(|x| Ok(x.gelu()))));
    case!("abs", |r| {
        let n = dim(r) * dim(r);
        let data = (0..n)
            .map(|_| r.random_range(0.1..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        (Tensor::from_vec(data, &[n]).unwrap(), Box::new(|x| Ok(x.abs())))
    });
    case!("matmul(lhs)", |r| {
        let (m, k, n) = (dim(r), dim(r), dim(r));
        let b = t!(r, [k, n]);
        (t!(r, [m, k]), Box::new(move |x| x.matmul(&b)))
    });
    case!("matmul(rhs)", |r| {
        let (m, k, n) = (dim(r), dim(r), dim(r));
        let a = t!(r, [m, k]);
        (t!(r, [k, n]), Box::new(move |x| a.matmul(x)))
    });
    case!("bmm(lhs)", |r| {
        let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
        let y = t!(r, [b, k, n]);
        (t!(r, [b, m, k]), Box::new(move |x| x.bmm(&y)))
    });
    case!("bmm(rhs)", |r| {
        let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
        let a = t!(r, [b, m, k]);
        (t!(r, [b, k, n]), Box::new(move |x| a.bmm(x)))
    });
    case!("softmax", |r| (t!(r, [dim(r), dim(r) + 1]), Box::new(|x| x.softmax_lastdim())));
    case!("layer_norm(x)", |r| {
        let c = dim(r) + 2;
        let (g, b) = (t!(r, [c]), t!(r, [c]));
        (t!(r, [dim(r), c]), Box::new(move |x| x.layer_norm(&g, &b, 1e-5)))
    });
    case!("layer_norm(gamma)", |r| {
        let c = dim(r) + 2;
        let (x, b) = (t!(r, [dim(r), c]), t!(r, [c]));
        (t!(r, [c]), Box::new(move |g| x.layer_norm(g, &b, 1e-5)))
    });
    case!("layer_norm(beta)", |r| {
        let c = dim(r) + 2;
        let (x, g) = (t!(r, [dim(r), c]), t!(r, [c]));
        (t!(r, [c]), Box::new(move |b| x.layer_norm(&g, b, 1e-5)))
    });
    case!("cross_entropy", |r| {
        let (n, k) = (dim(r) + 1, dim(r));
        let mut t: Vec<Option<usize>> = (0..n).map(|_| Some(r.random_range(0..k))).collect();
        t[0] = None;
        (t!(r, [n, k]), Box::new(move |x| x.cross_entropy(&t)))
    });
    case!("reshape", |r| {
        let (a, b) = (dim(r), dim(r));
        (t!(r, [a, b]), Box::new(move |x| x.reshape(&[b, a])))
    });
    case!("permute", |r| (t!(r, [dim(r), dim(r), dim(r)]), Box::new(|x| x.permute(&[2, 0, 1]))));
    case!("transpose", |r| (t!(r, [dim(r), dim(r), dim(r)]), Box::new(|x| x.transpose(0, 2))));
    case!("concat", |r| {
        let (a, c) = (dim(r), dim(r));
        let o = t!(r, [a, dim(r)]);
        (t!(r, [a, c]), Box::new(move |x| Tensor::concat(&[o.clone(), x.clone()], 1)))
    });
    case!("narrow", |r| {
        let n = dim(r) + 2;
        (t!(r, [dim(r), n]), Box::new(move |x| x.narrow(1, 1, n - 2)))
    });
    case!("sum", |r| (t!(r, [dim(r), dim(r)]), Box::new(|x| Ok(x.sum()))));
    case!("mean", |r| (t!(r, [dim(r), dim(r)]), Box::new(|x| Ok(x.mean()))));
    case!("avg_pool2d", |r| (t!(r, [4, 2 * dim(r), dim(r)]), Box::new(|x| x.avg_pool2d(2))));
    case!("upsample_nearest", |r| (t!(r, [dim(r), dim(r), 2]), Box::new(|x| x.upsample_nearest(2))));
    case!("upsample_bilinear", |r| {
        let (oh, ow) = (dim(r) + 3, dim(r) + 2);
        (t!(r, [dim(r), dim(r), 2]), Box::new(move |x| x.upsample_bilinear(oh, ow)))
    });
    case!("unfold3x3", |r| (t!(r, [dim(r), dim(r), 2]), Box::new(|x| x.unfold3x3())));
    case!("pixel_shuffle", |r| (t!(r, [dim(r), dim(r), 12]), Box::new(|x| x.pixel_shuffle(2))));
    case!("space_to_depth", |r| (t!(r, [2 * dim(r), 2 * dim(r), 2]), Box::new(|x| x.space_to_depth(2))));
    case!("gather_rows", |r| {
        let n = dim(r) + 1;
        let idx: Vec<usize> = (0..n + 2).map(|_| r.random_range(0..n)).collect();
        (t!(r, [n, dim(r)]), Box::new(move |x| x.gather_rows(&idx)))
    });
    case!("replace_rows(x)", |r| {
        let (n, c) = (dim(r) + 1, dim(r));
        let tok = t!(r, [c]);
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        (t!(r, [n, c]), Box::new(move |x| x.replace_rows(&mask, &tok)))
    });
    case!("replace_rows(token)", |r| {
        let (n, c) = (dim(r) + 1, dim(r));
        let x = t!(r, [n, c]);
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        (t!(r, [c]), Box::new(move |t| x.replace_rows(&mask, t)))
    });
    v
}

fn scene_sample(seed: u64) -> Sample {
    dataset(&SceneConfig::default(), 1, seed).unwrap().remove(0)
}

fn model_spot_check() -> Result<String, String> {
    let mut p = ParamStore::<f64>::new();
    let mut cfg = ModelConfig::toy(4);
    cfg.fusion.gated = false;
    let model = ok(Caswit::new(&mut p, &cfg))?;
    let s = scene_sample(3);
    let (hr, lr) = (s.hr.cast::<f64>(), s.lr.as_ref().unwrap().cast::<f64>());
    let loss_of = |p: &ParamStore<f64>| -> caswit::Result<Tensor<f64>> {
        let out = model.forward_train(p, &hr, Some(&lr))?;
        total_loss(&out.hr, out.lr.as_ref().unwrap(), &s.labels, 0.5)
    };
    ok(ok(loss_of(&p))?.backward())?;
    let picks = [
        "encoder.hr.patch_embed.proj.weight",
        "encoder.lr.stages.1.blocks.0.attn.q.weight",
        "fusion.stages.2.attn.q.weight",
        "fusion.stages.3.mlp.fc1.weight",
        "decoder.classifier.weight",
        "aux_decoder.fuse.weight",
        "encoder.hr.stages.3.merge.reduction.weight",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in p.names().map(str::to_string).collect::<Vec<_>>() {
        if !picks.iter().any(|k| name == *k) {
            continue;
        }
        let t = ok(p.get(&name))?.clone();
        let g = t.grad_vec().ok_or(format!("{name} has no gradient"))?;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let candidates: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= 1e-2 * gmax).collect();
        let i = candidates[rng.random_range(0..candidates.len())];
        let base = t.to_vec();
        let eval = |delta: f64| -> Result<f64, String> {
            let mut q = p.clone();
            let mut d = base.clone();
            d[i] += delta;
            ok(q.set_data(&name, d))?;
            let _g = no_grad();
            Ok(ok(loss_of(&q))?.item())
        };
        let h = 1e-5;
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(max_rel_error(&[g[i]], &[fd]));
        checked += 1;
    }
    ensure!(checked == picks.len(), "only {checked} parameters matched the spot-check list");
    ensure!(worst <= 1e-4, "full-model spot check rel error {worst:.2e}");
    Ok(format!("{checked} model parameters max rel {worst:.1e}"))
}

fn criterion_1() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    let cases = op_cases();
    for (name, make) in &cases {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let (x, f) = make(&mut rng);
            let e = grad_error(&x, seed, &*f)?;
            ensure!(e <= 1e-4, "{name} seed {seed}: rel error {e:.2e}");
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    let model = model_spot_check()?;
    Ok(format!(
        "{} ops × 5 instances, worst {:.1e} ({}); {model}",
        cases.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------- criterion 2

fn logits(cfg: &ModelConfig, hr: &Tensor<f32>, lr: Option<&Tensor<f32>>) -> Result<Vec<f32>, String> {
    let mut p = ParamStore::<f32>::new();
    let m = ok(Caswit::new(&mut p, cfg))?;
    let out = ok(m.forward_infer(&p, hr, lr))?.to_vec();
    ensure!(m.aux_calls() == 0, "inference called the auxiliary head");
    Ok(out)
}

fn criterion_2() -> Outcome {
    let s = scene_sample(5);
    let lr = s.lr.clone().unwrap();
    let base = logits(&ModelConfig::baseline(4), &s.hr, None)?;
    let mut disabled = ModelConfig::toy(4);
    disabled.fusion = FusionConfig::disabled(disabled.stream.heads);
    let dis = logits(&disabled, &s.hr, Some(&lr))?;
    ensure!(base.iter().zip(&dis).all(|(a, b)| a.to_bits() == b.to_bits()), "fusion-disabled logits differ from the baseline");

    let gated = ModelConfig::toy(4);
    let mut zeroed = gated.clone();
    zeroed.fusion.zero_attention = true;
    let (a, b) = (logits(&gated, &s.hr, Some(&lr))?, logits(&zeroed, &s.hr, Some(&lr))?);
    ensure!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "g = 0 differs from zeroed attention");

    let mut ungated = ModelConfig::toy(4);
    ungated.fusion.gated = false;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bumped: Vec<f32> = lr.data().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    let lr2 = Tensor::from_vec(bumped, lr.shape()).unwrap();
    let (u1, u2) = (logits(&ungated, &s.hr, Some(&lr))?, logits(&ungated, &s.hr, Some(&lr2))?);
    let delta = u1.iter().zip(&u2).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    ensure!(delta >= 1e-6, "ungated HR logits moved only {delta:e}");
    Ok(format!("disabled≡baseline, g=0≡zero-attention (bitwise); ungated LR perturbation Δ={delta:.2e}"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels = LabelMap::new(4, 4, 3, (0..16).map(|i| if i == 5 { VOID } else { (i % 3) as u8 }).collect()).unwrap();
    let hr = rand_tensor(&mut rng, &[4, 4, 3]);
    let lr = rand_tensor(&mut rng, &[4, 4, 3]);
    let l0 = ok(total_loss(&hr, &lr, &labels, 0.0))?.item();
    let lhr = ok(ce_loss(&hr, &labels))?.item();
    ensure!(l0.to_bits() == lhr.to_bits(), "α=0 total {l0} ≠ L_HR {lhr}");

    // HR: uniform two-class logits → ln 2. LR 4×4: the centre 2×2 carries the
    // labels at margin 1, the VOID ring carries arbitrary logits.
    let two = LabelMap::new(4, 4, 2, vec![0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
    let hr = Tensor::<f64>::zeros(&[4, 4, 2]);
    let mut lr = vec![0.0; 32];
    for y in 0..4 {
        for x in 0..4 {
            let (a, b) = if (1..3).contains(&y) && (1..3).contains(&x) {
                let cls = two.get((y - 1) * 2, (x - 1) * 2);
                if cls == 0 { (1.0, 0.0) } else { (0.0, 1.0) }
            } else {
                (37.0, -12.0)
            };
            lr[(y * 4 + x) * 2] = a;
            lr[(y * 4 + x) * 2 + 1] = b;
        }
    }
    let lr = Tensor::from_vec(lr, &[4, 4, 2]).unwrap();
    let got = ok(total_loss(&hr, &lr, &two, 0.5))?.item();
    let want = std::f64::consts::LN_2 + 0.5 * (1.0 + (-1.0f64).exp()).ln();
    ensure!((got - want).abs() <= 1e-6, "α=0.5 case {got} vs {want}");

    let logits = rand_tensor(&mut rng, &[4, 4, 3]);
    let shift: Vec<f64> = (0..16).flat_map(|_| [rng.random_range(-5.0..5.0)].repeat(3)).collect();
    let shifted = logits.add(&Tensor::from_vec(shift, &[4, 4, 3]).unwrap()).unwrap();
    let (a, b) = (ok(ce_loss(&logits, &labels))?.item(), ok(ce_loss(&shifted, &labels))?.item());
    ensure!((a - b).abs() <= 1e-12, "CE not shift invariant: {a} vs {b}");
    let mut garbage = logits.to_vec();
    garbage[5 * 3..6 * 3].copy_from_slice(&[1e3, -1e3, 7.0]);
    let c = ok(ce_loss(&Tensor::from_vec(garbage, &[4, 4, 3]).unwrap(), &labels))?.item();
    ensure!(a.to_bits() == c.to_bits(), "VOID pixel influenced the loss");
    Ok(format!("α=0 exact, α=0.5 |Δ|={:.1e}, shift-invariant, VOID ignored", (got - want).abs()))
}

// ---------------------------------------------------------------- criterion 4

fn oracle_band(m: &LabelMap, c: u8, d: usize) -> Vec<bool> {
    let (h, w) = (m.height as i64, m.width as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize) == c;
    let contour: Vec<(i64, i64)> = (0..h * w)
        .map(|k| (k / w, k % w))
        .filter(|&(y, x)| inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(a, b)| !inside(y + a, x + b)))
        .collect();
    (0..h * w)
        .map(|k| {
            let (y, x) = (k / w, k % w);
            contour.iter().any(|&(cy, cx)| (cy - y).abs().max((cx - x).abs()) <= d as i64)
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..50 {
        let k = rng.random_range(1..=5usize);
        let d = rng.random_range(1..=2usize);
        let gt_l: Vec<u8> = (0..1024).map(|_| if rng.random_bool(0.05) { VOID } else { rng.random_range(0..k as u8) }).collect();
        let pr_l: Vec<u8> = (0..1024).map(|_| rng.random_range(0..k as u8)).collect();
        let (gt, pred) = (LabelMap::new(32, 32, k, gt_l).unwrap(), LabelMap::new(32, 32, k, pr_l).unwrap());
        let r = ok(confusion_and_scores(&pred, &gt, d))?;
        let mut ious = Vec::new();
        let mut bious = Vec::new();
        for c in 0..k as u8 {
            let valid = |i: usize| gt.labels[i] != VOID;
            let tp = (0..1024).filter(|&i| valid(i) && gt.labels[i] == c && pred.labels[i] == c).count();
            let fp = (0..1024).filter(|&i| valid(i) && gt.labels[i] != c && pred.labels[i] == c).count();
            let fn_ = (0..1024).filter(|&i| valid(i) && gt.labels[i] == c && pred.labels[i] != c).count();
            for g in 0..k {
                let n = (0..1024).filter(|&i| gt.labels[i] == g as u8 && pred.labels[i] == c).count() as u64;
                ensure!(r.confusion[g][c as usize] == n, "case {case}: confusion[{g}][{c}]");
            }
            let den = tp + fp + fn_;
            let iou = (den > 0).then(|| tp as f64 / den as f64);
            let f1 = (den > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
            ensure!(r.per_class_iou[c as usize] == iou, "case {case}: IoU class {c}");
            ensure!(r.per_class_f1[c as usize] == f1, "case {case}: F1 class {c}");
            ious.extend(iou);
            let (bp, bg) = (oracle_band(&pred, c, d), oracle_band(&gt, c, d));
            let inter = (0..1024).filter(|&i| valid(i) && bp[i] && bg[i]).count();
            let union = (0..1024).filter(|&i| valid(i) && (bp[i] || bg[i])).count();
            let b = (union > 0).then(|| inter as f64 / union as f64);
            ensure!(r.per_class_biou[c as usize] == b, "case {case}: BIoU class {c}");
            bious.extend(b);
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let mb = bious.iter().sum::<f64>() / bious.len() as f64;
        ensure!(r.miou == miou || (r.miou.is_nan() && miou.is_nan()), "case {case}: mIoU");
        ensure!(r.mbiou == mb || (r.mbiou.is_nan() && mb.is_nan()), "case {case}: mBIoU");
        ensure!(ok(mbiou(&pred, &pred, d))? == 1.0, "case {case}: mbiou(x, x) ≠ 1");
    }
    Ok("50 random 32×32 pairs exact against set enumeration; mbiou(x,x)=1".into())
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    for (grid, r) in [((8, 8), 0.75), ((16, 16), 0.75), ((6, 10), 0.4), ((8, 8), 0.5)] {
        for seed in 0..5 {
            let n = ok(sample_hr_mask(grid, r, seed))?.count();
            let want = (r * (grid.0 * grid.1) as f64).round() as usize;
            ensure!(n == want, "HR mask {grid:?} r={r}: {n} ≠ {want}");
        }
    }
    for (side, r) in [(8usize, 0.5f64), (16, 0.5), (4, 0.25)] {
        let m = ok(centered_lr_mask((side, side), r))?;
        let s = (side as f64 * r.sqrt()).round() as usize;
        let lo = (side - s) / 2;
        for y in 0..side {
            for x in 0..side {
                let inside = (lo..lo + s).contains(&y) && (lo..lo + s).contains(&x);
                ensure!(m.get(y, x) == inside, "LR mask {side}×{side} r={r} wrong at ({y},{x})");
            }
        }
    }

    // masked ℓ1 ignores unmasked target pixels exactly
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let recon = rand_tensor(&mut rng, &[8, 8, 3]);
    let target = rand_tensor(&mut rng, &[8, 8, 3]);
    let mask: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let mut t2 = target.to_vec();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            t2[i * 3] += 10.0;
        }
    }
    let a = ok(masked_l1(&recon, &target, &mask))?.item();
    let b = ok(masked_l1(&recon, &Tensor::from_vec(t2, &[8, 8, 3]).unwrap(), &mask))?.item();
    ensure!(a.to_bits() == b.to_bits(), "masked ℓ1 moved with unmasked pixels");

    // masked HR patches cannot leak into the reconstruction
    let mut cfg = ModelConfig::toy(4);
    cfg.tile = 32;
    cfg.share_streams = true;
    cfg.aux_head = false;
    cfg.segmentation = false;
    let mut p = ParamStore::<f64>::new();
    let model = ok(Caswit::new(&mut p, &cfg))?;
    let head = ok(SslHead::new(&mut p, &model, 1))?;
    let hr = rand_tensor(&mut rng, &[32, 32, 3]);
    let lr = rand_tensor(&mut rng, &[32, 32, 3]);
    let masks = ok(MaskSpec::sample((8, 8), (8, 8), 0.75, 0.5, 3))?;
    let out = ok(pretrain_forward(&p, &model, &head, &hr, Some(&lr), &masks))?;
    let mut hr2 = hr.to_vec();
    for (i, &m) in out.mask_pix.iter().enumerate() {
        if m {
            hr2[i * 3 + 1] -= 0.5;
        }
    }
    let out2 = ok(pretrain_forward(&p, &model, &head, &Tensor::from_vec(hr2, &[32, 32, 3]).unwrap(), Some(&lr), &masks))?;
    ensure!(out.recon.to_vec() == out2.recon.to_vec(), "masked HR pixels reached the reconstruction");

    // recon head: identity projection places channel c·s²+i·s+j of cell (p,q) at pixel (p·s+i, q·s+j, c)
    let s = 4;
    let mut hp = ParamStore::<f64>::new();
    let rh = ok(ReconHead::new(&mut ParamBuilder::new(&mut hp, 0), "r", 3 * s * s, s))?;
    let mut eye = vec![0.0; (3 * s * s) * (3 * s * s)];
    (0..3 * s * s).for_each(|i| eye[i * 3 * s * s + i] = 1.0);
    ok(hp.set_data("r.weight", eye))?;
    ok(hp.set_data("r.bias", vec![0.0; 3 * s * s]))?;
    let (ch, cw) = (2, 3);
    for ch_i in [0, 5, 17, 3 * s * s - 1] {
        for (pc, qc) in [(0, 0), (1, 2)] {
            let mut v = vec![0.0; ch * cw * 3 * s * s];
            v[(pc * cw + qc) * 3 * s * s + ch_i] = 1.0;
            let y = ok(rh.forward(&hp, &Tensor::from_vec(v, &[ch, cw, 3 * s * s]).unwrap()))?;
            ensure!(y.shape() == [ch * s, cw * s, 3], "recon shape {:?}", y.shape());
            let (c, i, j) = (ch_i / (s * s), ch_i % (s * s) / s, ch_i % s);
            let hot = ((pc * s + i) * cw * s + qc * s + j) * 3 + c;
            for (k, &val) in y.data().iter().enumerate() {
                ensure!(val == if k == hot { 1.0 } else { 0.0 }, "impulse {ch_i} of ({pc},{qc}) misplaced");
            }
        }
    }

    // 200 pretraining steps on 8 flat colours
    let corpus = ok(constant_corpus(8, 32, 0))?;
    let mut cfg = ModelConfig::toy(4);
    cfg.tile = 32;
    cfg.share_streams = true;
    cfg.aux_head = false;
    cfg.segmentation = false;
    cfg.fusion.gated = false;
    let mut p = ParamStore::<f32>::new();
    let model = ok(Caswit::new(&mut p, &cfg))?;
    let head = ok(SslHead::new(&mut p, &model, 9))?;
    let mut opt = AdamW::new(5e-4, 0.01);
    let pc = PretrainConfig { steps: 200, batch: 8, lr_max: 5e-4, lr_min: 1e-6, weight_decay: 0.01, r_hr: 0.75, r_lr: 0.5, seed: 0 };
    let losses = ok(pretrain(&model, &head, &mut p, &mut opt, &corpus, &pc, |_, _| {}))?;
    let mut mae = 0.0;
    for (i, (hr, lr)) in corpus.iter().enumerate() {
        let masks = ok(MaskSpec::sample((8, 8), (8, 8), 0.75, 0.5, 10_000 + i as u64))?;
        let _g = no_grad();
        mae += ok(pretrain_forward(&p, &model, &head, hr, lr.as_ref(), &masks))?.loss.item() as f64 / corpus.len() as f64;
    }
    ensure!(mae < 0.05, "masked MAE after 200 steps {mae:.4} (first step {:.4})", losses[0]);
    Ok(format!(
        "mask counts, ℓ1 invariance, no leakage, pixel-shuffle impulses; 200-step MAE {:.4} → {mae:.4} on fresh masks",
        losses[0]
    ))
}

// ---------------------------------------------------------------- criterion 6

fn flat_tile(id: &str, di: i64, dj: i64, p: usize, rgb: [f32; 3]) -> GeoTile {
    let span = p as f64 * 0.5;
    GeoTile {
        tile_id: id.into(),
        image: Tensor::from_vec(rgb.repeat(p * p), &[p, p, 3]).unwrap(),
        labels: None,
        origin_x: 1000.0 + dj as f64 * span,
        origin_y: 5000.0 - di as f64 * span,
        gsd: 0.5,
    }
}

fn criterion_6() -> Outcome {
    let p = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let centre = GeoTile {
        tile_id: "c".into(),
        image: Tensor::from_vec((0..p * p * 3).map(|_| rng.random_range(0.0..1.0)).collect(), &[p, p, 3]).unwrap(),
        labels: None,
        origin_x: 1000.0,
        origin_y: 5000.0,
        gsd: 0.5,
    };
    let mut tiles = vec![centre.clone()];
    for (k, (di, dj)) in [(-1, -1), (-1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        tiles.push(flat_tile(&format!("n{k}"), di, dj, p, [0.2 * (k + 1) as f32, 0.5, 0.9]));
    }
    let pair = ok(make_pair(&centre, &tiles))?;
    ensure!(pair.lr.shape() == [p, p, 3], "LR shape {:?}", pair.lr.shape());
    let centre_lr = ok(crop(&pair.lr, p / 4, p / 4, p / 2, p / 2))?;
    let down = ok(downsample_area2(&centre.image))?;
    ensure!(centre_lr.to_vec() == down.to_vec(), "LR centre ≠ area-downsampled HR");
    let expect = [[true, true, false], [false, true, true], [false, false, true]];
    ensure!(pair.neighbor_presence == expect, "presence {:?}", pair.neighbor_presence);

    // LR pixel (y, x) covers mosaic rows 2y+P/2.. ; neighbour cell = that / P
    let lrv = pair.lr.data();
    for y in 0..p {
        for x in 0..p {
            let (my, mx) = (2 * y + p / 2, 2 * x + p / 2);
            let (ci, cj) = (my / p, mx / p);
            if (ci, cj) == (1, 1) {
                continue;
            }
            let px = &lrv[(y * p + x) * 3..(y * p + x) * 3 + 3];
            if !expect[ci][cj] {
                ensure!(px == [0.0, 0.0, 0.0], "missing neighbour not black at LR ({y},{x})");
            } else {
                let k = [(0, 0), (0, 1), (1, 2), (2, 2)].iter().position(|&c| c == (ci, cj)).unwrap();
                ensure!(px == [0.2 * (k + 1) as f32, 0.5, 0.9], "neighbour {k} colour wrong at LR ({y},{x})");
            }
        }
    }

    let mut grid = Vec::new();
    for di in -2..=2 {
        for dj in -2..=2 {
            if (di + dj) % 3 != 0 {
                grid.push(flat_tile(&format!("g{di}{dj}"), di, dj, 8, [0.0; 3]));
            }
        }
    }
    let mut links = 0;
    for a in &grid {
        let na = ok(find_neighbors(a, &grid))?;
        for (i, row) in na.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                let Some(b) = cell else { continue };
                if (i, j) == (1, 1) {
                    continue;
                }
                let nb = ok(find_neighbors(b, &grid))?;
                ensure!(
                    nb[2 - i][2 - j].map(|t| t.tile_id.as_str()) == Some(a.tile_id.as_str()),
                    "asymmetric neighbours {} / {}",
                    a.tile_id,
                    b.tile_id
                );
                links += 1;
            }
        }
    }
    Ok(format!("P={p}: co-registration exact, black padding, {links} symmetric neighbour links"))
}

// ---------------------------------------------------------------- criterion 7

struct OverfitRun {
    overall_at: Option<usize>,
    cue_at: Option<usize>,
    losses: Vec<f64>,
    final_acc: f64,
    miou: f64,
}

fn overfit(fusion: bool, seed: u64, full: bool) -> Result<OverfitRun, String> {
    let sc = SceneConfig::default();
    let mut data = ok(dataset(&sc, 16, seed))?;
    let mut cfg = if fusion { ModelConfig::toy(4) } else { ModelConfig::baseline(4) };
    cfg.seed = seed;
    if !fusion {
        data.iter_mut().for_each(|s| s.lr = None);
    }
    let band = cue_dependent_mask(&sc);
    let mut p = ParamStore::<f32>::new();
    let model = ok(Caswit::new(&mut p, &cfg))?;
    let mut opt = AdamW::new(1e-3, 0.01);
    let tc = TrainConfig {
        steps: 300,
        batch: 4,
        lr_max: 1e-3,
        lr_min: 1e-6,
        weight_decay: 0.01,
        alpha: 0.5,
        seed,
        clip_norm: None,
        augment: false,
    };
    let (mut overall_at, mut cue_at, mut final_acc) = (None, None, 0.0);
    let logs = ok(train(&model, &mut p, &mut opt, &data, &tc, |log, p| {
        if log.step % 10 != 0 {
            return Ok(true);
        }
        let _g = no_grad();
        let (mut hit, mut tot, mut chit, mut ctot) = (0, 0, 0, 0);
        for s in &data {
            let pred = model.predict(p, &s.hr, s.lr.as_ref())?;
            let (a, b) = accuracy(&pred, &s.labels, None);
            let (c, d) = accuracy(&pred, &s.labels, Some(&band));
            (hit, tot, chit, ctot) = (hit + a, tot + b, chit + c, ctot + d);
        }
        final_acc = hit as f64 / tot as f64;
        if overall_at.is_none() && final_acc >= 0.95 {
            overall_at = Some(log.step);
        }
        if cue_at.is_none() && chit as f64 / ctot as f64 >= 0.95 {
            cue_at = Some(log.step);
        }
        Ok(full || overall_at.is_none() || cue_at.is_none())
    }))?;
    let miou = if full { ok(evaluate(&model, &p, &data, 2))?.miou } else { f64::NAN };
    Ok(OverfitRun { overall_at, cue_at, losses: logs.iter().map(|l| l.loss).collect(), final_acc, miou })
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

fn criterion_7() -> Outcome {
    let never = usize::MAX;
    let mut fuse_cue = Vec::new();
    let mut base_cue = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let run = overfit(true, seed, seed == 0)?;
        let at = run.overall_at.ok_or(format!("fusion seed {seed} never reached 95% (last {:.3})", run.final_acc))?;
        if seed == 0 {
            let blocks: Vec<f64> = run.losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
            ensure!(blocks.len() == 6, "seed 0 stopped after {} steps", run.losses.len());
            ensure!(blocks.windows(2).all(|w| w[1] < w[0]), "50-step loss blocks not decreasing: {blocks:.4?}");
            ensure!(run.miou >= 0.9, "training-fixture mIoU {:.3}", run.miou);
            detail.push(format!("blocks {:.3}→{:.3}, mIoU {:.3}", blocks[0], blocks[5], run.miou));
        }
        fuse_cue.push(run.cue_at.unwrap_or(never));
        detail.push(format!("fusion s{seed}: 95% @{at}"));
        let b = overfit(false, seed, true)?;
        base_cue.push(b.cue_at.unwrap_or(never));
    }
    let (f, b) = (median(fuse_cue.clone()), median(base_cue.clone()));
    let show = |v: usize| if v == never { ">300".to_string() } else { v.to_string() };
    ensure!(f <= b, "cue subset: fusion median {} vs baseline {}", show(f), show(b));
    ensure!(f != never, "fusion never reached 95% on the cue subset");
    Ok(format!(
        "{}; cue-subset 95% median fusion {} vs baseline {}",
        detail.join(", "),
        show(f),
        show(b)
    ))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = SceneConfig::default();
    let data = ok(dataset(&sc, 2, 8))?;
    let images: Vec<_> = data.iter().map(|s| (s.hr.clone(), s.lr.clone())).collect();

    let mut ssl_cfg = ModelConfig::toy(4);
    ssl_cfg.share_streams = true;
    ssl_cfg.aux_head = false;
    ssl_cfg.segmentation = false;
    let mut sp = ParamStore::<f32>::new();
    let ssl_model = ok(Caswit::new(&mut sp, &ssl_cfg))?;
    let head = ok(SslHead::new(&mut sp, &ssl_model, 0))?;
    let mut opt = AdamW::new(1e-4, 0.01);
    let pc = PretrainConfig { steps: 2, batch: 2, ..Default::default() };
    ok(pretrain(&ssl_model, &head, &mut sp, &mut opt, &images, &pc, |_, _| {}))?;
    let path = dir.path().join("ssl.cswt");
    ok(Checkpoint::from_store(&sp, Some(&opt), "").save(&path))?;

    let mut p = ParamStore::<f32>::new();
    let model = ok(Caswit::new(&mut p, &ModelConfig::toy(4)))?;
    let ck = ok(Checkpoint::load(&path))?;
    ensure!(
        matches!(ck.apply(&mut p.clone(), LoadMode::Strict), Err(Error::Load(_))),
        "strict load of an SSL checkpoint must fail"
    );
    let report = ok(ck.apply(&mut p, LoadMode::Intersect))?;
    let names = |s: &ParamStore<f32>| s.names().map(str::to_string).collect::<std::collections::BTreeSet<_>>();
    let (ssl_names, sup_names) = (names(&sp), names(&p));
    let want_loaded: Vec<_> = ssl_names.intersection(&sup_names).cloned().collect();
    let want_skipped: Vec<_> = ssl_names.difference(&sup_names).cloned().collect();
    let want_missing: Vec<_> = sup_names.difference(&ssl_names).cloned().collect();
    ensure!(report.loaded == want_loaded, "loaded set differs from the name intersection");
    ensure!(report.skipped == want_skipped, "skipped set differs");
    ensure!(report.missing == want_missing, "missing set differs");
    ensure!(report.skipped.iter().all(|n| n.starts_with("ssl.")), "non-SSL tensor skipped");
    ensure!(report.skipped.iter().any(|n| n.starts_with("ssl.recon")), "reconstruction head not skipped");
    ensure!(report.loaded.iter().any(|n| n.starts_with("fusion.")), "fusion not loaded");
    ensure!(report.loaded.iter().any(|n| n.starts_with("encoder.hr.")), "encoder not loaded");
    for n in &report.loaded {
        ensure!(ok(p.get(n))?.to_vec() == ok(sp.get(n))?.to_vec(), "{n} not copied bit-exactly");
    }
    let copied = copy_prefix(&mut p, "encoder.hr", "encoder.lr");
    ensure!(copied > 0, "nothing copied into the context stream");

    let tc = TrainConfig { steps: 1, batch: 2, ..Default::default() };
    let logs = ok(train(&model, &mut p, &mut AdamW::new(6e-5, 0.01), &data, &tc, |_, _| Ok(true)))?;
    ensure!(logs[0].loss.is_finite(), "fine-tune loss {}", logs[0].loss);
    Ok(format!(
        "loaded {} skipped {} (ssl.*) missing {}; untied {copied} tensors; fine-tune loss {:.4}",
        report.loaded.len(),
        report.skipped.len(),
        report.missing.len(),
        logs[0].loss
    ))
}

// ---------------------------------------------------------------- criterion 9

fn caswit(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_caswit"))
        .args(args)
        .output()
        .expect("run caswit")
        .status
        .code()
        .unwrap_or(-1)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = ok(dataset(&SceneConfig::default(), 2, 9))?;
    let mut p = ParamStore::<f32>::new();
    let model = ok(Caswit::new(&mut p, &ModelConfig::toy(4)))?;
    let mut opt = AdamW::new(1e-4, 0.01);
    let tc = TrainConfig { steps: 2, batch: 2, ..Default::default() };
    ok(train(&model, &mut p, &mut opt, &data, &tc, |_, _| Ok(true)))?;
    let path = dir.path().join("m.cswt");
    let ck = Checkpoint::from_store(&p, Some(&opt), "model = toy\n");
    ok(ck.save(&path))?;
    let back = ok(Checkpoint::load(&path))?;
    ensure!(back == ck, "checkpoint decode differs");
    let mut q = ParamStore::<f32>::new();
    let _ = ok(Caswit::new(&mut q, &ModelConfig::toy(4)))?;
    ok(back.apply(&mut q, LoadMode::Strict))?;
    for (n, t) in p.iter() {
        let u = ok(q.get(n))?;
        ensure!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{n} differs after reload");
    }
    let mut opt2 = AdamW::new(1e-4, 0.01);
    back.restore_optimizer(&q, &mut opt2);
    ensure!(opt2.step == opt.step && opt2.m == opt.m && opt2.v == opt.v, "optimizer state differs after reload");

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let truncated = dir.path().join("t.cswt");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).map_err(|e| e.to_string())?;
    let before: Vec<Vec<f32>> = q.iter().map(|(_, t)| t.to_vec()).collect();
    ensure!(matches!(Checkpoint::load(&truncated), Err(Error::Format(_))), "truncated checkpoint not a format error");
    ensure!(q.iter().map(|(_, t)| t.to_vec()).collect::<Vec<_>>() == before, "state mutated");

    let descs = vec![
        TileDescriptor {
            tile_id: "a".into(),
            image_path: "a.ppm".into(),
            label_path: Some("a_gt.pgm".into()),
            origin_x: 651_234.125,
            origin_y: 6_862_001.5,
            gsd: 0.2,
        },
        TileDescriptor {
            tile_id: "b".into(),
            image_path: "sub/b.ppm".into(),
            label_path: None,
            origin_x: 0.1 + 0.2,
            origin_y: -3.0e-7,
            gsd: 1.0 / 3.0,
        },
    ];
    ensure!(ok(parse_manifest(&format_manifest(&descs)))? == descs, "manifest text round trip");
    let mpath = dir.path().join("manifest.txt");
    ok(write_manifest(&descs, &mpath))?;
    ensure!(ok(read_manifest(&mpath))? == descs, "manifest file round trip");

    let ds = dir.path().join("ds");
    let manifest = ok(write_dataset(&SceneConfig::default(), 1, 0, &ds))?;
    let m = manifest.to_str().unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let codes = [
        ("success", caswit(&["tile", "--manifest", m, "--out_dir", o]), 0),
        ("no command", caswit(&[]), 1),
        ("unknown key", caswit(&["train", "--bogus", "1"]), 1),
        ("missing file", caswit(&["eval", "--manifest", m, "--checkpoint", "/nonexistent/x.cswt"]), 2),
        ("bad manifest", caswit(&["tile", "--manifest", mpath.to_str().unwrap(), "--out_dir", o]), 2),
        (
            "NaN abort",
            caswit(&["train", "--manifest", m, "--steps", "3", "--lr_max", "1e30", "--out_dir", o]),
            3,
        ),
    ];
    for (what, got, want) in codes {
        ensure!(got == want, "exit code for {what}: {got}, expected {want}");
    }
    Ok("checkpoint + optimizer bit-exact, truncation atomic, manifest round trips, exit codes 0/1/2/3".into())
}

// ----------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", criterion_1),
        ("fusion equivalences", criterion_2),
        ("loss contracts", criterion_3),
        ("metric oracles", criterion_4),
        ("ssl contracts", criterion_5),
        ("tiling geometry", criterion_6),
        ("overfit smoke test", criterion_7),
        ("transfer contract", criterion_8),
        ("round trips and exit codes", criterion_9),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("criterion {} PASS {name}: {msg} ({secs:.1}s)", i + 1),
            Err(msg) => {
                println!("criterion {} FAIL {name}: {msg} ({secs:.1}s)", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
