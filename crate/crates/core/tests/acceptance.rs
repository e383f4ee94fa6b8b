//! Acceptance suite: one check per criterion, each printing a single
//! `ACCEPTANCE <id> PASS|FAIL <name>: <detail>` line. The target uses its own
//! `main` so the lines are always shown; free arguments filter criteria by
//! substring (`cargo test --test acceptance -- c7 c8`).

use std::sync::OnceLock;
use std::time::Instant;

use molt_core::cam::{average_attention, Cam};
use molt_core::encoder::{encode, EncoderConfig, EncoderParams};
use molt_core::io::dump::{encode_cam, encode_segments};
use molt_core::io::report::format_metrics;
use molt_core::localize::{evaluate, iou, BBox, EvalRecord};
use molt_core::multiscale::{fuse_cams, Fusion, MultiscaleParams, PyramidConfig};
use molt_core::numerics::gradcheck::finite_difference;
use molt_core::numerics::{
    conv2d, global_avg_pool, matmul, minmax_normalize, softmax, GradTape, Tensor, Var,
};
use molt_core::pipeline::{infer_image, make_record, refine_image};
use molt_core::refine::{blend, cluster_mean_activation, refine_cam, RefineParams};
use molt_core::segmenter::{
    dpc_train_with_trace, segment_image, slic_superpixels, DpcConfig, DpcParams, SegmentMap, SlicParams,
};
use molt_core::synth::{synth_corpus, SynthConfig, SynthExample};
use molt_core::trainer::{batch_loss, loss_and_gradients, train_with, LabeledExample, Optimizer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ── tolerances ─────────────────────────────────────────────────────────

const FD_STEP: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SUITE_SECONDS: f64 = 60.0;
const ROW_SUM_TOL: f64 = 1e-6;
const ORACLE_ABS_TOL: f64 = 1e-12;
const LAW_TOL: f64 = 1e-12;
const TWO_TONE_AGREEMENT: f64 = 0.98;
const TOY_ACCURACY: f64 = 0.95;
const TOY_GT_KNOWN: f64 = 0.60;
const TOY_TAU: f64 = 0.2;
const TOY_TRAIN_SECONDS: f64 = 30.0 * 60.0;
const REFINE_SLACK: f64 = 0.01;

fn report(id: u32, name: &str, outcome: Result<String, String>) -> bool {
    match outcome {
        Ok(detail) => {
            println!("ACCEPTANCE {id} PASS {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("ACCEPTANCE {id} FAIL {name}: {detail}");
            false
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ── 1. gradient suite ──────────────────────────────────────────────────

/// Gradient entries at or below this magnitude (on both sides) are not
/// compared. Key biases, for instance, shift every attention logit in a row
/// equally and so have an exactly zero gradient that the tape reproduces
/// only up to roundoff.
const GRAD_MAGNITUDE_FLOOR: f64 = 1e-6;

/// Worst elementwise `|a − n| / max(|a|, |n|)` over entries above the floor.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .filter(|(x, y)| x.abs().max(y.abs()) > GRAD_MAGNITUDE_FLOOR)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

/// Worst relative error over `inputs` of the tape gradient of
/// `Σ op(inputs) ⊙ R` (fixed random `R`) against central differences.
fn check_primitive(inputs: &[Tensor], rng: &mut ChaCha8Rng, op: impl Fn(&mut GradTape, &[Var]) -> Var) -> f64 {
    let loss_of = |vals: &[Tensor], weights: Option<&Tensor>| -> (f64, Vec<Vec<f64>>, Tensor) {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let r = match weights {
            Some(w) => w.clone(),
            None => Tensor::full(&shape, 1.0),
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).expect("weights match output");
        let loss = tape.sum(prod);
        tape.backward(loss).expect("scalar loss");
        let value = tape.value(loss).item().unwrap();
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
            .collect();
        (value, grads, r)
    };
    let (_, _, ones) = loss_of(inputs, None);
    let weights = Tensor::from_fn(ones.shape(), |_| rng.random_range(0.5..1.5));
    let (_, analytic, _) = loss_of(inputs, Some(&weights));
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_difference(x.data(), FD_STEP, |probe| {
            let mut vals = inputs.to_vec();
            vals[i] = Tensor::new(x.shape().to_vec(), probe.to_vec()).unwrap();
            loss_of(&vals, Some(&weights)).0
        });
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let r = &mut rng;
    let mut out = Vec::new();
    let (a, b) = (random(&[3, 4], r), random(&[4, 2], r));
    out.push(("matmul", check_primitive(&[a.clone(), b], r, |t, v| t.matmul(v[0], v[1]).unwrap())));
    let c = random(&[5, 4], r);
    out.push(("matmul_nt", check_primitive(&[a.clone(), c], r, |t, v| t.matmul_nt(v[0], v[1]).unwrap())));
    let a2 = random(&[3, 4], r);
    out.push(("add", check_primitive(&[a.clone(), a2.clone()], r, |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("mul", check_primitive(&[a.clone(), a2], r, |t, v| t.mul(v[0], v[1]).unwrap())));
    let bias = random(&[4], r);
    out.push(("add_bias", check_primitive(&[a.clone(), bias.clone()], r, |t, v| t.add_bias(v[0], v[1]).unwrap())));
    out.push(("mul_last", check_primitive(&[a.clone(), bias], r, |t, v| t.mul_last(v[0], v[1]).unwrap())));
    out.push(("scale", check_primitive(std::slice::from_ref(&a), r, |t, v| t.scale(v[0], -1.7))));
    out.push(("softmax_rows", check_primitive(std::slice::from_ref(&a), r, |t, v| t.softmax(v[0], 1).unwrap())));
    out.push(("softmax_cols", check_primitive(std::slice::from_ref(&a), r, |t, v| t.softmax(v[0], 0).unwrap())));
    let (g, be) = (random(&[4], r), random(&[4], r));
    out.push((
        "layer_norm",
        check_primitive(&[a.clone(), g, be], r, |t, v| t.layer_norm(v[0], v[1], v[2], 1, 1e-5).unwrap()),
    ));
    out.push(("normalize_axis0", check_primitive(std::slice::from_ref(&a), r, |t, v| t.normalize(v[0], 0, 1e-5).unwrap())));
    out.push(("gelu", check_primitive(std::slice::from_ref(&a), r, |t, v| t.gelu(v[0]))));
    out.push(("relu", check_primitive(&[away_from_zero(&[3, 4], r)], r, |t, v| t.relu(v[0]))));
    let img = random(&[5, 4, 3], r);
    out.push(("global_avg_pool", check_primitive(std::slice::from_ref(&img), r, |t, v| t.global_avg_pool(v[0]).unwrap())));
    let k = random(&[3, 3, 3, 2], r);
    out.push(("conv2d_valid", check_primitive(&[img.clone(), k.clone()], r, |t, v| t.conv2d(v[0], v[1], 0).unwrap())));
    out.push(("conv2d_padded", check_primitive(&[img.clone(), k], r, |t, v| t.conv2d(v[0], v[1], 1).unwrap())));
    out.push(("bilinear_up", check_primitive(std::slice::from_ref(&img), r, |t, v| t.bilinear_resize(v[0], 7, 9).unwrap())));
    out.push(("bilinear_down", check_primitive(&[img], r, |t, v| t.bilinear_resize(v[0], 3, 2).unwrap())));
    out.push(("slice_cols", check_primitive(std::slice::from_ref(&a), r, |t, v| t.slice_cols(v[0], 1, 2).unwrap())));
    out.push(("slice_rows", check_primitive(std::slice::from_ref(&a), r, |t, v| t.slice_rows(v[0], 1, 2).unwrap())));
    let a3 = random(&[3, 2], r);
    out.push((
        "concat_cols",
        check_primitive(&[a.clone(), a3], r, |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
    ));
    let a4 = random(&[2, 4], r);
    out.push((
        "concat_rows",
        check_primitive(&[a.clone(), a4], r, |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
    ));
    out.push(("reshape", check_primitive(std::slice::from_ref(&a), r, |t, v| t.reshape(v[0], &[2, 6]).unwrap())));
    out.push(("sum", check_primitive(std::slice::from_ref(&a), r, |t, v| t.sum(v[0]))));
    out.push(("cross_entropy", check_primitive(&[a], r, |t, v| t.cross_entropy(v[0], &[1, 3, 0]).unwrap())));
    out
}

fn micro_pyramid() -> PyramidConfig {
    PyramidConfig::new(
        [2, 3, 4],
        EncoderConfig {
            image_side: 0,
            patch_side: 1,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            num_classes: 2,
            mlp_hidden: 8,
        },
    )
    .unwrap()
}

/// Worst relative error of the full three-branch loss gradient, per
/// parameter tensor, against central differences of the tape-free loss.
fn composition_error() -> f64 {
    let pcfg = micro_pyramid();
    let params = MultiscaleParams::init(&pcfg, 5).unwrap();
    // spread the tiny initial weights so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = params;
    for b in &mut params.branches {
        for t in b.leaves_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let batch: Vec<LabeledExample> = (0..2)
        .map(|i| LabeledExample {
            image: Tensor::from_fn(&[5, 5, 3], |_| rng.random_range(0.0..1.0)),
            class_id: i % 2,
        })
        .collect();
    let weights = [1.0, 0.7, 1.3];
    let (_, grads) = loss_and_gradients(&batch, &params, &pcfg, weights).unwrap();
    let mut worst: f64 = 0.0;
    for b in 0..3 {
        let mut probe = params.clone();
        let n_leaves = probe.branches[b].leaves_mut().len();
        let mut g = grads[b].clone();
        let analytic: Vec<Vec<f64>> = g.leaves_mut().iter().map(|t| t.data().to_vec()).collect();
        for leaf in 0..n_leaves {
            let base = probe.branches[b].leaves_mut()[leaf].data().to_vec();
            let numeric = finite_difference(&base, FD_STEP, |x| {
                probe.branches[b].leaves_mut()[leaf].data_mut().copy_from_slice(x);
                batch_loss(&batch, &probe, &pcfg, weights).unwrap()
            });
            probe.branches[b].leaves_mut()[leaf].data_mut().copy_from_slice(&base);
            worst = worst.max(relative_error(&analytic[leaf], &numeric));
        }
    }
    worst
}

fn c1_gradient_suite() -> bool {
    let t0 = Instant::now();
    let outcome = (|| {
        let prims = primitive_errors();
        let (worst_name, worst) = prims
            .iter()
            .copied()
            .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
        for (name, e) in &prims {
            ensure(*e < GRAD_REL_TOL, || format!("{name}: relative error {e:.3e}"))?;
        }
        let comp = composition_error();
        ensure(comp < GRAD_REL_TOL, || format!("three-branch loss: relative error {comp:.3e}"))?;
        let secs = t0.elapsed().as_secs_f64();
        ensure(secs < GRAD_SUITE_SECONDS, || format!("took {secs:.1}s"))?;
        Ok(format!(
            "{} primitives (worst {worst_name} {worst:.2e}), three-branch loss {comp:.2e}, {secs:.1}s",
            prims.len()
        ))
    })();
    report(1, "gradient suite", outcome)
}

// ── 2. attention invariants ────────────────────────────────────────────

fn c2_attention_invariants() -> bool {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut worst_attn: f64 = 0.0;
        let mut worst_avg: f64 = 0.0;
        for trial in 0..100 {
            let heads = rng.random_range(1..=4);
            let grid = rng.random_range(1..=4);
            let patch = rng.random_range(1..=4);
            let cfg = EncoderConfig {
                image_side: grid * patch,
                patch_side: patch,
                embed_dim: heads * rng.random_range(1..=4),
                num_heads: heads,
                num_blocks: rng.random_range(1..=3),
                num_classes: rng.random_range(2..=4),
                mlp_hidden: rng.random_range(1..=8),
            };
            let mut params = EncoderParams::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
            for t in params.leaves_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
            }
            let img = Tensor::from_fn(&[cfg.image_side, cfg.image_side, 3], |_| rng.random_range(0.0..1.0));
            let (_, stack) = encode(&img, &params, &cfg).map_err(|e| format!("trial {trial}: {e}"))?;
            let l = cfg.tokens();
            for m in &stack.maps {
                for row in m.data().chunks(l) {
                    worst_attn = worst_attn.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            let abar = average_attention(&stack).map_err(|e| e.to_string())?;
            for row in abar.data().chunks(l) {
                worst_avg = worst_avg.max((row.iter().sum::<f64>() - cfg.num_blocks as f64).abs());
            }
        }
        ensure(worst_attn <= ROW_SUM_TOL, || format!("attention row deviation {worst_attn:.2e}"))?;
        ensure(worst_avg <= ROW_SUM_TOL, || format!("averaged row deviation {worst_avg:.2e}"))?;
        Ok(format!(
            "100 configs; max |row−1| {worst_attn:.1e}, max |avg row−B| {worst_avg:.1e}"
        ))
    })();
    report(2, "attention invariants", outcome)
}

// ── 3. oracle equivalences ─────────────────────────────────────────────

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

fn naive_conv(x: &Tensor, k: &Tensor, pad: usize) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = 0.0;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let (y, xx) = ((oy + dy) as isize - pad as isize, (ox + dx) as isize - pad as isize);
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x.at(&[y as usize, xx as usize, ci]) * k.at(&[dy, dx, ci, co]);
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    out
}

fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..40 {
        for x in 0..40 {
            let ia = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
            let ib = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

fn gt_record(id: &str, pred_h: usize, top5: Vec<usize>) -> EvalRecord {
    EvalRecord::new(
        id,
        top5,
        BBox::new(0, 0, 10, pred_h).unwrap(),
        None,
        1,
        vec![BBox::new(0, 0, 10, 10).unwrap()],
    )
    .unwrap()
}

fn c3_oracle_equivalences() -> bool {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (n, k, m) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
            let (a, b) = (random(&[n, k], &mut rng), random(&[k, m], &mut rng));
            worst = worst.max(max_abs_diff(matmul(&a, &b).unwrap().data(), &naive_matmul(&a, &b)));

            let (h, w, cin, cout) = (rng.random_range(3..8), rng.random_range(3..8), rng.random_range(1..4), rng.random_range(1..4));
            let x = random(&[h, w, cin], &mut rng);
            let kk = random(&[3, 3, cin, cout], &mut rng);
            for pad in [0, 1] {
                worst = worst.max(max_abs_diff(conv2d(&x, &kk, pad).unwrap().data(), &naive_conv(&x, &kk, pad)));
            }

            let gap = global_avg_pool(&x).unwrap();
            let naive_gap: Vec<f64> = (0..cin)
                .map(|c| (0..h * w).map(|p| x.data()[p * cin + c]).sum::<f64>() / (h * w) as f64)
                .collect();
            worst = worst.max(max_abs_diff(gap.data(), &naive_gap));

            let s = softmax(&a, 1).unwrap();
            let mut naive_sm = Vec::new();
            for row in a.data().chunks(k) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                naive_sm.extend(row.iter().map(|v| (v - mx).exp() / z));
            }
            worst = worst.max(max_abs_diff(s.data(), &naive_sm));
        }
        ensure(worst <= ORACLE_ABS_TOL, || format!("kernel oracle deviation {worst:.2e}"))?;

        for i in 0..200 {
            let mut rb = || {
                let (x0, y0) = (rng.random_range(0..39), rng.random_range(0..39));
                BBox::new(x0, y0, rng.random_range(x0 + 1..=40), rng.random_range(y0 + 1..=40)).unwrap()
            };
            let (a, b) = (rb(), rb());
            ensure(iou(&a, &b) == pixel_iou(&a, &b), || format!("IoU pair {i}: {a:?} {b:?}"))?;
        }

        // hand-counted record sets
        let four: Vec<EvalRecord> = [6, 4, 9, 5].iter().enumerate().map(|(i, &h)| gt_record(&i.to_string(), h, vec![1, 0])).collect();
        let m = evaluate(&four).unwrap();
        ensure((m.gt_known, m.top1, m.top5) == (0.5, 0.5, 0.5), || format!("IoU {{.6,.4,.9,.5}} set gave {m:?}"))?;
        let perfect: Vec<EvalRecord> = (0..3).map(|i| gt_record(&i.to_string(), 10, vec![1, 0])).collect();
        let m = evaluate(&perfect).unwrap();
        ensure((m.top1, m.top5, m.gt_known) == (1.0, 1.0, 1.0), || format!("perfect set gave {m:?}"))?;
        let wrong: Vec<EvalRecord> = (0..3).map(|i| gt_record(&i.to_string(), 10, vec![0])).collect();
        let m = evaluate(&wrong).unwrap();
        ensure((m.top1, m.top5, m.gt_known) == (0.0, 0.0, 1.0), || format!("misclassified set gave {m:?}"))?;
        ensure(evaluate(&[]).is_err(), || "empty record set accepted".into())?;
        Ok(format!("kernels within {worst:.1e}; 200 IoU pairs exact; 3 hand-counted record sets"))
    })();
    report(3, "oracle equivalences", outcome)
}

// ── 4. fusion / normalization laws ─────────────────────────────────────

fn cam_of(map: Tensor, id: i32) -> Cam {
    Cam { map, scale_id: id }
}

fn c4_fusion_laws() -> bool {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut worst: f64 = 0.0;
        for trial in 0..50 {
            let cams: Vec<Cam> = [3, 4, 5]
                .iter()
                .enumerate()
                .map(|(i, &n)| cam_of(random(&[n, n, 2], &mut rng), i as i32))
                .collect();
            for m in &cams {
                let nm = minmax_normalize(&m.map);
                ensure(nm.min() >= 0.0 && nm.max() <= 1.0, || format!("trial {trial}: min-max outside [0,1]"))?;
            }
            for fusion in [Fusion::Mean, Fusion::Max] {
                let base = fuse_cams(&cams, 1, fusion).unwrap().map;
                let scaled: Vec<Cam> = cams
                    .iter()
                    .map(|c| {
                        let s = rng.random_range(0.1..10.0);
                        cam_of(c.map.map(|v| v * s), c.scale_id)
                    })
                    .collect();
                worst = worst.max(max_abs_diff(base.data(), fuse_cams(&scaled, 1, fusion).unwrap().map.data()));

                let same = vec![cams[2].clone(), cams[2].clone(), cams[2].clone()];
                let single = minmax_normalize(&cams[2].map.channel(0).unwrap());
                worst = worst.max(max_abs_diff(fuse_cams(&same, 0, fusion).unwrap().map.data(), single.data()));

                let flat: Vec<Cam> = [3, 4, 5]
                    .iter()
                    .map(|&n| cam_of(Tensor::full(&[n, n, 2], rng.random_range(-2.0..2.0)), 0))
                    .collect();
                let f = fuse_cams(&flat, 0, fusion).unwrap().map;
                ensure(f.data().iter().all(|&v| v == 0.0), || "constant maps did not fuse to zero".into())?;
            }
        }
        ensure(worst <= LAW_TOL, || format!("law deviation {worst:.2e}"))?;
        Ok(format!("50 trials × mean/max; rescaling and idempotence within {worst:.1e}; constants → 0"))
    })();
    report(4, "fusion and normalization laws", outcome)
}

// ── 5. SLIC / clustering properties ────────────────────────────────────

fn two_tone(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| {
        let (px, c) = (i / 3, i % 3);
        match (px % w < w / 2, c) {
            (true, 0) => 0.85,
            (true, _) => 0.15,
            (false, 2) => 0.8,
            (false, _) => 0.2,
        }
    })
}

fn half_agreement(seg: &SegmentMap) -> f64 {
    let w = seg.w;
    let left = seg.labels[w / 4];
    let hits = seg
        .labels
        .iter()
        .enumerate()
        .filter(|(p, &l)| (p % w < w / 2) == (l == left))
        .count();
    hits as f64 / seg.labels.len() as f64
}

fn c5_segmentation_properties() -> bool {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        for trial in 0..30 {
            let (h, w) = (rng.random_range(4..24), rng.random_range(4..24));
            let k = rng.random_range(1..=(h * w).min(60));
            let img = Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0));
            let s = slic_superpixels(&img, &SlicParams { target_segments: k, ..Default::default() }).map_err(|e| e.to_string())?;
            ensure(s.labels.len() == h * w && s.is_dense() && s.is_connected(), || {
                format!("trial {trial}: {h}×{w}, K={k} not a dense connected cover")
            })?;
        }
        let img = two_tone(32, 32);
        let cfg = DpcConfig { seed: 1, ..Default::default() };
        let seg = segment_image(&img, &SlicParams::default(), &cfg).map_err(|e| e.to_string())?;
        let agree = half_agreement(&seg);
        ensure(seg.num_segments == 2 && agree >= TWO_TONE_AGREEMENT, || {
            format!("two-tone gave {} clusters, agreement {agree:.4}", seg.num_segments)
        })?;
        let sp = slic_superpixels(&img, &SlicParams::default()).unwrap();
        let trace = dpc_train_with_trace(&img, &sp, DpcParams::init(&DpcConfig::default()).unwrap()).map_err(|e| e.to_string())?;
        let windows: Vec<f64> = trace.losses.chunks_exact(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        ensure(windows.len() >= 2 && windows.windows(2).all(|p| p[1] <= p[0]), || {
            format!("10-iteration window means {windows:?}")
        })?;
        Ok(format!(
            "30 random SLIC runs dense+connected; two-tone → 2 clusters at {agree:.4}; {} loss windows non-increasing",
            windows.len()
        ))
    })();
    report(5, "SLIC and clustering properties", outcome)
}

// ── 6. refinement laws ─────────────────────────────────────────────────

fn c6_refinement_laws() -> bool {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let mut worst: f64 = 0.0;
        for _ in 0..30 {
            let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
            let k = rng.random_range(1..=(h * w).min(8)) as u32;
            let labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
            let seg = SegmentMap::from_labels(h, w, labels).unwrap();
            let cam = Tensor::from_fn(&[h, w], |_| rng.random_range(0.0..1.0));
            let lambda = rng.random_range(0.0..=1.0);
            let blended = blend(&cam, &seg, RefineParams { lambda }).unwrap();
            let (mb, mc) = (cluster_mean_activation(&blended, &seg).unwrap(), cluster_mean_activation(&cam, &seg).unwrap());
            worst = worst.max(max_abs_diff(mb.data(), mc.data()));

            let id = refine_cam(&cam, &seg, RefineParams { lambda: 1.0 }).unwrap();
            worst = worst.max(max_abs_diff(id.data(), minmax_normalize(&cam).data()));

            let flat = blend(&cam, &seg, RefineParams { lambda: 0.0 }).unwrap();
            let mut seen = vec![None; seg.num_segments];
            for (&l, &v) in seg.labels.iter().zip(flat.data()) {
                match seen[l as usize] {
                    None => seen[l as usize] = Some(v),
                    Some(u) => ensure(u == v, || format!("lambda=0 output varies within segment {l}"))?,
                }
            }
        }
        ensure(worst <= LAW_TOL, || format!("law deviation {worst:.2e}"))?;
        Ok(format!("30 random maps; segment means and lambda=1 identity within {worst:.1e}; lambda=0 piecewise constant"))
    })();
    report(6, "refinement laws", outcome)
}

// ── 7 & 8. toy experiment ──────────────────────────────────────────────

/// Pinned toy experiment settings.
const TOY_SEED: u64 = 0;
const TOY_TRAIN: usize = 400;
const TOY_SIDE: usize = 64;
const TOY_EPOCHS: usize = 5;
const TOY_BATCH: usize = 8;
const TOY_LR: f64 = 0.005;

struct ToyOutcome {
    train_seconds: f64,
    epoch_losses: Vec<f64>,
    accuracy: f64,
    gt_known: f64,
    refined_gt_known: f64,
    refined_count: usize,
    unrefined_on_refined_subset: f64,
    full_image_baseline: f64,
}

fn toy_pyramid() -> PyramidConfig {
    PyramidConfig::desk(2)
}

fn toy_corpus() -> Vec<SynthExample> {
    synth_corpus(&SynthConfig {
        count: 500,
        side: TOY_SIDE,
        seed: TOY_SEED,
        ..Default::default()
    })
    .unwrap()
}

/// Test images refined in the refinement-direction check (clustering runs
/// per image and dominates the cost).
const TOY_REFINE_IMAGES: usize = 100;

fn toy_outcome() -> &'static ToyOutcome {
    static CELL: OnceLock<ToyOutcome> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = toy_corpus();
        let (train, test) = data.split_at(TOY_TRAIN);
        let labeled: Vec<LabeledExample> = train
            .iter()
            .map(|e| LabeledExample {
                image: e.image.clone(),
                class_id: e.class_id,
            })
            .collect();
        let pcfg = toy_pyramid();
        let tcfg = TrainConfig {
            epochs: TOY_EPOCHS,
            batch_size: TOY_BATCH,
            learning_rate: TOY_LR,
            seed: TOY_SEED,
            ..Default::default()
        };
        let t0 = Instant::now();
        let outcome = train_with(&labeled, &pcfg, &tcfg, None, |e, l| eprintln!("toy epoch {e}: loss {l:.4}")).unwrap();
        let train_seconds = t0.elapsed().as_secs_f64();
        let params = outcome.params;

        let slic = SlicParams::default();
        let dpc = DpcConfig {
            seed: TOY_SEED,
            ..Default::default()
        };
        let mut plain = Vec::new();
        let mut refined = Vec::new();
        for (i, e) in test.iter().enumerate() {
            let id = format!("test{i}");
            let inf = infer_image(&e.image, &params, &pcfg).unwrap();
            let rec = make_record(&id, &inf.combined, TOY_SIDE, TOY_SIDE, &inf.top5, e.class_id, &[e.gt_box], TOY_TAU).unwrap();
            plain.push(rec);
            if i < TOY_REFINE_IMAGES {
                let (_, cam) = refine_image(&e.image, &inf.combined, &slic, &dpc, RefineParams::default()).unwrap();
                refined.push(make_record(&id, &cam, TOY_SIDE, TOY_SIDE, &inf.top5, e.class_id, &[e.gt_box], TOY_TAU).unwrap());
            }
        }
        let full = BBox::new(0, 0, TOY_SIDE, TOY_SIDE).unwrap();
        let full_image_baseline = test.iter().filter(|e| iou(&full, &e.gt_box) > 0.5).count() as f64 / test.len() as f64;
        let acc = plain.iter().filter(|r| r.top5[0] == r.gt_class).count() as f64 / plain.len() as f64;
        ToyOutcome {
            train_seconds,
            epoch_losses: outcome.epoch_losses,
            accuracy: acc,
            gt_known: evaluate(&plain).unwrap().gt_known,
            refined_gt_known: evaluate(&refined).unwrap().gt_known,
            refined_count: refined.len(),
            unrefined_on_refined_subset: evaluate(&plain[..refined.len()]).unwrap().gt_known,
            full_image_baseline,
        }
    })
}

fn c7_toy_experiment() -> bool {
    let t = toy_outcome();
    let outcome = (|| {
        ensure(t.train_seconds <= TOY_TRAIN_SECONDS, || format!("training took {:.0}s", t.train_seconds))?;
        ensure(t.accuracy >= TOY_ACCURACY && t.gt_known >= TOY_GT_KNOWN, || {
            format!(
                "accuracy {:.3} (need {TOY_ACCURACY}), GT-known {:.3} (need {TOY_GT_KNOWN}); losses {:?}",
                t.accuracy, t.gt_known, t.epoch_losses
            )
        })?;
        Ok(format!(
            "accuracy {:.3}, GT-known {:.3} at tau {TOY_TAU} (full-image box: {:.3}); trained {} epochs in {:.0}s",
            t.accuracy,
            t.gt_known,
            t.full_image_baseline,
            t.epoch_losses.len(),
            t.train_seconds
        ))
    })();
    report(7, "toy experiment", outcome)
}

fn c8_refinement_direction() -> bool {
    let t = toy_outcome();
    let (r, u) = (t.refined_gt_known, t.unrefined_on_refined_subset);
    let outcome = if r >= u - REFINE_SLACK {
        Ok(format!("refined GT-known {r:.3} vs unrefined {u:.3} on {} test images", t.refined_count))
    } else {
        Err(format!("refined GT-known {r:.3} below unrefined {u:.3} − {REFINE_SLACK}"))
    };
    report(8, "refinement direction", outcome)
}

// ── 9. determinism ─────────────────────────────────────────────────────

fn small_run() -> (Vec<Vec<u8>>, Vec<Vec<u8>>, String) {
    let pcfg = PyramidConfig::new(
        [16, 24, 32],
        EncoderConfig {
            image_side: 0,
            patch_side: 8,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            num_classes: 2,
            mlp_hidden: 8,
        },
    )
    .unwrap();
    let data = synth_corpus(&SynthConfig {
        count: 10,
        side: 24,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let labeled: Vec<LabeledExample> = data[..6]
        .iter()
        .map(|e| LabeledExample {
            image: e.image.clone(),
            class_id: e.class_id,
        })
        .collect();
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        learning_rate: 1e-3,
        seed: 9,
        optimizer: Optimizer::Adam,
        ..Default::default()
    };
    let dir = std::env::temp_dir().join(format!("molt-determinism-{}", std::process::id()));
    let params = train_with(&labeled, &pcfg, &tcfg, Some(&dir), |_, _| {}).unwrap().params;
    let ckpts = (0..3)
        .map(|i| std::fs::read(dir.join(format!("branch{i}.ckpt"))).unwrap())
        .collect();
    std::fs::remove_dir_all(&dir).ok();
    let slic = SlicParams {
        target_segments: 16,
        ..Default::default()
    };
    let dpc = DpcConfig {
        train_iterations: 8,
        seed: 9,
        ..Default::default()
    };
    let mut dumps = Vec::new();
    let mut records = Vec::new();
    for (i, e) in data[6..].iter().enumerate() {
        let inf = infer_image(&e.image, &params, &pcfg).unwrap();
        let (seg, refined) = refine_image(&e.image, &inf.combined, &slic, &dpc, RefineParams::default()).unwrap();
        for c in inf.branch_cams.iter().chain([&inf.combined, &refined]) {
            dumps.push(encode_cam(c).unwrap());
        }
        dumps.push(encode_segments(&seg));
        records.push(make_record(&i.to_string(), &refined, 24, 24, &inf.top5, e.class_id, &[e.gt_box], 0.2).unwrap());
    }
    (ckpts, dumps, format_metrics(&records).unwrap())
}

fn c9_determinism() -> bool {
    let (a, b) = (small_run(), small_run());
    let outcome = if a == b {
        Ok(format!(
            "{} checkpoints, {} dumps and the metric report bit-identical across two runs",
            a.0.len(),
            a.1.len()
        ))
    } else {
        Err(format!(
            "checkpoints equal: {}, dumps equal: {}, report equal: {}",
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2
        ))
    };
    report(9, "determinism", outcome)
}

fn main() {
    let criteria: [(&str, fn() -> bool); 9] = [
        ("c1_gradient_suite", c1_gradient_suite),
        ("c2_attention_invariants", c2_attention_invariants),
        ("c3_oracle_equivalences", c3_oracle_equivalences),
        ("c4_fusion_laws", c4_fusion_laws),
        ("c5_segmentation_properties", c5_segmentation_properties),
        ("c6_refinement_laws", c6_refinement_laws),
        ("c7_toy_experiment", c7_toy_experiment),
        ("c8_refinement_direction", c8_refinement_direction),
        ("c9_determinism", c9_determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let passed = std::panic::catch_unwind(check).unwrap_or_else(|_| {
            println!("ACCEPTANCE {} FAIL {name}: panicked", i + 1);
            false
        });
        if !passed {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
