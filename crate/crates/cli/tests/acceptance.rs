//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Every reference value here is computed by code in this file (brute-force loops, an
//! explicitly unrolled convolution, two-pass moments) rather than by engine helpers.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mcrp_core::heatmap::{self, decode_tensor_dump, encode_tensor_dump, read_tensor_dump, write_tensor_dump};
use mcrp_core::mcrp::{channel_average, moments, normalize};
use mcrp_core::relprop::{zplus_conv, zplus_dense};
use mcrp_core::{
    forward, load_model, relevance_pass, run_mcrp, sample_mask, DropoutMask, Layer, ModelGraph,
    RelevanceSeed, SamplingConfig, SeedMode, Tensor,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn image16() -> PathBuf {
    fixtures().join("images/16x16.png")
}

fn input_for(model: &ModelGraph, image: &Path) -> Tensor {
    let s = model.input_shape();
    let rgb = heatmap::load_image(image, Some((s[1], s[2]))).unwrap();
    heatmap::to_model_input(&rgb, s[0]).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- conservation ----

fn boundary_sums(model: &ModelGraph, input: &Tensor, mask: &DropoutMask) -> (Vec<f64>, Vec<f64>) {
    let trace = forward(model, input, mask).unwrap();
    let seed =
        RelevanceSeed::from_logits(SeedMode::TargetClass(trace.logits().argmax()), trace.logits()).unwrap();
    let rel = relevance_pass(model, &trace, &seed, 0.0).unwrap();
    let sums = rel
        .relevances
        .iter()
        .map(|r| r.data().iter().map(|&v| v as f64).sum())
        .collect();
    (sums, rel.layer_leaks)
}

fn conservation() -> Outcome {
    let start = Instant::now();
    let positive = load_model(fixtures().join("tiny-cnn-positive")).map_err(|e| e.to_string())?;
    let x = input_for(&positive, &image16());
    let mut worst_rel = 0.0f64;
    let masks =
        std::iter::once(DropoutMask::all_ones(&positive)).chain((0..5).map(|t| sample_mask(&positive, 3, t)));
    for mask in masks {
        let (sums, _) = boundary_sums(&positive, &x, &mask);
        ensure(sums[sums.len() - 1] > 0.0, || {
            "positive fixture seeded no relevance".into()
        })?;
        for l in 0..sums.len() - 1 {
            let rel = (sums[l] - sums[l + 1]).abs() / sums[l + 1].abs();
            worst_rel = worst_rel.max(rel);
        }
    }
    ensure(worst_rel <= 1e-4, || {
        format!("positive fixture relative drift {worst_rel:e} > 1e-4")
    })?;

    let dead = load_model(fixtures().join("dead-column")).map_err(|e| e.to_string())?;
    let (sums, leaks) = boundary_sums(
        &dead,
        &input_for(&dead, &image16()),
        &DropoutMask::all_ones(&dead),
    );
    let mut worst_abs = 0.0f64;
    for l in 0..leaks.len() {
        worst_abs = worst_abs.max(((sums[l + 1] - sums[l]) - leaks[l]).abs());
    }
    let total_leak: f64 = leaks.iter().sum();
    ensure(total_leak > 0.1, || {
        format!("dead-column fixture leaked only {total_leak:e}")
    })?;
    ensure(worst_abs <= 1e-5, || {
        format!("dead-column |deficit - leak| {worst_abs:e} > 1e-5")
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "positive drift {worst_rel:.1e} rel, dead-column |deficit-leak| {worst_abs:.1e} (leak {total_leak:.3}), {elapsed:.0?}"
    ))
}

// ---- z+ oracle ----

/// Double loop over the z+ formula in f64; columns with a zero denominator give nothing.
fn zplus_oracle(x: &[f32], w: &[f32], n_in: usize, n_out: usize, r: &[f32], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; n_in];
    for j in 0..n_out {
        let mut z = 0.0f64;
        for i in 0..n_in {
            z += x[i] as f64 * (w[i * n_out + j] as f64).max(0.0);
        }
        if z + eps == 0.0 {
            continue;
        }
        for i in 0..n_in {
            out[i] += x[i] as f64 * (w[i * n_out + j] as f64).max(0.0) / (z + eps) * r[j] as f64;
        }
    }
    out
}

fn activations(rng: &mut StdRng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.25) {
                0.0
            } else {
                rng.random_range(0.0..2.0)
            }
        })
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

fn zplus_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5a50);
    let mut worst_dense = 0.0f64;
    for case in 0..100 {
        let (n_in, n_out) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let eps = if case % 2 == 0 { 0.0 } else { 1e-9 };
        let x = activations(&mut rng, n_in);
        let w: Vec<f32> = (0..n_in * n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..n_out).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = zplus_dense(
            &Tensor::new(vec![n_in], x.clone()).unwrap(),
            &Tensor::new(vec![n_in, n_out], w.clone()).unwrap(),
            None,
            None,
            &Tensor::new(vec![n_out], r.clone()).unwrap(),
            eps,
        )
        .map_err(|e| e.to_string())?;
        worst_dense = worst_dense.max(max_abs_diff(
            got.relevance.data(),
            &zplus_oracle(&x, &w, n_in, n_out, &r, eps as f64),
        ));
    }
    ensure(worst_dense <= 1e-6, || {
        format!("dense max deviation {worst_dense:e}")
    })?;

    let mut worst_conv = 0.0f64;
    let mut done = 0;
    while done < 20 {
        let (c, k) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let ks = rng.random_range(1..=3);
        let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
        let (span_h, span_w) = (h + 2 * pad - ks, w + 2 * pad - ks);
        if span_h % stride != 0 || span_w % stride != 0 {
            continue;
        }
        let (oh, ow) = (span_h / stride + 1, span_w / stride + 1);
        let x = activations(&mut rng, c * h * w);
        let kern: Vec<f32> = (0..k * c * ks * ks)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let r: Vec<f32> = (0..k * oh * ow).map(|_| rng.random_range(0.0..1.0)).collect();

        // explicit unrolling: one dense column per output position
        let (n_in, n_out) = (c * h * w, k * oh * ow);
        let mut dense = vec![0.0f32; n_in * n_out];
        for kk in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let col = (kk * oh + oy) * ow + ox;
                    for cc in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let row = (cc * h + iy as usize) * w + ix as usize;
                                dense[row * n_out + col] = kern[((kk * c + cc) * ks + ky) * ks + kx];
                            }
                        }
                    }
                }
            }
        }
        let expected = zplus_oracle(&x, &dense, n_in, n_out, &r, 1e-9);
        let got = zplus_conv(
            &Tensor::new(vec![c, h, w], x).unwrap(),
            &Tensor::new(vec![k, c, ks, ks], kern).unwrap(),
            stride,
            pad,
            None,
            None,
            &Tensor::new(vec![k, oh, ow], r).unwrap(),
            1e-9,
        )
        .map_err(|e| e.to_string())?;
        worst_conv = worst_conv.max(max_abs_diff(got.relevance.data(), &expected));
        done += 1;
    }
    ensure(worst_conv <= 1e-6, || {
        format!("conv max deviation {worst_conv:e}")
    })?;
    Ok(format!(
        "100 dense max dev {worst_dense:.1e}, 20 conv max dev {worst_conv:.1e}"
    ))
}

// ---- estimator identity ----

fn estimator_identity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xe57);
    let (t, pixels) = (100, 64);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for set in 0..50 {
        // mostly unit-range maps like normalized relevance, a few offset and spread out
        let (offset, scale) = if set % 10 == 9 { (50.0, 4.0) } else { (0.0, 1.0) };
        let maps: Vec<Tensor> = (0..t)
            .map(|_| Tensor::from_fn(&[8, 8], |_| offset + scale * rng.random_range(0.0f32..1.0)))
            .collect();
        let refs: Vec<&Tensor> = maps.iter().collect();
        let (mean, var, _) = moments(&refs).map_err(|e| e.to_string())?;
        for p in 0..pixels {
            let xs: Vec<f64> = maps.iter().map(|m| m.data()[p] as f64).collect();
            let mu = xs.iter().sum::<f64>() / t as f64;
            let v = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / t as f64;
            worst_mean = worst_mean.max((mean.data()[p] as f64 - mu).abs());
            worst_var = worst_var.max((var.data()[p] as f64 - v).abs());
        }
    }
    ensure(worst_var <= 1e-6, || format!("variance deviation {worst_var:e}"))?;
    Ok(format!(
        "50 sets x T=100: variance dev {worst_var:.1e}, mean dev {worst_mean:.1e}"
    ))
}

// ---- zero-dropout collapse ----

fn zero_dropout_collapse() -> Outcome {
    let model = load_model(fixtures().join("tiny-cnn")).map_err(|e| e.to_string())?;
    let x = input_for(&model, &image16());
    let cfg = SamplingConfig {
        samples: 16,
        keep_prob: Some(1.0),
        base_seed: 9,
        ..Default::default()
    };
    let run = run_mcrp(&model, &x, &cfg).map_err(|e| e.to_string())?;

    let trace = forward(&model, &x, &DropoutMask::all_ones(&model)).unwrap();
    let seed =
        RelevanceSeed::from_logits(SeedMode::TargetClass(trace.logits().argmax()), trace.logits()).unwrap();
    let rel = relevance_pass(&model, &trace, &seed, cfg.epsilon).unwrap();
    let single = normalize(&channel_average(rel.input_relevance()).unwrap());

    ensure(run.maps.sigma.data().iter().all(|&s| s == 0.0), || {
        "sigma not identically 0".into()
    })?;
    ensure(run.maps.variance.data().iter().all(|&s| s == 0.0), || {
        "variance not identically 0".into()
    })?;
    let same = run
        .maps
        .mean
        .data()
        .iter()
        .zip(single.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "mean differs from the deterministic map".into())?;
    Ok(format!(
        "T={}: sigma == 0 at {} pixels, mean bit-exact",
        cfg.samples,
        single.len()
    ))
}

// ---- normalization ----

fn normalization() -> Outcome {
    let model = load_model(fixtures().join("tiny-cnn")).map_err(|e| e.to_string())?;
    let run = run_mcrp(&model, &input_for(&model, &image16()), &SamplingConfig::default())
        .map_err(|e| e.to_string())?;
    let mut nonconstant = 0;
    for s in &run.samples {
        let d = s.pixel_map.data();
        ensure(d.iter().all(|v| (0.0..=1.0).contains(v)), || {
            format!("sample {} leaves [0,1]", s.t)
        })?;
        let (lo, hi) = (s.pixel_map.min(), s.pixel_map.max());
        if lo != hi {
            nonconstant += 1;
            ensure(lo == 0.0 && hi == 1.0, || {
                format!("sample {} spans [{lo}, {hi}]", s.t)
            })?;
        }
    }
    for v in [0.0f32, 3.5, -2.0] {
        let c = normalize(&Tensor::full(&[5, 7], v));
        ensure(c.data().iter().all(|&x| x == 0.0), || {
            format!("constant {v} map not zeroed")
        })?;
    }
    let ramp = normalize(&Tensor::from_fn(&[3, 3], |i| -4.0 + i as f32 * 0.25));
    ensure(ramp.min() == 0.0 && ramp.max() == 1.0, || {
        "ramp does not hit 0 and 1".into()
    })?;
    Ok(format!(
        "{} samples in [0,1], {nonconstant} non-constant hit 0 and 1, constants -> 0",
        run.samples.len()
    ))
}

// ---- CLI determinism and protocol defaults ----

fn mcrp(args: &[&str], threads: Option<&str>) -> Result<std::process::Output, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mcrp"));
    cmd.env_remove("MCRP_THREADS").args(args);
    if let Some(t) = threads {
        cmd.args(["--threads", t]);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "mcrp {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let name = e.file_name().into_string().unwrap();
            let mut bytes = fs::read(e.path()).unwrap();
            if name == "manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                let o = v.as_object_mut().unwrap();
                o.remove("wall_time_seconds");
                o.remove("threads");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            (name, bytes)
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (m, i) = (fixtures().join("tiny-cnn"), image16());
    let mut snaps = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "1"), ("c", "4"), ("d", "4")] {
        let out = tmp.path().join(run);
        let args = [
            "explain",
            "--model",
            m.to_str().unwrap(),
            "--image",
            i.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--samples",
            "40",
            "--seed",
            "1234",
            "--taps",
            "conv1,fc1",
            "--metrics",
            "mean,variance,sigma,snr,confusion",
        ];
        mcrp(&args, Some(threads))?;
        snaps.push(snapshot(&out));
    }
    for (k, s) in snaps.iter().enumerate().skip(1) {
        for ((na, ba), (nb, bb)) in snaps[0].iter().zip(s) {
            ensure(na == nb && ba == bb, || format!("run {k}: {na} / {nb} differ"))?;
        }
        ensure(snaps[0].len() == s.len(), || {
            format!("run {k}: file lists differ")
        })?;
    }
    Ok(format!(
        "{} files identical across 2 runs x threads {{1,4}}",
        snaps[0].len()
    ))
}

fn protocol_defaults() -> Outcome {
    let model = load_model(fixtures().join("tiny-cnn")).map_err(|e| e.to_string())?;
    let keeps: Vec<f32> = model
        .layers()
        .iter()
        .filter_map(|l| match l.layer {
            Layer::Dropout { keep_prob } => Some(keep_prob),
            _ => None,
        })
        .collect();
    ensure(keeps == [0.5], || format!("archive dropout {keeps:?}"))?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("run");
    let (m, i) = (fixtures().join("tiny-cnn"), image16());
    let start = Instant::now();
    mcrp(
        &[
            "explain",
            "--model",
            m.to_str().unwrap(),
            "--image",
            i.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            "1",
        ],
        None,
    )?;
    let elapsed = start.elapsed();
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    ensure(v["config"]["samples"] == 100, || "default T is not 100".into())?;
    ensure(v["config"]["keep_prob"].is_null(), || {
        "keep probability overridden by default".into()
    })?;
    ensure(
        v["config"]["epsilon"]
            .as_f64()
            .is_some_and(|e| (e - 1e-9).abs() < 1e-15),
        || "default epsilon".into(),
    )?;
    let sigma = read_tensor_dump(out.join("sigma.mcrt")).map_err(|e| e.to_string())?;
    ensure(sigma.max() > 0.0, || {
        "archive dropout produced no variance".into()
    })?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("T=100, keep 0.5 from archive, one core, {elapsed:.2?}"))
}

// ---- MCRT round trip ----

fn mcrt_roundtrip() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x4d435254);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixed: [&[usize]; 5] = [&[1], &[1, 1, 1, 1], &[1 << 20], &[2, 70_001], &[65_537, 1, 3]];
    let specials = [
        f32::NAN,
        -0.0,
        f32::INFINITY,
        f32::NEG_INFINITY,
        f32::MIN_POSITIVE / 2.0,
        f32::MAX,
    ];
    for case in 0..100 {
        let shape: Vec<usize> = match fixed.get(case) {
            Some(s) => s.to_vec(),
            None => (0..rng.random_range(1..=4))
                .map(|_| rng.random_range(1..=9))
                .collect(),
        };
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|k| {
                if k < specials.len() && case % 3 == 0 {
                    specials[k]
                } else {
                    f32::from_bits(rng.random())
                }
            })
            .collect();
        let t = Tensor::new(shape.clone(), data).map_err(|e| e.to_string())?;
        let back = if case % 4 == 0 {
            let path = tmp.path().join(format!("{case}.mcrt"));
            write_tensor_dump(&t, &path).map_err(|e| e.to_string())?;
            read_tensor_dump(&path).map_err(|e| e.to_string())?
        } else {
            decode_tensor_dump(&encode_tensor_dump(&t).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?
        };
        ensure(back.shape() == t.shape(), || {
            format!("case {case}: shape {:?} -> {:?}", t.shape(), back.shape())
        })?;
        let exact = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(exact, || format!("case {case}: payload differs"))?;
    }
    Ok("100 tensors bit-exact, incl. [1], [2^20], [2,70001], NaN/-0/inf/subnormal".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 8] = [
        ("conservation", conservation),
        ("zplus-oracle-equivalence", zplus_equivalence),
        ("estimator-identity", estimator_identity),
        ("zero-dropout-collapse", zero_dropout_collapse),
        ("normalization", normalization),
        ("determinism", determinism),
        ("protocol-defaults", protocol_defaults),
        ("mcrt-roundtrip", mcrt_roundtrip),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name:<26} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name:<26} {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
