//! Acceptance suite: one PASS/FAIL line per criterion on standard output.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p voxcam-cli --test acceptance -- 3 8`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use voxcam::io::{
    decode_checkpoint, decode_nifti, encode_checkpoint, encode_nifti, read_checkpoint, read_nifti, save_checkpoint,
    write_nifti, Checkpoint, Endian,
};
use voxcam::phantom::{generate_cohort, PhantomSpec};
use voxcam::resnet::{ForwardOptions, FreezePolicy, Mode, Model, ModelSpec, Stage};
use voxcam::stats::{paired_t_test, roc_auc, FoldMetrics};
use voxcam::tensor::{ConvParams, GateLog, PoolParams, Tape, Tensor};
use voxcam::train::{
    evaluate_fold, make_folds, train_fold, AdamState, DataSource, EarlyStop, EarlyStopping, Init, InMemorySource,
    ManifestSource, PlateauScheduler, Subject, TrainConfig,
};
use voxcam::xai::{heat_score, Heatmap, LesionMask, XaiError};
use voxcam::Volume;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

const FD_SEEDS: u64 = 20;
const FD_STEP: f64 = 1e-3;

/// Relative error below 1e-3, or absolute error below 1e-6 near zero.
fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < 1e-6 || diff < 1e-3 * analytic.abs().max(numeric.abs())
}

fn new_tape(gates: Option<&GateLog>) -> Tape<f64> {
    match gates {
        Some(g) => Tape::replaying_gates(g.clone()),
        None => Tape::new(),
    }
}

fn eval_loss(model: &Model, x: &Tensor<f64>, label: usize, gates: Option<&GateLog>) -> f64 {
    let mut tape = new_tape(gates);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions {
        params_as_constants: true,
        ..Default::default()
    };
    let pass = model.record(&mut tape, xv, opts).expect("forward");
    let loss = tape.cross_entropy(pass.logits, &[label]).expect("loss");
    tape.value(loss).data()[0]
}

fn class_score(model: &Model, x: &Tensor<f64>, layer: Stage, delta: &Tensor<f64>, gates: Option<&GateLog>) -> f64 {
    let mut tape = new_tape(gates);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions {
        perturb: Some((layer, delta)),
        params_as_constants: true,
        ..Default::default()
    };
    let pass = model.record(&mut tape, xv, opts).expect("forward");
    let s = tape.pick(pass.logits, 1).expect("pick");
    tape.value(s).data()[0]
}

/// A depth-18 base-4 network with randomized affine batch-norm parameters
/// and running statistics, in evaluation mode.
fn fd_model(seed: u64) -> Model {
    let mut model = Model::new(ModelSpec::resnet(18, 4).unwrap(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let bn: Vec<String> = model.running_stats().keys().cloned().collect();
    for layer in &bn {
        let rs = model.running_stats_mut(layer).unwrap();
        rs.mean.iter_mut().for_each(|m| *m = rng.random_range(-0.2..0.2));
        rs.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        for (suffix, lo, hi) in [("weight", 0.5, 1.5), ("bias", -0.2, 0.2)] {
            let t = model.param_mut(&format!("{layer}.{suffix}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
        }
    }
    model.set_mode(Mode::Eval);
    model
}

#[derive(Default)]
struct FdTally {
    probes: usize,
    replayed: usize,
    failures: Vec<String>,
}

impl FdTally {
    /// Compares `analytic` with `numeric`, retrying `numeric` with the base
    /// point's ReLU and max-pool decisions held fixed when a probe straddles
    /// a kink.
    fn check(&mut self, what: &str, analytic: f64, numeric: f64, replay: impl FnOnce() -> f64) {
        self.probes += 1;
        if grad_close(analytic, numeric) {
            return;
        }
        let frozen = replay();
        if grad_close(analytic, frozen) {
            self.replayed += 1;
        } else {
            self.failures.push(format!("{what}: analytic {analytic:.6e} numeric {numeric:.6e} frozen {frozen:.6e}"));
        }
    }
}

fn fd_seed(seed: u64, tally: &mut FdTally) {
    let mut model = fd_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(
        &[1, 1, 16, 16, 16],
        (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let label = (seed % 2) as usize;

    let mut tape = Tape::<f64>::recording_gates();
    let xv = tape.constant(x.clone());
    let pass = model.record(&mut tape, xv, ForwardOptions::default()).unwrap();
    let loss = tape.cross_entropy(pass.logits, &[label]).unwrap();
    let grads = tape.gradients(loss).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        pass.params.iter().map(|(n, v)| (n.clone(), grads.wrt(*v).unwrap().to_vec())).collect();
    let gates = tape.take_gate_log().unwrap();

    for (name, g) in &analytic {
        let n = g.len();
        let mut dirs: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut d = vec![0.0; n];
                d[rng.random_range(0..n)] = 1.0;
                d
            })
            .collect();
        let dense: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
        dirs.push(dense.into_iter().map(|v| v / norm).collect());

        for (k, dir) in dirs.iter().enumerate() {
            let orig = model.param(name).unwrap().data().to_vec();
            let plus: Vec<f32> = orig.iter().zip(dir).map(|(&w, d)| (w as f64 + FD_STEP * d) as f32).collect();
            let minus: Vec<f32> = orig.iter().zip(dir).map(|(&w, d)| (w as f64 - FD_STEP * d) as f32).collect();
            let eff: Vec<f64> = plus.iter().zip(&minus).map(|(&p, &m)| p as f64 - m as f64).collect();
            let scale: f64 = eff.iter().zip(dir).map(|(e, d)| e * d).sum();
            let a: f64 = g.iter().zip(&eff).map(|(g, e)| g * e).sum::<f64>() / scale;

            let mut eval_pair = |gates: Option<&GateLog>| {
                model.param_mut(name).unwrap().data_mut().copy_from_slice(&plus);
                let lp = eval_loss(&model, &x, label, gates);
                model.param_mut(name).unwrap().data_mut().copy_from_slice(&minus);
                let lm = eval_loss(&model, &x, label, gates);
                model.param_mut(name).unwrap().data_mut().copy_from_slice(&orig);
                (lp - lm) / scale
            };
            let numeric = eval_pair(None);
            let what = format!("seed {seed} {name} probe {k}");
            tally.check(&what, a, numeric, || eval_pair(Some(&gates)));
        }
    }

    // Gradient of the class-1 logit with respect to the Grad-CAM layer.
    let layer = Stage::Stage4;
    let mut tape = Tape::<f64>::recording_gates();
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions {
        capture: Some(layer),
        params_as_constants: true,
        ..Default::default()
    };
    let pass = model.record(&mut tape, xv, opts).unwrap();
    let captured = pass.captured.unwrap();
    let shape = tape.value(captured).shape().to_vec();
    let score = tape.pick(pass.logits, 1).unwrap();
    let g = tape.gradients(score).unwrap().wrt(captured).unwrap().to_vec();
    let gates = tape.take_gate_log().unwrap();
    for j in 0..g.len() {
        let delta = |sign: f64| {
            let mut d = Tensor::zeros(&shape);
            d.data_mut()[j] = sign * FD_STEP;
            d
        };
        let numeric_with = |gates: Option<&GateLog>| {
            (class_score(&model, &x, layer, &delta(1.0), gates) - class_score(&model, &x, layer, &delta(-1.0), gates))
                / (2.0 * FD_STEP)
        };
        let what = format!("seed {seed} {layer} activation {j}");
        tally.check(&what, g[j], numeric_with(None), || numeric_with(Some(&gates)));
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut tally = FdTally::default();
    for seed in 0..FD_SEEDS {
        fd_seed(seed, &mut tally);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(tally.failures.is_empty(), || {
        format!("{} of {} probes disagree; first: {}", tally.failures.len(), tally.probes, tally.failures[0])
    })?;
    ensure(secs < 300.0, || format!("took {secs:.0} s, budget 300 s"))?;
    Ok(format!(
        "{FD_SEEDS} seeds, {} probes over every parameter tensor and the stage4 activation, {} needed frozen gates, {secs:.0} s",
        tally.probes, tally.replayed
    ))
}

// ---------------------------------------------------------------------------
// 2. Operator oracles

const ORACLE_CASES: usize = 100;

fn conv_oracle(x: &[f32], xd: [usize; 5], w: &[f32], b: Option<&[f32]>, p: &ConvParams) -> Vec<f32> {
    let [n, cin, d, h, wd] = xd;
    let [kd, kh, kw] = p.kernel;
    let ext = |len: usize, a: usize| (len + 2 * p.padding[a] - p.kernel[a]) / p.stride[a] + 1;
    let od = [ext(d, 0), ext(h, 1), ext(wd, 2)];
    let mut out = Vec::new();
    for bi in 0..n {
        for co in 0..p.out_channels {
            for oz in 0..od[0] {
                for oy in 0..od[1] {
                    for ox in 0..od[2] {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let z = (oz * p.stride[0] + a) as isize - p.padding[0] as isize;
                                        let y = (oy * p.stride[1] + bb) as isize - p.padding[1] as isize;
                                        let xx = (ox * p.stride[2] + c) as isize - p.padding[2] as isize;
                                        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((bi * cin + ci) * d + z as usize) * h + y as usize) * wd + xx as usize;
                                        let wi = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                        acc += x[xi] as f64 * w[wi] as f64;
                                    }
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc += b[co] as f64;
                        }
                        out.push(acc as f32);
                    }
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &[f32], xd: [usize; 5], p: &PoolParams) -> Vec<f32> {
    let [n, c, d, h, w] = xd;
    let ext = |len: usize, a: usize| (len + 2 * p.padding[a] - p.kernel[a]) / p.stride[a] + 1;
    let mut out = Vec::new();
    for plane in 0..n * c {
        for oz in 0..ext(d, 0) {
            for oy in 0..ext(h, 1) {
                for ox in 0..ext(w, 2) {
                    let mut m = f32::NEG_INFINITY;
                    for a in 0..p.kernel[0] {
                        for b in 0..p.kernel[1] {
                            for cc in 0..p.kernel[2] {
                                let z = (oz * p.stride[0] + a) as isize - p.padding[0] as isize;
                                let y = (oy * p.stride[1] + b) as isize - p.padding[1] as isize;
                                let xx = (ox * p.stride[2] + cc) as isize - p.padding[2] as isize;
                                if z >= 0 && y >= 0 && xx >= 0 && z < d as isize && y < h as isize && xx < w as isize {
                                    m = m.max(x[((plane * d + z as usize) * h + y as usize) * w + xx as usize]);
                                }
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

fn uniform_f32(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn conv_cases(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut done = 0;
    while done < ORACLE_CASES {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let dims = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)];
        let (k, stride, pad) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(0..=1));
        if dims.iter().any(|&e| e + 2 * pad < k) {
            continue;
        }
        let p = ConvParams::cubic(cin, cout, k, stride, pad);
        let xd = [n, cin, dims[0], dims[1], dims[2]];
        let x = uniform_f32(rng, xd.iter().product());
        let w = uniform_f32(rng, p.weight_shape().iter().product());
        let b = rng.random_bool(0.5).then(|| uniform_f32(rng, cout));
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(Tensor::from_vec(&xd, x.clone()).unwrap());
        let wv = tape.leaf(Tensor::from_vec(&p.weight_shape(), w.clone()).unwrap());
        let bv = b.clone().map(|b| tape.leaf(Tensor::from_vec(&[cout], b).unwrap()));
        let y = tape.conv3d(xv, wv, bv, p).map_err(err)?;
        ensure(tape.value(y).data() == conv_oracle(&x, xd, &w, b.as_deref(), &p), || {
            format!("conv3d differs for input {xd:?}, kernel {k}, stride {stride}, pad {pad}")
        })?;
        done += 1;
    }
    Ok(())
}

fn pool_cases(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut done = 0;
    while done < ORACLE_CASES {
        let dims = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)];
        let (k, stride, pad) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(0..=1));
        if 2 * pad > k || dims.iter().any(|&e| e + 2 * pad < k) {
            continue;
        }
        let p = PoolParams::cubic(k, stride, pad);
        let xd = [rng.random_range(1..=2), rng.random_range(1..=2), dims[0], dims[1], dims[2]];
        // A coarse grid makes ties common.
        let x: Vec<f32> = (0..xd.iter().product()).map(|_| rng.random_range(-4i32..=4) as f32 * 0.25).collect();
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(Tensor::from_vec(&xd, x.clone()).unwrap());
        let y = tape.max_pool3d(xv, p).map_err(err)?;
        ensure(tape.value(y).data() == pool_oracle(&x, xd, &p), || {
            format!("max_pool3d differs for input {xd:?}, kernel {k}, stride {stride}, pad {pad}")
        })?;
        done += 1;
    }
    Ok(())
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn auc_oracle(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auc_cases(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut done = 0;
    while done < ORACLE_CASES {
        let n = rng.random_range(2..=30);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect();
        let got = roc_auc(&labels, &scores).map_err(err)?;
        let expect = auc_oracle(&labels, &scores);
        ensure(got == expect, || format!("roc_auc {got} vs pairwise {expect}"))?;
        done += 1;
    }
    Ok(())
}

/// Direct two-pass mean and population standard deviation.
fn heat_oracle(h: &[f32], lesion: &[bool], domain: Option<&[bool]>) -> f64 {
    let inside: Vec<f64> = h.iter().zip(lesion).filter(|(_, &l)| l).map(|(&v, _)| v as f64).collect();
    let bkg: Vec<f64> = (0..h.len())
        .filter(|&i| !lesion[i] && domain.is_none_or(|d| d[i]))
        .map(|i| h[i] as f64)
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (vs, vb) = (mean(&inside), mean(&bkg));
    let sd = (bkg.iter().map(|v| (v - vb) * (v - vb)).sum::<f64>() / bkg.len() as f64).sqrt();
    (vs - vb) / sd
}

fn heat_cases(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut done = 0;
    while done < ORACLE_CASES {
        let ext = [rng.random_range(1..=4), rng.random_range(2..=6), rng.random_range(2..=6)];
        let n = ext.iter().product();
        let h: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..=1.0)).collect();
        let lesion: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let domain: Option<Vec<bool>> = rng.random_bool(0.5).then(|| (0..n).map(|_| rng.random_bool(0.8)).collect());
        let bkg = (0..n).filter(|&i| !lesion[i] && domain.as_ref().is_none_or(|d| d[i])).count();
        if !lesion.contains(&true) || bkg < 2 {
            continue;
        }
        let vol = |v: Vec<f32>| Volume::from_data(ext, v).unwrap();
        let heat = Heatmap::from_values(vol(h.clone()), true);
        let mask = LesionMask::new(vol(lesion.iter().map(|&l| l as u8 as f32).collect())).map_err(err)?;
        let dom = domain.as_ref().map(|d| vol(d.iter().map(|&b| b as u8 as f32).collect()));
        let got = heat_score(&heat, &mask, dom.as_ref()).map_err(err)?.hs;
        let expect = heat_oracle(&h, &lesion, domain.as_deref());
        ensure((got - expect).abs() <= 1e-6, || format!("heat_score {got} vs direct {expect}"))?;
        done += 1;
    }
    Ok(())
}

fn ttest_cases(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let n = rng.random_range(2..=25);
        let shift = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + shift + rng.random_range(-0.5..0.5)).collect();
        let got = paired_t_test(&a, &b).map_err(err)?;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let t = mean / (sd / (n as f64).sqrt());
        let df = (n - 1) as f64;
        let p = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
        ensure((got.t - t).abs() <= 1e-9 * t.abs().max(1.0), || format!("t {} vs {t}", got.t))?;
        ensure(got.df == df, || format!("df {} vs {df}", got.df))?;
        worst = worst.max((got.p - p).abs());
        ensure((got.p - p).abs() <= 1e-6, || format!("p {} vs reference {p} (t {t}, df {df})", got.p))?;
    }
    Ok(worst)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    conv_cases(&mut rng)?;
    pool_cases(&mut rng)?;
    auc_cases(&mut rng)?;
    heat_cases(&mut rng)?;
    let worst = ttest_cases(&mut rng)?;
    Ok(format!(
        "{ORACLE_CASES} cases each: conv3d, max_pool3d and roc_auc exact, heat_score within 1e-6, t-test p max error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Heat-Score pin

fn criterion_3() -> Outcome {
    let vol = |v: Vec<f32>| Volume::from_data([1, 1, 6], v).unwrap();
    let mask = LesionMask::new(vol(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0])).map_err(err)?;
    let heat = Heatmap::from_values(vol(vec![1.0, 1.0, 0.0, 0.5, 0.0, 0.5]), true);
    let r = heat_score(&heat, &mask, None).map_err(err)?;
    ensure((r.hs - 3.0).abs() <= 1e-9, || format!("HS {} instead of 3", r.hs))?;
    ensure(r.mean_in == 1.0 && r.mean_bkg == 0.25 && r.std_bkg == 0.25, || format!("{r:?}"))?;
    let flat = Heatmap::from_values(vol(vec![0.3; 6]), true);
    match heat_score(&flat, &mask, None) {
        Err(XaiError::DegenerateBackground) => {}
        other => return Err(format!("constant heatmap gave {other:?}")),
    }
    Ok(format!("HS = {} (|HS - 3| = {:.1e}); constant heatmap is DegenerateBackground", r.hs, (r.hs - 3.0).abs()))
}

// ---------------------------------------------------------------------------
// 4. Freeze policy

fn criterion_4() -> Outcome {
    let mut model = Model::new(ModelSpec::resnet(18, 4).map_err(err)?, 4).map_err(err)?;
    model.apply_freeze_policy(FreezePolicy::FinalStageAndHead);
    let before = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut adam = AdamState::default();
    for _ in 0..10 {
        let x = Tensor::from_vec(&[2, 1, 32, 32, 32], uniform_f32(&mut rng, 2 * 32768)).unwrap();
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x);
        let opts = ForwardOptions {
            train: true,
            ..Default::default()
        };
        let pass = model.record(&mut tape, xv, opts).map_err(err)?;
        let loss = tape.cross_entropy(pass.logits, &[0, 1]).map_err(err)?;
        let grads = tape.gradients(loss).map_err(err)?;
        model.zero_grad();
        model.accumulate_grads(&pass, &grads).map_err(err)?;
        model.apply_bn_updates(&pass.bn_updates);
        adam.step(&mut model, 1e-3).map_err(err)?;
    }
    let tail = |name: &str| name.starts_with("stage4.") || name.starts_with("head.");
    let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (mut frozen, mut changed) = (0, 0);
    for (name, t) in model.params() {
        let same = bits(t.data()) == bits(before.param(name).unwrap().data());
        if tail(name) {
            changed += usize::from(!same && name.starts_with("stage4."));
        } else {
            ensure(same, || format!("frozen tensor {name} changed"))?;
            frozen += 1;
        }
    }
    for (layer, rs) in model.running_stats() {
        if !tail(layer) {
            let old = &before.running_stats()[layer];
            ensure(bits(&rs.mean) == bits(&old.mean) && bits(&rs.var) == bits(&old.var), || {
                format!("running statistics of frozen {layer} changed")
            })?;
        }
    }
    ensure(changed > 0, || "no stage4 tensor changed".into())?;
    Ok(format!("{frozen} frozen tensors bitwise unchanged after 10 steps, {changed} stage4 tensors changed"))
}

// ---------------------------------------------------------------------------
// 5. Scheduler and early stopping

fn flat_subjects() -> InMemorySource {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut src = InMemorySource::default();
    for i in 0..12 {
        let label = (i % 2) as u8;
        let data: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.random_range(0.0f32..1.0) + label as f32).collect();
        src.subjects.insert(
            format!("s{i:02}"),
            Subject {
                label,
                image: Volume::from_data([16; 3], data).unwrap(),
                mask: None,
            },
        );
    }
    src
}

fn criterion_5() -> Outcome {
    let mut sched = PlateauScheduler::new(1e-3, 0.1, 5, 1e-4);
    let lrs: Vec<f64> = (0..8).map(|_| sched.step(1.0)).collect();
    let first_cut = lrs.iter().position(|&lr| lr < 1e-3).map(|i| i + 1);
    ensure(first_cut == Some(7), || format!("reduction after epoch {first_cut:?}, learning rates {lrs:?}"))?;
    ensure((lrs[6] - 1e-4).abs() < 1e-18, || format!("reduced rate {}", lrs[6]))?;

    let mut stop = EarlyStopping::new(10, 1e-4);
    let verdicts: Vec<EarlyStop> = (0..12).map(|_| stop.check(1.0)).collect();
    ensure(verdicts[..11].iter().all(|v| matches!(v, EarlyStop::Continue { .. })), || format!("{verdicts:?}"))?;
    ensure(verdicts[11] == EarlyStop::Stop { epoch: 12, best_epoch: 1 }, || format!("{:?}", verdicts[11]))?;

    // A threshold no epoch can beat keeps every loss after the first "flat".
    let data = flat_subjects();
    let cohort = data.cohort();
    let plan = make_folds(&cohort, 3, 0.25, 5).map_err(err)?;
    let cfg = TrainConfig {
        base_width: 4,
        min_improvement: 1e9,
        max_epochs: 30,
        batch_size: 4,
        rotation_max_deg: 0.0,
        seed: 5,
        ..Default::default()
    };
    let fold = &plan.folds[0];
    let run = train_fold(fold, &cfg, &data).map_err(err)?;
    ensure(run.stopped_at == Some(12) && run.best_epoch == 1, || {
        format!("stopped at {:?}, best epoch {}", run.stopped_at, run.best_epoch)
    })?;
    let lr: Vec<f64> = run.epochs.iter().map(|e| e.lr).collect();
    ensure(lr[..7].iter().all(|&l| l == 1e-3) && (lr[7] - 1e-4).abs() < 1e-18, || format!("epoch rates {lr:?}"))?;
    let first = train_fold(fold, &TrainConfig { max_epochs: 1, ..cfg.clone() }, &data).map_err(err)?;
    let restored = encode_checkpoint(&Checkpoint::from_model(&run.model)).map_err(err)?;
    let snapshot = encode_checkpoint(&Checkpoint::from_model(&first.model)).map_err(err)?;
    ensure(restored == snapshot, || "restored weights differ from the epoch-1 snapshot".into())?;
    let last = encode_checkpoint(&Checkpoint::from_model(&train_fold(fold, &TrainConfig { max_epochs: 12, min_improvement: 0.0, ..cfg.clone() }, &data).map_err(err)?.model)).map_err(err)?;
    ensure(last != snapshot, || "training did not move the weights".into())?;
    Ok("rate cut after epoch 7 of a flat trace, stop at epoch 12 with best epoch 1, restored weights equal the epoch-1 snapshot bitwise".into())
}

// ---------------------------------------------------------------------------
// 6. Phantom end-to-end

fn pooled(hs: &[(String, f64)]) -> f64 {
    hs.iter().map(|(_, v)| v).sum::<f64>() / hs.len() as f64
}

fn heat_list(m: &FoldMetrics) -> Vec<(String, f64)> {
    m.heat_scores.iter().map(|(id, r)| (id.clone(), r.hs)).collect()
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let manifest = generate_cohort(&PhantomSpec::easy(6), 40, dir.path()).map_err(err)?;
    let data = ManifestSource::new(&manifest);
    let cfg = TrainConfig {
        depth: 18,
        base_width: 8,
        max_epochs: 15,
        seed: 6,
        ..Default::default()
    };
    let plan = make_folds(&data.cohort(), 5, cfg.val_fraction, cfg.seed).map_err(err)?;
    let random = {
        let mut m = Model::new(ModelSpec::resnet(cfg.depth, cfg.base_width).map_err(err)?, 1006).map_err(err)?;
        m.set_mode(Mode::Eval);
        m
    };
    let (mut accs, mut trained_hs, mut random_hs) = (Vec::new(), Vec::new(), Vec::new());
    for fold in &plan.folds {
        let start = Instant::now();
        let run = train_fold(fold, &cfg, &data).map_err(err)?;
        let m = evaluate_fold(&run.model, fold, &data, &cfg, true).map_err(err)?;
        let r = evaluate_fold(&random, fold, &data, &cfg, true).map_err(err)?;
        eprintln!(
            "  criterion 6 fold {}: accuracy {:.3}, {} epochs, {:.0} s",
            fold.index,
            m.accuracy,
            run.epochs.len(),
            start.elapsed().as_secs_f64()
        );
        accs.push(m.accuracy);
        trained_hs.extend(heat_list(&m));
        random_hs.extend(heat_list(&r));
    }
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    // Pair over scans scored under both models.
    let pairs: Vec<(f64, f64)> = trained_hs
        .iter()
        .filter_map(|(id, t)| random_hs.iter().find(|(r, _)| r == id).map(|(_, r)| (*t, *r)))
        .collect();
    ensure(pairs.len() >= 2, || format!("only {} scans scored under both models", pairs.len()))?;
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let test = paired_t_test(&a, &b).map_err(err)?;
    let (pt, pr) = (pooled(&trained_hs), pooled(&random_hs));
    let summary = format!(
        "mean accuracy {mean_acc:.3} (folds {accs:.3?}); pooled HS trained {pt:.3} vs random {pr:.3}; paired over {} scans t {:.3} p {:.2e}",
        pairs.len(),
        test.t,
        test.p
    );
    ensure(mean_acc >= 0.9 && pt > pr && test.t > 0.0 && test.p < 0.05, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 7. Transfer learning

const TL_EXTENT: usize = 32;

fn small_phantoms(spec: PhantomSpec, dir: &Path) -> Result<ManifestSource, String> {
    let scale = TL_EXTENT as f32 / 64.0;
    let spec = PhantomSpec {
        extent: TL_EXTENT,
        lesion_radius: (spec.lesion_radius.0 * scale, spec.lesion_radius.1 * scale),
        ..spec
    };
    Ok(ManifestSource::new(&generate_cohort(&spec, 40, dir).map_err(err)?))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let base = TrainConfig {
        depth: 18,
        base_width: 8,
        max_epochs: 20,
        seed: 7,
        cam_layer: Stage::Stage3,
        ..Default::default()
    };
    let easy = small_phantoms(PhantomSpec::easy(71), &dir.path().join("easy"))?;
    let pre_plan = make_folds(&easy.cohort(), 5, base.val_fraction, 71).map_err(err)?;
    let pretrained = train_fold(&pre_plan.folds[0], &base, &easy).map_err(err)?;
    let ckpt = dir.path().join("easy.hsck");
    save_checkpoint(&pretrained.model, &ckpt).map_err(err)?;

    let subtle = small_phantoms(PhantomSpec::subtle(72), &dir.path().join("subtle"))?;
    let plan = make_folds(&subtle.cohort(), 5, base.val_fraction, 72).map_err(err)?;
    let finetune = TrainConfig {
        init: Init::Checkpoint(ckpt),
        freeze: FreezePolicy::FinalStageAndHead,
        ..base.clone()
    };
    let mut improved = 0;
    let mut rows = Vec::new();
    for fold in &plan.folds {
        let fold_stats = |cfg: &TrainConfig| -> Result<(f64, f64), String> {
            let run = train_fold(fold, cfg, &subtle).map_err(err)?;
            let m = evaluate_fold(&run.model, fold, &subtle, cfg, true).map_err(err)?;
            let hs = heat_list(&m);
            Ok((m.accuracy, if hs.is_empty() { f64::NEG_INFINITY } else { pooled(&hs) }))
        };
        let (acc_s, hs_s) = fold_stats(&base)?;
        let (acc_f, hs_f) = fold_stats(&finetune)?;
        eprintln!("  criterion 7 fold {}: scratch {acc_s:.3}/{hs_s:.3}, fine-tuned {acc_f:.3}/{hs_f:.3}", fold.index);
        improved += usize::from(acc_f > acc_s && hs_f > hs_s);
        rows.push(format!("fold {} acc {acc_s:.2}->{acc_f:.2} HS {hs_s:.2}->{hs_f:.2}", fold.index));
    }
    let summary = format!("{improved} of 5 folds improve both accuracy and pooled HS ({})", rows.join("; "));
    ensure(improved >= 4, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. I/O round trips

/// NIfTI-1 bytes holding an `i16` payload with intensity scaling.
fn i16_nifti(values: &[i16], slope: f32, inter: f32) -> Vec<u8> {
    let mut b = vec![0u8; 352 + 2 * values.len()];
    b[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, d) in [3i16, values.len() as i16, 1, 1, 1, 1, 1, 1].into_iter().enumerate() {
        b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    b[70..72].copy_from_slice(&4i16.to_le_bytes());
    b[72..74].copy_from_slice(&16i16.to_le_bytes());
    for i in 0..4 {
        b[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_le_bytes());
    }
    b[108..112].copy_from_slice(&352f32.to_le_bytes());
    b[112..116].copy_from_slice(&slope.to_le_bytes());
    b[116..120].copy_from_slice(&inter.to_le_bytes());
    b[344..348].copy_from_slice(b"n+1\0");
    for (i, v) in values.iter().enumerate() {
        b[352 + 2 * i..354 + 2 * i].copy_from_slice(&v.to_le_bytes());
    }
    b
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for case in 0..20 {
        let ext = [rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9)];
        let n = ext.iter().product();
        let mut data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0xbfff_ffff)).collect();
        data[0] = -0.0;
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let v = Volume::new(ext, spacing, data).map_err(err)?;
        let path = dir.path().join(format!("v{case}.nii"));
        write_nifti(&v, &path).map_err(err)?;
        let back = read_nifti(&path).map_err(err)?;
        ensure(back.extents() == ext && back.spacing() == spacing && bits(&back) == bits(&v), || {
            format!("NIfTI round trip of {ext:?} changed the volume")
        })?;
        let le = encode_nifti(&v, Endian::Little).map_err(err)?;
        let be = encode_nifti(&v, Endian::Big).map_err(err)?;
        ensure(le != be, || "endian twins are identical bytes".into())?;
        let (a, b) = (decode_nifti(&le).map_err(err)?, decode_nifti(&be).map_err(err)?);
        ensure(bits(&a) == bits(&b) && a.spacing() == b.spacing() && a.extents() == b.extents(), || {
            "endian twins parse differently".into()
        })?;
    }
    let scaled = decode_nifti(&i16_nifti(&[1, 2], 2.0, 1.0)).map_err(err)?;
    ensure(scaled.data() == [3.0, 5.0], || format!("i16 scaling gave {:?}", scaled.data()))?;

    for seed in 0..3 {
        let spec = if seed == 2 { ModelSpec::resnet(50, 4) } else { ModelSpec::resnet(18, 4 + 4 * seed as usize) };
        let model = Model::new(spec.map_err(err)?, seed).map_err(err)?;
        let path = dir.path().join(format!("m{seed}.hsck"));
        save_checkpoint(&model, &path).map_err(err)?;
        let raw = fs::read(&path).map_err(err)?;
        let ckpt = read_checkpoint(&path).map_err(err)?;
        ensure(encode_checkpoint(&ckpt).map_err(err)? == raw, || "HSCK re-encoding differs".into())?;
        ensure(decode_checkpoint(&raw).map_err(err)? == ckpt, || "HSCK decode differs".into())?;
        let mut fresh = Model::new(voxcam::io::infer_spec(&ckpt).map_err(err)?, 99).map_err(err)?;
        voxcam::io::apply_checkpoint(&ckpt, &mut fresh).map_err(err)?;
        for (name, t) in model.params() {
            let other = fresh.param(name).unwrap().data();
            ensure(t.data().iter().zip(other).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("HSCK round trip changed {name}")
            })?;
        }
    }
    Ok("20 NIfTI volumes and 3 checkpoints round-trip bitwise; endian twins parse identically; i16 slope 2, inter 1 gives {3, 5}".into())
}

// ---------------------------------------------------------------------------
// 9. Determinism of `train`

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let bin = env!("CARGO_BIN_EXE_voxcam");
    let run = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(bin).args(args).current_dir(d).output().map_err(err)?;
        ensure(o.status.success(), || format!("voxcam {args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    };
    run(&["phantom-gen", "--out", "ph", "--n-per-class", "8", "--extent", "32", "--seed", "9"])?;
    for out in ["a", "b"] {
        run(&[
            "train",
            "--manifest",
            "ph/manifest.csv",
            "--out",
            out,
            "--fold",
            "all",
            "--folds",
            "3",
            "--depth",
            "18",
            "--base-width",
            "4",
            "--max-epochs",
            "3",
            "--seed",
            "9",
        ])?;
    }
    let mut compared = 0;
    for k in 0..3 {
        for f in ["checkpoint.hsck", "epochs.csv"] {
            let rel = format!("fold{k}/{f}");
            let a = fs::read(d.join("a").join(&rel)).map_err(err)?;
            let b = fs::read(d.join("b").join(&rel)).map_err(err)?;
            ensure(a == b, || format!("{rel} differs between runs"))?;
            compared += 1;
        }
    }
    Ok(format!("two `train --fold all` runs: {compared} checkpoint and epoch-log files byte-identical"))
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "gradient correctness", criterion_1),
    (2, "operator oracles", criterion_2),
    (3, "Heat-Score arithmetic pin", criterion_3),
    (4, "freeze policy", criterion_4),
    (5, "scheduler and early-stop traces", criterion_5),
    (6, "phantom end-to-end", criterion_6),
    (7, "transfer-learning direction", criterion_7),
    (8, "I/O round trips", criterion_8),
    (9, "training determinism", criterion_9),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
