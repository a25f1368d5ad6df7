//! Project acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr,
//! bypassing the test harness capture so the lines appear in plain `cargo test` output.
//!
//! The contract criteria assert. The trained end-to-end targets and the ablation
//! gap are empirical: they report their measured values and only assert that the
//! pipeline ran.

use std::fs;
use std::io::Write;
use std::time::{Duration, Instant};

use eet_core::checkpoint::Container;
use eet_core::data::{sample_dataset, sample_images, GlyphConfig};
use eet_core::diagnostics::{check_loss, check_stage2_composite, LossKind, COMPOSITE_TOLERANCE, DEFAULT_STEP, LOSS_TOLERANCE};
use eet_core::evaluator::{
    evaluate_identity, evaluate_transfer, mse, pearson_cc, KeepTarget, OracleSettings, Oracles, RenderWithSource,
};
use eet_core::losses::*;
use eet_core::networks::ModelBundle;
use eet_core::trainer::{lr_at, run, RunOptions, TrainConfig, STAGE2_FROZEN};
use eet_tensor::gradcheck::{check_layer, LayerKind};
use eet_tensor::{Adam, AdamState, ParamStore, SpectralNormState, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const FIXTURE_TOLERANCE: f64 = 1e-9;
const ORACLE_TOLERANCE: f64 = 1e-12;
const SIGMA_TOLERANCE: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(5 * 60);
const CONTRACT_BUDGET: Duration = Duration::from_secs(10 * 60);

const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_EPOCHS: usize = 60;
const E2E_IMAGES_PER_ID: usize = 60;
const E2E_PARTNERS: usize = 5;
const E2E_PAIRS: usize = 300;
const MIN_AVG_PCC: f64 = 0.5;
const MAX_AVG_MSE: f64 = 1.5;
const MIN_ID_ACCURACY: f64 = 0.85;
const MIN_REAL_ACCURACY: f64 = 0.95;
const MIN_CHEAT_PCC: f64 = 0.95;
const MIN_ABLATION_GAP: f64 = 0.10;

fn report(pass: bool, criterion: &str, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn eval(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).item()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failing = Vec::new();
    for kind in LayerKind::ALL {
        let r = check_layer(kind, 0).unwrap();
        worst = worst.max(r.max_rel_err);
        if !r.passes(LOSS_TOLERANCE) {
            failing.push(kind.name().to_string());
        }
    }
    for kind in LossKind::ALL {
        let r = check_loss(kind, 0).unwrap();
        worst = worst.max(r.max_rel_err);
        if !r.passes(LOSS_TOLERANCE) {
            failing.push(kind.name().to_string());
        }
    }
    let composite = check_stage2_composite(0, 12, DEFAULT_STEP).unwrap();
    if !composite.passes(COMPOSITE_TOLERANCE) {
        failing.push("stage2_composite".into());
    }
    let elapsed = start.elapsed();
    let pass = failing.is_empty() && elapsed <= GRADIENT_BUDGET;
    report(
        pass,
        "gradient suite",
        &format!(
            "layers+losses max rel err {worst:.2e} (tol {LOSS_TOLERANCE:.0e}), composite {:.2e} over {} coords (tol {COMPOSITE_TOLERANCE:.0e}), {:.0}s, failing {failing:?}",
            composite.max_rel_err,
            composite.checked,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn analytic_loss_fixtures() {
    let (m, l) = (4, 5);
    let levels = vec![vec![0, 5, 2, 3]];
    let mut onehot = vec![0.0; m * (l + 1)];
    for (i, &q) in levels[0].iter().enumerate() {
        onehot[i * (l + 1) + q] = 1.0;
    }
    let onehot = Tensor::new(&[1, m, l + 1], onehot).unwrap();
    let lambda_p = LossWeights::default().p;
    let (n, v) = (10.0f64, 3.0f64);
    let img = Tensor::full(&[1, 1, 8, 8], 0.4);

    let cases: Vec<(&str, f64, f64)> = vec![
        ("discrimination one-hot", eval(|t| { let s = t.input(onehot.clone()); au_discrimination_loss(t, s, &levels).unwrap() }), 0.0),
        ("discrimination zeros", eval(|t| { let s = t.input(Tensor::zeros(&[1, m, l + 1])); au_discrimination_loss(t, s, &levels).unwrap() }), 1.0 / (l + 1) as f64),
        ("confusion uniform", eval(|t| { let s = t.input(Tensor::full(&[1, m, l + 1], 1.0 / (l + 1) as f64)); au_confusion_loss(t, s).unwrap() }), 0.0),
        ("confusion one-hot m=1", eval(|t| { let s = t.input(Tensor::new(&[1, 1, 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()); au_confusion_loss(t, s).unwrap() }), 5.0 / 36.0),
        ("weighted au perfect", eval(|t| {
            let p = t.input(Tensor::new(&[1, 4], vec![0.2, 0.4, 0.6, 1.0]).unwrap());
            weighted_au_loss(t, p, &[vec![1.0, 2.0, 3.0, 5.0]], &au_weights(&[0.3, 0.1, 0.5, 0.2]).unwrap(), l).unwrap()
        }), 0.0),
        ("attribute uniform logits", eval(|t| {
            let a = t.input(Tensor::zeros(&[1, n as usize]));
            let b = t.input(Tensor::zeros(&[1, v as usize]));
            attribute_constraint_loss(t, a, b, &[4], &[2], lambda_p).unwrap()
        }), n.ln() + lambda_p * v.ln()),
        ("reconstruction identity", eval(|t| {
            let (a, b, c) = (t.input(img.clone()), t.input(img.clone()), t.input(img.clone()));
            reconstruction_loss(t, a, b, c).unwrap()
        }), 0.0),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let failing: Vec<&str> = cases.iter().filter(|(_, g, w)| (g - w).abs() > FIXTURE_TOLERANCE).map(|c| c.0).collect();
    let pass = failing.is_empty();
    report(pass, "analytic loss fixtures", &format!("{} fixtures, max abs err {worst:.1e} (tol {FIXTURE_TOLERANCE:.0e}), failing {failing:?}", cases.len()));
    assert!(pass);
}

fn naive_scores(scores: &[f64], rows: usize, k: usize, target: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 0..rows {
        for q in 0..k {
            let d = scores[i * k + q] - target(i, q);
            total += d * d;
        }
    }
    total / (rows * k) as f64
}

fn naive_log_softmax(x: &[f64], k: usize) -> f64 {
    x[k] - x.iter().map(|v| v.exp()).sum::<f64>().ln()
}

fn naive_pcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Largest singular value from the eigenvalues of W Wᵀ by cyclic Jacobi rotations.
fn jacobi_top_singular_value(rows: usize, cols: usize, w: &[f64]) -> f64 {
    let mut a = vec![vec![0.0; rows]; rows];
    for i in 0..rows {
        for j in 0..rows {
            a[i][j] = (0..cols).map(|k| w[i * cols + k] * w[j * cols + k]).sum();
        }
    }
    for _ in 0..100 {
        for p in 0..rows {
            for q in p + 1..rows {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..rows {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..rows {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..rows).map(|i| a[i][i]).fold(0.0, f64::max).sqrt()
}

#[test]
fn oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let (b, m, k) = (3, 4, 6);
    let scores = random(&mut rng, &[b, m, k], -1.0, 2.0);
    let levels: Vec<Vec<usize>> = (0..b).map(|_| (0..m).map(|_| rng.gen_range(0..k)).collect()).collect();
    let row = |s: usize| &scores.data()[s * m * k..(s + 1) * m * k];
    let want: f64 = (0..b).map(|s| naive_scores(row(s), m, k, |i, q| f64::from(u8::from(q == levels[s][i])))).sum::<f64>() / b as f64;
    let got = eval(|t| { let v = t.input(scores.clone()); au_discrimination_loss(t, v, &levels).unwrap() });
    errs.push(("au_discrimination", (got - want).abs()));
    let want: f64 = (0..b).map(|s| naive_scores(row(s), m, k, |_, _| 1.0 / k as f64)).sum::<f64>() / b as f64;
    let got = eval(|t| { let v = t.input(scores.clone()); au_confusion_loss(t, v).unwrap() });
    errs.push(("au_confusion", (got - want).abs()));

    let ids_scores = random(&mut rng, &[2, 10], -1.0, 2.0);
    let ids = [2, 9];
    let idrow = |s: usize| &ids_scores.data()[s * 10..(s + 1) * 10];
    let want = (0..2).map(|s| naive_scores(idrow(s), 1, 10, |_, q| f64::from(u8::from(q == ids[s] - 1)))).sum::<f64>() / 2.0;
    let got = eval(|t| { let v = t.input(ids_scores.clone()); identity_discrimination_loss(t, v, &ids).unwrap() });
    errs.push(("id_discrimination", (got - want).abs()));
    let want = (0..2).map(|s| naive_scores(idrow(s), 1, 10, |_, _| 0.1)).sum::<f64>() / 2.0;
    let got = eval(|t| { let v = t.input(ids_scores.clone()); identity_confusion_loss(t, v).unwrap() });
    errs.push(("id_confusion", (got - want).abs()));

    let pred = random(&mut rng, &[2, 4], 0.0, 1.0);
    let u: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
    let w = au_weights(&[0.4, 0.1, 0.3, 0.2]).unwrap();
    let mut want = 0.0;
    for s in 0..2 {
        for i in 0..4 {
            want += w.0[i] * (u[s][i] - 5.0 * pred.data()[s * 4 + i]).powi(2) / 4.0 / 2.0;
        }
    }
    let got = eval(|t| { let p = t.input(pred.clone()); weighted_au_loss(t, p, &u, &w, 5).unwrap() });
    errs.push(("weighted_au", (got - want).abs()));

    let real = random(&mut rng, &[2, 1, 3, 3], -1.0, 2.0);
    let fake = random(&mut rng, &[2, 1, 3, 3], -1.0, 2.0);
    let nn = 18.0;
    let want_d = real.data().iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / nn + fake.data().iter().map(|f| f * f).sum::<f64>() / nn;
    let want_g = fake.data().iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / nn;
    let mut tape = Tape::new();
    let (r, f) = (tape.input(real.clone()), tape.input(fake.clone()));
    let (d, g) = image_adversarial_losses(&mut tape, r, f, AdversarialForm::LeastSquares).unwrap();
    errs.push(("lsgan", (tape.value(d).item() - want_d).abs().max((tape.value(g).item() - want_g).abs())));
    let (d, g) = swap_consistency_losses(&mut tape, r, f, AdversarialForm::LeastSquares).unwrap();
    errs.push(("swap_consistency", (tape.value(d).item() - want_d).abs().max((tape.value(g).item() - want_g).abs())));

    let id_logits = random(&mut rng, &[2, 10], -3.0, 3.0);
    let pose_logits = random(&mut rng, &[2, 3], -3.0, 3.0);
    let (idl, posel) = ([5, 1], [3, 2]);
    let want = -(0..2)
        .map(|s| naive_log_softmax(&id_logits.data()[s * 10..s * 10 + 10], idl[s] - 1) + 0.5 * naive_log_softmax(&pose_logits.data()[s * 3..s * 3 + 3], posel[s] - 1))
        .sum::<f64>()
        / 2.0;
    let got = eval(|t| {
        let (a, b) = (t.input(id_logits.clone()), t.input(pose_logits.clone()));
        attribute_constraint_loss(t, a, b, &idl, &posel, 0.5).unwrap()
    });
    errs.push(("attribute", (got - want).abs()));

    let imgs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1, 1, 4, 4], 0.0, 1.0)).collect();
    let want = (0..16).map(|i| (imgs[0].data()[i] - imgs[2].data()[i]).abs() + (imgs[1].data()[i] - imgs[2].data()[i]).abs()).sum::<f64>() / 16.0;
    let got = eval(|t| {
        let v: Vec<Var> = imgs.iter().map(|x| t.input(x.clone())).collect();
        reconstruction_loss(t, v[0], v[1], v[2]).unwrap()
    });
    errs.push(("reconstruction", (got - want).abs()));

    let x: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..5.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.6 * v + rng.gen_range(-1.0..1.0)).collect();
    errs.push(("pcc", (pearson_cc(&x, &y).unwrap() - naive_pcc(&x, &y)).abs()));
    let want = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 50.0;
    errs.push(("mse", (mse(&x, &y).unwrap() - want).abs()));

    let (a, c) = ([1.0, 3.0, 0.2], [2.0, -1.0, 0.5]);
    let cfg = Adam::new(0.05, 0.5, 0.9);
    let mut store = ParamStore::new();
    let pid = store.add("x", Tensor::from_vec(vec![0.0; 3])).unwrap();
    let mut state = AdamState::new(&store, vec![pid]);
    let (mut rx, mut rm, mut rv) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
    let mut adam_err = 0.0f64;
    for step in 1..=20 {
        let grad: Vec<f64> = (0..3).map(|i| a[i] * (store.get(pid).value.data()[i] - c[i])).collect();
        store.get_mut(pid).grad = Tensor::from_vec(grad);
        state.step(&mut store, &cfg).unwrap();
        for i in 0..3 {
            let g = a[i] * (rx[i] - c[i]);
            rm[i] = 0.5 * rm[i] + 0.5 * g;
            rv[i] = 0.9 * rv[i] + 0.1 * g * g;
            let mh = rm[i] / (1.0 - 0.5f64.powi(step));
            let vh = rv[i] / (1.0 - 0.9f64.powi(step));
            rx[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            adam_err = adam_err.max((store.get(pid).value.data()[i] - rx[i]).abs());
        }
    }
    errs.push(("adam", adam_err));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let failing: Vec<&str> = errs.iter().filter(|e| !(e.1 <= ORACLE_TOLERANCE)).map(|e| e.0).collect();

    let wt = random(&mut rng, &[12, 27], -1.0, 1.0);
    let svd = jacobi_top_singular_value(12, 27, wt.data());
    let mut sn = SpectralNormState::new(12, &mut rng);
    let sigma = sn.power_iterate(&wt, 100).unwrap();
    let sigma_err = (sigma - svd).abs();

    let pass = failing.is_empty() && sigma_err <= SIGMA_TOLERANCE;
    report(
        pass,
        "oracle equivalence",
        &format!(
            "{} losses/metrics/optimizer checks, max abs err {worst:.1e} (tol {ORACLE_TOLERANCE:.0e}); sigma {sigma:.6} vs svd {svd:.6} (tol {SIGMA_TOLERANCE:.0e}); failing {failing:?}",
            errs.len()
        ),
    );
    assert!(pass);
}

#[test]
fn training_contracts() {
    let start = Instant::now();
    let glyph = GlyphConfig::default();
    let imgs = sample_images(&glyph, 1, 21).unwrap();
    let dir = TempDir::new().unwrap();
    let base = TrainConfig { epochs: 2, checkpoint_every: 1, feat: 8, ..TrainConfig::default() };
    let s1 = run(&base, &imgs, &glyph, RunOptions { out_dir: dir.path().join("s1"), ..Default::default() }).unwrap();
    let before = ModelBundle::from_container(&Container::load(&s1.checkpoint).unwrap()).unwrap().param_hash(&STAGE2_FROZEN);
    let s2cfg = TrainConfig { stage: 2, epochs: 5, init_from: Some(s1.checkpoint.clone()), ..base.clone() };
    let s2 = run(&s2cfg, &imgs, &glyph, RunOptions { out_dir: dir.path().join("s2"), ..Default::default() }).unwrap();
    let freeze_ok = s2.bundle.param_hash(&STAGE2_FROZEN) == before;

    let mut schedule_err = 0.0f64;
    for total in [2usize, 5, 60, 140] {
        let half = total.div_ceil(2);
        for e in 0..total {
            let closed = if e < half { 1e-4 } else { 1e-4 * (total - e) as f64 / (total - half) as f64 };
            schedule_err = schedule_err.max((lr_at(e, total, 1e-4).unwrap() - closed).abs());
        }
    }
    let schedule_ok = schedule_err <= 1e-18;

    let resume_ok = [("r1", base.clone()), ("r2", TrainConfig { epochs: 4, ..s2cfg.clone() })].into_iter().all(|(name, cfg)| {
        let full = dir.path().join(format!("{name}_full"));
        let split = dir.path().join(format!("{name}_split"));
        let a = run(&cfg, &imgs, &glyph, RunOptions { out_dir: full, ..Default::default() }).unwrap();
        run(&cfg, &imgs, &glyph, RunOptions { out_dir: split.clone(), stop_after: Some(1), ..Default::default() }).unwrap();
        let b = run(&cfg, &imgs, &glyph, RunOptions { out_dir: split, resume: true, ..Default::default() }).unwrap();
        fs::read(a.losses_csv).unwrap() == fs::read(b.losses_csv).unwrap()
    });
    let elapsed = start.elapsed();
    let pass = freeze_ok && schedule_ok && resume_ok && elapsed <= CONTRACT_BUDGET;
    report(
        pass,
        "training contracts",
        &format!(
            "freeze hash unchanged over 5 stage-2 epochs: {freeze_ok}; schedule max err {schedule_err:.0e}; resumed loss CSV identical: {resume_ok}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

struct Scores {
    pcc: f64,
    mse: f64,
    id_accuracy: f64,
}

fn train_and_score(variant: Variant, seed: u64, data: &eet_core::data::Dataset, glyph: &GlyphConfig, oracles: &Oracles) -> Scores {
    let dir = TempDir::new().unwrap();
    let s1 = TrainConfig { seed, variant, epochs: E2E_EPOCHS, ..TrainConfig::default() };
    let out1 = run(&s1, &data.train, glyph, RunOptions { out_dir: dir.path().to_path_buf(), ..Default::default() }).unwrap();
    let s2 = TrainConfig { stage: 2, init_from: Some(out1.checkpoint), ..s1 };
    let out2 = run(&s2, &data.train, glyph, RunOptions { out_dir: dir.path().to_path_buf(), ..Default::default() }).unwrap();
    let t = evaluate_transfer(&out2.bundle, &data.test, oracles, E2E_PARTNERS, seed).unwrap();
    let i = evaluate_identity(&out2.bundle, &data.test, oracles, E2E_PAIRS, E2E_PAIRS, seed).unwrap();
    let s = Scores { pcc: t.avg_pcc.unwrap_or(f64::NAN), mse: t.avg_mse, id_accuracy: i.accuracy };
    let _ = std::io::stderr().lock().write_all(
        format!(
            "  {} seed {seed}: avg pcc {:.3}, avg mse {:.3}, identity accuracy {:.1}%, tar@far1 {:.1}%\n",
            variant.name(),
            s.pcc,
            s.mse,
            100.0 * s.id_accuracy,
            100.0 * i.tar_at_far1
        )
        .as_bytes(),
    );
    s
}

#[test]
fn scaled_end_to_end_and_ablation() {
    let start = Instant::now();
    let glyph = GlyphConfig::default();
    let data = sample_dataset(&glyph, E2E_IMAGES_PER_ID, 0.3, 1).unwrap();
    let oracles = Oracles::train(&glyph, &OracleSettings::default()).unwrap();

    let real = evaluate_identity(&KeepTarget, &data.test, &oracles, E2E_PAIRS, E2E_PAIRS, 0).unwrap();
    let cheat = evaluate_transfer(&RenderWithSource(glyph.clone()), &data.test, &oracles, E2E_PARTNERS, 0).unwrap();
    let cheat_pcc = cheat.avg_pcc.unwrap_or(f64::NAN);

    let eet: Vec<Scores> = E2E_SEEDS.iter().map(|&s| train_and_score(Variant::Eet, s, &data, &glyph, &oracles)).collect();
    let bc: Vec<Scores> = E2E_SEEDS.iter().map(|&s| train_and_score(Variant::BcNet, s, &data, &glyph, &oracles)).collect();

    let pcc = median(eet.iter().map(|s| s.pcc).collect());
    let err = median(eet.iter().map(|s| s.mse).collect());
    let acc = median(eet.iter().map(|s| s.id_accuracy).collect());
    let bc_acc = median(bc.iter().map(|s| s.id_accuracy).collect());
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let e2e_pass = pcc >= MIN_AVG_PCC
        && err <= MAX_AVG_MSE
        && acc >= MIN_ID_ACCURACY
        && real.accuracy >= MIN_REAL_ACCURACY
        && cheat_pcc >= MIN_CHEAT_PCC;
    report(
        e2e_pass,
        "scaled end-to-end",
        &format!(
            "median over seeds {E2E_SEEDS:?}: avg pcc {pcc:.3} (>= {MIN_AVG_PCC}), avg mse {err:.3} (<= {MAX_AVG_MSE}), identity accuracy {:.1}% (>= {:.0}%); real row {:.1}% (>= {:.0}%); re-render pcc {cheat_pcc:.3} (>= {MIN_CHEAT_PCC}); {minutes:.0} min for both variants",
            100.0 * acc,
            100.0 * MIN_ID_ACCURACY,
            100.0 * real.accuracy,
            100.0 * MIN_REAL_ACCURACY
        ),
    );
    let gap = acc - bc_acc;
    report(
        gap >= MIN_ABLATION_GAP,
        "ablation",
        &format!(
            "identity accuracy median eet {:.1}% vs bc-net {:.1}%: gap {:.1} points (>= {:.0})",
            100.0 * acc,
            100.0 * bc_acc,
            100.0 * gap,
            100.0 * MIN_ABLATION_GAP
        ),
    );
    assert!(eet.iter().chain(&bc).all(|s| s.mse.is_finite() && s.id_accuracy.is_finite()));
}
