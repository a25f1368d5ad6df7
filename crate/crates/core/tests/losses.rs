use eet_core::losses::*;
use eet_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn eval(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).item()
}

// Naive scalar re-implementations.

fn oracle_au_disc(scores: &[f64], m: usize, k: usize, levels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..m {
        for q in 0..k {
            let s = scores[i * k + q];
            total += if q == levels[i] { (s - 1.0) * (s - 1.0) } else { s * s };
        }
    }
    total / (m * k) as f64
}

fn oracle_au_conf(scores: &[f64], m: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..m {
        for q in 0..k {
            let d = scores[i * k + q] - 1.0 / k as f64;
            total += d * d;
        }
    }
    total / (m * k) as f64
}

fn oracle_weighted(u: &[f64], pred: &[f64], w: &[f64], l: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..u.len() {
        let d = u[i] - pred[i] * l;
        total += w[i] * d * d;
    }
    total / u.len() as f64
}

fn oracle_log_softmax(x: &[f64], k: usize) -> f64 {
    let mut z = 0.0;
    for v in x {
        z += v.exp();
    }
    x[k] - z.ln()
}

#[test]
fn au_losses_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for batch in [1, 3] {
        let scores = random(&mut rng, &[batch, 4, 6], -1.0, 2.0);
        let levels: Vec<Vec<usize>> = (0..batch).map(|_| (0..4).map(|_| rng.gen_range(0..6)).collect()).collect();
        let got = eval(|t| {
            let s = t.input(scores.clone());
            au_discrimination_loss(t, s, &levels).unwrap()
        });
        let want: f64 = (0..batch)
            .map(|b| oracle_au_disc(&scores.data()[b * 24..(b + 1) * 24], 4, 6, &levels[b]))
            .sum::<f64>()
            / batch as f64;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");

        let got = eval(|t| {
            let s = t.input(scores.clone());
            au_confusion_loss(t, s).unwrap()
        });
        let want: f64 =
            (0..batch).map(|b| oracle_au_conf(&scores.data()[b * 24..(b + 1) * 24], 4, 6)).sum::<f64>() / batch as f64;
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn identity_losses_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scores = random(&mut rng, &[2, 10], -1.0, 2.0);
    let ids = [3, 10];
    let got = eval(|t| {
        let s = t.input(scores.clone());
        identity_discrimination_loss(t, s, &ids).unwrap()
    });
    let want = (0..2)
        .map(|b| oracle_au_disc(&scores.data()[b * 10..(b + 1) * 10], 1, 10, &[ids[b] - 1]))
        .sum::<f64>()
        / 2.0;
    assert!((got - want).abs() <= 1e-12);
    let got = eval(|t| {
        let s = t.input(scores.clone());
        identity_confusion_loss(t, s).unwrap()
    });
    let want = (0..2).map(|b| oracle_au_conf(&scores.data()[b * 10..(b + 1) * 10], 1, 10)).sum::<f64>() / 2.0;
    assert!((got - want).abs() <= 1e-12);
}

#[test]
fn weighted_au_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pred = random(&mut rng, &[3, 4], 0.0, 1.0);
    let u: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
    let rates: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
    let w = au_weights(&rates).unwrap();
    let got = eval(|t| {
        let p = t.input(pred.clone());
        weighted_au_loss(t, p, &u, &w, 5).unwrap()
    });
    let want = (0..3).map(|b| oracle_weighted(&u[b], &pred.data()[b * 4..(b + 1) * 4], &w.0, 5.0)).sum::<f64>() / 3.0;
    assert!((got - want).abs() <= 1e-12);
}

#[test]
fn au_weights_examples() {
    let w = au_weights(&[0.3; 4]).unwrap();
    assert!(w.0.iter().all(|x| (x - 0.25).abs() < 1e-15));
    let w = au_weights(&[0.2, 0.8]).unwrap();
    assert!((w.0[0] - 0.8).abs() < 1e-12 && (w.0[1] - 0.2).abs() < 1e-12);
}

#[test]
fn adversarial_losses_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let real = random(&mut rng, &[2, 1, 4, 4], -1.0, 2.0);
    let fake = random(&mut rng, &[2, 1, 4, 4], -1.0, 2.0);
    let n = 32.0;
    let want_d = real.data().iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / n
        + fake.data().iter().map(|f| f * f).sum::<f64>() / n;
    let want_g = fake.data().iter().map(|f| (f - 1.0) * (f - 1.0)).sum::<f64>() / n;
    let mut tape = Tape::new();
    let (r, f) = (tape.input(real.clone()), tape.input(fake.clone()));
    let (d, g) = swap_consistency_losses(&mut tape, r, f, AdversarialForm::LeastSquares).unwrap();
    assert!((tape.value(d).item() - want_d).abs() <= 1e-12);
    assert!((tape.value(g).item() - want_g).abs() <= 1e-12);
    let (d, g) = image_adversarial_losses(&mut tape, r, f, AdversarialForm::LeastSquares).unwrap();
    assert!((tape.value(d).item() - want_d).abs() <= 1e-12);
    assert!((tape.value(g).item() - want_g).abs() <= 1e-12);

    let sp = |x: f64| (1.0 + x.exp()).ln();
    let want_d = real.data().iter().map(|r| sp(-r)).sum::<f64>() / n + fake.data().iter().map(|f| sp(*f)).sum::<f64>() / n;
    let want_g = fake.data().iter().map(|f| sp(-f)).sum::<f64>() / n;
    let (d, g) = image_adversarial_losses(&mut tape, r, f, AdversarialForm::Log).unwrap();
    assert!((tape.value(d).item() - want_d).abs() <= 1e-12);
    assert!((tape.value(g).item() - want_g).abs() <= 1e-12);
}

#[test]
fn attribute_and_reconstruction_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let id = random(&mut rng, &[2, 10], -3.0, 3.0);
    let pose = random(&mut rng, &[2, 3], -3.0, 3.0);
    let (ids, poses) = ([4, 9], [1, 3]);
    let got = eval(|t| {
        let (a, b) = (t.input(id.clone()), t.input(pose.clone()));
        attribute_constraint_loss(t, a, b, &ids, &poses, 0.7).unwrap()
    });
    let want = (0..2)
        .map(|s| {
            -(oracle_log_softmax(&id.data()[s * 10..(s + 1) * 10], ids[s] - 1)
                + 0.7 * oracle_log_softmax(&pose.data()[s * 3..(s + 1) * 3], poses[s] - 1))
        })
        .sum::<f64>()
        / 2.0;
    assert!((got - want).abs() <= 1e-12);

    let real = random(&mut rng, &[2, 1, 5, 5], 0.0, 1.0);
    let check = random(&mut rng, &[2, 1, 5, 5], 0.0, 1.0);
    let hat = random(&mut rng, &[2, 1, 5, 5], 0.0, 1.0);
    let got = eval(|t| {
        let (c, h, r) = (t.input(check.clone()), t.input(hat.clone()), t.input(real.clone()));
        reconstruction_loss(t, c, h, r).unwrap()
    });
    let mut want = 0.0;
    for k in 0..50 {
        want += (check.data()[k] - real.data()[k]).abs() / 50.0 + (hat.data()[k] - real.data()[k]).abs() / 50.0;
    }
    assert!((got - want).abs() <= 1e-12);
}

#[test]
fn analytic_fixtures() {
    // One-hot discrimination scores at the labels cost nothing; all-zero scores cost 1/(l+1).
    let levels = vec![vec![0, 5, 2, 3]];
    let mut onehot = vec![0.0; 24];
    for (i, &q) in levels[0].iter().enumerate() {
        onehot[i * 6 + q] = 1.0;
    }
    let onehot = Tensor::new(&[1, 4, 6], onehot).unwrap();
    let v = eval(|t| {
        let s = t.input(onehot.clone());
        au_discrimination_loss(t, s, &levels).unwrap()
    });
    assert!(v.abs() <= 1e-9);
    let v = eval(|t| {
        let s = t.input(Tensor::zeros(&[1, 4, 6]));
        au_discrimination_loss(t, s, &levels).unwrap()
    });
    assert!((v - 1.0 / 6.0).abs() <= 1e-9);

    let v = eval(|t| {
        let s = t.input(Tensor::full(&[1, 4, 6], 1.0 / 6.0));
        au_confusion_loss(t, s).unwrap()
    });
    assert!(v.abs() <= 1e-9);
    let v = eval(|t| {
        let s = t.input(Tensor::new(&[1, 1, 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        au_confusion_loss(t, s).unwrap()
    });
    assert!((v - 5.0 / 36.0).abs() <= 1e-9);

    let w = au_weights(&[0.5; 4]).unwrap();
    let v = eval(|t| {
        let p = t.input(Tensor::new(&[1, 4], vec![0.2, 0.4, 0.6, 1.0]).unwrap());
        weighted_au_loss(t, p, &[vec![1.0, 2.0, 3.0, 5.0]], &w, 5).unwrap()
    });
    assert!(v.abs() <= 1e-9);
    let v = eval(|t| {
        let p = t.input(Tensor::zeros(&[1, 1]));
        weighted_au_loss(t, p, &[vec![5.0]], &AuWeights(vec![1.0]), 5).unwrap()
    });
    assert!((v - 25.0).abs() <= 1e-9);

    let v = eval(|t| {
        let a = t.input(Tensor::zeros(&[1, 10]));
        let b = t.input(Tensor::zeros(&[1, 3]));
        attribute_constraint_loss(t, a, b, &[7], &[2], 1.0).unwrap()
    });
    assert!((v - (10f64.ln() + 3f64.ln())).abs() <= 1e-9);
    let v = eval(|t| {
        let a = t.input(Tensor::zeros(&[1, 10]));
        let b = t.input(Tensor::zeros(&[1, 3]));
        attribute_constraint_loss(t, a, b, &[7], &[2], 0.0).unwrap()
    });
    assert!((v - 10f64.ln()).abs() <= 1e-9);

    let img = Tensor::full(&[1, 1, 4, 4], 0.3);
    let v = eval(|t| {
        let (a, b, c) = (t.input(img.clone()), t.input(img.clone()), t.input(img.clone()));
        reconstruction_loss(t, a, b, c).unwrap()
    });
    assert!(v.abs() <= 1e-9);
    let v = eval(|t| {
        let a = t.input(img.map(|x| x + 0.1));
        let (b, c) = (t.input(img.clone()), t.input(img.clone()));
        reconstruction_loss(t, a, b, c).unwrap()
    });
    assert!((v - 0.1).abs() <= 1e-9);

    let mut tape = Tape::new();
    let half = tape.input(Tensor::full(&[1, 1, 4, 4], 0.5));
    let (d, _) = swap_consistency_losses(&mut tape, half, half, AdversarialForm::LeastSquares).unwrap();
    assert!((tape.value(d).item() - 0.5).abs() <= 1e-12);
    let ones = tape.input(Tensor::ones(&[1, 1, 4, 4]));
    let zeros = tape.input(Tensor::zeros(&[1, 1, 4, 4]));
    let (d, g) = image_adversarial_losses(&mut tape, ones, zeros, AdversarialForm::LeastSquares).unwrap();
    assert_eq!(tape.value(d).item(), 0.0);
    assert_eq!(tape.value(g).item(), 1.0);
    let (_, g) = image_adversarial_losses(&mut tape, ones, ones, AdversarialForm::LeastSquares).unwrap();
    assert_eq!(tape.value(g).item(), 0.0);
}

#[test]
fn discrimination_prefers_one_hot_and_confusion_prefers_uniform() {
    // Grid over 3-way scores in {0, 0.25, 0.5, 0.75, 1}^3.
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut best_disc = (f64::INFINITY, vec![]);
    let mut best_conf = (f64::INFINITY, vec![]);
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let s = vec![a, b, c];
                let t = Tensor::new(&[1, 1, 3], s.clone()).unwrap();
                let d = eval(|tp| {
                    let v = tp.input(t.clone());
                    au_discrimination_loss(tp, v, &[vec![1]]).unwrap()
                });
                let cf = eval(|tp| {
                    let v = tp.input(t.clone());
                    au_confusion_loss(tp, v).unwrap()
                });
                if d < best_disc.0 {
                    best_disc = (d, s.clone());
                }
                if cf < best_conf.0 {
                    best_conf = (cf, s);
                }
            }
        }
    }
    assert_eq!(best_disc.1, vec![0.0, 1.0, 0.0]);
    // 1/3 is not on the grid; the closest grid point is uniform 0.25 or 0.5.
    let c = &best_conf.1;
    assert!(c[0] == c[1] && c[1] == c[2], "{c:?}");
}

proptest! {
    #[test]
    fn au_confusion_is_invariant_to_row_permutation(
        scores in proptest::collection::vec(-2.0f64..2.0, 18),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| scores[r * 6..(r + 1) * 6].to_vec()).collect();
        let a = eval(|t| {
            let v = t.input(Tensor::new(&[1, 3, 6], scores.clone()).unwrap());
            au_confusion_loss(t, v).unwrap()
        });
        let b = eval(|t| {
            let v = t.input(Tensor::new(&[1, 3, 6], permuted.clone()).unwrap());
            au_confusion_loss(t, v).unwrap()
        });
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn au_weights_are_positive_and_normalized(rates in proptest::collection::vec(0.01f64..=1.0, 1..12)) {
        let w = au_weights(&rates).unwrap();
        prop_assert!(w.0.iter().all(|x| *x > 0.0));
        prop_assert!((w.0.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
