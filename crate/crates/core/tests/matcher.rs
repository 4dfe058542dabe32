use paraformer::matcher::sinkhorn::{augment, log_sinkhorn, log_sinkhorn_backward};
use paraformer::matcher::{extract_matches, sinkhorn, Assignment, Correspondences};
use paraformer::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain multiplicative Sinkhorn on `K = exp(z)`, no log-domain tricks.
fn exp_domain(scores: &[f64], m: usize, n: usize, alpha: f64, iters: usize) -> Vec<f64> {
    let z = augment(scores, m, n, alpha);
    let (r, c) = (m + 1, n + 1);
    let k: Vec<f64> = z.iter().map(|x| x.exp()).collect();
    let mut a = vec![1.0; r];
    a[m] = n as f64;
    let mut b = vec![1.0; c];
    b[n] = m as f64;
    let mut u = vec![1.0; r];
    let mut v = vec![1.0; c];
    for _ in 0..iters {
        for i in 0..r {
            let s: f64 = (0..c).map(|j| k[i * c + j] * v[j]).sum();
            u[i] = a[i] / s;
        }
        for j in 0..c {
            let s: f64 = (0..r).map(|i| k[i * c + j] * u[i]).sum();
            v[j] = b[j] / s;
        }
    }
    (0..r * c).map(|e| u[e / c] * k[e] * v[e % c]).collect()
}

fn random_scores(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> Vec<f64> {
    (0..m * n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn tensor(scores: &[f64], m: usize, n: usize) -> Tensor {
    Tensor::new(vec![m, n], scores.iter().map(|&s| s as f32).collect()).unwrap()
}

#[test]
fn log_domain_matches_exp_domain_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let s = random_scores(&mut rng, 4, 5, 2.0);
        let t = tensor(&s, 4, 5);
        let s32: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        let got = sinkhorn(&t, 0.5, 50).unwrap();
        let want = exp_domain(&s32, 4, 5, 0.5, 50);
        for (e, w) in want.iter().enumerate() {
            let p = got.log_p[e].exp();
            assert!((p - w).abs() < 1e-5, "entry {e}: {p} vs {w}");
        }
    }
}

#[test]
fn marginals_hold_after_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(m, n) in &[(4, 5), (7, 3), (1, 1), (12, 12)] {
        let s = random_scores(&mut rng, m, n, 3.0);
        let a = sinkhorn(&tensor(&s, m, n), 1.0, 200).unwrap();
        let rows = a.row_sums();
        let cols = a.col_sums();
        for (i, r) in rows.iter().enumerate() {
            let want = if i == m { n as f64 } else { 1.0 };
            assert!((r - want).abs() < 1e-5, "row {i} sums to {r}");
        }
        for (j, c) in cols.iter().enumerate() {
            let want = if j == n { m as f64 } else { 1.0 };
            assert!((c - want).abs() < 1e-5, "col {j} sums to {c}");
        }
        assert!((a.total_mass() - (m + n) as f64).abs() < 1e-4);
    }
}

#[test]
fn shift_of_all_scores_is_absorbed() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = random_scores(&mut rng, 4, 5, 2.0);
    let z = augment(&s, 4, 5, 0.3);
    let shifted: Vec<f64> = z.iter().map(|x| x + 7.25).collect();
    let base = log_sinkhorn(&z, 4, 5, 50).unwrap().log_assignment(&z, 4, 5);
    let moved = log_sinkhorn(&shifted, 4, 5, 50).unwrap().log_assignment(&shifted, 4, 5);
    for (a, b) in base.iter().zip(&moved) {
        assert!((a - b).abs() < 1e-6);
    }
}

/// Log-domain Sinkhorn with a per-entry log-sum-exp and no factoring.
fn naive_log_domain(z: &[f64], m: usize, n: usize, iters: usize) -> Vec<f64> {
    let (r, c) = (m + 1, n + 1);
    let lse = |xs: Vec<f64>| {
        let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let mut u = vec![0.0; r];
    let mut v = vec![0.0; c];
    for _ in 0..iters {
        for i in 0..r {
            let la = if i == m { (n as f64).ln() } else { 0.0 };
            u[i] = la - lse((0..c).map(|j| z[i * c + j] + v[j]).collect());
        }
        for j in 0..c {
            let lb = if j == n { (m as f64).ln() } else { 0.0 };
            v[j] = lb - lse((0..r).map(|i| z[i * c + j] + u[i]).collect());
        }
    }
    (0..r * c).map(|e| z[e] + u[e / c] + v[e % c]).collect()
}

#[test]
fn extreme_scores_take_the_exact_path() {
    let (m, n) = (3, 4);
    let mut s = vec![0.0; m * n];
    s[0] = 900.0;
    s[5] = -900.0;
    s[11] = 400.0;
    let z = augment(&s, m, n, 1.0);
    let t = log_sinkhorn(&z, m, n, 30).unwrap();
    let lp = t.log_assignment(&z, m, n);
    let want = naive_log_domain(&z, m, n, 30);
    for (e, (a, b)) in lp.iter().zip(&want).enumerate() {
        assert!((a.exp() - b.exp()).abs() < 1e-9, "entry {e}: {a} vs {b}");
    }
    let g: Vec<f64> = (0..lp.len()).map(|e| (e % 3) as f64 - 1.0).collect();
    let gz = log_sinkhorn_backward(&z, m, n, &t, &g);
    assert!(gz.iter().all(|x| x.is_finite()));
}

#[test]
fn factored_iterations_match_naive_log_domain() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let (m, n) = (rng.random_range(1..30), rng.random_range(1..30));
        let s = random_scores(&mut rng, m, n, 40.0);
        let z = augment(&s, m, n, rng.random_range(-5.0..5.0));
        let got = log_sinkhorn(&z, m, n, 20).unwrap().log_assignment(&z, m, n);
        let want = naive_log_domain(&z, m, n, 20);
        for (a, b) in got.iter().zip(&want) {
            assert!((a.exp() - b.exp()).abs() < 1e-9);
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (m, n) = (3, 4);
    let s = random_scores(&mut rng, m, n, 1.5);
    let z = augment(&s, m, n, 0.7);
    let g: Vec<f64> = (0..z.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |z: &[f64]| -> f64 {
        let lp = log_sinkhorn(z, m, n, 25).unwrap().log_assignment(z, m, n);
        lp.iter().zip(&g).map(|(a, b)| a * b).sum()
    };
    let t = log_sinkhorn(&z, m, n, 25).unwrap();
    let gz = log_sinkhorn_backward(&z, m, n, &t, &g);
    let h = 1e-5;
    for e in 0..z.len() {
        let mut zp = z.clone();
        zp[e] += h;
        let mut zm = z.clone();
        zm[e] -= h;
        let num = (f(&zp) - f(&zm)) / (2.0 * h);
        assert!((num - gz[e]).abs() < 1e-6 * (1.0 + num.abs()), "entry {e}: {} vs {num}", gz[e]);
    }
}

#[test]
fn rejects_bad_inputs() {
    assert!(sinkhorn(&Tensor::zeros(vec![0, 3]), 1.0, 10).is_err());
    assert!(sinkhorn(&Tensor::zeros(vec![2, 3]), 1.0, 0).is_err());
    let mut z = augment(&[0.0; 6], 2, 3, 1.0);
    z[2] = f64::NAN;
    assert!(log_sinkhorn(&z, 2, 3, 5).is_err());
}

fn assignment_from(p: &[f64], m: usize, n: usize) -> Assignment {
    Assignment {
        log_p: p.iter().map(|x| x.ln()).collect(),
        m,
        n,
        iterations_run: 0,
        alpha: 0.0,
    }
}

/// Every pair checked against the full row and column.
fn brute_force_matches(p: &[f64], m: usize, n: usize, threshold: f64) -> Vec<(usize, usize)> {
    let c = n + 1;
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let v = p[i * c + j];
            let row_first = (0..n).all(|k| p[i * c + k] < v || (p[i * c + k] == v && k >= j));
            let col_first = (0..m).all(|k| p[k * c + j] < v || (p[k * c + j] == v && k >= i));
            if row_first && col_first && v >= threshold {
                out.push((i, j));
            }
        }
    }
    out
}

#[test]
fn extraction_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..200 {
        let (m, n) = (rng.random_range(1..8), rng.random_range(1..8));
        let p: Vec<f64> = (0..(m + 1) * (n + 1)).map(|_| rng.random_range(0.01..1.0)).collect();
        let threshold = [0.0, 0.2, 0.5][trial % 3];
        let got = extract_matches(&assignment_from(&p, m, n), threshold);
        assert_eq!(got.pairs(), brute_force_matches(&p, m, n, threshold));
        assert!(got.is_injective());
    }
}

#[test]
fn dustbin_never_matches() {
    let (m, n) = (2, 2);
    // Dustbin entries dominate but must be ignored.
    let p = [0.3, 0.1, 0.9, 0.1, 0.25, 0.9, 0.9, 0.9, 0.9];
    let got = extract_matches(&assignment_from(&p, m, n), 0.2);
    assert_eq!(got.pairs(), vec![(0, 0), (1, 1)]);
}

#[test]
fn confidence_is_clamped() {
    let p = [1.0000001, 0.1, 0.1, 0.1];
    let got = extract_matches(&assignment_from(&p, 1, 1), 0.2);
    assert_eq!(got.matches[0].confidence, 1.0);
}

#[test]
fn correspondences_must_partition() {
    let gt = Correspondences {
        matches: vec![(0, 1)],
        unmatched_x: vec![1],
        unmatched_y: vec![0],
    };
    gt.validate(2, 2).unwrap();
    assert_eq!(gt.coords(2, 2), vec![(0, 1), (1, 2), (2, 0)]);
    assert!(gt.validate(3, 2).is_err());
    let dup = Correspondences {
        matches: vec![(0, 1), (1, 1)],
        unmatched_x: vec![],
        unmatched_y: vec![0],
    };
    assert!(dup.validate(2, 2).is_err());
}

proptest! {
    #[test]
    fn rows_and_columns_normalize(m in 1usize..6, n in 1usize..6, seed in any::<u64>(), alpha in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scores(&mut rng, m, n, 4.0);
        let a = sinkhorn(&tensor(&s, m, n), alpha, 400).unwrap();
        for (i, r) in a.row_sums().iter().enumerate() {
            let want = if i == m { n as f64 } else { 1.0 };
            prop_assert!((r - want).abs() < 1e-6);
        }
        prop_assert!(a.log_p.iter().all(|x| x.is_finite() && *x <= 1e-9 + (m.max(n) as f64).ln()));
    }

    #[test]
    fn extracted_matches_are_injective(m in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scores(&mut rng, m, n, 3.0);
        let a = sinkhorn(&tensor(&s, m, n), 1.0, 50).unwrap();
        let got = extract_matches(&a, 0.0);
        prop_assert!(got.is_injective());
        prop_assert!(got.matches.iter().all(|x| x.i < m && x.j < n && x.confidence <= 1.0));
    }
}
