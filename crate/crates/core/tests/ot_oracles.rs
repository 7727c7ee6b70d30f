use fish_core::ot::{build_cost_matrix, ot_rewards, sinkhorn, CostMatrix, CostMetric, OtRewardConfig, SinkhornConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PERMS3: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn lp_optimum_3x3(c: &[Vec<f64>]) -> f64 {
    PERMS3
        .iter()
        .map(|p| (0..3).map(|i| c[i][p[i]]).sum::<f64>() / 3.0)
        .fold(f64::INFINITY, f64::min)
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.random::<f64>()).collect()).collect()
}

/// Plain-domain Sinkhorn written independently of the library solver.
fn naive_sinkhorn(c: &[Vec<f64>], eps: f64, iters: usize) -> Vec<Vec<f64>> {
    let (n, m) = (c.len(), c[0].len());
    let k: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| (-v / eps).exp()).collect()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    for _ in 0..iters {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| k[i][j] * v[j]).sum();
            u[i] = (1.0 / n as f64) / s;
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| k[i][j] * u[i]).sum();
            v[j] = (1.0 / m as f64) / s;
        }
    }
    (0..n).map(|i| (0..m).map(|j| u[i] * k[i][j] * v[j]).collect()).collect()
}

#[test]
fn log_domain_matches_plain_domain_at_moderate_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let rows = random_rows(&mut rng, 5, 7);
        let c = CostMatrix::from_rows(&rows).unwrap();
        let p = sinkhorn(&c, &SinkhornConfig { epsilon: 0.5, max_iters: 5000, tol: 1e-12 }).unwrap();
        let q = naive_sinkhorn(&rows, 0.5, 5000);
        for i in 0..5 {
            for j in 0..7 {
                assert!((p.get(i, j) - q[i][j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn entropic_cost_bounds_lp_and_tightens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let rows = random_rows(&mut rng, 3, 3);
        let lp = lp_optimum_3x3(&rows);
        let c = CostMatrix::from_rows(&rows).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [1.0, 0.1, 0.01] {
            // near-tied permutations converge slowly at small epsilon
            let cfg = SinkhornConfig { epsilon: eps, max_iters: 1_000_000, tol: 1e-6 };
            let p = sinkhorn(&c, &cfg).unwrap();
            let cost = p.transported_cost(&c);
            // a plan whose marginals are off by d can undercut the LP by at most 2*n*d*max(C)
            let slack = 6.0 * p.marginal_error * c.max_entry();
            assert!(cost >= lp - slack, "entropic {cost} below lp {lp}");
            assert!(cost <= prev + slack);
            if eps == 0.01 {
                assert!((cost - lp) / lp <= 0.02, "gap {} at eps 0.01", (cost - lp) / lp);
            }
            prev = cost;
        }
    }
}

#[test]
fn rectangular_marginals_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = random_rows(&mut rng, 12, 40);
    let p = sinkhorn(&CostMatrix::from_rows(&rows).unwrap(), &SinkhornConfig::default()).unwrap();
    for s in p.row_sums() {
        assert!((s - 1.0 / 12.0).abs() <= 1e-6);
    }
    for s in p.col_sums() {
        assert!((s - 1.0 / 40.0).abs() <= 1e-6);
    }
}

#[test]
fn identical_trajectories_beat_reversed_ones() {
    let traj: Vec<Vec<f64>> = (0..20)
        .map(|t| {
            let a = t as f64 / 19.0 * std::f64::consts::FRAC_PI_2;
            vec![a.cos(), a.sin(), 0.3]
        })
        .collect();
    let rev: Vec<Vec<f64>> = traj.iter().rev().cloned().collect();
    let cfg = OtRewardConfig::default();
    let same = ot_rewards(&traj, &traj, &cfg).unwrap();
    let other = ot_rewards(&rev, &traj, &cfg).unwrap();
    // same multiset of points: transport can match them regardless of order
    assert!((same.total - other.total).abs() < 1e-6);
    let shifted: Vec<Vec<f64>> = traj.iter().map(|v| vec![v[0], v[1], 2.0]).collect();
    let far = ot_rewards(&shifted, &traj, &cfg).unwrap();
    assert!(far.total < same.total);
}

#[test]
fn euclidean_cost_matrix_matches_direct_formula() {
    let a = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
    let b = vec![vec![0.0, 4.0]];
    let c = build_cost_matrix(&a, &b, CostMetric::Euclidean).unwrap();
    assert_eq!(c.get(0, 0), 4.0);
    assert_eq!(c.get(1, 0), 3.0);
}
