//! Self-checks behind `retouch grpo-check`: finite-difference gradients and
//! the algebraic invariants of the objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    categorical_kl, group_advantages, grpo_gradient, grpo_objective, lora_delta,
    near_clip_boundary, CategoricalPolicy, GrpoConfig, GrpoGroup, LoraFactors, Matrix,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl SuiteResult {
    fn new(name: &'static str, max_error: f64, tolerance: f64, cases: usize) -> Self {
        Self {
            name,
            passed: max_error <= tolerance,
            max_error,
            tolerance,
            cases,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{}\t{}\tcases={}\tmax_error={:.3e}\ttolerance={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance
        )
    }
}

fn random_policy(rng: &mut ChaCha8Rng, k: usize) -> CategoricalPolicy {
    let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    CategoricalPolicy::from_logits(&logits).expect("softmax is a valid policy")
}

fn random_group(rng: &mut ChaCha8Rng, k: usize, size: usize) -> GrpoGroup {
    loop {
        let actions = (0..size).map(|_| rng.gen_range(0..k)).collect();
        let rewards: Vec<f64> = (0..size).map(|_| rng.gen_range(0.0..1.0)).collect();
        if group_advantages(&rewards).is_ok() {
            return GrpoGroup::new(actions, rewards).expect("sizes match");
        }
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn advantage_suite(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(2..16);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let adv = group_advantages(&rewards).expect("continuous rewards differ");
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64).sqrt();
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    SuiteResult::new("advantage-normalization", worst, 1e-10, trials)
}

fn identity_suite(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let k = rng.gen_range(2..8);
        let p = random_policy(rng, k);
        let size = rng.gen_range(2..10);
        let group = random_group(rng, k, size);
        let cfg = GrpoConfig {
            epsilon_clip: rng.gen_range(0.05..0.5),
            beta: rng.gen_range(0.0..1.0),
        };
        let obj = grpo_objective(&p, &p, &p, &group, &cfg).expect("valid inputs");
        worst = worst.max(obj.abs());
    }
    SuiteResult::new("identity-objective", worst, 1e-12, trials)
}

fn shift_suite(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut mismatches = 0usize;
    for _ in 0..trials {
        let k = rng.gen_range(2..6);
        let (theta, reference, old) = (random_policy(rng, k), random_policy(rng, k), random_policy(rng, k));
        let n = rng.gen_range(2..8);
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let rewards: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(-20i32..20))).collect();
        if group_advantages(&rewards).is_err() {
            continue;
        }
        let shift = f64::from(rng.gen_range(-1000i32..1000));
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let cfg = GrpoConfig::default();
        let a = grpo_objective(&theta, &reference, &old, &GrpoGroup::new(actions.clone(), rewards).unwrap(), &cfg);
        let b = grpo_objective(&theta, &reference, &old, &GrpoGroup::new(actions, shifted).unwrap(), &cfg);
        if a.unwrap().to_bits() != b.unwrap().to_bits() {
            mismatches += 1;
        }
    }
    SuiteResult::new("reward-shift-invariance", mismatches as f64, 0.0, trials)
}

fn gradient_suite(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < trials {
        let k = rng.gen_range(2..6);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let theta = CategoricalPolicy::from_logits(&logits).unwrap();
        let old_logits: Vec<f64> = logits.iter().map(|z| z + rng.gen_range(-0.4..0.4)).collect();
        let old = CategoricalPolicy::from_logits(&old_logits).unwrap();
        let reference = random_policy(rng, k);
        let size = rng.gen_range(2..8);
        let group = random_group(rng, k, size);
        let cfg = GrpoConfig {
            epsilon_clip: 0.2,
            beta: if checked % 2 == 0 { 0.0 } else { rng.gen_range(0.0..2.0) },
        };
        if near_clip_boundary(&theta, &old, &group, cfg.epsilon_clip, 1e-3) {
            continue;
        }
        let analytic = grpo_gradient(&logits, &reference, &old, &group, &cfg).unwrap();
        let objective = |z: &[f64]| {
            let p = CategoricalPolicy::from_logits(z).unwrap();
            grpo_objective(&p, &reference, &old, &group, &cfg).unwrap()
        };
        for j in 0..k {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[j] += H;
            down[j] -= H;
            let numeric = (objective(&up) - objective(&down)) / (2.0 * H);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
        checked += 1;
    }
    SuiteResult::new("gradient-finite-difference", worst, 1e-4, trials)
}

fn kl_suite(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let k = rng.gen_range(2..10);
        let (p, q) = (random_policy(rng, k), random_policy(rng, k));
        let kl = categorical_kl(&p, &q).unwrap();
        worst = worst.max(-kl).max(categorical_kl(&p, &p).unwrap().abs());
    }
    SuiteResult::new("kl-nonnegative", worst, 0.0, trials)
}

fn unclipped_suite(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let k = rng.gen_range(2..6);
        let (theta, old) = (random_policy(rng, k), random_policy(rng, k));
        let size = rng.gen_range(2..8);
        let group = random_group(rng, k, size);
        let cfg = GrpoConfig {
            epsilon_clip: f64::INFINITY,
            beta: 0.0,
        };
        let got = grpo_objective(&theta, &old, &old, &group, &cfg).unwrap();
        let adv = group_advantages(&group.rewards).unwrap();
        let direct = group
            .actions
            .iter()
            .zip(&adv)
            .map(|(&a, &av)| theta.probs()[a] / old.probs()[a] * av)
            .sum::<f64>()
            / adv.len() as f64;
        worst = worst.max((got - direct).abs());
    }
    SuiteResult::new("unclipped-reduction", worst, 1e-12, trials)
}

fn lora_rank_suite(rng: &mut ChaCha8Rng, trials_per_shape: usize) -> SuiteResult {
    let mut violations = 0usize;
    let mut cases = 0usize;
    for n in [2usize, 4, 8] {
        for m in [2usize, 4, 8] {
            for r in [2usize, 4, 8] {
                if r >= n.min(m) {
                    continue;
                }
                for _ in 0..trials_per_shape {
                    let a = Matrix::new(n, r, (0..n * r).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                    let b = Matrix::new(r, m, (0..r * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                    let delta = lora_delta(&LoraFactors::new(a, b).unwrap());
                    if numerical_rank(&delta) > r {
                        violations += 1;
                    }
                    cases += 1;
                }
            }
        }
    }
    SuiteResult::new("lora-rank-bound", violations as f64, 0.0, cases)
}

/// Rank by Gaussian elimination with partial pivoting.
pub fn numerical_rank(m: &Matrix) -> usize {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a = m.data().to_vec();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = scale * 1e-9 * rows.max(cols) as f64;
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&i, &j| a[i * cols + c].abs().total_cmp(&a[j * cols + c].abs()))
            .unwrap();
        if a[pivot * cols + c].abs() <= tol {
            continue;
        }
        for j in 0..cols {
            a.swap(rank * cols + j, pivot * cols + j);
        }
        for i in rank + 1..rows {
            let f = a[i * cols + c] / a[rank * cols + c];
            for j in c..cols {
                a[i * cols + j] -= f * a[rank * cols + j];
            }
        }
        rank += 1;
    }
    rank
}

/// Run every suite with a fixed seed.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        advantage_suite(&mut rng, 1000),
        identity_suite(&mut rng, 200),
        shift_suite(&mut rng, 500),
        gradient_suite(&mut rng, 200),
        kl_suite(&mut rng, 1000),
        unclipped_suite(&mut rng, 200),
        lora_rank_suite(&mut rng, 100),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(7) {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn rank_of_known_matrices() {
        let full = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(numerical_rank(&full), 2);
        let one = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(numerical_rank(&one), 1);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 3)), 0);
    }
}
