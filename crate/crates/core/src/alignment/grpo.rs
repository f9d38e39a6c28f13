//! Clipped-surrogate group-relative policy objective on categorical toy
//! policies, with its analytic gradient w.r.t. the policy logits.

use super::AlignmentError;

/// Full distribution over a finite action set; every probability positive.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    probs: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn new(probs: Vec<f64>) -> Result<Self, AlignmentError> {
        if probs.is_empty() {
            return Err(AlignmentError::InvalidPolicy("empty action set".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(AlignmentError::InvalidPolicy(format!(
                "probability {p} is not positive"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AlignmentError::InvalidPolicy(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    /// Softmax of `logits`, shifted by the max for stability.
    pub fn from_logits(logits: &[f64]) -> Result<Self, AlignmentError> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Exact `Σ π ln(π/ρ)`.
pub fn categorical_kl(p: &CategoricalPolicy, q: &CategoricalPolicy) -> Result<f64, AlignmentError> {
    if p.len() != q.len() {
        return Err(AlignmentError::ActionSetMismatch(p.len(), q.len()));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub epsilon_clip: f64,
    pub beta: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon_clip: 0.2,
            beta: 0.04,
        }
    }
}

/// Sampled actions for one query and their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoGroup {
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl GrpoGroup {
    pub fn new(actions: Vec<usize>, rewards: Vec<f64>) -> Result<Self, AlignmentError> {
        if actions.len() != rewards.len() {
            return Err(AlignmentError::InvalidGroup(format!(
                "{} actions but {} rewards",
                actions.len(),
                rewards.len()
            )));
        }
        if actions.len() < 2 {
            return Err(AlignmentError::InvalidGroup("group needs at least two members".into()));
        }
        Ok(Self { actions, rewards })
    }
}

/// `(rᵢ − mean) / std` with the population standard deviation.
///
/// Rewards are first taken relative to the first member, so adding a
/// constant to every reward leaves the advantages bit-identical whenever the
/// shifted rewards are exactly representable.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, AlignmentError> {
    if rewards.len() < 2 {
        return Err(AlignmentError::InvalidGroup("group needs at least two members".into()));
    }
    let anchor = rewards[0];
    let rel: Vec<f64> = rewards.iter().map(|r| r - anchor).collect();
    let n = rel.len() as f64;
    let mean = rel.iter().sum::<f64>() / n;
    let std = (rel.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(AlignmentError::ZeroVariance);
    }
    Ok(rel.iter().map(|r| (r - mean) / std).collect())
}

fn check_inputs(
    theta: &CategoricalPolicy,
    reference: &CategoricalPolicy,
    old: &CategoricalPolicy,
    group: &GrpoGroup,
) -> Result<(), AlignmentError> {
    for other in [reference, old] {
        if other.len() != theta.len() {
            return Err(AlignmentError::ActionSetMismatch(theta.len(), other.len()));
        }
    }
    if let Some(&a) = group.actions.iter().find(|&&a| a >= theta.len()) {
        return Err(AlignmentError::ActionOutOfRange {
            action: a,
            actions: theta.len(),
        });
    }
    Ok(())
}

struct SurrogateTerm {
    value: f64,
    /// ∂value/∂r; zero when the clipped branch is selected.
    slope: f64,
}

fn surrogate(ratio: f64, advantage: f64, eps: f64) -> SurrogateTerm {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        SurrogateTerm {
            value: unclipped,
            slope: advantage,
        }
    } else {
        SurrogateTerm {
            value: clipped,
            slope: 0.0,
        }
    }
}

/// Objective to maximize:
/// `mean_i min(rᵢ·Âᵢ, clip(rᵢ, 1−ε, 1+ε)·Âᵢ) − β·KL(π_θ ‖ π_ref)`
/// with `rᵢ = π_θ(aᵢ) / π_old(aᵢ)`.
pub fn grpo_objective(
    theta: &CategoricalPolicy,
    reference: &CategoricalPolicy,
    old: &CategoricalPolicy,
    group: &GrpoGroup,
    cfg: &GrpoConfig,
) -> Result<f64, AlignmentError> {
    check_inputs(theta, reference, old, group)?;
    let adv = group_advantages(&group.rewards)?;
    let n = group.actions.len() as f64;
    let surrogate_mean = group
        .actions
        .iter()
        .zip(&adv)
        .map(|(&a, &av)| surrogate(theta.probs[a] / old.probs[a], av, cfg.epsilon_clip).value)
        .sum::<f64>()
        / n;
    Ok(surrogate_mean - cfg.beta * categorical_kl(theta, reference)?)
}

/// `−grpo_objective`, for minimizers.
pub fn grpo_loss(
    theta: &CategoricalPolicy,
    reference: &CategoricalPolicy,
    old: &CategoricalPolicy,
    group: &GrpoGroup,
    cfg: &GrpoConfig,
) -> Result<f64, AlignmentError> {
    grpo_objective(theta, reference, old, group, cfg).map(|o| -o)
}

/// ∂objective/∂logits for θ = softmax(`theta_logits`).
///
/// Advantages are constants; a clipped member contributes nothing.
pub fn grpo_gradient(
    theta_logits: &[f64],
    reference: &CategoricalPolicy,
    old: &CategoricalPolicy,
    group: &GrpoGroup,
    cfg: &GrpoConfig,
) -> Result<Vec<f64>, AlignmentError> {
    let theta = CategoricalPolicy::from_logits(theta_logits)?;
    check_inputs(&theta, reference, old, group)?;
    let adv = group_advantages(&group.rewards)?;
    let pi = theta.probs();
    let k = pi.len();
    let n = group.actions.len() as f64;
    let mut grad = vec![0.0; k];

    // ∂π_a/∂z_j = π_a (δ_aj − π_j), so ∂r/∂z_j = r (δ_aj − π_j).
    for (&a, &av) in group.actions.iter().zip(&adv) {
        let ratio = pi[a] / old.probs[a];
        let term = surrogate(ratio, av, cfg.epsilon_clip);
        if term.slope == 0.0 {
            continue;
        }
        for (j, g) in grad.iter_mut().enumerate() {
            let delta = if j == a { 1.0 } else { 0.0 };
            *g += term.slope * ratio * (delta - pi[j]) / n;
        }
    }

    if cfg.beta != 0.0 {
        // ∂KL/∂z_j = π_j (l_j − Σ π_i l_i), l_i = ln π_i − ln ρ_i
        let log_ratio: Vec<f64> = pi
            .iter()
            .zip(reference.probs())
            .map(|(p, q)| p.ln() - q.ln())
            .collect();
        let expected: f64 = pi.iter().zip(&log_ratio).map(|(p, l)| p * l).sum();
        for j in 0..k {
            grad[j] -= cfg.beta * pi[j] * (log_ratio[j] - expected);
        }
    }
    Ok(grad)
}

/// Whether any member's ratio sits within `tol` of a clip edge.
pub fn near_clip_boundary(
    theta: &CategoricalPolicy,
    old: &CategoricalPolicy,
    group: &GrpoGroup,
    eps: f64,
    tol: f64,
) -> bool {
    group.actions.iter().any(|&a| {
        let r = theta.probs[a] / old.probs[a];
        (r - (1.0 - eps)).abs() < tol || (r - (1.0 + eps)).abs() < tol
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(p: &[f64]) -> CategoricalPolicy {
        CategoricalPolicy::new(p.to_vec()).unwrap()
    }

    #[test]
    fn advantages_of_one_two_three() {
        let a = group_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let s = (1.5f64).sqrt();
        for (got, want) in a.iter().zip([-s, 0.0, s]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((a[2] - 1.2247).abs() < 1e-4);
        assert_eq!(group_advantages(&[5.0, 5.0]), Err(AlignmentError::ZeroVariance));
    }

    #[test]
    fn identical_policies_give_zero() {
        let p = policy(&[0.2, 0.3, 0.5]);
        let group = GrpoGroup::new(vec![0, 1, 2, 1], vec![0.1, 0.9, 0.4, 0.3]).unwrap();
        let obj = grpo_objective(&p, &p, &p, &group, &GrpoConfig::default()).unwrap();
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn pure_kl_when_theta_matches_old() {
        let theta = policy(&[0.2, 0.3, 0.5]);
        let reference = policy(&[0.4, 0.4, 0.2]);
        let group = GrpoGroup::new(vec![0, 1, 2], vec![1.0, 2.0, 3.0]).unwrap();
        let cfg = GrpoConfig { epsilon_clip: 0.2, beta: 1.0 };
        let obj = grpo_objective(&theta, &reference, &theta, &group, &cfg).unwrap();
        let kl = 0.2 * (0.2f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.4).ln() + 0.5 * (0.5f64 / 0.2).ln();
        assert!((obj + kl).abs() < 1e-12);
    }

    #[test]
    fn clip_selection() {
        assert_eq!(surrogate(1.5, 1.0, 0.2).value, 1.2);
        assert_eq!(surrogate(1.5, -1.0, 0.2).value, -1.5);
        assert_eq!(surrogate(1.5, 1.0, 0.2).slope, 0.0);
        assert_eq!(surrogate(1.5, -1.0, 0.2).slope, -1.0);
        assert_eq!(surrogate(0.5, -1.0, 0.2).value, -0.8);
    }

    #[test]
    fn input_validation() {
        let p = policy(&[0.5, 0.5]);
        let q = policy(&[0.2, 0.3, 0.5]);
        let group = GrpoGroup::new(vec![0, 3], vec![0.0, 1.0]).unwrap();
        let cfg = GrpoConfig::default();
        assert!(matches!(
            grpo_objective(&p, &p, &p, &group, &cfg),
            Err(AlignmentError::ActionOutOfRange { action: 3, .. })
        ));
        assert!(matches!(
            grpo_objective(&p, &q, &p, &group, &cfg),
            Err(AlignmentError::ActionSetMismatch(2, 3))
        ));
        assert!(GrpoGroup::new(vec![0], vec![1.0]).is_err());
        assert!(CategoricalPolicy::new(vec![0.5, 0.6]).is_err());
        assert!(CategoricalPolicy::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn loss_is_negated_objective() {
        let theta = policy(&[0.3, 0.7]);
        let old = policy(&[0.35, 0.65]);
        let group = GrpoGroup::new(vec![0, 1, 1], vec![0.0, 1.0, 0.5]).unwrap();
        let cfg = GrpoConfig::default();
        let o = grpo_objective(&theta, &old, &old, &group, &cfg).unwrap();
        assert_eq!(grpo_loss(&theta, &old, &old, &group, &cfg).unwrap(), -o);
    }
}
