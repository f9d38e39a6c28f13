//! Preference-alignment kernels for the reasoning agent: group-relative
//! advantages and the clipped objective, reward composition, and low-rank
//! adapter algebra. Everything runs on small explicit distributions and
//! matrices so that each piece can be checked against finite differences or
//! direct evaluation.

pub mod check;
mod grpo;
mod lora;

use thiserror::Error;

pub use grpo::{
    categorical_kl, group_advantages, grpo_gradient, grpo_loss, grpo_objective, near_clip_boundary,
    CategoricalPolicy, GrpoConfig, GrpoGroup,
};
pub use lora::{lora_apply, lora_delta, LoraFactors, Matrix};

use crate::dataset::RegionAnnotation;
use crate::text::{rouge_l, Diagnosis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("rewards have zero variance")]
    ZeroVariance,
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policies cover {0} and {1} actions")]
    ActionSetMismatch(usize, usize),
    #[error("action {action} outside an action set of size {actions}")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("reward weights must be non-negative and sum to 1, got ({0}, {1})")]
    InvalidWeights(f64, f64),
}

/// Weights of the category-match and description-alignment reward terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    category: f64,
    text: f64,
}

impl RewardWeights {
    pub fn new(category: f64, text: f64) -> Result<Self, AlignmentError> {
        if category < 0.0 || text < 0.0 || ((category + text) - 1.0).abs() > 1e-9 {
            return Err(AlignmentError::InvalidWeights(category, text));
        }
        Ok(Self { category, text })
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            category: 0.5,
            text: 0.5,
        }
    }
}

/// `w_cat·[category match] + w_txt·ROUGE-L(description)`. A description with
/// no scorable tokens earns no text reward.
pub fn compose_reward(pred: &Diagnosis, truth: &RegionAnnotation, weights: RewardWeights) -> f64 {
    let hit = if pred.category == truth.category { 1.0 } else { 0.0 };
    let text = rouge_l(&pred.description, &truth.description).unwrap_or(0.0);
    weights.category * hit + weights.text * text
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DistortionCategory;

    fn truth() -> RegionAnnotation {
        RegionAnnotation {
            x: 1,
            y: 1,
            category: DistortionCategory::HandLimb,
            description: "extra finger on left hand".into(),
            annotator: "u".into(),
        }
    }

    fn diag(cat: DistortionCategory, text: &str) -> Diagnosis {
        Diagnosis {
            region_id: "r".into(),
            category: cat,
            description: text.into(),
            severity: 1.0,
        }
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(compose_reward(&diag(DistortionCategory::HandLimb, "extra finger on left hand"), &truth(), w), 1.0);
        assert_eq!(compose_reward(&diag(DistortionCategory::Face, "blurry sky"), &truth(), w), 0.0);
        let mut t = truth();
        t.description = "extra toe".into();
        let half = diag(DistortionCategory::HandLimb, "extra finger");
        assert_eq!(rouge_l(&half.description, &t.description).unwrap(), 0.5);
        assert_eq!(compose_reward(&half, &t, w), 0.75);
    }

    #[test]
    fn weights_validated() {
        assert!(RewardWeights::new(0.7, 0.3).is_ok());
        assert!(RewardWeights::new(0.7, 0.7).is_err());
        assert!(RewardWeights::new(-0.5, 1.5).is_err());
    }
}
