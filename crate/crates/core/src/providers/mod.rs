//! The three neural roles of the loop (perception, reasoning, inpainting) as
//! traits, plus tool selection. Concrete backends live in [`mock`] and
//! [`http`].

pub mod http;
pub mod mock;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DistortionCategory;
use crate::media::ImageBuffer;
use crate::saliency::{BinaryGrid, RegionProposal, SaliencyMap};
use crate::text::Diagnosis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("request timed out")]
    Timeout,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no tool satisfies the policy: {0}")]
    NoTool(String),
}

impl ProviderError {
    /// Failures worth another attempt: transport errors, timeouts, 429 and 5xx.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) | ProviderError::Timeout => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait PerceptionProvider: Send + Sync {
    /// Saliency map with the same dimensions as `image`.
    fn perceive(&self, image: &ImageBuffer, prompt: &str) -> Result<SaliencyMap, ProviderError>;
}

/// A region handed to the reasoning provider.
#[derive(Debug, Clone, Copy)]
pub struct RegionRef<'a> {
    pub id: &'a str,
    pub proposal: &'a RegionProposal,
}

pub trait ReasoningProvider: Send + Sync {
    /// One diagnosis per region, in the same order.
    fn diagnose(
        &self,
        image: &ImageBuffer,
        prompt: &str,
        regions: &[RegionRef<'_>],
    ) -> Result<Vec<Diagnosis>, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToolKind {
    MaskGuided,
    InstructionDriven,
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolKind::MaskGuided => "mask-guided",
            ToolKind::InstructionDriven => "instruction-driven",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub kind: ToolKind,
    pub cost_hint: f64,
}

/// What an inpainting tool receives for one region.
#[derive(Debug, Clone, Copy)]
pub struct InpaintRequest<'a> {
    pub image: &'a ImageBuffer,
    pub mask: Option<&'a BinaryGrid>,
    pub instruction: Option<&'a str>,
}

pub trait InpaintTool: Send + Sync {
    fn descriptor(&self) -> &ToolDescriptor;

    /// Returns an image with the same dimensions as the input.
    fn inpaint(&self, request: InpaintRequest<'_>) -> Result<ImageBuffer, ProviderError>;
}

/// Checks the kind-specific requirements of a request before dispatch.
pub fn validate_inpaint_request(
    descriptor: &ToolDescriptor,
    request: &InpaintRequest<'_>,
) -> Result<(), ProviderError> {
    match descriptor.kind {
        ToolKind::MaskGuided if request.mask.is_none() => Err(ProviderError::InvalidRequest(
            format!("mask-guided tool {} requires a mask", descriptor.name),
        )),
        ToolKind::InstructionDriven if request.instruction.is_none() => {
            Err(ProviderError::InvalidRequest(format!(
                "instruction-driven tool {} requires an instruction",
                descriptor.name
            )))
        }
        _ => Ok(()),
    }
}

/// Shared handles to one backend per role plus the tool registry.
#[derive(Clone)]
pub struct Providers {
    pub perception: Arc<dyn PerceptionProvider>,
    pub reasoning: Arc<dyn ReasoningProvider>,
    pub tools: Vec<Arc<dyn InpaintTool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToolPreference {
    MaskGuided,
    InstructionDriven,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolPolicy {
    pub prefer: ToolPreference,
    pub max_cost: f64,
}

impl Default for ToolPolicy {
    fn default() -> Self {
        Self {
            prefer: ToolPreference::Auto,
            max_cost: f64::INFINITY,
        }
    }
}

/// Pick the tool for one diagnosis.
///
/// An explicit preference takes the cheapest tool of that kind within
/// `max_cost`. `Auto` wants an instruction-driven tool for text anomalies and
/// a mask-guided tool otherwise, and falls back to the other kind when none
/// of the wanted kind fits the budget. Equal costs resolve to registry order.
pub fn select_tool<'a>(
    registry: &'a [Arc<dyn InpaintTool>],
    diagnosis: &Diagnosis,
    policy: &ToolPolicy,
) -> Result<&'a Arc<dyn InpaintTool>, ProviderError> {
    let cheapest = |kind: ToolKind| {
        registry
            .iter()
            .filter(|t| t.descriptor().kind == kind && t.descriptor().cost_hint <= policy.max_cost)
            .fold(None::<&Arc<dyn InpaintTool>>, |best, t| match best {
                Some(b) if b.descriptor().cost_hint <= t.descriptor().cost_hint => Some(b),
                _ => Some(t),
            })
    };
    let found = match policy.prefer {
        ToolPreference::MaskGuided => cheapest(ToolKind::MaskGuided),
        ToolPreference::InstructionDriven => cheapest(ToolKind::InstructionDriven),
        ToolPreference::Auto => {
            let (first, second) = if diagnosis.category == DistortionCategory::TextAnomaly {
                (ToolKind::InstructionDriven, ToolKind::MaskGuided)
            } else {
                (ToolKind::MaskGuided, ToolKind::InstructionDriven)
            };
            cheapest(first).or_else(|| cheapest(second))
        }
    };
    found.ok_or_else(|| {
        ProviderError::NoTool(format!(
            "prefer {:?} with max_cost {} over {} registered tools",
            policy.prefer,
            policy.max_cost,
            registry.len()
        ))
    })
}

/// Edit instruction for instruction-driven tools.
pub fn render_instruction(diagnosis: &Diagnosis) -> String {
    format!("fix {}: {}", diagnosis.category, diagnosis.description)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(ToolDescriptor);

    impl InpaintTool for Fixed {
        fn descriptor(&self) -> &ToolDescriptor {
            &self.0
        }

        fn inpaint(&self, request: InpaintRequest<'_>) -> Result<ImageBuffer, ProviderError> {
            Ok(request.image.clone())
        }
    }

    fn tool(name: &str, kind: ToolKind, cost: f64) -> Arc<dyn InpaintTool> {
        Arc::new(Fixed(ToolDescriptor {
            name: name.into(),
            kind,
            cost_hint: cost,
        }))
    }

    fn diagnosis(cat: DistortionCategory) -> Diagnosis {
        Diagnosis {
            region_id: "r".into(),
            category: cat,
            description: "d".into(),
            severity: 0.5,
        }
    }

    #[test]
    fn explicit_preference_takes_cheapest() {
        let reg = vec![
            tool("fill-2", ToolKind::MaskGuided, 2.0),
            tool("edit", ToolKind::InstructionDriven, 0.5),
            tool("fill-1", ToolKind::MaskGuided, 1.0),
        ];
        let policy = ToolPolicy { prefer: ToolPreference::MaskGuided, max_cost: 10.0 };
        let t = select_tool(&reg, &diagnosis(DistortionCategory::Face), &policy).unwrap();
        assert_eq!(t.descriptor().name, "fill-1");
    }

    #[test]
    fn auto_routes_text_to_instruction_tools() {
        let reg = vec![
            tool("fill", ToolKind::MaskGuided, 1.0),
            tool("edit", ToolKind::InstructionDriven, 3.0),
        ];
        let policy = ToolPolicy::default();
        assert_eq!(select_tool(&reg, &diagnosis(DistortionCategory::TextAnomaly), &policy).unwrap().descriptor().name, "edit");
        assert_eq!(select_tool(&reg, &diagnosis(DistortionCategory::HandLimb), &policy).unwrap().descriptor().name, "fill");
    }

    #[test]
    fn ties_follow_registry_order() {
        let reg = vec![
            tool("first", ToolKind::MaskGuided, 1.0),
            tool("second", ToolKind::MaskGuided, 1.0),
        ];
        let t = select_tool(&reg, &diagnosis(DistortionCategory::Face), &ToolPolicy::default()).unwrap();
        assert_eq!(t.descriptor().name, "first");
    }

    #[test]
    fn budget_too_small() {
        let reg = vec![tool("fill", ToolKind::MaskGuided, 1.0)];
        let policy = ToolPolicy { prefer: ToolPreference::Auto, max_cost: 0.5 };
        assert!(matches!(
            select_tool(&reg, &diagnosis(DistortionCategory::Face), &policy),
            Err(ProviderError::NoTool(_))
        ));
    }

    #[test]
    fn request_requirements() {
        let image = ImageBuffer::filled(2, 2, 1, 0).unwrap();
        let mask_tool = ToolDescriptor { name: "m".into(), kind: ToolKind::MaskGuided, cost_hint: 0.0 };
        let req = InpaintRequest { image: &image, mask: None, instruction: Some("fix") };
        assert!(validate_inpaint_request(&mask_tool, &req).is_err());
        let edit_tool = ToolDescriptor { kind: ToolKind::InstructionDriven, ..mask_tool };
        assert!(validate_inpaint_request(&edit_tool, &req).is_ok());
    }
}
