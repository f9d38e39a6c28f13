//! Closed-loop detection and repair of generation artifacts.
//!
//! A perception provider predicts where an image looks wrong, a reasoning
//! provider says what is wrong there, and an inpainting tool fixes it. The
//! loop repeats until the strongest predicted artifact falls below a
//! threshold. Around the loop sit the saliency and text metrics, the
//! annotation format, and the reward and policy-gradient math used to align
//! the reasoning model.

pub mod alignment;
pub mod dataset;
pub mod media;
pub mod metrics;
pub mod providers;
pub mod retouch;
pub mod saliency;
pub mod text;

pub use dataset::{AnnotationRecord, DistortionCategory, RegionAnnotation};
pub use media::{FloatGrid, ImageBuffer};
pub use providers::{Providers, ToolKind, ToolPolicy};
pub use retouch::{run_batch, run_loop, LoopConfig, LoopTrace, StopReason};
pub use saliency::{BinaryGrid, RegionProposal, SaliencyMap};
pub use text::Diagnosis;
