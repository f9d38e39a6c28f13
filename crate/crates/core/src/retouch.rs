//! The perception → reasoning → action controller.
//!
//! Each iteration perceives the current image, stops if the strongest
//! saliency is below `tau_s`, and otherwise proposes regions, diagnoses them,
//! picks a tool per region and applies the edits in descending peak-saliency
//! order. The updated image is perceived again on the next iteration.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::media::{write_pnm, ImageBuffer};
use crate::providers::{
    render_instruction, select_tool, InpaintRequest, ProviderError, Providers, RegionRef,
    ToolKind, ToolPolicy,
};
use crate::saliency::{propose_masks, BoundingBox, ProposalConfig, RegionProposal, DEFAULT_KLD_EPSILON};
use crate::text::Diagnosis;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub tau_s: f64,
    pub max_iterations: usize,
    pub dilation_radius: usize,
    pub min_area: usize,
    pub tool_policy: ToolPolicy,
    pub epsilon: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.5,
            max_iterations: 3,
            dilation_radius: 1,
            min_area: 4,
            tool_policy: ToolPolicy::default(),
            epsilon: DEFAULT_KLD_EPSILON,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("invalid loop configuration: {0}")]
    InvalidConfig(String),
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if !(0.0..=1.0).contains(&self.tau_s) {
            return Err(LoopError::InvalidConfig(format!("tau_s {} outside [0, 1]", self.tau_s)));
        }
        if self.max_iterations == 0 {
            return Err(LoopError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(LoopError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }

    fn proposal(&self) -> ProposalConfig {
        ProposalConfig {
            tau: self.tau_s,
            dilation_radius: self.dilation_radius,
            min_area: self.min_area,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposedRegion {
    pub id: String,
    pub proposal: RegionProposal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Action {
    pub region_id: String,
    pub tool: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    pub max_saliency: f64,
    pub regions: Vec<ProposedRegion>,
    pub diagnoses: Vec<Diagnosis>,
    pub actions: Vec<Action>,
    pub image_after: Arc<ImageBuffer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    ProviderError,
}

/// Full audit trail of one run.
///
/// A `ProviderError` trace keeps whatever was recorded before the failure;
/// its last record may be partial and it may have no records at all when the
/// very first perception failed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopTrace {
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub final_image: Arc<ImageBuffer>,
    pub error: Option<String>,
}

pub fn region_id(t: usize, index: usize) -> String {
    format!("t{t}-r{index}")
}

fn check_diagnoses(regions: &[ProposedRegion], diagnoses: &[Diagnosis]) -> Result<(), ProviderError> {
    if diagnoses.len() != regions.len() {
        return Err(ProviderError::Schema(format!(
            "{} diagnoses for {} regions",
            diagnoses.len(),
            regions.len()
        )));
    }
    for (r, d) in regions.iter().zip(diagnoses) {
        if d.region_id != r.id {
            return Err(ProviderError::Schema(format!(
                "diagnosis for {} returned where {} was expected",
                d.region_id, r.id
            )));
        }
        if !(0.0..=1.0).contains(&d.severity) {
            return Err(ProviderError::Schema(format!("severity {} outside [0, 1]", d.severity)));
        }
    }
    Ok(())
}

struct Run<'a> {
    providers: &'a Providers,
    cfg: &'a LoopConfig,
    prompt: &'a str,
    current: Arc<ImageBuffer>,
    records: Vec<IterationRecord>,
}

impl Run<'_> {
    fn fail(self, err: ProviderError) -> LoopTrace {
        LoopTrace {
            records: self.records,
            stop_reason: StopReason::ProviderError,
            final_image: self.current,
            error: Some(err.to_string()),
        }
    }

    fn finish(self, stop_reason: StopReason) -> LoopTrace {
        LoopTrace {
            records: self.records,
            stop_reason,
            final_image: self.current,
            error: None,
        }
    }

    /// One iteration. `Ok(true)` means converged.
    fn step(&mut self, t: usize) -> Result<bool, ProviderError> {
        let image = self.current.clone();
        let map = self.providers.perception.perceive(&image, self.prompt)?;
        if (map.width(), map.height()) != (image.width(), image.height()) {
            return Err(ProviderError::Schema(format!(
                "saliency is {}x{} but the image is {}x{}",
                map.width(),
                map.height(),
                image.width(),
                image.height()
            )));
        }
        let max_saliency = map.max();
        self.records.push(IterationRecord {
            t,
            max_saliency,
            regions: Vec::new(),
            diagnoses: Vec::new(),
            actions: Vec::new(),
            image_after: image.clone(),
        });
        if max_saliency < self.cfg.tau_s {
            return Ok(true);
        }
        let proposals = propose_masks(&map, &self.cfg.proposal())
            .map_err(|e| ProviderError::Schema(e.to_string()))?;
        let regions: Vec<ProposedRegion> = proposals
            .into_iter()
            .enumerate()
            .map(|(i, proposal)| ProposedRegion {
                id: region_id(t, i),
                proposal,
            })
            .collect();
        let refs: Vec<RegionRef<'_>> = regions
            .iter()
            .map(|r| RegionRef {
                id: &r.id,
                proposal: &r.proposal,
            })
            .collect();
        let diagnoses = if refs.is_empty() {
            Vec::new()
        } else {
            self.providers.reasoning.diagnose(&image, self.prompt, &refs)?
        };
        let record = self.records.last_mut().expect("pushed above");
        record.regions = regions;
        check_diagnoses(&record.regions, &diagnoses)?;
        record.diagnoses = diagnoses;

        for i in 0..record.regions.len() {
            let record = self.records.last_mut().expect("pushed above");
            let (region, diagnosis) = (&record.regions[i], &record.diagnoses[i]);
            let tool = select_tool(&self.providers.tools, diagnosis, &self.cfg.tool_policy)?;
            let instruction = match tool.descriptor().kind {
                ToolKind::InstructionDriven => Some(render_instruction(diagnosis)),
                ToolKind::MaskGuided => None,
            };
            let request = InpaintRequest {
                image: &self.current,
                mask: match tool.descriptor().kind {
                    ToolKind::MaskGuided => Some(&region.proposal.mask),
                    ToolKind::InstructionDriven => None,
                },
                instruction: instruction.as_deref(),
            };
            let edited = tool.inpaint(request)?;
            if (edited.width(), edited.height()) != (self.current.width(), self.current.height()) {
                return Err(ProviderError::Schema(format!(
                    "tool {} changed the image size",
                    tool.descriptor().name
                )));
            }
            let action = Action {
                region_id: region.id.clone(),
                tool: tool.descriptor().name.clone(),
                instruction,
            };
            self.current = Arc::new(edited);
            record.actions.push(action);
            record.image_after = self.current.clone();
        }
        Ok(false)
    }
}

/// Run the closed loop on one image.
pub fn run_loop(
    image: &ImageBuffer,
    prompt: &str,
    providers: &Providers,
    cfg: &LoopConfig,
) -> Result<LoopTrace, LoopError> {
    cfg.validate()?;
    let mut run = Run {
        providers,
        cfg,
        prompt,
        current: Arc::new(image.clone()),
        records: Vec::new(),
    };
    for t in 0..cfg.max_iterations {
        match run.step(t) {
            Ok(true) => return Ok(run.finish(StopReason::Converged)),
            Ok(false) => {}
            Err(e) => return Ok(run.fail(e)),
        }
    }
    Ok(run.finish(StopReason::MaxIterations))
}

#[derive(Debug, Clone)]
pub struct LoopJob {
    pub id: String,
    pub image: ImageBuffer,
    pub prompt: String,
}

/// Run many loops with at most `parallelism` in flight. Output order matches
/// input order; a job that panics yields a `ProviderError` trace instead of
/// aborting the batch.
pub fn run_batch<F>(
    jobs: &[LoopJob],
    providers_for: F,
    cfg: &LoopConfig,
    parallelism: usize,
) -> Result<Vec<LoopTrace>, LoopError>
where
    F: Fn(&LoopJob) -> Providers + Sync,
{
    cfg.validate()?;
    if parallelism == 0 {
        return Err(LoopError::InvalidConfig("parallelism must be at least 1".into()));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<LoopTrace>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let trace = catch_unwind(AssertUnwindSafe(|| {
                    let providers = providers_for(job);
                    run_loop(&job.image, &job.prompt, &providers, cfg).expect("config validated")
                }))
                .unwrap_or_else(|panic| {
                    let msg = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "provider panicked".into());
                    LoopTrace {
                        records: Vec::new(),
                        stop_reason: StopReason::ProviderError,
                        final_image: Arc::new(job.image.clone()),
                        error: Some(msg),
                    }
                });
                slots.lock().unwrap()[i] = Some(trace);
            });
        }
    });
    Ok(slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|t| t.expect("every job ran"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub iterations: usize,
    pub actions_total: usize,
    pub initial_max_saliency: Option<f64>,
    pub final_max_saliency: Option<f64>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

pub fn trace_to_report(trace: &LoopTrace) -> TraceReport {
    TraceReport {
        iterations: trace.records.len(),
        actions_total: trace.records.iter().map(|r| r.actions.len()).sum(),
        initial_max_saliency: trace.records.first().map(|r| r.max_saliency),
        final_max_saliency: trace.records.last().map(|r| r.max_saliency),
        converged: trace.stop_reason == StopReason::Converged,
        stop_reason: trace.stop_reason,
    }
}

pub fn image_digest(image: &ImageBuffer) -> String {
    Sha256::digest(write_pnm(image))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct RegionJson<'a> {
    id: &'a str,
    bbox: BoundingBox,
    area: usize,
    peak_saliency: f64,
}

#[derive(Serialize)]
struct RecordJson<'a> {
    t: usize,
    max_saliency: f64,
    regions: Vec<RegionJson<'a>>,
    diagnoses: &'a [Diagnosis],
    actions: &'a [Action],
    image_after: String,
    image_after_sha256: String,
}

#[derive(Serialize)]
struct TraceJson<'a> {
    stop_reason: StopReason,
    error: Option<&'a str>,
    records: Vec<RecordJson<'a>>,
    final_image: String,
    final_image_sha256: String,
}

impl LoopTrace {
    /// JSON view of the trace. Images appear as references produced by
    /// `image_ref(t)` (`None` for the final image) plus a SHA-256 of their PNM
    /// encoding.
    pub fn to_json(&self, image_ref: impl Fn(Option<usize>) -> String) -> serde_json::Value {
        let view = TraceJson {
            stop_reason: self.stop_reason,
            error: self.error.as_deref(),
            records: self
                .records
                .iter()
                .map(|r| RecordJson {
                    t: r.t,
                    max_saliency: r.max_saliency,
                    regions: r
                        .regions
                        .iter()
                        .map(|g| RegionJson {
                            id: &g.id,
                            bbox: g.proposal.bbox,
                            area: g.proposal.area,
                            peak_saliency: g.proposal.peak_saliency,
                        })
                        .collect(),
                    diagnoses: &r.diagnoses,
                    actions: &r.actions,
                    image_after: image_ref(Some(r.t)),
                    image_after_sha256: image_digest(&r.image_after),
                })
                .collect(),
            final_image: image_ref(None),
            final_image_sha256: image_digest(&self.final_image),
        };
        serde_json::to_value(view).expect("trace serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{mock_providers, SyntheticScene};
    use crate::providers::{PerceptionProvider, ReasoningProvider};
    use crate::saliency::SaliencyMap;

    fn bump_run(h: f64, d: f64, cfg: &LoopConfig) -> LoopTrace {
        let scene = SyntheticScene::single_bump(12, 10, (5, 4), h, d).unwrap();
        let image = scene.image.clone();
        let (providers, _) = mock_providers(scene, 3);
        run_loop(&image, "a photo", &providers, cfg).unwrap()
    }

    #[test]
    fn zero_field_converges_immediately() {
        let trace = bump_run(0.0, 0.5, &LoopConfig::default());
        assert_eq!(trace.stop_reason, StopReason::Converged);
        assert_eq!(trace.records.len(), 1);
        let report = trace_to_report(&trace);
        assert_eq!((report.iterations, report.actions_total, report.converged), (1, 0, true));
    }

    #[test]
    fn single_bump_converges_in_two() {
        let trace = bump_run(0.8, 0.5, &LoopConfig::default());
        assert_eq!(trace.stop_reason, StopReason::Converged);
        assert_eq!(trace.records.len(), 2);
        assert_eq!(trace.records[0].max_saliency, 0.8);
        assert_eq!(trace.records[1].max_saliency, 0.4);
        let report = trace_to_report(&trace);
        assert_eq!((report.iterations, report.actions_total, report.converged), (2, 1, true));
        let action = &trace.records[0].actions[0];
        assert_eq!(action.region_id, trace.records[0].regions[0].id);
    }

    #[test]
    fn slow_decay_hits_the_cap() {
        let trace = bump_run(0.9, 0.9, &LoopConfig::default());
        assert_eq!(trace.stop_reason, StopReason::MaxIterations);
        let maxima: Vec<f64> = trace.records.iter().map(|r| r.max_saliency).collect();
        assert_eq!(maxima.len(), 3);
        for (got, want) in maxima.iter().zip([0.9, 0.81, 0.729]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(trace.records.iter().all(|r| r.actions.len() == 1));
        assert!(!trace_to_report(&trace).converged);
    }

    struct Broken;

    impl PerceptionProvider for Broken {
        fn perceive(&self, _: &ImageBuffer, _: &str) -> Result<SaliencyMap, ProviderError> {
            Err(ProviderError::Timeout)
        }
    }

    impl ReasoningProvider for Broken {
        fn diagnose(&self, _: &ImageBuffer, _: &str, _: &[RegionRef<'_>]) -> Result<Vec<Diagnosis>, ProviderError> {
            Err(ProviderError::Status { status: 500, body: "boom".into() })
        }
    }

    #[test]
    fn provider_failures_end_the_trace() {
        let scene = SyntheticScene::single_bump(8, 8, (4, 4), 0.9, 0.5).unwrap();
        let image = scene.image.clone();
        let (mut providers, _) = mock_providers(scene, 0);
        providers.reasoning = Arc::new(Broken);
        let trace = run_loop(&image, "p", &providers, &LoopConfig::default()).unwrap();
        assert_eq!(trace.stop_reason, StopReason::ProviderError);
        assert_eq!(trace.records.len(), 1);
        assert_eq!(*trace.final_image, image);

        providers.perception = Arc::new(Broken);
        let trace = run_loop(&image, "p", &providers, &LoopConfig::default()).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.error.as_deref(), Some("request timed out"));
    }

    #[test]
    fn batch_matches_single_runs() {
        let jobs: Vec<LoopJob> = (0..5)
            .map(|i| LoopJob {
                id: format!("img{i}"),
                image: SyntheticScene::single_bump(8, 8, (i + 1, 3), 0.2 * i as f64, 0.5).unwrap().image,
                prompt: "p".into(),
            })
            .collect();
        let factory = |job: &LoopJob| {
            let i: usize = job.id[3..].parse().unwrap();
            mock_providers(SyntheticScene::single_bump(8, 8, (i + 1, 3), 0.2 * i as f64, 0.5).unwrap(), 1).0
        };
        let cfg = LoopConfig::default();
        let serial = run_batch(&jobs, factory, &cfg, 1).unwrap();
        let parallel = run_batch(&jobs, factory, &cfg, 4).unwrap();
        assert_eq!(serial, parallel);
        let single = run_loop(&jobs[3].image, "p", &factory(&jobs[3]), &cfg).unwrap();
        assert_eq!(serial[3], single);
        assert!(run_batch(&jobs, factory, &cfg, 0).is_err());
    }

    #[test]
    fn panicking_job_is_isolated() {
        let jobs: Vec<LoopJob> = (0..3)
            .map(|i| LoopJob {
                id: i.to_string(),
                image: ImageBuffer::filled(4, 4, 1, 0).unwrap(),
                prompt: "p".into(),
            })
            .collect();
        let factory = |job: &LoopJob| {
            if job.id == "1" {
                panic!("backend exploded");
            }
            let scene = SyntheticScene::new(job.image.clone(), SaliencyMap::zeros(4, 4), 0.5).unwrap();
            mock_providers(scene, 0).0
        };
        let traces = run_batch(&jobs, factory, &LoopConfig::default(), 2).unwrap();
        assert_eq!(traces[0].stop_reason, StopReason::Converged);
        assert_eq!(traces[1].stop_reason, StopReason::ProviderError);
        assert_eq!(traces[1].error.as_deref(), Some("backend exploded"));
        assert_eq!(traces[2].stop_reason, StopReason::Converged);
    }

    #[test]
    fn config_validation() {
        let bad = LoopConfig { max_iterations: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LoopConfig { tau_s: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
