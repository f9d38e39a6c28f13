//! Deterministic stand-ins for the neural providers.
//!
//! A [`SyntheticScene`] carries a hidden distortion field. The mock perceiver
//! reports that field verbatim, and every mock edit multiplies it by the
//! scene's decay inside the edited region, so loop behaviour can be predicted
//! exactly.

use std::sync::{Arc, Mutex};

use super::{
    validate_inpaint_request, InpaintRequest, InpaintTool, PerceptionProvider, ProviderError,
    Providers, ReasoningProvider, RegionRef, ToolDescriptor, ToolKind,
};
use crate::dataset::DistortionCategory;
use crate::media::ImageBuffer;
use crate::saliency::{BinaryGrid, BoundingBox, SaliencyError, SaliencyMap};
use crate::text::Diagnosis;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageBuffer,
    pub field: SaliencyMap,
    pub decay: f64,
}

impl SyntheticScene {
    pub fn new(image: ImageBuffer, field: SaliencyMap, decay: f64) -> Result<Self, SaliencyError> {
        if field.width() != image.width() || field.height() != image.height() {
            return Err(SaliencyError::DimensionMismatch(
                field.width(),
                field.height(),
                image.width(),
                image.height(),
            ));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(SaliencyError::InvalidConfig(format!(
                "decay {decay} outside (0, 1)"
            )));
        }
        Ok(Self {
            image,
            field,
            decay,
        })
    }

    /// Gray image of the given size with a single-pixel bump of `height` at
    /// `(x, y)`.
    pub fn single_bump(
        width: usize,
        height: usize,
        at: (usize, usize),
        bump: f64,
        decay: f64,
    ) -> Result<Self, SaliencyError> {
        let mut values = vec![0.0; width * height];
        values[at.1 * width + at.0] = bump;
        let field = SaliencyMap::new(width, height, values)?;
        let image = ImageBuffer::new(
            width,
            height,
            1,
            (0..width * height).map(|i| (i * 37 % 251) as u8).collect(),
        )?;
        Self::new(image, field, decay)
    }
}

/// The mock is a perfect perceiver.
pub fn mock_perceive(scene: &SyntheticScene) -> SaliencyMap {
    scene.field.clone()
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn category_for(bbox: &BoundingBox, seed: u64) -> DistortionCategory {
    let key = [bbox.x0, bbox.y0, bbox.x1, bbox.y1]
        .iter()
        .fold(mix64(seed), |h, &v| mix64(h ^ v as u64));
    DistortionCategory::ALL[(key % 12) as usize]
}

/// Category from a seeded hash of the bounding box, templated description,
/// severity equal to the region's peak saliency.
pub fn mock_diagnose(regions: &[RegionRef<'_>], seed: u64) -> Vec<Diagnosis> {
    regions
        .iter()
        .map(|r| {
            let b = r.proposal.bbox;
            let category = category_for(&b, seed);
            Diagnosis {
                region_id: r.id.to_string(),
                category,
                description: format!("{category} at ({},{})-({},{})", b.x0, b.y0, b.x1, b.y1),
                severity: r.proposal.peak_saliency,
            }
        })
        .collect()
}

/// Decay the hidden field inside `mask` and flatten the masked pixels of
/// `image` to their mean color.
pub fn mock_inpaint(scene: &SyntheticScene, image: &ImageBuffer, mask: &BinaryGrid) -> SyntheticScene {
    let values = scene
        .field
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| if m { v * scene.decay } else { v })
        .collect();
    let field = SaliencyMap::new(scene.field.width(), scene.field.height(), values)
        .expect("decay keeps values in [0, 1]");
    SyntheticScene {
        image: fill_mean(image, mask),
        field,
        decay: scene.decay,
    }
}

fn fill_mean(image: &ImageBuffer, mask: &BinaryGrid) -> ImageBuffer {
    let c = image.channels();
    let mut sums = vec![0u64; c];
    let mut count = 0u64;
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &m)| m) {
        let px = &image.data()[i * c..(i + 1) * c];
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += u64::from(v);
        }
        count += 1;
    }
    let mut out = image.clone();
    if count == 0 {
        return out;
    }
    let mean: Vec<u8> = sums.iter().map(|s| ((s + count / 2) / count) as u8).collect();
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &m)| m) {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&mean);
    }
    out
}

/// Pulls the last `(x0,y0)-(x1,y1)` box out of an instruction.
fn parse_bbox(instruction: &str) -> Option<BoundingBox> {
    let start = instruction.rfind(")-(")?;
    let open = instruction[..start].rfind('(')?;
    let close = start + 3 + instruction[start + 3..].find(')')?;
    let first = &instruction[open + 1..start];
    let second = &instruction[start + 3..close];
    let pair = |s: &str| -> Option<(usize, usize)> {
        let (a, b) = s.split_once(',')?;
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    };
    let (x0, y0) = pair(first)?;
    let (x1, y1) = pair(second)?;
    Some(BoundingBox { x0, y0, x1, y1 })
}

/// Scene state shared by the mock perceiver and the mock tools of one run.
#[derive(Debug)]
pub struct MockWorld {
    scene: Mutex<SyntheticScene>,
}

impl MockWorld {
    pub fn new(scene: SyntheticScene) -> Arc<Self> {
        Arc::new(Self {
            scene: Mutex::new(scene),
        })
    }

    pub fn snapshot(&self) -> SyntheticScene {
        self.scene.lock().unwrap().clone()
    }
}

pub struct MockPerception {
    world: Arc<MockWorld>,
}

impl MockPerception {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world }
    }
}

impl PerceptionProvider for MockPerception {
    fn perceive(&self, image: &ImageBuffer, _prompt: &str) -> Result<SaliencyMap, ProviderError> {
        let scene = self.world.scene.lock().unwrap();
        if image.width() != scene.field.width() || image.height() != scene.field.height() {
            return Err(ProviderError::InvalidRequest(format!(
                "image is {}x{} but the scene is {}x{}",
                image.width(),
                image.height(),
                scene.field.width(),
                scene.field.height()
            )));
        }
        Ok(mock_perceive(&scene))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MockReasoning {
    pub seed: u64,
}

impl ReasoningProvider for MockReasoning {
    fn diagnose(
        &self,
        _image: &ImageBuffer,
        _prompt: &str,
        regions: &[RegionRef<'_>],
    ) -> Result<Vec<Diagnosis>, ProviderError> {
        Ok(mock_diagnose(regions, self.seed))
    }
}

/// Mask-guided tools edit the mask; instruction-driven tools edit the box
/// named in the instruction, or the whole image when none can be parsed.
pub struct MockInpaintTool {
    world: Arc<MockWorld>,
    descriptor: ToolDescriptor,
}

impl MockInpaintTool {
    pub fn new(world: Arc<MockWorld>, descriptor: ToolDescriptor) -> Self {
        Self { world, descriptor }
    }
}

impl InpaintTool for MockInpaintTool {
    fn descriptor(&self) -> &ToolDescriptor {
        &self.descriptor
    }

    fn inpaint(&self, request: InpaintRequest<'_>) -> Result<ImageBuffer, ProviderError> {
        validate_inpaint_request(&self.descriptor, &request)?;
        let (w, h) = (request.image.width(), request.image.height());
        let region = match (self.descriptor.kind, request.mask, request.instruction) {
            (ToolKind::MaskGuided, Some(mask), _) => mask.clone(),
            (_, _, Some(instruction)) => {
                let mut grid = BinaryGrid::empty(w, h);
                match parse_bbox(instruction) {
                    Some(b) if b.x1 < w && b.y1 < h && b.x0 <= b.x1 && b.y0 <= b.y1 => {
                        for y in b.y0..=b.y1 {
                            for x in b.x0..=b.x1 {
                                grid.set(x, y, true);
                            }
                        }
                    }
                    _ => grid = BinaryGrid::new(w, h, vec![true; w * h]),
                }
                grid
            }
            (_, Some(mask), None) => mask.clone(),
            (_, None, None) => unreachable!("validated above"),
        };
        if region.width() != w || region.height() != h {
            return Err(ProviderError::InvalidRequest("mask does not match image".into()));
        }
        let mut scene = self.world.scene.lock().unwrap();
        let next = mock_inpaint(&scene, request.image, &region);
        *scene = next;
        Ok(scene.image.clone())
    }
}

/// Mock perceiver, reasoner and two tools (`mock-fill`, mask-guided, cost 1;
/// `mock-edit`, instruction-driven, cost 2) sharing one scene.
pub fn mock_providers(scene: SyntheticScene, seed: u64) -> (Providers, Arc<MockWorld>) {
    let world = MockWorld::new(scene);
    let tool = |name: &str, kind, cost_hint| -> Arc<dyn InpaintTool> {
        Arc::new(MockInpaintTool::new(
            world.clone(),
            ToolDescriptor {
                name: name.into(),
                kind,
                cost_hint,
            },
        ))
    };
    let providers = Providers {
        perception: Arc::new(MockPerception::new(world.clone())),
        reasoning: Arc::new(MockReasoning { seed }),
        tools: vec![
            tool("mock-fill", ToolKind::MaskGuided, 1.0),
            tool("mock-edit", ToolKind::InstructionDriven, 2.0),
        ],
    };
    (providers, world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::{propose_masks, ProposalConfig};

    #[test]
    fn perceive_is_verbatim() {
        let zero = SyntheticScene::new(
            ImageBuffer::filled(4, 4, 1, 9).unwrap(),
            SaliencyMap::zeros(4, 4),
            0.5,
        )
        .unwrap();
        assert_eq!(mock_perceive(&zero).max(), 0.0);
        let bump = SyntheticScene::single_bump(6, 5, (2, 3), 0.8, 0.5).unwrap();
        assert_eq!(mock_perceive(&bump).max(), 0.8);
        assert_eq!(mock_perceive(&bump), mock_perceive(&bump));
    }

    #[test]
    fn diagnose_is_deterministic() {
        assert!(mock_diagnose(&[], 1).is_empty());
        let scene = SyntheticScene::single_bump(8, 8, (4, 4), 0.7, 0.5).unwrap();
        let regions = propose_masks(&scene.field, &ProposalConfig::default()).unwrap();
        let refs = [RegionRef { id: "t0-r0", proposal: &regions[0] }];
        let a = mock_diagnose(&refs, 42);
        assert_eq!(a, mock_diagnose(&refs, 42));
        assert_eq!(a[0].severity, 0.7);
        assert_eq!(a[0].description, format!("{} at (3,3)-(5,5)", a[0].category));
    }

    #[test]
    fn inpaint_decays_inside_mask_only() {
        let mut values = vec![0.0; 9];
        values[4] = 0.8;
        values[0] = 0.6;
        let image = ImageBuffer::new(3, 3, 1, (0..9).map(|i| i as u8 * 10).collect()).unwrap();
        let scene = SyntheticScene::new(image.clone(), SaliencyMap::new(3, 3, values).unwrap(), 0.5).unwrap();
        let mut mask = BinaryGrid::empty(3, 3);
        mask.set(1, 1, true);
        mask.set(2, 1, true);
        let once = mock_inpaint(&scene, &image, &mask);
        assert_eq!(once.field.get(1, 1), 0.4);
        assert_eq!(once.field.get(0, 0), 0.6);
        // masked pixels 40 and 50 become their mean
        assert_eq!(once.image.pixel(1, 1), &[45]);
        assert_eq!(once.image.pixel(2, 1), &[45]);
        assert_eq!(once.image.pixel(0, 0), &[0]);
        let twice = mock_inpaint(&once, &once.image, &mask);
        assert_eq!(twice.field.get(1, 1), 0.2);
    }

    #[test]
    fn instruction_tool_targets_named_box() {
        let scene = SyntheticScene::single_bump(8, 8, (4, 4), 0.8, 0.5).unwrap();
        let image = scene.image.clone();
        let (providers, world) = mock_providers(scene, 0);
        let edit = &providers.tools[1];
        edit.inpaint(InpaintRequest {
            image: &image,
            mask: None,
            instruction: Some("fix face: face at (3,3)-(5,5)"),
        })
        .unwrap();
        let after = world.snapshot();
        assert_eq!(after.field.get(4, 4), 0.4);
        assert!(parse_bbox("nothing here").is_none());
        assert_eq!(parse_bbox("x (1,2)-(3,4)"), Some(BoundingBox { x0: 1, y0: 2, x1: 3, y1: 4 }));
    }

    #[test]
    fn scene_validation() {
        let img = ImageBuffer::filled(2, 2, 1, 0).unwrap();
        assert!(SyntheticScene::new(img.clone(), SaliencyMap::zeros(3, 2), 0.5).is_err());
        assert!(SyntheticScene::new(img, SaliencyMap::zeros(2, 2), 1.0).is_err());
    }
}
