//! The comparison models: a vanilla classifier plus the three standard
//! segmentation-assisted variants (input concatenation, multi-task learning
//! and ROI cropping), and the standalone segmentation model they share.

use serde::{Deserialize, Serialize};

use crate::autograd::{concat_last, resize_bilinear_array, seed_stream, Arr, ParamSet, Var};
use crate::backbones::{BackboneConfig, ClassifierHead, DiagBackbone, SegFeaturePyramid, UNet};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::model::{build_ablation_variant, ForwardOutput, SeaTrans};
use crate::train::{soft_dice_loss, DiagnosisModel, Prediction};

pub const DEFAULT_ROI_MARGIN: f64 = 0.2;
pub const MASK_BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Vanilla,
    Cat,
    Multi,
    Roi,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(BaselineKind::Vanilla),
            "cat" => Some(BaselineKind::Cat),
            "multi" => Some(BaselineKind::Multi),
            "roi" => Some(BaselineKind::Roi),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::Vanilla => "vanilla",
            BaselineKind::Cat => "cat",
            BaselineKind::Multi => "multi",
            BaselineKind::Roi => "roi",
        }
    }
}

/// Diagnosis backbone and head only, no segmentation input. Structurally the
/// all-flags-off rung of the ablation ladder.
pub fn vanilla_model(backbone: BackboneConfig, seed: u64) -> Result<SeaTrans> {
    let mut config = crate::model::SeaTransConfig::new(backbone, seed);
    // no interactions exist, so no stage is nominated for them
    config.interaction_layers = Vec::new();
    build_ablation_variant((false, false, false), &config)
}

/// Standalone segmentation network; its checkpoints are what the assisted
/// models load and freeze.
pub struct SegModel {
    pub params: ParamSet,
    pub backbone: BackboneConfig,
    unet: UNet,
}

impl SegModel {
    pub fn new(backbone: BackboneConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        let mut params = ParamSet::new();
        let mut rng = seed_stream(seed, "seg");
        let unet = UNet::init(&mut params, "seg", &backbone, &mut rng);
        Ok(SegModel {
            params,
            backbone,
            unet,
        })
    }

    pub fn forward(&self, image: &Arr) -> Result<(FeatureMap, SegFeaturePyramid)> {
        let fm = FeatureMap::new(Var::constant(image.clone()), 1);
        self.unet.forward(&fm)
    }

    /// Sigmoid mask probabilities at input resolution.
    pub fn mask_probs(&self, image: &Arr) -> Result<Arr> {
        let (logits, _) = self.forward(image)?;
        Ok(logits.data.sigmoid().value().clone())
    }
}

fn check_image(backbone: &BackboneConfig, image: &Arr) -> Result<()> {
    let s = backbone.input_size;
    if image.shape() != [s, s, 3] {
        return Err(Error::DimMismatch {
            context: "baseline input".into(),
            expected: format!("{s}x{s}x3"),
            got: format!("{:?}", image.shape()),
        });
    }
    Ok(())
}

fn run_diag_trunk(
    diag: &DiagBackbone,
    head: &ClassifierHead,
    input: FeatureMap,
) -> ForwardOutput {
    let mut traces = Vec::new();
    let mut f = diag.stem_forward(&input);
    f.data.retain_grad();
    traces.push(("stem".to_string(), f.clone()));
    for (i, stage) in diag.stages.iter().enumerate() {
        let t = stage.block.forward(&f.data);
        f = FeatureMap::new(t.max_pool2(), f.rate * 2);
        f.data.retain_grad();
        traces.push((format!("stage{}", i + 1), f.clone()));
    }
    let logit = head.forward(&f);
    let prob = logit.sigmoid();
    ForwardOutput {
        logit,
        prob,
        mask_logits: None,
        traces,
    }
}

/// Estimated masks concatenated with the raw image as extra input channels.
pub struct CatModel {
    pub params: ParamSet,
    pub backbone: BackboneConfig,
    pub helper: SegModel,
    diag: DiagBackbone,
    head: ClassifierHead,
}

impl CatModel {
    pub fn new(backbone: BackboneConfig, seed: u64, helper: SegModel) -> Result<Self> {
        backbone.validate()?;
        if helper.backbone.input_size != backbone.input_size
            || helper.backbone.seg_classes != backbone.seg_classes
        {
            return Err(Error::Config(
                "helper segmentation model does not match the diagnosis configuration".into(),
            ));
        }
        let mut params = ParamSet::new();
        let mut diag_rng = seed_stream(seed, "diag");
        let diag = DiagBackbone::init(
            &mut params,
            "diag",
            &backbone,
            3 + backbone.seg_classes,
            &mut diag_rng,
        );
        let mut head_rng = seed_stream(seed, "head");
        let head = ClassifierHead::init(
            &mut params,
            "head",
            *backbone.diag_stage_widths.last().unwrap(),
            &mut head_rng,
        );
        Ok(CatModel {
            params,
            backbone,
            helper,
            diag,
            head,
        })
    }

    /// Forward with caller-supplied mask probabilities (must be at input
    /// resolution with K channels).
    pub fn forward_with_mask(&self, image: &Arr, mask_probs: &Arr) -> Result<ForwardOutput> {
        check_image(&self.backbone, image)?;
        let s = self.backbone.input_size;
        let k = self.backbone.seg_classes;
        if mask_probs.shape() != [s, s, k] {
            return Err(Error::DimMismatch {
                context: "concatenated mask".into(),
                expected: format!("{s}x{s}x{k}"),
                got: format!("{:?}", mask_probs.shape()),
            });
        }
        let joined = concat_last(&[
            Var::constant(image.clone()),
            Var::constant(mask_probs.clone()),
        ]);
        Ok(run_diag_trunk(
            &self.diag,
            &self.head,
            FeatureMap::new(joined, 1),
        ))
    }

    pub fn forward(&self, image: &Arr) -> Result<ForwardOutput> {
        let mask = self.helper.mask_probs(image)?;
        self.forward_with_mask(image, &mask)
    }
}

/// One shared encoder with a mask decoder and a pooled diagnosis head.
pub struct MultiModel {
    pub params: ParamSet,
    pub backbone: BackboneConfig,
    unet: UNet,
    head: ClassifierHead,
}

impl MultiModel {
    pub fn new(backbone: BackboneConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        let mut params = ParamSet::new();
        let mut seg_rng = seed_stream(seed, "seg");
        let unet = UNet::init(&mut params, "seg", &backbone, &mut seg_rng);
        let bottleneck_width = backbone.unet_base << backbone.unet_depth;
        let mut head_rng = seed_stream(seed, "head");
        let head = ClassifierHead::init(&mut params, "head", bottleneck_width, &mut head_rng);
        Ok(MultiModel {
            params,
            backbone,
            unet,
            head,
        })
    }

    pub fn forward(&self, image: &Arr) -> Result<ForwardOutput> {
        check_image(&self.backbone, image)?;
        let fm = FeatureMap::new(Var::constant(image.clone()), 1);
        let (mask_logits, pyramid) = self.unet.forward(&fm)?;
        let bottleneck = pyramid.levels.last().expect("pyramid non-empty").clone();
        bottleneck.data.retain_grad();
        let logit = self.head.forward(&bottleneck);
        let prob = logit.sigmoid();
        Ok(ForwardOutput {
            logit,
            prob,
            mask_logits: Some(mask_logits),
            traces: vec![("bottleneck".to_string(), bottleneck)],
        })
    }
}

/// Crop the region of interest implied by the estimated mask, then classify.
pub struct RoiModel {
    pub params: ParamSet,
    pub backbone: BackboneConfig,
    pub helper: SegModel,
    pub margin: f64,
    diag: DiagBackbone,
    head: ClassifierHead,
}

impl RoiModel {
    pub fn new(backbone: BackboneConfig, seed: u64, helper: SegModel, margin: f64) -> Result<Self> {
        backbone.validate()?;
        let mut params = ParamSet::new();
        let mut diag_rng = seed_stream(seed, "diag");
        let diag = DiagBackbone::init(&mut params, "diag", &backbone, 3, &mut diag_rng);
        let mut head_rng = seed_stream(seed, "head");
        let head = ClassifierHead::init(
            &mut params,
            "head",
            *backbone.diag_stage_widths.last().unwrap(),
            &mut head_rng,
        );
        Ok(RoiModel {
            params,
            backbone,
            helper,
            margin,
            diag,
            head,
        })
    }

    pub fn forward(&self, image: &Arr) -> Result<ForwardOutput> {
        check_image(&self.backbone, image)?;
        let mask = self.helper.mask_probs(image)?;
        let cropped = base_roi_crop(image, &mask, self.margin);
        Ok(run_diag_trunk(
            &self.diag,
            &self.head,
            FeatureMap::new(Var::constant(cropped), 1),
        ))
    }
}

/// Binarize the mask (union over classes at 0.5), take the tight bounding
/// box of positive pixels, expand it by `margin` of its size per side, clamp
/// to the image, crop and resize back to the input size. An empty mask
/// returns the full image.
pub fn base_roi_crop(image: &Arr, mask_probs: &Arr, margin: f64) -> Arr {
    let shape = image.shape();
    let (h, w) = (shape[0], shape[1]);
    let mshape = mask_probs.shape();
    let k = mshape[2];
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..mshape[0] {
        for x in 0..mshape[1] {
            let positive = (0..k).any(|c| mask_probs[[y, x, c]] >= MASK_BINARIZE_THRESHOLD);
            if positive {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return image.clone();
    }
    let bh = (y1 - y0 + 1) as f64;
    let bw = (x1 - x0 + 1) as f64;
    let pad_y = (margin * bh).round() as usize;
    let pad_x = (margin * bw).round() as usize;
    let cy0 = y0.saturating_sub(pad_y);
    let cx0 = x0.saturating_sub(pad_x);
    let cy1 = (y1 + pad_y).min(h - 1);
    let cx1 = (x1 + pad_x).min(w - 1);
    let crop = image
        .slice(ndarray::s![cy0..=cy1, cx0..=cx1, ..])
        .to_owned()
        .into_dyn();
    if crop.shape()[0] == h && crop.shape()[1] == w {
        return crop;
    }
    resize_bilinear_array(&crop, h, w)
}

// ---------------------------------------------------------------------------
// Trainer integration
// ---------------------------------------------------------------------------

fn classification_loss(
    forwards: Vec<(ForwardOutput, &crate::data::Sample)>,
    lambda: f64,
    with_seg_loss: bool,
) -> (Var, Vec<f64>) {
    let mut prob_vars = Vec::with_capacity(forwards.len());
    let mut labels = Vec::with_capacity(forwards.len());
    let mut seg_terms = Vec::new();
    for (out, sample) in forwards {
        labels.push(sample.label as f64);
        if with_seg_loss {
            if let (Some(mask_logits), Some(gt)) = (&out.mask_logits, &sample.mask) {
                seg_terms.push(soft_dice_loss(mask_logits, gt));
            }
        }
        prob_vars.push(out.prob);
    }
    let probs_var = crate::autograd::stack_scalars(&prob_vars);
    let probs: Vec<f64> = probs_var.value().iter().cloned().collect();
    let mut loss = crate::autograd::bce_mean(&probs_var, &labels);
    if !seg_terms.is_empty() {
        let seg_loss = crate::autograd::stack_scalars(&seg_terms).mean_all();
        loss = loss.add(&seg_loss.scale(lambda));
    }
    (loss, probs)
}

impl DiagnosisModel for CatModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn loss_and_probs(
        &self,
        batch: &[&crate::data::Sample],
        lambda: f64,
    ) -> Result<(Var, Vec<f64>)> {
        let mut forwards = Vec::with_capacity(batch.len());
        for &sample in batch {
            forwards.push((self.forward(&sample.image)?, sample));
        }
        Ok(classification_loss(forwards, lambda, false))
    }

    fn predict(&self, sample: &crate::data::Sample) -> Result<Prediction> {
        let mask = self.helper.mask_probs(&sample.image)?;
        let out = self.forward_with_mask(&sample.image, &mask)?;
        Ok(Prediction {
            prob: out.prob.scalar(),
            mask_probs: Some(mask),
        })
    }
}

impl DiagnosisModel for MultiModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn loss_and_probs(
        &self,
        batch: &[&crate::data::Sample],
        lambda: f64,
    ) -> Result<(Var, Vec<f64>)> {
        let mut forwards = Vec::with_capacity(batch.len());
        for &sample in batch {
            forwards.push((self.forward(&sample.image)?, sample));
        }
        Ok(classification_loss(forwards, lambda, true))
    }

    fn predict(&self, sample: &crate::data::Sample) -> Result<Prediction> {
        let out = self.forward(&sample.image)?;
        let mask_probs = out.mask_logits.map(|m| m.data.sigmoid().value().clone());
        Ok(Prediction {
            prob: out.prob.scalar(),
            mask_probs,
        })
    }

    // the shared encoder trains jointly; the freeze flag does not apply
    fn set_frozen(&self, _frozen: bool) {}
}

impl DiagnosisModel for RoiModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn loss_and_probs(
        &self,
        batch: &[&crate::data::Sample],
        lambda: f64,
    ) -> Result<(Var, Vec<f64>)> {
        let mut forwards = Vec::with_capacity(batch.len());
        for &sample in batch {
            forwards.push((self.forward(&sample.image)?, sample));
        }
        Ok(classification_loss(forwards, lambda, false))
    }

    fn predict(&self, sample: &crate::data::Sample) -> Result<Prediction> {
        let out = self.forward(&sample.image)?;
        Ok(Prediction {
            prob: out.prob.scalar(),
            mask_probs: None,
        })
    }
}
