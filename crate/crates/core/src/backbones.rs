//! Segmentation and diagnosis backbones.
//!
//! The segmentation network is a UNet-style encoder-decoder that emits mask
//! logits at input resolution plus a multi-scale pyramid of decoder features.
//! The diagnosis network is a reduced residual classifier: a stride-4 stem
//! followed by stages that each run a channel-doubling residual block and a
//! 2x pooling step, so every stage maps `(H, W, C)` to `(H/2, W/2, 2C)`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_last, glorot_normal, zeros, Param, ParamSet, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;

/// Ordered multi-scale segmentation features, largest spatial scale first;
/// consecutive levels differ by exactly a factor-2 scale.
pub struct SegFeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl SegFeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Config(format!(
                "pyramid needs at least 2 levels, got {}",
                levels.len()
            )));
        }
        for pair in levels.windows(2) {
            if pair[1].rate != pair[0].rate * 2 {
                return Err(Error::Config(format!(
                    "pyramid rates must double per level, got {} then {}",
                    pair[0].rate, pair[1].rate
                )));
            }
        }
        Ok(SegFeaturePyramid { levels })
    }

    /// Index of the level whose downsample rate matches exactly.
    pub fn level_at_rate(&self, rate: usize) -> Result<usize> {
        self.levels
            .iter()
            .position(|f| f.rate == rate)
            .ok_or_else(|| Error::ScaleAlignment {
                rate,
                available: self.levels.iter().map(|f| f.rate).collect(),
            })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Architecture hyperparameters shared by the segmentation and diagnosis
/// networks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Square input resolution.
    pub input_size: usize,
    /// UNet stem width; level `l` is `base * 2^l` channels.
    pub unet_base: usize,
    /// Pyramid depth N; the input must divide by `2^N`.
    pub unet_depth: usize,
    /// Segmentation classes K (sigmoid channels).
    pub seg_classes: usize,
    /// Diagnosis stem output width (the stem downsamples by 4).
    pub diag_stem_width: usize,
    /// Diagnosis stage output widths; each must double its input width.
    pub diag_stage_widths: Vec<usize>,
}

impl BackboneConfig {
    /// Desk-scale configuration for fast end-to-end runs at 32x32.
    pub fn miniature() -> Self {
        BackboneConfig {
            input_size: 32,
            unet_base: 8,
            unet_depth: 4,
            seg_classes: 2,
            diag_stem_width: 8,
            diag_stage_widths: vec![16, 32, 64],
        }
    }

    /// Default configuration at the 256x256 input resolution.
    pub fn standard() -> Self {
        BackboneConfig {
            input_size: 256,
            unet_base: 16,
            unet_depth: 4,
            seg_classes: 2,
            diag_stem_width: 16,
            diag_stage_widths: vec![32, 64, 128],
        }
    }

    /// Full-width preset mirroring the published setup (UNet segmentation,
    /// wide residual diagnosis backbone, 256x256 inputs).
    pub fn paper_scale() -> Self {
        BackboneConfig {
            input_size: 256,
            unet_base: 16,
            unet_depth: 4,
            seg_classes: 2,
            diag_stem_width: 64,
            diag_stage_widths: vec![128, 256, 512, 1024],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet_depth < 2 {
            return Err(Error::Config("unet_depth must be at least 2".into()));
        }
        let div = 1usize << self.unet_depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input_size {} must divide by 2^{} = {div}",
                self.input_size, self.unet_depth
            )));
        }
        if self.unet_base == 0 || self.diag_stem_width == 0 || self.seg_classes == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.diag_stage_widths.is_empty() {
            return Err(Error::Config("need at least one diagnosis stage".into()));
        }
        let mut prev = self.diag_stem_width;
        for (i, &w) in self.diag_stage_widths.iter().enumerate() {
            if w != 2 * prev {
                return Err(Error::Config(format!(
                    "stage {} width {w} must double its input width {prev}",
                    i + 1
                )));
            }
            prev = w;
        }
        // The stem downsamples by 4 and each stage by 2.
        let total_rate = 4 << self.diag_stage_widths.len();
        if self.input_size % total_rate != 0 {
            return Err(Error::Config(format!(
                "input_size {} must divide by the total diagnosis stride {total_rate}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Downsample rate of `f_d^i` (1-based; index 1 is the stem output).
    pub fn diag_rate(&self, index: usize) -> usize {
        4 << (index - 1)
    }

    /// Number of diagnosis features `f_d^1 ..= f_d^{stages+1}`.
    pub fn num_diag_features(&self) -> usize {
        self.diag_stage_widths.len() + 1
    }
}

/// One convolution with bias.
pub struct ConvLayer {
    pub weight: Rc<Param>,
    pub bias: Rc<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        ConvLayer {
            weight: params.register(
                format!("{prefix}.w"),
                Param::new(glorot_normal(
                    rng,
                    &[k, k, cin, cout],
                    k * k * cin,
                    k * k * cout,
                )),
            ),
            bias: params.register(format!("{prefix}.b"), Param::new(zeros(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.conv2d(
            &Var::from_param(&self.weight),
            &Var::from_param(&self.bias),
            self.stride,
            self.pad,
        )
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
pub struct DoubleConv {
    c1: ConvLayer,
    c2: ConvLayer,
}

impl DoubleConv {
    fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        DoubleConv {
            c1: ConvLayer::init(params, &format!("{prefix}.c1"), 3, cin, cout, 1, 1, rng),
            c2: ConvLayer::init(params, &format!("{prefix}.c2"), 3, cout, cout, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Var) -> Var {
        self.c2.forward(&self.c1.forward(x).relu()).relu()
    }
}

/// UNet-style segmentation network.
pub struct UNet {
    pub depth: usize,
    stem: DoubleConv,
    down: Vec<DoubleConv>,
    up: Vec<DoubleConv>,
    head: DoubleConv,
    head_out: ConvLayer,
}

impl UNet {
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let b = cfg.unet_base;
        let n = cfg.unet_depth;
        let stem = DoubleConv::init(params, &format!("{prefix}.enc0"), 3, b, rng);
        let mut down = Vec::with_capacity(n);
        for l in 1..=n {
            down.push(DoubleConv::init(
                params,
                &format!("{prefix}.enc{l}"),
                b << (l - 1),
                b << l,
                rng,
            ));
        }
        // decoder levels N-1 .. 1, each consuming the upsampled deeper
        // feature concatenated with the same-rate encoder skip
        let mut up = Vec::new();
        let mut deeper = b << n;
        for l in (1..n).rev() {
            let skip = b << l;
            up.push(DoubleConv::init(
                params,
                &format!("{prefix}.dec{l}"),
                deeper + skip,
                skip,
                rng,
            ));
            deeper = skip;
        }
        let head = DoubleConv::init(params, &format!("{prefix}.head"), 2 * b + b, b, rng);
        let head_out = ConvLayer::init(
            params,
            &format!("{prefix}.mask"),
            1,
            b,
            cfg.seg_classes,
            1,
            0,
            rng,
        );
        UNet {
            depth: n,
            stem,
            down,
            up,
            head,
            head_out,
        }
    }

    /// Run the network. Returns mask logits at input resolution and the
    /// decoder feature pyramid (largest scale first, bottleneck last).
    pub fn forward(&self, image: &FeatureMap) -> Result<(FeatureMap, SegFeaturePyramid)> {
        let h = image.height();
        let w = image.width();
        let div = 1usize << self.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "unet input {h}x{w} must divide by 2^{} = {div}",
                self.depth
            )));
        }
        let mut skips = Vec::with_capacity(self.depth);
        let mut x = self.stem.forward(&image.data);
        skips.push(x.clone());
        for conv in &self.down {
            x = conv.forward(&x.max_pool2());
            skips.push(x.clone());
        }
        // x is now the bottleneck at rate 2^N
        let mut rate = div;
        let mut pyramid_rev = vec![FeatureMap::new(x.clone(), rate)];
        for (i, conv) in self.up.iter().enumerate() {
            let l = self.depth - 1 - i;
            let upsampled = x.upsample2_nearest();
            x = conv.forward(&concat_last(&[upsampled, skips[l].clone()]));
            rate /= 2;
            pyramid_rev.push(FeatureMap::new(x.clone(), rate));
        }
        let full = self.head.forward(&concat_last(&[
            x.upsample2_nearest(),
            skips[0].clone(),
        ]));
        let logits = self.head_out.forward(&full);
        pyramid_rev.reverse();
        Ok((
            FeatureMap::new(logits, 1),
            SegFeaturePyramid::new(pyramid_rev)?,
        ))
    }
}

/// Channel-doubling residual block: two 3x3 convolutions on the main path,
/// a 1x1 projection on the skip, ReLU after the join.
pub struct ResidualBlock {
    main1: ConvLayer,
    main2: ConvLayer,
    skip: ConvLayer,
}

impl ResidualBlock {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        ResidualBlock {
            main1: ConvLayer::init(params, &format!("{prefix}.m1"), 3, cin, cout, 1, 1, rng),
            main2: ConvLayer::init(params, &format!("{prefix}.m2"), 3, cout, cout, 1, 1, rng),
            skip: ConvLayer::init(params, &format!("{prefix}.skip"), 1, cin, cout, 1, 0, rng),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let main = self.main2.forward(&self.main1.forward(x).relu());
        main.add(&self.skip.forward(x)).relu()
    }
}

/// One diagnosis stage: residual block then 2x max pooling. The caller may
/// splice an interaction between the two.
pub struct DiagStage {
    pub block: ResidualBlock,
}

impl DiagStage {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        DiagStage {
            block: ResidualBlock::init(params, prefix, cin, cout, rng),
        }
    }
}

/// Residual block plus pooling: `(H, W, C) -> (H/2, W/2, 2C)`.
pub fn diag_stage_forward(f: &FeatureMap, stage: &DiagStage) -> Result<FeatureMap> {
    if f.height() % 2 != 0 || f.width() % 2 != 0 {
        return Err(Error::DimMismatch {
            context: "diag_stage_forward".into(),
            expected: "even spatial dims".into(),
            got: format!("{}x{}", f.height(), f.width()),
        });
    }
    let out = stage.block.forward(&f.data).max_pool2();
    Ok(FeatureMap::new(out, f.rate * 2))
}

/// Diagnosis trunk: stride-4 stem plus the configured stages.
pub struct DiagBackbone {
    stem1: ConvLayer,
    stem2: ConvLayer,
    pub stages: Vec<DiagStage>,
}

impl DiagBackbone {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &BackboneConfig,
        input_channels: usize,
        rng: &mut R,
    ) -> Self {
        let stem1 = ConvLayer::init(
            params,
            &format!("{prefix}.stem1"),
            3,
            input_channels,
            cfg.diag_stem_width,
            2,
            1,
            rng,
        );
        let stem2 = ConvLayer::init(
            params,
            &format!("{prefix}.stem2"),
            3,
            cfg.diag_stem_width,
            cfg.diag_stem_width,
            2,
            1,
            rng,
        );
        let mut stages = Vec::new();
        let mut cin = cfg.diag_stem_width;
        for (i, &w) in cfg.diag_stage_widths.iter().enumerate() {
            stages.push(DiagStage::init(
                params,
                &format!("{prefix}.stage{}", i + 1),
                cin,
                w,
                rng,
            ));
            cin = w;
        }
        DiagBackbone {
            stem1,
            stem2,
            stages,
        }
    }

    /// Stem only: image at rate 1 to `f_d^1` at rate 4.
    pub fn stem_forward(&self, image: &FeatureMap) -> FeatureMap {
        let x = self.stem2.forward(&self.stem1.forward(&image.data).relu()).relu();
        FeatureMap::new(x, image.rate * 4)
    }
}

/// Global average pool over space followed by a linear map to one logit.
pub struct ClassifierHead {
    pub weight: Rc<Param>,
    pub bias: Rc<Param>,
}

impl ClassifierHead {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            weight: params.register(
                format!("{prefix}.w"),
                Param::new(glorot_normal(rng, &[channels], channels, 1)),
            ),
            bias: params.register(format!("{prefix}.b"), Param::new(zeros(&[1]))),
        }
    }

    pub fn forward(&self, f: &FeatureMap) -> Var {
        f.data
            .global_avg_pool()
            .dot_vec(&Var::from_param(&self.weight))
            .add(&Var::from_param(&self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Arr;
    use crate::gradcheck::check_param_grads;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(
            Var::constant(Arr::from_shape_vec(IxDyn(&[h, w, c]), data).unwrap()),
            1,
        )
    }

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            input_size: 64,
            unet_base: 4,
            unet_depth: 4,
            seg_classes: 2,
            diag_stem_width: 4,
            diag_stage_widths: vec![8, 16],
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::miniature().validate().is_ok());
        assert!(BackboneConfig::standard().validate().is_ok());
        assert!(BackboneConfig::paper_scale().validate().is_ok());

        let mut bad = BackboneConfig::miniature();
        bad.input_size = 24; // not divisible by 2^4
        assert!(bad.validate().is_err());

        let mut bad = BackboneConfig::miniature();
        bad.diag_stage_widths = vec![16, 48];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unet_pyramid_scales_and_mask_resolution() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let unet = UNet::init(&mut params, "seg", &cfg, &mut rng);
        let image = random_map(&mut rng, 64, 64, 3);
        let (mask, pyramid) = unet.forward(&image).unwrap();
        assert_eq!(mask.value().shape(), &[64, 64, 2]);
        let sizes: Vec<(usize, usize, usize)> = pyramid
            .levels
            .iter()
            .map(|f| (f.height(), f.width(), f.rate))
            .collect();
        assert_eq!(
            sizes,
            vec![(32, 32, 2), (16, 16, 4), (8, 8, 8), (4, 4, 16)]
        );
        // channel ladder: 2B, 4B, 8B, bottleneck 16B
        let chans: Vec<usize> = pyramid.levels.iter().map(|f| f.channels()).collect();
        assert_eq!(chans, vec![8, 16, 32, 64]);
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let unet = UNet::init(&mut params, "seg", &cfg, &mut rng);
        let image = random_map(&mut rng, 40, 40, 3);
        assert!(unet.forward(&image).is_err());
    }

    #[test]
    fn unet_is_deterministic() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let unet = UNet::init(&mut params, "seg", &cfg, &mut rng);
        let image = random_map(&mut rng, 32, 32, 3);
        let (a, _) = unet.forward(&image).unwrap();
        let (b, _) = unet.forward(&image).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn diag_stage_shape_law() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let stage = DiagStage::init(&mut params, "s", 32, 64, &mut rng);
        let f = FeatureMap::new(
            Var::constant(Arr::zeros(IxDyn(&[64, 64, 32]))),
            2,
        );
        let out = diag_stage_forward(&f, &stage).unwrap();
        assert_eq!(out.value().shape(), &[32, 32, 64]);
        assert_eq!(out.rate, 4);

        let stage2 = DiagStage::init(&mut params, "s2", 16, 32, &mut rng);
        let f = FeatureMap::new(Var::constant(Arr::zeros(IxDyn(&[8, 8, 16]))), 4);
        let out = diag_stage_forward(&f, &stage2).unwrap();
        assert_eq!(out.value().shape(), &[4, 4, 32]);
    }

    #[test]
    fn diag_stage_rejects_odd_dims() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let stage = DiagStage::init(&mut params, "s", 4, 8, &mut rng);
        let f = FeatureMap::new(Var::constant(Arr::zeros(IxDyn(&[3, 4, 4]))), 1);
        assert!(diag_stage_forward(&f, &stage).is_err());
    }

    #[test]
    fn diag_stage_gradients() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let stage = DiagStage::init(&mut params, "s", 2, 4, &mut rng);
        let f = random_map(&mut rng, 4, 4, 2);
        let coeffs = Var::constant(Arr::from_shape_vec(
            IxDyn(&[2, 2, 4]),
            (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap());
        let named: Vec<(&str, &std::rc::Rc<Param>)> =
            params.iter().map(|(n, p)| (n, p)).collect();
        check_param_grads(
            &named,
            || {
                diag_stage_forward(&f, &stage)
                    .unwrap()
                    .data
                    .mul(&coeffs)
                    .sum_all()
            },
            1e-5,
            1e-3,
        );
    }

    #[test]
    fn classifier_head_constant_input() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let head = ClassifierHead::init(&mut params, "h", 3, &mut rng);
        head.weight
            .set_value(ndarray::arr1(&[0.5, -1.0, 2.0]).into_dyn());
        head.bias.set_value(ndarray::arr1(&[0.25]).into_dyn());
        // constant value v: logit = v * sum(w) + b
        let v = 1.75;
        let f = FeatureMap::new(Var::constant(Arr::from_elem(IxDyn(&[4, 4, 3]), v)), 8);
        let logit = head.forward(&f).scalar();
        assert_abs_diff_eq!(logit, v * 1.5 + 0.25, epsilon = 1e-12);
    }

    #[test]
    fn classifier_head_zero_weights_gives_bias() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let head = ClassifierHead::init(&mut params, "h", 4, &mut rng);
        head.weight.set_value(zeros(&[4]));
        head.bias.set_value(ndarray::arr1(&[-0.75]).into_dyn());
        let f = random_map(&mut rng, 6, 2, 4);
        assert_abs_diff_eq!(head.forward(&f).scalar(), -0.75, epsilon = 1e-12);
    }

    #[test]
    fn classifier_head_matches_hand_computation() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let head = ClassifierHead::init(&mut params, "h", 4, &mut rng);
        let f = random_map(&mut rng, 2, 2, 4);
        // hand-computed pool + dot
        let mut expected = head.bias.value()[[0]];
        for c in 0..4 {
            let mut mean = 0.0;
            for y in 0..2 {
                for x in 0..2 {
                    mean += f.value()[[y, x, c]];
                }
            }
            mean /= 4.0;
            expected += mean * head.weight.value()[[c]];
        }
        assert_abs_diff_eq!(head.forward(&f).scalar(), expected, epsilon = 1e-12);
    }

    #[test]
    fn pyramid_requires_doubling_rates() {
        let a = FeatureMap::new(Var::constant(Arr::zeros(IxDyn(&[8, 8, 2]))), 2);
        let b = FeatureMap::new(Var::constant(Arr::zeros(IxDyn(&[2, 2, 2]))), 8);
        assert!(SegFeaturePyramid::new(vec![a, b]).is_err());
    }

    #[test]
    fn pyramid_rate_lookup() {
        let a = FeatureMap::new(Var::constant(Arr::zeros(IxDyn(&[8, 8, 2]))), 2);
        let b = FeatureMap::new(Var::constant(Arr::zeros(IxDyn(&[4, 4, 2]))), 4);
        let p = SegFeaturePyramid::new(vec![a, b]).unwrap();
        assert_eq!(p.level_at_rate(4).unwrap(), 1);
        assert!(matches!(
            p.level_at_rate(16),
            Err(Error::ScaleAlignment { .. })
        ));
    }

    #[test]
    fn stem_downsamples_by_four() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let diag = DiagBackbone::init(&mut params, "diag", &cfg, 3, &mut rng);
        let image = random_map(&mut rng, 32, 32, 3);
        let f1 = diag.stem_forward(&image);
        assert_eq!(f1.value().shape(), &[8, 8, 4]);
        assert_eq!(f1.rate, 4);
    }
}
