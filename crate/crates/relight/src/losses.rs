//! The five training objectives and their weighted total.
//!
//! All L1 terms are normalized to means (masked-pixel mean for image losses,
//! element mean for code/feature losses) so the loss weights behave the same
//! at any resolution.

use crate::backbone::{BoundParams, Tape, Tensor, Var};
use crate::codec::DecodedVars;
use crate::error::{Error, Result};
use crate::imaging::{split, PortraitImage, SegMask};
use crate::model::{image_to_tensor, mask_to_tensor3, Model};
use crate::renderer::RenderMode;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f32,
    pub lambda_f: f32,
    pub lambda_c: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 0.5,
            lambda_f: 0.1,
            lambda_c: 0.25,
        }
    }
}

/// Which optional objectives are active. Augmented relighting and lighting
/// consistency require the three-way representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub auglight: bool,
    pub feat: bool,
    pub cons: bool,
}

impl LossFlags {
    pub fn for_model(model: &Model, feat: bool, cons: bool) -> LossFlags {
        let ot3 = model.cfg.ot3 && model.cfg.render_mode == RenderMode::Mnr;
        LossFlags {
            auglight: ot3,
            feat,
            cons: cons && ot3,
        }
    }
}

/// One (source x, target y) training example with every ground truth the
/// objectives need, already in tensor form.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub src_img: Tensor<f32>,
    pub src_fg: Tensor<f32>,
    pub src_bg: Tensor<f32>,
    pub src_mask3: Tensor<f32>,
    pub src_mask_count: f64,
    pub tgt_fg: Tensor<f32>,
    pub tgt_bg: Tensor<f32>,
    /// I^0_{x,y}: subject of x under y's illumination.
    pub gt_relit: Tensor<f32>,
    /// I^{+90}_{x,y} and I^{-90}_{x,y}.
    pub gt_p90: Tensor<f32>,
    pub gt_m90: Tensor<f32>,
    /// Foreground/background splits of I^{+90}_y and I^{-90}_y.
    pub rot_p90_fg: Tensor<f32>,
    pub rot_p90_bg: Tensor<f32>,
    pub rot_m90_fg: Tensor<f32>,
    pub rot_m90_bg: Tensor<f32>,
}

impl PairSample {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        src: (&PortraitImage, &SegMask),
        tgt: (&PortraitImage, &SegMask),
        gt_relit: &PortraitImage,
        gt_p90: &PortraitImage,
        gt_m90: &PortraitImage,
        rot_p90: (&PortraitImage, &SegMask),
        rot_m90: (&PortraitImage, &SegMask),
    ) -> Result<PairSample> {
        let count = src.1.foreground_count();
        if count == 0 {
            return Err(Error::config("source mask is empty"));
        }
        let (src_fg, src_bg) = split(src.0, src.1)?;
        let (tgt_fg, tgt_bg) = split(tgt.0, tgt.1)?;
        let (rp_fg, rp_bg) = split(rot_p90.0, rot_p90.1)?;
        let (rm_fg, rm_bg) = split(rot_m90.0, rot_m90.1)?;
        Ok(PairSample {
            src_img: image_to_tensor(src.0),
            src_fg: image_to_tensor(&src_fg),
            src_bg: image_to_tensor(&src_bg),
            src_mask3: mask_to_tensor3(src.1),
            src_mask_count: count as f64,
            tgt_fg: image_to_tensor(&tgt_fg),
            tgt_bg: image_to_tensor(&tgt_bg),
            gt_relit: image_to_tensor(gt_relit),
            gt_p90: image_to_tensor(gt_p90),
            gt_m90: image_to_tensor(gt_m90),
            rot_p90_fg: image_to_tensor(&rp_fg),
            rot_p90_bg: image_to_tensor(&rp_bg),
            rot_m90_fg: image_to_tensor(&rm_fg),
            rot_m90_bg: image_to_tensor(&rm_bg),
        })
    }
}

/// All loss terms of one pair as tape vars. Disabled terms are constant
/// zeros.
pub struct LossTerms {
    pub recon: Var,
    pub relight: Var,
    pub auglight: Var,
    pub feat: Var,
    pub cons: Var,
    pub cons_components: Option<[Var; 5]>,
    pub total: Var,
}

/// Plain values extracted from [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub recon: f32,
    pub relight: f32,
    pub auglight: f32,
    pub feat: f32,
    pub cons: f32,
    pub total: f32,
}

impl LossValues {
    pub fn from_terms(tape: &Tape<f32>, terms: &LossTerms) -> LossValues {
        LossValues {
            recon: tape.value(terms.recon).item(),
            relight: tape.value(terms.relight).item(),
            auglight: tape.value(terms.auglight).item(),
            feat: tape.value(terms.feat).item(),
            cons: tape.value(terms.cons).item(),
            total: tape.value(terms.total).item(),
        }
    }

    pub fn add(&mut self, other: &LossValues) {
        self.recon += other.recon;
        self.relight += other.relight;
        self.auglight += other.auglight;
        self.feat += other.feat;
        self.cons += other.cons;
        self.total += other.total;
    }

    pub fn scale(&mut self, k: f32) {
        self.recon *= k;
        self.relight *= k;
        self.auglight *= k;
        self.feat *= k;
        self.cons *= k;
        self.total *= k;
    }

    pub fn all_finite(&self) -> bool {
        [
            self.recon,
            self.relight,
            self.auglight,
            self.feat,
            self.cons,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Masked L1 between a rendered var and a ground-truth tensor:
/// `sum |M (*) (a - b)| / (3 * masked pixel count)`.
pub fn masked_l1_t(
    tape: &mut Tape<f32>,
    rendered: Var,
    gt: &Tensor<f32>,
    mask3: &Tensor<f32>,
    mask_count: f64,
) -> Var {
    assert!(mask_count > 0.0, "masked_l1 with empty mask");
    let gt_v = tape.leaf(gt.clone());
    let m_v = tape.leaf(mask3.clone());
    let diff = tape.sub(rendered, gt_v);
    let ad = tape.abs(diff);
    let masked = tape.mul(ad, m_v);
    let s = tape.sum_all(masked);
    tape.scale(s, (1.0 / (3.0 * mask_count)) as f32)
}

/// Plain-tensor masked L1 with the same normalization, for evaluation.
pub fn masked_l1(a: &PortraitImage, b: &PortraitImage, mask: &SegMask) -> Result<f64> {
    if a.width() != b.width()
        || a.height() != b.height()
        || a.width() != mask.width()
        || a.height() != mask.height()
    {
        return Err(Error::shape("masked_l1 dimension mismatch"));
    }
    let count = mask.data().iter().map(|&m| m as f64).sum::<f64>();
    if count == 0.0 {
        return Err(Error::config("masked_l1 with empty mask"));
    }
    let hw = a.width() * a.height();
    let mut acc = 0.0f64;
    for c in 0..3 {
        for i in 0..hw {
            acc += (mask.data()[i] * (a.planes()[c * hw + i] - b.planes()[c * hw + i]).abs()) as f64;
        }
    }
    Ok(acc / (3.0 * count))
}

/// The five latent-lighting overlap terms: given the anchors of scene y and
/// the anchors decoded from its +/-90-rotated counterparts, rotation must
/// shift the codes column-wise.
pub fn cons_terms(
    tape: &mut Tape<f32>,
    of_y: &crate::codec::Ot3Vars,
    of_p90: &crate::codec::Ot3Vars,
    of_m90: &crate::codec::Ot3Vars,
) -> [Var; 5] {
    [
        tape.l1_mean(of_y.p90, of_p90.zero),
        tape.l1_mean(of_y.zero, of_p90.m90),
        tape.l1_mean(of_y.zero, of_m90.p90),
        tape.l1_mean(of_y.m90, of_m90.zero),
        tape.l1_mean(of_m90.m90, of_p90.p90),
    ]
}

/// Build the complete loss graph for one pair. Gradients flow through every
/// render and re-encoding path; nothing is detached.
pub fn pair_losses(
    model: &Model,
    tape: &mut Tape<f32>,
    bp: &BoundParams,
    sample: &PairSample,
    weights: &LossWeights,
    flags: &LossFlags,
    rng: &mut ChaCha8Rng,
) -> LossTerms {
    let zero = tape.leaf(Tensor::scalar(0.0));

    // Subject feature of the source.
    let src_fg = tape.leaf(sample.src_fg.clone());
    let s_x = model.encode_subject_t(tape, bp, src_fg);

    // Illumination features of source and target.
    let sfg = tape.leaf(sample.src_fg.clone());
    let sbg = tape.leaf(sample.src_bg.clone());
    let i_x = model.encode_illum_t(tape, bp, sfg, sbg);
    let tfg = tape.leaf(sample.tgt_fg.clone());
    let tbg = tape.leaf(sample.tgt_bg.clone());
    let i_y = model.encode_illum_t(tape, bp, tfg, tbg);

    let is_mnr = model.cfg.render_mode == RenderMode::Mnr;
    let dec_x = is_mnr.then(|| model.decode_t(tape, bp, i_x));
    let dec_y = is_mnr.then(|| model.decode_t(tape, bp, i_y));

    let light_x0 = dec_x.as_ref().map(|d| d.zero()).unwrap_or(i_x);
    let light_y0 = dec_y.as_ref().map(|d| d.zero()).unwrap_or(i_y);

    // Image reconstruction: render the source under its own lighting.
    let recon_img = model.render_t(tape, bp, light_x0, s_x);
    let recon = masked_l1_t(tape, recon_img, &sample.src_img, &sample.src_mask3, sample.src_mask_count);

    // Main relighting: render the source under the target's lighting.
    let relit_img = model.render_t(tape, bp, light_y0, s_x);
    let relight = masked_l1_t(tape, relit_img, &sample.gt_relit, &sample.src_mask3, sample.src_mask_count);

    // Augmented relighting from the two extra anchors.
    let auglight = if flags.auglight {
        let anchors = dec_y.as_ref().and_then(|d| d.ot3()).expect("auglight needs OT3");
        let img_p = model.render_t(tape, bp, anchors.p90, s_x);
        let l_p = masked_l1_t(tape, img_p, &sample.gt_p90, &sample.src_mask3, sample.src_mask_count);
        let img_m = model.render_t(tape, bp, anchors.m90, s_x);
        let l_m = masked_l1_t(tape, img_m, &sample.gt_m90, &sample.src_mask3, sample.src_mask_count);
        tape.add(l_p, l_m)
    } else {
        zero
    };

    // Feature cycle consistency with a random illumination feature.
    let feat = if flags.feat {
        let i_rand: Vec<f32> = (0..crate::encoders::ILLUM_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as f32
            })
            .collect();
        let i_rand_t = Tensor::from_vec(&[crate::encoders::ILLUM_DIM], i_rand).unwrap();
        let i_rand_v = tape.leaf(i_rand_t.clone());
        let lighting = if is_mnr {
            model.decode_t(tape, bp, i_rand_v).zero()
        } else {
            i_rand_v
        };
        let rendered = model.render_t(tape, bp, lighting, s_x);
        let m_v = tape.leaf(sample.src_mask3.clone());
        let masked_render = tape.mul(rendered, m_v);
        let s_hat = model.encode_subject_t(tape, bp, masked_render);
        let f_hat = model.illum_enc.foreground_feature(tape, bp, masked_render);
        let s_term = tape.l1_mean(s_hat, s_x);
        let range = model.illum_enc.foreground_range();
        let i_f = tape.slice1d(i_rand_v, range.start, range.len());
        let f_term = tape.l1_mean(f_hat, i_f);
        tape.add(s_term, f_term)
    } else {
        zero
    };

    // Latent lighting consistency over the rotated counterparts of y.
    let (cons, cons_components) = if flags.cons {
        let anchors_y = dec_y.as_ref().and_then(|d| d.ot3()).expect("cons needs OT3");
        let pfg = tape.leaf(sample.rot_p90_fg.clone());
        let pbg = tape.leaf(sample.rot_p90_bg.clone());
        let i_p = model.encode_illum_t(tape, bp, pfg, pbg);
        let DecodedVars::Ot3(dec_p) = model.decode_t(tape, bp, i_p) else {
            unreachable!()
        };
        let mfg = tape.leaf(sample.rot_m90_fg.clone());
        let mbg = tape.leaf(sample.rot_m90_bg.clone());
        let i_m = model.encode_illum_t(tape, bp, mfg, mbg);
        let DecodedVars::Ot3(dec_m) = model.decode_t(tape, bp, i_m) else {
            unreachable!()
        };
        let terms = cons_terms(tape, &anchors_y, &dec_p, &dec_m);
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = tape.add(acc, *t);
        }
        (acc, Some(terms))
    } else {
        (zero, None)
    };

    // Weighted total.
    let mut total = tape.add(recon, relight);
    let a_w = tape.scale(auglight, weights.lambda_a);
    total = tape.add(total, a_w);
    let f_w = tape.scale(feat, weights.lambda_f);
    total = tape.add(total, f_w);
    let c_w = tape.scale(cons, weights.lambda_c);
    total = tape.add(total, c_w);

    LossTerms {
        recon,
        relight,
        auglight,
        feat,
        cons,
        cons_components,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_image(rng: &mut ChaCha8Rng, res: usize) -> PortraitImage {
        PortraitImage::from_planes(
            res,
            res,
            (0..3 * res * res).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn blob_mask(res: usize) -> SegMask {
        let mut m = SegMask::new(res, res);
        for y in res / 4..3 * res / 4 {
            for x in res / 4..3 * res / 4 {
                m.set(y, x, 1.0);
            }
        }
        m
    }

    fn tiny_model(mode: RenderMode, ot3: bool) -> Model {
        let cfg = ModelConfig {
            resolution: 16,
            subject_channels: 8,
            render_mode: mode,
            ot3,
            bg_split: true,
            trunk_hidden: 16,
            seed: 11,
        };
        Model::new(cfg).unwrap()
    }

    fn tiny_sample(seed: u64, res: usize) -> PairSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = blob_mask(res);
        let src = rand_image(&mut rng, res);
        let tgt = rand_image(&mut rng, res);
        let gt0 = rand_image(&mut rng, res);
        let gtp = rand_image(&mut rng, res);
        let gtm = rand_image(&mut rng, res);
        let rp = rand_image(&mut rng, res);
        let rm = rand_image(&mut rng, res);
        PairSample::new(
            (&src, &mask),
            (&tgt, &mask),
            &gt0,
            &gtp,
            &gtm,
            (&rp, &mask),
            (&rm, &mask),
        )
        .unwrap()
    }

    #[test]
    fn masked_l1_zero_for_identical_images_and_plain_mean_for_full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_image(&mut rng, 8);
        let b = rand_image(&mut rng, 8);
        let full = SegMask::from_data(8, 8, vec![1.0; 64]).unwrap();
        assert_eq!(masked_l1(&a, &a, &full).unwrap(), 0.0);
        // Full mask equals the plain mean absolute difference.
        let want: f64 = a
            .planes()
            .iter()
            .zip(b.planes().iter())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / (3.0 * 64.0);
        let got = masked_l1(&a, &b, &full).unwrap();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn masked_l1_matches_hand_computed_two_by_two_case() {
        // Channel 0 carries the example; other channels are identical across
        // a and b so they contribute nothing.
        let mut a = PortraitImage::new(2, 2);
        let mut b = PortraitImage::new(2, 2);
        let vals_a = [[0.0, 1.0], [0.0, 1.0]];
        let vals_b = [[1.0, 1.0], [0.0, 0.0]];
        for y in 0..2 {
            for x in 0..2 {
                a.set(0, y, x, vals_a[y][x]);
                b.set(0, y, x, vals_b[y][x]);
                for c in 1..3 {
                    a.set(c, y, x, 0.5);
                    b.set(c, y, x, 0.5);
                }
            }
        }
        let mask = SegMask::from_data(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        // Masked |diff| sums to 1 over 3 masked pixels x 3 channels.
        let got = masked_l1(&a, &b, &mask).unwrap();
        assert!((got - 1.0 / 9.0).abs() < 1e-9);
        assert!(masked_l1(&a, &b, &SegMask::new(2, 2)).is_err());
    }

    #[test]
    fn perfect_renderer_stub_gives_zero_image_losses() {
        // If the rendered output equals the ground truth, the loss formula
        // must yield exactly zero.
        let sample = tiny_sample(3, 16);
        let mut tape = Tape::new();
        let rendered = tape.leaf(sample.gt_relit.clone());
        let l = masked_l1_t(
            &mut tape,
            rendered,
            &sample.gt_relit,
            &sample.src_mask3,
            sample.src_mask_count,
        );
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn constant_encoders_with_equal_heads_give_zero_consistency() {
        // Scene-independent codes with identical heads: every overlap term
        // compares a code with itself.
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let code = Tensor::from_vec(&[24], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c = tape.leaf(code);
        let anchors = crate::codec::Ot3Vars { p90: c, zero: c, m90: c };
        let terms = cons_terms(&mut tape, &anchors, &anchors, &anchors);
        assert_eq!(terms.len(), 5);
        for t in terms {
            assert_eq!(tape.value(t).item(), 0.0);
        }
    }

    #[test]
    fn fresh_model_losses_are_finite_positive_and_weighted_correctly() {
        let model = tiny_model(RenderMode::Mnr, true);
        let sample = tiny_sample(7, 16);
        let weights = LossWeights::default();
        let flags = LossFlags::for_model(&model, true, true);
        assert!(flags.auglight && flags.feat && flags.cons);

        let mut tape = Tape::new();
        let bp = model.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let terms = pair_losses(&model, &mut tape, &bp, &sample, &weights, &flags, &mut rng);
        let v = LossValues::from_terms(&tape, &terms);
        assert!(v.all_finite());
        assert!(v.recon > 0.0 && v.relight > 0.0 && v.auglight > 0.0 && v.feat > 0.0 && v.cons > 0.0);

        // Total equals the hand-weighted sum of the parts.
        let want = v.recon + v.relight + 0.5 * v.auglight + 0.1 * v.feat + 0.25 * v.cons;
        assert!((v.total - want).abs() < 1e-6, "{} vs {want}", v.total);

        // Five consistency components, all nonnegative.
        let comps = terms.cons_components.unwrap();
        let sum: f32 = comps.iter().map(|t| tape.value(*t).item()).sum();
        assert!((sum - v.cons).abs() < 1e-6);
        for t in comps {
            assert!(tape.value(t).item() >= 0.0);
        }
    }

    #[test]
    fn zero_weights_leave_only_recon_plus_relight() {
        let model = tiny_model(RenderMode::Mnr, true);
        let sample = tiny_sample(8, 16);
        let weights = LossWeights {
            lambda_a: 0.0,
            lambda_f: 0.0,
            lambda_c: 0.0,
        };
        let flags = LossFlags::for_model(&model, true, true);
        let mut tape = Tape::new();
        let bp = model.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let terms = pair_losses(&model, &mut tape, &bp, &sample, &weights, &flags, &mut rng);
        let v = LossValues::from_terms(&tape, &terms);
        assert!((v.total - (v.recon + v.relight)).abs() < 1e-6);
    }

    #[test]
    fn disabled_flags_zero_their_terms() {
        let model = tiny_model(RenderMode::Mnr, false); // w/o OT3
        let sample = tiny_sample(12, 16);
        let flags = LossFlags::for_model(&model, false, true);
        assert!(!flags.auglight && !flags.feat && !flags.cons);
        let mut tape = Tape::new();
        let bp = model.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let terms = pair_losses(
            &model,
            &mut tape,
            &bp,
            &sample,
            &LossWeights::default(),
            &flags,
            &mut rng,
        );
        let v = LossValues::from_terms(&tape, &terms);
        assert_eq!(v.auglight, 0.0);
        assert_eq!(v.feat, 0.0);
        assert_eq!(v.cons, 0.0);
        assert!(v.recon > 0.0 && v.relight > 0.0);
    }

    #[test]
    fn feat_loss_is_deterministic_per_seed() {
        let model = tiny_model(RenderMode::Mnr, true);
        let sample = tiny_sample(20, 16);
        let run = |seed: u64| -> f32 {
            let mut tape = Tape::new();
            let bp = model.params.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let terms = pair_losses(
                &model,
                &mut tape,
                &bp,
                &sample,
                &LossWeights::default(),
                &LossFlags::for_model(&model, true, false),
                &mut rng,
            );
            LossValues::from_terms(&tape, &terms).feat
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn concat_and_mul_modes_train_without_a_decoder() {
        for mode in [RenderMode::Concat, RenderMode::Mul] {
            let model = tiny_model(mode, false);
            let sample = tiny_sample(30, 16);
            let flags = LossFlags::for_model(&model, true, true);
            assert!(!flags.auglight && !flags.cons, "no OT3 terms for {mode}");
            let mut tape = Tape::new();
            let bp = model.params.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let terms = pair_losses(
                &model,
                &mut tape,
                &bp,
                &sample,
                &LossWeights::default(),
                &flags,
                &mut rng,
            );
            let v = LossValues::from_terms(&tape, &terms);
            assert!(v.all_finite());
            assert!(v.recon > 0.0 && v.relight > 0.0 && v.feat > 0.0);
            // Gradients exist for every parameter after backward.
            let grads = tape.backward(terms.total);
            let mut any = 0usize;
            for var in bp.iter() {
                if grads.get(var).is_some() {
                    any += 1;
                }
            }
            assert!(any > 0);
        }
    }

    #[test]
    fn loss_gradients_pass_grad_check_on_a_tiny_model() {
        // Differentiate the full objective w.r.t. a small lighting code and
        // subject feature through render + masked L1.
        use crate::backbone::grad_check;
        let mut ps64 = crate::backbone::ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let renderer = crate::renderer::Renderer::new(&mut ps64, &mut rng, RenderMode::Mnr, 8);
        let mut drng = ChaCha8Rng::seed_from_u64(41);
        let code = Tensor::from_vec(
            &[crate::codec::code_dim(8)],
            (0..crate::codec::code_dim(8)).map(|_| drng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let s = Tensor::from_vec(&[8, 2, 2], (0..32).map(|_| drng.random_range(-0.5..0.5)).collect()).unwrap();
        let gt = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| drng.random_range(0.0..1.0)).collect()).unwrap();
        let mask: Tensor<f64> =
            Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| ((i / 3) % 2) as f64).collect()).unwrap();
        let count = mask.data().iter().sum::<f64>() / 3.0;
        let rep = grad_check(
            |tape, vars| {
                let bp = ps64.bind(tape);
                let y = renderer.render(tape, &bp, vars[0], vars[1]);
                let gt_v = tape.leaf(gt.clone());
                let m_v = tape.leaf(mask.clone());
                let diff = tape.sub(y, gt_v);
                let ad = tape.abs(diff);
                let masked = tape.mul(ad, m_v);
                let sum = tape.sum_all(masked);
                tape.scale(sum, 1.0 / (3.0 * count))
            },
            &[code, s],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
