//! Model composition: subject encoder + illumination encoders + lighting
//! decoder + neural render, behind one config. Forward pieces are generic
//! over the scalar type so the gradient harness can run the exact same
//! graphs in f64.

use crate::backbone::{BoundParams, ParamSet, Real, Tape, Tensor, Var};
use crate::codec::{interpolate, DecodedVars, InversionTarget, LightingDecoder, Ot3Codes};
use crate::encoders::{IllumEncoder, SubjectEncoder, ILLUM_DIM};
use crate::error::{Error, Result};
use crate::imaging::{split, PortraitImage, SegMask};
use crate::renderer::{RenderMode, Renderer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub subject_channels: usize,
    pub render_mode: RenderMode,
    /// Three anchor heads when true; a single 0-degree head otherwise.
    pub ot3: bool,
    /// Separate background/foreground illumination encoders when true.
    pub bg_split: bool,
    /// Width of the lighting decoder trunk.
    pub trunk_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(0)
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 64x64 images, 32 subject channels.
    pub fn desk(seed: u64) -> ModelConfig {
        ModelConfig {
            resolution: 64,
            subject_channels: 32,
            render_mode: RenderMode::Mnr,
            ot3: true,
            bg_split: true,
            trunk_hidden: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 4 != 0 || self.resolution < 8 {
            return Err(Error::config(format!(
                "resolution {} must be >= 8 and divisible by 4",
                self.resolution
            )));
        }
        if self.subject_channels % ILLUM_DIM != 0 || self.subject_channels < ILLUM_DIM {
            return Err(Error::config(format!(
                "subject channels {} must be a positive multiple of {ILLUM_DIM}",
                self.subject_channels
            )));
        }
        if self.trunk_hidden < ILLUM_DIM {
            return Err(Error::config("decoder trunk narrower than its input"));
        }
        if self.render_mode != RenderMode::Mnr && self.ot3 {
            return Err(Error::config(
                "Concat/Mul ablations inject raw illumination features; combine them with ot3 = false",
            ));
        }
        Ok(())
    }

    /// Spatial side of the subject feature map.
    pub fn feature_size(&self) -> usize {
        self.resolution / 4
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet<f32>,
    pub subject_enc: SubjectEncoder,
    pub illum_enc: IllumEncoder,
    pub decoder: Option<LightingDecoder>,
    pub renderer: Renderer,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let subject_enc = SubjectEncoder::new(&mut params, &mut rng, cfg.subject_channels);
        let illum_enc = IllumEncoder::new(&mut params, &mut rng, cfg.bg_split);
        let decoder = (cfg.render_mode == RenderMode::Mnr).then(|| {
            LightingDecoder::new(
                &mut params,
                &mut rng,
                cfg.trunk_hidden,
                cfg.subject_channels,
                cfg.ot3,
            )
        });
        let renderer = Renderer::new(&mut params, &mut rng, cfg.render_mode, cfg.subject_channels);
        Ok(Model {
            cfg,
            params,
            subject_enc,
            illum_enc,
            decoder,
            renderer,
        })
    }

    pub fn check_resolution(&self, img: &PortraitImage) -> Result<()> {
        if img.width() != self.cfg.resolution || img.height() != self.cfg.resolution {
            return Err(Error::shape(format!(
                "image {}x{} does not match model resolution {}",
                img.width(),
                img.height(),
                self.cfg.resolution
            )));
        }
        Ok(())
    }

    // --- tape-level forward pieces -----------------------------------------

    pub fn encode_subject_t<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, fg: Var) -> Var {
        self.subject_enc.forward(tape, bp, fg)
    }

    pub fn encode_illum_t<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        fg: Var,
        bg: Var,
    ) -> Var {
        self.illum_enc.encode(tape, bp, fg, bg)
    }

    pub fn decode_t<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, i: Var) -> DecodedVars {
        self.decoder
            .as_ref()
            .expect("decode on a model without a lighting decoder")
            .decode(tape, bp, i)
    }

    /// Render from a lighting code (MNR) or raw illumination feature
    /// (Concat/Mul), whichever this model uses.
    pub fn render_t<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        lighting: Var,
        s: Var,
    ) -> Var {
        match self.cfg.render_mode {
            RenderMode::Mnr => self.renderer.render(tape, bp, lighting, s),
            _ => self.renderer.render_from_illum(tape, bp, lighting, s),
        }
    }

    // --- inference ----------------------------------------------------------

    /// Illumination feature of an image/mask pair as a plain tensor.
    pub fn encode_illumination(
        &self,
        image: &PortraitImage,
        mask: &SegMask,
    ) -> Result<Tensor<f32>> {
        self.check_resolution(image)?;
        let (fg, bg) = split(image, mask)?;
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let fgv = tape.leaf(image_to_tensor(&fg));
        let bgv = tape.leaf(image_to_tensor(&bg));
        let i = self.encode_illum_t(&mut tape, &bp, fgv, bgv);
        Ok(tape.value(i).clone())
    }

    /// Subject feature of a pre-masked foreground as a plain tensor.
    pub fn encode_subject(&self, image: &PortraitImage, mask: &SegMask) -> Result<Tensor<f32>> {
        self.check_resolution(image)?;
        let (fg, _) = split(image, mask)?;
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let fgv = tape.leaf(image_to_tensor(&fg));
        let s = self.encode_subject_t(&mut tape, &bp, fgv);
        Ok(tape.value(s).clone())
    }

    pub fn decode_anchors(&self, i: &Tensor<f32>) -> Result<Ot3Codes> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::config("model has no lighting decoder"))?;
        dec.decode_ot3(&self.params, i)
    }

    /// Relight `source` under the illumination of `target`. With an angle,
    /// the lighting code is interpolated between the OT3 anchors (plus the
    /// pseudo -180 anchor); otherwise the 0-degree code is used. Returns the
    /// raw render output (uncomposited).
    pub fn relight(
        &self,
        source: &PortraitImage,
        source_mask: &SegMask,
        target: &PortraitImage,
        target_mask: &SegMask,
        angle: Option<f64>,
    ) -> Result<PortraitImage> {
        self.check_resolution(source)?;
        self.check_resolution(target)?;
        let (src_fg, _) = split(source, source_mask)?;
        let i = self.encode_illumination(target, target_mask)?;

        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let fgv = tape.leaf(image_to_tensor(&src_fg));
        let s = self.encode_subject_t(&mut tape, &bp, fgv);

        let lighting = match self.cfg.render_mode {
            RenderMode::Mnr => {
                let dec = self.decoder.as_ref().unwrap();
                match angle {
                    None => tape.leaf(dec.decode_zero(&self.params, &i)?),
                    Some(a) => {
                        let anchors = dec.decode_ot3(&self.params, &i)?;
                        let pseudo = dec.pseudo_anchor_minus180(
                            &self.params,
                            &anchors,
                            InversionTarget::default(),
                            1e-8,
                        )?;
                        tape.leaf(interpolate(&anchors, &pseudo.code, a)?)
                    }
                }
            }
            _ => {
                if angle.is_some() {
                    return Err(Error::config(
                        "angle sweeps need the OT3 lighting decoder; this model injects raw features",
                    ));
                }
                tape.leaf(i)
            }
        };
        let out = self.render_t(&mut tape, &bp, lighting, s);
        Ok(tensor_to_image(tape.value(out)))
    }
}

/// `[3,H,W]` planar tensor view of an image (same memory order).
pub fn image_to_tensor(img: &PortraitImage) -> Tensor<f32> {
    Tensor::from_vec(&[3, img.height(), img.width()], img.planes().to_vec()).unwrap()
}

pub fn tensor_to_image(t: &Tensor<f32>) -> PortraitImage {
    let s = t.shape();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], 3);
    let mut img = PortraitImage::from_planes(s[2], s[1], t.data().to_vec()).unwrap();
    img.clamp_unit();
    img
}

/// Mask replicated over three channels, for masked losses on the tape.
pub fn mask_to_tensor3(mask: &SegMask) -> Tensor<f32> {
    let hw = mask.width() * mask.height();
    let mut data = Vec::with_capacity(3 * hw);
    for _ in 0..3 {
        data.extend_from_slice(mask.data());
    }
    Tensor::from_vec(&[3, mask.height(), mask.width()], data).unwrap()
}
