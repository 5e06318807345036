//! The multiplicative neural render: four stacked render layers that
//! modulate subject features channel-wise with per-layer lighting sub-codes
//! (scale and offset), followed by a deconvolution tail up to image space.
//! Concat and Mul ablation modes inject the raw 8-dim illumination feature
//! instead and share the tail structure.
//!
//! No normalization appears anywhere in the render path: it would cancel the
//! injected scale.

use crate::backbone::{
    BoundParams, Conv2d, ConvSpec, ConvTranspose2d, ParamSet, Real, ResidualBlock, Tape, Var,
};
use crate::codec::{partition_var, RENDER_LAYERS};
use crate::encoders::ILLUM_DIM;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RenderMode {
    #[default]
    Mnr,
    Concat,
    Mul,
}

impl std::fmt::Display for RenderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RenderMode::Mnr => write!(f, "MNR"),
            RenderMode::Concat => write!(f, "Concat"),
            RenderMode::Mul => write!(f, "Mul"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Renderer {
    pub mode: RenderMode,
    pub subject_channels: usize,
    blocks: Vec<ResidualBlock>,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    out_conv: Conv2d,
}

impl Renderer {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        mode: RenderMode,
        subject_channels: usize,
    ) -> Self {
        assert!(
            subject_channels % ILLUM_DIM == 0 && subject_channels >= ILLUM_DIM,
            "subject channels must be a positive multiple of {ILLUM_DIM}"
        );
        let cs = subject_channels;
        let blocks = match mode {
            RenderMode::Mnr => (0..RENDER_LAYERS)
                .map(|k| ResidualBlock::new(ps, rng, &format!("render.l{}", k + 1), cs, false))
                .collect(),
            _ => Vec::new(),
        };
        let tail_in = match mode {
            RenderMode::Concat => cs + ILLUM_DIM,
            _ => cs,
        };
        let up_spec = ConvSpec { stride: 2, pad: 1 };
        let up1 = ConvTranspose2d::new(ps, rng, "render.up1", tail_in, cs / 2, 4, up_spec);
        let up2 = ConvTranspose2d::new(ps, rng, "render.up2", cs / 2, cs / 4, 4, up_spec);
        let out_conv = Conv2d::new(
            ps,
            rng,
            "render.out",
            cs / 4,
            3,
            3,
            ConvSpec { stride: 1, pad: 1 },
        );
        Renderer {
            mode,
            subject_channels,
            blocks,
            up1,
            up2,
            out_conv,
        }
    }

    /// Channel-wise affine modulation followed by the layer's residual conv
    /// block: one render layer.
    pub fn render_layer<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        k: usize,
        x: Var,
        mul: Var,
        add: Var,
    ) -> Var {
        let modulated = tape.channel_affine(x, mul, add);
        self.blocks[k - 1].forward(tape, bp, modulated)
    }

    /// Full MNR path: four render layers in sequence, each consuming its
    /// (mul, add) sub-code pair, then the upsampling tail.
    pub fn render<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, code: Var, s: Var) -> Var {
        assert_eq!(self.mode, RenderMode::Mnr, "render() is the MNR path");
        let cs = self.subject_channels;
        assert_eq!(
            tape.shape(code),
            &[crate::codec::code_dim(cs)],
            "lighting code length mismatch"
        );
        let mut h = s;
        for k in 1..=RENDER_LAYERS {
            let (mul, add) = partition_var(tape, code, cs, k);
            h = self.render_layer(tape, bp, k, h, mul, add);
        }
        self.tail(tape, bp, h)
    }

    /// Concat / Mul ablation path: inject the raw illumination feature and
    /// run the identical tail.
    pub fn render_from_illum<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        i: Var,
        s: Var,
    ) -> Var {
        assert_eq!(tape.shape(i), &[ILLUM_DIM]);
        let shape = tape.shape(s).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let injected = match self.mode {
            RenderMode::Concat => {
                let imap = tape.broadcast_map(i, h, w);
                tape.concat_channels(s, imap)
            }
            RenderMode::Mul => {
                let tiled = tape.tile1d(i, self.subject_channels / ILLUM_DIM);
                let imap = tape.broadcast_map(tiled, h, w);
                tape.mul(s, imap)
            }
            RenderMode::Mnr => panic!("render_from_illum is not the MNR path"),
        };
        self.tail(tape, bp, injected)
    }

    /// Upsampling tail: two 2x deconvolutions and a final conv, with the
    /// output mapped into [0,1] via tanh.
    fn tail<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, h: Var) -> Var {
        let mut y = self.up1.forward(tape, bp, h);
        y = tape.relu(y);
        y = self.up2.forward(tape, bp, y);
        y = tape.relu(y);
        y = self.out_conv.forward(tape, bp, y);
        let t = tape.tanh(y);
        tape.affine(t, T::from_f64(0.5), T::from_f64(0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{grad_check, Tensor};
    use rand::Rng;
    use rand::SeedableRng;

    fn build(mode: RenderMode, cs: usize) -> (ParamSet<f32>, Renderer) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let r = Renderer::new(&mut ps, &mut rng, mode, cs);
        (ps, r)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn modulation_with_unit_scale_and_zero_offset_is_identity() {
        let (ps, r) = build(RenderMode::Mnr, 8);
        let mut tape = Tape::new();
        let _bp = ps.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.leaf(rand_tensor(&mut rng, &[8, 4, 4]));
        let ones = tape.leaf(Tensor::filled(&[8], 1.0));
        let zeros = tape.leaf(Tensor::zeros(&[8]));
        let modulated = tape.channel_affine(x, ones, zeros);
        assert_eq!(tape.value(modulated), tape.value(x));
        // Zero scale broadcasts the additive code spatially.
        let adds = tape.leaf(Tensor::from_vec(&[8], (0..8).map(|i| i as f32).collect()).unwrap());
        let zero_mul = tape.leaf(Tensor::zeros(&[8]));
        let out = tape.channel_affine(x, zero_mul, adds);
        for c in 0..8 {
            for i in 0..16 {
                assert_eq!(tape.value(out).data()[c * 16 + i], c as f32);
            }
        }
        let _ = r;
    }

    #[test]
    fn modulation_matches_triple_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[4, 2, 2]);
            let m = rand_tensor(&mut rng, &[4]);
            let a = rand_tensor(&mut rng, &[4]);
            let mut tape = Tape::new();
            let (xv, mv, av) = (tape.leaf(x.clone()), tape.leaf(m.clone()), tape.leaf(a.clone()));
            let y = tape.channel_affine(xv, mv, av);
            for c in 0..4 {
                for h in 0..2 {
                    for w in 0..2 {
                        let want = m.data()[c] * x.data()[(c * 2 + h) * 2 + w] + a.data()[c];
                        let got = tape.value(y).data()[(c * 2 + h) * 2 + w];
                        assert!((got - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn modulation_without_offset_is_linear_in_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[4, 3, 3]);
        let y = rand_tensor(&mut rng, &[4, 3, 3]);
        let m = rand_tensor(&mut rng, &[4]);
        let run = |input: &Tensor<f32>| -> Tensor<f32> {
            let mut tape = Tape::new();
            let xv = tape.leaf(input.clone());
            let mv = tape.leaf(m.clone());
            let zv = tape.leaf(Tensor::zeros(&[4]));
            let out = tape.channel_affine(xv, mv, zv);
            tape.value(out).clone()
        };
        // f(x + y) = f(x) + f(y)
        let sum = x.zip_map(&y, |a, b| a + b);
        let lhs = run(&sum);
        let rhs = run(&x).zip_map(&run(&y), |a, b| a + b);
        for (a, b) in lhs.data().iter().zip(rhs.data().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        // f(2x) = 2 f(x)
        let twox = x.map(|v| v * 2.0);
        let l2 = run(&twox);
        let r2 = run(&x).map(|v| v * 2.0);
        for (a, b) in l2.data().iter().zip(r2.data().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn mnr_upsamples_to_image_space_and_is_deterministic() {
        let (ps, r) = build(RenderMode::Mnr, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let code = rand_tensor(&mut rng, &[crate::codec::code_dim(32)]);
        let s = rand_tensor(&mut rng, &[32, 16, 16]);
        let run = || -> Tensor<f32> {
            let mut tape = Tape::new();
            let bp = ps.bind(&mut tape);
            let cv = tape.leaf(code.clone());
            let sv = tape.leaf(s.clone());
            let y = r.render(&mut tape, &bp, cv, sv);
            tape.value(y).clone()
        };
        let img = run();
        assert_eq!(img.shape(), &[3, 64, 64]);
        assert_eq!(img, run());
        // Output range stays within [0,1].
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn renderer_is_fully_convolutional() {
        let (ps, r) = build(RenderMode::Mnr, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let code = rand_tensor(&mut rng, &[crate::codec::code_dim(8)]);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape);
        let cv = tape.leaf(code);
        let s_small = tape.leaf(rand_tensor(&mut rng, &[8, 4, 4]));
        let s_large = tape.leaf(rand_tensor(&mut rng, &[8, 6, 6]));
        let y_small = r.render(&mut tape, &bp, cv, s_small);
        let y_large = r.render(&mut tape, &bp, cv, s_large);
        assert_eq!(tape.shape(y_small), &[3, 16, 16]);
        assert_eq!(tape.shape(y_large), &[3, 24, 24]);
    }

    #[test]
    fn all_three_modes_emit_identical_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = rand_tensor(&mut rng, &[8, 4, 4]);
        let i = rand_tensor(&mut rng, &[ILLUM_DIM]);
        let code = rand_tensor(&mut rng, &[crate::codec::code_dim(8)]);
        let mut shapes = Vec::new();
        for mode in [RenderMode::Mnr, RenderMode::Concat, RenderMode::Mul] {
            let (ps, r) = build(mode, 8);
            let mut tape = Tape::new();
            let bp = ps.bind(&mut tape);
            let sv = tape.leaf(s.clone());
            let y = match mode {
                RenderMode::Mnr => {
                    let cv = tape.leaf(code.clone());
                    r.render(&mut tape, &bp, cv, sv)
                }
                _ => {
                    let iv = tape.leaf(i.clone());
                    r.render_from_illum(&mut tape, &bp, iv, sv)
                }
            };
            shapes.push(tape.shape(y).to_vec());
        }
        assert!(shapes.iter().all(|s| s == &shapes[0]), "{shapes:?}");
    }

    #[test]
    fn mul_mode_with_all_ones_lighting_is_the_tail_of_unmodified_s() {
        let (ps, r) = build(RenderMode::Mul, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = rand_tensor(&mut rng, &[8, 4, 4]);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape);
        let sv = tape.leaf(s.clone());
        let ones = tape.leaf(Tensor::filled(&[ILLUM_DIM], 1.0));
        let via_mul = r.render_from_illum(&mut tape, &bp, ones, sv);
        let sv2 = tape.leaf(s);
        let direct = r.tail(&mut tape, &bp, sv2);
        assert_eq!(tape.value(via_mul), tape.value(direct));
    }

    #[test]
    fn concat_mode_widens_tail_input_channels() {
        let (ps, r) = build(RenderMode::Concat, 8);
        // First deconv weight has C_s + 8 input channels.
        assert_eq!(ps.get(r.up1.w).shape(), &[8 + ILLUM_DIM, 4, 4, 4]);
    }

    #[test]
    fn render_gradients_pass_grad_check_at_small_shapes() {
        let mut ps64 = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let r = Renderer::new(&mut ps64, &mut rng, RenderMode::Mnr, 8);
        let mut data_rng = ChaCha8Rng::seed_from_u64(32);
        let code = Tensor::from_vec(
            &[crate::codec::code_dim(8)],
            (0..crate::codec::code_dim(8))
                .map(|_| data_rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let s = Tensor::from_vec(
            &[8, 2, 2],
            (0..32).map(|_| data_rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let rep = grad_check(
            |tape, vars| {
                let bp = ps64.bind(tape);
                let y = r.render(tape, &bp, vars[0], vars[1]);
                let mut prng = ChaCha8Rng::seed_from_u64(33);
                let shape = tape.shape(y).to_vec();
                let n: usize = shape.iter().product();
                let p = tape.leaf(
                    Tensor::from_vec(&shape, (0..n).map(|_| prng.random_range(-1.0..1.0)).collect())
                        .unwrap(),
                );
                let prod = tape.mul(y, p);
                tape.sum_all(prod)
            },
            &[code, s],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
