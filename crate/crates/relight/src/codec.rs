//! Lighting codec: the MLP decoder that expands the 8-dim illumination
//! feature into three anchor lighting codes (0 and +/-90 degree environment
//! rotations), per-layer sub-code partitioning, the pseudo -180 anchor
//! obtained by inverting a decoder head, and piecewise-linear angle
//! interpolation between anchors.

use crate::backbone::{BoundParams, Linear, ParamSet, Real, Tape, Tensor, Var};
use crate::encoders::ILLUM_DIM;
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const RENDER_LAYERS: usize = 4;

/// Code length for a given subject-feature channel count: 4 render layers,
/// each with a multiplicative and an additive sub-code of `C_s` dims.
pub fn code_dim(subject_channels: usize) -> usize {
    2 * RENDER_LAYERS * subject_channels
}

/// Anchor lighting codes decoded from one illumination feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Ot3Codes {
    pub p90: Tensor<f32>,
    pub zero: Tensor<f32>,
    pub m90: Tensor<f32>,
}

/// On-tape anchor code vars.
#[derive(Clone, Copy, Debug)]
pub struct Ot3Vars {
    pub p90: Var,
    pub zero: Var,
    pub m90: Var,
}

/// Which head to invert when synthesizing the pseudo -180 anchor. For the
/// -90-rotated scene the 0-degree head yields `l^-90` and the +90 head
/// yields `l^0`, so either equation recovers that scene's trunk output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InversionTarget {
    /// Solve `fc_0(h) = l^-90` (default).
    #[default]
    Fc0AtM90,
    /// Solve `fc_90(h) = l^0`.
    Fc90AtL0,
}

#[derive(Clone, Debug)]
enum Heads {
    Ot3 { p90: Linear, zero: Linear, m90: Linear },
    Single { zero: Linear },
}

/// Shared MLP trunk plus one fully-connected head per anchor (or a single
/// head in the "without OT3" ablation).
#[derive(Clone, Debug)]
pub struct LightingDecoder {
    trunk1: Linear,
    trunk2: Linear,
    heads: Heads,
    pub hidden: usize,
    pub code_dim: usize,
}

/// Decoded codes on a tape.
#[derive(Clone, Copy, Debug)]
pub enum DecodedVars {
    Ot3(Ot3Vars),
    Single(Var),
}

impl DecodedVars {
    pub fn zero(&self) -> Var {
        match self {
            DecodedVars::Ot3(v) => v.zero,
            DecodedVars::Single(v) => *v,
        }
    }

    pub fn ot3(&self) -> Option<Ot3Vars> {
        match self {
            DecodedVars::Ot3(v) => Some(*v),
            DecodedVars::Single(_) => None,
        }
    }
}

impl LightingDecoder {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        hidden: usize,
        subject_channels: usize,
        ot3: bool,
    ) -> Self {
        assert!(hidden >= ILLUM_DIM, "trunk width must be >= input dim");
        let cd = code_dim(subject_channels);
        let trunk1 = Linear::new(ps, rng, "decoder.trunk1", ILLUM_DIM, hidden);
        let trunk2 = Linear::new(ps, rng, "decoder.trunk2", hidden, hidden);
        let heads = if ot3 {
            Heads::Ot3 {
                p90: Linear::new(ps, rng, "decoder.head_p90", hidden, cd),
                zero: Linear::new(ps, rng, "decoder.head_0", hidden, cd),
                m90: Linear::new(ps, rng, "decoder.head_m90", hidden, cd),
            }
        } else {
            Heads::Single {
                zero: Linear::new(ps, rng, "decoder.head_0", hidden, cd),
            }
        };
        // Bias the multiplicative sub-code slices of every head at 1 so the
        // initial modulation is near identity and subject features reach the
        // render tail from the first step.
        let mut bias_mul_slices = |b: crate::backbone::ParamId| {
            let bias = ps.get_mut(b);
            for k in 0..RENDER_LAYERS {
                for v in &mut bias.data_mut()[k * 2 * subject_channels..k * 2 * subject_channels + subject_channels] {
                    *v = T::one();
                }
            }
        };
        match &heads {
            Heads::Ot3 { p90, zero, m90 } => {
                bias_mul_slices(p90.b);
                bias_mul_slices(zero.b);
                bias_mul_slices(m90.b);
            }
            Heads::Single { zero } => bias_mul_slices(zero.b),
        }
        LightingDecoder {
            trunk1,
            trunk2,
            heads,
            hidden,
            code_dim: cd,
        }
    }

    pub fn is_ot3(&self) -> bool {
        matches!(self.heads, Heads::Ot3 { .. })
    }

    fn trunk<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, i: Var) -> Var {
        let mut h = self.trunk1.forward(tape, bp, i);
        h = tape.relu(h);
        h = self.trunk2.forward(tape, bp, h);
        tape.relu(h)
    }

    /// Decode all anchors from the illumination feature: one shared trunk
    /// output feeds every head.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, i: Var) -> DecodedVars {
        assert_eq!(tape.shape(i), &[ILLUM_DIM], "illumination feature must be 8-dim");
        let h = self.trunk(tape, bp, i);
        match &self.heads {
            Heads::Ot3 { p90, zero, m90 } => DecodedVars::Ot3(Ot3Vars {
                p90: p90.forward(tape, bp, h),
                zero: zero.forward(tape, bp, h),
                m90: m90.forward(tape, bp, h),
            }),
            Heads::Single { zero } => DecodedVars::Single(zero.forward(tape, bp, h)),
        }
    }

    /// Inference-time decode into plain tensors.
    pub fn decode_ot3(&self, params: &ParamSet<f32>, i: &Tensor<f32>) -> Result<Ot3Codes> {
        if i.shape() != [ILLUM_DIM] {
            return Err(Error::shape(format!(
                "illumination feature shape {:?}, want [{ILLUM_DIM}]",
                i.shape()
            )));
        }
        if !self.is_ot3() {
            return Err(Error::config(
                "decoder was built without the three-way representation",
            ));
        }
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let iv = tape.leaf(i.clone());
        match self.decode(&mut tape, &bp, iv) {
            DecodedVars::Ot3(v) => Ok(Ot3Codes {
                p90: tape.value(v.p90).clone(),
                zero: tape.value(v.zero).clone(),
                m90: tape.value(v.m90).clone(),
            }),
            DecodedVars::Single(_) => unreachable!(),
        }
    }

    /// Inference-time single-code decode (works in both modes).
    pub fn decode_zero(&self, params: &ParamSet<f32>, i: &Tensor<f32>) -> Result<Tensor<f32>> {
        if i.shape() != [ILLUM_DIM] {
            return Err(Error::shape(format!(
                "illumination feature shape {:?}, want [{ILLUM_DIM}]",
                i.shape()
            )));
        }
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let iv = tape.leaf(i.clone());
        let d = self.decode(&mut tape, &bp, iv);
        Ok(tape.value(d.zero()).clone())
    }

    /// Least-squares inversion of a decoder head to synthesize the -180
    /// anchor. Returns the pseudo code together with the inversion residual.
    pub fn pseudo_anchor_minus180(
        &self,
        params: &ParamSet<f32>,
        anchors: &Ot3Codes,
        target: InversionTarget,
        damping: f64,
    ) -> Result<PseudoAnchor> {
        let Heads::Ot3 { p90, zero, m90 } = &self.heads else {
            return Err(Error::config(
                "pseudo anchor requires the three-way representation",
            ));
        };
        let (head, rhs_code) = match target {
            InversionTarget::Fc0AtM90 => (zero, &anchors.m90),
            InversionTarget::Fc90AtL0 => (p90, &anchors.zero),
        };
        let w: Tensor<f64> = params.get(head.w).cast();
        let b: Tensor<f64> = params.get(head.b).cast();
        let rhs: Tensor<f64> = rhs_code.cast();
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if rhs.len() != m {
            return Err(Error::shape(format!(
                "anchor length {} vs head output {}",
                rhs.len(),
                m
            )));
        }

        // Normal equations with Tikhonov damping: (W^T W + damping I) h = W^T (rhs - b).
        let wd = w.data();
        let mut ata = vec![0.0f64; n * n];
        for r in 0..m {
            let row = &wd[r * n..(r + 1) * n];
            for i in 0..n {
                let ri = row[i];
                for j in i..n {
                    ata[i * n + j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                ata[i * n + j] = ata[j * n + i];
            }
            ata[i * n + i] += damping;
        }
        let mut atb = vec![0.0f64; n];
        for r in 0..m {
            let resid = rhs.data()[r] - b.data()[r];
            let row = &wd[r * n..(r + 1) * n];
            for i in 0..n {
                atb[i] += row[i] * resid;
            }
        }
        let h = cholesky_solve(&mut ata, &atb, n)?;

        // Residual of the inverted equation.
        let mut residual = 0.0f64;
        for r in 0..m {
            let row = &wd[r * n..(r + 1) * n];
            let mut acc = b.data()[r];
            for i in 0..n {
                acc += row[i] * h[i];
            }
            let d = acc - rhs.data()[r];
            residual += d * d;
        }
        residual = residual.sqrt();

        // Push the recovered trunk output through the -90 head.
        let wm: Tensor<f64> = params.get(m90.w).cast();
        let bm: Tensor<f64> = params.get(m90.b).cast();
        let mut code = vec![0.0f32; m];
        for r in 0..m {
            let row = &wm.data()[r * n..(r + 1) * n];
            let mut acc = bm.data()[r];
            for i in 0..n {
                acc += row[i] * h[i];
            }
            code[r] = acc as f32;
        }
        Ok(PseudoAnchor {
            code: Tensor::from_vec(&[m], code).unwrap(),
            trunk: h,
            residual,
        })
    }
}

/// Result of the head inversion: the synthesized -180 code, the recovered
/// trunk output and the least-squares residual.
#[derive(Clone, Debug)]
pub struct PseudoAnchor {
    pub code: Tensor<f32>,
    pub trunk: Vec<f64>,
    pub residual: f64,
}

/// In-place Cholesky solve of the SPD system `a x = b` (`a` is `n x n`).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    // Factor a = L L^T, storing L in the lower triangle.
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::numeric(format!(
                        "head inversion: normal equations not positive definite (pivot {sum:.3e})"
                    )));
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i * n + k] * y[k];
        }
        y[i] = sum / a[i * n + i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= a[k * n + i] * x[k];
        }
        x[i] = sum / a[i * n + i];
    }
    Ok(x)
}

/// Contiguous (mul, add) sub-code slices for render layer `k` in 1..=4.
pub fn partition<T: Real>(code: &Tensor<T>, subject_channels: usize, k: usize) -> Result<(Vec<T>, Vec<T>)> {
    if !(1..=RENDER_LAYERS).contains(&k) {
        return Err(Error::config(format!("render layer {k} out of range 1..=4")));
    }
    if code.len() != code_dim(subject_channels) {
        return Err(Error::shape(format!(
            "code length {} != {}",
            code.len(),
            code_dim(subject_channels)
        )));
    }
    let base = (k - 1) * 2 * subject_channels;
    Ok((
        code.data()[base..base + subject_channels].to_vec(),
        code.data()[base + subject_channels..base + 2 * subject_channels].to_vec(),
    ))
}

/// On-tape partition of a code var.
pub fn partition_var<T: Real>(
    tape: &mut Tape<T>,
    code: Var,
    subject_channels: usize,
    k: usize,
) -> (Var, Var) {
    assert!((1..=RENDER_LAYERS).contains(&k));
    let base = (k - 1) * 2 * subject_channels;
    (
        tape.slice1d(code, base, subject_channels),
        tape.slice1d(code, base + subject_channels, subject_channels),
    )
}

/// Piecewise-linear interpolation between the anchor codes at
/// {-180, -90, 0, 90, 180} degrees, where both +/-180 are the pseudo anchor.
/// Exact (bit-identical) at every anchor angle.
pub fn interpolate(
    anchors: &Ot3Codes,
    pseudo_m180: &Tensor<f32>,
    angle_degrees: f64,
) -> Result<Tensor<f32>> {
    if !(-180.0..=180.0).contains(&angle_degrees) {
        return Err(Error::config(format!(
            "interpolation angle {angle_degrees} outside [-180, 180]"
        )));
    }
    let stops: [(f64, &Tensor<f32>); 5] = [
        (-180.0, pseudo_m180),
        (-90.0, &anchors.m90),
        (0.0, &anchors.zero),
        (90.0, &anchors.p90),
        (180.0, pseudo_m180),
    ];
    for (a, code) in &stops {
        if (angle_degrees - a).abs() < 1e-12 {
            return Ok((*code).clone());
        }
    }
    let seg = stops
        .windows(2)
        .find(|w| angle_degrees > w[0].0 && angle_degrees < w[1].0)
        .expect("angle covered by anchor range");
    let (a0, c0) = (seg[0].0, seg[0].1);
    let (a1, c1) = (seg[1].0, seg[1].1);
    let alpha = ((angle_degrees - a0) / (a1 - a0)) as f32;
    Ok(c0.zip_map(c1, |x, y| x * (1.0 - alpha) + y * alpha))
}
