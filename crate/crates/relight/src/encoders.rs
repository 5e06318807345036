//! Subject encoder and the split background/foreground illumination
//! encoders.
//!
//! The subject encoder keeps spatial structure (two stride-2 stages plus
//! residual blocks, instance-normalized). The illumination encoders are
//! deliberately compressive: conv stack, global average pool, one fully
//! connected layer down to 6 (foreground) and 2 (background) dims. They use
//! no normalization, since overall image brightness is exactly the signal
//! they must preserve.

use crate::backbone::{
    BoundParams, Conv2d, ConvSpec, InstanceNorm, Linear, ParamSet, Real, ResidualBlock, Tape, Var,
};
use rand_chacha::ChaCha8Rng;

pub const BG_DIM: usize = 2;
pub const FG_DIM: usize = 6;
pub const ILLUM_DIM: usize = BG_DIM + FG_DIM;

/// `E_s`: masked foreground image -> spatial feature at 1/4 resolution.
#[derive(Clone, Debug)]
pub struct SubjectEncoder {
    c1: Conv2d,
    n1: InstanceNorm,
    c2: Conv2d,
    n2: InstanceNorm,
    r1: ResidualBlock,
    r2: ResidualBlock,
}

impl SubjectEncoder {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let spec = ConvSpec { stride: 2, pad: 1 };
        let mid = channels / 2;
        SubjectEncoder {
            c1: Conv2d::new(ps, rng, "subject.c1", 3, mid, 3, spec),
            n1: InstanceNorm::new(ps, "subject.n1", mid),
            c2: Conv2d::new(ps, rng, "subject.c2", mid, channels, 3, spec),
            n2: InstanceNorm::new(ps, "subject.n2", channels),
            r1: ResidualBlock::new(ps, rng, "subject.r1", channels, true),
            r2: ResidualBlock::new(ps, rng, "subject.r2", channels, true),
        }
    }

    /// `[3,H,W] -> [C_s, H/4, W/4]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, fg: Var) -> Var {
        let mut h = self.c1.forward(tape, bp, fg);
        h = self.n1.forward(tape, bp, h);
        h = tape.relu(h);
        h = self.c2.forward(tape, bp, h);
        h = self.n2.forward(tape, bp, h);
        h = tape.relu(h);
        h = self.r1.forward(tape, bp, h);
        self.r2.forward(tape, bp, h)
    }
}

/// Compressive conv trunk shared by both illumination encoders: three
/// stride-2 convs, global average pool, fully connected head.
#[derive(Clone, Debug)]
pub struct IllumTrunk {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    fc: Linear,
    pub out_dim: usize,
}

impl IllumTrunk {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        out_dim: usize,
    ) -> Self {
        let spec = ConvSpec { stride: 2, pad: 1 };
        IllumTrunk {
            c1: Conv2d::new(ps, rng, &format!("{name}.c1"), 3, 8, 3, spec),
            c2: Conv2d::new(ps, rng, &format!("{name}.c2"), 8, 16, 3, spec),
            c3: Conv2d::new(ps, rng, &format!("{name}.c3"), 16, 16, 3, spec),
            fc: Linear::new(ps, rng, &format!("{name}.fc"), 16, out_dim),
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Var {
        let mut h = self.c1.forward(tape, bp, x);
        h = tape.relu(h);
        h = self.c2.forward(tape, bp, h);
        h = tape.relu(h);
        h = self.c3.forward(tape, bp, h);
        h = tape.relu(h);
        let pooled = tape.global_avg_pool(h);
        self.fc.forward(tape, bp, pooled)
    }
}

/// Combined illumination encoder `E_i = (E_b, E_f)`. In the "without
/// background" ablation a single trunk extracts the full 8-dim feature from
/// the foreground alone, so the decoder input stays 8-dim in both modes.
#[derive(Clone, Debug)]
pub struct IllumEncoder {
    fg: IllumTrunk,
    bg: Option<IllumTrunk>,
}

impl IllumEncoder {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, bg_split: bool) -> Self {
        if bg_split {
            IllumEncoder {
                fg: IllumTrunk::new(ps, rng, "illum.fg", FG_DIM),
                bg: Some(IllumTrunk::new(ps, rng, "illum.bg", BG_DIM)),
            }
        } else {
            IllumEncoder {
                fg: IllumTrunk::new(ps, rng, "illum.fg", ILLUM_DIM),
                bg: None,
            }
        }
    }

    pub fn bg_split(&self) -> bool {
        self.bg.is_some()
    }

    /// Full illumination feature `i = (i_b, i_f)` from pre-masked foreground
    /// and background images. The background input is ignored when the
    /// background path is ablated.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, fg: Var, bg: Var) -> Var {
        match &self.bg {
            Some(bg_trunk) => {
                let ib = bg_trunk.forward(tape, bp, bg);
                let ifg = self.fg.forward(tape, bp, fg);
                tape.concat1d(ib, ifg)
            }
            None => self.fg.forward(tape, bp, fg),
        }
    }

    /// Foreground-only feature `E_f(x)`: 6-dim when split, 8-dim otherwise.
    pub fn foreground_feature<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        fg: Var,
    ) -> Var {
        self.fg.forward(tape, bp, fg)
    }

    /// Where the foreground component sits inside the combined feature.
    pub fn foreground_range(&self) -> std::ops::Range<usize> {
        if self.bg.is_some() {
            BG_DIM..ILLUM_DIM
        } else {
            0..ILLUM_DIM
        }
    }
}
