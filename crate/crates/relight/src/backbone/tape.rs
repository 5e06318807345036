//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a single-use computation graph: leaves are created for
//! inputs and parameters, ops append nodes, and [`Tape::backward`] walks the
//! nodes in reverse creation order accumulating gradients. The op set is
//! exactly what the relighting model needs; this is not a general framework.

use super::conv::{conv_dw, conv_dx, conv_fwd, out_dim, ConvSpec};
use super::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> =
    Box<dyn Fn(&[Tensor<T>], &Tensor<T>, &mut dyn FnMut(usize, Tensor<T>)) + Send + Sync>;

pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    backs: Vec<Option<BackwardFn<T>>>,
}

/// Gradients of one backward pass, indexed by [`Var`]. Only leaves retain
/// their gradients; intermediate gradients are consumed during the walk.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, back: Option<BackwardFn<T>>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Input or parameter node. Leaves are the only nodes whose gradients
    /// survive [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                sink(ai, dy.clone());
                sink(bi, dy.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                sink(ai, dy.clone());
                sink(bi, dy.map(|v| -v));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                sink(ai, dy.zip_map(&vals[bi], |g, y| g * y));
                sink(bi, dy.zip_map(&vals[ai], |g, x| g * x));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.values[a.0].map(|x| x * k);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                sink(ai, dy.map(|g| g * k));
            })),
        )
    }

    /// Elementwise `x * mul + add` with scalar coefficients.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let out = self.values[a.0].map(|x| x * mul + add);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                sink(ai, dy.map(|g| g * mul));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                sink(
                    ai,
                    dy.zip_map(&vals[ai], |g, x| if x > T::zero() { g } else { T::zero() }),
                );
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x.tanh());
        let ai = a.0;
        let self_id = self.values.len();
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                sink(
                    ai,
                    dy.zip_map(&vals[self_id], |g, y| g * (T::one() - y * y)),
                );
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x.abs());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                sink(
                    ai,
                    dy.zip_map(&vals[ai], |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                );
            })),
        )
    }

    /// `[n]` -> `[len]` contiguous slice starting at `start`.
    pub fn slice1d(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.shape().len(), 1, "slice1d wants rank-1 input");
        let n = src.len();
        assert!(start + len <= n, "slice1d out of range");
        let out = Tensor::from_vec(&[len], src.data()[start..start + len].to_vec()).unwrap();
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                let mut full = Tensor::zeros(&[n]);
                full.data_mut()[start..start + len].copy_from_slice(dy.data());
                sink(ai, full);
            })),
        )
    }

    /// Concatenate two rank-1 tensors.
    pub fn concat1d(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.shape().len(), 1);
        assert_eq!(vb.shape().len(), 1);
        let (na, nb) = (va.len(), vb.len());
        let mut data = Vec::with_capacity(na + nb);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::from_vec(&[na + nb], data).unwrap();
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                let d = dy.data();
                sink(ai, Tensor::from_vec(&[na], d[..na].to_vec()).unwrap());
                sink(bi, Tensor::from_vec(&[nb], d[na..].to_vec()).unwrap());
            })),
        )
    }

    /// Concatenate `[Ca,H,W]` and `[Cb,H,W]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), 3, "concat_channels wants [C,H,W]");
        assert_eq!(&sa[1..], &sb[1..], "spatial dims differ");
        let (ca, cb, h, w) = (sa[0], sb[0], sa[1], sa[2]);
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::from_vec(&[ca + cb, h, w], data).unwrap();
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                let d = dy.data();
                let split = ca * h * w;
                sink(ai, Tensor::from_vec(&[ca, h, w], d[..split].to_vec()).unwrap());
                sink(bi, Tensor::from_vec(&[cb, h, w], d[split..].to_vec()).unwrap());
            })),
        )
    }

    /// `[n]` -> `[n*reps]` by repeating the whole vector `reps` times.
    pub fn tile1d(&mut self, a: Var, reps: usize) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.shape().len(), 1);
        let n = src.len();
        let mut data = Vec::with_capacity(n * reps);
        for _ in 0..reps {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::from_vec(&[n * reps], data).unwrap();
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                let mut g = Tensor::zeros(&[n]);
                for r in 0..reps {
                    for i in 0..n {
                        g.data_mut()[i] += dy.data()[r * n + i];
                    }
                }
                sink(ai, g);
            })),
        )
    }

    /// `[C]` -> `[C,H,W]`, every spatial position holding the channel value.
    pub fn broadcast_map(&mut self, v: Var, h: usize, w: usize) -> Var {
        let src = &self.values[v.0];
        assert_eq!(src.shape().len(), 1);
        let c = src.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &cv in src.data() {
            data.extend(std::iter::repeat(cv).take(h * w));
        }
        let out = Tensor::from_vec(&[c, h, w], data).unwrap();
        let vi = v.0;
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                let mut g = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for &d in &dy.data()[ch * h * w..(ch + 1) * h * w] {
                        acc += d;
                    }
                    g.data_mut()[ch] = acc;
                }
                sink(vi, g);
            })),
        )
    }

    /// Per-channel affine modulation: `y[c,h,w] = mul[c] * x[c,h,w] + add[c]`.
    pub fn channel_affine(&mut self, x: Var, mul: Var, add: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "channel_affine wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.values[mul.0].shape(), &[c], "mul sub-code length != channels");
        assert_eq!(self.values[add.0].shape(), &[c], "add sub-code length != channels");
        let hw = h * w;
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let xd = self.values[x.0].data();
            let md = self.values[mul.0].data();
            let ad = self.values[add.0].data();
            let od = out.data_mut();
            for ch in 0..c {
                let (m, a) = (md[ch], ad[ch]);
                for i in 0..hw {
                    od[ch * hw + i] = m * xd[ch * hw + i] + a;
                }
            }
        }
        let (xi, mi, ai) = (x.0, mul.0, add.0);
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                let xd = vals[xi].data();
                let md = vals[mi].data();
                let dyd = dy.data();
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dm = Tensor::zeros(&[c]);
                let mut da = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let m = md[ch];
                    let mut accm = T::zero();
                    let mut acca = T::zero();
                    let dxd = dx.data_mut();
                    for i in 0..hw {
                        let g = dyd[ch * hw + i];
                        dxd[ch * hw + i] = m * g;
                        accm += g * xd[ch * hw + i];
                        acca += g;
                    }
                    dm.data_mut()[ch] = accm;
                    da.data_mut()[ch] = acca;
                }
                sink(xi, dx);
                sink(mi, dm);
                sink(ai, da);
            })),
        )
    }

    /// `[C,H,W]` -> `[C]` spatial mean per channel.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "global_avg_pool wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let mut out = Tensor::zeros(&[c]);
        {
            let xd = self.values[x.0].data();
            for ch in 0..c {
                let mut acc = T::zero();
                for &v in &xd[ch * hw..(ch + 1) * hw] {
                    acc += v;
                }
                out.data_mut()[ch] = acc * inv;
            }
        }
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |_vals, dy, sink| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let g = dy.data()[ch] * inv;
                    for v in &mut dx.data_mut()[ch * hw..(ch + 1) * hw] {
                        *v = g;
                    }
                }
                sink(xi, dx);
            })),
        )
    }

    /// Fully connected layer: `x:[n], w:[m,n], b:[m]` -> `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.values[x.0].len();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight wants [m,n]");
        assert_eq!(ws[1], n, "linear input dim mismatch: {} vs {}", ws[1], n);
        let m = ws[0];
        assert_eq!(self.values[b.0].len(), m, "linear bias dim mismatch");
        let mut out = Tensor::zeros(&[m]);
        {
            let xd = self.values[x.0].data();
            let wd = self.values[w.0].data();
            let bd = self.values[b.0].data();
            for row in 0..m {
                let mut acc = bd[row];
                let wr = &wd[row * n..(row + 1) * n];
                for i in 0..n {
                    acc += wr[i] * xd[i];
                }
                out.data_mut()[row] = acc;
            }
        }
        let (xi, wi, bi) = (x.0, w.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                let xd = vals[xi].data();
                let wd = vals[wi].data();
                let dyd = dy.data();
                let mut dx = Tensor::zeros(&[n]);
                let mut dw = Tensor::zeros(&[m, n]);
                for row in 0..m {
                    let g = dyd[row];
                    let wr = &wd[row * n..(row + 1) * n];
                    let dwr = &mut dw.data_mut()[row * n..(row + 1) * n];
                    for i in 0..n {
                        dwr[i] = g * xd[i];
                    }
                    let dxd = dx.data_mut();
                    for i in 0..n {
                        dxd[i] += g * wr[i];
                    }
                }
                sink(xi, dx);
                sink(wi, dw);
                sink(bi, dy.clone());
            })),
        )
    }

    /// 2-D convolution: `x:[Ci,H,W], w:[Co,Ci,Kh,Kw], b:[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input wants [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight wants [Co,Ci,Kh,Kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch: input {} vs weight {}", xs[0], ws[1]);
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(self.values[b.0].len(), co, "conv2d bias dim mismatch");
        let (oh, ow) = (out_dim(h, kh, spec), out_dim(wd, kw, spec));
        let mut out = Tensor::zeros(&[co, oh, ow]);
        conv_fwd(
            self.values[x.0].data(),
            (ci, h, wd),
            self.values[w.0].data(),
            (co, kh, kw),
            spec,
            out.data_mut(),
        );
        {
            let od = out.data_mut();
            let bd = self.values[b.0].data();
            for ch in 0..co {
                let bv = bd[ch];
                for v in &mut od[ch * oh * ow..(ch + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
        let (xi, wi, bi) = (x.0, w.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                let mut dx = Tensor::zeros(&[ci, h, wd]);
                conv_dx(
                    dy.data(),
                    (co, oh, ow),
                    vals[wi].data(),
                    (ci, kh, kw),
                    spec,
                    (h, wd),
                    dx.data_mut(),
                );
                sink(xi, dx);
                let mut dw = Tensor::zeros(&[co, ci, kh, kw]);
                conv_dw(
                    vals[xi].data(),
                    (ci, h, wd),
                    dy.data(),
                    (co, oh, ow),
                    spec,
                    (kh, kw),
                    dw.data_mut(),
                );
                sink(wi, dw);
                sink(bi, channel_sums(dy.data(), co, oh * ow));
            })),
        )
    }

    /// Transposed 2-D convolution: `x:[Ci,H,W], w:[Ci,Co,Kh,Kw], b:[Co]`,
    /// output `[Co, (H-1)*s - 2p + Kh, (W-1)*s - 2p + Kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "conv_transpose2d input wants [C,H,W]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight wants [Ci,Co,Kh,Kw]");
        assert_eq!(xs[0], ws[0], "conv_transpose2d channel mismatch");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ws[1], ws[2], ws[3]);
        assert_eq!(self.values[b.0].len(), co, "conv_transpose2d bias dim mismatch");
        let oh = (h - 1) * spec.stride + kh - 2 * spec.pad;
        let ow = (wd - 1) * spec.stride + kw - 2 * spec.pad;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        conv_dx(
            self.values[x.0].data(),
            (ci, h, wd),
            self.values[w.0].data(),
            (co, kh, kw),
            spec,
            (oh, ow),
            out.data_mut(),
        );
        {
            let od = out.data_mut();
            let bd = self.values[b.0].data();
            for ch in 0..co {
                let bv = bd[ch];
                for v in &mut od[ch * oh * ow..(ch + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
        let (xi, wi, bi) = (x.0, w.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                let mut dx = Tensor::zeros(&[ci, h, wd]);
                conv_fwd(
                    dy.data(),
                    (co, oh, ow),
                    vals[wi].data(),
                    (ci, kh, kw),
                    spec,
                    dx.data_mut(),
                );
                sink(xi, dx);
                let mut dw = Tensor::zeros(&[ci, co, kh, kw]);
                conv_dw(
                    dy.data(),
                    (co, oh, ow),
                    vals[xi].data(),
                    (ci, h, wd),
                    spec,
                    (kh, kw),
                    dw.data_mut(),
                );
                sink(wi, dw);
                sink(bi, channel_sums(dy.data(), co, oh * ow));
            })),
        )
    }

    /// Instance normalization over the spatial dims of `[C,H,W]`, with
    /// per-channel affine parameters.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "instance_norm wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.values[gamma.0].len(), c);
        assert_eq!(self.values[beta.0].len(), c);
        let hw = h * w;
        let inv_hw = T::from_f64(1.0 / hw as f64);

        let mut xhat = Tensor::zeros(&[c, h, w]);
        let mut inv_sigma = Tensor::zeros(&[c]);
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let xd = self.values[x.0].data();
            let gd = self.values[gamma.0].data();
            let bd = self.values[beta.0].data();
            for ch in 0..c {
                let xc = &xd[ch * hw..(ch + 1) * hw];
                let mut mean = T::zero();
                for &v in xc {
                    mean += v;
                }
                mean = mean * inv_hw;
                let mut var = T::zero();
                for &v in xc {
                    let d = v - mean;
                    var += d * d;
                }
                var = var * inv_hw;
                let is = T::one() / (var + eps).sqrt();
                inv_sigma.data_mut()[ch] = is;
                let (g, b) = (gd[ch], bd[ch]);
                for i in 0..hw {
                    let xh = (xc[i] - mean) * is;
                    xhat.data_mut()[ch * hw + i] = xh;
                    out.data_mut()[ch * hw + i] = g * xh + b;
                }
            }
        }
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        self.push(
            out,
            Some(Box::new(move |vals, dy, sink| {
                let gd = vals[gi].data();
                let dyd = dy.data();
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let xh = &xhat.data()[ch * hw..(ch + 1) * hw];
                    let dyc = &dyd[ch * hw..(ch + 1) * hw];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xh = T::zero();
                    for i in 0..hw {
                        sum_dy += dyc[i];
                        sum_dy_xh += dyc[i] * xh[i];
                    }
                    dgamma.data_mut()[ch] = sum_dy_xh;
                    dbeta.data_mut()[ch] = sum_dy;
                    let coeff = gd[ch] * inv_sigma.data()[ch];
                    let mean_dy = sum_dy * inv_hw;
                    let mean_dy_xh = sum_dy_xh * inv_hw;
                    let dxc = &mut dx.data_mut()[ch * hw..(ch + 1) * hw];
                    for i in 0..hw {
                        dxc[i] = coeff * (dyc[i] - mean_dy - xh[i] * mean_dy_xh);
                    }
                }
                sink(xi, dx);
                sink(gi, dgamma);
                sink(bi, dbeta);
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let shape = self.values[x.0].shape().to_vec();
        let xi = x.0;
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_vals, dy, sink| {
                let g = dy.item();
                sink(xi, Tensor::filled(&shape, g));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        let inv = T::from_f64(1.0 / n as f64);
        let s = self.values[x.0].sum() * inv;
        let shape = self.values[x.0].shape().to_vec();
        let xi = x.0;
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_vals, dy, sink| {
                let g = dy.item() * inv;
                sink(xi, Tensor::filled(&shape, g));
            })),
        )
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    /// Walk nodes in reverse, accumulating gradients of `loss` (a single
    /// element tensor) with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.values[loss.0].len(),
            1,
            "backward seed must be a scalar"
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if self.backs[id].is_none() {
                continue; // leaf: keep any accumulated gradient
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let back = self.backs[id].as_ref().unwrap();
            back(&self.values, &g, &mut |pid, contrib| {
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Grads { grads }
    }
}

fn channel_sums<T: Real>(data: &[T], channels: usize, hw: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[channels]);
    for ch in 0..channels {
        let mut acc = T::zero();
        for &v in &data[ch * hw..(ch + 1) * hw] {
            acc += v;
        }
        out.data_mut()[ch] = acc;
    }
    out
}

