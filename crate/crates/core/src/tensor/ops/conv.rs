//! N-dimensional (1-3 spatial dims) grouped cross-correlation via im2col.

use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Stride, zero padding and channel groups of a convolution.
///
/// `stride` and `padding` have one entry per spatial dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, given padding, one group.
    pub fn same(padding: &[usize]) -> Self {
        Self {
            stride: vec![1; padding.len()],
            padding: padding.to_vec(),
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }
}

/// Conv problem normalized to three spatial dims.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn new(x: &[usize], k: &[usize], spec: &ConvSpec) -> Result<Self> {
        let nd = x.len().wrapping_sub(2);
        if !(1..=3).contains(&nd) || k.len() != x.len() {
            return Err(Error::dim("conv_nd", x, k));
        }
        if spec.stride.len() != nd || spec.padding.len() != nd {
            return Err(Error::Config(format!(
                "conv_nd: stride/padding need {nd} entries, got {:?}/{:?}",
                spec.stride, spec.padding
            )));
        }
        if spec.groups == 0 || !x[1].is_multiple_of(spec.groups) || !k[0].is_multiple_of(spec.groups) {
            return Err(Error::Config(format!(
                "conv_nd: groups {} must divide input channels {} and output channels {}",
                spec.groups, x[1], k[0]
            )));
        }
        if k[1] * spec.groups != x[1] {
            return Err(Error::dim("conv_nd", x, k));
        }
        let mut g = Geom {
            batch: x[0],
            cin: x[1],
            cout: k[0],
            groups: spec.groups,
            input: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
            out: [1; 3],
        };
        let off = 3 - nd;
        for d in 0..nd {
            let (i, kk, s, p) = (x[2 + d], k[2 + d], spec.stride[d], spec.padding[d]);
            if s == 0 {
                return Err(Error::Config("conv_nd: zero stride".into()));
            }
            if kk == 0 || kk > i + 2 * p {
                return Err(Error::dim("conv_nd", x, k));
            }
            g.input[off + d] = i;
            g.kernel[off + d] = kk;
            g.stride[off + d] = s;
            g.pad[off + d] = p;
            g.out[off + d] = (i + 2 * p - kk) / s + 1;
        }
        Ok(g)
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }
    fn out_len(&self) -> usize {
        self.out.iter().product()
    }
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Output positions `[lo, hi)` along one axis whose input index
    /// `o * stride + k - pad` falls inside `0..len`.
    fn valid_range(len: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Fills `col` (`cin_g*kvol x out_len`) from one group of one sample.
    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let l = self.out_len();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let (lo, hi) = Self::valid_range(iw, ow, sw, e, pw);
                        let dst = &mut col[row * l..(row + 1) * l];
                        let mut o = 0;
                        for zd in 0..od {
                            let z = (zd * sd + a) as isize - pd as isize;
                            for yh in 0..oh {
                                let y = (yh * sh + b) as isize - ph as isize;
                                let d = &mut dst[o..o + ow];
                                o += ow;
                                if !(z >= 0 && z < id as isize && y >= 0 && y < ih as isize) {
                                    d.fill(T::zero());
                                    continue;
                                }
                                let base = (z as usize * ih + y as usize) * iw + e;
                                d[..lo].fill(T::zero());
                                d[hi..].fill(T::zero());
                                if sw == 1 {
                                    d[lo..hi].copy_from_slice(&xc[base + lo - pw..base + hi - pw]);
                                } else {
                                    for (xw, v) in d[lo..hi].iter_mut().enumerate() {
                                        *v = xc[base + (lo + xw) * sw - pw];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into one group of one sample of `dx`.
    fn col2im<T: Element>(&self, col: &[T], dx: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let l = self.out_len();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let dc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let (lo, hi) = Self::valid_range(iw, ow, sw, e, pw);
                        let src = &col[row * l..(row + 1) * l];
                        let mut o = 0;
                        for zd in 0..od {
                            let z = (zd * sd + a) as isize - pd as isize;
                            for yh in 0..oh {
                                let y = (yh * sh + b) as isize - ph as isize;
                                let s = &src[o..o + ow];
                                o += ow;
                                if !(z >= 0 && z < id as isize && y >= 0 && y < ih as isize) {
                                    continue;
                                }
                                let base = (z as usize * ih + y as usize) * iw + e;
                                if sw == 1 {
                                    let d = &mut dc[base + lo - pw..base + hi - pw];
                                    for (t, &v) in d.iter_mut().zip(&s[lo..hi]) {
                                        *t = *t + v;
                                    }
                                } else {
                                    for (xw, &v) in s[lo..hi].iter().enumerate() {
                                        let t = &mut dc[base + (lo + xw) * sw - pw];
                                        *t = *t + v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn out_shape(x: &[usize], g: &Geom) -> Vec<usize> {
    let nd = x.len() - 2;
    let mut s = vec![g.batch, g.cout];
    s.extend_from_slice(&g.out[3 - nd..]);
    s
}

/// Forward convolution on plain tensors.
///
/// `x` is `[N, C_in, s1..sk]`, `kernel` is `[C_out, C_in/groups, k1..kk]`,
/// `bias` is `[C_out]`. Cross-correlation (no kernel flip), zero padding.
pub fn conv_nd<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), kernel.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::dim("conv_nd bias", b.shape(), &[g.cout]));
        }
    }
    let (l, kc, cin_g, cout_g) = (g.out_len(), g.cin_g() * g.kvol(), g.cin_g(), g.cout_g());
    let in_len = g.in_len();
    let mut out = vec![T::zero(); g.batch * g.cout * l];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kc * l]
    };
    let (xd, kd) = (x.data(), kernel.data());
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &xd[(n * g.cin + grp * cin_g) * in_len..(n * g.cin + (grp + 1) * cin_g) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut col);
                &col
            };
            let w = &kd[grp * cout_g * kc..(grp + 1) * cout_g * kc];
            let o0 = (n * g.cout + grp * cout_g) * l;
            let os = &mut out[o0..o0 + cout_g * l];
            T::gemm(cout_g, kc, l, T::one(), w, (kc, 1), cols, (l, 1), T::zero(), os, (l, 1));
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                let o0 = (n * g.cout + co) * l;
                out[o0..o0 + l].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new(out_shape(x.shape(), &g), out)
}

struct ConvBackward {
    geom: Geom,
    has_bias: bool,
}

impl<T: Element> Backward<T> for ConvBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let x = values.get(inputs[0]).data();
        let w = values.get(inputs[1]).data();
        let (l, kc, cin_g, cout_g) = (g.out_len(), g.cin_g() * g.kvol(), g.cin_g(), g.cout_g());
        let in_len = g.in_len();
        let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
        let pointwise = g.is_pointwise();
        let mut col = vec![T::zero(); if pointwise { 0 } else { kc * l }];
        let mut dcol = vec![T::zero(); if pointwise { 0 } else { kc * l }];

        for n in 0..g.batch {
            for grp in 0..g.groups {
                let xr = (n * g.cin + grp * cin_g) * in_len..(n * g.cin + (grp + 1) * cin_g) * in_len;
                let o0 = (n * g.cout + grp * cout_g) * l;
                let go = &gout[o0..o0 + cout_g * l];
                let wg = &w[grp * cout_g * kc..(grp + 1) * cout_g * kc];
                if let Some(dw) = dw.as_mut() {
                    let cols: &[T] = if pointwise {
                        &x[xr.clone()]
                    } else {
                        g.im2col(&x[xr.clone()], &mut col);
                        &col
                    };
                    let dwg = &mut dw[grp * cout_g * kc..(grp + 1) * cout_g * kc];
                    T::gemm(cout_g, l, kc, T::one(), go, (l, 1), cols, (1, l), T::one(), dwg, (kc, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    if pointwise {
                        let dxs = &mut dx[xr];
                        T::gemm(kc, cout_g, l, T::one(), wg, (1, kc), go, (l, 1), T::one(), dxs, (l, 1));
                    } else {
                        T::gemm(kc, cout_g, l, T::one(), wg, (1, kc), go, (l, 1), T::zero(), &mut dcol, (l, 1));
                        g.col2im(&dcol, &mut dx[xr]);
                    }
                }
            }
        }

        let mut res = vec![dx, dw];
        if self.has_bias {
            let db = need[2].then(|| {
                let mut db = vec![T::zero(); g.cout];
                for n in 0..g.batch {
                    for (co, d) in db.iter_mut().enumerate() {
                        let o0 = (n * g.cout + co) * l;
                        *d = gout[o0..o0 + l].iter().fold(*d, |a, &v| a + v);
                    }
                }
                db
            });
            res.push(db);
        }
        res
    }
}

impl<T: Element> Graph<T> {
    /// Differentiable [`conv_nd`].
    pub fn conv_nd(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = Geom::new(self.shape(x), self.shape(kernel), spec)?;
        let out = conv_nd(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "conv_nd",
            out,
            inputs,
            Box::new(ConvBackward {
                geom,
                has_bias: bias.is_some(),
            }),
        )
    }
}
