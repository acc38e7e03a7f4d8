use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use super::grad::{GradPair, Grads};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// A (possibly grouped) 2-D convolution with square kernels.
///
/// `weight` is shaped `(out_channels, in_channels / groups, kernel, kernel)`;
/// output group `g` reads only input group `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Tensor,
    /// Shaped `(1, out_channels, 1, 1)` when present.
    pub bias: Option<Tensor>,
}

impl Conv2dParams {
    /// Bias-free convolution with He-uniform weights, bound `sqrt(6 / fan_in)`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::validate_geometry(in_channels, out_channels, kernel, stride, groups)?;
        let shape = Shape::new(out_channels, in_channels / groups, kernel, kernel)?;
        let fan_in = (in_channels / groups * kernel * kernel) as f64;
        let bound = sqrt(6.0 / fan_in);
        let weight = Tensor::random_uniform_with(shape, rng, -bound, bound)?;
        Ok(Conv2dParams {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight,
            bias: None,
        })
    }

    /// Builds from explicit tensors, checking every invariant.
    pub fn from_weight(
        weight: Tensor,
        bias: Option<Tensor>,
        in_channels: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(Error::InvalidShape("convolution kernels must be square".into()));
        }
        Self::validate_geometry(in_channels, ws.n, ws.h, stride, groups)?;
        let expected = Shape::new(ws.n, in_channels / groups, ws.h, ws.w)?;
        if ws != expected {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                expected,
                found: ws,
            });
        }
        if let Some(b) = &bias {
            let expected = Shape::new(1, ws.n, 1, 1)?;
            if b.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    expected,
                    found: b.shape(),
                });
            }
        }
        Ok(Conv2dParams {
            in_channels,
            out_channels: ws.n,
            kernel: ws.h,
            stride,
            padding,
            groups,
            weight,
            bias,
        })
    }

    fn validate_geometry(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<()> {
        if groups == 0 || !in_channels.is_multiple_of(groups) {
            return Err(Error::NotDivisible {
                what: "conv in_channels",
                value: in_channels,
                divisor: groups,
            });
        }
        if !out_channels.is_multiple_of(groups) {
            return Err(Error::NotDivisible {
                what: "conv out_channels",
                value: out_channels,
                divisor: groups,
            });
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(alloc::format!(
                "convolution kernel must be odd, got {kernel}"
            )));
        }
        if stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfig(
                "stride and channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `out_channels * (in_channels / groups) * kernel^2`, plus the bias.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::InputTooSmall {
                min: self.kernel,
                found: h.min(w) + 2 * self.padding,
            });
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: input.with_channels(self.in_channels),
                found: input,
            });
        }
        let (oh, ow) = self.output_size(input.h, input.w)?;
        Shape::new(input.n, self.out_channels, oh, ow)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

/// Output columns `ow` whose input column `ow * stride + kk - pad` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, kk: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    let hi = if len + pad > kk {
        (len + pad - kk).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Geometry {
    in_shape: Shape,
    out_shape: Shape,
    k: usize,
    stride: usize,
    pad: usize,
    in_per_group: usize,
    out_per_group: usize,
}

impl Geometry {
    /// Visits every (input index, output index, weight index) triple that
    /// contributes to the convolution, row segment by row segment.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (is, os) = (self.in_shape, self.out_shape);
        let s = self.stride;
        for n in 0..is.n {
            for oc in 0..os.c {
                let g = oc / self.out_per_group;
                for icg in 0..self.in_per_group {
                    let ic = g * self.in_per_group + icg;
                    let in_base = (n * is.c + ic) * is.plane();
                    let out_base = (n * os.c + oc) * os.plane();
                    let w_base = (oc * self.in_per_group + icg) * self.k * self.k;
                    for kh in 0..self.k {
                        let (oh_lo, oh_hi) = valid_range(is.h, os.h, kh, self.pad, s);
                        for kw in 0..self.k {
                            let (ow_lo, ow_hi) = valid_range(is.w, os.w, kw, self.pad, s);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let widx = w_base + kh * self.k + kw;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * s + kh - self.pad;
                                let iw0 = ow_lo * s + kw - self.pad;
                                f(
                                    in_base + ih * is.w + iw0,
                                    out_base + oh * os.w + ow_lo,
                                    widx,
                                    ow_hi - ow_lo,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Direct grouped convolution.
///
/// Backward parameter gradients are `[weight]` or `[weight, bias]`.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<GradPair> {
    let out_shape = p.output_shape(x.shape())?;
    let geo = Geometry {
        in_shape: x.shape(),
        out_shape,
        k: p.kernel,
        stride: p.stride,
        pad: p.padding,
        in_per_group: p.in_channels / p.groups,
        out_per_group: p.out_channels / p.groups,
    };
    let mut out = vec![0.0; out_shape.numel()];
    if let Some(b) = &p.bias {
        for (plane, &bv) in out.chunks_exact_mut(out_shape.plane()).zip(b.data().iter().cycle()) {
            plane.fill(bv);
        }
    }
    {
        let xd = x.data();
        let wd = p.weight.data();
        let s = p.stride;
        geo.for_each_row(|i0, o0, widx, len| {
            let wv = wd[widx];
            let dst = &mut out[o0..o0 + len];
            if s == 1 {
                for (o, &v) in dst.iter_mut().zip(&xd[i0..i0 + len]) {
                    *o += wv * v;
                }
            } else {
                for (j, o) in dst.iter_mut().enumerate() {
                    *o += wv * xd[i0 + j * s];
                }
            }
        });
    }
    let output = Tensor::from_vec(out_shape, out)?;

    let input = x.clone();
    let weight = p.weight.clone();
    let has_bias = p.bias.is_some();
    Ok(GradPair::new(output, move |g| {
        let gd = g.data();
        let xd = input.data();
        let wd = weight.data();
        let s = geo.stride;
        let mut gx = vec![0.0; geo.in_shape.numel()];
        let mut gw = vec![0.0; wd.len()];
        geo.for_each_row(|i0, o0, widx, len| {
            let wv = wd[widx];
            let gsrc = &gd[o0..o0 + len];
            let mut acc = 0.0;
            if s == 1 {
                for ((gxv, &xv), &gv) in gx[i0..i0 + len].iter_mut().zip(&xd[i0..i0 + len]).zip(gsrc) {
                    *gxv += wv * gv;
                    acc += gv * xv;
                }
            } else {
                for (j, &gv) in gsrc.iter().enumerate() {
                    gx[i0 + j * s] += wv * gv;
                    acc += gv * xd[i0 + j * s];
                }
            }
            gw[widx] += acc;
        });
        let mut params = vec![Tensor::from_vec(weight.shape(), gw)?];
        if has_bias {
            let per_channel = g.spatial_sum();
            let c = geo.out_shape.c;
            let mut gb = vec![0.0; c];
            for (i, v) in per_channel.data().iter().enumerate() {
                gb[i % c] += v;
            }
            params.push(Tensor::from_vec(Shape::new(1, c, 1, 1)?, gb)?);
        }
        Ok(Grads {
            input: Tensor::from_vec(geo.in_shape, gx)?,
            params,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff::{finite_difference_gradient, max_relative_error};
    use crate::rng::seeded;

    /// Textbook six-loop convolution, kept independent of the row-segment kernel.
    fn naive_conv(x: &Tensor, p: &Conv2dParams) -> Tensor {
        let is = x.shape();
        let os = p.output_shape(is).unwrap();
        let ipg = p.in_channels / p.groups;
        let opg = p.out_channels / p.groups;
        let mut out = Tensor::zeros(os);
        for n in 0..os.n {
            for oc in 0..os.c {
                let g = oc / opg;
                for oh in 0..os.h {
                    for ow in 0..os.w {
                        let mut acc = p.bias.as_ref().map_or(0.0, |b| b.get(0, oc, 0, 0));
                        for icg in 0..ipg {
                            for kh in 0..p.kernel {
                                for kw in 0..p.kernel {
                                    let ih = (oh * p.stride + kh) as isize - p.padding as isize;
                                    let iw = (ow * p.stride + kw) as isize - p.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= is.h as isize || iw >= is.w as isize {
                                        continue;
                                    }
                                    acc += p.weight.get(oc, icg, kh, kw)
                                        * x.get(n, g * ipg + icg, ih as usize, iw as usize);
                                }
                            }
                        }
                        let idx = os.index(n, oc, oh, ow);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn depthwise_unit_kernel_is_identity() {
        let x = Tensor::random_uniform(shape(2, 4, 5, 5), 1, -1.0, 1.0).unwrap();
        let w = Tensor::full(shape(4, 1, 1, 1), 1.0);
        let p = Conv2dParams::from_weight(w, None, 4, 1, 0, 4).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().output, x);
    }

    #[test]
    fn grouped_matches_naive_oracle() {
        let mut rng = seeded(3);
        let x = Tensor::random_uniform(shape(1, 4, 5, 5), 2, -1.0, 1.0).unwrap();
        let p = Conv2dParams::new(4, 4, 3, 1, 1, 2, &mut rng).unwrap();
        let y = conv2d(&x, &p).unwrap().output;
        assert!(y.max_abs_diff(&naive_conv(&x, &p)).unwrap() < 1e-13);
    }

    #[test]
    fn strided_biased_matches_naive_oracle() {
        let mut rng = seeded(4);
        for &(k, s, pad, g, h) in &[
            (3, 2, 1, 1, 7),
            (5, 2, 2, 2, 8),
            (7, 1, 3, 4, 6),
            (1, 2, 0, 1, 5),
            (9, 2, 4, 4, 9),
        ] {
            let x = Tensor::random_uniform(shape(2, 8, h, h + 1), k as u64, -1.0, 1.0).unwrap();
            let mut p = Conv2dParams::new(8, 4, k, s, pad, g, &mut rng).unwrap();
            p.bias = Some(Tensor::random_uniform(shape(1, 4, 1, 1), 9, -1.0, 1.0).unwrap());
            let y = conv2d(&x, &p).unwrap().output;
            assert!(y.max_abs_diff(&naive_conv(&x, &p)).unwrap() < 1e-12, "k={k} s={s}");
        }
    }

    #[test]
    fn output_spatial_size_formula() {
        let mut rng = seeded(5);
        let p = Conv2dParams::new(3, 8, 7, 2, 3, 1, &mut rng).unwrap();
        assert_eq!(p.output_size(224, 224).unwrap(), (112, 112));
        let p = Conv2dParams::new(8, 8, 9, 1, 4, 8, &mut rng).unwrap();
        assert_eq!(p.output_size(13, 9).unwrap(), (13, 9));
    }

    #[test]
    fn param_count_matches_formula() {
        let mut rng = seeded(6);
        let p = Conv2dParams::new(16, 16, 5, 1, 2, 4, &mut rng).unwrap();
        assert_eq!(p.weight.shape(), shape(16, 4, 5, 5));
        assert_eq!(p.param_count(), 1600);
        assert_eq!(p.param_count(), 16 * (16 / 4) * 25);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut rng = seeded(7);
        assert!(Conv2dParams::new(6, 8, 3, 1, 1, 4, &mut rng).is_err());
        assert!(Conv2dParams::new(8, 6, 3, 1, 1, 4, &mut rng).is_err());
        assert!(Conv2dParams::new(8, 8, 4, 1, 1, 1, &mut rng).is_err());
        let p = Conv2dParams::new(4, 4, 3, 1, 1, 1, &mut rng).unwrap();
        let x = Tensor::zeros(shape(1, 3, 5, 5));
        assert!(conv2d(&x, &p).is_err());
        let p = Conv2dParams::new(4, 4, 7, 1, 0, 1, &mut rng).unwrap();
        assert!(conv2d(&Tensor::zeros(shape(1, 4, 5, 5)), &p).is_err());
    }

    #[test]
    fn groups_equal_independent_slices() {
        let mut rng = seeded(8);
        let x = Tensor::random_uniform(shape(2, 8, 6, 6), 10, -1.0, 1.0).unwrap();
        let p = Conv2dParams::new(8, 12, 3, 1, 1, 4, &mut rng).unwrap();
        let y = conv2d(&x, &p).unwrap().output;
        let xs = x.split_channels(4).unwrap();
        let ws = p.weight.reshape(shape(1, 12, 2 * 3, 3)).unwrap();
        let parts: Vec<Tensor> = (0..4)
            .map(|g| {
                let wg = ws.slice_channels(g * 3, 3).unwrap().reshape(shape(3, 2, 3, 3)).unwrap();
                let pg = Conv2dParams::from_weight(wg, None, 2, 1, 1, 1).unwrap();
                conv2d(&xs[g], &pg).unwrap().output
            })
            .collect();
        assert_eq!(Tensor::concat_channels(&parts).unwrap(), y);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(9);
        let x = Tensor::random_uniform(shape(2, 4, 6, 5), 11, -1.0, 1.0).unwrap();
        let mut p = Conv2dParams::new(4, 6, 3, 2, 1, 2, &mut rng).unwrap();
        p.bias = Some(Tensor::random_uniform(shape(1, 6, 1, 1), 12, -1.0, 1.0).unwrap());
        let pair = conv2d(&x, &p).unwrap();
        let proj = Tensor::random_uniform(pair.output.shape(), 13, -1.0, 1.0).unwrap();
        let grads = pair.backward(&proj).unwrap();

        let gx = finite_difference_gradient(|t| conv2d(t, &p).unwrap().output.dot(&proj).unwrap(), &x, 1e-5);
        assert!(max_relative_error(&grads.input, &gx) < 1e-6);

        let gw = finite_difference_gradient(
            |w| {
                let mut q = p.clone();
                q.weight = w.clone();
                conv2d(&x, &q).unwrap().output.dot(&proj).unwrap()
            },
            &p.weight,
            1e-5,
        );
        assert!(max_relative_error(&grads.params[0], &gw) < 1e-6);
        let bias = p.bias.clone().unwrap();
        let gb = finite_difference_gradient(
            |b| {
                let mut q = p.clone();
                q.bias = Some(b.clone());
                conv2d(&x, &q).unwrap().output.dot(&proj).unwrap()
            },
            &bias,
            1e-5,
        );
        assert!(max_relative_error(&grads.params[1], &gb) < 1e-6);
    }
}
