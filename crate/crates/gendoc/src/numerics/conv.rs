//! 2-D convolution ops for the image backbone and the VQ-VAE.
//!
//! Tensors follow a channels-first layout: activations are `[C, H, W]`,
//! conv weights `[C_out, C_in, kh, kw]`, transposed-conv weights
//! `[C_in, C_out, kh, kw]`.

use super::graph::{Graph, NodeId};
use super::{Scalar, Tensor};

/// Output spatial extent of a strided convolution.
pub fn conv2d_shape(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Output spatial extent of a strided transposed convolution.
pub fn conv_transpose2d_shape(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    ((h - 1) * stride + k - 2 * pad, (w - 1) * stride + k - 2 * pad)
}

impl<F: Scalar> Graph<F> {
    /// Strided 2-D convolution with zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();
        let [ci, h, w]: [usize; 3] = vx.shape().try_into().expect("conv2d input is [C,H,W]");
        let [co, ci2, kh, kw]: [usize; 4] = vw.shape().try_into().expect("conv2d weight rank");
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(vb.numel(), co);
        let (oh, ow) = conv2d_shape(h, w, kh, stride, pad);

        let mut out = vec![F::zero(); co * oh * ow];
        for c_out in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = vb.data()[c_out];
                    for c_in in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += vw.data()
                                    [((c_out * ci + c_in) * kh + ky) * kw + kx]
                                    * vx.data()[(c_in * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(c_out * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let out = Tensor::from_vec(&[co, oh, ow], out).unwrap();
        let bshape = vb.shape().to_vec();
        self.op(vec![x, weight, bias], out, move || {
            Box::new(move |g: &Tensor<F>| {
                let mut dx = vec![F::zero(); ci * h * w];
                let mut dw = vec![F::zero(); co * ci * kh * kw];
                let mut db = vec![F::zero(); co];
                for c_out in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(c_out * oh + oy) * ow + ox];
                            db[c_out] += gv;
                            for c_in in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (c_in * h + iy as usize) * w + ix as usize;
                                        let wi = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                                        dw[wi] += gv * vx.data()[xi];
                                        dx[xi] += gv * vw.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[ci, h, w], dx).unwrap()),
                    Some(Tensor::from_vec(&[co, ci, kh, kw], dw).unwrap()),
                    Some(Tensor::from_vec(&bshape, db).unwrap()),
                ]
            })
        })
    }

    /// Strided 2-D transposed convolution (fractionally-strided upsampling).
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();
        let [ci, h, w]: [usize; 3] = vx.shape().try_into().expect("input is [C,H,W]");
        let [ci2, co, kh, kw]: [usize; 4] = vw.shape().try_into().expect("weight rank");
        assert_eq!(ci, ci2, "conv_transpose2d channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(vb.numel(), co);
        let (oh, ow) = conv_transpose2d_shape(h, w, kh, stride, pad);

        let mut out = vec![F::zero(); co * oh * ow];
        for c_out in 0..co {
            for p in out[c_out * oh * ow..(c_out + 1) * oh * ow].iter_mut() {
                *p = vb.data()[c_out];
            }
        }
        for c_in in 0..ci {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = vx.data()[(c_in * h + iy) * w + ix];
                    for c_out in 0..co {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[(c_out * oh + oy as usize) * ow + ox as usize] += vw.data()
                                    [((c_in * co + c_out) * kh + ky) * kw + kx]
                                    * xv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[co, oh, ow], out).unwrap();
        let bshape = vb.shape().to_vec();
        self.op(vec![x, weight, bias], out, move || {
            Box::new(move |g: &Tensor<F>| {
                let mut dx = vec![F::zero(); ci * h * w];
                let mut dw = vec![F::zero(); ci * co * kh * kw];
                let mut db = vec![F::zero(); co];
                for c_out in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            db[c_out] += g.data()[(c_out * oh + oy) * ow + ox];
                        }
                    }
                }
                for c_in in 0..ci {
                    for iy in 0..h {
                        for ix in 0..w {
                            let xi = (c_in * h + iy) * w + ix;
                            let xv = vx.data()[xi];
                            for c_out in 0..co {
                                for ky in 0..kh {
                                    let oy = (iy * stride + ky) as isize - pad as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ox = (ix * stride + kx) as isize - pad as isize;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        let gi = (c_out * oh + oy as usize) * ow + ox as usize;
                                        let wi = ((c_in * co + c_out) * kh + ky) * kw + kx;
                                        dw[wi] += g.data()[gi] * xv;
                                        dx[xi] += g.data()[gi] * vw.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[ci, h, w], dx).unwrap()),
                    Some(Tensor::from_vec(&[ci, co, kh, kw], dw).unwrap()),
                    Some(Tensor::from_vec(&bshape, db).unwrap()),
                ]
            })
        })
    }

    /// Flatten a `[C, H, W]` feature map into `(H·W)×C` rows, raster order.
    pub fn channels_to_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x).clone();
        let [c, h, w]: [usize; 3] = vx.shape().try_into().expect("input is [C,H,W]");
        let hw = h * w;
        let mut data = vec![F::zero(); hw * c];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = vx.data()[ch * hw + p];
            }
        }
        let out = Tensor::from_vec(&[hw, c], data).unwrap();
        self.op(vec![x], out, move || {
            Box::new(move |g: &Tensor<F>| {
                let mut dx = vec![F::zero(); c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dx[ch * hw + p] = g.data()[p * c + ch];
                    }
                }
                vec![Some(Tensor::from_vec(&[c, h, w], dx).unwrap())]
            })
        })
    }

    /// The inverse of [`Graph::channels_to_rows`]: `(H·W)×C` rows back to
    /// a `[C, H, W]` map.
    pub fn rows_to_channels(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let vx = self.value(x).clone();
        let hw = h * w;
        assert_eq!(vx.shape()[0], hw);
        let c = vx.shape()[1];
        let mut data = vec![F::zero(); c * hw];
        for p in 0..hw {
            for ch in 0..c {
                data[ch * hw + p] = vx.data()[p * c + ch];
            }
        }
        let out = Tensor::from_vec(&[c, h, w], data).unwrap();
        self.op(vec![x], out, move || {
            Box::new(move |g: &Tensor<F>| {
                let mut dx = vec![F::zero(); hw * c];
                for p in 0..hw {
                    for ch in 0..c {
                        dx[p * c + ch] = g.data()[ch * hw + p];
                    }
                }
                vec![Some(Tensor::from_vec(&[hw, c], dx).unwrap())]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_shapes_halve_and_double() {
        assert_eq!(conv2d_shape(64, 64, 4, 2, 1), (32, 32));
        assert_eq!(conv2d_shape(8, 8, 4, 2, 1), (4, 4));
        assert_eq!(conv_transpose2d_shape(4, 4, 4, 2, 1), (8, 8));
        assert_eq!(conv_transpose2d_shape(32, 32, 4, 2, 1), (64, 64));
    }

    #[test]
    fn transpose_then_rows_roundtrip_gradients() {
        // channels_to_rows backward is the exact inverse permutation
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::randn(&[3, 2, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let rows = g.channels_to_rows(x);
        let back = g.rows_to_channels(rows, 2, 2);
        assert_eq!(g.value(back).data(), t.data());
        let loss = g.sum_all(back);
        let grads = g.backward(loss);
        for &v in grads.get(x).unwrap().data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x2x2 input, 1 output channel, k=2, s=1, p=0 -> single position
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let y = g.conv2d(x, w, b, 1, 0);
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data()[0], 0.5 + 10.0 + 40.0 + 90.0 + 160.0);
    }
}
