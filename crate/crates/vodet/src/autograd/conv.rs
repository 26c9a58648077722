//! Convolutional ops. `conv2d` goes through im2col and a single matmul;
//! the transposed convolution is written as direct scatter loops (it only
//! ever runs on small RoI grids).

use super::{Tape, VarId};
use ndarray::{Array1, Array2, Array4, Ix1, Ix4};
#[cfg(test)]
use ndarray::ArrayD;

fn im2col(x: &Array4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, cin, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, n * ho * wo));
    for ni in 0..n {
        for ci in 0..cin {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = (ci * kh + khi) * kw + kwi;
                    for hi in 0..ho {
                        let src_h = (hi * stride + khi) as isize - pad as isize;
                        if src_h < 0 || src_h >= h as isize {
                            continue;
                        }
                        for wi in 0..wo {
                            let src_w = (wi * stride + kwi) as isize - pad as isize;
                            if src_w < 0 || src_w >= w as isize {
                                continue;
                            }
                            cols[[row, (ni * ho + hi) * wo + wi]] =
                                x[[ni, ci, src_h as usize, src_w as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut dx = Array4::<f64>::zeros((n, cin, h, w));
    for ni in 0..n {
        for ci in 0..cin {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = (ci * kh + khi) * kw + kwi;
                    for hi in 0..ho {
                        let src_h = (hi * stride + khi) as isize - pad as isize;
                        if src_h < 0 || src_h >= h as isize {
                            continue;
                        }
                        for wi in 0..wo {
                            let src_w = (wi * stride + kwi) as isize - pad as isize;
                            if src_w < 0 || src_w >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, src_h as usize, src_w as usize]] +=
                                dcols[[row, (ni * ho + hi) * wo + wi]];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    fn as4(&self, id: VarId) -> Array4<f64> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4-D node required")
            .to_owned()
    }

    /// `x (N,Cin,H,W) * w (Cout,Cin,kh,kw) + b (Cout)`.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let xv = self.as4(x);
        let wv = self.as4(w);
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let (n, cin, h, width) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(bv.len(), cout);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (width + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad);
        let w2 = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let y2 = w2.dot(&cols); // (Cout, N*Ho*Wo)

        let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for hi in 0..ho {
                    for wi in 0..wo {
                        out[[ni, co, hi, wi]] = y2[[co, (ni * ho + hi) * wo + wi]] + bv[co];
                    }
                }
            }
        }

        self.push_op(
            out.into_dyn(),
            vec![x, w, b],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut g2 = Array2::<f64>::zeros((cout, n * ho * wo));
                for ni in 0..n {
                    for co in 0..cout {
                        for hi in 0..ho {
                            for wi in 0..wo {
                                g2[[co, (ni * ho + hi) * wo + wi]] = g4[[ni, co, hi, wi]];
                            }
                        }
                    }
                }
                let cols = im2col(&xv, kh, kw, stride, pad);
                let dw2 = g2.dot(&cols.t());
                let dw = dw2.into_shape_with_order((cout, cin, kh, kw)).unwrap();
                let db = Array1::from_iter((0..cout).map(|co| g2.row(co).sum()));
                let dcols = w2.t().dot(&g2);
                let dx = col2im(&dcols, n, cin, h, width, kh, kw, stride, pad);
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }),
        )
    }

    /// Transposed convolution with `kernel == stride` and no padding, the
    /// resolution-doubling deconvolution. `x (N,Cin,H,W) * w (Cin,Cout,k,k)`.
    ///
    /// With `kernel == stride` the output positions written by different
    /// kernel offsets are disjoint, so the whole op is `k*k` independent
    /// matrix products.
    pub fn conv_transpose2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize) -> VarId {
        let xv = self.as4(x);
        let wv = self.as4(w);
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let (n, cin, h, width) = xv.dim();
        let (cin_w, cout, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
        assert_eq!(kh, stride);
        assert_eq!(kw, stride);
        let ho = h * stride;
        let wo = width * stride;
        let cols = n * h * width;

        // x as (Cin, N*H*W)
        let mut x2 = Array2::<f64>::zeros((cin, cols));
        for ni in 0..n {
            for ci in 0..cin {
                for hi in 0..h {
                    for wi in 0..width {
                        x2[[ci, (ni * h + hi) * width + wi]] = xv[[ni, ci, hi, wi]];
                    }
                }
            }
        }

        let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
        for khi in 0..kh {
            for kwi in 0..kw {
                let wk = wv.slice(ndarray::s![.., .., khi, kwi]); // (Cin, Cout)
                let yk = wk.t().dot(&x2); // (Cout, N*H*W)
                for ni in 0..n {
                    for co in 0..cout {
                        for hi in 0..h {
                            for wi in 0..width {
                                out[[ni, co, hi * stride + khi, wi * stride + kwi]] =
                                    yk[[co, (ni * h + hi) * width + wi]] + bv[co];
                            }
                        }
                    }
                }
            }
        }

        self.push_op(
            out.into_dyn(),
            vec![x, w, b],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx2 = Array2::<f64>::zeros((cin, cols));
                let mut dw = Array4::<f64>::zeros((cin, cout, kh, kw));
                let mut db = Array1::<f64>::zeros(cout);
                let mut gk = Array2::<f64>::zeros((cout, cols));
                for khi in 0..kh {
                    for kwi in 0..kw {
                        for ni in 0..n {
                            for co in 0..cout {
                                for hi in 0..h {
                                    for wi in 0..width {
                                        gk[[co, (ni * h + hi) * width + wi]] =
                                            g4[[ni, co, hi * stride + khi, wi * stride + kwi]];
                                    }
                                }
                            }
                        }
                        let wk = wv.slice(ndarray::s![.., .., khi, kwi]); // (Cin, Cout)
                        dx2 += &wk.dot(&gk);
                        let dwk = x2.dot(&gk.t()); // (Cin, Cout)
                        dw.slice_mut(ndarray::s![.., .., khi, kwi]).assign(&dwk);
                        for co in 0..cout {
                            db[co] += gk.row(co).sum();
                        }
                    }
                }
                let mut dx = Array4::<f64>::zeros((n, cin, h, width));
                for ni in 0..n {
                    for ci in 0..cin {
                        for hi in 0..h {
                            for wi in 0..width {
                                dx[[ni, ci, hi, wi]] = dx2[[ci, (ni * h + hi) * width + wi]];
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }),
        )
    }

    /// Spatial mean per sample and channel: `(N,C,H,W)` to `(N,C)`.
    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        let xv = self.as4(x);
        let (n, c, h, w) = xv.dim();
        let denom = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        acc += xv[[ni, ci, hi, wi]];
                    }
                }
                out[[ni, ci]] = acc / denom;
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = g2[[ni, ci]] / denom;
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[[ni, ci, hi, wi]] = v;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::max_rel_err_fd;
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::stream_rng(seed, 78);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.5..0.5))
    }

    fn sl1_loss(t: &mut Tape, y: VarId) -> VarId {
        let rows = t.nchw_to_rows(y);
        let shape = t.value(rows).shape().to_vec();
        let target = Array2::<f64>::zeros((shape[0], shape[1]));
        let w = vec![1.0; shape[0]];
        t.smooth_l1(rows, &target, &w, shape[0] as f64)
    }

    #[test]
    fn conv2d_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(rand_arr(&[2, 3, 8, 8], 1));
        let w = t.leaf(rand_arr(&[5, 3, 3, 3], 2));
        let b = t.leaf(rand_arr(&[5], 3));
        let y = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.value(y).shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn conv2d_grads_match_fd() {
        let xv = rand_arr(&[1, 2, 6, 6], 4);
        let wv = rand_arr(&[3, 2, 3, 3], 5);
        let bv = rand_arr(&[3], 6);
        let eval = |x_in: &ArrayD<f64>, w_in: &ArrayD<f64>, b_in: &ArrayD<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(x_in.clone());
            let w = t.leaf(w_in.clone());
            let b = t.leaf(b_in.clone());
            let y = t.conv2d(x, w, b, 2, 1);
            let loss = sl1_loss(&mut t, y);
            (t.scalar(loss), t, loss, [x, w, b])
        };
        let (_, t, loss, ids) = eval(&xv, &wv, &bv);
        let g = t.backward(loss);
        let ex = max_rel_err_fd(|v| eval(v, &wv, &bv).0, &xv, g.get(ids[0]).unwrap(), 1e-5);
        let ew = max_rel_err_fd(|v| eval(&xv, v, &bv).0, &wv, g.get(ids[1]).unwrap(), 1e-5);
        let eb = max_rel_err_fd(|v| eval(&xv, &wv, v).0, &bv, g.get(ids[2]).unwrap(), 1e-5);
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "conv2d {ex} {ew} {eb}");
    }

    #[test]
    fn conv_transpose_doubles_and_matches_fd() {
        let xv = rand_arr(&[1, 3, 4, 4], 7);
        let wv = rand_arr(&[3, 2, 2, 2], 8);
        let bv = rand_arr(&[2], 9);
        let eval = |x_in: &ArrayD<f64>, w_in: &ArrayD<f64>, b_in: &ArrayD<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(x_in.clone());
            let w = t.leaf(w_in.clone());
            let b = t.leaf(b_in.clone());
            let y = t.conv_transpose2d(x, w, b, 2);
            assert_eq!(t.value(y).shape(), &[1, 2, 8, 8]);
            let loss = sl1_loss(&mut t, y);
            (t.scalar(loss), t, loss, [x, w, b])
        };
        let (_, t, loss, ids) = eval(&xv, &wv, &bv);
        let g = t.backward(loss);
        let ex = max_rel_err_fd(|v| eval(v, &wv, &bv).0, &xv, g.get(ids[0]).unwrap(), 1e-5);
        let ew = max_rel_err_fd(|v| eval(&xv, v, &bv).0, &wv, g.get(ids[1]).unwrap(), 1e-5);
        let eb = max_rel_err_fd(|v| eval(&xv, &wv, v).0, &bv, g.get(ids[2]).unwrap(), 1e-5);
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "deconv {ex} {ew} {eb}");
    }

    #[test]
    fn avg_pool_is_mean() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 2.5));
        let y = t.global_avg_pool(x);
        assert_eq!(t.value(y).shape(), &[1, 2]);
        assert!((t.value(y)[[0, 0]] - 2.5).abs() < 1e-15);
    }
}
