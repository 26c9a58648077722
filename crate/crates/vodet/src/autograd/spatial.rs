//! Spatial ops that move between feature maps and fixed RoI grids. All three
//! are linear in the feature values, so their backward passes reuse the
//! forward tap weights.
//!
//! Coordinate convention: the value at array index `(h, w)` sits at the
//! continuous point `(w + 0.5, h + 0.5)`; samples are clamped to the edge.

use super::{Tape, VarId};
use ndarray::{Array4, ArrayD, Ix3, Ix4, IxDyn};

/// Four bilinear taps (h, w, weight) for one sample point.
fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> [(usize, usize, f64); 4] {
    let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    [
        (v0, u0, (1.0 - fv) * (1.0 - fu)),
        (v0, u1, (1.0 - fv) * fu),
        (v1, u0, fv * (1.0 - fu)),
        (v1, u1, fv * fu),
    ]
}

/// One RoI in feature-map coordinates.
#[derive(Debug, Clone, Copy)]
pub struct AlignRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Tape {
    /// RoIAlign: pool each region into a `(C, size, size)` grid using 2x2
    /// bilinear sample points per bin, averaged. Output is `(K, C, size,
    /// size)`. Regions must already be expressed in feature-map coordinates
    /// and lie inside the map.
    pub fn roi_align(&mut self, fmap: VarId, regions: &[AlignRegion], size: usize) -> VarId {
        let fv = self
            .value(fmap)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("roi_align expects (C,H,W)")
            .to_owned();
        let (c, h, w) = fv.dim();
        let k = regions.len();

        // taps per (k * size * size) bin; each holds up to 16 weighted taps
        let mut taps: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(k * size * size);
        for r in regions {
            let bw = (r.x2 - r.x1) / size as f64;
            let bh = (r.y2 - r.y1) / size as f64;
            for i in 0..size {
                for j in 0..size {
                    let mut bin = Vec::with_capacity(16);
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let x = r.x1 + (j as f64 + (sx as f64 + 0.5) / 2.0) * bw;
                            let y = r.y1 + (i as f64 + (sy as f64 + 0.5) / 2.0) * bh;
                            for (th, tw, tv) in bilinear_taps(x, y, w, h) {
                                bin.push((th, tw, tv * 0.25));
                            }
                        }
                    }
                    taps.push(bin);
                }
            }
        }

        let mut out = Array4::<f64>::zeros((k, c, size, size));
        for ki in 0..k {
            for i in 0..size {
                for j in 0..size {
                    let bin = &taps[(ki * size + i) * size + j];
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for &(th, tw, tv) in bin {
                            acc += tv * fv[[ci, th, tw]];
                        }
                        out[[ki, ci, i, j]] = acc;
                    }
                }
            }
        }

        self.push_op(
            out.into_dyn(),
            vec![fmap],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dfm = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for ki in 0..k {
                    for i in 0..size {
                        for j in 0..size {
                            let bin = &taps[(ki * size + i) * size + j];
                            for ci in 0..c {
                                let go = g4[[ki, ci, i, j]];
                                for &(th, tw, tv) in bin {
                                    dfm[[ci, th, tw]] += go * tv;
                                }
                            }
                        }
                    }
                }
                vec![dfm]
            }),
        )
    }

    /// Bilinear resize of `(N,C,Hin,Win)` to `(N,C,Hout,Wout)`, sampling at
    /// output-cell centers.
    pub fn bilinear_resize(&mut self, x: VarId, hout: usize, wout: usize) -> VarId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("bilinear_resize expects (N,C,H,W)")
            .to_owned();
        let (n, c, hin, win) = xv.dim();

        let col_taps: Vec<(usize, usize, f64)> = (0..wout)
            .map(|j| {
                let u = ((j as f64 + 0.5) * win as f64 / wout as f64 - 0.5)
                    .clamp(0.0, (win - 1) as f64);
                let u0 = u.floor() as usize;
                (u0, (u0 + 1).min(win - 1), u - u0 as f64)
            })
            .collect();
        let row_taps: Vec<(usize, usize, f64)> = (0..hout)
            .map(|i| {
                let v = ((i as f64 + 0.5) * hin as f64 / hout as f64 - 0.5)
                    .clamp(0.0, (hin - 1) as f64);
                let v0 = v.floor() as usize;
                (v0, (v0 + 1).min(hin - 1), v - v0 as f64)
            })
            .collect();

        let mut out = Array4::<f64>::zeros((n, c, hout, wout));
        for ni in 0..n {
            for ci in 0..c {
                for (i, &(v0, v1, fv)) in row_taps.iter().enumerate() {
                    for (j, &(u0, u1, fu)) in col_taps.iter().enumerate() {
                        out[[ni, ci, i, j]] = (1.0 - fv) * (1.0 - fu) * xv[[ni, ci, v0, u0]]
                            + (1.0 - fv) * fu * xv[[ni, ci, v0, u1]]
                            + fv * (1.0 - fu) * xv[[ni, ci, v1, u0]]
                            + fv * fu * xv[[ni, ci, v1, u1]];
                    }
                }
            }
        }

        self.push_op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, hin, win));
                for ni in 0..n {
                    for ci in 0..c {
                        for (i, &(v0, v1, fv)) in row_taps.iter().enumerate() {
                            for (j, &(u0, u1, fu)) in col_taps.iter().enumerate() {
                                let go = g4[[ni, ci, i, j]];
                                dx[[ni, ci, v0, u0]] += go * (1.0 - fv) * (1.0 - fu);
                                dx[[ni, ci, v0, u1]] += go * (1.0 - fv) * fu;
                                dx[[ni, ci, v1, u0]] += go * fv * (1.0 - fu);
                                dx[[ni, ci, v1, u1]] += go * fv * fu;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Gather whole feature columns from `(C,H,W)` at `size*size` spatial
    /// positions (row-major over the output grid) into `(C,size,size)`.
    pub fn gather_positions(&mut self, fmap: VarId, positions: &[(usize, usize)], size: usize) -> VarId {
        assert_eq!(positions.len(), size * size);
        let fv = self
            .value(fmap)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("gather_positions expects (C,H,W)")
            .to_owned();
        let (c, h, w) = fv.dim();
        let pos = positions.to_vec();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, size, size]));
        for (p, &(ph, pw)) in pos.iter().enumerate() {
            let (i, j) = (p / size, p % size);
            for ci in 0..c {
                out[[ci, i, j]] = fv[[ci, ph, pw]];
            }
        }
        self.push_op(
            out,
            vec![fmap],
            Box::new(move |g| {
                let mut dfm = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for (p, &(ph, pw)) in pos.iter().enumerate() {
                    let (i, j) = (p / size, p % size);
                    for ci in 0..c {
                        dfm[[ci, ph, pw]] += g[[ci, i, j]];
                    }
                }
                vec![dfm]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::max_rel_err_fd;
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::stream_rng(seed, 79);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.5..0.5))
    }

    #[test]
    fn roi_align_constant_field() {
        let mut t = Tape::new();
        let fmap = t.leaf(ArrayD::from_elem(IxDyn(&[2, 8, 8]), 3.0));
        let r = AlignRegion {
            x1: 1.2,
            y1: 0.7,
            x2: 6.9,
            y2: 7.3,
        };
        let out = t.roi_align(fmap, &[r], 4);
        for v in t.value(out).iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_grads_match_fd() {
        let fv = rand_arr(&[2, 6, 6], 21);
        let r = AlignRegion {
            x1: 1.0,
            y1: 1.5,
            x2: 5.0,
            y2: 4.5,
        };
        let eval = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let f = t.leaf(x.clone());
            let out = t.roi_align(f, &[r], 3);
            let rows = t.nchw_to_rows(out);
            let shape = t.value(rows).shape().to_vec();
            let target = Array2::<f64>::zeros((shape[0], shape[1]));
            let loss = t.smooth_l1(rows, &target, &vec![1.0; shape[0]], 1.0);
            (t.scalar(loss), t, loss, f)
        };
        let (_, t, loss, f) = eval(&fv);
        let g = t.backward(loss);
        let err = max_rel_err_fd(|x| eval(x).0, &fv, g.get(f).unwrap(), 1e-5);
        assert!(err < 1e-6, "roi_align rel err {err}");
    }

    #[test]
    fn resize_grads_match_fd() {
        let xv = rand_arr(&[1, 2, 3, 3], 22);
        let eval = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(x.clone());
            let out = t.bilinear_resize(a, 6, 6);
            let rows = t.nchw_to_rows(out);
            let shape = t.value(rows).shape().to_vec();
            let target = Array2::<f64>::zeros((shape[0], shape[1]));
            let loss = t.smooth_l1(rows, &target, &vec![1.0; shape[0]], 1.0);
            (t.scalar(loss), t, loss, a)
        };
        let (_, t, loss, a) = eval(&xv);
        let g = t.backward(loss);
        let err = max_rel_err_fd(|x| eval(x).0, &xv, g.get(a).unwrap(), 1e-5);
        assert!(err < 1e-6, "resize rel err {err}");
    }

    #[test]
    fn resize_identity_when_same_size() {
        let xv = rand_arr(&[1, 1, 4, 4], 23);
        let mut t = Tape::new();
        let a = t.leaf(xv.clone());
        let out = t.bilinear_resize(a, 4, 4);
        assert_eq!(t.value(out), &xv);
    }

    #[test]
    fn gather_positions_copies_columns() {
        let fv = rand_arr(&[3, 5, 5], 24);
        let mut t = Tape::new();
        let f = t.leaf(fv.clone());
        let out = t.gather_positions(f, &[(0, 0), (2, 3), (4, 4), (1, 1)], 2);
        assert_eq!(t.value(out)[[1, 0, 1]], fv[[1, 2, 3]]);
        assert_eq!(t.value(out)[[2, 1, 0]], fv[[2, 4, 4]]);
    }
}
