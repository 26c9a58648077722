//! Reverse-mode autodiff over `f64` ndarrays.
//!
//! A [`Tape`] records one forward graph; node values are `ArrayD<f64>` and
//! each op stores a closure mapping the output gradient to per-parent
//! gradients. Creation order is a topological order, so [`Tape::backward`]
//! is a single reverse sweep. Tapes are built per step and dropped; desk
//! scale makes cloning saved inputs into closures cheap.

mod conv;
mod spatial;

pub use spatial::AlignRegion;

use ndarray::{arr0, Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Index of a node on a [`Tape`].
pub type VarId = usize;

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<VarId>,
    backward: Option<BackwardFn>,
}

/// Gradients keyed by [`VarId`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of `shape` when the node was unreachable.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<VarId>, backward: Option<BackwardFn>) -> VarId {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        self.nodes.len() - 1
    }

    /// Insert an input or parameter node.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, vec![], None)
    }

    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<VarId>,
        backward: BackwardFn,
    ) -> VarId {
        self.push(value, parents, Some(backward))
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a 0-dim node.
    pub fn scalar(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.ndim(), 0);
        self.nodes[id].value[[]]
    }

    /// Reverse sweep from a scalar root. Seeds the root with 1.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.ndim(),
            0,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(arr0(1.0).into_dyn());
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a].value * c;
        self.push(v, vec![a], Some(Box::new(move |g| vec![g * c])))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let x = self.nodes[a].value.clone();
        let v = x.mapv(|t| t.max(0.0));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![d]
            })),
        )
    }

    /// Scalar node `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(VarId, f64)]) -> VarId {
        let mut acc = 0.0;
        for &(id, w) in terms {
            acc += w * self.scalar(id);
        }
        let parents: Vec<VarId> = terms.iter().map(|&(id, _)| id).collect();
        let weights: Vec<f64> = terms.iter().map(|&(_, w)| w).collect();
        self.push(
            arr0(acc).into_dyn(),
            parents,
            Some(Box::new(move |g| {
                let go = g[[]];
                weights.iter().map(|&w| arr0(go * w).into_dyn()).collect()
            })),
        )
    }

    // ---- matrix ops (2-D) ----

    fn as2(&self, id: VarId) -> Array2<f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D node required")
            .to_owned()
    }

    fn as1(&self, id: VarId) -> Array1<f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-D node required")
            .to_owned()
    }

    /// `a (M,K) · b (K,N)`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.as2(a);
        let bv = self.as2(b);
        let y = av.dot(&bv);
        self.push(
            y.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&bv.t()).into_dyn(), av.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// `a (M,K) · b (N,K)^T`.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.as2(a);
        let bv = self.as2(b);
        let y = av.dot(&bv.t());
        self.push(
            y.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&bv).into_dyn(), g2.t().dot(&av).into_dyn()]
            })),
        )
    }

    /// `x (N,Fin) · w (Fout,Fin)^T + b`, the fully connected layer.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xv = self.as2(x);
        let wv = self.as2(w);
        let bv = self.as1(b);
        let y = xv.dot(&wv.t()) + &bv;
        self.push(
            y.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&wv);
                let dw = g2.t().dot(&xv);
                let db = g2.sum_axis(Axis(0));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        let views: Vec<Array2<f64>> = parts.iter().map(|&p| self.as2(p)).collect();
        let cols = views[0].ncols();
        let rows: usize = views.iter().map(|v| v.nrows()).sum();
        let mut out = Array2::<f64>::zeros((rows, cols));
        let mut offset = 0;
        let mut splits = Vec::with_capacity(views.len());
        for v in &views {
            out.slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
                .assign(v);
            splits.push((offset, v.nrows()));
            offset += v.nrows();
        }
        self.push(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                splits
                    .iter()
                    .map(|&(off, n)| g2.slice(ndarray::s![off..off + n, ..]).to_owned().into_dyn())
                    .collect()
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let views: Vec<Array2<f64>> = parts.iter().map(|&p| self.as2(p)).collect();
        let rows = views[0].nrows();
        let cols: usize = views.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::<f64>::zeros((rows, cols));
        let mut offset = 0;
        let mut splits = Vec::with_capacity(views.len());
        for v in &views {
            out.slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                .assign(v);
            splits.push((offset, v.ncols()));
            offset += v.ncols();
        }
        self.push(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                splits
                    .iter()
                    .map(|&(off, n)| g2.slice(ndarray::s![.., off..off + n]).to_owned().into_dyn())
                    .collect()
            })),
        )
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let av = self.as2(a);
        let (rows, cols) = av.dim();
        let out = av.slice(ndarray::s![.., start..end]).to_owned();
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array2::<f64>::zeros((rows, cols));
                d.slice_mut(ndarray::s![.., start..end]).assign(&g2);
                vec![d.into_dyn()]
            })),
        )
    }

    pub fn select_rows(&mut self, a: VarId, indices: &[usize]) -> VarId {
        let av = self.as2(a);
        let (rows, cols) = av.dim();
        let idx = indices.to_vec();
        let mut out = Array2::<f64>::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&av.row(i));
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array2::<f64>::zeros((rows, cols));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g2.row(r);
                }
                vec![d.into_dyn()]
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let av = self.as2(a);
        let mut y = av.clone();
        for mut row in y.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let yc = y.clone();
        self.push(
            y.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = g2.to_owned();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(yc.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for (di, &yi) in drow.iter_mut().zip(yrow.iter()) {
                        *di = (*di - dot) * yi;
                    }
                }
                vec![d.into_dyn()]
            })),
        )
    }

    // ---- layout permutations ----

    /// `(C,H,W)` grid to `(H*W, C)` token matrix, rows in row-major spatial order.
    pub fn grid_to_tokens(&mut self, a: VarId) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let av = self.nodes[a].value.clone();
        let mut out = Array2::<f64>::zeros((h * w, c));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[hi * w + wi, ci]] = av[[ci, hi, wi]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            d[[ci, hi, wi]] = g2[[hi * w + wi, ci]];
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    /// Inverse of [`Tape::grid_to_tokens`].
    pub fn tokens_to_grid(&mut self, a: VarId, h: usize, w: usize) -> VarId {
        let av = self.as2(a);
        let (rows, c) = av.dim();
        assert_eq!(rows, h * w);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ci, hi, wi]] = av[[hi * w + wi, ci]];
                }
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut d = Array2::<f64>::zeros((h * w, c));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            d[[hi * w + wi, ci]] = g[[ci, hi, wi]];
                        }
                    }
                }
                vec![d.into_dyn()]
            })),
        )
    }

    /// `(N,C,H,W)` to `(N*H*W, C)` rows, n-major then row-major spatial.
    pub fn nchw_to_rows(&mut self, a: VarId) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        assert_eq!(shape.len(), 4);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let av = self.nodes[a].value.clone();
        let mut out = Array2::<f64>::zeros((n * h * w, c));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[(ni * h + hi) * w + wi, ci]] = av[[ni, ci, hi, wi]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                d[[ni, ci, hi, wi]] = g2[[(ni * h + hi) * w + wi, ci]];
                            }
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    /// Row-major reshape preserving element order.
    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let old_shape = self.nodes[a].value.shape().to_vec();
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                vec![g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap()]
            })),
        )
    }

    /// Select element `i` of the leading axis: `(N, ...)` to `(...)`.
    pub fn index_batch(&mut self, a: VarId, i: usize) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        let n = shape[0];
        assert!(i < n);
        let v = self.nodes[a].value.index_axis(Axis(0), i).to_owned();
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                let mut d = ArrayD::<f64>::zeros(IxDyn(&shape));
                d.index_axis_mut(Axis(0), i).assign(g);
                vec![d]
            })),
        )
    }

    /// Stack `K` grids of identical shape `(C,H,W)` into `(K,C,H,W)`.
    pub fn stack_grids(&mut self, grids: &[VarId]) -> VarId {
        assert!(!grids.is_empty());
        let shape = self.nodes[grids[0]].value.shape().to_vec();
        let k = grids.len();
        let mut out_shape = vec![k];
        out_shape.extend_from_slice(&shape);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        for (i, &g) in grids.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&self.nodes[g].value);
        }
        self.push(
            out,
            grids.to_vec(),
            Some(Box::new(move |g| {
                (0..k)
                    .map(|i| g.index_axis(Axis(0), i).to_owned())
                    .collect()
            })),
        )
    }

    // ---- fused losses ----

    /// Mean softmax cross-entropy over rows of `logits (N,C)` against
    /// integer `targets`.
    pub fn softmax_ce_mean(&mut self, logits: VarId, targets: &[usize]) -> VarId {
        let lv = self.as2(logits);
        let (n, c) = lv.dim();
        assert_eq!(n, targets.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets.iter()) {
            assert!(t < c);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            loss -= row[t].ln();
        }
        loss /= n as f64;
        let tg = targets.to_vec();
        self.push(
            arr0(loss).into_dyn(),
            vec![logits],
            Some(Box::new(move |g| {
                let go = g[[]];
                let mut d = probs.clone();
                for (mut row, &t) in d.rows_mut().into_iter().zip(tg.iter()) {
                    row[t] -= 1.0;
                    row.mapv_inplace(|v| v * go / n as f64);
                }
                vec![d.into_dyn()]
            })),
        )
    }

    /// `sum_i w_i * sum_j smooth_l1(pred_ij - target_ij) / norm` with the
    /// usual beta = 1 kink.
    pub fn smooth_l1(&mut self, pred: VarId, target: &Array2<f64>, row_weights: &[f64], norm: f64) -> VarId {
        let pv = self.as2(pred);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.nrows(), row_weights.len());
        assert!(norm > 0.0);
        let mut loss = 0.0;
        for (i, w) in row_weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for j in 0..pv.ncols() {
                let d = pv[[i, j]] - target[[i, j]];
                loss += w * if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                };
            }
        }
        loss /= norm;
        let tv = target.clone();
        let wv = row_weights.to_vec();
        self.push(
            arr0(loss).into_dyn(),
            vec![pred],
            Some(Box::new(move |g| {
                let go = g[[]];
                let mut d = Array2::<f64>::zeros(pv.dim());
                for (i, w) in wv.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    for j in 0..d.ncols() {
                        let diff = pv[[i, j]] - tv[[i, j]];
                        let grad = if diff.abs() < 1.0 { diff } else { diff.signum() };
                        d[[i, j]] = w * grad * go / norm;
                    }
                }
                vec![d.into_dyn()]
            })),
        )
    }

    /// Mean binary cross-entropy with logits over a 1-D node.
    pub fn bce_logits_mean(&mut self, logits: VarId, targets: &[f64]) -> VarId {
        let lv = self.as1(logits);
        let n = lv.len();
        assert_eq!(n, targets.len());
        let mut loss = 0.0;
        let mut sig = Array1::<f64>::zeros(n);
        for i in 0..n {
            let x = lv[i];
            let t = targets[i];
            // log(1 + e^-|x|) + max(x, 0) - t*x, the stable form
            loss += (1.0 + (-x.abs()).exp()).ln() + x.max(0.0) - t * x;
            sig[i] = 1.0 / (1.0 + (-x).exp());
        }
        loss /= n as f64;
        let tg = targets.to_vec();
        self.push(
            arr0(loss).into_dyn(),
            vec![logits],
            Some(Box::new(move |g| {
                let go = g[[]];
                let d: Array1<f64> = sig
                    .iter()
                    .zip(tg.iter())
                    .map(|(&s, &t)| (s - t) * go / n as f64)
                    .collect();
                vec![d.into_dyn()]
            })),
        )
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite difference of `f` with respect to every entry of the
    /// leaf whose value is in `x`, compared against `analytic`. Returns the
    /// max relative error, with an absolute floor for near-zero pairs.
    pub fn max_rel_err_fd<F: FnMut(&ArrayD<f64>) -> f64>(
        mut f: F,
        x: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        step: f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        let mut xp = x.clone();
        for idx in ndarray::indices(x.shape()) {
            let orig = xp[&idx];
            xp[&idx] = orig + step;
            let fp = f(&xp);
            xp[&idx] = orig - step;
            let fm = f(&xp);
            xp[&idx] = orig;
            let num = (fp - fm) / (2.0 * step);
            let ana = analytic[&idx];
            let denom = num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max((num - ana).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::max_rel_err_fd;
    use super::*;
    use ndarray::arr1;
    use rand::Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::stream_rng(seed, 77);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn add_scale_relu_values() {
        let mut t = Tape::new();
        let a = t.leaf(arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let b = t.leaf(arr1(&[0.5, 0.5, 0.5]).into_dyn());
        let s = t.add(a, b);
        let r = t.relu(s);
        let v = t.value(r);
        assert_eq!(v.as_slice().unwrap(), &[1.5, 0.0, 3.5]);
    }

    #[test]
    fn matmul_grads_match_fd() {
        let av = rand_arr(&[3, 4], 1);
        let bv = rand_arr(&[4, 2], 2);
        // loss = smooth_l1 of the product against zeros; entries stay < 1 so
        // this is 0.5 * sum of squares, smooth everywhere
        let eval = |a_in: &ArrayD<f64>, b_in: &ArrayD<f64>, want_grads: bool| {
            let mut t = Tape::new();
            let a = t.leaf(a_in.clone());
            let b = t.leaf(b_in.clone());
            let y = t.matmul(a, b);
            let target = Array2::<f64>::zeros((3, 2));
            let loss = t.smooth_l1(y, &target, &[1.0; 3], 1.0);
            let l = t.scalar(loss);
            if want_grads {
                let g = t.backward(loss);
                (
                    l,
                    Some(g.get(a).unwrap().clone()),
                    Some(g.get(b).unwrap().clone()),
                )
            } else {
                (l, None, None)
            }
        };
        let (_, ga, gb) = eval(&av, &bv, true);
        let ea = max_rel_err_fd(|x| eval(x, &bv, false).0, &av, &ga.unwrap(), 1e-5);
        let eb = max_rel_err_fd(|x| eval(&av, x, false).0, &bv, &gb.unwrap(), 1e-5);
        assert!(ea < 1e-6, "matmul dA rel err {ea}");
        assert!(eb < 1e-6, "matmul dB rel err {eb}");
    }

    #[test]
    fn softmax_ce_uniform_is_ln_c() {
        let mut t = Tape::new();
        let logits = t.leaf(ArrayD::zeros(IxDyn(&[5, 4])));
        let loss = t.softmax_ce_mean(logits, &[0, 1, 2, 3, 0]);
        assert!((t.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_grads_match_fd() {
        let lv = rand_arr(&[6, 3], 3);
        let targets = [0usize, 2, 1, 1, 0, 2];
        let eval = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let l = t.leaf(x.clone());
            let loss = t.softmax_ce_mean(l, &targets);
            (t.scalar(loss), t, loss, l)
        };
        let (_, t, loss, l) = eval(&lv);
        let g = t.backward(loss);
        let err = max_rel_err_fd(|x| eval(x).0, &lv, g.get(l).unwrap(), 1e-4);
        assert!(err < 1e-7, "softmax ce rel err {err}");
    }

    #[test]
    fn softmax_rows_and_attention_chain_grads() {
        let qv = rand_arr(&[4, 6], 5);
        let kv = rand_arr(&[9, 6], 6);
        let vv = rand_arr(&[9, 6], 7);
        let eval = |q_in: &ArrayD<f64>, k_in: &ArrayD<f64>, v_in: &ArrayD<f64>| {
            let mut t = Tape::new();
            let q = t.leaf(q_in.clone());
            let k = t.leaf(k_in.clone());
            let v = t.leaf(v_in.clone());
            let scores = t.matmul_nt(q, k);
            let scaled = t.scale(scores, 1.0 / (6.0f64).sqrt());
            let attn = t.softmax_rows(scaled);
            let out = t.matmul(attn, v);
            let target = Array2::<f64>::zeros((4, 6));
            let loss = t.smooth_l1(out, &target, &[1.0; 4], 4.0);
            (t.scalar(loss), t, loss, [q, k, v])
        };
        let (_, t, loss, ids) = eval(&qv, &kv, &vv);
        let g = t.backward(loss);
        let eq = max_rel_err_fd(|x| eval(x, &kv, &vv).0, &qv, g.get(ids[0]).unwrap(), 1e-5);
        let ek = max_rel_err_fd(|x| eval(&qv, x, &vv).0, &kv, g.get(ids[1]).unwrap(), 1e-5);
        let ev = max_rel_err_fd(|x| eval(&qv, &kv, x).0, &vv, g.get(ids[2]).unwrap(), 1e-5);
        assert!(eq < 1e-6 && ek < 1e-6 && ev < 1e-6, "attention chain {eq} {ek} {ev}");
    }

    #[test]
    fn bce_logits_matches_fd() {
        let lv = rand_arr(&[8], 9);
        let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let eval = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let l = t.leaf(x.clone());
            let loss = t.bce_logits_mean(l, &targets);
            (t.scalar(loss), t, loss, l)
        };
        let (_, t, loss, l) = eval(&lv);
        let g = t.backward(loss);
        let err = max_rel_err_fd(|x| eval(x).0, &lv, g.get(l).unwrap(), 1e-4);
        assert!(err < 1e-7, "bce rel err {err}");
    }

    #[test]
    fn grid_tokens_roundtrip() {
        let x = rand_arr(&[3, 2, 4], 11);
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let tok = t.grid_to_tokens(a);
        let back = t.tokens_to_grid(tok, 2, 4);
        assert_eq!(t.value(back), &x);
    }

    #[test]
    fn weighted_sum_composes_terms() {
        let mut t = Tape::new();
        let a = t.leaf(arr0(0.2).into_dyn());
        let b = t.leaf(arr0(0.3).into_dyn());
        let c = t.leaf(arr0(1.0).into_dyn());
        let total = t.weighted_sum(&[(a, 1.0), (b, 1.0), (c, 0.5)]);
        assert!((t.scalar(total) - 1.0).abs() < 1e-15);
        let g = t.backward(total);
        assert_eq!(g.get(c).unwrap()[[]], 0.5);
    }

    #[allow(clippy::type_complexity)]
    #[test]
    fn select_and_slice_route_grads() {
        let x = rand_arr(&[5, 4], 13);
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let sel = t.select_rows(a, &[4, 1, 1]);
        let sl = t.slice_cols(sel, 1, 3);
        let target = Array2::<f64>::zeros((3, 2));
        let loss = t.smooth_l1(sl, &target, &[1.0; 3], 1.0);
        let g = t.backward(loss);
        let ga = g.get(a).unwrap();
        // row 1 selected twice: gradient accumulates; rows 0,2,3 untouched
        assert_eq!(ga[[0, 1]], 0.0);
        assert_ne!(ga[[1, 1]], 0.0);
        assert_eq!(ga[[3, 2]], 0.0);
    }
}
