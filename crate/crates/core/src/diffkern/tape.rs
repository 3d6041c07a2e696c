//! Reverse-mode tape over chunky tensor operations.
//!
//! Values are appended to an arena; `backward` walks the arena in reverse
//! and accumulates gradients, returning one gradient tensor per parameter
//! path touched by the graph. Accumulation order inside every op is fixed,
//! so gradients are bit-identical for any worker count.

use super::kernels::{self, PadMode};
use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::parallel::{par_chunk_map, par_fill_rows};
use std::collections::BTreeMap;
use std::rc::Rc;

pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Precomputed neighbor structure for one sparse-convolution application:
/// `entries[row_ptr[o]..row_ptr[o+1]]` lists `(input_row, kernel_offset)`
/// pairs feeding output row `o`; the transpose indexes the same pairs by
/// input row.
#[derive(Debug)]
pub struct SparseConvPlan {
    pub n_out: usize,
    pub n_in: usize,
    pub taps: usize,
    pub row_ptr: Vec<u32>,
    pub entries: Vec<(u32, u16)>,
    pub t_row_ptr: Vec<u32>,
    pub t_entries: Vec<(u32, u16)>,
}

impl SparseConvPlan {
    /// Build from `(out_row, in_row, offset)` triples.
    pub fn from_pairs(n_out: usize, n_in: usize, taps: usize, mut pairs: Vec<(u32, u32, u16)>) -> Self {
        pairs.sort_unstable();
        let mut row_ptr = vec![0u32; n_out + 1];
        for &(o, _, _) in &pairs {
            row_ptr[o as usize + 1] += 1;
        }
        for i in 0..n_out {
            row_ptr[i + 1] += row_ptr[i];
        }
        let entries: Vec<(u32, u16)> = pairs.iter().map(|&(_, i, k)| (i, k)).collect();

        let mut tpairs: Vec<(u32, u32, u16)> = pairs.iter().map(|&(o, i, k)| (i, o, k)).collect();
        tpairs.sort_unstable();
        let mut t_row_ptr = vec![0u32; n_in + 1];
        for &(i, _, _) in &tpairs {
            t_row_ptr[i as usize + 1] += 1;
        }
        for i in 0..n_in {
            t_row_ptr[i + 1] += t_row_ptr[i];
        }
        let t_entries: Vec<(u32, u16)> = tpairs.iter().map(|&(_, o, k)| (o, k)).collect();
        SparseConvPlan { n_out, n_in, taps, row_ptr, entries, t_row_ptr, t_entries }
    }
}

enum Node {
    Leaf,
    Param,
    Relu { x: Var },
    Affine { x: Var, w: Var, b: Var, n: usize, cin: usize, cout: usize },
    Conv1d { x: Var, w: Var, b: Var, n: usize, l: usize, cin: usize, k: usize, cout: usize },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        h: usize,
        wd: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        pad: PadMode,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        m: usize,
        c: usize,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Softmax { x: Var, n: usize, k: usize },
    SegmentMax { x: Var, c: usize, nseg: usize, argmax: Vec<u32> },
    ConcatLast { xs: Vec<Var>, widths: Vec<usize>, rows: usize },
    GatherWeighted { v: Var, c: usize, idx: Rc<Vec<i64>>, w: Rc<Vec<f64>>, rows: usize, taps: usize },
    SparseConv { x: Var, w: Var, b: Var, plan: Rc<SparseConvPlan>, cin: usize, cout: usize },
    ExpectDot { p: Var, n: usize, k: usize, coeff: Vec<f64> },
    PairedExpectation { p: Var, n: usize, h: usize, step: f64 },
    AxpyConst { x: Var, a: Vec<f64> },
    MaskedL1Mean { x: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
    NllMean { p: Var, k: usize, targets: Vec<i64>, count: usize },
    DotConst { x: Var, c: Vec<f64> },
    AddScalars { a: Var, b: Var },
    ScaleConst { x: Var, s: f64 },
    Reshape { x: Var },
    PropSmooth {
        logits: Var,
        h: usize,
        w: usize,
        depth: Rc<Vec<f64>>,
        valid: Rc<Vec<bool>>,
        probs: Vec<f64>,
    },
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    param_vars: BTreeMap<String, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Tape { store, nodes: Vec::new(), vals: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    fn push(&mut self, node: Node, val: Tensor) -> Var {
        self.nodes.push(node);
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Node::Leaf, t)
    }

    /// Leaf for a named parameter; one canonical Var per path.
    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(path) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(path)
            .ok_or_else(|| Error::MissingGradient(path.to_string()))?
            .clone();
        let v = self.push(Node::Param, t);
        self.param_vars.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        let mut y = Tensor::zeros(xv.shape());
        kernels::relu_fwd(xv.data(), y.data_mut());
        self.push(Node::Relu { x }, y)
    }

    /// x: [N, Cin] @ w: [Cin, Cout] + b: [Cout]
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.vals[x.0].shape(), self.vals[w.0].shape(), self.vals[b.0].shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::ShapeMismatch(format!(
                "affine: x {xs:?} w {ws:?} b {bs:?}"
            )));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        let mut y = Tensor::zeros(&[n, cout]);
        kernels::matmul_bias_fwd(
            self.vals[x.0].data(),
            n,
            cin,
            self.vals[w.0].data(),
            self.vals[b.0].data(),
            cout,
            y.data_mut(),
        );
        Ok(self.push(Node::Affine { x, w, b, n, cin, cout }, y))
    }

    /// x: [N, L, Cin], w: [K, Cin, Cout], b: [Cout]; zero padding, stride 1.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.vals[x.0].shape(), self.vals[w.0].shape());
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] {
            return Err(Error::ShapeMismatch(format!("conv1d: x {xs:?} w {ws:?}")));
        }
        let (n, l, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[2]);
        let mut y = Tensor::zeros(&[n, l, cout]);
        kernels::conv1d_fwd(
            self.vals[x.0].data(),
            n,
            l,
            cin,
            self.vals[w.0].data(),
            self.vals[b.0].data(),
            k,
            cout,
            y.data_mut(),
        );
        Ok(self.push(Node::Conv1d { x, w, b, n, l, cin, k, cout }, y))
    }

    /// x: [H, W, Cin], w: [KH, KW, Cin, Cout], b: [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: PadMode) -> Result<Var> {
        let (xs, ws) = (self.vals[x.0].shape(), self.vals[w.0].shape());
        if xs.len() != 3 || ws.len() != 4 || xs[2] != ws[2] {
            return Err(Error::ShapeMismatch(format!("conv2d: x {xs:?} w {ws:?}")));
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        let oh = kernels::conv_out_extent(h, kh, stride);
        let ow = kernels::conv_out_extent(wd, kw, stride);
        let mut y = Tensor::zeros(&[oh, ow, cout]);
        kernels::conv2d_fwd(
            self.vals[x.0].data(),
            h,
            wd,
            cin,
            self.vals[w.0].data(),
            self.vals[b.0].data(),
            kh,
            kw,
            cout,
            stride,
            pad,
            y.data_mut(),
        );
        Ok(self.push(Node::Conv2d { x, w, b, h, wd, cin, kh, kw, cout, stride, pad }, y))
    }

    /// x: [N, M, C] normalized per (instance, group) over M * C/groups
    /// elements.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.vals[x.0].shape();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch(format!("group_norm: x {xs:?}")));
        }
        let (n, m, c) = (xs[0], xs[1], xs[2]);
        if c % groups != 0 {
            return Err(Error::BadGroupCount { channels: c, groups });
        }
        self.vals[gamma.0].expect_shape(&[c], "group_norm gamma")?;
        self.vals[beta.0].expect_shape(&[c], "group_norm beta")?;
        let mut y = Tensor::zeros(&[n, m, c]);
        let stats = kernels::group_norm_fwd(
            self.vals[x.0].data(),
            n,
            m,
            c,
            groups,
            self.vals[gamma.0].data(),
            self.vals[beta.0].data(),
            eps,
            y.data_mut(),
        );
        Ok(self.push(Node::GroupNorm { x, gamma, beta, n, m, c, groups, stats }, y))
    }

    /// Row-wise softmax over the last axis of [N, K].
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.vals[x.0].shape();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch(format!("softmax_rows: x {xs:?}")));
        }
        let (n, k) = (xs[0], xs[1]);
        let mut y = Tensor::zeros(&[n, k]);
        kernels::softmax_fwd(self.vals[x.0].data(), n, k, y.data_mut());
        Ok(self.push(Node::Softmax { x, n, k }, y))
    }

    /// Per-channel max over contiguous row segments of x: [Npts, C].
    pub fn segment_max(&mut self, x: Var, segments: &[(u32, u32)]) -> Result<Var> {
        let xs = self.vals[x.0].shape();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch(format!("segment_max: x {xs:?}")));
        }
        let c = xs[1];
        let nseg = segments.len();
        let mut y = Tensor::zeros(&[nseg, c]);
        let mut argmax = vec![u32::MAX; nseg * c];
        kernels::segment_max_fwd(self.vals[x.0].data(), c, segments, y.data_mut(), &mut argmax);
        Ok(self.push(Node::SegmentMax { x, c, nseg, argmax }, y))
    }

    /// Concatenate along the last axis; all inputs share leading dims.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        assert!(!xs.is_empty());
        let lead: Vec<usize> = {
            let s = self.vals[xs[0].0].shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for v in xs {
            let s = self.vals[v.0].shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch(format!(
                    "concat_last: leading dims differ ({:?} vs {:?})",
                    &s[..s.len() - 1],
                    lead
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut shape = lead.clone();
        shape.push(total);
        let mut y = Tensor::zeros(&shape);
        {
            let out = y.data_mut();
            let mut off = 0;
            for (v, &w) in xs.iter().zip(&widths) {
                let data = self.vals[v.0].data();
                for r in 0..rows {
                    out[r * total + off..r * total + off + w]
                        .copy_from_slice(&data[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        Ok(self.push(Node::ConcatLast { xs: xs.to_vec(), widths, rows }, y))
    }

    /// out[r, :] = sum_j w[r, j] * v[idx[r, j], :]; idx < 0 reads zeros.
    pub fn gather_weighted(&mut self, v: Var, idx: Rc<Vec<i64>>, w: Rc<Vec<f64>>, rows: usize, taps: usize) -> Result<Var> {
        let vs = self.vals[v.0].shape();
        if vs.len() != 2 {
            return Err(Error::ShapeMismatch(format!("gather_weighted: v {vs:?}")));
        }
        let c = vs[1];
        assert_eq!(idx.len(), rows * taps);
        assert_eq!(w.len(), rows * taps);
        let mut y = Tensor::zeros(&[rows, c]);
        kernels::gather_weighted_fwd(self.vals[v.0].data(), c, &idx, &w, rows, taps, y.data_mut());
        Ok(self.push(Node::GatherWeighted { v, c, idx, w, rows, taps }, y))
    }

    /// Sparse convolution via a precomputed neighbor plan.
    /// x: [plan.n_in, Cin], w: [plan.taps, Cin, Cout], b: [Cout].
    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Var, plan: Rc<SparseConvPlan>) -> Result<Var> {
        let (xs, ws) = (self.vals[x.0].shape(), self.vals[w.0].shape());
        if xs.len() != 2 || ws.len() != 3 || xs[0] != plan.n_in || xs[1] != ws[1] || ws[0] != plan.taps {
            return Err(Error::ShapeMismatch(format!(
                "sparse_conv: x {xs:?} w {ws:?} plan(in={}, taps={})",
                plan.n_in, plan.taps
            )));
        }
        let (cin, cout) = (ws[1], ws[2]);
        let mut y = Tensor::zeros(&[plan.n_out, cout]);
        sparse_conv_fwd(
            self.vals[x.0].data(),
            cin,
            self.vals[w.0].data(),
            self.vals[b.0].data(),
            cout,
            &plan,
            y.data_mut(),
        );
        Ok(self.push(Node::SparseConv { x, w, b, plan, cin, cout }, y))
    }

    /// y[n] = sum_k p[n, k] * coeff[k]
    pub fn expect_dot(&mut self, p: Var, coeff: Vec<f64>) -> Result<Var> {
        let ps = self.vals[p.0].shape();
        if ps.len() != 2 || ps[1] != coeff.len() {
            return Err(Error::ShapeMismatch(format!(
                "expect_dot: p {ps:?}, coeff len {}",
                coeff.len()
            )));
        }
        let (n, k) = (ps[0], ps[1]);
        let mut y = Tensor::zeros(&[n]);
        {
            let pd = self.vals[p.0].data();
            let out = y.data_mut();
            for r in 0..n {
                let row = &pd[r * k..(r + 1) * k];
                let mut acc = 0.0;
                for j in 0..k {
                    acc += row[j] * coeff[j];
                }
                out[r] = acc;
            }
        }
        Ok(self.push(Node::ExpectDot { p, n, k, coeff }, y))
    }

    /// y[n] = sum_{j=1..h} j*step * (p[n, h+j] - p[n, h-j]).
    /// Algebraically the expectation of k*step under p; the symmetric
    /// pairing returns exactly +0.0 for symmetric rows.
    pub fn paired_expectation(&mut self, p: Var, step: f64) -> Result<Var> {
        let ps = self.vals[p.0].shape();
        if ps.len() != 2 || ps[1] % 2 != 1 {
            return Err(Error::ShapeMismatch(format!("paired_expectation: p {ps:?}")));
        }
        let (n, k) = (ps[0], ps[1]);
        let h = (k - 1) / 2;
        let mut y = Tensor::zeros(&[n]);
        {
            let pd = self.vals[p.0].data();
            let out = y.data_mut();
            for r in 0..n {
                let row = &pd[r * k..(r + 1) * k];
                let mut acc = 0.0;
                for j in 1..=h {
                    acc += (j as f64) * step * (row[h + j] - row[h - j]);
                }
                out[r] = acc;
            }
        }
        Ok(self.push(Node::PairedExpectation { p, n, h, step }, y))
    }

    /// y = a (elementwise) * x + b, with a and b constants.
    pub fn axpy_const(&mut self, x: Var, a: Vec<f64>, b: Vec<f64>) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(a.len(), xv.len());
        assert_eq!(b.len(), xv.len());
        let mut y = Tensor::zeros(xv.shape());
        {
            let out = y.data_mut();
            let xd = xv.data();
            for i in 0..xd.len() {
                out[i] = a[i] * xd[i] + b[i];
            }
        }
        self.push(Node::AxpyConst { x, a }, y)
    }

    /// Mean absolute error over masked entries; errors if the mask is empty.
    pub fn masked_l1_mean(&mut self, x: Var, target: Vec<f64>, mask: Vec<bool>) -> Result<Var> {
        let xv = &self.vals[x.0];
        assert_eq!(target.len(), xv.len());
        assert_eq!(mask.len(), xv.len());
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::NoValidPixels);
        }
        let mut acc = 0.0;
        for (i, &xd) in xv.data().iter().enumerate() {
            if mask[i] {
                acc += (xd - target[i]).abs();
            }
        }
        let y = Tensor::scalar(acc / count as f64);
        Ok(self.push(Node::MaskedL1Mean { x, target, mask, count }, y))
    }

    /// Mean negative log-likelihood of target bins under probability rows;
    /// rows with a negative target are skipped.
    pub fn nll_mean(&mut self, p: Var, targets: Vec<i64>) -> Result<Var> {
        let ps = self.vals[p.0].shape();
        if ps.len() != 2 || ps[0] != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "nll_mean: p {ps:?} vs {} targets",
                targets.len()
            )));
        }
        let (n, k) = (ps[0], ps[1]);
        let count = targets.iter().filter(|t| **t >= 0).count();
        if count == 0 {
            return Err(Error::NoValidPixels);
        }
        let mut acc = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= 0 {
                let pv = self.vals[p.0].data()[r * k + t as usize].max(1e-300);
                acc -= pv.ln();
            }
        }
        let y = Tensor::scalar(acc / count as f64);
        let _ = n;
        Ok(self.push(Node::NllMean { p, k, targets, count }, y))
    }

    /// Scalar sum(x * c) for a constant c; smooth readout for checks.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(c.len(), xv.len());
        let mut acc = 0.0;
        for (i, &v) in xv.data().iter().enumerate() {
            acc += v * c[i];
        }
        let y = Tensor::scalar(acc);
        self.push(Node::DotConst { x, c }, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = Tensor::scalar(self.vals[a.0].item() + self.vals[b.0].item());
        self.push(Node::AddScalars { a, b }, y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = &self.vals[x.0];
        let mut y = xv.clone();
        for v in y.data_mut() {
            *v *= s;
        }
        self.push(Node::ScaleConst { x, s }, y)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.vals[x.0].reshaped(shape)?;
        Ok(self.push(Node::Reshape { x }, y))
    }

    /// Softmax-weighted 3x3 depth propagation with border replication and
    /// invalid-pixel renormalization. logits: [H, W, 9]; depth/valid are the
    /// input depth map; output [H, W] has 0.0 where no valid neighbor exists.
    pub fn prop_smooth(&mut self, logits: Var, depth: Rc<Vec<f64>>, valid: Rc<Vec<bool>>, h: usize, w: usize) -> Result<Var> {
        let ls = self.vals[logits.0].shape();
        if ls != [h, w, 9] {
            return Err(Error::ShapeMismatch(format!("prop_smooth: logits {ls:?} for {h}x{w}")));
        }
        assert_eq!(depth.len(), h * w);
        assert_eq!(valid.len(), h * w);
        let mut probs = vec![0.0; h * w * 9];
        kernels::softmax_fwd(self.vals[logits.0].data(), h * w, 9, &mut probs);
        let mut y = Tensor::zeros(&[h, w]);
        {
            let out = y.data_mut();
            let depth: &[f64] = depth.as_slice();
            let valid: &[bool] = valid.as_slice();
            let probs_ref: &[f64] = &probs;
            par_fill_rows(out, h, w, 16, |py, orow| {
                for px in 0..w {
                    let pr = &probs_ref[(py * w + px) * 9..(py * w + px) * 9 + 9];
                    let mut s = 0.0;
                    let mut num = 0.0;
                    let mut q = 0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let ny = (py as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            let nx = (px as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            if valid[ny * w + nx] {
                                s += pr[q];
                                num += pr[q] * depth[ny * w + nx];
                            }
                            q += 1;
                        }
                    }
                    orow[px] = if s > 0.0 { num / s } else { 0.0 };
                }
            });
        }
        Ok(self.push(Node::PropSmooth { logits, h, w, depth, valid, probs }, y))
    }

    /// Reverse pass from a scalar loss; returns gradients for every
    /// parameter leaf reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::ShapeMismatch("backward: loss must be scalar".into()));
        }
        let n = self.vals.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        macro_rules! grad_of {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![0.0; self.vals[$v.0].len()])
            };
        }

        for i in (0..n).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i] {
                Node::Leaf | Node::Param => {
                    grads[i] = Some(dy);
                    continue;
                }
                Node::Relu { x } => {
                    let xd = self.vals[x.0].data().to_vec();
                    kernels::relu_bwd(&xd, &dy, grad_of!(x));
                }
                Node::Affine { x, w, b, n, cin, cout } => {
                    let (x, w, b, n, cin, cout) = (*x, *w, *b, *n, *cin, *cout);
                    let mut dx = vec![0.0; n * cin];
                    let mut dw = vec![0.0; cin * cout];
                    let mut db = vec![0.0; cout];
                    kernels::matmul_bias_bwd(
                        self.vals[x.0].data(),
                        n,
                        cin,
                        self.vals[w.0].data(),
                        cout,
                        &dy,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    accumulate(grad_of!(x), &dx);
                    accumulate(grad_of!(w), &dw);
                    accumulate(grad_of!(b), &db);
                }
                Node::Conv1d { x, w, b, n, l, cin, k, cout } => {
                    let (x, w, b, n, l, cin, k, cout) = (*x, *w, *b, *n, *l, *cin, *k, *cout);
                    let mut dx = vec![0.0; n * l * cin];
                    let mut dw = vec![0.0; k * cin * cout];
                    let mut db = vec![0.0; cout];
                    kernels::conv1d_bwd(
                        self.vals[x.0].data(),
                        n,
                        l,
                        cin,
                        self.vals[w.0].data(),
                        k,
                        cout,
                        &dy,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    accumulate(grad_of!(x), &dx);
                    accumulate(grad_of!(w), &dw);
                    accumulate(grad_of!(b), &db);
                }
                Node::Conv2d { x, w, b, h, wd, cin, kh, kw, cout, stride, pad } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (h, wd, cin, kh, kw, cout, stride, pad) =
                        (*h, *wd, *cin, *kh, *kw, *cout, *stride, *pad);
                    let mut dx = vec![0.0; h * wd * cin];
                    let mut dw = vec![0.0; kh * kw * cin * cout];
                    let mut db = vec![0.0; cout];
                    kernels::conv2d_bwd(
                        self.vals[x.0].data(),
                        h,
                        wd,
                        cin,
                        self.vals[w.0].data(),
                        kh,
                        kw,
                        cout,
                        stride,
                        pad,
                        &dy,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    accumulate(grad_of!(x), &dx);
                    accumulate(grad_of!(w), &dw);
                    accumulate(grad_of!(b), &db);
                }
                Node::GroupNorm { x, gamma, beta, n, m, c, groups, stats } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (n, m, c, groups) = (*n, *m, *c, *groups);
                    let stats = stats.clone();
                    let mut dx = vec![0.0; n * m * c];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    kernels::group_norm_bwd(
                        self.vals[x.0].data(),
                        n,
                        m,
                        c,
                        groups,
                        self.vals[gamma.0].data(),
                        &stats,
                        &dy,
                        &mut dx,
                        &mut dgamma,
                        &mut dbeta,
                    );
                    accumulate(grad_of!(x), &dx);
                    accumulate(grad_of!(gamma), &dgamma);
                    accumulate(grad_of!(beta), &dbeta);
                }
                Node::Softmax { x, n, k } => {
                    let (x, n, k) = (*x, *n, *k);
                    let mut dx = vec![0.0; n * k];
                    kernels::softmax_bwd(self.vals[i].data(), n, k, &dy, &mut dx);
                    accumulate(grad_of!(x), &dx);
                }
                Node::SegmentMax { x, c, nseg, argmax } => {
                    let (x, c, nseg) = (*x, *c, *nseg);
                    let argmax = argmax.clone();
                    let mut dx = vec![0.0; self.vals[x.0].len()];
                    kernels::segment_max_bwd(&mut dx, c, &argmax, &dy, nseg);
                    accumulate(grad_of!(x), &dx);
                }
                Node::ConcatLast { xs, widths, rows } => {
                    let xs = xs.clone();
                    let widths = widths.clone();
                    let rows = *rows;
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (v, &wdt) in xs.iter().zip(&widths) {
                        let g = grad_of!(v);
                        for r in 0..rows {
                            for j in 0..wdt {
                                g[r * wdt + j] += dy[r * total + off + j];
                            }
                        }
                        off += wdt;
                    }
                }
                Node::GatherWeighted { v, c, idx, w, rows, taps } => {
                    let (v, c, rows, taps) = (*v, *c, *rows, *taps);
                    let (idx, w) = (Rc::clone(idx), Rc::clone(w));
                    kernels::gather_weighted_bwd(grad_of!(v), c, &idx, &w, rows, taps, &dy);
                }
                Node::SparseConv { x, w, b, plan, cin, cout } => {
                    let (x, w, b, cin, cout) = (*x, *w, *b, *cin, *cout);
                    let plan = Rc::clone(plan);
                    let mut dx = vec![0.0; plan.n_in * cin];
                    let mut dw = vec![0.0; plan.taps * cin * cout];
                    let mut db = vec![0.0; cout];
                    sparse_conv_bwd(
                        self.vals[x.0].data(),
                        cin,
                        self.vals[w.0].data(),
                        cout,
                        &plan,
                        &dy,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    accumulate(grad_of!(x), &dx);
                    accumulate(grad_of!(w), &dw);
                    accumulate(grad_of!(b), &db);
                }
                Node::ExpectDot { p, n, k, coeff } => {
                    let (p, n, k) = (*p, *n, *k);
                    let coeff = coeff.clone();
                    let g = grad_of!(p);
                    for r in 0..n {
                        for j in 0..k {
                            g[r * k + j] += coeff[j] * dy[r];
                        }
                    }
                }
                Node::PairedExpectation { p, n, h, step } => {
                    let (p, n, h, step) = (*p, *n, *h, *step);
                    let k = 2 * h + 1;
                    let g = grad_of!(p);
                    for r in 0..n {
                        for j in 1..=h {
                            let c = (j as f64) * step * dy[r];
                            g[r * k + h + j] += c;
                            g[r * k + h - j] -= c;
                        }
                    }
                }
                Node::AxpyConst { x, a } => {
                    let x = *x;
                    let a = a.clone();
                    let g = grad_of!(x);
                    for j in 0..a.len() {
                        g[j] += a[j] * dy[j];
                    }
                }
                Node::MaskedL1Mean { x, target, mask, count } => {
                    let x = *x;
                    let scale = dy[0] / *count as f64;
                    let target = target.clone();
                    let mask = mask.clone();
                    let xd = self.vals[x.0].data().to_vec();
                    let g = grad_of!(x);
                    for j in 0..xd.len() {
                        if mask[j] {
                            let d = xd[j] - target[j];
                            g[j] += scale * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                        }
                    }
                }
                Node::NllMean { p, k, targets, count } => {
                    let p = *p;
                    let k = *k;
                    let scale = dy[0] / *count as f64;
                    let targets = targets.clone();
                    let pd = self.vals[p.0].data().to_vec();
                    let g = grad_of!(p);
                    for (r, &t) in targets.iter().enumerate() {
                        if t >= 0 {
                            let pv = pd[r * k + t as usize].max(1e-300);
                            g[r * k + t as usize] -= scale / pv;
                        }
                    }
                }
                Node::DotConst { x, c } => {
                    let x = *x;
                    let c = c.clone();
                    let g = grad_of!(x);
                    for j in 0..c.len() {
                        g[j] += c[j] * dy[0];
                    }
                }
                Node::AddScalars { a, b } => {
                    let (a, b) = (*a, *b);
                    grad_of!(a)[0] += dy[0];
                    grad_of!(b)[0] += dy[0];
                }
                Node::ScaleConst { x, s } => {
                    let (x, s) = (*x, *s);
                    let g = grad_of!(x);
                    for j in 0..g.len() {
                        g[j] += s * dy[j];
                    }
                }
                Node::Reshape { x } => {
                    let x = *x;
                    accumulate(grad_of!(x), &dy);
                }
                Node::PropSmooth { logits, h, w, depth, valid, probs } => {
                    let logits = *logits;
                    let (h, w) = (*h, *w);
                    let depth = Rc::clone(depth);
                    let valid = Rc::clone(valid);
                    let probs = probs.clone();
                    let out = self.vals[i].data().to_vec();
                    let g = grad_of!(logits);
                    for py in 0..h {
                        for px in 0..w {
                            let base = (py * w + px) * 9;
                            let pr = &probs[base..base + 9];
                            let mut s = 0.0;
                            let mut q = 0;
                            let mut mflag = [false; 9];
                            let mut dvals = [0.0; 9];
                            for dyy in -1i64..=1 {
                                for dxx in -1i64..=1 {
                                    let ny = (py as i64 + dyy).clamp(0, h as i64 - 1) as usize;
                                    let nx = (px as i64 + dxx).clamp(0, w as i64 - 1) as usize;
                                    mflag[q] = valid[ny * w + nx];
                                    dvals[q] = depth[ny * w + nx];
                                    if mflag[q] {
                                        s += pr[q];
                                    }
                                    q += 1;
                                }
                            }
                            if s <= 0.0 {
                                continue;
                            }
                            let o = out[py * w + px];
                            let dout = dy[py * w + px];
                            // d out / d p_q through the renormalized sum
                            let mut gp = [0.0; 9];
                            for q in 0..9 {
                                if mflag[q] {
                                    gp[q] = dout * (dvals[q] - o) / s;
                                }
                            }
                            let mut dot = 0.0;
                            for q in 0..9 {
                                dot += pr[q] * gp[q];
                            }
                            for q in 0..9 {
                                g[base + q] += pr[q] * (gp[q] - dot);
                            }
                        }
                    }
                }
            }
        }

        let mut out = GradMap::new();
        for (path, var) in &self.param_vars {
            if let Some(g) = grads[var.0].take() {
                out.insert(path.clone(), Tensor::new(self.vals[var.0].shape().to_vec(), g));
            }
        }
        Ok(out)
    }
}

fn accumulate(g: &mut [f64], d: &[f64]) {
    debug_assert_eq!(g.len(), d.len());
    for i in 0..g.len() {
        g[i] += d[i];
    }
}

pub(crate) fn sparse_conv_fwd(
    x: &[f64],
    cin: usize,
    w: &[f64],
    b: &[f64],
    cout: usize,
    plan: &SparseConvPlan,
    y: &mut [f64],
) {
    par_fill_rows(y, plan.n_out, cout, 64, |o, yr| {
        yr.copy_from_slice(b);
        let lo = plan.row_ptr[o] as usize;
        let hi = plan.row_ptr[o + 1] as usize;
        for &(irow, off) in &plan.entries[lo..hi] {
            let xr = &x[irow as usize * cin..(irow as usize + 1) * cin];
            let wo = &w[off as usize * cin * cout..(off as usize + 1) * cin * cout];
            for (ci, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    let wr = &wo[ci * cout..(ci + 1) * cout];
                    for c in 0..cout {
                        yr[c] += xv * wr[c];
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn sparse_conv_bwd(
    x: &[f64],
    cin: usize,
    w: &[f64],
    cout: usize,
    plan: &SparseConvPlan,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    par_fill_rows(dx, plan.n_in, cin, 64, |irow, dxr| {
        let lo = plan.t_row_ptr[irow] as usize;
        let hi = plan.t_row_ptr[irow + 1] as usize;
        for &(orow, off) in &plan.t_entries[lo..hi] {
            let dyr = &dy[orow as usize * cout..(orow as usize + 1) * cout];
            let wo = &w[off as usize * cin * cout..(off as usize + 1) * cin * cout];
            for ci in 0..cin {
                let wr = &wo[ci * cout..(ci + 1) * cout];
                let mut acc = 0.0;
                for c in 0..cout {
                    acc += dyr[c] * wr[c];
                }
                dxr[ci] += acc;
            }
        }
    });
    let partials = par_chunk_map(plan.n_out, 64, |range| {
        let mut pw = vec![0.0; plan.taps * cin * cout];
        let mut pb = vec![0.0; cout];
        for o in range {
            let dyr = &dy[o * cout..(o + 1) * cout];
            for c in 0..cout {
                pb[c] += dyr[c];
            }
            let lo = plan.row_ptr[o] as usize;
            let hi = plan.row_ptr[o + 1] as usize;
            for &(irow, off) in &plan.entries[lo..hi] {
                let xr = &x[irow as usize * cin..(irow as usize + 1) * cin];
                let pwo = &mut pw[off as usize * cin * cout..(off as usize + 1) * cin * cout];
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv != 0.0 {
                        let pwr = &mut pwo[ci * cout..(ci + 1) * cout];
                        for c in 0..cout {
                            pwr[c] += xv * dyr[c];
                        }
                    }
                }
            }
        }
        (pw, pb)
    });
    for (pw, pb) in partials {
        for (a, v) in dw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, v) in db.iter_mut().zip(pb) {
            *a += v;
        }
    }
}
