//! Small net wiring shared by the learned blocks: parameter registration,
//! taped forward, and a matching pure forward.

use super::kernels::{self, PadMode};
use super::store::ParameterStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::group_count;
use crate::error::{Error, Result};

const GN_EPS: f64 = 1e-5;

/// Multi-layer perceptron: affine + ReLU per layer, last layer linear.
/// `widths[0]` is the input width.
#[derive(Debug, Clone)]
pub struct MlpNet {
    pub base: String,
    pub widths: Vec<usize>,
}

impl MlpNet {
    pub fn register(store: &mut ParameterStore, base: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least one layer");
        for i in 0..widths.len() - 1 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            store.init_uniform(&format!("{base}.fc{i}.w"), &[cin, cout], cin, cout);
            store.init_uniform(&format!("{base}.fc{i}.b"), &[cout], cin, cout);
        }
        MlpNet { base: base.to_string(), widths: widths.to_vec() }
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n_layers = self.widths.len() - 1;
        let mut h = x;
        for i in 0..n_layers {
            let w = tape.param(&format!("{}.fc{i}.w", self.base))?;
            let b = tape.param(&format!("{}.fc{i}.b", self.base))?;
            h = tape.affine(h, w, b)?;
            if i + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(2, "mlp input")?;
        let n = x.shape()[0];
        if x.shape()[1] != self.widths[0] {
            return Err(Error::ShapeMismatch(format!(
                "mlp input width {} != {}",
                x.shape()[1],
                self.widths[0]
            )));
        }
        let n_layers = self.widths.len() - 1;
        let mut h = x.clone();
        for i in 0..n_layers {
            let w = store.get(&format!("{}.fc{i}.w", self.base)).ok_or_else(|| Error::MissingGradient(format!("{}.fc{i}.w", self.base)))?;
            let b = store.get(&format!("{}.fc{i}.b", self.base)).unwrap();
            let cout = self.widths[i + 1];
            let mut y = Tensor::zeros(&[n, cout]);
            kernels::matmul_bias_fwd(h.data(), n, self.widths[i], w.data(), b.data(), cout, y.data_mut());
            if i + 1 < n_layers {
                let mut r = Tensor::zeros(y.shape());
                kernels::relu_fwd(y.data(), r.data_mut());
                h = r;
            } else {
                h = y;
            }
        }
        Ok(h)
    }
}

/// Stack of width-3 1D convolutions with group norm + ReLU between layers
/// and a plain final layer. Input [N, L, widths[0]].
#[derive(Debug, Clone)]
pub struct Conv1dNet {
    pub base: String,
    pub widths: Vec<usize>,
}

impl Conv1dNet {
    pub fn register(store: &mut ParameterStore, base: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2);
        for i in 0..widths.len() - 1 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            store.init_uniform(&format!("{base}.conv{i}.w"), &[3, cin, cout], 3 * cin, 3 * cout);
            store.init_uniform(&format!("{base}.conv{i}.b"), &[cout], 3 * cin, 3 * cout);
            if i + 2 < widths.len() {
                store.init_const(&format!("{base}.gn{i}.gamma"), &[cout], 1.0);
                store.init_const(&format!("{base}.gn{i}.beta"), &[cout], 0.0);
            }
        }
        Conv1dNet { base: base.to_string(), widths: widths.to_vec() }
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n_layers = self.widths.len() - 1;
        let mut h = x;
        for i in 0..n_layers {
            let w = tape.param(&format!("{}.conv{i}.w", self.base))?;
            let b = tape.param(&format!("{}.conv{i}.b", self.base))?;
            h = tape.conv1d(h, w, b)?;
            if i + 1 < n_layers {
                let c = self.widths[i + 1];
                let gamma = tape.param(&format!("{}.gn{i}.gamma", self.base))?;
                let beta = tape.param(&format!("{}.gn{i}.beta", self.base))?;
                h = tape.group_norm(h, gamma, beta, group_count(c), GN_EPS)?;
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(3, "conv1d input")?;
        let (n, l) = (x.shape()[0], x.shape()[1]);
        if x.shape()[2] != self.widths[0] {
            return Err(Error::ShapeMismatch(format!(
                "conv1d input channels {} != {}",
                x.shape()[2],
                self.widths[0]
            )));
        }
        let n_layers = self.widths.len() - 1;
        let mut h = x.clone();
        for i in 0..n_layers {
            let w = store.get(&format!("{}.conv{i}.w", self.base)).ok_or_else(|| Error::MissingGradient(format!("{}.conv{i}.w", self.base)))?;
            let b = store.get(&format!("{}.conv{i}.b", self.base)).unwrap();
            let cin = self.widths[i];
            let cout = self.widths[i + 1];
            let mut y = Tensor::zeros(&[n, l, cout]);
            kernels::conv1d_fwd(h.data(), n, l, cin, w.data(), b.data(), 3, cout, y.data_mut());
            if i + 1 < n_layers {
                let gamma = store.get(&format!("{}.gn{i}.gamma", self.base)).unwrap();
                let beta = store.get(&format!("{}.gn{i}.beta", self.base)).unwrap();
                let mut z = Tensor::zeros(&[n, l, cout]);
                kernels::group_norm_fwd(y.data(), n, l, cout, group_count(cout), gamma.data(), beta.data(), GN_EPS, z.data_mut());
                let mut r = Tensor::zeros(&[n, l, cout]);
                kernels::relu_fwd(z.data(), r.data_mut());
                h = r;
            } else {
                h = y;
            }
        }
        Ok(h)
    }
}

/// Stack of 3x3 2D convolutions with optional stride per layer, group norm
/// + ReLU between layers, plain final layer. Input [H, W, widths[0]].
#[derive(Debug, Clone)]
pub struct Conv2dNet {
    pub base: String,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub pad: PadMode,
}

impl Conv2dNet {
    pub fn register(
        store: &mut ParameterStore,
        base: &str,
        widths: &[usize],
        strides: &[usize],
        pad: PadMode,
    ) -> Self {
        assert!(widths.len() >= 2);
        assert_eq!(strides.len(), widths.len() - 1);
        for i in 0..widths.len() - 1 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            store.init_uniform(&format!("{base}.conv{i}.w"), &[3, 3, cin, cout], 9 * cin, 9 * cout);
            store.init_uniform(&format!("{base}.conv{i}.b"), &[cout], 9 * cin, 9 * cout);
            if i + 2 < widths.len() {
                store.init_const(&format!("{base}.gn{i}.gamma"), &[cout], 1.0);
                store.init_const(&format!("{base}.gn{i}.beta"), &[cout], 0.0);
            }
        }
        Conv2dNet {
            base: base.to_string(),
            widths: widths.to_vec(),
            strides: strides.to_vec(),
            pad,
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n_layers = self.widths.len() - 1;
        let mut h = x;
        for i in 0..n_layers {
            let w = tape.param(&format!("{}.conv{i}.w", self.base))?;
            let b = tape.param(&format!("{}.conv{i}.b", self.base))?;
            h = tape.conv2d(h, w, b, self.strides[i], self.pad)?;
            if i + 1 < n_layers {
                let c = self.widths[i + 1];
                let shape = tape.value(h).shape().to_vec();
                let gamma = tape.param(&format!("{}.gn{i}.gamma", self.base))?;
                let beta = tape.param(&format!("{}.gn{i}.beta", self.base))?;
                // one instance: statistics over the whole spatial extent
                let flat = tape.reshape(h, &[1, shape[0] * shape[1], c])?;
                let gn = tape.group_norm(flat, gamma, beta, group_count(c), GN_EPS)?;
                let back = tape.reshape(gn, &shape)?;
                h = tape.relu(back);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(3, "conv2d input")?;
        if x.shape()[2] != self.widths[0] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input channels {} != {}",
                x.shape()[2],
                self.widths[0]
            )));
        }
        let n_layers = self.widths.len() - 1;
        let mut h = x.clone();
        for i in 0..n_layers {
            let w = store.get(&format!("{}.conv{i}.w", self.base)).ok_or_else(|| Error::MissingGradient(format!("{}.conv{i}.w", self.base)))?;
            let b = store.get(&format!("{}.conv{i}.b", self.base)).unwrap();
            let (hh, ww, cin) = (h.shape()[0], h.shape()[1], h.shape()[2]);
            let cout = self.widths[i + 1];
            let oh = kernels::conv_out_extent(hh, 3, self.strides[i]);
            let ow = kernels::conv_out_extent(ww, 3, self.strides[i]);
            let mut y = Tensor::zeros(&[oh, ow, cout]);
            kernels::conv2d_fwd(h.data(), hh, ww, cin, w.data(), b.data(), 3, 3, cout, self.strides[i], self.pad, y.data_mut());
            if i + 1 < n_layers {
                let gamma = store.get(&format!("{}.gn{i}.gamma", self.base)).unwrap();
                let beta = store.get(&format!("{}.gn{i}.beta", self.base)).unwrap();
                let mut z = Tensor::zeros(&[oh, ow, cout]);
                kernels::group_norm_fwd(y.data(), 1, oh * ow, cout, group_count(cout), gamma.data(), beta.data(), GN_EPS, z.data_mut());
                let mut r = Tensor::zeros(&[oh, ow, cout]);
                kernels::relu_fwd(z.data(), r.data_mut());
                h = r;
            } else {
                h = y;
            }
        }
        Ok(h)
    }
}
