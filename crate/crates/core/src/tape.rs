//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] executes operations eagerly and records them in issue order,
//! which is a valid topological order by construction. [`Tape::backward`]
//! replays the record in reverse, accumulating vector-Jacobian products into
//! per-buffer gradient slots. Only the operations the classification model
//! needs are provided; this is not a general-purpose autodiff system.
//!
//! One tape belongs to one thread. Separate tapes may run on separate
//! threads concurrently. Every kernel reduces in a fixed order, so identical
//! inputs produce bit-identical outputs within a build.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, Params};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Rank-3 feature map handle: channels x height x width.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn new(tape: &Tape, var: Var) -> Result<Self> {
        let shape = tape.shape(var);
        if shape.len() != 3 {
            return Err(Error::shape(
                "FeatureMap::new",
                "rank-3 (channels, height, width)",
                format!("rank-{} {:?}", shape.len(), shape),
            ));
        }
        Ok(FeatureMap {
            var,
            channels: shape[0],
            height: shape[1],
            width: shape[2],
        })
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Whether batchnorm uses batch statistics (training) or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        out: Var,
        stride: usize,
        pad: usize,
    },
    DepthwiseMultiscale {
        x: Var,
        w: [Var; 4],
        out: Var,
    },
    Relu {
        x: Var,
        out: Var,
    },
    SoftmaxRows {
        x: Var,
        out: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch_stats: bool,
    },
    AvgPool2d {
        x: Var,
        out: Var,
        k: usize,
        stride: usize,
    },
    UpsampleNearest {
        x: Var,
        out: Var,
    },
    GlobalAvgPool {
        x: Var,
        out: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        out: Var,
    },
    MatmulBT {
        a: Var,
        b: Var,
        out: Var,
    },
    Transpose {
        x: Var,
        out: Var,
    },
    FlattenSpatial {
        x: Var,
        out: Var,
    },
    UnflattenSpatial {
        x: Var,
        out: Var,
    },
    RowMean {
        x: Var,
        out: Var,
    },
    SubRow {
        x: Var,
        row: Var,
        out: Var,
    },
    AddRow {
        x: Var,
        row: Var,
        out: Var,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Scale {
        x: Var,
        c: f64,
        out: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        out: Var,
    },
    MeanMany {
        xs: Vec<Var>,
        out: Var,
    },
    SumAll {
        x: Var,
        out: Var,
    },
}

/// Recording tape: buffers, operations, and (after `backward`) gradients.
pub struct Tape {
    bufs: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    /// Register a leaf tensor (input or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let id = self.bufs.len();
        self.bufs.push(t);
        self.grads.push(None);
        Var(id)
    }

    /// Bind a named parameter as a leaf, reusing the existing binding if the
    /// parameter was already bound on this tape. Gradients for a parameter
    /// used by several samples in one batch therefore accumulate into a
    /// single slot.
    pub fn bind(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(pid, _)| *pid == id) {
            return v;
        }
        let v = self.leaf(params.value(id).clone());
        self.bindings.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.bufs[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.bufs[v.0].shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for every parameter of `params`, indexed by parameter slot;
    /// `None` for parameters not bound on this tape or unreached by backward.
    pub fn param_grads(&self, params: &Params) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; params.len()];
        for &(pid, var) in &self.bindings {
            out[pid.index()] = self.grads[var.0].clone();
        }
        out
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Smallest |x| fed to any relu on this tape. Finite-difference checks
    /// use this to confirm the evaluation point is not within a perturbation
    /// step of a relu kink.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Relu { x, .. } => self.bufs[x.0]
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v)))),
                _ => None,
            })
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    }

    fn push(&mut self, t: Tensor, op: impl FnOnce(Var) -> Op) -> Var {
        let out = self.leaf(t);
        let op = op(out);
        self.ops.push(op);
        out
    }

    fn shape_err(&self, context: &str, expected: String, v: Var) -> Error {
        Error::shape(context, expected, self.bufs[v.0].shape_string())
    }

    // ---- convolution / pooling -------------------------------------------

    /// 2-D cross-correlation. `x` is (c_in, h, w), `w` is (c_out, c_in, k, k)
    /// with odd `k`; zero padding `pad`, stride `stride`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 {
            return Err(self.shape_err("conv2d input", "rank-3 (c,h,w)".into(), x));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(self.shape_err("conv2d weights", "rank-4 (c_out,c_in,k,k)".into(), w));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("weights with {} input channels", c_in),
                format!("weights with {} input channels (shape {:?})", ws[1], ws),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {} must be odd", k)));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("padded spatial dims >= kernel {}", k),
                format!("{}x{} with pad {}", h, wd, pad),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(self.shape_err("conv2d bias", format!("({},)", c_out), b));
            }
        }
        let oh = kernels::conv_out_dim(h, k, stride, pad);
        let ow = kernels::conv_out_dim(wd, k, stride, pad);
        let mut out = vec![0.0; c_out * oh * ow];
        kernels::conv2d_forward(
            self.bufs[x.0].data(),
            self.bufs[w.0].data(),
            b.map(|b| self.bufs[b.0].data()),
            c_in,
            h,
            wd,
            c_out,
            k,
            stride,
            pad,
            &mut out,
        );
        let t = Tensor::new(vec![c_out, oh, ow], out)?;
        Ok(self.push(t, |out| Op::Conv2d { x, w, b, out, stride, pad }))
    }

    /// Multiscale depthwise mixing: the four channel quarters are convolved
    /// depthwise with 1x1, 3x3, 5x5 and 7x7 kernels respectively, "same"
    /// padding. `w[i]` has shape (c/4, k_i, k_i) for k_i in {1,3,5,7}.
    pub fn depthwise_multiscale(&mut self, x: Var, w: [Var; 4]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(self.shape_err("depthwise_multiscale input", "rank-3 (c,h,w)".into(), x));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        if c % 4 != 0 {
            return Err(Error::Config(format!(
                "depthwise_multiscale needs channels divisible by 4, got {}",
                c
            )));
        }
        let group = c / 4;
        for (i, k) in [1usize, 3, 5, 7].into_iter().enumerate() {
            let expect = [group, k, k];
            if self.shape(w[i]) != expect {
                return Err(self.shape_err(
                    "depthwise_multiscale weights",
                    format!("({},{},{})", group, k, k),
                    w[i],
                ));
            }
        }
        let mut out = vec![0.0; c * h * wd];
        for (i, k) in [1usize, 3, 5, 7].into_iter().enumerate() {
            kernels::depthwise_same_forward(
                self.bufs[x.0].data(),
                self.bufs[w[i].0].data(),
                i * group,
                group,
                h,
                wd,
                k,
                &mut out,
            );
        }
        let t = Tensor::new(vec![c, h, wd], out)?;
        Ok(self.push(t, |out| Op::DepthwiseMultiscale { x, w, out }))
    }

    /// Mean over k x k windows with the given stride, no padding.
    pub fn avgpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(self.shape_err("avgpool2d input", "rank-3 (c,h,w)".into(), x));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h < k || w < k {
            return Err(Error::shape(
                "avgpool2d",
                format!("spatial dims >= window {}", k),
                format!("{}x{}", h, w),
            ));
        }
        let oh = kernels::conv_out_dim(h, k, stride, 0);
        let ow = kernels::conv_out_dim(w, k, stride, 0);
        let mut out = vec![0.0; c * oh * ow];
        kernels::avgpool2d_forward(self.bufs[x.0].data(), c, h, w, k, stride, &mut out);
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, |out| Op::AvgPool2d { x, out, k, stride }))
    }

    /// Nearest-neighbor resize to (h_out, w_out).
    pub fn upsample_nearest(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(self.shape_err("upsample_nearest input", "rank-3 (c,h,w)".into(), x));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * h_out * w_out];
        kernels::upsample_nearest_forward(self.bufs[x.0].data(), c, h, w, h_out, w_out, &mut out);
        let t = Tensor::new(vec![c, h_out, w_out], out)?;
        Ok(self.push(t, |out| Op::UpsampleNearest { x, out }))
    }

    /// Per-channel spatial mean: (c, h, w) -> (c,).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(self.shape_err("global_avg_pool input", "rank-3 (c,h,w)".into(), x));
        }
        let (c, spatial) = (xs[0], xs[1] * xs[2]);
        let data = self.bufs[x.0].data();
        let inv = 1.0 / spatial as f64;
        let out: Vec<f64> = (0..c)
            .map(|ch| data[ch * spatial..(ch + 1) * spatial].iter().sum::<f64>() * inv)
            .collect();
        let t = Tensor::new(vec![c], out)?;
        Ok(self.push(t, |out| Op::GlobalAvgPool { x, out }))
    }

    // ---- normalization / activation --------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.bufs[x.0].data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(t, |out| Op::Relu { x, out })
    }

    /// Row-wise softmax of a (rows, cols) matrix, max-subtracted for
    /// stability. In attention this normalizes over the key index.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(self.shape_err("softmax_rows input", "rank-2 (rows, cols)".into(), x));
        }
        let mut out = vec![0.0; xs[0] * xs[1]];
        kernels::softmax_rows_forward(self.bufs[x.0].data(), xs[0], xs[1], &mut out);
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, |out| Op::SoftmaxRows { x, out }))
    }

    /// Batch normalization of a (c, h, w) map over its spatial positions.
    ///
    /// `Phase::Train` normalizes with the map's own statistics and returns
    /// them so the caller can fold them into running statistics;
    /// `Phase::Eval` normalizes with the provided running statistics and
    /// returns a copy of them. Variance is the biased estimator in both the
    /// normalizer and the returned statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        phase: Phase,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(self.shape_err("batchnorm input", "rank-3 (c,h,w)".into(), x));
        }
        let (c, spatial) = (xs[0], xs[1] * xs[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!("gamma/beta of length {}", c),
                format!(
                    "gamma {}, beta {}",
                    self.bufs[gamma.0].shape_string(),
                    self.bufs[beta.0].shape_string()
                ),
            ));
        }
        let (mean, var) = match phase {
            Phase::Train => kernels::channel_stats(self.bufs[x.0].data(), c, spatial),
            Phase::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let mut out = vec![0.0; c * spatial];
        kernels::batchnorm_apply(
            self.bufs[x.0].data(),
            self.bufs[gamma.0].data(),
            self.bufs[beta.0].data(),
            &mean,
            &var,
            eps,
            c,
            spatial,
            &mut out,
        );
        let t = Tensor::new(xs, out)?;
        let (mean_c, var_c) = (mean.clone(), var.clone());
        let v = self.push(t, |out| Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            mean,
            var,
            eps,
            batch_stats: phase == Phase::Train,
        });
        Ok((v, mean_c, var_c))
    }

    // ---- linear algebra ---------------------------------------------------

    /// (m, k) @ (k, n) -> (m, n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                "(m,k) @ (k,n)",
                format!("{:?} @ {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.bufs[a.0].data(), self.bufs[b.0].data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, |out| Op::Matmul { a, b, out }))
    }

    /// (m, k) @ (n, k)^T -> (m, n); the query-key similarity layout.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(
                "matmul_bt",
                "(m,k) @ (n,k)^T",
                format!("{:?} @ {:?}^T", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt(self.bufs[a.0].data(), self.bufs[b.0].data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, |out| Op::MatmulBT { a, b, out }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(self.shape_err("transpose input", "rank-2".into(), x));
        }
        let (r, c) = (xs[0], xs[1]);
        let data = self.bufs[x.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, |out| Op::Transpose { x, out }))
    }

    /// (c, h, w) -> (h*w, c): one row per spatial position.
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(self.shape_err("flatten_spatial input", "rank-3 (c,h,w)".into(), x));
        }
        let (c, m) = (xs[0], xs[1] * xs[2]);
        let data = self.bufs[x.0].data();
        let mut out = vec![0.0; m * c];
        for ch in 0..c {
            for i in 0..m {
                out[i * c + ch] = data[ch * m + i];
            }
        }
        let t = Tensor::new(vec![m, c], out)?;
        Ok(self.push(t, |out| Op::FlattenSpatial { x, out }))
    }

    /// (h*w, c) -> (c, h, w): inverse of `flatten_spatial`.
    pub fn unflatten_spatial(&mut self, x: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != h * w || xs[1] != c {
            return Err(self.shape_err(
                "unflatten_spatial input",
                format!("({}, {})", h * w, c),
                x,
            ));
        }
        let m = h * w;
        let data = self.bufs[x.0].data();
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            for i in 0..m {
                out[ch * m + i] = data[i * c + ch];
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, |out| Op::UnflattenSpatial { x, out }))
    }

    /// Column means of a (m, d) matrix -> (1, d).
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(self.shape_err("row_mean input", "rank-2".into(), x));
        }
        let (m, d) = (xs[0], xs[1]);
        let data = self.bufs[x.0].data();
        let inv = 1.0 / m as f64;
        let mut out = vec![0.0; d];
        for i in 0..m {
            for j in 0..d {
                out[j] += data[i * d + j];
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let t = Tensor::new(vec![1, d], out)?;
        Ok(self.push(t, |out| Op::RowMean { x, out }))
    }

    /// Subtract a (1, d) row from every row of a (m, d) matrix.
    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.rowwise(x, row, "sub_row", |a, b| a - b, |x, row, out| Op::SubRow { x, row, out })
    }

    /// Add a (1, d) row to every row of a (m, d) matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.rowwise(x, row, "add_row", |a, b| a + b, |x, row, out| Op::AddRow { x, row, out })
    }

    fn rowwise(
        &mut self,
        x: Var,
        row: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var, Var) -> Op,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rs = self.shape(row).to_vec();
        if xs.len() != 2 || rs.len() != 2 || rs[0] != 1 || rs[1] != xs[1] {
            return Err(Error::shape(
                name,
                format!("(m,d) with row (1,d); d={}", xs.get(1).copied().unwrap_or(0)),
                format!("{:?} with row {:?}", xs, rs),
            ));
        }
        let (m, d) = (xs[0], xs[1]);
        let xd = self.bufs[x.0].data();
        let rd = self.bufs[row.0].data();
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..d {
                out[i * d + j] = f(xd[i * d + j], rd[j]);
            }
        }
        let t = Tensor::new(vec![m, d], out)?;
        Ok(self.push(t, |o| op(x, row, o)))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                self.bufs[a.0].shape_string(),
                self.bufs[b.0].shape_string(),
            ));
        }
        let out: Vec<f64> = self.bufs[a.0]
            .data()
            .iter()
            .zip(self.bufs[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, |out| Op::Add { a, b, out }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                self.bufs[a.0].shape_string(),
                self.bufs[b.0].shape_string(),
            ));
        }
        let out: Vec<f64> = self.bufs[a.0]
            .data()
            .iter()
            .zip(self.bufs[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, |out| Op::Mul { a, b, out }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.bufs[x.0].data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(t, |out| Op::Scale { x, c, out })
    }

    // ---- head / loss ------------------------------------------------------

    /// Dense layer: w (out, in) @ x (in,) + b (out,) -> (out,).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            return Err(Error::shape(
                "linear",
                "w (out,in), x (in,), b (out,)",
                format!(
                    "w {:?}, x {:?}, b {:?}",
                    ws,
                    xs,
                    self.shape(b)
                ),
            ));
        }
        let (o, i) = (ws[0], ws[1]);
        let wd = self.bufs[w.0].data();
        let xd = self.bufs[x.0].data();
        let bd = self.bufs[b.0].data();
        let mut out = vec![0.0; o];
        for r in 0..o {
            let mut acc = bd[r];
            for ccol in 0..i {
                acc += wd[r * i + ccol] * xd[ccol];
            }
            out[r] = acc;
        }
        let t = Tensor::new(vec![o], out)?;
        Ok(self.push(t, |out| Op::Linear { x, w, b, out }))
    }

    /// Softmax cross-entropy of a logit vector against a class index,
    /// computed as logsumexp(logits) - logits[target].
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 1 {
            return Err(self.shape_err("cross_entropy logits", "rank-1".into(), logits));
        }
        if target >= xs[0] {
            return Err(Error::Config(format!(
                "cross_entropy target {} out of range for {} classes",
                target, xs[0]
            )));
        }
        let data = self.bufs[logits.0].data();
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - data[target];
        let t = Tensor::scalar(loss);
        Ok(self.push(t, |out| Op::CrossEntropy { logits, target, out }))
    }

    /// Mean of scalar inputs, used to average per-sample losses over a batch.
    pub fn mean_many(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("mean_many over empty set".into()));
        }
        for &v in xs {
            if self.bufs[v.0].len() != 1 {
                return Err(self.shape_err("mean_many input", "scalar".into(), v));
            }
        }
        let mean = xs.iter().map(|v| self.bufs[v.0].item()).sum::<f64>() / xs.len() as f64;
        let t = Tensor::scalar(mean);
        let xs = xs.to_vec();
        Ok(self.push(t, |out| Op::MeanMany { xs, out }))
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.bufs[x.0].data().iter().sum();
        self.push(Tensor::scalar(s), |out| Op::SumAll { x, out })
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Replays recorded operations in
    /// reverse, accumulating gradients; deterministic for a fixed graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.bufs[loss.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                self.bufs[loss.0].shape_string(),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn take_grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].clone()
    }

    fn accum(&mut self, v: Var, g: &[f64]) {
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            None => self.grads[v.0] = Some(g.to_vec()),
        }
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are immutable once recorded; split the borrow by reading the
        // needed fields up front.
        match &self.ops[idx] {
            &Op::Conv2d { x, w, b, out, stride, pad } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                let (c_out, k) = (ws[0], ws[2]);
                let mut d_x = vec![0.0; self.bufs[x.0].len()];
                let mut d_w = vec![0.0; self.bufs[w.0].len()];
                let mut d_b = b.map(|b| vec![0.0; self.bufs[b.0].len()]);
                kernels::conv2d_backward(
                    self.bufs[x.0].data(),
                    self.bufs[w.0].data(),
                    &d_out,
                    c_in,
                    h,
                    wd,
                    c_out,
                    k,
                    stride,
                    pad,
                    &mut d_x,
                    &mut d_w,
                    d_b.as_deref_mut(),
                );
                self.accum(x, &d_x);
                self.accum(w, &d_w);
                if let (Some(b), Some(d_b)) = (b, d_b) {
                    self.accum(b, &d_b);
                }
            }
            &Op::DepthwiseMultiscale { x, w, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let group = c / 4;
                let mut d_x = vec![0.0; self.bufs[x.0].len()];
                for (i, k) in [1usize, 3, 5, 7].into_iter().enumerate() {
                    let mut d_w = vec![0.0; self.bufs[w[i].0].len()];
                    kernels::depthwise_same_backward(
                        self.bufs[x.0].data(),
                        self.bufs[w[i].0].data(),
                        &d_out,
                        i * group,
                        group,
                        h,
                        wd,
                        k,
                        &mut d_x,
                        &mut d_w,
                    );
                    self.accum(w[i], &d_w);
                }
                self.accum(x, &d_x);
            }
            &Op::Relu { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                // Subgradient at exactly 0 is 0.
                let d_x: Vec<f64> = self.bufs[x.0]
                    .data()
                    .iter()
                    .zip(&d_out)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accum(x, &d_x);
            }
            &Op::SoftmaxRows { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let mut d_x = vec![0.0; self.bufs[x.0].len()];
                kernels::softmax_rows_backward(self.bufs[out.0].data(), &d_out, xs[0], xs[1], &mut d_x);
                self.accum(x, &d_x);
            }
            Op::BatchNorm { x, gamma, beta, out, mean, var, eps, batch_stats } => {
                let (x, gamma, beta, out) = (*x, *gamma, *beta, *out);
                let (mean, var, eps, batch_stats) = (mean.clone(), var.clone(), *eps, *batch_stats);
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (c, spatial) = (xs[0], xs[1] * xs[2]);
                let mut d_x = vec![0.0; self.bufs[x.0].len()];
                let mut d_gamma = vec![0.0; c];
                let mut d_beta = vec![0.0; c];
                if batch_stats {
                    kernels::batchnorm_train_backward(
                        self.bufs[x.0].data(),
                        self.bufs[gamma.0].data(),
                        &mean,
                        &var,
                        eps,
                        c,
                        spatial,
                        &d_out,
                        &mut d_x,
                        &mut d_gamma,
                        &mut d_beta,
                    );
                } else {
                    kernels::batchnorm_eval_backward(
                        self.bufs[x.0].data(),
                        self.bufs[gamma.0].data(),
                        &mean,
                        &var,
                        eps,
                        c,
                        spatial,
                        &d_out,
                        &mut d_x,
                        &mut d_gamma,
                        &mut d_beta,
                    );
                }
                self.accum(x, &d_x);
                self.accum(gamma, &d_gamma);
                self.accum(beta, &d_beta);
            }
            &Op::AvgPool2d { x, out, k, stride } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let mut d_x = vec![0.0; self.bufs[x.0].len()];
                kernels::avgpool2d_backward(&d_out, xs[0], xs[1], xs[2], k, stride, &mut d_x);
                self.accum(x, &d_x);
            }
            &Op::UpsampleNearest { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let os = self.shape(out).to_vec();
                let mut d_x = vec![0.0; self.bufs[x.0].len()];
                kernels::upsample_nearest_backward(&d_out, xs[0], xs[1], xs[2], os[1], os[2], &mut d_x);
                self.accum(x, &d_x);
            }
            &Op::GlobalAvgPool { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (c, spatial) = (xs[0], xs[1] * xs[2]);
                let inv = 1.0 / spatial as f64;
                let mut d_x = vec![0.0; c * spatial];
                for ch in 0..c {
                    let g = d_out[ch] * inv;
                    for i in 0..spatial {
                        d_x[ch * spatial + i] = g;
                    }
                }
                self.accum(x, &d_x);
            }
            &Op::Matmul { a, b, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let (m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1])
                };
                let n = self.shape(b)[1];
                // d_a = d_out @ b^T ; d_b = a^T @ d_out
                let mut d_a = vec![0.0; m * k];
                kernels::matmul_bt(&d_out, self.bufs[b.0].data(), m, n, k, &mut d_a);
                let ad = self.bufs[a.0].data();
                let mut d_b = vec![0.0; k * n];
                for l in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ad[i * k + l] * d_out[i * n + j];
                        }
                        d_b[l * n + j] = acc;
                    }
                }
                self.accum(a, &d_a);
                self.accum(b, &d_b);
            }
            &Op::MatmulBT { a, b, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let (m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1])
                };
                let n = self.shape(b)[0];
                // out = a @ b^T: d_a = d_out @ b ; d_b = d_out^T @ a
                let mut d_a = vec![0.0; m * k];
                kernels::matmul(&d_out, self.bufs[b.0].data(), m, n, k, &mut d_a);
                let ad = self.bufs[a.0].data();
                let mut d_b = vec![0.0; n * k];
                for j in 0..n {
                    for l in 0..k {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += d_out[i * n + j] * ad[i * k + l];
                        }
                        d_b[j * k + l] = acc;
                    }
                }
                self.accum(a, &d_a);
                self.accum(b, &d_b);
            }
            &Op::Transpose { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (r, c) = (xs[0], xs[1]);
                let mut d_x = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d_x[i * c + j] = d_out[j * r + i];
                    }
                }
                self.accum(x, &d_x);
            }
            &Op::FlattenSpatial { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (c, m) = (xs[0], xs[1] * xs[2]);
                let mut d_x = vec![0.0; c * m];
                for ch in 0..c {
                    for i in 0..m {
                        d_x[ch * m + i] = d_out[i * c + ch];
                    }
                }
                self.accum(x, &d_x);
            }
            &Op::UnflattenSpatial { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let os = self.shape(out).to_vec();
                let (c, m) = (os[0], os[1] * os[2]);
                let mut d_x = vec![0.0; m * c];
                for ch in 0..c {
                    for i in 0..m {
                        d_x[i * c + ch] = d_out[ch * m + i];
                    }
                }
                self.accum(x, &d_x);
            }
            &Op::RowMean { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (m, d) = (xs[0], xs[1]);
                let inv = 1.0 / m as f64;
                let mut d_x = vec![0.0; m * d];
                for i in 0..m {
                    for j in 0..d {
                        d_x[i * d + j] = d_out[j] * inv;
                    }
                }
                self.accum(x, &d_x);
            }
            &Op::SubRow { x, row, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (m, d) = (xs[0], xs[1]);
                self.accum(x, &d_out);
                let mut d_row = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        d_row[j] -= d_out[i * d + j];
                    }
                }
                self.accum(row, &d_row);
            }
            &Op::AddRow { x, row, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let xs = self.shape(x).to_vec();
                let (m, d) = (xs[0], xs[1]);
                self.accum(x, &d_out);
                let mut d_row = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        d_row[j] += d_out[i * d + j];
                    }
                }
                self.accum(row, &d_row);
            }
            &Op::Add { a, b, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                self.accum(a, &d_out);
                self.accum(b, &d_out);
            }
            &Op::Mul { a, b, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let d_a: Vec<f64> = d_out.iter().zip(self.bufs[b.0].data()).map(|(g, v)| g * v).collect();
                let d_b: Vec<f64> = d_out.iter().zip(self.bufs[a.0].data()).map(|(g, v)| g * v).collect();
                self.accum(a, &d_a);
                self.accum(b, &d_b);
            }
            &Op::Scale { x, c, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let d_x: Vec<f64> = d_out.iter().map(|g| g * c).collect();
                self.accum(x, &d_x);
            }
            &Op::Linear { x, w, b, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let ws = self.shape(w).to_vec();
                let (o, i) = (ws[0], ws[1]);
                let wd = self.bufs[w.0].data();
                let xd = self.bufs[x.0].data();
                let mut d_x = vec![0.0; i];
                let mut d_w = vec![0.0; o * i];
                for r in 0..o {
                    let g = d_out[r];
                    for ccol in 0..i {
                        d_x[ccol] += g * wd[r * i + ccol];
                        d_w[r * i + ccol] = g * xd[ccol];
                    }
                }
                self.accum(x, &d_x);
                self.accum(w, &d_w);
                self.accum(b, &d_out);
            }
            &Op::CrossEntropy { logits, target, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let g = d_out[0];
                let data = self.bufs[logits.0].data();
                let n = data.len();
                let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut probs = vec![0.0; n];
                let mut sum = 0.0;
                for j in 0..n {
                    probs[j] = (data[j] - max).exp();
                    sum += probs[j];
                }
                let mut d_logits = vec![0.0; n];
                for j in 0..n {
                    let p = probs[j] / sum;
                    d_logits[j] = g * (p - if j == target { 1.0 } else { 0.0 });
                }
                self.accum(logits, &d_logits);
            }
            Op::MeanMany { xs, out } => {
                let (xs, out) = (xs.clone(), *out);
                let Some(d_out) = self.take_grad(out) else { return };
                let g = d_out[0] / xs.len() as f64;
                for v in xs {
                    self.accum(v, &[g]);
                }
            }
            &Op::SumAll { x, out } => {
                let Some(d_out) = self.take_grad(out) else { return };
                let d_x = vec![d_out[0]; self.bufs[x.0].len()];
                self.accum(x, &d_x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn conv2d_scalar_product() {
        // 1x1 input [[5]], weight [[[[2]]]], bias [0] -> [[10]]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 1], vec![5.0]);
        let w = leaf(&mut tape, &[1, 1, 1, 1], vec![2.0]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv2d_box_sum_symmetry() {
        // all-ones 1x3x3 input, all-ones 1x1x3x3 weight, pad 1:
        // center sees 9 ones, corners see 4.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3, 3], vec![1.0; 9]);
        let w = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9]);
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.at(&[0, 1, 1]), 9.0);
        for &(r, c) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(&[0, r, c]), 4.0);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3, 3], vec![0.0; 18]);
        let w = leaf(&mut tape, &[1, 3, 1, 1], vec![0.0; 3]);
        let err = tape.conv2d(x, w, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 input channels"), "got: {msg}");
    }

    #[test]
    fn relu_forward_and_gradient_convention() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        // gradient at 2 is 1, at -1 is 0, at exactly 0 is 0
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], vec![-3.0, -0.5, -2.0, -1e-9]);
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = leaf(&mut tape, &[1, 3], vec![1.0, 2.0, 3.0]);
        let b = leaf(&mut tape, &[1, 3], vec![11.0, 12.0, 13.0]);
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn avgpool_block_mean() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let y = tape.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn avgpool_constant_input() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4, 4], vec![2.5; 32]);
        let y = tape.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn backward_linear_grad_is_input() {
        // loss = sum(w . x) with x fixed -> grad(w) = x
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let w = leaf(&mut tape, &[3], vec![0.3, 0.7, -0.1]);
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), tape.value(x).data());
    }

    #[test]
    fn backward_inactive_relu_is_zero() {
        // loss = relu(-w)^2 at w=1: relu output 0, grad 0
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[1], vec![1.0]);
        let neg = tape.scale(w, -1.0);
        let r = tape.relu(neg);
        let sq = tape.mul(r, r).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
        let gamma = leaf(&mut tape, &[2], vec![1.0, 1.0]);
        let beta = leaf(&mut tape, &[2], vec![0.25, -0.5]);
        let (y, _, _) = tape
            .batchnorm(x, gamma, beta, &[0.0; 2], &[1.0; 2], 1e-5, Phase::Train)
            .unwrap();
        let out = tape.value(y).data();
        for &v in &out[0..4] {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for &v in &out[4..8] {
            assert!((v + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_standardized_input_is_identity() {
        // gamma=1, beta=0 on an already-standardized channel.
        let vals = [-1.5, -0.5, 0.5, 1.5];
        let mean: f64 = vals.iter().sum::<f64>() / 4.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let std = var.sqrt();
        let data: Vec<f64> = vals.iter().map(|v| (v - mean) / std).collect();
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], data.clone());
        let gamma = leaf(&mut tape, &[1], vec![1.0]);
        let beta = leaf(&mut tape, &[1], vec![0.0]);
        let (y, _, _) = tape
            .batchnorm(x, gamma, beta, &[0.0], &[1.0], 1e-5, Phase::Train)
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_eval_uses_given_stats() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 2], vec![2.0, 4.0]);
        let gamma = leaf(&mut tape, &[1], vec![1.0]);
        let beta = leaf(&mut tape, &[1], vec![0.0]);
        // running mean 0, var 1: output equals input (up to eps)
        let (y, m, v) = tape
            .batchnorm(x, gamma, beta, &[0.0], &[1.0], 0.0, Phase::Eval)
            .unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
        assert_eq!(m, vec![0.0]);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = leaf(&mut tape, &[2, 3, 4], data.clone());
        let flat = tape.flatten_spatial(x).unwrap();
        assert_eq!(tape.shape(flat), &[12, 2]);
        // row m holds the channel vector at position m
        assert_eq!(tape.value(flat).at(&[0, 0]), 0.0);
        assert_eq!(tape.value(flat).at(&[0, 1]), 12.0);
        let back = tape.unflatten_spatial(flat, 2, 3, 4).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn param_binding_is_reused() {
        use crate::params::Params;
        let mut params = Params::new();
        let id = params.insert("w", Tensor::from_vec(vec![2.0]), true).unwrap();
        let mut tape = Tape::new();
        let a = tape.bind(&params, id);
        let b = tape.bind(&params, id);
        assert_eq!(a, b);
        // two uses accumulate into one gradient slot
        let x = tape.leaf(Tensor::from_vec(vec![3.0]));
        let p1 = tape.mul(a, x).unwrap();
        let p2 = tape.mul(b, x).unwrap();
        let s = tape.add(p1, p2).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads(&params);
        assert_eq!(grads[0].as_deref().unwrap(), &[6.0]);
    }
}
