//! Feed-forward tanh network with exact input derivatives.
//!
//! A forward pass carries "jets": the value of every unit together with its
//! first and (optionally) second derivatives with respect to the network
//! input. Channel 0 is the value, channels `1..=d` the gradient, and the
//! remaining `d(d+1)/2` channels the upper triangle of the Hessian in
//! row-major `(i ≤ k)` order.

use faer::Mat;
use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dictionary::{Jet, Observables};
use crate::error::{check_dim, Error, Result};
use crate::rng;

/// Rows per batched pass.
pub(crate) const CHUNK: usize = 4096;

/// Derivative order carried by a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Order {
    Value,
    Gradient,
    Hessian,
}

pub(crate) fn channel_count(dim: usize, order: Order) -> usize {
    match order {
        Order::Value => 1,
        Order::Gradient => 1 + dim,
        Order::Hessian => 1 + dim + dim * (dim + 1) / 2,
    }
}

/// `(i, k)` with `i ≤ k`, in channel order.
pub(crate) fn hessian_pairs(dim: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(dim * (dim + 1) / 2);
    for i in 0..dim {
        for k in i..dim {
            out.push((i, k));
        }
    }
    out
}

/// Dense affine map `z = W h + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn glorot(inputs: usize, outputs: usize, r: &mut rng::Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| r.random_range(-limit..=limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn w(&self) -> Mat<f64> {
        Mat::from_fn(self.outputs, self.inputs, |i, j| self.weights[i * self.inputs + j])
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `h Wᵀ`, plus the bias when `with_bias`.
    fn apply(&self, w: &Mat<f64>, h: &Mat<f64>, with_bias: bool) -> Mat<f64> {
        let mut z = h * w.transpose();
        if with_bias {
            for j in 0..self.outputs {
                let b = self.bias[j];
                for v in z.col_as_slice_mut(j) {
                    *v += b;
                }
            }
        }
        z
    }
}

/// Fixed observables appended after the learned outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// The constant `1` followed by the coordinates `x_1, …, x_d`.
    #[default]
    ConstantAndIdentity,
}

/// Architecture of a trainable dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Hidden widths; one or two layers.
    pub hidden: Vec<usize>,
    pub n_learned: usize,
    /// Standardize inputs with the training-data mean and spread.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

/// Neural dictionary `[ψ_1 … ψ_L, 1, x_1 … x_d]` with `ψ` a tanh network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableDictionary {
    pub dim: usize,
    /// The network sees `(x − shift)/scale`.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub hidden: Vec<Layer>,
    pub head: Layer,
    pub augmentation: Augmentation,
}

/// Intermediate values of one batched forward pass.
pub(crate) struct Tape {
    order: Order,
    /// `acts[0]` are the input jets, `acts[l + 1]` the outputs of hidden layer `l`.
    acts: Vec<Vec<Mat<f64>>>,
    /// Pre-activation jets per hidden layer.
    z: Vec<Vec<Mat<f64>>>,
    /// `tanh'`, `tanh''`, `tanh'''` at the pre-activation values.
    slopes: Vec<[Mat<f64>; 3]>,
    /// Head output jets, `rows × n_learned` each.
    pub out: Vec<Mat<f64>>,
}

impl TrainableDictionary {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(dim: usize, spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("network input dimension must be positive".into()));
        }
        if spec.hidden.is_empty() || spec.hidden.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "networks have one or two hidden layers, got {}",
                spec.hidden.len()
            )));
        }
        if spec.hidden.contains(&0) || spec.n_learned == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut r = rng::stream(seed, rng::tags::INIT);
        let mut hidden = Vec::new();
        let mut fan_in = dim;
        for &w in &spec.hidden {
            hidden.push(Layer::glorot(fan_in, w, &mut r));
            fan_in = w;
        }
        let head = Layer::glorot(fan_in, spec.n_learned, &mut r);
        Ok(Self {
            dim,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            hidden,
            head,
            augmentation: Augmentation::ConstantAndIdentity,
        })
    }

    /// Sets the input standardization to the per-axis mean and standard
    /// deviation of `points`.
    pub fn standardize_from(&mut self, points: &[f64]) -> Result<()> {
        let d = self.dim;
        if points.is_empty() || points.len() % d != 0 {
            return Err(Error::InvalidArgument("standardization needs a non-empty point set".into()));
        }
        let m = (points.len() / d) as f64;
        for k in 0..d {
            let mean = points.iter().skip(k).step_by(d).sum::<f64>() / m;
            let var = points.iter().skip(k).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            self.shift[k] = mean;
            self.scale[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    pub fn n_learned(&self) -> usize {
        self.head.outputs
    }

    /// Index of the constant observable.
    pub fn constant_index(&self) -> usize {
        self.n_learned()
    }

    pub fn n_params(&self) -> usize {
        self.hidden.iter().map(Layer::n_params).sum::<usize>() + self.head.n_params()
    }

    /// Flat parameter vector: per layer its weights then its bias, head last.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in self.hidden.iter().chain(std::iter::once(&self.head)) {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.n_params(), p.len())?;
        let mut at = 0;
        for l in self.hidden.iter_mut().chain(std::iter::once(&mut self.head)) {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        check_dim(self.dim, self.shift.len())?;
        check_dim(self.dim, self.scale.len())?;
        let mut fan_in = self.dim;
        for l in self.hidden.iter().chain(std::iter::once(&self.head)) {
            check_dim(fan_in, l.inputs)?;
            check_dim(l.inputs * l.outputs, l.weights.len())?;
            check_dim(l.outputs, l.bias.len())?;
            fan_in = l.outputs;
        }
        if self.hidden.is_empty() || self.hidden.len() > 2 {
            return Err(Error::InvalidConfig("one or two hidden layers expected".into()));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, points: &[f64], order: Order) -> Tape {
        let d = self.dim;
        let rows = points.len() / d;
        let nch = channel_count(d, order);
        let pairs = hessian_pairs(d);

        let mut input = Vec::with_capacity(nch);
        input.push(Mat::from_fn(rows, d, |r, k| (points[r * d + k] - self.shift[k]) / self.scale[k]));
        if order >= Order::Gradient {
            for i in 0..d {
                let s = 1.0 / self.scale[i];
                input.push(Mat::from_fn(rows, d, |_, k| if k == i { s } else { 0.0 }));
            }
        }
        if order == Order::Hessian {
            for _ in &pairs {
                input.push(Mat::zeros(rows, d));
            }
        }

        let mut acts = vec![input];
        let mut zs = Vec::with_capacity(self.hidden.len());
        let mut slopes = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let w = layer.w();
            let h = acts.last().expect("input jets");
            let z: Vec<Mat<f64>> = h
                .iter()
                .enumerate()
                .map(|(c, hc)| layer.apply(&w, hc, c == 0))
                .collect();
            let (n, width) = (rows, layer.outputs);
            let t = Mat::from_fn(n, width, |r, j| z[0][(r, j)].tanh());
            let t1 = Mat::from_fn(n, width, |r, j| 1.0 - t[(r, j)] * t[(r, j)]);
            let t2 = Mat::from_fn(n, width, |r, j| -2.0 * t[(r, j)] * t1[(r, j)]);
            let t3 = Mat::from_fn(n, width, |r, j| t1[(r, j)] * (6.0 * t[(r, j)] * t[(r, j)] - 2.0));
            let mut a = Vec::with_capacity(nch);
            a.push(t);
            if order >= Order::Gradient {
                for i in 0..d {
                    let zi = &z[1 + i];
                    a.push(Mat::from_fn(n, width, |r, j| t1[(r, j)] * zi[(r, j)]));
                }
            }
            if order == Order::Hessian {
                for (p, &(i, k)) in pairs.iter().enumerate() {
                    let (zi, zk, zp) = (&z[1 + i], &z[1 + k], &z[1 + d + p]);
                    a.push(Mat::from_fn(n, width, |r, j| {
                        t2[(r, j)] * zi[(r, j)] * zk[(r, j)] + t1[(r, j)] * zp[(r, j)]
                    }));
                }
            }
            acts.push(a);
            zs.push(z);
            slopes.push([t1, t2, t3]);
        }
        let wh = self.head.w();
        let last = acts.last().expect("hidden output");
        let out = last
            .iter()
            .enumerate()
            .map(|(c, a)| self.head.apply(&wh, a, c == 0))
            .collect();
        Tape {
            order,
            acts,
            z: zs,
            slopes,
            out,
        }
    }

    /// Accumulates `∂/∂θ Σ_c ⟨d_out_c, out_c⟩` into `grad`.
    pub(crate) fn backward(&self, tape: &Tape, d_out: &[Mat<f64>], grad: &mut [f64]) {
        let d = self.dim;
        let nch = channel_count(d, tape.order);
        debug_assert_eq!(d_out.len(), nch);
        let pairs = hessian_pairs(d);

        let mut offsets = Vec::with_capacity(self.hidden.len() + 1);
        let mut at = 0;
        for l in self.hidden.iter().chain(std::iter::once(&self.head)) {
            offsets.push(at);
            at += l.n_params();
        }

        let accumulate = |layer: &Layer, offset: usize, dz: &[Mat<f64>], h: &[Mat<f64>], grad: &mut [f64]| {
            let mut dw = Mat::<f64>::zeros(layer.outputs, layer.inputs);
            for (dzc, hc) in dz.iter().zip(h) {
                dw += dzc.transpose() * hc;
            }
            for i in 0..layer.outputs {
                for j in 0..layer.inputs {
                    grad[offset + i * layer.inputs + j] += dw[(i, j)];
                }
            }
            let nw = layer.weights.len();
            for j in 0..layer.outputs {
                grad[offset + nw + j] += dz[0].col_as_slice(j).iter().sum::<f64>();
            }
        };

        let n_hidden = self.hidden.len();
        accumulate(&self.head, offsets[n_hidden], d_out, &tape.acts[n_hidden], grad);
        let wh = self.head.w();
        let mut da: Vec<Mat<f64>> = d_out.iter().map(|g| g * &wh).collect();

        for l in (0..n_hidden).rev() {
            let layer = &self.hidden[l];
            let z = &tape.z[l];
            let [t1, t2, t3] = &tape.slopes[l];
            let (n, width) = (t1.nrows(), t1.ncols());
            let mut dz: Vec<Mat<f64>> = Vec::with_capacity(nch);
            dz.push(Mat::from_fn(n, width, |r, j| da[0][(r, j)] * t1[(r, j)]));
            if tape.order >= Order::Gradient {
                for i in 0..d {
                    let (dai, zi) = (&da[1 + i], &z[1 + i]);
                    dz.push(Mat::from_fn(n, width, |r, j| dai[(r, j)] * t1[(r, j)]));
                    for r in 0..n {
                        for j in 0..width {
                            dz[0][(r, j)] += dai[(r, j)] * t2[(r, j)] * zi[(r, j)];
                        }
                    }
                }
            }
            if tape.order == Order::Hessian {
                for (p, &(i, k)) in pairs.iter().enumerate() {
                    let dap = &da[1 + d + p];
                    let (zi, zk, zp) = (&z[1 + i], &z[1 + k], &z[1 + d + p]);
                    dz.push(Mat::from_fn(n, width, |r, j| dap[(r, j)] * t1[(r, j)]));
                    for r in 0..n {
                        for j in 0..width {
                            let g = dap[(r, j)];
                            if g == 0.0 {
                                continue;
                            }
                            dz[0][(r, j)] += g * (t3[(r, j)] * zi[(r, j)] * zk[(r, j)] + t2[(r, j)] * zp[(r, j)]);
                            let s = g * t2[(r, j)];
                            dz[1 + i][(r, j)] += s * zk[(r, j)];
                            dz[1 + k][(r, j)] += s * zi[(r, j)];
                        }
                    }
                }
            }
            accumulate(layer, offsets[l], &dz, &tape.acts[l], grad);
            if l > 0 {
                let w = layer.w();
                da = dz.iter().map(|g| g * &w).collect();
            }
        }
    }

    /// Full dictionary values for the rows of one chunk, given head outputs.
    pub(crate) fn assemble_values(&self, points: &[f64], out0: &Mat<f64>) -> Mat<f64> {
        let d = self.dim;
        let nl = self.n_learned();
        Mat::from_fn(out0.nrows(), nl + 1 + d, |r, j| {
            if j < nl {
                out0[(r, j)]
            } else if j == nl {
                1.0
            } else {
                points[r * d + (j - nl - 1)]
            }
        })
    }

    /// Generator action `Σ b_i ∂_i ψ + ½ Σ a_ik ∂_ik ψ` for the rows of one
    /// chunk. `drift` is `rows × d`, `cov` is `rows × d × d` (omit for the
    /// drift term only).
    pub(crate) fn assemble_action(&self, tape: &Tape, drift: &[f64], cov: Option<&[f64]>) -> Mat<f64> {
        let d = self.dim;
        let nl = self.n_learned();
        let rows = tape.out[0].nrows();
        let pairs = hessian_pairs(d);
        Mat::from_fn(rows, nl + 1 + d, |r, j| {
            if j < nl {
                let mut s = 0.0;
                for i in 0..d {
                    s += drift[r * d + i] * tape.out[1 + i][(r, j)];
                }
                if let Some(a) = cov {
                    for (p, &(i, k)) in pairs.iter().enumerate() {
                        let w = if i == k { 0.5 } else { 1.0 };
                        s += w * a[(r * d + i) * d + k] * tape.out[1 + d + p][(r, j)];
                    }
                }
                s
            } else if j == nl {
                0.0
            } else {
                drift[r * d + (j - nl - 1)]
            }
        })
    }

    /// `m × N` dictionary values.
    pub fn eval_batch(&self, points: &[f64]) -> Result<Mat<f64>> {
        let d = self.dim;
        if points.len() % d != 0 {
            return Err(Error::InvalidArgument("point buffer is not a multiple of dim".into()));
        }
        let m = points.len() / d;
        let mut out = Mat::<f64>::zeros(m, self.len());
        for (c, chunk) in points.chunks(CHUNK * d).enumerate() {
            let tape = self.forward(chunk, Order::Value);
            let v = self.assemble_values(chunk, &tape.out[0]);
            out.as_mut().subrows_mut(c * CHUNK, v.nrows()).copy_from(&v);
        }
        Ok(out)
    }

    /// Values and generator action on `m` points with per-point coefficients.
    pub fn action_batch(&self, points: &[f64], drift: &[f64], cov: Option<&[f64]>) -> Result<(Mat<f64>, Mat<f64>)> {
        let d = self.dim;
        if points.len() % d != 0 {
            return Err(Error::InvalidArgument("point buffer is not a multiple of dim".into()));
        }
        let m = points.len() / d;
        check_dim(m * d, drift.len())?;
        if let Some(a) = cov {
            check_dim(m * d * d, a.len())?;
        }
        let order = if cov.is_some() { Order::Hessian } else { Order::Gradient };
        let mut values = Mat::<f64>::zeros(m, self.len());
        let mut action = Mat::<f64>::zeros(m, self.len());
        for (c, chunk) in points.chunks(CHUNK * d).enumerate() {
            let r0 = c * CHUNK;
            let rows = chunk.len() / d;
            let tape = self.forward(chunk, order);
            let v = self.assemble_values(chunk, &tape.out[0]);
            let a = self.assemble_action(
                &tape,
                &drift[r0 * d..(r0 + rows) * d],
                cov.map(|a| &a[r0 * d * d..(r0 + rows) * d * d]),
            );
            values.as_mut().subrows_mut(r0, rows).copy_from(&v);
            action.as_mut().subrows_mut(r0, rows).copy_from(&a);
        }
        Ok((values, action))
    }
}

impl Observables for TrainableDictionary {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.n_learned() + 1 + self.dim
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        check_dim(self.dim, x.len())?;
        let tape = self.forward(x, Order::Value);
        let v = self.assemble_values(x, &tape.out[0]);
        Ok((0..self.len()).map(|j| Complex64::new(v[(0, j)], 0.0)).collect())
    }

    fn jet(&self, x: &[f64]) -> Result<Jet> {
        check_dim(self.dim, x.len())?;
        let d = self.dim;
        let n = self.len();
        let nl = self.n_learned();
        let tape = self.forward(x, Order::Hessian);
        let values = self.assemble_values(x, &tape.out[0]);
        let pairs = hessian_pairs(d);
        let mut jet = Jet {
            len: n,
            dim: d,
            values: (0..n).map(|j| Complex64::new(values[(0, j)], 0.0)).collect(),
            grad: vec![Complex64::new(0.0, 0.0); n * d],
            hess: vec![Complex64::new(0.0, 0.0); n * d * d],
        };
        for j in 0..nl {
            for i in 0..d {
                jet.grad[j * d + i] = Complex64::new(tape.out[1 + i][(0, j)], 0.0);
            }
            for (p, &(i, k)) in pairs.iter().enumerate() {
                let v = Complex64::new(tape.out[1 + d + p][(0, j)], 0.0);
                jet.hess[(j * d + i) * d + k] = v;
                jet.hess[(j * d + k) * d + i] = v;
            }
        }
        for i in 0..d {
            jet.grad[(nl + 1 + i) * d + i] = Complex64::new(1.0, 0.0);
        }
        Ok(jet)
    }
}
