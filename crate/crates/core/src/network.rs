//! Conditional noise-prediction MLP `eps(a_t, s, t)` with exact derivatives.
//!
//! The network input is `[a_t, s, embed(t)]`; hidden layers use a smooth
//! activation (tanh by default) and, when widths allow, a residual connection
//! `h <- h + act(W h + b)`. The output layer is linear with width `d_a`.
//!
//! Derivatives are computed by hand:
//!
//! * forward mode pushes `d_a` tangent directions (or a caller-supplied `v`)
//!   through the network next to the primal pass, which yields `J v` and the
//!   full action Jacobian `J_eps`;
//! * reverse mode then pulls back cotangents of both the outputs and the
//!   tangents, so any scalar built from `eps` and `J_eps` can be
//!   differentiated with respect to every weight (forward-over-reverse).

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dim, EpsField};

const MAX_TIME_FREQUENCY: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Only meant for affine test networks.
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(
                "network.activation",
                format!("unknown activation `{other}` (expected tanh or identity)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub residual: bool,
    /// Start with a zero output layer (the network then predicts `eps = 0`).
    pub zero_init_output: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![128, 128, 128],
            time_embed_dim: 16,
            activation: Activation::Tanh,
            residual: true,
            zero_init_output: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    pub d_a: usize,
    pub d_s: usize,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub residual: bool,
    pub layers: Vec<Dense>,
}

/// Sinusoidal time features: `sin(w_k t)` then `cos(w_k t)` for `dim / 2`
/// geometrically spaced frequencies in `[1, 100]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = if half > 1 {
            (MAX_TIME_FREQUENCY.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[k] = (w * t).sin();
        out[half + k] = (w * t).cos();
    }
    out
}

/// Forward-pass record needed by [`ScoreNetwork::backward`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `(B, d_a)` network outputs.
    pub values: Array2<f64>,
    /// Per tangent seed, `(B, d_a)` directional derivatives of the outputs.
    pub tangents: Vec<Array2<f64>>,
    seeds: Vec<Array2<f64>>,
    inputs: Vec<Array2<f64>>,
    tangent_inputs: Vec<Vec<Array2<f64>>>,
    z_tangents: Vec<Vec<Array2<f64>>>,
    d1: Vec<Array2<f64>>,
    d2: Vec<Array2<f64>>,
    residual_used: Vec<bool>,
}

impl Evaluation {
    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    /// Action Jacobian of sample `b`, valid when the seeds were the unit vectors.
    pub fn jacobian(&self, b: usize) -> Array2<f64> {
        let d = self.values.ncols();
        let mut j = Array2::zeros((d, self.tangents.len()));
        for (k, tan) in self.tangents.iter().enumerate() {
            j.column_mut(k).assign(&tan.row(b));
        }
        j
    }
}

impl ScoreNetwork {
    pub fn new(d_a: usize, d_s: usize, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(d_a, d_s, cfg, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        d_a: usize,
        d_s: usize,
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if d_a == 0 {
            return Err(Error::InvalidArgument("action dimension must be positive".into()));
        }
        if cfg.time_embed_dim % 2 != 0 {
            return Err(Error::config("network.time_embed_dim", "must be even"));
        }
        if cfg.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("network.hidden", "hidden widths must be positive"));
        }
        let mut widths = vec![d_a + d_s + cfg.time_embed_dim];
        widths.extend(&cfg.hidden);
        widths.push(d_a);
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                if l == n_layers - 1 && cfg.zero_init_output {
                    return Dense {
                        weight: Array2::zeros((fan_out, fan_in)),
                        bias: Array1::zeros(fan_out),
                    };
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                Dense { weight, bias }
            })
            .collect();
        Ok(ScoreNetwork {
            d_a,
            d_s,
            time_embed_dim: cfg.time_embed_dim,
            activation: cfg.activation,
            residual: cfg.residual,
            layers,
        })
    }

    /// Builds a network from explicit layers, checking the width chain.
    pub fn from_layers(
        d_a: usize,
        d_s: usize,
        time_embed_dim: usize,
        activation: Activation,
        residual: bool,
        layers: Vec<Dense>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        check_dim(d_a + d_s + time_embed_dim, layers[0].in_dim(), "first layer input width")?;
        check_dim(d_a, layers[layers.len() - 1].out_dim(), "last layer output width")?;
        for w in layers.windows(2) {
            check_dim(w[0].out_dim(), w[1].in_dim(), "consecutive layer widths")?;
        }
        for l in &layers {
            check_dim(l.out_dim(), l.bias.len(), "bias length")?;
        }
        let net = ScoreNetwork {
            d_a,
            d_s,
            time_embed_dim,
            activation,
            residual,
            layers,
        };
        if net.layers.iter().any(|l| l.weight.iter().chain(l.bias.iter()).any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.d_a + self.d_s + self.time_embed_dim
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            hidden: self.layers[..self.layers.len() - 1].iter().map(Dense::out_dim).collect(),
            time_embed_dim: self.time_embed_dim,
            activation: self.activation,
            residual: self.residual,
            zero_init_output: false,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: weight (row-major) then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len(), "flat parameter vector")?;
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Copy of `self` with the given flat parameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params_flat(params)?;
        Ok(net)
    }

    fn assemble_inputs(&self, a: &ArrayView2<f64>, s: &ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let b = a.nrows();
        check_dim(self.d_a, a.ncols(), "action width")?;
        check_dim(self.d_s, s.ncols(), "state width")?;
        check_dim(b, s.nrows(), "state batch size")?;
        check_dim(b, t.len(), "time batch size")?;
        let mut x = Array2::zeros((b, self.input_dim()));
        x.slice_mut(s![.., ..self.d_a]).assign(a);
        x.slice_mut(s![.., self.d_a..self.d_a + self.d_s]).assign(s);
        for (i, &ti) in t.iter().enumerate() {
            let emb = time_embedding(ti, self.time_embed_dim);
            for (k, e) in emb.into_iter().enumerate() {
                x[[i, self.d_a + self.d_s + k]] = e;
            }
        }
        Ok(x)
    }

    fn activate(&self, z: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        match self.activation {
            Activation::Tanh => {
                let y = z.mapv(f64::tanh);
                let d1 = y.mapv(|v| 1.0 - v * v);
                let d2 = ndarray::Zip::from(&y).and(&d1).map_collect(|&v, &g| -2.0 * v * g);
                (y, d1, d2)
            }
            Activation::Identity => (z.clone(), Array2::ones(z.dim()), Array2::zeros(z.dim())),
        }
    }

    /// Batched forward pass carrying one tangent per seed. Each seed is a
    /// `(B, d_a)` direction in action space.
    pub fn evaluate_with_seeds(
        &self,
        a: &ArrayView2<f64>,
        s: &ArrayView2<f64>,
        t: &[f64],
        seeds: Vec<Array2<f64>>,
    ) -> Result<Evaluation> {
        let x = self.assemble_inputs(a, s, t)?;
        for seed in &seeds {
            check_dim(a.nrows(), seed.nrows(), "tangent seed batch size")?;
            check_dim(self.d_a, seed.ncols(), "tangent seed width")?;
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut tangent_inputs: Vec<Vec<Array2<f64>>> = Vec::with_capacity(n_layers);
        let mut z_tangents = Vec::with_capacity(n_layers);
        let mut d1s = Vec::with_capacity(n_layers);
        let mut d2s = Vec::with_capacity(n_layers);
        let mut residual_used = Vec::with_capacity(n_layers);

        let mut h = x;
        let mut h_dot: Vec<Array2<f64>> = seeds.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let z_dot: Vec<Array2<f64>> = if l == 0 {
                let w_a = layer.weight.slice(s![.., ..self.d_a]);
                h_dot.iter().map(|v| v.dot(&w_a.t())).collect()
            } else {
                h_dot.iter().map(|v| v.dot(&layer.weight.t())).collect()
            };
            inputs.push(h);
            tangent_inputs.push(h_dot);
            if l == n_layers - 1 {
                let values = z;
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("network output".into()));
                }
                return Ok(Evaluation {
                    values,
                    tangents: z_dot,
                    seeds,
                    inputs,
                    tangent_inputs,
                    z_tangents,
                    d1: d1s,
                    d2: d2s,
                    residual_used,
                });
            }
            let (y, d1, d2) = self.activate(&z);
            let y_dot: Vec<Array2<f64>> = z_dot.iter().map(|zd| zd * &d1).collect();
            let use_res = self.residual && l > 0 && layer.in_dim() == layer.out_dim();
            let (next, next_dot) = if use_res {
                let prev = &inputs[l];
                let prev_dot = &tangent_inputs[l];
                (
                    y + prev,
                    y_dot.into_iter().zip(prev_dot).map(|(yd, pd)| yd + pd).collect(),
                )
            } else {
                (y, y_dot)
            };
            z_tangents.push(z_dot);
            d1s.push(d1);
            d2s.push(d2);
            residual_used.push(use_res);
            h = next;
            h_dot = next_dot;
        }
        unreachable!("network has at least one layer")
    }

    /// Batched forward pass; with `with_jacobian` the unit seeds `e_k` are
    /// pushed so that [`Evaluation::jacobian`] returns `J_eps`.
    pub fn evaluate(
        &self,
        a: &ArrayView2<f64>,
        s: &ArrayView2<f64>,
        t: &[f64],
        with_jacobian: bool,
    ) -> Result<Evaluation> {
        let seeds = if with_jacobian {
            (0..self.d_a)
                .map(|k| {
                    let mut e = Array2::zeros((a.nrows(), self.d_a));
                    e.column_mut(k).fill(1.0);
                    e
                })
                .collect()
        } else {
            Vec::new()
        };
        self.evaluate_with_seeds(a, s, t, seeds)
    }

    pub fn forward_batch(&self, a: &ArrayView2<f64>, s: &ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        Ok(self.evaluate(a, s, t, false)?.values)
    }

    pub fn forward(&self, a: &[f64], s: &[f64], t: f64) -> Result<Vec<f64>> {
        let (a, s) = self.single(a, s)?;
        Ok(self.forward_batch(&a.view(), &s.view(), &[t])?.row(0).to_vec())
    }

    /// `J_eps v` in one forward-mode pass.
    pub fn jvp(&self, a: &[f64], s: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d_a, v.len(), "jvp direction")?;
        let (a, s) = self.single(a, s)?;
        let seed = Array2::from_shape_vec((1, self.d_a), v.to_vec()).expect("shape");
        let ev = self.evaluate_with_seeds(&a.view(), &s.view(), &[t], vec![seed])?;
        Ok(ev.tangents[0].row(0).to_vec())
    }

    pub fn input_jacobian(&self, a: &[f64], s: &[f64], t: f64) -> Result<Array2<f64>> {
        let (a, s) = self.single(a, s)?;
        Ok(self.evaluate(&a.view(), &s.view(), &[t], true)?.jacobian(0))
    }

    fn single(&self, a: &[f64], s: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim(self.d_a, a.len(), "action")?;
        check_dim(self.d_s, s.len(), "state")?;
        Ok((
            Array2::from_shape_vec((1, self.d_a), a.to_vec()).expect("shape"),
            Array2::from_shape_vec((1, self.d_s), s.to_vec()).expect("shape"),
        ))
    }

    /// Reverse pass. `value_bar` is `dL/d values` (`(B, d_a)`); `tangent_bar`
    /// holds `dL/d tangents` per seed (pass an empty slice when the loss does
    /// not involve tangents). Returns the flat parameter gradient in
    /// [`params_flat`](Self::params_flat) order.
    pub fn backward(
        &self,
        ev: &Evaluation,
        value_bar: &Array2<f64>,
        tangent_bar: &[Array2<f64>],
    ) -> Result<Vec<f64>> {
        check_dim(ev.values.nrows(), value_bar.nrows(), "value cotangent batch")?;
        check_dim(self.d_a, value_bar.ncols(), "value cotangent width")?;
        let n_seeds = ev.seeds.len();
        let use_tangents = !tangent_bar.is_empty();
        if use_tangents {
            check_dim(n_seeds, tangent_bar.len(), "tangent cotangent count")?;
        }
        let n_layers = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);

        let mut z_bar = value_bar.clone();
        let mut z_dot_bar: Vec<Array2<f64>> = if use_tangents { tangent_bar.to_vec() } else { Vec::new() };
        // adjoint routed around a residual connection, added to the hidden
        // state adjoint one layer further down
        let mut carry: Option<(Array2<f64>, Vec<Array2<f64>>)> = None;

        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let mut w_bar = z_bar.t().dot(&ev.inputs[l]);
            if l == 0 {
                let mut w_a = w_bar.slice_mut(s![.., ..self.d_a]);
                for (zdb, seed) in z_dot_bar.iter().zip(&ev.seeds) {
                    w_a += &zdb.t().dot(seed);
                }
            } else {
                for (zdb, hd) in z_dot_bar.iter().zip(&ev.tangent_inputs[l]) {
                    w_bar += &zdb.t().dot(hd);
                }
            }
            grads.push((w_bar, z_bar.sum_axis(Axis(0))));
            if l == 0 {
                break;
            }

            let mut h_bar = z_bar.dot(&layer.weight);
            let mut h_dot_bar: Vec<Array2<f64>> =
                z_dot_bar.iter().map(|zdb| zdb.dot(&layer.weight)).collect();
            if let Some((c, cd)) = carry.take() {
                h_bar += &c;
                for (hdb, c) in h_dot_bar.iter_mut().zip(&cd) {
                    *hdb += c;
                }
            }

            // hidden layer k produced h_bar's primal: h = act(z_k) [+ h_k]
            let k = l - 1;
            let d1 = &ev.d1[k];
            let d2 = &ev.d2[k];
            let mut zb = &h_bar * d1;
            for (zd, hdb) in ev.z_tangents[k].iter().zip(&h_dot_bar) {
                zb += &(&(zd * hdb) * d2);
            }
            z_dot_bar = h_dot_bar.iter().map(|hdb| hdb * d1).collect();
            z_bar = zb;
            if ev.residual_used[k] {
                carry = Some((h_bar, h_dot_bar));
            }
        }
        self.finish_backward(grads)
    }

    fn finish_backward(&self, mut grads: Vec<(Array2<f64>, Array1<f64>)>) -> Result<Vec<f64>> {
        grads.reverse();
        let mut flat: Vec<f64> = Vec::with_capacity(self.num_params());
        for (w, b) in grads {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(flat)
    }
}

impl EpsField for ScoreNetwork {
    fn action_dim(&self) -> usize {
        self.d_a
    }

    fn eps(&self, a: &[f64], s: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward(a, s, t)
    }

    fn eps_jacobian(&self, a: &[f64], s: &[f64], t: f64) -> Result<Array2<f64>> {
        self.input_jacobian(a, s, t)
    }

    fn eps_and_jacobian(&self, a: &[f64], s: &[f64], t: f64) -> Result<(Vec<f64>, Array2<f64>)> {
        let (a, s) = self.single(a, s)?;
        let ev = self.evaluate(&a.view(), &s.view(), &[t], true)?;
        Ok((ev.values.row(0).to_vec(), ev.jacobian(0)))
    }
}
