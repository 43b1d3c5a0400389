use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::mlp::{Dense, Mlp};
use super::{std_normal_log_density, Flow, FlowError, JacobianMatrix, Result, HALF_LN_2PI};
use crate::autograd::{self, Parameter, Tape, Tensor, Var};
use crate::points::PointSet;

/// Outputs of every scale network are clamped to `[-SCALE_CLAMP, SCALE_CLAMP]`
/// before exponentiation.
pub const SCALE_CLAMP: f64 = 8.0;

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub dim: usize,
    pub layers: usize,
    /// Number of pass-through coordinates per layer.
    pub split: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            dim: 2,
            layers: 4,
            split: 1,
            hidden: vec![16, 16],
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(FlowError::Invalid(format!("coupling flows need dim >= 2, got {}", self.dim)));
        }
        if self.split == 0 || self.split >= self.dim {
            return Err(FlowError::Invalid(format!(
                "split index must be in 1..{}, got {}",
                self.dim, self.split
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(FlowError::Invalid("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Affine coupling bijection.
///
/// With pass-through block `p` and transformed block `q`,
/// `v_p = u_p` and `v_q = u_q ⊙ exp(h(u_p)) + t(u_p)`. When `flip` is false
/// the pass-through block is the first `split` coordinates, otherwise the last
/// `split` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    dim: usize,
    split: usize,
    flip: bool,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

impl CouplingLayer {
    pub fn new<R: Rng + ?Sized>(dim: usize, split: usize, flip: bool, hidden: &[usize], rng: &mut R) -> Result<Self> {
        ModelShape {
            dim,
            layers: 1,
            split,
            hidden: hidden.to_vec(),
        }
        .validate()?;
        let scale_net = Mlp::new(split, hidden, dim - split, rng);
        let shift_net = Mlp::new(split, hidden, dim - split, rng);
        Ok(Self {
            dim,
            split,
            flip,
            scale_net,
            shift_net,
        })
    }

    pub fn from_parts(dim: usize, split: usize, flip: bool, scale_net: Mlp, shift_net: Mlp) -> Result<Self> {
        if split == 0 || split >= dim {
            return Err(FlowError::Invalid(format!("split index {split} out of range for dim {dim}")));
        }
        for (name, net) in [("scale", &scale_net), ("shift", &shift_net)] {
            if net.inputs() != split || net.outputs() != dim - split {
                return Err(FlowError::Invalid(format!(
                    "{name} network maps {} -> {}, expected {} -> {}",
                    net.inputs(),
                    net.outputs(),
                    split,
                    dim - split
                )));
            }
            for pair in net.layers.windows(2) {
                if pair[0].outputs() != pair[1].inputs() {
                    return Err(FlowError::Invalid(format!("{name} network layer widths do not chain")));
                }
            }
        }
        Ok(Self {
            dim,
            split,
            flip,
            scale_net,
            shift_net,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn flip(&self) -> bool {
        self.flip
    }

    pub fn pass_range(&self) -> Range<usize> {
        if self.flip {
            self.dim - self.split..self.dim
        } else {
            0..self.split
        }
    }

    pub fn transform_range(&self) -> Range<usize> {
        if self.flip {
            0..self.dim - self.split
        } else {
            self.split..self.dim
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.scale_net.parameters().chain(self.shift_net.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.scale_net.parameters_mut().chain(self.shift_net.parameters_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.scale_net.parameter_count() + self.shift_net.parameter_count()
    }

    fn log_scales(&self, pass: &[f64]) -> Vec<f64> {
        let mut h = self.scale_net.eval(pass);
        h.iter_mut().for_each(|v| *v = v.clamp(-SCALE_CLAMP, SCALE_CLAMP));
        h
    }

    /// `(v, log|det|)` for one point.
    pub fn forward_point(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let pass = &u[self.pass_range()];
        let h = self.log_scales(pass);
        let t = self.shift_net.eval(pass);
        let mut v = u.to_vec();
        for (j, i) in self.transform_range().enumerate() {
            v[i] = u[i] * h[j].exp() + t[j];
        }
        (v, h.iter().sum())
    }

    /// `(u, log|det J⁻¹|)` for one point.
    pub fn inverse_point(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let pass = &v[self.pass_range()];
        let h = self.log_scales(pass);
        let t = self.shift_net.eval(pass);
        let mut u = v.to_vec();
        for (j, i) in self.transform_range().enumerate() {
            u[i] = (v[i] - t[j]) * (-h[j]).exp();
        }
        (u, -h.iter().sum::<f64>())
    }

    /// Layer Jacobian at `u` in the model's coordinate order. Rows of the
    /// pass-through block are the identity; the transformed block has
    /// `diag(exp h)` on the diagonal and
    /// `u_q ⊙ ∂exp h/∂u_p + ∂t/∂u_p` against the pass-through columns.
    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let pass_r = self.pass_range();
        let pass = &u[pass_r.clone()];
        let (h_raw, dh) = self.scale_net.eval_with_jacobian(pass);
        let (_, dt) = self.shift_net.eval_with_jacobian(pass);
        let mut jac = DMatrix::identity(self.dim, self.dim);
        for (j, i) in self.transform_range().enumerate() {
            let inside = h_raw[j] > -SCALE_CLAMP && h_raw[j] < SCALE_CLAMP;
            let e = h_raw[j].clamp(-SCALE_CLAMP, SCALE_CLAMP).exp();
            jac[(i, i)] = e;
            for (k, col) in pass_r.clone().enumerate() {
                let dscale = if inside { u[i] * e * dh[(j, k)] } else { 0.0 };
                jac[(i, col)] = dscale + dt[(j, k)];
            }
        }
        jac
    }

    fn record_split(&self, tape: &mut Tape, u: Var, params: &[Var]) -> autograd::Result<(Var, Var, Var, Var)> {
        let pass = tape.slice_cols(u, self.pass_range().start, self.split)?;
        let trans = tape.slice_cols(u, self.transform_range().start, self.dim - self.split)?;
        let n = self.scale_net.parameter_count();
        let h = self.scale_net.record(tape, pass, &params[..n])?;
        let h = tape.clamp(h, -SCALE_CLAMP, SCALE_CLAMP)?;
        let t = self.shift_net.record(tape, pass, &params[n..])?;
        Ok((pass, trans, h, t))
    }

    fn record_join(&self, tape: &mut Tape, pass: Var, trans: Var) -> autograd::Result<Var> {
        if self.flip {
            tape.concat_cols(trans, pass)
        } else {
            tape.concat_cols(pass, trans)
        }
    }

    /// Taped forward map of a batch; returns `(v, per-row log|det|)`.
    pub fn record_forward(&self, tape: &mut Tape, u: Var, params: &[Var]) -> autograd::Result<(Var, Var)> {
        let (pass, trans, h, t) = self.record_split(tape, u, params)?;
        let e = tape.exp(h)?;
        let scaled = tape.mul(trans, e)?;
        let out = tape.add(scaled, t)?;
        let v = self.record_join(tape, pass, out)?;
        let log_det = tape.sum_cols(h)?;
        Ok((v, log_det))
    }

    /// Taped inverse map of a batch; returns `(u, per-row log|det J⁻¹|)`.
    pub fn record_inverse(&self, tape: &mut Tape, v: Var, params: &[Var]) -> autograd::Result<(Var, Var)> {
        let (pass, trans, h, t) = self.record_split(tape, v, params)?;
        let neg_h = tape.scale(h, -1.0)?;
        let e = tape.exp(neg_h)?;
        let centered = tape.sub(trans, t)?;
        let out = tape.mul(centered, e)?;
        let u = self.record_join(tape, pass, out)?;
        let log_det = tape.sum_cols(neg_h)?;
        Ok((u, log_det))
    }
}

/// Stack of affine coupling layers, `f = f_M ∘ … ∘ f_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

impl FlowModel {
    /// Fresh model: seeded hidden weights, zero output layers, so the model
    /// starts as the identity map. Layer `m` has `flip = (m % 2 == 1)`.
    pub fn new<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let layers = (0..shape.layers)
            .map(|m| CouplingLayer::new(shape.dim, shape.split, m % 2 == 1, &shape.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim: shape.dim, layers })
    }

    /// Identity-initialized model with a fixed hidden-weight seed.
    pub fn identity(shape: &ModelShape) -> Result<Self> {
        Self::new(shape, &mut ChaCha20Rng::seed_from_u64(0))
    }

    /// Model whose output layers are also random (uniform `±scale/sqrt(fan_in)`),
    /// giving a non-trivial bijection without training.
    pub fn random<R: Rng + ?Sized>(shape: &ModelShape, output_scale: f64, rng: &mut R) -> Result<Self> {
        let mut model = Self::new(shape, rng)?;
        for layer in &mut model.layers {
            for net in [&mut layer.scale_net, &mut layer.shift_net] {
                let (i, o) = {
                    let l = net.output_layer_mut();
                    (l.inputs(), l.outputs())
                };
                *net.output_layer_mut() = Dense::uniform(i, o, output_scale, rng);
            }
        }
        Ok(model)
    }

    pub fn from_layers(dim: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        if layers.iter().any(|l| l.dim != dim) {
            return Err(FlowError::Invalid("layer dimension differs from model dimension".into()));
        }
        Ok(Self { dim, layers })
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn shape(&self) -> ModelShape {
        let first = self.layers.first();
        ModelShape {
            dim: self.dim,
            layers: self.layers.len(),
            split: first.map_or(1, |l| l.split),
            hidden: first
                .map(|l| l.scale_net.layers[..l.scale_net.layers.len() - 1].iter().map(|d| d.outputs()).collect())
                .unwrap_or_default(),
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    fn param_slices<'a>(&self, params: &'a [Var]) -> Vec<&'a [Var]> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for l in &self.layers {
            let n = l.parameter_count();
            out.push(&params[offset..offset + n]);
            offset += n;
        }
        out
    }

    fn record_std_normal_rows(tape: &mut Tape, z: Var) -> autograd::Result<Var> {
        let (rows, cols) = tape.value(z)?.shape();
        let sq = tape.mul(z, z)?;
        let s = tape.sum_cols(sq)?;
        let s = tape.scale(s, -0.5)?;
        let c = tape.constant(Tensor::filled(rows, 1, -(cols as f64) * HALF_LN_2PI));
        tape.add(s, c)
    }

    /// Taped per-row `log q_X(x)` for a batch `x: n x D`, through the inverse
    /// map. `params` are leaves for [`FlowModel::parameters`], in order.
    pub fn record_log_density(&self, tape: &mut Tape, x: Var, params: &[Var]) -> autograd::Result<Var> {
        let slices = self.param_slices(params);
        let mut u = x;
        let mut total: Option<Var> = None;
        for (layer, p) in self.layers.iter().zip(slices).rev() {
            let (next, ld) = layer.record_inverse(tape, u, p)?;
            u = next;
            total = Some(match total {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        let base = Self::record_std_normal_rows(tape, u)?;
        match total {
            Some(ld) => tape.add(base, ld),
            None => Ok(base),
        }
    }

    /// Taped per-row `log q̃_Z(z) = log q_Z(z) - log|J_f(z)|` for `z: n x D`.
    pub fn record_pullback_log_density(&self, tape: &mut Tape, z: Var, params: &[Var]) -> autograd::Result<Var> {
        let slices = self.param_slices(params);
        let mut u = z;
        let mut total: Option<Var> = None;
        for (layer, p) in self.layers.iter().zip(slices) {
            let (next, ld) = layer.record_forward(tape, u, p)?;
            u = next;
            total = Some(match total {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        let base = Self::record_std_normal_rows(tape, z)?;
        match total {
            Some(ld) => tape.sub(base, ld),
            None => Ok(base),
        }
    }

    /// `∇ log` of a taped per-row density with respect to the batch input.
    fn batch_input_gradient<F>(&self, points: &PointSet, program: F) -> Result<PointSet>
    where
        F: Fn(&Self, &mut Tape, Var, &[Var]) -> autograd::Result<Var>,
    {
        let params = self.parameters();
        let rec = autograd::record_forward(&[points.to_tensor()], &params, |tape, ins, ps| {
            let rows = program(self, tape, ins[0], ps)?;
            tape.sum(rows)
        })?;
        let grads = rec.tape.backward(rec.output)?;
        let g = grads.get_or_zeros(rec.inputs[0], (points.len(), self.dim));
        Ok(PointSet::from_flat(self.dim, g.into_data()))
    }

    /// `∇ₓ log q_X` at each `x`, by reverse-mode differentiation of the
    /// inverse map. Rows are independent, so one backward sweep serves the
    /// whole batch.
    pub fn data_scores(&self, xs: &PointSet) -> Result<PointSet> {
        self.batch_input_gradient(xs, Self::record_log_density)
    }

    /// `∇_z log q̃_Z` at each `z`, through the forward map.
    pub fn pullback_scores(&self, zs: &PointSet) -> Result<PointSet> {
        self.batch_input_gradient(zs, Self::record_pullback_log_density)
    }
}

impl Flow for FlowModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(z)?;
        let mut u = z.to_vec();
        let mut log_det = 0.0;
        for (m, layer) in self.layers.iter().enumerate() {
            let (v, ld) = layer.forward_point(&u);
            if !ld.is_finite() || v.iter().any(|x| !x.is_finite()) {
                return Err(FlowError::NonFinite {
                    layer: m,
                    direction: "forward",
                });
            }
            u = v;
            log_det += ld;
        }
        Ok((u, log_det))
    }

    fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut v = x.to_vec();
        let mut log_det = 0.0;
        for (m, layer) in self.layers.iter().enumerate().rev() {
            let (u, ld) = layer.inverse_point(&v);
            if !ld.is_finite() || u.iter().any(|x| !x.is_finite()) {
                return Err(FlowError::NonFinite {
                    layer: m,
                    direction: "inverse",
                });
            }
            v = u;
            log_det += ld;
        }
        Ok((v, log_det))
    }

    fn jacobian(&self, z: &[f64]) -> Result<JacobianMatrix> {
        self.check_dim(z)?;
        let mut u = z.to_vec();
        let mut jac = DMatrix::identity(self.dim, self.dim);
        for (m, layer) in self.layers.iter().enumerate() {
            jac = layer.jacobian(&u) * jac;
            u = layer.forward_point(&u).0;
            if u.iter().any(|x| !x.is_finite()) || jac.iter().any(|x| !x.is_finite()) {
                return Err(FlowError::NonFinite {
                    layer: m,
                    direction: "forward",
                });
            }
        }
        Ok(JacobianMatrix {
            point: z.to_vec(),
            matrix: jac,
        })
    }

    fn latent_score(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (x, _) = self.forward(z)?;
        let scores = self.data_scores(&PointSet::from_flat(self.dim, x))?;
        Ok(scores.row(0).to_vec())
    }

    fn pullback_log_density(&self, z: &[f64]) -> Result<f64> {
        let (_, log_det) = self.forward(z)?;
        Ok(std_normal_log_density(z) - log_det)
    }
}
