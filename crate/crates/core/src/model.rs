//! Velocity field `v_θ(x, t, c)`: a tanh MLP with hand-written reverse mode,
//! decoupled-weight-decay Adam and rectified-flow pretraining.
//!
//! Parameter layout: for each layer in order, the weight matrix in row-major
//! `(out, in)` order followed by the bias vector. The network input is
//! `[x (d), t, one_hot(c) (conditions)]`.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{check_finite, check_len, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    dim: usize,
    conditions: usize,
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Number of parameters implied by a list of layer widths.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

impl VelocityModel {
    /// Zero-initialized model with the given hidden widths.
    pub fn zeros(dim: usize, conditions: usize, hidden: &[usize]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden", "layer widths must be positive"));
        }
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(dim + 1 + conditions);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(dim);
        let params = vec![0.0; param_count(&layer_sizes)];
        Ok(Self {
            dim,
            conditions,
            layer_sizes,
            params,
        })
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(dim: usize, conditions: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dim, conditions, hidden)?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let mut offset = 0;
        for w in model.layer_sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut model.params[offset..offset + fan_out * (fan_in + 1)] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_out * (fan_in + 1);
        }
        Ok(model)
    }

    /// Rebuilds a model from its layer widths and flat parameters.
    pub fn from_parts(
        dim: usize,
        conditions: usize,
        layer_sizes: Vec<usize>,
        params: Vec<f64>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2
            || layer_sizes[0] != dim + 1 + conditions
            || *layer_sizes.last().unwrap() != dim
            || layer_sizes.contains(&0)
        {
            return Err(Error::invalid(
                "layer_sizes",
                "must run from d+1+conditions inputs to d outputs",
            ));
        }
        check_len("parameter vector", param_count(&layer_sizes), params.len())?;
        Ok(Self {
            dim,
            conditions,
            layer_sizes,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn conditions(&self) -> usize {
        self.conditions
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input(&self, x: &[f64], t: f64, c: Option<usize>) -> Result<Vec<f64>> {
        check_len("state", self.dim, x.len())?;
        let mut input = Vec::with_capacity(self.layer_sizes[0]);
        input.extend_from_slice(x);
        input.push(t);
        if self.conditions > 0 {
            let mut one_hot = vec![0.0; self.conditions];
            match c {
                Some(c) if c < self.conditions => one_hot[c] = 1.0,
                Some(c) => {
                    return Err(Error::IndexOutOfRange {
                        what: "condition",
                        index: c,
                        bound: self.conditions,
                    })
                }
                None => {}
            }
            input.extend_from_slice(&one_hot);
        }
        Ok(input)
    }

    /// Evaluates the field and keeps the activations needed by [`Self::backward`].
    pub fn forward(&self, x: &[f64], t: f64, c: Option<usize>) -> Result<(Vec<f64>, ForwardRecord)> {
        let mut activations = Vec::with_capacity(self.layer_sizes.len());
        activations.push(self.input(x, t, c)?);
        let layers = self.layer_sizes.len() - 1;
        let mut offset = 0;
        for (li, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_out * (n_in + 1)];
            let prev = activations.last().unwrap();
            let mut out = bias.to_vec();
            for (o, row) in out.iter_mut().zip(weights.chunks_exact(n_in)) {
                *o += row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>();
            }
            if li + 1 < layers {
                out.iter_mut().for_each(|v| *v = libm::tanh(*v));
            }
            activations.push(out);
            offset += n_out * (n_in + 1);
        }
        let output = activations.last().unwrap().clone();
        Ok((
            output,
            ForwardRecord {
                layer_sizes: self.layer_sizes.clone(),
                activations,
            },
        ))
    }

    pub fn velocity(&self, x: &[f64], t: f64, c: Option<usize>) -> Result<Vec<f64>> {
        self.forward(x, t, c).map(|(v, _)| v)
    }

    /// Gradient of `<cotangent, v>` with respect to the parameters.
    pub fn backward(&self, record: &ForwardRecord, cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(record, cotangent, &mut grad)?;
        Ok(grad)
    }

    /// Accumulates the gradient of `<cotangent, v>` into `grad`.
    pub fn backward_into(
        &self,
        record: &ForwardRecord,
        cotangent: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if record.layer_sizes != self.layer_sizes {
            return Err(Error::NoForwardPass);
        }
        check_len("cotangent", self.dim, cotangent.len())?;
        check_len("gradient buffer", self.params.len(), grad.len())?;
        let layers = self.layer_sizes.len() - 1;
        let mut delta = cotangent.to_vec();
        let mut end = self.params.len();
        for li in (0..layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[li], self.layer_sizes[li + 1]);
            let start = end - n_out * (n_in + 1);
            if li + 1 < layers {
                // through tanh: d/dz tanh(z) = 1 - tanh(z)^2
                for (d, a) in delta.iter_mut().zip(&record.activations[li + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let prev = &record.activations[li];
            let (gw, gb) = grad[start..end].split_at_mut(n_in * n_out);
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                for (g, a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(prev) {
                    *g += d * a;
                }
            }
            if li > 0 {
                let weights = &self.params[start..start + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for (row, &d) in weights.chunks_exact(n_in).zip(&delta) {
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                delta = next;
            }
            end = start;
        }
        Ok(())
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    layer_sizes: Vec<usize>,
    activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn update(&mut self, model: &mut VelocityModel, grad: &[f64]) -> Result<()> {
        self.update_params(&mut model.params, grad)
    }

    pub fn update_params(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("gradient", params.len(), grad.len())?;
        check_len("optimizer moments", params.len(), self.first_moment.len())?;
        check_finite("gradient", grad)?;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step_count += 1;
        let bc1 = 1.0 - libm::pow(beta1, self.step_count as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step_count as f64);
        let decay = 1.0 - lr * weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *p *= decay;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bc1) / (libm::sqrt(*v / bc2) + eps);
        }
        Ok(())
    }
}

/// Isotropic Gaussian mixture with equal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl MixtureSpec {
    /// Two modes at `(±offset, 0, ..., 0)`.
    pub fn two_mode(dim: usize, offset: f64, std: f64) -> Self {
        let mode = |sign: f64| {
            let mut m = vec![0.0; dim];
            m[0] = sign * offset;
            m
        };
        Self {
            means: vec![mode(-1.0), mode(1.0)],
            std,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Draws one point and the index of its component.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let comp = rng.random_range(0..self.means.len());
        let noise = rng::normal_vec(rng, self.dim());
        let x = self.means[comp]
            .iter()
            .zip(noise)
            .map(|(m, n)| m + self.std * n)
            .collect();
        (x, comp)
    }
}

/// Training points drawn from a [`MixtureSpec`]; regenerable from `(spec, len, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: MixtureSpec,
    pub seed: u64,
    pub points: Vec<Vec<f64>>,
    /// Mixture component of each point, used as the condition label when present.
    pub labels: Option<Vec<usize>>,
}

impl ToyDataset {
    pub fn generate(spec: MixtureSpec, len: usize, conditional: bool, seed: u64) -> Result<Self> {
        if spec.means.is_empty() || spec.dim() == 0 {
            return Err(Error::invalid("mixture", "needs at least one non-empty mean"));
        }
        if spec.means.iter().any(|m| m.len() != spec.dim()) {
            return Err(Error::invalid("mixture", "all means must share one dimension"));
        }
        if !(spec.std.is_finite() && spec.std >= 0.0) {
            return Err(Error::invalid("mixture", "std must be finite and >= 0"));
        }
        let mut rng = rng::stream(seed, &[0xDA7A]);
        let (points, comps): (Vec<_>, Vec<_>) = (0..len).map(|_| spec.sample(&mut rng)).unzip();
        Ok(Self {
            spec,
            seed,
            points,
            labels: conditional.then_some(comps),
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch: 256,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss at every iteration.
    pub losses: Vec<f64>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Rectified-flow regression: fits `v(x_t, t) ≈ x_noise - x_data` on the
/// straight path `x_t = (1-t)·x_data + t·x_noise`, `t ~ U(0, 1)`.
pub fn cfm_pretrain(
    model: &mut VelocityModel,
    dataset: &ToyDataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "must not be empty"));
    }
    check_len("dataset dimension", model.dim(), dataset.dim())?;
    if config.batch == 0 {
        return Err(Error::invalid("batch", "must be positive"));
    }
    let d = model.dim();
    let mut adam = AdamState::new(model.params.len(), config.adam);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut grad = vec![0.0; model.params.len()];
    let scale = 1.0 / config.batch as f64;
    for it in 0..config.iterations {
        let mut rng = rng::stream(seed, &[0xCF3, it as u64]);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..config.batch {
            let i = rng.random_range(0..dataset.len());
            let data = &dataset.points[i];
            let noise = rng::normal_vec(&mut rng, d);
            let t: f64 = rng.random();
            let c = match (&dataset.labels, model.conditions()) {
                (Some(labels), n) if n > 0 => Some(labels[i]),
                _ => None,
            };
            let xt: Vec<f64> = data
                .iter()
                .zip(&noise)
                .map(|(x0, x1)| (1.0 - t) * x0 + t * x1)
                .collect();
            let (v, record) = model.forward(&xt, t, c)?;
            let residual: Vec<f64> = v
                .iter()
                .zip(data.iter().zip(&noise))
                .map(|(v, (x0, x1))| v - (x1 - x0))
                .collect();
            loss += residual.iter().map(|r| r * r).sum::<f64>() * scale;
            let cot: Vec<f64> = residual.iter().map(|r| 2.0 * r * scale).collect();
            model.backward_into(&record, &cot, &mut grad)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "pretraining loss",
            });
        }
        losses.push(loss);
        adam.update(model, &grad)?;
    }
    Ok(PretrainReport { losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let m = VelocityModel::zeros(2, 0, &[64, 64]).unwrap();
        assert_eq!(m.layer_sizes(), [3, 64, 64, 2]);
        assert_eq!(m.params().len(), 3 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
        let c = VelocityModel::zeros(2, 3, &[8]).unwrap();
        assert_eq!(c.layer_sizes(), [6, 8, 2]);
        assert!(VelocityModel::zeros(0, 0, &[8]).is_err());
        assert!(VelocityModel::zeros(2, 0, &[0]).is_err());
    }

    #[test]
    fn zero_params_give_zero_velocity() {
        let m = VelocityModel::zeros(2, 0, &[8, 8]).unwrap();
        assert_eq!(m.velocity(&[0.3, -1.0], 0.4, None).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn velocity_is_deterministic_and_checks_inputs() {
        let m = VelocityModel::init(2, 2, &[16, 16], 3).unwrap();
        let a = m.velocity(&[0.1, 0.2], 0.5, Some(1)).unwrap();
        let b = m.velocity(&[0.1, 0.2], 0.5, Some(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(m.velocity(&[0.1], 0.5, None).is_err());
        assert!(m.velocity(&[0.1, 0.2], 0.5, Some(2)).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = VelocityModel::init(2, 0, &[8], 1).unwrap();
        assert_eq!(a, VelocityModel::init(2, 0, &[8], 1).unwrap());
        assert_ne!(a, VelocityModel::init(2, 0, &[8], 2).unwrap());
    }

    #[test]
    fn backward_shape_and_linearity() {
        let m = VelocityModel::init(2, 0, &[8, 8], 4).unwrap();
        let (_, rec) = m.forward(&[0.5, -0.2], 0.3, None).unwrap();
        let g = m.backward(&rec, &[0.0, 0.0]).unwrap();
        assert_eq!(g.len(), m.params().len());
        assert!(g.iter().all(|&v| v == 0.0));
        let other = VelocityModel::init(2, 0, &[4], 4).unwrap();
        assert_eq!(other.backward(&rec, &[1.0, 0.0]), Err(Error::NoForwardPass));
    }

    #[test]
    fn gradient_of_squared_norm_matches_finite_differences() {
        let mut m = VelocityModel::init(2, 0, &[8, 8], 11).unwrap();
        let x = [0.7, -0.4];
        let t = 0.35;
        let (v, rec) = m.forward(&x, t, None).unwrap();
        let cot: Vec<f64> = v.iter().map(|v| 2.0 * v).collect();
        let g = m.backward(&rec, &cot).unwrap();
        let f = |m: &VelocityModel| {
            m.velocity(&x, t, None)
                .unwrap()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..m.params().len() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = f(&m);
            m.params_mut()[i] = orig - h;
            let down = f(&m);
            m.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err <= 1e-5, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut m = VelocityModel::init(2, 0, &[4], 1).unwrap();
        let before = m.clone();
        let mut adam = AdamState::new(m.params().len(), AdamConfig::default());
        let zeros = vec![0.0; m.params().len()];
        adam.update(&mut m, &zeros).unwrap();
        assert_eq!(m, before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let config = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut params = [1.0, 1.0, 1.0];
        let grad = [0.5, -2.0, 0.0];
        let mut adam = AdamState::new(3, config);
        adam.update_params(&mut params, &grad).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        for (p, g) in params.iter().zip(grad) {
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_weight_decay_shrinks() {
        let config = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut params = [2.0, -4.0];
        let mut adam = AdamState::new(2, config);
        adam.update_params(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, [2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut adam = AdamState::new(2, AdamConfig::default());
        let mut p = [0.0, 0.0];
        assert!(adam.update_params(&mut p, &[f64::NAN, 0.0]).is_err());
        assert!(adam.update_params(&mut p, &[0.0]).is_err());
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn pretrain_zero_iterations_is_noop() {
        let ds = ToyDataset::generate(MixtureSpec::two_mode(2, 2.0, 0.3), 64, false, 0).unwrap();
        let mut m = VelocityModel::init(2, 0, &[8], 0).unwrap();
        let before = m.clone();
        let cfg = PretrainConfig {
            iterations: 0,
            ..PretrainConfig::default()
        };
        let report = cfm_pretrain(&mut m, &ds, &cfg, 0).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn pretrain_rejects_empty_and_divergent_runs() {
        let mut ds = ToyDataset::generate(MixtureSpec::two_mode(2, 2.0, 0.3), 4, false, 0).unwrap();
        let mut m = VelocityModel::init(2, 0, &[8], 0).unwrap();
        let cfg = PretrainConfig {
            iterations: 3,
            batch: 4,
            ..PretrainConfig::default()
        };
        ds.points[0] = vec![f64::NAN, 0.0];
        ds.points.truncate(1);
        assert_eq!(
            cfm_pretrain(&mut m, &ds, &cfg, 0),
            Err(Error::NonFinite {
                what: "pretraining loss"
            })
        );
        ds.points.clear();
        assert!(cfm_pretrain(&mut m, &ds, &cfg, 0).is_err());
    }

    #[test]
    fn dataset_regenerates_from_seed() {
        let spec = MixtureSpec::two_mode(2, 2.0, 0.3);
        let a = ToyDataset::generate(spec.clone(), 32, true, 9).unwrap();
        let b = ToyDataset::generate(spec, 32, true, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.points.iter().all(|p| p.len() == 2));
        assert_eq!(a.labels.as_ref().unwrap().len(), 32);
    }
}
