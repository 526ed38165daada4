//! Small fully-connected networks over the tape, plus SGD.
//!
//! The classifier, the estimator encoders, and the estimator score heads
//! are all instances of [`Mlp`]. Hidden layers use ReLU, the final layer
//! is linear. Initialization is uniform in +-sqrt(6/(fan_in+fan_out)).

use super::tape::{Tape, Var};
use super::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    dims: Vec<usize>,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. `[8, 32, 32, 2]`.
    pub fn new(dims: &[usize], rng: &mut SplitMix64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("bad layer dims {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for li in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[li], dims[li + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.next_range(-bound, bound))
                .collect();
            layers.push(Dense {
                w: Tensor::raw(vec![fan_in, fan_out], w),
                b: Tensor::zeros(vec![fan_out]),
                relu: li + 2 < dims.len(),
            });
        }
        Ok(Mlp {
            layers,
            dims: dims.to_vec(),
        })
    }

    /// Rebuild from explicit layers (checkpoint load, test fixtures).
    /// Validates the width chain and that only the last layer is linear.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("mlp needs at least one layer".to_string()));
        }
        let mut dims = vec![layers[0].w.shape()[0]];
        for (li, layer) in layers.iter().enumerate() {
            let ws = layer.w.shape();
            if ws.len() != 2 || layer.b.shape() != [ws[1]] {
                return Err(Error::shape("mlp layer", ws, layer.b.shape()));
            }
            if ws[0] != *dims.last().unwrap() {
                return Err(Error::shape("mlp layer chain", &[*dims.last().unwrap()], &[ws[0]]));
            }
            let last = li + 1 == layers.len();
            if layer.relu == last {
                return Err(Error::Input(
                    "hidden layers must be relu, output layer linear".to_string(),
                ));
            }
            dims.push(ws[1]);
        }
        Ok(Mlp { layers, dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Inference forward pass, no graph recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "mlp input",
                &[x.rows(), self.input_dim()],
                x.shape(),
            ));
        }
        let m = x.rows();
        let mut cur = x.data().to_vec();
        let mut width = x.cols();
        for layer in &self.layers {
            let out_w = layer.w.shape()[1];
            let mut next = super::kernels::matmul(&cur, layer.w.data(), m, width, out_w);
            for i in 0..m {
                for j in 0..out_w {
                    next[i * out_w + j] += layer.b.data()[j];
                    if layer.relu && next[i * out_w + j] < 0.0 {
                        next[i * out_w + j] = 0.0;
                    }
                }
            }
            cur = next;
            width = out_w;
        }
        Ok(Tensor::raw(vec![m, width], cur))
    }

    /// Register parameters as tape leaves for a training step.
    pub fn on_tape(&self, tape: &mut Tape) -> MlpVars {
        let mut ws = Vec::with_capacity(self.layers.len());
        let mut bs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            ws.push(tape.leaf(layer.w.clone()));
            bs.push(tape.leaf(layer.b.clone()));
        }
        MlpVars { ws, bs }
    }

    /// Recorded forward pass through previously registered parameters.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let in_cols = tape.value(x).cols();
        if in_cols != self.input_dim() {
            return Err(Error::shape(
                "mlp input",
                &[tape.value(x).rows(), self.input_dim()],
                tape.value(x).shape(),
            ));
        }
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, vars.ws[li])?;
            h = tape.add_bias(h, vars.bs[li])?;
            if layer.relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.numel() + l.b.numel())
            .sum()
    }

    /// Stable flattening order: layer0.w, layer0.b, layer1.w, ...
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for li in 0..self.layers.len() {
            out.push(format!("layer{li}.w"));
            out.push(format!("layer{li}.b"));
        }
        out
    }

    /// Collect adjoints in the same order as `params`.
    pub fn grads(&self, tape: &Tape, vars: &MlpVars) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for li in 0..self.layers.len() {
            out.push(tape.grad(vars.ws[li])?.to_vec());
            out.push(tape.grad(vars.bs[li])?.to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub ws: Vec<Var>,
    pub bs: Vec<Var>,
}

/// SGD with classical momentum and decoupled-from-nothing weight decay:
/// v <- mu v + g + wd p; p <- p - lr v. Velocities persist across steps
/// and are part of checkpoints.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    vel: Vec<Vec<f64>>,
    names: Vec<String>,
    step: usize,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &[&Tensor], names: Vec<String>) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Input(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Input(format!("learning rate {lr} not positive")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Input(format!("weight decay {weight_decay} negative")));
        }
        if names.len() != params.len() {
            return Err(Error::Input("one name per parameter required".to_string()));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            vel: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            names,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.vel
    }

    /// Restore velocities from a checkpoint. Lengths must match the
    /// parameters this optimizer was built for.
    pub fn restore(&mut self, vel: Vec<Vec<f64>>, step: usize) -> Result<()> {
        if vel.len() != self.vel.len()
            || vel.iter().zip(&self.vel).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::State(
                "velocity layout does not match parameters".to_string(),
            ));
        }
        self.vel = vel;
        self.step = step;
        Ok(())
    }

    /// One update over all parameters. Rejects the step and reports the
    /// offending parameter if any update would become non-finite.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.vel.len() || grads.len() != self.vel.len() {
            return Err(Error::State(
                "parameter/gradient count does not match optimizer".to_string(),
            ));
        }
        self.step += 1;
        for (pi, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let vel = &mut self.vel[pi];
            if grad.len() != vel.len() {
                return Err(Error::State(format!(
                    "gradient length mismatch for `{}`",
                    self.names[pi]
                )));
            }
            let data = param.data_mut();
            for j in 0..data.len() {
                let v = self.momentum * vel[j] + grad[j] + self.weight_decay * data[j];
                let p = data[j] - self.lr * v;
                if !p.is_finite() || !v.is_finite() {
                    return Err(Error::Divergence {
                        what: self.names[pi].clone(),
                        step: self.step,
                    });
                }
                vel[j] = v;
                data[j] = p;
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy without a tape, for evaluation.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (m, n) = (logits.rows(), logits.cols());
    if labels.len() != m {
        return Err(Error::shape("cross_entropy labels", &[m], &[labels.len()]));
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::Input(format!(
                "label {y} out of range for {n} classes"
            )));
        }
        let row = logits.row(i);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - hi).exp()).sum();
        loss += hi + z.ln() - row[y];
    }
    Ok(loss / m as f64)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "accuracy labels",
            &[logits.rows()],
            &[labels.len()],
        ));
    }
    if labels.is_empty() {
        return Err(Error::Input("accuracy of empty batch".to_string()));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_in_glorot_bounds_and_seeded() {
        let mut rng = SplitMix64::new(5);
        let net = Mlp::new(&[8, 32, 2], &mut rng).unwrap();
        let bound0 = (6.0 / 40.0_f64).sqrt();
        assert!(net.layers()[0].w.data().iter().all(|v| v.abs() <= bound0));
        assert!(net.layers()[0].b.data().iter().all(|&v| v == 0.0));

        let mut rng2 = SplitMix64::new(5);
        let net2 = Mlp::new(&[8, 32, 2], &mut rng2).unwrap();
        assert_eq!(net.layers()[0].w.data(), net2.layers()[0].w.data());
    }

    #[test]
    fn forward_hand_fixture() {
        // 2-in 2-hidden 2-out net evaluated on paper:
        // pre = [1*1 + 2*0.5 + 0.1, 1*(-1) + 2*2 - 0.2] = [2.1, 2.8]
        // relu keeps both, out = [2.1 - 2.8, 2.8 + 0.5] = [-0.7, 3.3]
        let net = Mlp::from_layers(vec![
            Dense {
                w: Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
                b: Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(),
                relu: true,
            },
            Dense {
                w: Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 1.0]).unwrap(),
                b: Tensor::new(vec![2], vec![0.0, 0.5]).unwrap(),
                relu: false,
            },
        ])
        .unwrap();
        let out = net
            .forward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert!((out.data()[0] - (-0.7)).abs() < 1e-12);
        assert!((out.data()[1] - 3.3).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_tape_forward() {
        let mut rng = SplitMix64::new(6);
        let net = Mlp::new(&[4, 8, 3], &mut rng).unwrap();
        let x = Tensor::matrix(5, 4, (0..20).map(|v| v as f64 * 0.1 - 1.0).collect()).unwrap();
        let pure = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let vars = net.on_tape(&mut tape);
        let xv = tape.leaf(x);
        let out = net.forward_tape(&mut tape, &vars, xv).unwrap();
        assert_eq!(pure.data(), tape.value(out).data());
    }

    #[test]
    fn sgd_momentum_hand_example() {
        // One weight, two steps, pencil-and-paper values:
        // lr 0.1, mu 0.9, wd 0, w0 = 0, constant grad 1.
        // step 1: v = 1,   w = -0.1
        // step 2: v = 1.9, w = -0.1 - 0.19 = -0.29
        let mut p = Tensor::scalar(0.0);
        let names = vec!["w".to_string()];
        let mut opt = Sgd::new(0.1, 0.9, 0.0, &[&p], names).unwrap();
        opt.apply(&mut [&mut p], &[vec![1.0]]).unwrap();
        assert!((p.data()[0] - (-0.1)).abs() < 1e-15);
        opt.apply(&mut [&mut p], &[vec![1.0]]).unwrap();
        assert!((p.data()[0] - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let mut p = Tensor::scalar(2.0);
        let mut opt = Sgd::new(0.5, 0.0, 0.1, &[&p], vec!["w".into()]).unwrap();
        // v = 0 + 0 + 0.1*2 = 0.2, p = 2 - 0.1 = 1.9.
        opt.apply(&mut [&mut p], &[vec![0.0]]).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_bad_momentum_and_reports_divergence() {
        let p = Tensor::scalar(1.0);
        assert!(Sgd::new(0.1, 1.0, 0.0, &[&p], vec!["w".into()]).is_err());
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0, &[&p], vec!["w".into()]).unwrap();
        let err = opt.apply(&mut [&mut p], &[vec![f64::INFINITY]]).unwrap_err();
        match err {
            Error::Divergence { what, step } => {
                assert_eq!(what, "w");
                assert_eq!(step, 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((ce - (4.0_f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::matrix(3, 2, vec![2.0, 1.0, 0.0, 5.0, 1.0, 1.0]).unwrap();
        // Row 2 tie -> argmax 0.
        assert!((accuracy(&logits, &[0, 1, 0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((accuracy(&logits, &[1, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
