//! Reverse-mode autodiff on an eager tape.
//!
//! Ops execute immediately and append one node per result; `backward`
//! walks the tape in reverse, accumulating adjoints in a fixed order.
//! Vars are indices into the owning tape, so graphs are cheap to build
//! and are discarded wholesale after each optimization step.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Norms below this are treated as zero in cosine similarity; the
/// similarity is defined as 0 there and the gradient is dropped.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Row-broadcast bias add: [m,n] + [n].
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// mul * x + add with constant scalars; only the slope matters to
    /// the backward pass.
    Affine {
        x: Var,
        mul: f64,
    },
    Relu(Var),
    Abs(Var),
    Tanh(Var),
    Softplus(Var),
    Mean(Var),
    /// log(mean(exp(x))) over all elements. When `log_denom` is set the
    /// backward pass uses exp(x_i - log_denom)/N instead of the batch
    /// softmax weights; the forward value is the true batch value either
    /// way. Used for bias-corrected gradients of the donsker-varadhan
    /// denominator.
    LogMeanExp {
        x: Var,
        log_denom: Option<f64>,
    },
    /// Mean cross-entropy of row-softmax logits against integer labels.
    /// Probabilities from the forward pass are cached for backward.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Per-row cosine similarity of two equal-shape matrices, [m].
    CosineRows(Var, Var),
    ConcatCols(Var, Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Adjoint of `v` with respect to the loss passed to `backward`.
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        if !self.ran_backward {
            return Err(Error::State(
                "gradient requested before backward ran".to_string(),
            ));
        }
        Ok(&self.nodes[v.0].grad)
    }

    fn shape2(&self, v: Var, context: &str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(context, &[0, 0], s)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul lhs")?;
        let (k2, n) = self.shape2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul inner dim",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape(),
            ));
        }
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        Ok(self.push(Op::MatMul(a, b), Tensor::raw(vec![m, n], data)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape2(x, "add_bias input")?;
        let bs = self.nodes[b.0].value.shape();
        if bs != [n] {
            return Err(Error::shape("add_bias bias", &[n], bs));
        }
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(xv[i * n + j] + bv[j]);
            }
        }
        Ok(self.push(Op::AddBias(x, b), Tensor::raw(vec![m, n], out)))
    }

    fn elementwise_pair(&mut self, a: Var, b: Var, context: &str) -> Result<(Vec<f64>, Vec<usize>)> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::shape(context, &sa, sb));
        }
        Ok((Vec::with_capacity(self.nodes[a.0].value.numel()), sa))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.elementwise_pair(a, b, "add")?;
        for (x, y) in self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
        {
            out.push(x + y);
        }
        Ok(self.push(Op::Add(a, b), Tensor::raw(shape, out)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.elementwise_pair(a, b, "sub")?;
        for (x, y) in self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
        {
            out.push(x - y);
        }
        Ok(self.push(Op::Sub(a, b), Tensor::raw(shape, out)))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        let out: Vec<f64> = v.data().iter().map(|e| mul * e + add).collect();
        self.push(Op::Affine { x, mul }, Tensor::raw(shape, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        let out: Vec<f64> = v.data().iter().map(|e| e.max(0.0)).collect();
        self.push(Op::Relu(x), Tensor::raw(shape, out))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        let out: Vec<f64> = v.data().iter().map(|e| e.abs()).collect();
        self.push(Op::Abs(x), Tensor::raw(shape, out))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        let out: Vec<f64> = v.data().iter().map(|e| e.tanh()).collect();
        self.push(Op::Tanh(x), Tensor::raw(shape, out))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        // Stable ln(1+e^x) = max(x,0) + ln1p(e^-|x|).
        let out: Vec<f64> = v
            .data()
            .iter()
            .map(|&e| e.max(0.0) + (-e.abs()).exp().ln_1p())
            .collect();
        self.push(Op::Softplus(x), Tensor::raw(shape, out))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(Error::Input("mean of empty tensor".to_string()));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Op::Mean(x), Tensor::scalar(m)))
    }

    pub fn log_mean_exp(&mut self, x: Var) -> Result<Var> {
        self.log_mean_exp_impl(x, None)
    }

    /// log-mean-exp whose backward divides by a caller-supplied
    /// exp(log_denom) instead of the batch denominator.
    pub fn log_mean_exp_with_denom(&mut self, x: Var, log_denom: f64) -> Result<Var> {
        if !log_denom.is_finite() {
            return Err(Error::Input("non-finite log denominator".to_string()));
        }
        self.log_mean_exp_impl(x, Some(log_denom))
    }

    fn log_mean_exp_impl(&mut self, x: Var, log_denom: Option<f64>) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(Error::Input("log_mean_exp of empty tensor".to_string()));
        }
        let hi = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = v.data().iter().map(|&e| (e - hi).exp()).sum();
        let lme = hi + (sum / v.numel() as f64).ln();
        Ok(self.push(Op::LogMeanExp { x, log_denom }, Tensor::scalar(lme)))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.shape2(logits, "cross_entropy logits")?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy labels", &[m], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &l in row {
                z += (l - hi).exp();
            }
            let log_z = hi + z.ln();
            for j in 0..n {
                probs[i * n + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        loss /= m as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape2(a, "cosine lhs")?;
        let sb = self.nodes[b.0].value.shape();
        if sb != [m, n] {
            return Err(Error::shape("cosine rhs", &[m, n], sb));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let (ra, rb) = (&av[i * n..(i + 1) * n], &bv[i * n..(i + 1) * n]);
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                log::warn!("cosine similarity row {i}: norm below floor, defining sim = 0");
                out.push(0.0);
            } else {
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                out.push(dot / (na * nb));
            }
        }
        Ok(self.push(Op::CosineRows(a, b), Tensor::raw(vec![m], out)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n1) = self.shape2(a, "concat lhs")?;
        let (m2, n2) = self.shape2(b, "concat rhs")?;
        if m != m2 {
            return Err(Error::shape("concat rows", &[m], &[m2]));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            out.extend_from_slice(&av[i * n1..(i + 1) * n1]);
            out.extend_from_slice(&bv[i * n2..(i + 1) * n2]);
        }
        Ok(self.push(Op::ConcatCols(a, b), Tensor::raw(vec![m, n1 + n2], out)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.gather_rows(idx)?;
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            value,
        ))
    }

    /// Accumulate adjoints of everything `loss` depends on. `loss` must
    /// be scalar. Resets previous adjoints, so a tape can be reused for
    /// another backward if needed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called with a var from another tape".to_string(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Split borrows: take this node's grad out, write into parents.
            let g = std::mem::take(&mut self.nodes[i].grad);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = self.nodes[a.0].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b.0].value.shape()[1];
                    let da = kernels::matmul_nt(&g, self.nodes[b.0].value.data(), m, n, k);
                    let db = kernels::matmul_tn(self.nodes[a.0].value.data(), &g, m, k, n);
                    add_into(&mut self.nodes[a.0].grad, &da);
                    add_into(&mut self.nodes[b.0].grad, &db);
                }
                Op::AddBias(x, b) => {
                    let (x, b) = (*x, *b);
                    let (m, n) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    add_into(&mut self.nodes[x.0].grad, &g);
                    let sums = kernels::col_sums(&g, m, n);
                    add_into(&mut self.nodes[b.0].grad, &sums);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    add_into(&mut self.nodes[a.0].grad, &g);
                    add_into(&mut self.nodes[b.0].grad, &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    add_into(&mut self.nodes[a.0].grad, &g);
                    for (dst, src) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                        *dst -= src;
                    }
                }
                Op::Affine { x, mul } => {
                    let (x, mul) = (*x, *mul);
                    for (dst, src) in self.nodes[x.0].grad.iter_mut().zip(&g) {
                        *dst += mul * src;
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let xv = std::mem::take(&mut self.nodes[x.0].grad);
                    let mut xg = xv;
                    for ((dst, src), v) in xg.iter_mut().zip(&g).zip(self.nodes[x.0].value.data())
                    {
                        if *v > 0.0 {
                            *dst += src;
                        }
                    }
                    self.nodes[x.0].grad = xg;
                }
                Op::Abs(x) => {
                    let x = *x;
                    let mut xg = std::mem::take(&mut self.nodes[x.0].grad);
                    for ((dst, src), v) in xg.iter_mut().zip(&g).zip(self.nodes[x.0].value.data())
                    {
                        // Subgradient 0 at the kink.
                        if *v > 0.0 {
                            *dst += src;
                        } else if *v < 0.0 {
                            *dst -= src;
                        }
                    }
                    self.nodes[x.0].grad = xg;
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let mut xg = std::mem::take(&mut self.nodes[x.0].grad);
                    // Derivative from the output: 1 - tanh(x)^2.
                    for ((dst, src), y) in xg.iter_mut().zip(&g).zip(self.nodes[i].value.data()) {
                        *dst += src * (1.0 - y * y);
                    }
                    self.nodes[x.0].grad = xg;
                }
                Op::Softplus(x) => {
                    let x = *x;
                    let mut xg = std::mem::take(&mut self.nodes[x.0].grad);
                    for ((dst, src), v) in xg.iter_mut().zip(&g).zip(self.nodes[x.0].value.data())
                    {
                        let sig = 1.0 / (1.0 + (-v).exp());
                        *dst += src * sig;
                    }
                    self.nodes[x.0].grad = xg;
                }
                Op::Mean(x) => {
                    let x = *x;
                    let n = self.nodes[x.0].value.numel() as f64;
                    let go = g[0] / n;
                    for dst in self.nodes[x.0].grad.iter_mut() {
                        *dst += go;
                    }
                }
                Op::LogMeanExp { x, log_denom } => {
                    let (x, log_denom) = (*x, *log_denom);
                    let lme = self.nodes[i].value.data()[0];
                    let denom = log_denom.unwrap_or(lme);
                    let n = self.nodes[x.0].value.numel() as f64;
                    let go = g[0];
                    let mut xg = std::mem::take(&mut self.nodes[x.0].grad);
                    for (dst, v) in xg.iter_mut().zip(self.nodes[x.0].value.data()) {
                        *dst += go * (v - denom).exp() / n;
                    }
                    self.nodes[x.0].grad = xg;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let m = labels.len();
                    let n = probs.len() / m;
                    let go = g[0] / m as f64;
                    let mut update = probs.clone();
                    for (i_row, &y) in labels.iter().enumerate() {
                        update[i_row * n + y] -= 1.0;
                    }
                    for (dst, u) in self.nodes[logits.0].grad.iter_mut().zip(&update) {
                        *dst += go * u;
                    }
                }
                Op::CosineRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = self.nodes[a.0].value.shape()[1];
                    let sims = self.nodes[i].value.data().to_vec();
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for (r, &sim) in sims.iter().enumerate() {
                        let (ra, rb) = (&av[r * n..(r + 1) * n], &bv[r * n..(r + 1) * n]);
                        let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                            continue;
                        }
                        let go = g[r];
                        for j in 0..n {
                            ga[r * n + j] += go * (rb[j] / (na * nb) - sim * ra[j] / (na * na));
                            gb[r * n + j] += go * (ra[j] / (na * nb) - sim * rb[j] / (nb * nb));
                        }
                    }
                    add_into(&mut self.nodes[a.0].grad, &ga);
                    add_into(&mut self.nodes[b.0].grad, &gb);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let n1 = self.nodes[a.0].value.shape()[1];
                    let n2 = self.nodes[b.0].value.shape()[1];
                    let m = self.nodes[a.0].value.shape()[0];
                    let n = n1 + n2;
                    for r in 0..m {
                        for j in 0..n1 {
                            self.nodes[a.0].grad[r * n1 + j] += g[r * n + j];
                        }
                        for j in 0..n2 {
                            self.nodes[b.0].grad[r * n2 + j] += g[r * n + n1 + j];
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let x = *x;
                    let idx = idx.clone();
                    let n = self.nodes[x.0].value.cols();
                    for (r, &src_row) in idx.iter().enumerate() {
                        for j in 0..n {
                            self.nodes[x.0].grad[src_row * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            self.nodes[i].grad = g;
        }
        self.ran_backward = true;
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Central-difference check of d(loss)/d(leaf) for a scalar-valued
    /// graph builder. Each evaluation constructs a fresh tape.
    fn finite_diff_check<F>(leaf_data: Vec<Vec<f64>>, shapes: Vec<Vec<usize>>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let h = 1e-6;
        let eval = |datas: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = datas
                .iter()
                .zip(&shapes)
                .map(|(d, s)| tape.leaf(Tensor::raw(s.clone(), d.clone())))
                .collect();
            let out = build(&mut tape, &vars);
            tape.value(out).data()[0]
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = leaf_data
            .iter()
            .zip(&shapes)
            .map(|(d, s)| tape.leaf(Tensor::raw(s.clone(), d.clone())))
            .collect();
        let out = build(&mut tape, &vars);
        tape.backward(out).unwrap();

        for (li, data) in leaf_data.iter().enumerate() {
            let analytic = tape.grad(vars[li]).unwrap();
            for j in 0..data.len() {
                let mut plus = leaf_data.clone();
                plus[li][j] += h;
                let mut minus = leaf_data.clone();
                minus[li][j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = numeric.abs().max(analytic[j].abs()).max(1e-4);
                assert!(
                    (numeric - analytic[j]).abs() / denom < 1e-4,
                    "leaf {li} elem {j}: numeric {numeric} vs analytic {}",
                    analytic[j]
                );
            }
        }
    }

    fn rand_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.next_range(-1.5, 1.5)).collect()
    }

    #[test]
    fn grad_matmul_bias_relu_mean() {
        let mut rng = SplitMix64::new(21);
        let x = rand_vec(&mut rng, 3 * 4);
        let w = rand_vec(&mut rng, 4 * 2);
        let b = rand_vec(&mut rng, 2);
        finite_diff_check(
            vec![x, w, b],
            vec![vec![3, 4], vec![4, 2], vec![2]],
            |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_bias(h, v[2]).unwrap();
                let h = t.relu(h);
                t.mean(h).unwrap()
            },
        );
    }

    #[test]
    fn grad_cross_entropy() {
        let mut rng = SplitMix64::new(22);
        let logits = rand_vec(&mut rng, 4 * 3);
        finite_diff_check(vec![logits], vec![vec![4, 3]], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
        });
    }

    #[test]
    fn grad_log_mean_exp_and_softplus_abs() {
        let mut rng = SplitMix64::new(23);
        let x = rand_vec(&mut rng, 6);
        finite_diff_check(vec![x.clone()], vec![vec![6, 1]], |t, v| {
            t.log_mean_exp(v[0]).unwrap()
        });
        finite_diff_check(vec![x.clone()], vec![vec![6, 1]], |t, v| {
            let s = t.softplus(v[0]);
            t.mean(s).unwrap()
        });
        finite_diff_check(vec![x], vec![vec![6, 1]], |t, v| {
            let a = t.abs(v[0]);
            t.mean(a).unwrap()
        });
    }

    #[test]
    fn grad_tanh_matches_finite_difference_and_saturates() {
        let mut rng = SplitMix64::new(26);
        let x = rand_vec(&mut rng, 8);
        finite_diff_check(vec![x], vec![vec![8, 1]], |t, v| {
            let y = t.tanh(v[0]);
            t.mean(y).unwrap()
        });
        // Deep saturation: value pinned at +-1, gradient underflows to 0.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::raw(vec![2, 1], vec![40.0, -40.0]));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_cosine_rows() {
        let mut rng = SplitMix64::new(24);
        let a = rand_vec(&mut rng, 3 * 5);
        let b = rand_vec(&mut rng, 3 * 5);
        finite_diff_check(vec![a, b], vec![vec![3, 5], vec![3, 5]], |t, v| {
            let c = t.cosine_rows(v[0], v[1]).unwrap();
            let d = t.affine(c, -1.0, 1.0);
            let d = t.abs(d);
            t.mean(d).unwrap()
        });
    }

    #[test]
    fn grad_concat_gather_sub() {
        let mut rng = SplitMix64::new(25);
        let a = rand_vec(&mut rng, 4 * 2);
        let b = rand_vec(&mut rng, 4 * 3);
        finite_diff_check(vec![a, b], vec![vec![4, 2], vec![4, 3]], |t, v| {
            let c = t.concat_cols(v[0], v[1]).unwrap();
            let g = t.gather_rows(c, &[3, 1, 1]).unwrap();
            let m1 = t.mean(g).unwrap();
            let m2 = t.mean(v[0]).unwrap();
            t.sub(m1, m2).unwrap()
        });
    }

    #[test]
    fn cosine_zero_norm_guard() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::raw(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]));
        let b = tape.leaf(Tensor::raw(vec![2, 2], vec![1.0, 1.0, 1.0, 0.0]));
        let c = tape.cosine_rows(a, b).unwrap();
        assert_eq!(tape.value(c).data()[0], 0.0);
        assert_eq!(tape.value(c).data()[1], 1.0);
        let m = tape.mean(c).unwrap();
        tape.backward(m).unwrap();
        // Row with a zero norm contributes no gradient.
        assert_eq!(tape.grad(a).unwrap()[0], 0.0);
        assert_eq!(tape.grad(a).unwrap()[1], 0.0);
    }

    #[test]
    fn fixed_denominator_matches_batch_when_equal() {
        let data = vec![0.3, -0.7, 1.1, 0.2];
        let mut t1 = Tape::new();
        let x1 = t1.leaf(Tensor::raw(vec![4, 1], data.clone()));
        let l1 = t1.log_mean_exp(x1).unwrap();
        let batch_lme = t1.value(l1).data()[0];
        t1.backward(l1).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(Tensor::raw(vec![4, 1], data));
        let l2 = t2.log_mean_exp_with_denom(x2, batch_lme).unwrap();
        assert_eq!(t2.value(l2).data()[0], batch_lme);
        t2.backward(l2).unwrap();
        for (a, b) in t1.grad(x1).unwrap().iter().zip(t2.grad(x2).unwrap()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::raw(vec![2, 2], vec![1.0; 4]));
        assert!(matches!(tape.backward(x), Err(Error::Input(_))));
    }

    #[test]
    fn grad_before_backward_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.grad(x), Err(Error::State(_))));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::raw(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(Tensor::raw(vec![4, 2], vec![0.0; 8]));
        match tape.matmul(a, b) {
            Err(Error::Shape { expected, got, .. }) => {
                assert_eq!(expected, vec![2, 3]);
                assert_eq!(got, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
