//! FGSM and PGD crafting under Linf and L2 budgets.
//!
//! The emitted perturbation is authoritative: a batch stores noise rows
//! whose budget holds exactly (Linf, zero tolerance) or to 1e-9 relative
//! (L2), and adversarial = natural + noise lands inside [0,1]. The
//! finalization pass reconciles float rounding against both constraints
//! instead of hoping a single clamp suffices.

use crate::datasets::Batch;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::nn::Mlp;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

pub const L2_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    LInf,
    L2,
}

impl Norm {
    pub fn token(&self) -> &'static str {
        match self {
            Norm::LInf => "linf",
            Norm::L2 => "l2",
        }
    }

    /// Conventional budgets on [0,1] inputs: 8/255 under Linf, 0.5
    /// under L2.
    pub fn default_eps(&self) -> f64 {
        match self {
            Norm::LInf => 8.0 / 255.0,
            Norm::L2 => 0.5,
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(Norm::LInf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Input(format!("unknown norm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub norm: Norm,
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl AttackSpec {
    /// `step_size = None` resolves to the eps/4 convention.
    pub fn new(
        norm: Norm,
        eps: f64,
        steps: usize,
        step_size: Option<f64>,
        random_start: bool,
    ) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::Input(format!("attack budget {eps} invalid")));
        }
        if steps == 0 {
            return Err(Error::Input("attack needs at least one step".to_string()));
        }
        let step_size = step_size.unwrap_or(eps / 4.0);
        if eps > 0.0 && !(step_size.is_finite() && step_size > 0.0) {
            return Err(Error::Input(format!("step size {step_size} invalid")));
        }
        Ok(AttackSpec {
            norm,
            eps,
            steps,
            step_size,
            random_start,
        })
    }
}

/// Project one perturbation vector onto the eps-ball. Linf: coordinate
/// clamp (bit-exact idempotent). L2: radial rescale only when the norm
/// exceeds eps, so in-ball vectors pass through untouched.
pub fn project(delta: &mut [f64], norm: Norm, eps: f64) {
    match norm {
        Norm::LInf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-eps, eps);
            }
        }
        Norm::L2 => {
            let nrm = l2_norm(delta);
            if nrm > eps {
                let scale = eps / nrm;
                for d in delta.iter_mut() {
                    *d *= scale;
                }
            }
        }
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|d| d * d).sum::<f64>().sqrt()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn next_toward_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else if v > 0.0 {
        f64::from_bits(v.to_bits() - 1)
    } else {
        -f64::from_bits((-v).to_bits() - 1)
    }
}

/// Per-coordinate noise settlement: clamp to the Linf budget (or the
/// domain-feasible band when `eps` is infinite for L2 rows), then walk
/// at most a few ulps until natural + noise evaluates inside [0,1].
fn settle_coord(nat: f64, raw_noise: f64, eps: f64) -> f64 {
    let mut n = raw_noise.clamp(-eps, eps);
    for _ in 0..64 {
        let a = nat + n;
        if (0.0..=1.0).contains(&a) {
            return n;
        }
        if a > 1.0 {
            let cap = (1.0 - nat).min(eps);
            n = if n > cap { cap } else { next_toward_zero(n) };
        } else {
            let cap = (-nat).max(-eps);
            n = if n < cap { cap } else { next_toward_zero(n) };
        }
    }
    // Zero noise is always feasible for in-domain naturals.
    0.0
}

/// Reconcile candidate adversarial rows against budget and domain,
/// returning the authoritative noise tensor.
fn finalize_noise(natural: &Tensor, adv_candidate: &[f64], spec: &AttackSpec) -> Tensor {
    let (m, d) = (natural.rows(), natural.cols());
    let nat = natural.data();
    let mut noise = vec![0.0; m * d];
    match spec.norm {
        Norm::LInf => {
            for j in 0..m * d {
                noise[j] = settle_coord(nat[j], adv_candidate[j] - nat[j], spec.eps);
            }
        }
        Norm::L2 => {
            for i in 0..m {
                let row = &mut noise[i * d..(i + 1) * d];
                for j in 0..d {
                    let idx = i * d + j;
                    row[j] = settle_coord(nat[idx], adv_candidate[idx] - nat[idx], f64::INFINITY);
                }
                let mut shrink = 1.0;
                for _ in 0..64 {
                    let nrm = l2_norm(row);
                    if nrm <= spec.eps * (1.0 + L2_REL_TOL) {
                        break;
                    }
                    let scale = spec.eps / nrm * shrink;
                    for j in 0..d {
                        row[j] = settle_coord(nat[i * d + j], row[j] * scale, f64::INFINITY);
                    }
                    shrink *= 1.0 - 1e-12;
                }
            }
        }
    }
    Tensor::raw(vec![m, d], noise)
}

/// Budget and domain verification on an emitted batch. Linf is exact,
/// L2 allows 1e-9 relative slack, [0,1] membership is exact.
pub fn check_batch_constraints(batch: &Batch, norm: Norm, eps: f64) -> Result<()> {
    let d = batch.natural().cols();
    for i in 0..batch.len() {
        let noise = &batch.noise().data()[i * d..(i + 1) * d];
        match norm {
            Norm::LInf => {
                if let Some(v) = noise.iter().find(|v| v.abs() > eps) {
                    return Err(Error::Input(format!(
                        "row {i}: |noise| {} exceeds linf budget {eps}",
                        v.abs()
                    )));
                }
            }
            Norm::L2 => {
                let nrm = l2_norm(noise);
                if nrm > eps * (1.0 + L2_REL_TOL) {
                    return Err(Error::Input(format!(
                        "row {i}: l2 noise norm {nrm} exceeds budget {eps}"
                    )));
                }
            }
        }
        if let Some(v) = batch.adversarial().data()[i * d..(i + 1) * d]
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Input(format!(
                "row {i}: adversarial value {v} outside [0,1]"
            )));
        }
    }
    Ok(())
}

/// Gradient of mean cross-entropy with respect to the inputs, plus the
/// loss value at the query point.
fn input_gradient(model: &Mlp, x: &Tensor, y: &[usize], iter: usize) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let vars = model.on_tape(&mut tape);
    let xv = tape.leaf(x.clone());
    let logits = model.forward_tape(&mut tape, &vars, xv)?;
    let loss = tape.softmax_cross_entropy(logits, y)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Divergence {
            what: "attack loss".to_string(),
            step: iter,
        });
    }
    tape.backward(loss)?;
    Ok((tape.grad(xv)?.to_vec(), loss_value))
}

fn validate_inputs(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::shape("attack labels", &[x.rows()], &[y.len()]));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("natural input {v} outside [0,1]")));
    }
    Ok(())
}

/// Single-step sign attack. The shared core with 1-step Linf PGD, which
/// makes their agreement definitional rather than coincidental.
pub fn fgsm(model: &Mlp, x: &Tensor, y: &[usize], eps: f64) -> Result<Tensor> {
    validate_inputs(x, y)?;
    let spec = AttackSpec::new(Norm::LInf, eps, 1, Some(eps), false)?;
    let batch = fgsm_core(model, x, y, eps, &spec)?;
    Ok(batch.adversarial().clone())
}

fn fgsm_core(model: &Mlp, x: &Tensor, y: &[usize], eff_eps: f64, spec: &AttackSpec) -> Result<Batch> {
    if eff_eps == 0.0 {
        let batch = Batch::natural_only(x.clone(), y.to_vec())?;
        return Ok(batch);
    }
    let (grad, _) = input_gradient(model, x, y, 0)?;
    let adv: Vec<f64> = x
        .data()
        .iter()
        .zip(&grad)
        .map(|(xv, g)| xv + eff_eps * sign(*g))
        .collect();
    let eff_spec = AttackSpec { eps: eff_eps, ..*spec };
    let noise = finalize_noise(x, &adv, &eff_spec);
    let batch = Batch::from_noise(x.clone(), noise, y.to_vec())?;
    #[cfg(debug_assertions)]
    check_batch_constraints(&batch, eff_spec.norm, eff_spec.eps)?;
    Ok(batch)
}

/// Projected gradient descent. Returns the attacked batch; random start
/// (when enabled) draws from the seed, so equal seeds mean equal output.
pub fn pgd(model: &Mlp, x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<Batch> {
    pgd_trace(model, x, y, spec, seed).map(|(batch, _)| batch)
}

/// PGD with the per-iteration loss trace (loss at the pre-step point for
/// each iteration, then the loss at the emitted adversarial batch).
pub fn pgd_trace(
    model: &Mlp,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<(Batch, Vec<f64>)> {
    validate_inputs(x, y)?;
    let (m, d) = (x.rows(), x.cols());

    if spec.eps == 0.0 {
        let batch = Batch::natural_only(x.clone(), y.to_vec())?;
        let (_, loss) = input_gradient(model, x, y, 0)?;
        return Ok((batch, vec![loss]));
    }

    // Definitional coincidence: one Linf step without random start is
    // FGSM at step size min(step, eps). Route through the same code.
    if spec.norm == Norm::LInf && spec.steps == 1 && !spec.random_start {
        let eff = spec.step_size.min(spec.eps);
        let batch = fgsm_core(model, x, y, eff, spec)?;
        let (_, loss) = input_gradient(model, batch.adversarial(), y, 1)?;
        return Ok((batch, vec![loss]));
    }

    let nat = x.data();
    let mut delta = vec![0.0; m * d];
    if spec.random_start {
        let mut rng = SplitMix64::new(seed);
        match spec.norm {
            Norm::LInf => {
                for dj in delta.iter_mut() {
                    *dj = rng.next_range(-spec.eps, spec.eps);
                }
            }
            Norm::L2 => {
                for i in 0..m {
                    let row = &mut delta[i * d..(i + 1) * d];
                    for dj in row.iter_mut() {
                        *dj = rng.next_gaussian();
                    }
                    let nrm = l2_norm(row);
                    if nrm > 0.0 {
                        let radius = spec.eps * rng.next_f64().powf(1.0 / d as f64);
                        for dj in row.iter_mut() {
                            *dj *= radius / nrm;
                        }
                    }
                }
            }
        }
        for i in 0..m {
            project(&mut delta[i * d..(i + 1) * d], spec.norm, spec.eps);
        }
        clamp_to_domain(nat, &mut delta, spec.norm, spec.eps, m, d);
    }

    let mut trace = Vec::with_capacity(spec.steps + 1);
    let mut work = vec![0.0; m * d];
    for iter in 0..spec.steps {
        for j in 0..m * d {
            work[j] = (nat[j] + delta[j]).clamp(0.0, 1.0);
        }
        let point = Tensor::raw(vec![m, d], work.clone());
        let (grad, loss) = input_gradient(model, &point, y, iter)?;
        trace.push(loss);
        match spec.norm {
            Norm::LInf => {
                for j in 0..m * d {
                    delta[j] += spec.step_size * sign(grad[j]);
                }
            }
            Norm::L2 => {
                for i in 0..m {
                    let g = &grad[i * d..(i + 1) * d];
                    let gn = l2_norm(g);
                    if gn > 0.0 {
                        for j in 0..d {
                            delta[i * d + j] += spec.step_size * g[j] / gn;
                        }
                    }
                }
            }
        }
        for i in 0..m {
            project(&mut delta[i * d..(i + 1) * d], spec.norm, spec.eps);
        }
        clamp_to_domain(nat, &mut delta, spec.norm, spec.eps, m, d);
    }

    let adv: Vec<f64> = nat.iter().zip(&delta).map(|(xv, dj)| xv + dj).collect();
    let noise = finalize_noise(x, &adv, spec);
    let batch = Batch::from_noise(x.clone(), noise, y.to_vec())?;
    #[cfg(debug_assertions)]
    check_batch_constraints(&batch, spec.norm, spec.eps)?;
    let (_, final_loss) = input_gradient(model, batch.adversarial(), y, spec.steps)?;
    trace.push(final_loss);
    Ok((batch, trace))
}

/// Pull delta back so natural + delta stays in [0,1]; under L2 the clamp
/// can only shrink coordinates, so one re-projection keeps the ball
/// constraint too.
fn clamp_to_domain(nat: &[f64], delta: &mut [f64], norm: Norm, eps: f64, m: usize, d: usize) {
    for j in 0..m * d {
        let a = (nat[j] + delta[j]).clamp(0.0, 1.0);
        delta[j] = a - nat[j];
    }
    if norm == Norm::L2 {
        for i in 0..m {
            project(&mut delta[i * d..(i + 1) * d], norm, eps);
        }
    }
}
