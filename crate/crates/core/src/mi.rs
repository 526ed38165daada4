//! Neural estimation of the two pattern-specific dependence measures:
//! the natural score (input pattern vs classifier output) and the
//! adversarial score (perturbation pattern vs classifier output).
//!
//! An estimator is a local encoder plus a score network. The input is
//! split into a fixed partition of contiguous coordinate blocks; each
//! block goes through a shared two-layer MLP, and the score network
//! rates (block feature, logit vector) pairs. Positive pairs keep each
//! sample's own logits; negatives re-pair features with the next
//! sample's logits (a shift-by-one derangement, deterministic and free
//! of accidental positive pairs). Per-block scores feed a
//! Donsker-Varadhan (default) or Jensen-Shannon lower bound; the
//! estimate is their mean across blocks.
//!
//! Training maximizes either the plain bounds (`eq4`) or the
//! natural-vs-adversarial gaps on selected samples (`eq5`). DV
//! gradients optionally use an exponential-moving-average denominator;
//! reported values always use the true batch denominator.

use crate::attack::{pgd, AttackSpec};
use crate::config::{Bound, Objective, RunConfig, RunManifest};
use crate::container;
use crate::datasets::{Batch, DatasetSplit};
use crate::error::{Error, Result};
use crate::rng::{SeedTree, SplitMix64};
use crate::tensor::nn::{Mlp, MlpVars, Sgd};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};
use std::path::Path;

/// Which pattern the estimator consumes: the clean input (natural) or
/// the additive perturbation (adversarial).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Natural,
    Adversarial,
}

impl EstimatorKind {
    pub fn token(&self) -> &'static str {
        match self {
            EstimatorKind::Natural => "natural",
            EstimatorKind::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(EstimatorKind::Natural),
            "adversarial" => Ok(EstimatorKind::Adversarial),
            other => Err(Error::Input(format!("unknown estimator kind `{other}`"))),
        }
    }
}

/// One batch-level estimate: the scalar bound and the per-block bounds
/// it averages. `value` is always mean(`patch_bounds`).
#[derive(Debug, Clone)]
pub struct MIEstimate {
    pub value: f64,
    pub patch_bounds: Vec<f64>,
}

fn stable_lme(scores: &[f64]) -> f64 {
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !hi.is_finite() {
        return hi;
    }
    let mut acc = 0.0;
    for &s in scores {
        acc += (s - hi).exp();
    }
    hi + (acc / scores.len() as f64).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Donsker-Varadhan lower bound mean(joint) − log mean exp(marginal),
/// stabilized by max-subtraction.
pub fn dv_bound(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::Input("dv_bound needs non-empty score lists".into()));
    }
    let mean = joint.iter().sum::<f64>() / joint.len() as f64;
    Ok(mean - stable_lme(marginal))
}

/// Jensen-Shannon variant: mean(−softplus(−joint)) − mean(softplus(marginal)).
/// Useful as a training surrogate; not calibrated in nats.
pub fn jsd_bound(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::Input("jsd_bound needs non-empty score lists".into()));
    }
    let a = joint.iter().map(|&t| -softplus(-t)).sum::<f64>() / joint.len() as f64;
    let b = marginal.iter().map(|&t| softplus(t)).sum::<f64>() / marginal.len() as f64;
    Ok(a - b)
}

/// Critic scores are squashed to (-SCORE_CLAMP, SCORE_CLAMP) through a
/// scaled tanh. The DV objective is otherwise unbounded above in the
/// score-net weights, so long training runs diverge; bounding the
/// critic keeps every estimate and gradient finite while leaving small
/// scores distorted only at O((s/SCORE_CLAMP)^2) relative.
pub const SCORE_CLAMP: f64 = 10.0;

fn squash(scores: &mut [f64]) {
    let inv = 1.0 / SCORE_CLAMP;
    for s in scores {
        *s = SCORE_CLAMP * (inv * *s).tanh();
    }
}

fn squash_tape(tape: &mut Tape, v: Var) -> Var {
    let inner = tape.affine(v, 1.0 / SCORE_CLAMP, 0.0);
    let t = tape.tanh(inner);
    tape.affine(t, SCORE_CLAMP, 0.0)
}

/// Encoder + score network with partition metadata.
#[derive(Debug, Clone)]
pub struct Estimator {
    kind: EstimatorKind,
    bound: Bound,
    patches: usize,
    block: usize,
    classes: usize,
    encoder: Mlp,
    score: Mlp,
}

/// Tape handles for all estimator parameters.
pub struct EstimatorVars {
    pub encoder: MlpVars,
    pub score: MlpVars,
}

/// Nodes produced by `bound_tape`: the scalar bound plus per-block
/// pieces (kept for diagnostics and the EMA pre-pass contract).
pub struct BoundNodes {
    pub value: Var,
    pub patch_bounds: Vec<Var>,
}

impl Estimator {
    pub fn new(
        kind: EstimatorKind,
        bound: Bound,
        dim: usize,
        classes: usize,
        patches: usize,
        enc_hidden: usize,
        feat_dim: usize,
        score_hidden: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if patches == 0 || dim == 0 || dim % patches != 0 {
            return Err(Error::Input(format!(
                "patch count {patches} must divide input dim {dim}"
            )));
        }
        if classes == 0 {
            return Err(Error::Input("estimator needs at least one class".into()));
        }
        let block = dim / patches;
        let encoder = Mlp::new(&[block, enc_hidden, feat_dim], rng)?;
        let score = Mlp::new(&[feat_dim + classes, score_hidden, 1], rng)?;
        Ok(Estimator {
            kind,
            bound,
            patches,
            block,
            classes,
            encoder,
            score,
        })
    }

    pub fn from_config(kind: EstimatorKind, cfg: &RunConfig, rng: &mut SplitMix64) -> Result<Self> {
        Estimator::new(
            kind,
            cfg.est_bound,
            cfg.dim,
            cfg.dataset.classes(),
            cfg.est_patches,
            cfg.est_enc_hidden,
            cfg.est_feat_dim,
            cfg.est_score_hidden,
            rng,
        )
    }

    /// Rebuild from explicit networks (checkpoint load).
    pub fn from_parts(
        kind: EstimatorKind,
        bound: Bound,
        patches: usize,
        classes: usize,
        encoder: Mlp,
        score: Mlp,
    ) -> Result<Self> {
        if patches == 0 {
            return Err(Error::Input("patch count must be at least 1".into()));
        }
        if score.input_dim() != encoder.output_dim() + classes {
            return Err(Error::shape(
                "score network input",
                &[encoder.output_dim() + classes],
                &[score.input_dim()],
            ));
        }
        if score.output_dim() != 1 {
            return Err(Error::shape("score network output", &[1], &[score.output_dim()]));
        }
        Ok(Estimator {
            kind,
            bound,
            patches,
            block: encoder.input_dim(),
            classes,
            encoder,
            score,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn bound(&self) -> Bound {
        self.bound
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn input_dim(&self) -> usize {
        self.patches * self.block
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn score_net(&self) -> &Mlp {
        &self.score
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.params();
        out.extend(self.score.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.score.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .encoder
            .param_names()
            .into_iter()
            .map(|n| format!("encoder.{n}"))
            .collect();
        out.extend(self.score.param_names().into_iter().map(|n| format!("score.{n}")));
        out
    }

    fn check_pair(&self, patterns: &Tensor, logits: &Tensor) -> Result<usize> {
        if patterns.cols() != self.input_dim() {
            return Err(Error::shape(
                "estimator pattern",
                &[patterns.rows(), self.input_dim()],
                patterns.shape(),
            ));
        }
        if logits.cols() != self.classes || logits.rows() != patterns.rows() {
            return Err(Error::shape(
                "estimator logits",
                &[patterns.rows(), self.classes],
                logits.shape(),
            ));
        }
        Ok(patterns.rows())
    }

    /// Joint and shifted-negative scores per block, no gradients.
    /// Returned as `patches` pairs of length-m vectors.
    fn patch_scores(&self, patterns: &Tensor, logits: &Tensor) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let m = self.check_pair(patterns, logits)?;
        let mut out = Vec::with_capacity(self.patches);
        for p in 0..self.patches {
            let block = patterns.slice_cols(p * self.block, (p + 1) * self.block)?;
            let feats = self.encoder.forward(&block)?;
            let fd = feats.cols();
            let mut joint_in = Vec::with_capacity(m * (fd + self.classes));
            let mut marg_in = Vec::with_capacity(m * (fd + self.classes));
            for i in 0..m {
                joint_in.extend_from_slice(feats.row(i));
                joint_in.extend_from_slice(logits.row(i));
                marg_in.extend_from_slice(feats.row((i + 1) % m));
                marg_in.extend_from_slice(logits.row(i));
            }
            let joint = self
                .score
                .forward(&Tensor::matrix(m, fd + self.classes, joint_in)?)?;
            let marg = self
                .score
                .forward(&Tensor::matrix(m, fd + self.classes, marg_in)?)?;
            let (mut joint, mut marg) = (joint.into_data(), marg.into_data());
            squash(&mut joint);
            squash(&mut marg);
            out.push((joint, marg));
        }
        Ok(out)
    }

    /// Per-sample joint score matrix, one row per sample and one column
    /// per block. These rows are the vectors the cosine terms of the
    /// defense loss compare.
    pub fn sample_scores(&self, patterns: &Tensor, logits: &Tensor) -> Result<Tensor> {
        let m = self.check_pair(patterns, logits)?;
        let per_patch = self.patch_scores(patterns, logits)?;
        let mut data = vec![0.0; m * self.patches];
        for (p, (joint, _)) in per_patch.iter().enumerate() {
            for i in 0..m {
                data[i * self.patches + p] = joint[i];
            }
        }
        Tensor::matrix(m, self.patches, data)
    }

    /// Batch-level estimate. Needs m >= 2 so the derangement has a
    /// non-positive pair to offer.
    pub fn estimate(&self, patterns: &Tensor, logits: &Tensor) -> Result<MIEstimate> {
        let m = self.check_pair(patterns, logits)?;
        if m < 2 {
            return Err(Error::BatchTooSmall {
                need: 2,
                got: m,
                context: "mi estimate".to_string(),
            });
        }
        let per_patch = self.patch_scores(patterns, logits)?;
        let mut patch_bounds = Vec::with_capacity(self.patches);
        for (joint, marg) in &per_patch {
            let b = match self.bound {
                Bound::Dv => dv_bound(joint, marg)?,
                Bound::Jsd => jsd_bound(joint, marg)?,
            };
            patch_bounds.push(b);
        }
        let value = patch_bounds.iter().sum::<f64>() / self.patches as f64;
        if !value.is_finite() {
            return Err(Error::State("estimator produced a non-finite estimate".into()));
        }
        Ok(MIEstimate { value, patch_bounds })
    }

    pub fn on_tape(&self, tape: &mut Tape) -> EstimatorVars {
        EstimatorVars {
            encoder: self.encoder.on_tape(tape),
            score: self.score.on_tape(tape),
        }
    }

    pub fn grads(&self, tape: &Tape, vars: &EstimatorVars) -> Result<Vec<Vec<f64>>> {
        let mut out = self.encoder.grads(tape, &vars.encoder)?;
        out.extend(self.score.grads(tape, &vars.score)?);
        Ok(out)
    }

    /// Joint and shifted-negative score columns (each m x 1) for one
    /// block, on tape. Gradients flow into estimator parameters and the
    /// logits variable; patterns are constants.
    fn patch_scores_tape(
        &self,
        tape: &mut Tape,
        vars: &EstimatorVars,
        patterns: &Tensor,
        logits: Var,
        p: usize,
    ) -> Result<(Var, Var)> {
        let m = patterns.rows();
        let block = patterns.slice_cols(p * self.block, (p + 1) * self.block)?;
        let block = tape.leaf(block);
        let feats = self.encoder.forward_tape(tape, &vars.encoder, block)?;
        let shift: Vec<usize> = (0..m).map(|i| (i + 1) % m).collect();
        let shifted = tape.gather_rows(feats, &shift)?;
        let joint_in = tape.concat_cols(feats, logits)?;
        let marg_in = tape.concat_cols(shifted, logits)?;
        let joint = self.score.forward_tape(tape, &vars.score, joint_in)?;
        let marg = self.score.forward_tape(tape, &vars.score, marg_in)?;
        Ok((squash_tape(tape, joint), squash_tape(tape, marg)))
    }

    /// Per-sample joint-score matrix on tape (m x patches), columns in
    /// block order; matches `sample_scores` values.
    pub fn sample_scores_tape(
        &self,
        tape: &mut Tape,
        vars: &EstimatorVars,
        patterns: &Tensor,
        logits: Var,
    ) -> Result<Var> {
        self.check_pair(patterns, tape.value(logits))?;
        let mut acc: Option<Var> = None;
        for p in 0..self.patches {
            let (joint, _) = self.patch_scores_tape(tape, vars, patterns, logits, p)?;
            acc = Some(match acc {
                None => joint,
                Some(prev) => tape.concat_cols(prev, joint)?,
            });
        }
        Ok(acc.unwrap())
    }

    /// The scalar bound on tape. `log_denoms` (one per block) replaces
    /// the DV gradient denominator with a precomputed moving average;
    /// forward values always use the batch denominator. Ignored for the
    /// JSD bound.
    pub fn bound_tape(
        &self,
        tape: &mut Tape,
        vars: &EstimatorVars,
        patterns: &Tensor,
        logits: Var,
        log_denoms: Option<&[f64]>,
    ) -> Result<BoundNodes> {
        let m = self.check_pair(patterns, tape.value(logits))?;
        if m < 2 {
            return Err(Error::BatchTooSmall {
                need: 2,
                got: m,
                context: "mi bound".to_string(),
            });
        }
        if let Some(d) = log_denoms {
            if d.len() != self.patches {
                return Err(Error::shape("ema denominators", &[self.patches], &[d.len()]));
            }
        }
        let mut patch_bounds = Vec::with_capacity(self.patches);
        for p in 0..self.patches {
            let (joint, marg) = self.patch_scores_tape(tape, vars, patterns, logits, p)?;
            let b = match self.bound {
                Bound::Dv => {
                    let pos = tape.mean(joint)?;
                    let neg = match log_denoms {
                        Some(d) => tape.log_mean_exp_with_denom(marg, d[p])?,
                        None => tape.log_mean_exp(marg)?,
                    };
                    tape.sub(pos, neg)?
                }
                Bound::Jsd => {
                    let njoint = tape.affine(joint, -1.0, 0.0);
                    let sp_j = tape.softplus(njoint);
                    let neg_sp_j = tape.affine(sp_j, -1.0, 0.0);
                    let pos = tape.mean(neg_sp_j)?;
                    let sp_m = tape.softplus(marg);
                    let neg = tape.mean(sp_m)?;
                    tape.sub(pos, neg)?
                }
            };
            patch_bounds.push(b);
        }
        let mut acc = patch_bounds[0];
        for &b in &patch_bounds[1..] {
            acc = tape.add(acc, b)?;
        }
        let value = tape.affine(acc, 1.0 / self.patches as f64, 0.0);
        Ok(BoundNodes { value, patch_bounds })
    }

    /// Stabilized log-mean-exp of the shifted-negative scores per
    /// block, no gradients; the EMA pre-pass input.
    fn marginal_lmes(&self, patterns: &Tensor, logits: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .patch_scores(patterns, logits)?
            .iter()
            .map(|(_, marg)| stable_lme(marg))
            .collect())
    }
}

/// Indices whose natural prediction is correct while the paired
/// adversarial prediction is wrong; ties in argmax go to the lowest
/// index. An empty result is valid.
pub fn select_training_pairs(model: &Mlp, batch: &Batch) -> Result<Vec<usize>> {
    let nat = model.forward(batch.natural())?;
    let adv = model.forward(batch.adversarial())?;
    let labels = batch.labels();
    let mut out = Vec::new();
    for i in 0..batch.len() {
        if argmax(nat.row(i)) == labels[i] && argmax(adv.row(i)) != labels[i] {
            out.push(i);
        }
    }
    Ok(out)
}

/// Log-domain moving averages of the DV denominators, one slot per
/// (objective term, block).
struct EmaState {
    beta: f64,
    log_denoms: Vec<Option<f64>>,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

impl EmaState {
    fn new(terms: usize, beta: f64) -> Self {
        EmaState {
            beta,
            log_denoms: vec![None; terms],
        }
    }

    /// Fold one batch log-mean-exp into slot `term` and return the
    /// corrected log denominator to differentiate against.
    fn update(&mut self, term: usize, batch_lme: f64) -> f64 {
        let next = match self.log_denoms[term] {
            None => batch_lme,
            Some(prev) => log_add_exp(prev + self.beta.ln(), batch_lme + (1.0 - self.beta).ln()),
        };
        self.log_denoms[term] = Some(next);
        next
    }
}

/// Per-epoch estimator diagnostics: held-out probe gaps (natural
/// estimator on natural minus adversarial inputs, adversarial estimator
/// the other way) and how many samples the selection rule admitted.
#[derive(Debug, Clone)]
pub struct GapRow {
    pub epoch: usize,
    pub natural_gap: f64,
    pub adversarial_gap: f64,
    pub selected: usize,
}

/// Output of `train_estimators`.
pub struct TrainedEstimators {
    pub natural: Estimator,
    pub adversarial: Estimator,
    pub history: Vec<GapRow>,
}

fn shuffled_indices(n: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx
}

/// A frozen probe set for per-epoch gap reporting: the first samples of
/// the split plus adversarial counterparts crafted once against the
/// frozen model.
struct Probe {
    batch: Batch,
    nat_logits: Tensor,
    adv_logits: Tensor,
}

impl Probe {
    fn build(model: &Mlp, data: &DatasetSplit, attack: &AttackSpec, seed: u64) -> Result<Probe> {
        let probe_n = data.len().min(512);
        let idx: Vec<usize> = (0..probe_n).collect();
        let x = data.inputs.gather_rows(&idx)?;
        let y: Vec<usize> = data.labels[..probe_n].to_vec();
        let batch = pgd(model, &x, &y, attack, seed)?;
        let nat_logits = model.forward(batch.natural())?;
        let adv_logits = model.forward(batch.adversarial())?;
        Ok(Probe {
            batch,
            nat_logits,
            adv_logits,
        })
    }

    /// Natural kind: estimate(X, h(X)) − estimate(X, h(X̃)).
    /// Adversarial kind: estimate(N, h(X̃)) − estimate(N, h(X)).
    fn gap(&self, est: &Estimator) -> Result<f64> {
        let (pattern, hi, lo) = match est.kind() {
            EstimatorKind::Natural => (self.batch.natural(), &self.nat_logits, &self.adv_logits),
            EstimatorKind::Adversarial => (self.batch.noise(), &self.adv_logits, &self.nat_logits),
        };
        Ok(est.estimate(pattern, hi)?.value - est.estimate(pattern, lo)?.value)
    }
}

/// One gradient-ascent step on `objective = primary − secondary`
/// (secondary absent in plain-maximization mode). Returns the objective
/// value.
fn ascent_step(
    est: &mut Estimator,
    sgd: &mut Sgd,
    ema: &mut EmaState,
    patterns: &Tensor,
    primary_logits: &Tensor,
    secondary_logits: Option<&Tensor>,
) -> Result<f64> {
    let use_ema = est.bound() == Bound::Dv;
    let denoms_primary: Option<Vec<f64>> = if use_ema {
        let lmes = est.marginal_lmes(patterns, primary_logits)?;
        Some(
            lmes.iter()
                .enumerate()
                .map(|(p, &v)| ema.update(p, v))
                .collect(),
        )
    } else {
        None
    };
    let denoms_secondary: Option<Vec<f64>> = match (use_ema, secondary_logits) {
        (true, Some(logits)) => {
            let lmes = est.marginal_lmes(patterns, logits)?;
            Some(
                lmes.iter()
                    .enumerate()
                    .map(|(p, &v)| ema.update(est.patches() + p, v))
                    .collect(),
            )
        }
        _ => None,
    };

    let mut tape = Tape::new();
    let vars = est.on_tape(&mut tape);
    let lp = tape.leaf(primary_logits.clone());
    let primary = est.bound_tape(&mut tape, &vars, patterns, lp, denoms_primary.as_deref())?;
    let objective = match secondary_logits {
        Some(logits) => {
            let ls = tape.leaf(logits.clone());
            let secondary =
                est.bound_tape(&mut tape, &vars, patterns, ls, denoms_secondary.as_deref())?;
            tape.sub(primary.value, secondary.value)?
        }
        None => primary.value,
    };
    let objective_value = tape.value(objective).data()[0];
    if !objective_value.is_finite() {
        return Err(Error::Divergence {
            what: "estimator objective".to_string(),
            step: sgd.step_count(),
        });
    }
    let loss = tape.affine(objective, -1.0, 0.0);
    tape.backward(loss)?;
    let grads = est.grads(&tape, &vars)?;
    let mut params = est.params_mut();
    sgd.apply(&mut params, &grads)?;
    Ok(objective_value)
}

/// Train one estimator against the frozen model. Seed paths are shared
/// between the natural and adversarial trainings, so both see identical
/// batch orders and adversarial examples.
fn train_single(
    est: &mut Estimator,
    model: &Mlp,
    data: &DatasetSplit,
    attack: &AttackSpec,
    cfg: &RunConfig,
    seeds: &SeedTree,
) -> Result<Vec<(f64, usize)>> {
    let probe = Probe::build(model, data, attack, seeds.derive("est/probe"))?;
    let params = est.params();
    // Plain SGD for the critic: momentum overshoots the bounded-score
    // ascent into tanh saturation, which freezes the estimator.
    let mut sgd = Sgd::new(cfg.est_lr, 0.0, 0.0, &params, est.param_names())?;
    drop(params);
    let terms = match cfg.est_mode {
        Objective::MiMax => est.patches(),
        Objective::Separation => 2 * est.patches(),
    };
    let mut ema = EmaState::new(terms, cfg.est_ema);
    let mut history = Vec::with_capacity(cfg.est_epochs);
    for epoch in 0..cfg.est_epochs {
        let mut rng = seeds.rng(&format!("est/shuffle/{epoch}"));
        let order = shuffled_indices(data.len(), &mut rng);
        let mut selected_total = 0usize;
        let mut trained = 0usize;
        for (b, chunk) in order.chunks(cfg.est_batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = data.inputs.gather_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let batch = pgd(model, &x, &y, attack, seeds.derive(&format!("est/attack/{epoch}/{b}")))?;
            match cfg.est_mode {
                Objective::MiMax => {
                    let (patterns, logits) = match est.kind() {
                        EstimatorKind::Natural => {
                            (batch.natural().clone(), model.forward(batch.natural())?)
                        }
                        EstimatorKind::Adversarial => {
                            (batch.noise().clone(), model.forward(batch.adversarial())?)
                        }
                    };
                    selected_total += batch.len();
                    ascent_step(est, &mut sgd, &mut ema, &patterns, &logits, None)?;
                }
                Objective::Separation => {
                    let sel = select_training_pairs(model, &batch)?;
                    if sel.len() < 2 {
                        continue;
                    }
                    let sub = batch.gather(&sel)?;
                    let nat_logits = model.forward(sub.natural())?;
                    let adv_logits = model.forward(sub.adversarial())?;
                    let (patterns, primary, secondary) = match est.kind() {
                        EstimatorKind::Natural => (sub.natural().clone(), nat_logits, adv_logits),
                        EstimatorKind::Adversarial => {
                            (sub.noise().clone(), adv_logits, nat_logits)
                        }
                    };
                    selected_total += sel.len();
                    ascent_step(est, &mut sgd, &mut ema, &patterns, &primary, Some(&secondary))?;
                }
            }
            trained += 1;
        }
        if trained == 0 {
            return Err(Error::State(format!(
                "estimator training epoch {epoch}: every batch had an empty selection \
                 (model predicts too few correct-natural/wrong-adversarial pairs)"
            )));
        }
        history.push((probe.gap(est)?, selected_total));
    }
    Ok(history)
}

/// Train the natural and adversarial estimators against a frozen
/// pretrained model. The two trainings are independent and run in
/// parallel when the `parallel` feature is on; identical seed paths
/// make the result bitwise independent of that choice.
pub fn train_estimators(
    model: &Mlp,
    data: &DatasetSplit,
    attack: &AttackSpec,
    cfg: &RunConfig,
    seeds: &SeedTree,
) -> Result<TrainedEstimators> {
    data.validate()?;
    if model.input_dim() != data.dim() || model.output_dim() != data.classes {
        return Err(Error::shape(
            "pretrained model",
            &[data.dim(), data.classes],
            &[model.input_dim(), model.output_dim()],
        ));
    }
    let mut natural = Estimator::from_config(
        EstimatorKind::Natural,
        cfg,
        &mut seeds.rng("est/init/natural"),
    )?;
    let mut adversarial = Estimator::from_config(
        EstimatorKind::Adversarial,
        cfg,
        &mut seeds.rng("est/init/adversarial"),
    )?;

    #[cfg(feature = "parallel")]
    let (nat_hist, adv_hist) = {
        let (a, b) = rayon::join(
            || train_single(&mut natural, model, data, attack, cfg, seeds),
            || train_single(&mut adversarial, model, data, attack, cfg, seeds),
        );
        (a?, b?)
    };
    #[cfg(not(feature = "parallel"))]
    let (nat_hist, adv_hist) = (
        train_single(&mut natural, model, data, attack, cfg, seeds)?,
        train_single(&mut adversarial, model, data, attack, cfg, seeds)?,
    );

    let history = nat_hist
        .into_iter()
        .zip(adv_hist)
        .enumerate()
        .map(|(epoch, ((natural_gap, selected), (adversarial_gap, selected_b)))| {
            debug_assert_eq!(selected, selected_b);
            GapRow {
                epoch,
                natural_gap,
                adversarial_gap,
                selected,
            }
        })
        .collect();
    Ok(TrainedEstimators {
        natural,
        adversarial,
        history,
    })
}

/// Closed-form check for the estimator machinery: train on correlated
/// bivariate Gaussian pairs and compare against −½ ln(1 − ρ²).
#[derive(Debug, Clone)]
pub struct GaussBench {
    pub rho: f64,
    pub samples: usize,
    pub estimate: f64,
    pub analytic: f64,
    pub abs_error: f64,
}

pub fn gaussian_benchmark(rho: f64, samples: usize, seed: u64) -> Result<GaussBench> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::Input(format!("correlation {rho} outside (-1, 1)")));
    }
    if samples < 16 {
        return Err(Error::BatchTooSmall {
            need: 16,
            got: samples,
            context: "gaussian benchmark".to_string(),
        });
    }
    let seeds = SeedTree::new(seed);
    let mut rng = seeds.rng("gauss/data");
    let mut u = Vec::with_capacity(samples);
    let mut v = Vec::with_capacity(samples);
    let tail = (1.0 - rho * rho).sqrt();
    for _ in 0..samples {
        let a = rng.next_gaussian();
        let b = rng.next_gaussian();
        u.push(a);
        v.push(rho * a + tail * b);
    }
    let patterns = Tensor::matrix(samples, 1, u)?;
    let logits = Tensor::matrix(samples, 1, v)?;

    let mut est = Estimator::new(
        EstimatorKind::Natural,
        Bound::Dv,
        1,
        1,
        1,
        64,
        16,
        64,
        &mut seeds.rng("gauss/init"),
    )?;
    let params = est.params();
    let mut sgd = Sgd::new(0.05, 0.9, 0.0, &params, est.param_names())?;
    drop(params);
    let mut ema = EmaState::new(1, 0.9);
    let batch = 256usize.min(samples);
    let epochs = 30usize;
    for epoch in 0..epochs {
        let mut order_rng = seeds.rng(&format!("gauss/shuffle/{epoch}"));
        let order = shuffled_indices(samples, &mut order_rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let px = patterns.gather_rows(chunk)?;
            let pl = logits.gather_rows(chunk)?;
            ascent_step(&mut est, &mut sgd, &mut ema, &px, &pl, None)?;
        }
    }
    let estimate = est.estimate(&patterns, &logits)?.value;
    let analytic = -0.5 * (1.0 - rho * rho).ln();
    Ok(GaussBench {
        rho,
        samples,
        estimate,
        analytic,
        abs_error: (estimate - analytic).abs(),
    })
}

fn estimator_entries(prefix: &str, est: &Estimator) -> Vec<(String, Tensor)> {
    let meta = format!(
        "kind={} bound={} patches={} classes={}",
        est.kind().token(),
        est.bound().token(),
        est.patches(),
        est.classes()
    );
    let mut out = vec![container::string_entry(&format!("{prefix}.meta"), &meta)];
    out.extend(container::mlp_entries(&format!("{prefix}.encoder"), est.encoder()));
    out.extend(container::mlp_entries(&format!("{prefix}.score"), est.score_net()));
    out
}

fn read_estimator(prefix: &str, entries: &[(String, Tensor)]) -> Result<Estimator> {
    let meta_name = format!("{prefix}.meta");
    let meta = container::entry_text(&meta_name, container::find(entries, &meta_name)?)?;
    let mut kind = None;
    let mut bound = None;
    let mut patches = None;
    let mut classes = None;
    for field in meta.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format(&meta_name, format!("bad field `{field}`")))?;
        match k {
            "kind" => kind = Some(v.parse::<EstimatorKind>()?),
            "bound" => bound = Some(v.parse::<Bound>()?),
            "patches" => {
                patches = Some(v.parse::<usize>().map_err(|_| {
                    Error::format(&meta_name, format!("bad patch count `{v}`"))
                })?)
            }
            "classes" => {
                classes = Some(v.parse::<usize>().map_err(|_| {
                    Error::format(&meta_name, format!("bad class count `{v}`"))
                })?)
            }
            other => return Err(Error::format(&meta_name, format!("unknown field `{other}`"))),
        }
    }
    let (kind, bound, patches, classes) = match (kind, bound, patches, classes) {
        (Some(k), Some(b), Some(p), Some(c)) => (k, b, p, c),
        _ => return Err(Error::format(&meta_name, "incomplete estimator metadata")),
    };
    let encoder = container::read_mlp(&format!("{prefix}.encoder"), entries)?;
    let score = container::read_mlp(&format!("{prefix}.score"), entries)?;
    Estimator::from_parts(kind, bound, patches, classes, encoder, score)
}

/// Write both trained estimators plus the run manifest to one container.
pub fn save_estimator_pair(
    path: &Path,
    natural: &Estimator,
    adversarial: &Estimator,
    manifest: &RunManifest,
) -> Result<()> {
    if natural.kind() != EstimatorKind::Natural || adversarial.kind() != EstimatorKind::Adversarial
    {
        return Err(Error::State("estimator pair has mismatched kind tags".into()));
    }
    let mut entries = container::manifest_entries(manifest);
    entries.extend(estimator_entries("natural", natural));
    entries.extend(estimator_entries("adversarial", adversarial));
    container::save_container(path, &entries)
}

pub fn load_estimator_pair(path: &Path) -> Result<(Estimator, Estimator, RunManifest)> {
    let entries = container::load_container(path)?;
    let manifest = container::read_manifest(&entries)?;
    let natural = read_estimator("natural", &entries)?;
    let adversarial = read_estimator("adversarial", &entries)?;
    if natural.kind() != EstimatorKind::Natural || adversarial.kind() != EstimatorKind::Adversarial
    {
        return Err(Error::format(
            &path.display().to_string(),
            "estimator kinds do not match their entry prefixes",
        ));
    }
    Ok((natural, adversarial, manifest))
}

/// Single-estimator container (the proof-of-concept flow trains only a
/// natural estimator).
pub fn save_estimator(path: &Path, est: &Estimator, manifest: &RunManifest) -> Result<()> {
    let mut entries = container::manifest_entries(manifest);
    entries.extend(estimator_entries("estimator", est));
    container::save_container(path, &entries)
}

pub fn load_estimator(path: &Path) -> Result<(Estimator, RunManifest)> {
    let entries = container::load_container(path)?;
    let manifest = container::read_manifest(&entries)?;
    Ok((read_estimator("estimator", &entries)?, manifest))
}
