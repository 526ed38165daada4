//! The defense training loop and its losses.
//!
//! Standard adversarial training minimizes cross-entropy on adversarial
//! examples crafted against the current model. The full defense adds a
//! weighted relative-dependence term on selected samples (natural
//! prediction right, adversarial prediction wrong): per-sample cosine
//! losses pull each estimator's adversarial score vector toward its
//! natural one, and a weighted difference pushes the adversarial
//! example's adversarial-pattern estimate below its natural-pattern
//! estimate. Estimator parameters stay frozen; gradients reach the
//! classifier only through its logits.
//!
//! With the dependence term inert (alpha 0, or every term flag dropped)
//! the loop is bit-identical to standard adversarial training under the
//! same seed: the extra graph nodes are simply never built.

use crate::attack::pgd;
use crate::config::{RunConfig, RunManifest};
use crate::container;
use crate::datasets::{Batch, DatasetSplit};
use crate::error::{Error, Result};
use crate::mi::{select_training_pairs, Estimator, EstimatorKind};
use crate::rng::SeedTree;
use crate::tensor::nn::{accuracy, Mlp, Sgd};
use crate::tensor::tape::{Tape, Var, COSINE_NORM_FLOOR};
use crate::tensor::Tensor;
use std::path::Path;

/// |1 − cosine similarity|. Zero-norm vectors get similarity 0 (loss 1)
/// with a warning; silently treating them as aligned would hide a dead
/// estimator.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "cosine_loss length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Input(
            "cosine_loss needs vectors of length at least 2".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim = if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        log::warn!("cosine_loss: zero-norm score vector, treating similarity as 0");
        0.0
    } else {
        dot / (na * nb)
    };
    Ok((1.0 - sim).abs())
}

/// The relative-dependence loss over an already-selected batch, no
/// gradients: mean per-sample cosine losses for both estimators plus
/// lambda times the batch-level estimate difference on adversarial
/// logits. The difference term needs two samples for its negatives; a
/// single-sample batch contributes cosine terms only.
pub fn mi_loss(
    selected: &Batch,
    natural_est: &Estimator,
    adversarial_est: &Estimator,
    model: &Mlp,
    lambda: f64,
) -> Result<f64> {
    let m = selected.len();
    if m == 0 {
        return Err(Error::Input("mi_loss needs at least one selected sample".into()));
    }
    let nat_logits = model.forward(selected.natural())?;
    let adv_logits = model.forward(selected.adversarial())?;
    let sn_adv = natural_est.sample_scores(selected.natural(), &adv_logits)?;
    let sn_nat = natural_est.sample_scores(selected.natural(), &nat_logits)?;
    let sa_adv = adversarial_est.sample_scores(selected.noise(), &adv_logits)?;
    let sa_nat = adversarial_est.sample_scores(selected.noise(), &nat_logits)?;
    let mut acc = 0.0;
    for i in 0..m {
        acc += cosine_loss(sn_adv.row(i), sn_nat.row(i))?;
        acc += cosine_loss(sa_adv.row(i), sa_nat.row(i))?;
    }
    let mut total = acc / m as f64;
    if m >= 2 {
        let ea = adversarial_est.estimate(selected.noise(), &adv_logits)?.value;
        let en = natural_est.estimate(selected.natural(), &adv_logits)?.value;
        total += lambda * (ea - en);
    }
    Ok(total)
}

/// Full training objective on one batch: adversarial cross-entropy over
/// all samples plus alpha times the dependence loss over the selected
/// subset. Reduces exactly to the cross-entropy when the dependence
/// term is disabled or nothing is selected.
pub fn total_loss(
    batch: &Batch,
    cfg: &RunConfig,
    natural_est: &Estimator,
    adversarial_est: &Estimator,
    model: &Mlp,
) -> Result<f64> {
    let adv_logits = model.forward(batch.adversarial())?;
    let l_adv = crate::tensor::nn::softmax_cross_entropy(&adv_logits, batch.labels())?;
    if cfg.mi_term_disabled() {
        return Ok(l_adv);
    }
    let sel = select_training_pairs(model, batch)?;
    if sel.is_empty() {
        return Ok(l_adv);
    }
    let sub = batch.gather(&sel)?;
    let mi = flagged_mi_loss(&sub, natural_est, adversarial_est, model, cfg)?;
    Ok(l_adv + cfg.alpha * mi)
}

/// `mi_loss` with the three ablation switches applied term by term.
fn flagged_mi_loss(
    selected: &Batch,
    natural_est: &Estimator,
    adversarial_est: &Estimator,
    model: &Mlp,
    cfg: &RunConfig,
) -> Result<f64> {
    let m = selected.len();
    let nat_logits = model.forward(selected.natural())?;
    let adv_logits = model.forward(selected.adversarial())?;
    let mut total = 0.0;
    if !cfg.drop_natural_mi {
        let sa = natural_est.sample_scores(selected.natural(), &adv_logits)?;
        let sb = natural_est.sample_scores(selected.natural(), &nat_logits)?;
        let mut acc = 0.0;
        for i in 0..m {
            acc += cosine_loss(sa.row(i), sb.row(i))?;
        }
        total += acc / m as f64;
    }
    if !cfg.drop_adversarial_mi {
        let sa = adversarial_est.sample_scores(selected.noise(), &adv_logits)?;
        let sb = adversarial_est.sample_scores(selected.noise(), &nat_logits)?;
        let mut acc = 0.0;
        for i in 0..m {
            acc += cosine_loss(sa.row(i), sb.row(i))?;
        }
        total += acc / m as f64;
    }
    if !cfg.zero_lambda && m >= 2 {
        let ea = adversarial_est.estimate(selected.noise(), &adv_logits)?.value;
        let en = natural_est.estimate(selected.natural(), &adv_logits)?.value;
        total += cfg.lambda * (ea - en);
    }
    Ok(total)
}

/// Tape version of `flagged_mi_loss`. Estimator parameters enter as
/// leaves whose adjoints are discarded; only the logits route gradients
/// back to the classifier. Returns None when every term is switched
/// off.
fn mi_loss_on_tape(
    tape: &mut Tape,
    cfg: &RunConfig,
    natural_est: &Estimator,
    adversarial_est: &Estimator,
    sub_natural: &Tensor,
    sub_noise: &Tensor,
    nat_logits: Var,
    adv_logits: Var,
) -> Result<Option<Var>> {
    let m = sub_natural.rows();
    let nat_vars = natural_est.on_tape(tape);
    let adv_vars = adversarial_est.on_tape(tape);
    let mut terms: Vec<Var> = Vec::with_capacity(3);
    if !cfg.drop_natural_mi {
        let sa = natural_est.sample_scores_tape(tape, &nat_vars, sub_natural, adv_logits)?;
        let sb = natural_est.sample_scores_tape(tape, &nat_vars, sub_natural, nat_logits)?;
        let sim = tape.cosine_rows(sa, sb)?;
        let one_minus = tape.affine(sim, -1.0, 1.0);
        let dist = tape.abs(one_minus);
        terms.push(tape.mean(dist)?);
    }
    if !cfg.drop_adversarial_mi {
        let sa = adversarial_est.sample_scores_tape(tape, &adv_vars, sub_noise, adv_logits)?;
        let sb = adversarial_est.sample_scores_tape(tape, &adv_vars, sub_noise, nat_logits)?;
        let sim = tape.cosine_rows(sa, sb)?;
        let one_minus = tape.affine(sim, -1.0, 1.0);
        let dist = tape.abs(one_minus);
        terms.push(tape.mean(dist)?);
    }
    if !cfg.zero_lambda && m >= 2 {
        let ba = adversarial_est
            .bound_tape(tape, &adv_vars, sub_noise, adv_logits, None)?
            .value;
        let bn = natural_est
            .bound_tape(tape, &nat_vars, sub_natural, adv_logits, None)?
            .value;
        let diff = tape.sub(ba, bn)?;
        terms.push(tape.affine(diff, cfg.lambda, 0.0));
    }
    let mut iter = terms.into_iter();
    let first = match iter.next() {
        None => return Ok(None),
        Some(v) => v,
    };
    let mut acc = first;
    for v in iter {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// Per-epoch training diagnostics, evaluated on the test split with the
/// training-time attack.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub natural_acc: f64,
    pub adversarial_acc: f64,
    pub l_adv: f64,
    pub l_mi: f64,
    pub selected: usize,
}

/// Everything needed to resume bit-identically: parameters, optimizer
/// velocities and step count, completed-epoch count, and the identity
/// of the run (config hash + root seed).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Mlp,
    pub velocities: Vec<Vec<f64>>,
    pub sgd_step: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub root_seed: u64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRow>,
}

fn validate_estimators(cfg: &RunConfig, nat: &Estimator, adv: &Estimator) -> Result<()> {
    if nat.kind() != EstimatorKind::Natural || adv.kind() != EstimatorKind::Adversarial {
        return Err(Error::State("estimator pair has mismatched kind tags".into()));
    }
    for est in [nat, adv] {
        if est.input_dim() != cfg.dim || est.classes() != cfg.dataset.classes() {
            return Err(Error::shape(
                "estimator",
                &[cfg.dim, cfg.dataset.classes()],
                &[est.input_dim(), est.classes()],
            ));
        }
        if est.patches() < 2 && !(cfg.drop_natural_mi && cfg.drop_adversarial_mi) {
            return Err(Error::Input(
                "cosine terms need estimators with at least 2 blocks".into(),
            ));
        }
    }
    Ok(())
}

/// Step decay for the defense optimizer: a tenth of the base rate from
/// three quarters of the run, a hundredth from nine tenths. Recomputed
/// from the epoch index so resumed runs see the same schedule.
fn lr_at(cfg: &RunConfig, epoch: usize) -> f64 {
    let mut lr = cfg.lr;
    if epoch >= (3 * cfg.epochs) / 4 {
        lr *= 0.1;
    }
    if epoch >= (9 * cfg.epochs) / 10 {
        lr *= 0.1;
    }
    lr
}

fn model_dims(cfg: &RunConfig) -> Vec<usize> {
    let mut dims = Vec::with_capacity(cfg.hidden.len() + 2);
    dims.push(cfg.dim);
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.dataset.classes());
    dims
}

/// The one training loop behind both entry points. `estimators: None`
/// is standard adversarial training; `Some` adds the dependence term
/// (which the config may still disable). `resume` continues a run from
/// a checkpoint on the same seed paths, which makes the interrupted and
/// uninterrupted schedules bitwise identical.
fn train_loop(
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    estimators: Option<(&Estimator, &Estimator)>,
    seeds: &SeedTree,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    train.validate()?;
    test.validate()?;
    if train.dim() != cfg.dim || train.classes != cfg.dataset.classes() {
        return Err(Error::shape(
            "training split",
            &[cfg.dim, cfg.dataset.classes()],
            &[train.dim(), train.classes],
        ));
    }
    let mi_active = estimators.is_some() && !cfg.mi_term_disabled();
    if let Some((nat, adv)) = estimators {
        validate_estimators(cfg, nat, adv)?;
    }
    let attack = cfg.train_attack()?;
    let config_hash = cfg.hash_hex();

    let (mut model, mut sgd, start_epoch) = match resume {
        None => {
            let model = Mlp::new(&model_dims(cfg), &mut seeds.rng("train/init"))?;
            let params = model.params();
            let sgd = Sgd::new(
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
                &params,
                model.param_names(),
            )?;
            drop(params);
            (model, sgd, 0)
        }
        Some(ckpt) => {
            if ckpt.config_hash != config_hash {
                return Err(Error::Version(format!(
                    "checkpoint was trained with config {} but this run uses {}",
                    ckpt.config_hash, config_hash
                )));
            }
            if ckpt.root_seed != seeds.root() {
                return Err(Error::Version(format!(
                    "checkpoint root seed {} does not match run seed {}",
                    ckpt.root_seed,
                    seeds.root()
                )));
            }
            if ckpt.epoch > cfg.epochs {
                return Err(Error::State(format!(
                    "checkpoint has {} completed epochs but config trains only {}",
                    ckpt.epoch, cfg.epochs
                )));
            }
            let model = ckpt.model;
            let params = model.params();
            let mut sgd = Sgd::new(
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
                &params,
                model.param_names(),
            )?;
            drop(params);
            sgd.restore(ckpt.velocities, ckpt.sgd_step)?;
            (model, sgd, ckpt.epoch)
        }
    };

    let end_epoch = stop_after.map_or(cfg.epochs, |k| k.min(cfg.epochs));
    let mut history = Vec::with_capacity(end_epoch.saturating_sub(start_epoch));
    for epoch in start_epoch..end_epoch {
        sgd.lr = lr_at(cfg, epoch);
        let mut rng = seeds.rng(&format!("train/shuffle/{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut l_adv_sum = 0.0;
        let mut l_mi_sum = 0.0;
        let mut batches = 0usize;
        let mut selected_total = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = train.inputs.gather_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = pgd(
                &model,
                &x,
                &y,
                &attack,
                seeds.derive(&format!("train/attack/{epoch}/{b}")),
            )?;

            let mut tape = Tape::new();
            let vars = model.on_tape(&mut tape);
            let adv_in = tape.leaf(batch.adversarial().clone());
            let adv_logits = model.forward_tape(&mut tape, &vars, adv_in)?;
            let l_adv = tape.softmax_cross_entropy(adv_logits, &y)?;
            let mut loss = l_adv;
            let mut l_mi_val = 0.0;
            if mi_active {
                let (nat_est, adv_est) = estimators.unwrap();
                let sel = select_training_pairs(&model, &batch)?;
                if !sel.is_empty() {
                    let sub = batch.gather(&sel)?;
                    let adv_sel = tape.gather_rows(adv_logits, &sel)?;
                    let nat_in = tape.leaf(sub.natural().clone());
                    let nat_sel = model.forward_tape(&mut tape, &vars, nat_in)?;
                    if let Some(mi) = mi_loss_on_tape(
                        &mut tape,
                        cfg,
                        nat_est,
                        adv_est,
                        sub.natural(),
                        sub.noise(),
                        nat_sel,
                        adv_sel,
                    )? {
                        l_mi_val = tape.value(mi).data()[0];
                        let weighted = tape.affine(mi, cfg.alpha, 0.0);
                        loss = tape.add(l_adv, weighted)?;
                    }
                    selected_total += sel.len();
                }
            }
            let l_adv_val = tape.value(l_adv).data()[0];
            let loss_val = tape.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::Divergence {
                    what: "training loss".to_string(),
                    step: sgd.step_count(),
                });
            }
            tape.backward(loss)?;
            let grads = model.grads(&tape, &vars)?;
            if log::log_enabled!(log::Level::Debug) {
                let peak = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                log::debug!("epoch {epoch} batch {b}: l_adv {l_adv_val:.4} l_mi {l_mi_val:.4} grad peak {peak:.3e}");
            }
            let mut params = model.params_mut();
            sgd.apply(&mut params, &grads)?;
            l_adv_sum += l_adv_val;
            l_mi_sum += l_mi_val;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::State("training split produced no batches".into()));
        }

        let nat_logits = model.forward(&test.inputs)?;
        let natural_acc = accuracy(&nat_logits, &test.labels)?;
        let metric_batch = pgd(
            &model,
            &test.inputs,
            &test.labels,
            &attack,
            seeds.derive(&format!("train/metrics/{epoch}")),
        )?;
        let adv_logits = model.forward(metric_batch.adversarial())?;
        let adversarial_acc = accuracy(&adv_logits, &test.labels)?;
        history.push(EpochRow {
            epoch,
            natural_acc,
            adversarial_acc,
            l_adv: l_adv_sum / batches as f64,
            l_mi: l_mi_sum / batches as f64,
            selected: selected_total,
        });
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            velocities: sgd.velocities().to_vec(),
            sgd_step: sgd.step_count(),
            epoch: end_epoch,
            config_hash,
            root_seed: seeds.root(),
        },
        history,
    })
}

/// Adversarial training baseline; also the pretraining stage for the
/// estimators.
pub fn train_standard_at(
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    seeds: &SeedTree,
) -> Result<TrainOutcome> {
    train_loop(cfg, train, test, None, seeds, None, None)
}

/// The full defense: adversarial training plus the frozen-estimator
/// dependence term.
pub fn train_namid(
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    natural_est: &Estimator,
    adversarial_est: &Estimator,
    seeds: &SeedTree,
) -> Result<TrainOutcome> {
    train_loop(
        cfg,
        train,
        test,
        Some((natural_est, adversarial_est)),
        seeds,
        None,
        None,
    )
}

/// Continue an interrupted run from its checkpoint.
pub fn resume_training(
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    estimators: Option<(&Estimator, &Estimator)>,
    seeds: &SeedTree,
    checkpoint: Checkpoint,
) -> Result<TrainOutcome> {
    train_loop(cfg, train, test, estimators, seeds, Some(checkpoint), None)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, manifest: &RunManifest) -> Result<()> {
    let mut entries = container::manifest_entries(manifest);
    entries.extend(container::mlp_entries("model", &ckpt.model));
    for (i, v) in ckpt.velocities.iter().enumerate() {
        let len = v.len();
        entries.push((
            format!("velocity.{i}"),
            Tensor::new(vec![len], v.clone())?,
        ));
    }
    let meta = format!(
        "epoch={} step={} config_hash={} root_seed={}",
        ckpt.epoch, ckpt.sgd_step, ckpt.config_hash, ckpt.root_seed
    );
    entries.push(container::string_entry("meta", &meta));
    container::save_container(path, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunManifest)> {
    let entries = container::load_container(path)?;
    let manifest = container::read_manifest(&entries)?;
    let model = container::read_mlp("model", &entries)?;
    let mut velocities = Vec::with_capacity(model.param_count());
    for i in 0..model.params().len() {
        let t = container::find(&entries, &format!("velocity.{i}"))?;
        velocities.push(t.data().to_vec());
    }
    let meta = container::entry_text("meta", container::find(&entries, "meta")?)?;
    let mut epoch = None;
    let mut step = None;
    let mut config_hash = None;
    let mut root_seed = None;
    for field in meta.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format("meta", format!("bad field `{field}`")))?;
        match k {
            "epoch" => epoch = v.parse::<usize>().ok(),
            "step" => step = v.parse::<usize>().ok(),
            "config_hash" => config_hash = Some(v.to_string()),
            "root_seed" => root_seed = v.parse::<u64>().ok(),
            other => return Err(Error::format("meta", format!("unknown field `{other}`"))),
        }
    }
    let (epoch, sgd_step, config_hash, root_seed) = match (epoch, step, config_hash, root_seed) {
        (Some(e), Some(s), Some(h), Some(r)) => (e, s, h, r),
        _ => return Err(Error::format("meta", "incomplete checkpoint metadata")),
    };
    Ok((
        Checkpoint {
            model,
            velocities,
            sgd_step,
            epoch,
            config_hash,
            root_seed,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Bound;
    use crate::datasets::generate_synthetic;
    use crate::rng::SplitMix64;
    use crate::tensor::nn::{softmax_cross_entropy, Dense};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train_n = 160;
        cfg.test_n = 80;
        cfg.dim = 8;
        cfg.epochs = 3;
        cfg.batch_size = 64;
        cfg.attack_steps = 3;
        cfg.eps = 0.1;
        cfg.est_epochs = 2;
        cfg.est_batch = 64;
        cfg
    }

    fn small_data(cfg: &RunConfig, seed: u64) -> (DatasetSplit, DatasetSplit) {
        let train = generate_synthetic(cfg.dataset, cfg.train_n, cfg.dim, seed).unwrap();
        let test = generate_synthetic(cfg.dataset, cfg.test_n, cfg.dim, seed ^ 1).unwrap();
        (train, test)
    }

    fn quick_estimators(cfg: &RunConfig, seed: u64) -> (Estimator, Estimator) {
        let mut rng = SplitMix64::new(seed);
        let nat = Estimator::from_config(EstimatorKind::Natural, cfg, &mut rng).unwrap();
        let adv = Estimator::from_config(EstimatorKind::Adversarial, cfg, &mut rng).unwrap();
        (nat, adv)
    }

    #[test]
    fn cosine_loss_fixtures() {
        assert_eq!(cosine_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_loss(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(cosine_loss(&[1.0, 2.0], &[1.0]).is_err());
        assert!(cosine_loss(&[1.0], &[1.0]).is_err());
        // Zero vector: similarity treated as 0, loss 1.
        assert_eq!(cosine_loss(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn mi_loss_zero_noise_zero_lambda_is_zero() {
        let cfg = small_cfg();
        let (nat_est, adv_est) = quick_estimators(&cfg, 3);
        let mut rng = SplitMix64::new(4);
        let model = Mlp::new(&[8, 8, 2], &mut rng).unwrap();
        let x: Vec<f64> = (0..4 * 8).map(|_| rng.next_f64()).collect();
        let batch = Batch::from_noise(
            Tensor::matrix(4, 8, x).unwrap(),
            Tensor::zeros(vec![4, 8]),
            vec![0, 1, 0, 1],
        )
        .unwrap();
        // Zero noise makes both logit sets identical, so every cosine
        // compares a vector with itself; the only residue is the
        // sqrt rounding in the norm product.
        let got = mi_loss(&batch, &nat_est, &adv_est, &model, 0.0).unwrap();
        assert!(got.abs() < 1e-12, "got {got}");
    }

    #[test]
    fn mi_loss_orthogonal_fixture_is_two() {
        // Hand-built nets: encoder copies its single input through a
        // relu pair, the score net outputs feature + first logit. With
        // pattern blocks (1, 0) for the natural estimator and (-1, 1)
        // for the adversarial one, logits a (adversarial) and n
        // (natural) chosen so both per-sample score vectors come out
        // orthogonal: golden-ratio roots of 1 + a + n + 2an = 0 with
        // a*n = -1.
        let ident_encoder = || {
            Mlp::from_layers(vec![
                Dense {
                    w: Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(),
                    b: Tensor::zeros(vec![2]),
                    relu: true,
                },
                Dense {
                    w: Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(),
                    b: Tensor::zeros(vec![1]),
                    relu: false,
                },
            ])
            .unwrap()
        };
        // The final layer is scaled down so the bounded-critic squash
        // is linear to float precision; cosines ignore the scale.
        let sum_score = || {
            Mlp::from_layers(vec![
                Dense {
                    w: Tensor::matrix(3, 2, vec![1.0, -1.0, 1.0, -1.0, 0.0, 0.0]).unwrap(),
                    b: Tensor::zeros(vec![2]),
                    relu: true,
                },
                Dense {
                    w: Tensor::matrix(2, 1, vec![1e-4, -1e-4]).unwrap(),
                    b: Tensor::zeros(vec![1]),
                    relu: false,
                },
            ])
            .unwrap()
        };
        let nat_est = Estimator::from_parts(
            EstimatorKind::Natural,
            Bound::Dv,
            2,
            2,
            ident_encoder(),
            sum_score(),
        )
        .unwrap();
        let adv_est = Estimator::from_parts(
            EstimatorKind::Adversarial,
            Bound::Dv,
            2,
            2,
            ident_encoder(),
            sum_score(),
        )
        .unwrap();
        let a = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let n = 1.0 - a;
        // Model maps the natural row (1, 0) to logits (n, 0) and the
        // adversarial row (0, 1) to (a, 0).
        let model = Mlp::from_layers(vec![Dense {
            w: Tensor::matrix(2, 2, vec![n, 0.0, a, 0.0]).unwrap(),
            b: Tensor::zeros(vec![2]),
            relu: false,
        }])
        .unwrap();
        let batch = Batch::from_noise(
            Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap(),
            vec![0],
        )
        .unwrap();
        let got = mi_loss(&batch, &nat_est, &adv_est, &model, 0.0).unwrap();
        assert!((got - 2.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn mi_loss_matches_hand_transcription() {
        // Two samples, one block of width 2 per net input; every number
        // recomputed below with explicit loops.
        let enc = Mlp::from_layers(vec![
            Dense {
                w: Tensor::matrix(2, 2, vec![0.3, -0.2, 0.5, 0.4]).unwrap(),
                b: Tensor::new(vec![2], vec![0.1, -0.1]).unwrap(),
                relu: true,
            },
            Dense {
                w: Tensor::matrix(2, 2, vec![0.7, 0.2, -0.3, 0.6]).unwrap(),
                b: Tensor::new(vec![2], vec![0.0, 0.05]).unwrap(),
                relu: false,
            },
        ])
        .unwrap();
        let score = Mlp::from_layers(vec![
            Dense {
                w: Tensor::matrix(4, 3, vec![
                    0.2, -0.4, 0.1, //
                    0.5, 0.3, -0.2, //
                    -0.1, 0.6, 0.4, //
                    0.3, 0.1, 0.2,
                ])
                .unwrap(),
                b: Tensor::new(vec![3], vec![0.05, -0.05, 0.1]).unwrap(),
                relu: true,
            },
            Dense {
                w: Tensor::matrix(3, 1, vec![0.4, -0.6, 0.5]).unwrap(),
                b: Tensor::new(vec![1], vec![0.02]).unwrap(),
                relu: false,
            },
        ])
        .unwrap();
        // patches=2 over dim 4, block 2, feat 2, classes 2.
        let nat_est =
            Estimator::from_parts(EstimatorKind::Natural, Bound::Dv, 2, 2, enc.clone(), score.clone())
                .unwrap();
        let adv_est =
            Estimator::from_parts(EstimatorKind::Adversarial, Bound::Dv, 2, 2, enc, score).unwrap();
        let model = Mlp::from_layers(vec![Dense {
            w: Tensor::matrix(4, 2, vec![0.9, -0.3, -0.2, 0.8, 0.4, 0.1, -0.5, 0.6]).unwrap(),
            b: Tensor::new(vec![2], vec![0.1, -0.1]).unwrap(),
            relu: false,
        }])
        .unwrap();
        let natural = Tensor::matrix(2, 4, vec![0.2, 0.7, 0.4, 0.1, 0.8, 0.3, 0.6, 0.9]).unwrap();
        let noise =
            Tensor::matrix(2, 4, vec![0.05, -0.04, 0.02, 0.03, -0.06, 0.05, -0.01, 0.04]).unwrap();
        let batch = Batch::from_noise(natural, noise, vec![0, 1]).unwrap();
        let lambda = 0.1;
        let got = mi_loss(&batch, &nat_est, &adv_est, &model, lambda).unwrap();

        // Independent transcription with plain loops.
        let mlp_eval = |mlp: &Mlp, x: &[f64]| -> Vec<f64> {
            let mut cur = x.to_vec();
            for layer in mlp.layers() {
                let (fan_in, fan_out) = (layer.w.rows(), layer.w.cols());
                let mut next = vec![0.0; fan_out];
                for o in 0..fan_out {
                    let mut acc = layer.b.data()[o];
                    for i in 0..fan_in {
                        acc += cur[i] * layer.w.data()[i * fan_out + o];
                    }
                    next[o] = if layer.relu { acc.max(0.0) } else { acc };
                }
                cur = next;
            }
            cur
        };
        let clamp = |s: f64| 10.0 * (s / 10.0).tanh();
        let score_vec = |est: &Estimator, pattern: &[f64], logits: &[f64]| -> Vec<f64> {
            let mut out = Vec::new();
            for p in 0..2 {
                let feat = mlp_eval(est.encoder(), &pattern[p * 2..(p + 1) * 2]);
                let mut inp = feat;
                inp.extend_from_slice(logits);
                out.push(clamp(mlp_eval(est.score_net(), &inp)[0]));
            }
            out
        };
        let cosine = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (1.0 - dot / (na * nb)).abs()
        };
        let dv = |joint: &[f64], marg: &[f64]| -> f64 {
            let mean = joint.iter().sum::<f64>() / joint.len() as f64;
            mean - (marg.iter().map(|t| t.exp()).sum::<f64>() / marg.len() as f64).ln()
        };
        let mut logits_nat = Vec::new();
        let mut logits_adv = Vec::new();
        for i in 0..2 {
            logits_nat.push(mlp_eval(&model, batch.natural().row(i)));
            logits_adv.push(mlp_eval(&model, batch.adversarial().row(i)));
        }
        let mut acc = 0.0;
        for i in 0..2 {
            let sn_adv = score_vec(&nat_est, batch.natural().row(i), &logits_adv[i]);
            let sn_nat = score_vec(&nat_est, batch.natural().row(i), &logits_nat[i]);
            let sa_adv = score_vec(&adv_est, batch.noise().row(i), &logits_adv[i]);
            let sa_nat = score_vec(&adv_est, batch.noise().row(i), &logits_nat[i]);
            acc += cosine(&sn_adv, &sn_nat) + cosine(&sa_adv, &sa_nat);
        }
        let mut want = acc / 2.0;
        // Batch-level estimates: per block, joint pairs (i, i) and
        // shifted negatives (i+1, i), averaged across the two blocks.
        let est_value = |est: &Estimator, patterns: &Tensor, logits: &[Vec<f64>]| -> f64 {
            let mut bounds = Vec::new();
            for p in 0..2 {
                let mut joint = Vec::new();
                let mut marg = Vec::new();
                for i in 0..2 {
                    let feat_i = mlp_eval(est.encoder(), &patterns.row(i)[p * 2..(p + 1) * 2]);
                    let feat_s = mlp_eval(
                        est.encoder(),
                        &patterns.row((i + 1) % 2)[p * 2..(p + 1) * 2],
                    );
                    let mut ji = feat_i;
                    ji.extend_from_slice(&logits[i]);
                    joint.push(clamp(mlp_eval(est.score_net(), &ji)[0]));
                    let mut mi_in = feat_s;
                    mi_in.extend_from_slice(&logits[i]);
                    marg.push(clamp(mlp_eval(est.score_net(), &mi_in)[0]));
                }
                bounds.push(dv(&joint, &marg));
            }
            bounds.iter().sum::<f64>() / 2.0
        };
        let ea = est_value(&adv_est, batch.noise(), &logits_adv);
        let en = est_value(&nat_est, batch.natural(), &logits_adv);
        want += lambda * (ea - en);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn total_loss_alpha_zero_is_plain_cross_entropy() {
        let mut cfg = small_cfg();
        cfg.alpha = 0.0;
        let (nat_est, adv_est) = quick_estimators(&cfg, 5);
        let mut rng = SplitMix64::new(6);
        let model = Mlp::new(&[8, 8, 2], &mut rng).unwrap();
        let x: Vec<f64> = (0..6 * 8).map(|_| rng.next_f64() * 0.9).collect();
        let noise: Vec<f64> = (0..6 * 8).map(|_| rng.next_f64() * 0.05).collect();
        let batch = Batch::from_noise(
            Tensor::matrix(6, 8, x).unwrap(),
            Tensor::matrix(6, 8, noise).unwrap(),
            vec![0, 1, 0, 1, 0, 1],
        )
        .unwrap();
        let got = total_loss(&batch, &cfg, &nat_est, &adv_est, &model).unwrap();
        let want =
            softmax_cross_entropy(&model.forward(batch.adversarial()).unwrap(), batch.labels())
                .unwrap();
        assert_eq!(got.to_bits(), want.to_bits());
    }

    #[test]
    fn total_loss_composes_from_parts() {
        let cfg = small_cfg();
        let (train, _) = small_data(&cfg, 7);
        let (nat_est, adv_est) = quick_estimators(&cfg, 8);
        // A lightly trained model so selection is non-trivial.
        let mut rng = SplitMix64::new(9);
        let model = {
            let mut m = Mlp::new(&[8, 16, 2], &mut rng).unwrap();
            let params = m.params();
            let mut sgd = Sgd::new(0.3, 0.9, 0.0, &params, m.param_names()).unwrap();
            drop(params);
            for _ in 0..40 {
                let mut tape = Tape::new();
                let vars = m.on_tape(&mut tape);
                let x = tape.leaf(train.inputs.clone());
                let logits = m.forward_tape(&mut tape, &vars, x).unwrap();
                let loss = tape.softmax_cross_entropy(logits, &train.labels).unwrap();
                tape.backward(loss).unwrap();
                let grads = m.grads(&tape, &vars).unwrap();
                let mut params = m.params_mut();
                sgd.apply(&mut params, &grads).unwrap();
            }
            m
        };
        let spec = crate::attack::AttackSpec::new(crate::attack::Norm::LInf, 0.25, 5, None, true)
            .unwrap();
        let idx: Vec<usize> = (0..64).collect();
        let x = train.inputs.gather_rows(&idx).unwrap();
        let y = train.labels[..64].to_vec();
        let batch = pgd(&model, &x, &y, &spec, 11).unwrap();
        let sel = select_training_pairs(&model, &batch).unwrap();
        assert!(
            sel.len() >= 2,
            "fixture needs a non-trivial selection, got {}",
            sel.len()
        );
        let got = total_loss(&batch, &cfg, &nat_est, &adv_est, &model).unwrap();
        let l_adv =
            softmax_cross_entropy(&model.forward(batch.adversarial()).unwrap(), batch.labels())
                .unwrap();
        let sub = batch.gather(&sel).unwrap();
        let l_mi = mi_loss(&sub, &nat_est, &adv_est, &model, cfg.lambda).unwrap();
        assert!((got - (l_adv + cfg.alpha * l_mi)).abs() < 1e-12);
    }

    #[test]
    fn epsilon_zero_training_fits_separable_data() {
        let mut cfg = small_cfg();
        cfg.eps = 0.0;
        cfg.epochs = 10;
        let (train, test) = small_data(&cfg, 12);
        let out = train_standard_at(&cfg, &train, &test, &SeedTree::new(5)).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.natural_acc >= 0.99, "natural acc {}", last.natural_acc);
        // eps 0 makes the adversarial metric the natural metric.
        assert_eq!(last.natural_acc, last.adversarial_acc);
    }

    #[test]
    fn standard_training_is_deterministic() {
        let cfg = small_cfg();
        let (train, test) = small_data(&cfg, 13);
        let a = train_standard_at(&cfg, &train, &test, &SeedTree::new(3)).unwrap();
        let b = train_standard_at(&cfg, &train, &test, &SeedTree::new(3)).unwrap();
        for (pa, pb) in a.checkpoint.model.params().iter().zip(b.checkpoint.model.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        assert_eq!(a.checkpoint.sgd_step, b.checkpoint.sgd_step);
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.l_adv.to_bits(), rb.l_adv.to_bits());
            assert_eq!(ra.adversarial_acc.to_bits(), rb.adversarial_acc.to_bits());
        }
    }

    #[test]
    fn alpha_zero_defense_equals_standard_training_bitwise() {
        let mut cfg = small_cfg();
        cfg.alpha = 0.0;
        let (train, test) = small_data(&cfg, 14);
        let (nat_est, adv_est) = quick_estimators(&cfg, 15);
        let at = train_standard_at(&cfg, &train, &test, &SeedTree::new(9)).unwrap();
        let namid =
            train_namid(&cfg, &train, &test, &nat_est, &adv_est, &SeedTree::new(9)).unwrap();
        for (pa, pb) in at
            .checkpoint
            .model
            .params()
            .iter()
            .zip(namid.checkpoint.model.params())
        {
            assert_eq!(pa.data(), pb.data());
        }
        for (va, vb) in at.checkpoint.velocities.iter().zip(&namid.checkpoint.velocities) {
            assert_eq!(va, vb);
        }
        for (ra, rb) in at.history.iter().zip(&namid.history) {
            assert_eq!(ra.l_adv.to_bits(), rb.l_adv.to_bits());
            assert_eq!(ra.natural_acc.to_bits(), rb.natural_acc.to_bits());
            assert_eq!(ra.adversarial_acc.to_bits(), rb.adversarial_acc.to_bits());
            assert_eq!(rb.l_mi, 0.0);
            assert_eq!(rb.selected, 0);
        }
    }

    #[test]
    fn defense_run_trains_and_freezes_estimators() {
        let mut cfg = small_cfg();
        cfg.eps = 0.15;
        let (train, test) = small_data(&cfg, 16);
        let (nat_est, adv_est) = quick_estimators(&cfg, 17);
        let nat_before: Vec<Vec<f64>> =
            nat_est.params().iter().map(|p| p.data().to_vec()).collect();
        let adv_before: Vec<Vec<f64>> =
            adv_est.params().iter().map(|p| p.data().to_vec()).collect();
        let out =
            train_namid(&cfg, &train, &test, &nat_est, &adv_est, &SeedTree::new(21)).unwrap();
        assert!(out.history.iter().any(|r| r.selected > 0));
        assert!(out.history.iter().any(|r| r.l_mi != 0.0));
        for (before, after) in nat_before.iter().zip(nat_est.params()) {
            assert_eq!(before, after.data());
        }
        for (before, after) in adv_before.iter().zip(adv_est.params()) {
            assert_eq!(before, after.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume_are_bit_identical() {
        let cfg = small_cfg();
        let (train, test) = small_data(&cfg, 18);
        let seeds = SeedTree::new(77);
        let full = train_standard_at(&cfg, &train, &test, &seeds).unwrap();

        // A genuine interruption: the full config's schedule, stopped
        // after 2 of its epochs.
        let partial = train_loop(&cfg, &train, &test, None, &seeds, None, Some(2))
            .unwrap()
            .checkpoint;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.nmid");
        let manifest = RunManifest::new(&cfg, 77);
        save_checkpoint(&path, &partial, &manifest).unwrap();
        let (loaded, loaded_manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.sgd_step, partial.sgd_step);
        assert_eq!(loaded_manifest.root_seed, 77);
        for (a, b) in partial.model.params().iter().zip(loaded.model.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(partial.velocities, loaded.velocities);

        let resumed = resume_training(&cfg, &train, &test, None, &seeds, loaded).unwrap();
        for (a, b) in full
            .checkpoint
            .model
            .params()
            .iter()
            .zip(resumed.checkpoint.model.params())
        {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(full.checkpoint.velocities, resumed.checkpoint.velocities);
        // Resume rejects a mismatched config or seed.
        let (reload, _) = load_checkpoint(&path).unwrap();
        let mut other = cfg.clone();
        other.lr = 0.123;
        assert!(matches!(
            resume_training(&other, &train, &test, None, &seeds, reload),
            Err(Error::Version(_))
        ));
        let (reload, _) = load_checkpoint(&path).unwrap();
        assert!(matches!(
            resume_training(&cfg, &train, &test, None, &SeedTree::new(78), reload),
            Err(Error::Version(_))
        ));
    }
}
