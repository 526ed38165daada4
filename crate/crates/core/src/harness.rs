//! Evaluation harnesses: white-box and transfer accuracy tables, the
//! three-curve estimate probe, estimator-separation reports, and the
//! ablation pipeline.
//!
//! Every harness takes a seed tree and derives one stream per attack
//! setting, so a report is regenerable bit-exactly from (config, seed)
//! and the white-box and transfer paths share identical crafting
//! randomness.

use crate::attack::{pgd, AttackSpec, Norm};
use crate::config::{Objective, RunConfig};
use crate::datasets::DatasetSplit;
use crate::defense::{train_namid, train_standard_at, EpochRow, TrainOutcome};
use crate::error::{Error, Result};
use crate::mi::{train_estimators, Estimator, EstimatorKind, TrainedEstimators};
use crate::report::{EvalReport, EvalRow, MiSummaryRow, PocRow, SeparationRow};
use crate::rng::SeedTree;
use crate::tensor::nn::{accuracy, Mlp};
use crate::tensor::Tensor;

/// One attack setting in an evaluation suite. `spec: None` is the
/// clean row (no attack).
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub spec: Option<AttackSpec>,
}

impl SuiteEntry {
    fn norm_token(&self) -> String {
        match &self.spec {
            None => "-".to_string(),
            Some(s) => s.norm.token().to_string(),
        }
    }

    fn eps(&self) -> f64 {
        self.spec.as_ref().map_or(0.0, |s| s.eps)
    }

    fn steps(&self) -> usize {
        self.spec.as_ref().map_or(0, |s| s.steps)
    }
}

/// The default evaluation suite: clean, single-step, the training-time
/// iteration count, and the heavier evaluation iteration count.
pub fn standard_suite(cfg: &RunConfig) -> Result<Vec<SuiteEntry>> {
    let mut suite = vec![SuiteEntry {
        name: "none".to_string(),
        spec: None,
    }];
    suite.push(SuiteEntry {
        name: "fgsm".to_string(),
        spec: Some(AttackSpec::new(
            Norm::LInf,
            cfg.eps,
            1,
            Some(cfg.eps),
            false,
        )?),
    });
    let step = if cfg.attack_step > 0.0 {
        Some(cfg.attack_step)
    } else {
        None
    };
    let mut steps_list = vec![cfg.attack_steps];
    if cfg.eval_steps != cfg.attack_steps {
        steps_list.push(cfg.eval_steps);
    }
    for steps in steps_list {
        suite.push(SuiteEntry {
            name: format!("pgd{steps}"),
            spec: Some(AttackSpec::new(
                cfg.attack_norm,
                cfg.eps,
                steps,
                step,
                cfg.eval_random_start,
            )?),
        });
    }
    Ok(suite)
}

fn accuracy_pct(model: &Mlp, x: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(accuracy(&model.forward(x)?, y)? * 100.0)
}

fn check_model(model: &Mlp, data: &DatasetSplit, what: &str) -> Result<()> {
    data.validate()?;
    if model.input_dim() != data.dim() || model.output_dim() != data.classes {
        return Err(Error::shape(
            what,
            &[data.dim(), data.classes],
            &[model.input_dim(), model.output_dim()],
        ));
    }
    Ok(())
}

/// Accuracy table where `crafter` builds the adversarial examples and
/// `target` is scored on them. The white-box path sets both to the
/// same model; the counting code is shared by construction.
fn run_suite(
    target: &Mlp,
    crafter: &Mlp,
    defense: &str,
    data: &DatasetSplit,
    suite: &[SuiteEntry],
    seeds: &SeedTree,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::Input("evaluation suite is empty".into()));
    }
    check_model(target, data, "evaluation target")?;
    check_model(crafter, data, "attack surrogate")?;
    let natural_acc = accuracy_pct(target, &data.inputs, &data.labels)?;
    let mut rows = Vec::with_capacity(suite.len());
    for entry in suite {
        let adversarial_acc = match &entry.spec {
            None => natural_acc,
            Some(spec) => {
                let batch = pgd(
                    crafter,
                    &data.inputs,
                    &data.labels,
                    spec,
                    seeds.derive(&format!("eval/{}", entry.name)),
                )?;
                accuracy_pct(target, batch.adversarial(), &data.labels)?
            }
        };
        rows.push(EvalRow {
            defense: defense.to_string(),
            attack: entry.name.clone(),
            norm: entry.norm_token(),
            eps: entry.eps(),
            steps: entry.steps(),
            natural_acc,
            adversarial_acc,
            seed: seeds.root(),
            runtime_s: 0.0,
        });
    }
    let report = EvalReport {
        rows,
        mi_rows: Vec::new(),
    };
    report.validate()?;
    Ok(report)
}

/// White-box evaluation: attacks are crafted against the scored model.
pub fn evaluate(
    model: &Mlp,
    defense: &str,
    data: &DatasetSplit,
    suite: &[SuiteEntry],
    seeds: &SeedTree,
) -> Result<EvalReport> {
    run_suite(model, model, defense, data, suite, seeds)
}

/// Transfer evaluation: attacks are crafted against the surrogate and
/// scored on the target. With surrogate == target this degenerates to
/// `evaluate` bit-exactly (same seed paths, same counting).
pub fn black_box_eval(
    target: &Mlp,
    surrogate: &Mlp,
    defense: &str,
    data: &DatasetSplit,
    suite: &[SuiteEntry],
    seeds: &SeedTree,
) -> Result<EvalReport> {
    run_suite(target, surrogate, defense, data, suite, seeds)
}

/// Mean-estimate summary rows for a trained estimator pair: the
/// natural estimator scored on natural pairs, the adversarial one on
/// adversarial pairs, with a shared offset flooring the minimum at 0.
pub fn mi_summary(
    model: &Mlp,
    natural_est: &Estimator,
    adversarial_est: &Estimator,
    data: &DatasetSplit,
    cfg: &RunConfig,
    seeds: &SeedTree,
) -> Result<Vec<MiSummaryRow>> {
    check_model(model, data, "mi summary model")?;
    let batch = pgd(
        model,
        &data.inputs,
        &data.labels,
        &cfg.eval_attack()?,
        seeds.derive("eval/mi"),
    )?;
    let nat_logits = model.forward(batch.natural())?;
    let adv_logits = model.forward(batch.adversarial())?;
    let nat_mean = natural_est.estimate(batch.natural(), &nat_logits)?.value;
    let adv_mean = adversarial_est.estimate(batch.noise(), &adv_logits)?.value;
    let offset = nat_mean.min(adv_mean);
    let dataset = cfg.dataset.token().to_string();
    Ok(vec![
        MiSummaryRow {
            estimator: EstimatorKind::Natural.token().to_string(),
            dataset: dataset.clone(),
            mean_estimate: nat_mean,
            offset_mean: nat_mean - offset,
        },
        MiSummaryRow {
            estimator: EstimatorKind::Adversarial.token().to_string(),
            dataset,
            mean_estimate: adv_mean,
            offset_mean: adv_mean - offset,
        },
    ])
}

/// Train the natural-pattern estimator by plain maximization on natural
/// pairs, for the three-curve probe.
pub fn train_probe_estimator(
    model: &Mlp,
    data: &DatasetSplit,
    cfg: &RunConfig,
    seeds: &SeedTree,
) -> Result<Estimator> {
    let mut poc_cfg = cfg.clone();
    poc_cfg.est_mode = Objective::MiMax;
    let attack = poc_cfg.train_attack()?;
    let trained = train_estimators(model, data, &attack, &poc_cfg, seeds)?;
    Ok(trained.natural)
}

/// The three-curve probe: estimates on natural pairs, adversarial
/// pairs, and the crossed pair (natural input, adversarial logits) at
/// each attack iteration count, offset-normalized so the smallest value
/// over all curves and settings is 0.
pub fn proof_of_concept(
    model: &Mlp,
    estimator: &Estimator,
    data: &DatasetSplit,
    cfg: &RunConfig,
    seeds: &SeedTree,
) -> Result<Vec<PocRow>> {
    check_model(model, data, "probe model")?;
    if estimator.kind() != EstimatorKind::Natural {
        return Err(Error::State(
            "the three-curve probe needs the natural-pattern estimator".into(),
        ));
    }
    if estimator.input_dim() != data.dim() || estimator.classes() != data.classes {
        return Err(Error::shape(
            "probe estimator",
            &[data.dim(), data.classes],
            &[estimator.input_dim(), estimator.classes()],
        ));
    }
    let mut iters = cfg.poc_iters.clone();
    iters.sort_unstable();
    iters.dedup();
    if iters.is_empty() {
        return Err(Error::Input("poc_iters is empty".into()));
    }
    let n = data.len().min(1000);
    let idx: Vec<usize> = (0..n).collect();
    let x = data.inputs.gather_rows(&idx)?;
    let y: Vec<usize> = data.labels[..n].to_vec();
    let nat_logits = model.forward(&x)?;
    let natural_value = estimator.estimate(&x, &nat_logits)?.value;
    let step = if cfg.attack_step > 0.0 {
        Some(cfg.attack_step)
    } else {
        None
    };
    let mut raw = Vec::with_capacity(iters.len());
    for &k in &iters {
        let (adversarial_value, cross_value) = if k == 0 {
            (natural_value, natural_value)
        } else {
            let spec = AttackSpec::new(cfg.attack_norm, cfg.eps, k, step, cfg.eval_random_start)?;
            let batch = pgd(model, &x, &y, &spec, seeds.derive(&format!("poc/attack/{k}")))?;
            let adv_logits = model.forward(batch.adversarial())?;
            (
                estimator.estimate(batch.adversarial(), &adv_logits)?.value,
                estimator.estimate(&x, &adv_logits)?.value,
            )
        };
        raw.push((k, natural_value, adversarial_value, cross_value));
    }
    let offset = raw
        .iter()
        .flat_map(|&(_, a, b, c)| [a, b, c])
        .fold(f64::INFINITY, f64::min);
    Ok(raw
        .into_iter()
        .map(|(k, a, b, c)| PocRow {
            iterations: k,
            natural_mi: a - offset,
            adversarial_mi: b - offset,
            cross_mi: c - offset,
        })
        .collect())
}

/// Gap rows for two estimator pairs (plain maximization vs separation
/// training) on one held-out split. The gap is matched-minus-mismatched
/// per estimator kind; the means share one offset flooring the global
/// minimum at 0, which leaves every gap unchanged.
pub fn separation_report(
    model: &Mlp,
    mimax: (&Estimator, &Estimator),
    separation: (&Estimator, &Estimator),
    data: &DatasetSplit,
    cfg: &RunConfig,
    seeds: &SeedTree,
) -> Result<Vec<SeparationRow>> {
    check_model(model, data, "separation model")?;
    let batch = pgd(
        model,
        &data.inputs,
        &data.labels,
        &cfg.eval_attack()?,
        seeds.derive("sep/attack"),
    )?;
    let nat_logits = model.forward(batch.natural())?;
    let adv_logits = model.forward(batch.adversarial())?;
    let mut raw: Vec<(String, String, f64, f64)> = Vec::with_capacity(4);
    for (objective, pair) in [
        (Objective::MiMax, mimax),
        (Objective::Separation, separation),
    ] {
        for est in [pair.0, pair.1] {
            let pattern = match est.kind() {
                EstimatorKind::Natural => batch.natural(),
                EstimatorKind::Adversarial => batch.noise(),
            };
            let natural_mean = est.estimate(pattern, &nat_logits)?.value;
            let adversarial_mean = est.estimate(pattern, &adv_logits)?.value;
            raw.push((
                objective.token().to_string(),
                est.kind().token().to_string(),
                natural_mean,
                adversarial_mean,
            ));
        }
    }
    let offset = raw
        .iter()
        .flat_map(|&(_, _, a, b)| [a, b])
        .fold(f64::INFINITY, f64::min);
    Ok(raw
        .into_iter()
        .map(|(objective, estimator, nat, adv)| {
            let gap = if estimator == EstimatorKind::Natural.token() {
                nat - adv
            } else {
                adv - nat
            };
            SeparationRow {
                objective,
                estimator,
                natural_mean: nat - offset,
                adversarial_mean: adv - offset,
                gap,
            }
        })
        .collect())
}

/// The ablation variant set: the full defense, one variant per dropped
/// loss term, and the plain adversarial-training baseline.
pub fn ablation_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut full = base.clone();
    full.drop_natural_mi = false;
    full.drop_adversarial_mi = false;
    full.zero_lambda = false;
    let mut no_adv = full.clone();
    no_adv.drop_adversarial_mi = true;
    let mut no_nat = full.clone();
    no_nat.drop_natural_mi = true;
    let mut lambda0 = full.clone();
    lambda0.zero_lambda = true;
    vec![
        ("full".to_string(), full),
        ("no_adv_mi".to_string(), no_adv),
        ("no_nat_mi".to_string(), no_nat),
        ("lambda0".to_string(), lambda0),
        ("standard".to_string(), base.clone()),
    ]
}

pub struct AblationOutcome {
    pub report: EvalReport,
    pub histories: Vec<(String, Vec<EpochRow>)>,
    pub estimators: TrainedEstimators,
    pub outcomes: Vec<(String, TrainOutcome)>,
}

/// Full ablation pipeline: pretrain the baseline, train the estimator
/// pair against it, train every defense variant with shared seed paths
/// and the same frozen estimators, then evaluate everything under one
/// suite. The baseline serves as both pretraining stage and the
/// "standard" variant, so its row is the plain adversarial-training
/// evaluation by construction.
pub fn ablation_run(
    base: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    seeds: &SeedTree,
) -> Result<AblationOutcome> {
    let standard = train_standard_at(base, train, test, seeds)?;
    let attack = base.train_attack()?;
    let estimators = train_estimators(&standard.checkpoint.model, train, &attack, base, seeds)?;

    let variants = ablation_variants(base);
    let defense_variants: Vec<&(String, RunConfig)> = variants
        .iter()
        .filter(|(name, _)| name != "standard")
        .collect();
    let run_one = |(name, cfg): &&(String, RunConfig)| -> Result<(String, TrainOutcome)> {
        let out = train_namid(
            cfg,
            train,
            test,
            &estimators.natural,
            &estimators.adversarial,
            seeds,
        )?;
        Ok((name.clone(), out))
    };
    #[cfg(feature = "parallel")]
    let mut outcomes: Vec<(String, TrainOutcome)> = {
        use rayon::prelude::*;
        defense_variants
            .par_iter()
            .map(run_one)
            .collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let mut outcomes: Vec<(String, TrainOutcome)> = defense_variants
        .iter()
        .map(run_one)
        .collect::<Result<Vec<_>>>()?;
    outcomes.push(("standard".to_string(), standard));

    let suite = standard_suite(base)?;
    let mut report = EvalReport::default();
    let mut histories = Vec::with_capacity(outcomes.len());
    for (name, outcome) in &outcomes {
        let part = evaluate(&outcome.checkpoint.model, name, test, &suite, seeds)?;
        report.rows.extend(part.rows);
        histories.push((name.clone(), outcome.history.clone()));
    }
    report.validate()?;
    Ok(AblationOutcome {
        report,
        histories,
        estimators,
        outcomes,
    })
}
