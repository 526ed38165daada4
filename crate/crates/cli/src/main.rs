//! Command-line front end. Every subcommand resolves a config and a
//! root seed the same way, emits RFC 4180 CSV next to any containers
//! it writes, and exits nonzero on the first error. Outputs are pure
//! functions of (config, seed, input files), so rerunning a command
//! reproduces its files byte for byte.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use namid_core::attack::{check_batch_constraints, pgd, Norm};
use namid_core::config::{resolve_root_seed, Objective, RunConfig, RunManifest};
use namid_core::container;
use namid_core::datasets::DatasetSplit;
use namid_core::defense::{
    load_checkpoint, resume_training, save_checkpoint, train_namid, train_standard_at, Checkpoint,
    EpochRow, TrainOutcome,
};
use namid_core::harness::{
    ablation_run, black_box_eval, evaluate, mi_summary, proof_of_concept, separation_report,
    standard_suite, train_probe_estimator,
};
use namid_core::info::theorem_sweep;
use namid_core::mi::{
    gaussian_benchmark, load_estimator, load_estimator_pair, save_estimator_pair,
    train_estimators, Estimator,
};
use namid_core::plot::emit_plots;
use namid_core::report::{
    csv_string, read_csv, write_csv, CsvRecord, EvalReport, PocRow, SeparationRow, SweepRow,
};
use namid_core::rng::SeedTree;
use namid_core::tensor::nn::Mlp;
use std::path::{Path, PathBuf};
use std::{fs, process};

/// Identity-check and triangle tolerances for `verify-theorem1`; the
/// sweep fails the run when either is exceeded.
const RESIDUAL_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(
    name = "namid",
    version,
    about = "MI-disentangled adversarial training: data, attacks, estimators, defense, reports"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Root seed; overrides NAMID_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the interaction-information identity on random discrete
    /// joints and report the worst case.
    VerifyTheorem1 {
        #[command(flatten)]
        common: Common,
        /// Random joint distributions to test.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Largest alphabet size per variable.
        #[arg(long, default_value_t = 4)]
        max_alphabet: usize,
    },
    /// Train the neural MI bound on correlated Gaussians and compare
    /// against the closed form.
    MiGaussBench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated correlation coefficients.
        #[arg(long, default_value = "0,0.5,0.9")]
        rho: String,
        /// Sample-pair count per coefficient.
        #[arg(long, default_value_t = 20000)]
        n: usize,
    },
    /// Generate the train/test splits and write them as containers.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Adversarial-training baseline; also the pretraining stage for
    /// the estimators.
    TrainAt {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.nmid/test.nmid; generated in memory
        /// when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the natural/adversarial estimator pair against a frozen
    /// checkpoint.
    TrainEstimators {
        #[command(flatten)]
        common: Common,
        /// Classifier checkpoint (default <out>/at.nmid).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Estimator objective: eq4 (plain maximization) or eq5
        /// (separation).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train the full defense with a frozen estimator pair.
    TrainNamid {
        #[command(flatten)]
        common: Common,
        /// Estimator pair container (default <out>/estimators.nmid).
        #[arg(long)]
        estimators: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from; must match config and seed.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Attack a checkpoint on the test split and write the
    /// adversarial batch.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Budget norm: linf or l2.
        #[arg(long)]
        norm: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// White-box accuracy table under the standard attack suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Estimator pair; adds MI summary rows when given.
        #[arg(long)]
        estimators: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Transfer accuracy table: attacks crafted on a surrogate, scored
    /// on the target.
    EvalBlackbox {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Surrogate checkpoint; trained fresh on the surrogate
        /// architecture when omitted.
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Three-curve MI probe over attack iteration counts.
    PocFig2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Natural-kind estimator container; trained fresh when
        /// omitted.
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Estimator-separation comparison: eq4 and eq5 pairs trained on
    /// shared seeds, gaps reported side by side.
    SeparationFig4 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Full ablation pipeline: baseline, estimators, every defense
    /// variant, one shared evaluation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render SVG charts from the CSV files already in the output
    /// directory.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(err) = run(cli.cmd) {
        eprintln!("error: {err:#}");
        process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::VerifyTheorem1 {
            common,
            trials,
            max_alphabet,
        } => cmd_verify_theorem1(common, trials, max_alphabet),
        Cmd::MiGaussBench { common, rho, n } => cmd_mi_gauss_bench(common, &rho, n),
        Cmd::GenData { common } => cmd_gen_data(common),
        Cmd::TrainAt { common, data } => cmd_train_at(common, data),
        Cmd::TrainEstimators {
            common,
            model,
            data,
            mode,
        } => cmd_train_estimators(common, model, data, mode),
        Cmd::TrainNamid {
            common,
            estimators,
            data,
            resume,
        } => cmd_train_namid(common, estimators, data, resume),
        Cmd::Attack {
            common,
            model,
            data,
            norm,
            eps,
            steps,
        } => cmd_attack(common, model, data, norm, eps, steps),
        Cmd::Eval {
            common,
            model,
            estimators,
            data,
        } => cmd_eval(common, model, estimators, data),
        Cmd::EvalBlackbox {
            common,
            model,
            surrogate,
            data,
        } => cmd_eval_blackbox(common, model, surrogate, data),
        Cmd::PocFig2 {
            common,
            model,
            estimator,
            data,
        } => cmd_poc_fig2(common, model, estimator, data),
        Cmd::SeparationFig4 {
            common,
            model,
            data,
        } => cmd_separation_fig4(common, model, data),
        Cmd::Ablate { common, data } => cmd_ablate(common, data),
        Cmd::Plot { common } => cmd_plot(common),
    }
}

// Shared plumbing.

/// Config + seed resolution and output-directory creation, identical
/// for every subcommand.
fn setup(common: &Common) -> Result<(RunConfig, SeedTree)> {
    let cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let root = resolve_root_seed(common.seed, &cfg)?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok((cfg, SeedTree::new(root)))
}

/// Read an input file, recording its bytes in the manifest so emitted
/// artifacts identify exactly what went in.
fn record_input(manifest: &mut RunManifest, name: &str, path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.add_input(name, &bytes);
    Ok(())
}

fn load_split_file(path: &Path) -> Result<DatasetSplit> {
    let entries = container::load_container(path)
        .with_context(|| format!("loading {}", path.display()))?;
    container::read_manifest(&entries)?;
    Ok(container::read_split(&entries)?)
}

/// Data for a run: from `--data` when given, otherwise regenerated
/// from the config on the fixed data seed paths.
fn obtain_data(
    cfg: &RunConfig,
    seeds: &SeedTree,
    data: Option<&PathBuf>,
    manifest: &mut RunManifest,
) -> Result<(DatasetSplit, DatasetSplit)> {
    match data {
        Some(dir) => {
            let train_path = dir.join("train.nmid");
            let test_path = dir.join("test.nmid");
            record_input(manifest, "train.nmid", &train_path)?;
            record_input(manifest, "test.nmid", &test_path)?;
            Ok((load_split_file(&train_path)?, load_split_file(&test_path)?))
        }
        None => Ok((
            cfg.generate_split(cfg.train_n, seeds.derive("data/train"))?,
            cfg.generate_split(cfg.test_n, seeds.derive("data/test"))?,
        )),
    }
}

fn load_model(manifest: &mut RunManifest, path: &Path) -> Result<Checkpoint> {
    record_input(manifest, "model", path)?;
    let (ckpt, _) = load_checkpoint(path)?;
    Ok(ckpt)
}

fn load_pair(manifest: &mut RunManifest, path: &Path) -> Result<(Estimator, Estimator)> {
    record_input(manifest, "estimators", path)?;
    let (natural, adversarial, _) = load_estimator_pair(path)?;
    Ok((natural, adversarial))
}

fn save_split(path: &Path, split: &DatasetSplit, manifest: &RunManifest) -> Result<()> {
    let mut entries = container::manifest_entries(manifest);
    entries.extend(container::split_entries(split));
    container::save_container(path, &entries)?;
    Ok(())
}

fn write_history(path: &Path, history: &[EpochRow]) -> Result<()> {
    write_csv(path, history)?;
    Ok(())
}

fn final_metrics(outcome: &TrainOutcome) -> String {
    match outcome.history.last() {
        Some(row) => format!(
            "epoch {}: natural {:.2}% adversarial {:.2}%",
            row.epoch,
            100.0 * row.natural_acc,
            100.0 * row.adversarial_acc
        ),
        None => "no epochs run".to_string(),
    }
}

fn print_rows<R: CsvRecord>(rows: &[R]) -> Result<()> {
    print!("{}", csv_string(rows)?);
    Ok(())
}

// Subcommands.

fn cmd_verify_theorem1(common: Common, trials: usize, max_alphabet: usize) -> Result<()> {
    let (_, seeds) = setup(&common)?;
    let outcome = theorem_sweep(trials, max_alphabet, seeds.derive("theorem1"))?;
    let row = SweepRow {
        trials: outcome.trials,
        max_residual: outcome.max_residual,
        max_triangle_violation: outcome.max_triangle_violation,
        worst_trial: outcome.worst_trial,
    };
    write_csv(&common.out.join("theorem1.csv"), &[row.clone()])?;
    write_csv(&common.out.join("theorem1_worst.csv"), &[outcome.worst.clone()])?;
    print_rows(&[row])?;
    print_rows(&[outcome.worst])?;
    if outcome.max_residual > RESIDUAL_TOL {
        bail!(
            "decomposition identity violated: max residual {} over {} trials",
            outcome.max_residual,
            trials
        );
    }
    if outcome.max_triangle_violation > RESIDUAL_TOL {
        bail!(
            "lower-bound triangle violated by {}",
            outcome.max_triangle_violation
        );
    }
    Ok(())
}

fn cmd_mi_gauss_bench(common: Common, rho: &str, n: usize) -> Result<()> {
    let (_, seeds) = setup(&common)?;
    let mut rows = Vec::new();
    for (i, token) in rho.split(',').enumerate() {
        let r: f64 = token
            .trim()
            .parse()
            .with_context(|| format!("bad correlation `{token}`"))?;
        rows.push(gaussian_benchmark(r, n, seeds.derive(&format!("gauss/{i}")))?);
    }
    write_csv(&common.out.join("gauss.csv"), &rows)?;
    print_rows(&rows)?;
    Ok(())
}

/// Per-split summary row for `gen-data`.
#[derive(Debug, Clone, PartialEq)]
struct SplitRow {
    split: String,
    dataset: String,
    samples: usize,
    dim: usize,
    classes: usize,
    seed: u64,
}

impl CsvRecord for SplitRow {
    const HEADER: &'static [&'static str] =
        &["split", "dataset", "samples", "dim", "classes", "seed"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.split.clone(),
            self.dataset.clone(),
            format!("{}", self.samples),
            format!("{}", self.dim),
            format!("{}", self.classes),
            format!("{}", self.seed),
        ]
    }

    fn parse(fields: &[String]) -> namid_core::Result<Self> {
        Ok(SplitRow {
            split: fields[0].clone(),
            dataset: fields[1].clone(),
            samples: fields[2].parse().map_err(|_| bad_field("samples"))?,
            dim: fields[3].parse().map_err(|_| bad_field("dim"))?,
            classes: fields[4].parse().map_err(|_| bad_field("classes"))?,
            seed: fields[5].parse().map_err(|_| bad_field("seed"))?,
        })
    }
}

fn bad_field(name: &str) -> namid_core::Error {
    namid_core::Error::Input(format!("bad {name} field"))
}

fn cmd_gen_data(common: Common) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let manifest = RunManifest::new(&cfg, seeds.root());
    let train = cfg.generate_split(cfg.train_n, seeds.derive("data/train"))?;
    let test = cfg.generate_split(cfg.test_n, seeds.derive("data/test"))?;
    save_split(&common.out.join("train.nmid"), &train, &manifest)?;
    save_split(&common.out.join("test.nmid"), &test, &manifest)?;
    let rows = [&train, &test]
        .iter()
        .zip(["train", "test"])
        .map(|(split, label)| SplitRow {
            split: label.to_string(),
            dataset: split.name.clone(),
            samples: split.len(),
            dim: split.dim(),
            classes: split.classes,
            seed: split.seed,
        })
        .collect::<Vec<_>>();
    write_csv(&common.out.join("data.csv"), &rows)?;
    print_rows(&rows)?;
    Ok(())
}

fn cmd_train_at(common: Common, data: Option<PathBuf>) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let (train, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let outcome = train_standard_at(&cfg, &train, &test, &seeds)?;
    save_checkpoint(&common.out.join("at.nmid"), &outcome.checkpoint, &manifest)?;
    write_history(&common.out.join("at_history.csv"), &outcome.history)?;
    println!("{}", final_metrics(&outcome));
    Ok(())
}

fn cmd_train_estimators(
    common: Common,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    mode: Option<String>,
) -> Result<()> {
    let (mut cfg, seeds) = setup(&common)?;
    if let Some(token) = mode {
        cfg.est_mode = token.parse::<Objective>()?;
    }
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let model_path = model.unwrap_or_else(|| common.out.join("at.nmid"));
    let ckpt = load_model(&mut manifest, &model_path)?;
    let (train, _) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let attack = cfg.train_attack()?;
    let trained = train_estimators(&ckpt.model, &train, &attack, &cfg, &seeds)?;
    save_estimator_pair(
        &common.out.join("estimators.nmid"),
        &trained.natural,
        &trained.adversarial,
        &manifest,
    )?;
    write_csv(&common.out.join("est_history.csv"), &trained.history)?;
    print_rows(&trained.history)?;
    Ok(())
}

fn cmd_train_namid(
    common: Common,
    estimators: Option<PathBuf>,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let pair_path = estimators.unwrap_or_else(|| common.out.join("estimators.nmid"));
    let (natural, adversarial) = load_pair(&mut manifest, &pair_path)?;
    let (train, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let outcome = match resume {
        Some(path) => {
            record_input(&mut manifest, "resume", &path)?;
            let (ckpt, _) = load_checkpoint(&path)?;
            resume_training(
                &cfg,
                &train,
                &test,
                Some((&natural, &adversarial)),
                &seeds,
                ckpt,
            )?
        }
        None => train_namid(&cfg, &train, &test, &natural, &adversarial, &seeds)?,
    };
    save_checkpoint(
        &common.out.join("namid.nmid"),
        &outcome.checkpoint,
        &manifest,
    )?;
    write_history(&common.out.join("namid_history.csv"), &outcome.history)?;
    println!("{}", final_metrics(&outcome));
    Ok(())
}

fn cmd_attack(
    common: Common,
    model: PathBuf,
    data: Option<PathBuf>,
    norm: Option<String>,
    eps: Option<f64>,
    steps: Option<usize>,
) -> Result<()> {
    let (mut cfg, seeds) = setup(&common)?;
    // Overrides are folded into the config so the manifest records the
    // attack actually run.
    if let Some(token) = norm {
        cfg.attack_norm = token.parse::<Norm>()?;
    }
    if let Some(e) = eps {
        cfg.eps = e;
    }
    if let Some(s) = steps {
        cfg.eval_steps = s;
    }
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let ckpt = load_model(&mut manifest, &model)?;
    let (_, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let spec = cfg.eval_attack()?;
    let batch = pgd(
        &ckpt.model,
        &test.inputs,
        &test.labels,
        &spec,
        seeds.derive("attack"),
    )?;

    let logits = ckpt.model.forward(batch.adversarial())?;
    let misled = (0..logits.rows())
        .filter(|&i| {
            let row = &logits.data()[i * logits.cols()..(i + 1) * logits.cols()];
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            argmax != test.labels[i]
        })
        .count();
    let dim = batch.noise().cols();
    let mut max_linf: f64 = 0.0;
    let mut max_l2: f64 = 0.0;
    for i in 0..batch.noise().rows() {
        let row = &batch.noise().data()[i * dim..(i + 1) * dim];
        max_linf = max_linf.max(row.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        max_l2 = max_l2.max(row.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let row = namid_core::report::AttackRow {
        attack: if spec.steps == 1 { "fgsm" } else { "pgd" }.to_string(),
        norm: spec.norm.token().to_string(),
        eps: spec.eps,
        steps: spec.steps,
        samples: batch.len(),
        misled,
        max_linf,
        max_l2,
        in_range: check_batch_constraints(&batch, spec.norm, spec.eps).is_ok(),
    };

    let mut entries = container::manifest_entries(&manifest);
    entries.extend(container::batch_entries(&batch));
    container::save_container(&common.out.join("adversarial.nmid"), &entries)?;
    write_csv(&common.out.join("attack.csv"), &[row.clone()])?;
    print_rows(&[row])?;
    Ok(())
}

fn defense_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string())
}

fn cmd_eval(
    common: Common,
    model: PathBuf,
    estimators: Option<PathBuf>,
    data: Option<PathBuf>,
) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let ckpt = load_model(&mut manifest, &model)?;
    let (_, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let suite = standard_suite(&cfg)?;
    let mut report = evaluate(&ckpt.model, &defense_label(&model), &test, &suite, &seeds)?;
    if let Some(pair_path) = estimators {
        let (natural, adversarial) = load_pair(&mut manifest, &pair_path)?;
        report.mi_rows = mi_summary(&ckpt.model, &natural, &adversarial, &test, &cfg, &seeds)?;
        write_csv(&common.out.join("mi.csv"), &report.mi_rows)?;
    }
    write_csv(&common.out.join("eval.csv"), &report.rows)?;
    print_rows(&report.rows)?;
    Ok(())
}

fn cmd_eval_blackbox(
    common: Common,
    model: PathBuf,
    surrogate: Option<PathBuf>,
    data: Option<PathBuf>,
) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let target = load_model(&mut manifest, &model)?;
    let (train, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let surrogate_model: Mlp = match surrogate {
        Some(path) => load_model(&mut manifest, &path)?.model,
        None => {
            // Independent surrogate: the surrogate architecture trained
            // on its own seed subtree, plain adversarial training.
            let mut surr_cfg = cfg.clone();
            surr_cfg.hidden = cfg.surrogate_hidden.clone();
            let surr_seeds = SeedTree::new(seeds.derive("surrogate"));
            train_standard_at(&surr_cfg, &train, &test, &surr_seeds)?
                .checkpoint
                .model
        }
    };
    let suite = standard_suite(&cfg)?;
    let report = black_box_eval(
        &target.model,
        &surrogate_model,
        &defense_label(&model),
        &test,
        &suite,
        &seeds,
    )?;
    write_csv(&common.out.join("eval_blackbox.csv"), &report.rows)?;
    print_rows(&report.rows)?;
    Ok(())
}

fn cmd_poc_fig2(
    common: Common,
    model: PathBuf,
    estimator: Option<PathBuf>,
    data: Option<PathBuf>,
) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let ckpt = load_model(&mut manifest, &model)?;
    let (train, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let probe = match estimator {
        Some(path) => {
            record_input(&mut manifest, "estimator", &path)?;
            load_estimator(&path)?.0
        }
        None => train_probe_estimator(&ckpt.model, &train, &cfg, &seeds)?,
    };
    let rows = proof_of_concept(&ckpt.model, &probe, &test, &cfg, &seeds)?;
    write_csv(&common.out.join("poc.csv"), &rows)?;
    print_rows(&rows)?;
    Ok(())
}

fn cmd_separation_fig4(common: Common, model: PathBuf, data: Option<PathBuf>) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let ckpt = load_model(&mut manifest, &model)?;
    let (train, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let attack = cfg.train_attack()?;
    // Both pairs share every seed path; only the objective differs.
    let mut mimax_cfg = cfg.clone();
    mimax_cfg.est_mode = Objective::MiMax;
    let mut sep_cfg = cfg.clone();
    sep_cfg.est_mode = Objective::Separation;
    let mimax = train_estimators(&ckpt.model, &train, &attack, &mimax_cfg, &seeds)?;
    let separation = train_estimators(&ckpt.model, &train, &attack, &sep_cfg, &seeds)?;
    let rows = separation_report(
        &ckpt.model,
        (&mimax.natural, &mimax.adversarial),
        (&separation.natural, &separation.adversarial),
        &test,
        &cfg,
        &seeds,
    )?;
    write_csv(&common.out.join("separation.csv"), &rows)?;
    print_rows(&rows)?;
    Ok(())
}

fn cmd_ablate(common: Common, data: Option<PathBuf>) -> Result<()> {
    let (cfg, seeds) = setup(&common)?;
    let mut manifest = RunManifest::new(&cfg, seeds.root());
    let (train, test) = obtain_data(&cfg, &seeds, data.as_ref(), &mut manifest)?;
    let outcome = ablation_run(&cfg, &train, &test, &seeds)?;
    write_csv(&common.out.join("ablation.csv"), &outcome.report.rows)?;
    write_csv(
        &common.out.join("est_history.csv"),
        &outcome.estimators.history,
    )?;
    for (name, history) in &outcome.histories {
        write_history(&common.out.join(format!("history_{name}.csv")), history)?;
    }
    print_rows(&outcome.report.rows)?;
    Ok(())
}

fn read_optional<R: CsvRecord>(path: &Path) -> Result<Vec<R>> {
    if path.exists() {
        Ok(read_csv(path)?)
    } else {
        Ok(Vec::new())
    }
}

/// Emitted-file row for `plot`.
#[derive(Debug, Clone, PartialEq)]
struct PlotRow {
    file: String,
    bytes: usize,
}

impl CsvRecord for PlotRow {
    const HEADER: &'static [&'static str] = &["file", "bytes"];

    fn fields(&self) -> Vec<String> {
        vec![self.file.clone(), format!("{}", self.bytes)]
    }

    fn parse(fields: &[String]) -> namid_core::Result<Self> {
        Ok(PlotRow {
            file: fields[0].clone(),
            bytes: fields[1].parse().map_err(|_| bad_field("bytes"))?,
        })
    }
}

fn cmd_plot(common: Common) -> Result<()> {
    let (_, _) = setup(&common)?;
    let report = EvalReport {
        rows: read_optional(&common.out.join("eval.csv"))?,
        mi_rows: read_optional(&common.out.join("mi.csv"))?,
    };
    let poc: Vec<PocRow> = read_optional(&common.out.join("poc.csv"))?;
    let separation: Vec<SeparationRow> = read_optional(&common.out.join("separation.csv"))?;
    let written = emit_plots(&common.out, &report, &poc, &separation)?;
    let rows = written
        .iter()
        .map(|path| {
            let bytes = fs::metadata(path)?.len() as usize;
            Ok(PlotRow {
                file: path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&common.out.join("plots.csv"), &rows)?;
    print_rows(&rows)?;
    Ok(())
}
