//! Flat key=value run configuration and the run manifest.
//!
//! One config type drives every pipeline so variants are plain key
//! overrides. Parsing is strict: unknown keys, type mismatches, and
//! range violations are errors carrying the key and line number.
//! Serialization is canonical (fixed key order), which makes
//! serialize(parse(text)) stable and manifests diffable.

use crate::attack::{AttackSpec, Norm};
use crate::datasets::{generate_synthetic_with, DatasetKind, DatasetSplit, SynthOptions};
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

/// Donsker-Varadhan or Jensen-Shannon scoring for the neural MI bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Dv,
    Jsd,
}

impl Bound {
    pub fn token(&self) -> &'static str {
        match self {
            Bound::Dv => "dv",
            Bound::Jsd => "jsd",
        }
    }
}

impl std::str::FromStr for Bound {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dv" => Ok(Bound::Dv),
            "jsd" => Ok(Bound::Jsd),
            other => Err(Error::Input(format!("unknown bound `{other}`"))),
        }
    }
}

/// Estimator training objective: `eq4` maximizes the two MI bounds
/// directly, `eq5` maximizes the natural/adversarial separation gaps.
/// The tokens are the CLI contract for `--mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    MiMax,
    Separation,
}

impl Objective {
    pub fn token(&self) -> &'static str {
        match self {
            Objective::MiMax => "eq4",
            Objective::Separation => "eq5",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq4" => Ok(Objective::MiMax),
            "eq5" => Ok(Objective::Separation),
            other => Err(Error::Input(format!("unknown estimator mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Data.
    pub dataset: DatasetKind,
    pub train_n: usize,
    pub test_n: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub class_sep: f64,
    // Classifier and surrogate architecture (hidden widths).
    pub hidden: Vec<usize>,
    pub surrogate_hidden: Vec<usize>,
    // Optimizer.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    // Training-time attack.
    pub attack_norm: Norm,
    pub eps: f64,
    pub attack_steps: usize,
    /// 0 means the eps/4 convention.
    pub attack_step: f64,
    pub random_start: bool,
    // Evaluation-time attack.
    pub eval_steps: usize,
    pub eval_random_start: bool,
    // Defense loss.
    pub alpha: f64,
    pub lambda: f64,
    pub drop_natural_mi: bool,
    pub drop_adversarial_mi: bool,
    pub zero_lambda: bool,
    // Estimators.
    pub est_patches: usize,
    pub est_enc_hidden: usize,
    pub est_feat_dim: usize,
    pub est_score_hidden: usize,
    pub est_lr: f64,
    pub est_epochs: usize,
    pub est_batch: usize,
    pub est_bound: Bound,
    pub est_mode: Objective,
    pub est_ema: f64,
    // Misc.
    pub seed: u64,
    pub poc_iters: Vec<usize>,
}

// Budget/noise calibration, per coordinate tier. Robust tier: margin
// class_sep/2 = 0.15 exceeds eps = 0.1, so a fit on it survives the
// attack, and noise_sigma 0.12 keeps a visible fraction of samples
// within reach of the shifted boundary (the attack matters but does
// not win). Brittle tier: the whole class gap brittle_shift = 0.08
// sits inside eps, and brittle_sigma 0.02 makes it the strongest
// natural predictor, so a fit without an adversary leans on it and the
// attack flips it decisively.
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::TwoGaussians,
            train_n: 2000,
            test_n: 2000,
            dim: 8,
            noise_sigma: 0.12,
            class_sep: 0.3,
            brittle_shift: 0.08,
            brittle_sigma: 0.02,
            hidden: vec![32, 32],
            surrogate_hidden: vec![24, 24],
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            epochs: 30,
            batch_size: 128,
            attack_norm: Norm::LInf,
            eps: 0.1,
            attack_steps: 10,
            attack_step: 0.0,
            random_start: true,
            eval_steps: 40,
            eval_random_start: false,
            // Dependence-term weight. On this task weights much past 1
            // let the term dominate early batches and collapse the
            // logit map before classification takes hold; 3/8 keeps
            // natural accuracy intact and still beats the plain
            // adversarial baseline.
            alpha: 0.375,
            lambda: 0.1,
            drop_natural_mi: false,
            drop_adversarial_mi: false,
            zero_lambda: false,
            est_patches: 4,
            est_enc_hidden: 32,
            est_feat_dim: 8,
            est_score_hidden: 32,
            est_lr: 0.02,
            est_epochs: 40,
            est_batch: 128,
            est_bound: Bound::Dv,
            est_mode: Objective::Separation,
            est_ema: 0.9,
            seed: 0,
            poc_iters: vec![1, 2, 5, 10, 20, 40],
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, line: usize, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(key, line, format!("cannot parse `{value}`")))
}

fn parse_list(key: &str, line: usize, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(key, line, format!("bad list entry `{tok}`")))
        })
        .collect()
}

fn parse_bool(key: &str, line: usize, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(key, line, format!("expected true/false, got `{other}`"))),
    }
}

impl RunConfig {
    /// Parse key=value text. Later lines override earlier ones; `#`
    /// starts a comment; empty file means all defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| {
                Error::config(stripped, line, "expected key=value")
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "dataset" => {
                    cfg.dataset = value
                        .parse()
                        .map_err(|_| Error::config(key, line, format!("unknown dataset `{value}`")))?
                }
                "train_n" => cfg.train_n = parse_scalar(key, line, value)?,
                "test_n" => cfg.test_n = parse_scalar(key, line, value)?,
                "dim" => cfg.dim = parse_scalar(key, line, value)?,
                "noise_sigma" => cfg.noise_sigma = parse_scalar(key, line, value)?,
                "class_sep" => cfg.class_sep = parse_scalar(key, line, value)?,
                "hidden" => cfg.hidden = parse_list(key, line, value)?,
                "surrogate_hidden" => cfg.surrogate_hidden = parse_list(key, line, value)?,
                "lr" => cfg.lr = parse_scalar(key, line, value)?,
                "momentum" => cfg.momentum = parse_scalar(key, line, value)?,
                "weight_decay" => cfg.weight_decay = parse_scalar(key, line, value)?,
                "epochs" => cfg.epochs = parse_scalar(key, line, value)?,
                "batch_size" => cfg.batch_size = parse_scalar(key, line, value)?,
                "attack_norm" => {
                    cfg.attack_norm = value
                        .parse()
                        .map_err(|_| Error::config(key, line, format!("unknown norm `{value}`")))?
                }
                "eps" => cfg.eps = parse_scalar(key, line, value)?,
                "attack_steps" => cfg.attack_steps = parse_scalar(key, line, value)?,
                "attack_step" => cfg.attack_step = parse_scalar(key, line, value)?,
                "random_start" => cfg.random_start = parse_bool(key, line, value)?,
                "eval_steps" => cfg.eval_steps = parse_scalar(key, line, value)?,
                "eval_random_start" => cfg.eval_random_start = parse_bool(key, line, value)?,
                "alpha" => cfg.alpha = parse_scalar(key, line, value)?,
                "lambda" => cfg.lambda = parse_scalar(key, line, value)?,
                "drop_natural_mi" => cfg.drop_natural_mi = parse_bool(key, line, value)?,
                "drop_adversarial_mi" => cfg.drop_adversarial_mi = parse_bool(key, line, value)?,
                "zero_lambda" => cfg.zero_lambda = parse_bool(key, line, value)?,
                "est_patches" => cfg.est_patches = parse_scalar(key, line, value)?,
                "est_enc_hidden" => cfg.est_enc_hidden = parse_scalar(key, line, value)?,
                "est_feat_dim" => cfg.est_feat_dim = parse_scalar(key, line, value)?,
                "est_score_hidden" => cfg.est_score_hidden = parse_scalar(key, line, value)?,
                "est_lr" => cfg.est_lr = parse_scalar(key, line, value)?,
                "est_epochs" => cfg.est_epochs = parse_scalar(key, line, value)?,
                "est_batch" => cfg.est_batch = parse_scalar(key, line, value)?,
                "est_bound" => {
                    cfg.est_bound = value
                        .parse()
                        .map_err(|_| Error::config(key, line, format!("unknown bound `{value}`")))?
                }
                "est_mode" => {
                    cfg.est_mode = value
                        .parse()
                        .map_err(|_| Error::config(key, line, format!("unknown mode `{value}`")))?
                }
                "est_ema" => cfg.est_ema = parse_scalar(key, line, value)?,
                "seed" => cfg.seed = parse_scalar(key, line, value)?,
                "poc_iters" => cfg.poc_iters = parse_list(key, line, value)?,
                unknown => {
                    return Err(Error::config(unknown, line, "unknown key"));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, 0, msg))
            }
        };
        check(self.alpha >= 0.0, "alpha", "must be >= 0")?;
        check(self.lambda >= 0.0, "lambda", "must be >= 0")?;
        check(self.eps >= 0.0 && self.eps.is_finite(), "eps", "must be >= 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must be in [0, 1)")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be > 0")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(self.est_batch >= 2, "est_batch", "needs >= 2 for marginal pairing")?;
        check(self.attack_steps >= 1, "attack_steps", "must be >= 1")?;
        check(self.eval_steps >= 1, "eval_steps", "must be >= 1")?;
        check(self.attack_step >= 0.0, "attack_step", "must be >= 0 (0 = eps/4)")?;
        check(self.dim >= 2, "dim", "must be >= 2")?;
        check(self.est_patches >= 1, "est_patches", "must be >= 1")?;
        check(
            self.dim % self.est_patches == 0,
            "est_patches",
            "must divide dim evenly (contiguous equal blocks)",
        )?;
        check(self.est_feat_dim >= 1, "est_feat_dim", "must be >= 1")?;
        check((0.0..1.0).contains(&self.est_ema), "est_ema", "must be in [0, 1)")?;
        check(self.est_lr > 0.0 && self.est_lr.is_finite(), "est_lr", "must be > 0")?;
        check(!self.poc_iters.is_empty(), "poc_iters", "must be nonempty")?;
        check(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma",
            "must be >= 0",
        )?;
        Ok(())
    }

    /// Canonical serialization: every key, fixed order, parseable back
    /// into an equal config.
    pub fn serialize(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        push("dataset", self.dataset.to_string());
        push("train_n", self.train_n.to_string());
        push("test_n", self.test_n.to_string());
        push("dim", self.dim.to_string());
        push("noise_sigma", self.noise_sigma.to_string());
        push("class_sep", self.class_sep.to_string());
        push("hidden", list(&self.hidden));
        push("surrogate_hidden", list(&self.surrogate_hidden));
        push("lr", self.lr.to_string());
        push("momentum", self.momentum.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("attack_norm", self.attack_norm.to_string());
        push("eps", self.eps.to_string());
        push("attack_steps", self.attack_steps.to_string());
        push("attack_step", self.attack_step.to_string());
        push("random_start", self.random_start.to_string());
        push("eval_steps", self.eval_steps.to_string());
        push("eval_random_start", self.eval_random_start.to_string());
        push("alpha", self.alpha.to_string());
        push("lambda", self.lambda.to_string());
        push("drop_natural_mi", self.drop_natural_mi.to_string());
        push("drop_adversarial_mi", self.drop_adversarial_mi.to_string());
        push("zero_lambda", self.zero_lambda.to_string());
        push("est_patches", self.est_patches.to_string());
        push("est_enc_hidden", self.est_enc_hidden.to_string());
        push("est_feat_dim", self.est_feat_dim.to_string());
        push("est_score_hidden", self.est_score_hidden.to_string());
        push("est_lr", self.est_lr.to_string());
        push("est_epochs", self.est_epochs.to_string());
        push("est_batch", self.est_batch.to_string());
        push("est_bound", self.est_bound.token().to_string());
        push("est_mode", self.est_mode.token().to_string());
        push("est_ema", self.est_ema.to_string());
        push("seed", self.seed.to_string());
        push("poc_iters", list(&self.poc_iters));
        s
    }

    /// Training-time attack spec (PGD-k, eps/4 default step).
    pub fn train_attack(&self) -> Result<AttackSpec> {
        let step = if self.attack_step > 0.0 {
            Some(self.attack_step)
        } else {
            None
        };
        AttackSpec::new(
            self.attack_norm,
            self.eps,
            self.attack_steps,
            step,
            self.random_start,
        )
    }

    /// Evaluation attack: same norm and budget, more iterations, random
    /// start off by default for reproducible reports.
    pub fn eval_attack(&self) -> Result<AttackSpec> {
        let step = if self.attack_step > 0.0 {
            Some(self.attack_step)
        } else {
            None
        };
        AttackSpec::new(
            self.attack_norm,
            self.eps,
            self.eval_steps,
            step,
            self.eval_random_start,
        )
    }

    /// SHA-256 of the canonical serialization, hex.
    pub fn hash_hex(&self) -> String {
        hex(&Sha256::digest(self.serialize().as_bytes()))
    }

    /// True when the MI term is entirely inert: standard adversarial
    /// training and NAMID coincide exactly in that case.
    pub fn mi_term_disabled(&self) -> bool {
        self.alpha == 0.0
            || (self.drop_natural_mi && self.drop_adversarial_mi && self.zero_lambda)
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            sigma: self.noise_sigma,
            separation: self.class_sep,
        }
    }

    /// Generate a split with this config's dataset shape knobs.
    pub fn generate_split(&self, n: usize, seed: u64) -> Result<DatasetSplit> {
        generate_synthetic_with(self.dataset, n, self.dim, seed, self.synth_options())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Root seed precedence: explicit CLI value, then the NAMID_SEED
/// environment variable, then the config key.
pub fn resolve_root_seed(cli_seed: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = cli_seed {
        return Ok(s);
    }
    match std::env::var("NAMID_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Input(format!("NAMID_SEED `{v}` is not a u64"))),
        Err(_) => Ok(cfg.seed),
    }
}

/// Everything needed to regenerate an output byte-for-byte: tool
/// version, root seed, canonical config, and hashes of input artifacts.
/// The timestamp field is fixed at "0"; recording wall-clock time would
/// break the byte-identical-rerun guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub root_seed: u64,
    pub timestamp: String,
    pub inputs: Vec<(String, String)>,
    pub config_text: String,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, root_seed: u64) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            root_seed,
            timestamp: "0".to_string(),
            inputs: Vec::new(),
            config_text: cfg.serialize(),
        }
    }

    /// Record an input artifact by name and content hash.
    pub fn add_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs
            .push((name.to_string(), hex(&Sha256::digest(bytes))));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("manifest_version=1\n");
        s.push_str(&format!("tool_version={}\n", self.tool_version));
        s.push_str(&format!("root_seed={}\n", self.root_seed));
        s.push_str(&format!("timestamp={}\n", self.timestamp));
        for (name, hash) in &self.inputs {
            s.push_str(&format!("input={name}:{hash}\n"));
        }
        s.push_str("config_begin\n");
        s.push_str(&self.config_text);
        s.push_str("config_end\n");
        s
    }

    pub fn parse(text: &str) -> Result<RunManifest> {
        let mut tool_version = None;
        let mut root_seed = None;
        let mut timestamp = None;
        let mut inputs = Vec::new();
        let mut config_text = String::new();
        let mut in_config = false;
        let mut saw_config = false;
        for line in text.lines() {
            if in_config {
                if line == "config_end" {
                    in_config = false;
                } else {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
                continue;
            }
            match line.split_once('=') {
                Some(("manifest_version", v)) if v == "1" => {}
                Some(("manifest_version", v)) => {
                    return Err(Error::Version(format!("manifest version `{v}`")));
                }
                Some(("tool_version", v)) => tool_version = Some(v.to_string()),
                Some(("root_seed", v)) => {
                    root_seed = Some(v.parse().map_err(|_| {
                        Error::format("manifest", format!("bad root_seed `{v}`"))
                    })?)
                }
                Some(("timestamp", v)) => timestamp = Some(v.to_string()),
                Some(("input", v)) => {
                    let (name, hash) = v.rsplit_once(':').ok_or_else(|| {
                        Error::format("manifest", format!("bad input line `{v}`"))
                    })?;
                    inputs.push((name.to_string(), hash.to_string()));
                }
                None if line == "config_begin" => {
                    in_config = true;
                    saw_config = true;
                }
                _ => {
                    return Err(Error::format("manifest", format!("unexpected line `{line}`")));
                }
            }
        }
        if in_config || !saw_config {
            return Err(Error::format("manifest", "missing config block"));
        }
        Ok(RunManifest {
            tool_version: tool_version
                .ok_or_else(|| Error::format("manifest", "missing tool_version"))?,
            root_seed: root_seed.ok_or_else(|| Error::format("manifest", "missing root_seed"))?,
            timestamp: timestamp.ok_or_else(|| Error::format("manifest", "missing timestamp"))?,
            inputs,
            config_text,
        })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// SHA-256 of the manifest text, hex. Stored next to the manifest in
    /// every container; a mismatch on load means tampering or rot.
    pub fn hash_hex(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.alpha, 0.375);
        assert_eq!(cfg.lambda, 0.1);
    }

    #[test]
    fn explicit_defaults_match_defaults() {
        let cfg = RunConfig::parse("alpha=0.375\nlambda=0.1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("alpha=5\nbogus=1\n").unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "bogus");
                assert_eq!(line, 2);
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn range_violations_are_config_errors() {
        assert!(RunConfig::parse("alpha=-1\n").is_err());
        assert!(RunConfig::parse("momentum=1.0\n").is_err());
        assert!(RunConfig::parse("eps=-0.1\n").is_err());
        assert!(RunConfig::parse("dim=8\nest_patches=3\n").is_err());
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = RunConfig::parse("epochs=three\n").unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "epochs");
                assert_eq!(line, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("# full run\nalpha=5 # paper default\nalpha=2\n").unwrap();
        assert_eq!(cfg.alpha, 2.0);
    }

    #[test]
    fn serialize_round_trip_is_canonical() {
        let cfg = RunConfig::parse("alpha=3.5\nhidden=16,8\ndataset=rings\nseed=99\n").unwrap();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.serialize());
    }

    #[test]
    fn seed_precedence_cli_over_config() {
        let cfg = RunConfig::parse("seed=7\n").unwrap();
        assert_eq!(resolve_root_seed(Some(3), &cfg).unwrap(), 3);
        // Without CLI value and without the env var, the config wins.
        if std::env::var("NAMID_SEED").is_err() {
            assert_eq!(resolve_root_seed(None, &cfg).unwrap(), 7);
        }
    }

    #[test]
    fn manifest_round_trip_and_hash_stability() {
        let cfg = RunConfig::default();
        let mut m = RunManifest::new(&cfg, 42);
        m.add_input("train.nmid", b"some bytes");
        let text = m.to_text();
        let back = RunManifest::parse(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.hash_hex(), back.hash_hex());
        assert_eq!(back.config().unwrap(), cfg);
    }

    #[test]
    fn mi_term_disabled_cases() {
        let mut cfg = RunConfig::default();
        assert!(!cfg.mi_term_disabled());
        cfg.alpha = 0.0;
        assert!(cfg.mi_term_disabled());
        cfg.alpha = 5.0;
        cfg.drop_natural_mi = true;
        cfg.drop_adversarial_mi = true;
        cfg.zero_lambda = true;
        assert!(cfg.mi_term_disabled());
    }
}
