//! CSV emission and parsing for every report the tool produces.
//!
//! All files follow RFC 4180: CRLF row terminators, quoting only where
//! needed, one header row. Floats are written in shortest round-trip
//! form so a parsed report regenerates the exact values. The runtime
//! column exists for table-shape compatibility and is always 0, since
//! wall-clock values would break byte-identical reruns.

use crate::defense::EpochRow;
use crate::error::{Error, Result};
use crate::info::InfoReport;
use crate::mi::{GapRow, GaussBench};
use std::path::Path;

/// One row of an accuracy table: a defense evaluated under one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub defense: String,
    pub attack: String,
    pub norm: String,
    pub eps: f64,
    pub steps: usize,
    pub natural_acc: f64,
    pub adversarial_acc: f64,
    pub seed: u64,
    pub runtime_s: f64,
}

impl EvalRow {
    pub fn validate(&self) -> Result<()> {
        for (label, v) in [
            ("natural accuracy", self.natural_acc),
            ("adversarial accuracy", self.adversarial_acc),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Input(format!(
                    "{label} {v} outside [0, 100] in row ({}, {})",
                    self.defense, self.attack
                )));
            }
        }
        Ok(())
    }
}

/// Summary row for MI estimates over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MiSummaryRow {
    pub estimator: String,
    pub dataset: String,
    pub mean_estimate: f64,
    pub offset_mean: f64,
}

/// One attack-strength setting of the three-curve probe: the estimate
/// on natural pairs, on adversarial pairs, and on the crossed pair
/// (natural input, adversarial logits). Values share one offset chosen
/// so the smallest is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PocRow {
    pub iterations: usize,
    pub natural_mi: f64,
    pub adversarial_mi: f64,
    pub cross_mi: f64,
}

/// Estimator-separation row: the mean estimate when the logits come
/// from natural inputs vs adversarial inputs, per training objective
/// and estimator kind. `gap` is matched-minus-mismatched, so positive
/// means the estimator separates the two input kinds the intended way.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationRow {
    pub objective: String,
    pub estimator: String,
    pub natural_mean: f64,
    pub adversarial_mean: f64,
    pub gap: f64,
}

/// Result row of the exact-identity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub trials: usize,
    pub max_residual: f64,
    pub max_triangle_violation: f64,
    pub worst_trial: usize,
}

/// Constraint summary for one crafted adversarial batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub attack: String,
    pub norm: String,
    pub eps: f64,
    pub steps: usize,
    pub samples: usize,
    pub misled: usize,
    pub max_linf: f64,
    pub max_l2: f64,
    pub in_range: bool,
}

/// A full accuracy report: attack rows plus optional MI summaries.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mi_rows: Vec<MiSummaryRow>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            row.validate()?;
        }
        Ok(())
    }
}

/// A typed CSV schema: fixed header, field projection, field parsing.
pub trait CsvRecord: Sized {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
    fn parse(fields: &[String]) -> Result<Self>;
}

fn take<'a>(fields: &'a [String], i: usize, header: &[&str]) -> Result<&'a str> {
    fields
        .get(i)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::format("csv", format!("missing column `{}`", header[i])))
}

fn num<T: std::str::FromStr>(fields: &[String], i: usize, header: &[&str]) -> Result<T> {
    let raw = take(fields, i, header)?;
    raw.parse::<T>()
        .map_err(|_| Error::format("csv", format!("bad value `{raw}` for column `{}`", header[i])))
}

impl CsvRecord for EvalRow {
    const HEADER: &'static [&'static str] = &[
        "defense",
        "attack",
        "norm",
        "eps",
        "steps",
        "natural_acc",
        "adversarial_acc",
        "seed",
        "runtime_s",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.defense.clone(),
            self.attack.clone(),
            self.norm.clone(),
            format!("{}", self.eps),
            format!("{}", self.steps),
            format!("{}", self.natural_acc),
            format!("{}", self.adversarial_acc),
            format!("{}", self.seed),
            format!("{}", self.runtime_s),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        let row = EvalRow {
            defense: take(fields, 0, h)?.to_string(),
            attack: take(fields, 1, h)?.to_string(),
            norm: take(fields, 2, h)?.to_string(),
            eps: num(fields, 3, h)?,
            steps: num(fields, 4, h)?,
            natural_acc: num(fields, 5, h)?,
            adversarial_acc: num(fields, 6, h)?,
            seed: num(fields, 7, h)?,
            runtime_s: num(fields, 8, h)?,
        };
        row.validate()?;
        Ok(row)
    }
}

impl CsvRecord for MiSummaryRow {
    const HEADER: &'static [&'static str] =
        &["estimator", "dataset", "mean_estimate", "offset_mean"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.estimator.clone(),
            self.dataset.clone(),
            format!("{}", self.mean_estimate),
            format!("{}", self.offset_mean),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(MiSummaryRow {
            estimator: take(fields, 0, h)?.to_string(),
            dataset: take(fields, 1, h)?.to_string(),
            mean_estimate: num(fields, 2, h)?,
            offset_mean: num(fields, 3, h)?,
        })
    }
}

impl CsvRecord for PocRow {
    const HEADER: &'static [&'static str] =
        &["iterations", "natural_mi", "adversarial_mi", "cross_mi"];

    fn fields(&self) -> Vec<String> {
        vec![
            format!("{}", self.iterations),
            format!("{}", self.natural_mi),
            format!("{}", self.adversarial_mi),
            format!("{}", self.cross_mi),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(PocRow {
            iterations: num(fields, 0, h)?,
            natural_mi: num(fields, 1, h)?,
            adversarial_mi: num(fields, 2, h)?,
            cross_mi: num(fields, 3, h)?,
        })
    }
}

impl CsvRecord for SeparationRow {
    const HEADER: &'static [&'static str] =
        &["objective", "estimator", "natural_mean", "adversarial_mean", "gap"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.objective.clone(),
            self.estimator.clone(),
            format!("{}", self.natural_mean),
            format!("{}", self.adversarial_mean),
            format!("{}", self.gap),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(SeparationRow {
            objective: take(fields, 0, h)?.to_string(),
            estimator: take(fields, 1, h)?.to_string(),
            natural_mean: num(fields, 2, h)?,
            adversarial_mean: num(fields, 3, h)?,
            gap: num(fields, 4, h)?,
        })
    }
}

impl CsvRecord for SweepRow {
    const HEADER: &'static [&'static str] =
        &["trials", "max_residual", "max_triangle_violation", "worst_trial"];

    fn fields(&self) -> Vec<String> {
        vec![
            format!("{}", self.trials),
            format!("{}", self.max_residual),
            format!("{}", self.max_triangle_violation),
            format!("{}", self.worst_trial),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(SweepRow {
            trials: num(fields, 0, h)?,
            max_residual: num(fields, 1, h)?,
            max_triangle_violation: num(fields, 2, h)?,
            worst_trial: num(fields, 3, h)?,
        })
    }
}

impl CsvRecord for InfoReport {
    const HEADER: &'static [&'static str] = &[
        "h_z",
        "h_z_given_x",
        "h_z_given_n",
        "h_z_given_xn",
        "h_z_given_xt",
        "i_xz",
        "i_nz",
        "i_xtz",
        "i_xnz",
        "i_xn",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            format!("{}", self.h_z),
            format!("{}", self.h_z_given_x),
            format!("{}", self.h_z_given_n),
            format!("{}", self.h_z_given_xn),
            format!("{}", self.h_z_given_xt),
            format!("{}", self.i_xz),
            format!("{}", self.i_nz),
            format!("{}", self.i_xtz),
            format!("{}", self.i_xnz),
            format!("{}", self.i_xn),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(InfoReport {
            h_z: num(fields, 0, h)?,
            h_z_given_x: num(fields, 1, h)?,
            h_z_given_n: num(fields, 2, h)?,
            h_z_given_xn: num(fields, 3, h)?,
            h_z_given_xt: num(fields, 4, h)?,
            i_xz: num(fields, 5, h)?,
            i_nz: num(fields, 6, h)?,
            i_xtz: num(fields, 7, h)?,
            i_xnz: num(fields, 8, h)?,
            i_xn: num(fields, 9, h)?,
        })
    }
}

impl CsvRecord for AttackRow {
    const HEADER: &'static [&'static str] = &[
        "attack", "norm", "eps", "steps", "samples", "misled", "max_linf", "max_l2", "in_range",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.attack.clone(),
            self.norm.clone(),
            format!("{}", self.eps),
            format!("{}", self.steps),
            format!("{}", self.samples),
            format!("{}", self.misled),
            format!("{}", self.max_linf),
            format!("{}", self.max_l2),
            format!("{}", self.in_range),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(AttackRow {
            attack: take(fields, 0, h)?.to_string(),
            norm: take(fields, 1, h)?.to_string(),
            eps: num(fields, 2, h)?,
            steps: num(fields, 3, h)?,
            samples: num(fields, 4, h)?,
            misled: num(fields, 5, h)?,
            max_linf: num(fields, 6, h)?,
            max_l2: num(fields, 7, h)?,
            in_range: num(fields, 8, h)?,
        })
    }
}

impl CsvRecord for GapRow {
    const HEADER: &'static [&'static str] =
        &["epoch", "natural_gap", "adversarial_gap", "selected"];

    fn fields(&self) -> Vec<String> {
        vec![
            format!("{}", self.epoch),
            format!("{}", self.natural_gap),
            format!("{}", self.adversarial_gap),
            format!("{}", self.selected),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(GapRow {
            epoch: num(fields, 0, h)?,
            natural_gap: num(fields, 1, h)?,
            adversarial_gap: num(fields, 2, h)?,
            selected: num(fields, 3, h)?,
        })
    }
}

impl CsvRecord for EpochRow {
    const HEADER: &'static [&'static str] = &[
        "epoch",
        "natural_acc",
        "adversarial_acc",
        "l_adv",
        "l_mi",
        "selected",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            format!("{}", self.epoch),
            format!("{}", self.natural_acc),
            format!("{}", self.adversarial_acc),
            format!("{}", self.l_adv),
            format!("{}", self.l_mi),
            format!("{}", self.selected),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(EpochRow {
            epoch: num(fields, 0, h)?,
            natural_acc: num(fields, 1, h)?,
            adversarial_acc: num(fields, 2, h)?,
            l_adv: num(fields, 3, h)?,
            l_mi: num(fields, 4, h)?,
            selected: num(fields, 5, h)?,
        })
    }
}

impl CsvRecord for GaussBench {
    const HEADER: &'static [&'static str] =
        &["rho", "samples", "estimate", "analytic", "abs_error"];

    fn fields(&self) -> Vec<String> {
        vec![
            format!("{}", self.rho),
            format!("{}", self.samples),
            format!("{}", self.estimate),
            format!("{}", self.analytic),
            format!("{}", self.abs_error),
        ]
    }

    fn parse(fields: &[String]) -> Result<Self> {
        let h = Self::HEADER;
        Ok(GaussBench {
            rho: num(fields, 0, h)?,
            samples: num(fields, 1, h)?,
            estimate: num(fields, 2, h)?,
            analytic: num(fields, 3, h)?,
            abs_error: num(fields, 4, h)?,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

/// Serialize rows (with header) to an RFC 4180 string.
pub fn csv_string<R: CsvRecord>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(R::HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.fields()).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("csv", e.to_string()))
}

pub fn write_csv<R: CsvRecord>(path: &Path, rows: &[R]) -> Result<()> {
    let text = csv_string(rows)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a CSV string produced by `csv_string`; the header must match
/// the record type exactly.
pub fn parse_csv<R: CsvRecord>(text: &str) -> Result<Vec<R>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let got: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if got != R::HEADER {
        return Err(Error::format(
            "csv",
            format!("header {got:?} does not match expected {:?}", R::HEADER),
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let fields: Vec<String> = record.iter().map(|s| s.to_string()).collect();
        out.push(R::parse(&fields)?);
    }
    Ok(out)
}

pub fn read_csv<R: CsvRecord>(path: &Path) -> Result<Vec<R>> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_eval_rows() -> Vec<EvalRow> {
        vec![
            EvalRow {
                defense: "standard".into(),
                attack: "none".into(),
                norm: "-".into(),
                eps: 0.0,
                steps: 0,
                natural_acc: 97.25,
                adversarial_acc: 97.25,
                seed: 7,
                runtime_s: 0.0,
            },
            EvalRow {
                defense: "namid".into(),
                attack: "pgd".into(),
                norm: "linf".into(),
                eps: 8.0 / 255.0,
                steps: 40,
                natural_acc: 93.5,
                adversarial_acc: 61.0,
                seed: 7,
                runtime_s: 0.0,
            },
        ]
    }

    #[test]
    fn eval_rows_round_trip_exactly() {
        let rows = sample_eval_rows();
        let text = csv_string(&rows).unwrap();
        let back: Vec<EvalRow> = parse_csv(&text).unwrap();
        assert_eq!(rows, back);
        // eps survives at full precision.
        assert_eq!(back[1].eps.to_bits(), (8.0 / 255.0_f64).to_bits());
    }

    #[test]
    fn output_is_crlf_terminated_with_header() {
        let text = csv_string(&sample_eval_rows()).unwrap();
        let lines: Vec<&str> = text.split("\r\n").collect();
        assert_eq!(lines.len(), 4, "2 rows + header + trailing empty");
        assert_eq!(
            lines[0],
            "defense,attack,norm,eps,steps,natural_acc,adversarial_acc,seed,runtime_s"
        );
        assert_eq!(lines[3], "");
        assert!(!text.contains("\n\n"));
    }

    #[test]
    fn fields_needing_quotes_are_quoted() {
        let mut rows = sample_eval_rows();
        rows[0].defense = "a,b \"c\"".into();
        let text = csv_string(&rows).unwrap();
        assert!(text.contains("\"a,b \"\"c\"\"\""));
        let back: Vec<EvalRow> = parse_csv(&text).unwrap();
        assert_eq!(back[0].defense, "a,b \"c\"");
    }

    #[test]
    fn serialization_is_deterministic() {
        let a = csv_string(&sample_eval_rows()).unwrap();
        let b = csv_string(&sample_eval_rows()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn header_mismatch_rejected() {
        let text = csv_string(&sample_eval_rows()).unwrap();
        assert!(parse_csv::<PocRow>(&text).is_err());
    }

    #[test]
    fn out_of_range_accuracy_rejected() {
        let mut rows = sample_eval_rows();
        rows[0].natural_acc = 101.0;
        assert!(rows[0].validate().is_err());
        let text = csv_string(&rows).unwrap();
        assert!(parse_csv::<EvalRow>(&text).is_err());
    }

    #[test]
    fn remaining_schemas_round_trip() {
        let poc = vec![PocRow {
            iterations: 10,
            natural_mi: 1.25,
            adversarial_mi: 0.75,
            cross_mi: 0.0,
        }];
        assert_eq!(parse_csv::<PocRow>(&csv_string(&poc).unwrap()).unwrap(), poc);

        let sep = vec![SeparationRow {
            objective: "eq5".into(),
            estimator: "natural".into(),
            natural_mean: 0.9,
            adversarial_mean: 0.2,
            gap: 0.7,
        }];
        assert_eq!(
            parse_csv::<SeparationRow>(&csv_string(&sep).unwrap()).unwrap(),
            sep
        );

        let sweep = vec![SweepRow {
            trials: 1000,
            max_residual: 3.3e-16,
            max_triangle_violation: 0.0,
            worst_trial: 412,
        }];
        assert_eq!(
            parse_csv::<SweepRow>(&csv_string(&sweep).unwrap()).unwrap(),
            sweep
        );

        let attack = vec![AttackRow {
            attack: "pgd".into(),
            norm: "l2".into(),
            eps: 0.5,
            steps: 10,
            samples: 2000,
            misled: 441,
            max_linf: 0.31,
            max_l2: 0.5,
            in_range: true,
        }];
        assert_eq!(
            parse_csv::<AttackRow>(&csv_string(&attack).unwrap()).unwrap(),
            attack
        );

        let mi = vec![MiSummaryRow {
            estimator: "natural".into(),
            dataset: "two_gaussians".into(),
            mean_estimate: -0.125,
            offset_mean: 0.0,
        }];
        assert_eq!(
            parse_csv::<MiSummaryRow>(&csv_string(&mi).unwrap()).unwrap(),
            mi
        );

        let info = vec![InfoReport {
            h_z: 2.0_f64.ln(),
            h_z_given_x: 0.3,
            h_z_given_n: 0.5,
            h_z_given_xn: 0.0,
            h_z_given_xt: 0.1,
            i_xz: 2.0_f64.ln() - 0.3,
            i_nz: 2.0_f64.ln() - 0.5,
            i_xtz: 2.0_f64.ln() - 0.1,
            i_xnz: 2.0_f64.ln(),
            i_xn: 1.0 / 3.0,
        }];
        assert_eq!(
            parse_csv::<InfoReport>(&csv_string(&info).unwrap()).unwrap(),
            info
        );

        let gaps = vec![GapRow {
            epoch: 3,
            natural_gap: 0.11,
            adversarial_gap: 0.07,
            selected: 512,
        }];
        let gaps_back: Vec<GapRow> = parse_csv(&csv_string(&gaps).unwrap()).unwrap();
        assert_eq!(gaps_back.len(), 1);
        assert_eq!(gaps_back[0].natural_gap.to_bits(), gaps[0].natural_gap.to_bits());

        let epochs = vec![EpochRow {
            epoch: 0,
            natural_acc: 0.98,
            adversarial_acc: 0.61,
            l_adv: 0.4321,
            l_mi: 0.011,
            selected: 97,
        }];
        let epochs_back: Vec<EpochRow> = parse_csv(&csv_string(&epochs).unwrap()).unwrap();
        assert_eq!(epochs_back[0].l_adv.to_bits(), epochs[0].l_adv.to_bits());

        let gauss = vec![GaussBench {
            rho: 0.9,
            samples: 20000,
            estimate: 0.83,
            analytic: 0.8303898153941896,
            abs_error: 0.0003898153941896,
        }];
        let gauss_back: Vec<GaussBench> = parse_csv(&csv_string(&gauss).unwrap()).unwrap();
        assert_eq!(gauss_back[0].analytic.to_bits(), gauss[0].analytic.to_bits());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let rows = sample_eval_rows();
        write_csv(&path, &rows).unwrap();
        let back: Vec<EvalRow> = read_csv(&path).unwrap();
        assert_eq!(rows, back);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.windows(2).any(|w| w == b"\r\n"));
    }
}
