//! Exact information measures on small discrete distributions.
//!
//! This module is the machine-precision oracle behind the additive MI
//! decomposition the defense relies on: for X̃ = X + N and any channel
//! producing Z,
//!
//!   I(X̃;Z) = I(X;Z) + I(N;Z) − I(X;N;Z) + H(Z|X,N) − H(Z|X̃)
//!
//! The co-information convention here is I(X;N;Z) = I(X;Z) − I(X;Z|N),
//! equivalently the symmetric inclusion-exclusion over entropies; that
//! choice is what makes the decomposition an identity rather than an
//! approximation. Everything is computed by exact summation in a fixed
//! order; alphabets are capped so f64 noise stays far below the 1e-12
//! acceptance tolerance.

use crate::error::{Error, Result};
use crate::rng::{SeedTree, SplitMix64};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Probability-mass tolerance for validated inputs.
pub const MASS_TOL: f64 = 1e-12;
/// Largest per-variable alphabet; keeps tables tiny and sums exact.
pub const MAX_ALPHABET: usize = 16;

fn entropy_raw(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

fn validate_dist(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Input(format!("{what}: empty distribution")));
    }
    let mut mass = 0.0;
    for &v in p {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Input(format!("{what}: invalid probability {v}")));
        }
        mass += v;
    }
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::Input(format!(
            "{what}: total mass {mass} differs from 1 beyond {MASS_TOL}"
        )));
    }
    Ok(())
}

/// Shannon entropy in nats, with 0 log 0 := 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_dist(p, "entropy input")?;
    Ok(entropy_raw(p))
}

/// Mutual information of a two-variable joint stored row-major
/// [nx * nz]. Direct summation of p log(p / (p_x p_z)).
pub fn mutual_information(joint: &[f64], nx: usize, nz: usize) -> Result<f64> {
    if joint.len() != nx * nz {
        return Err(Error::shape("mutual_information joint", &[nx, nz], &[joint.len()]));
    }
    validate_dist(joint, "mutual_information joint")?;
    let mut px = vec![0.0; nx];
    let mut pz = vec![0.0; nz];
    for x in 0..nx {
        for z in 0..nz {
            px[x] += joint[x * nz + z];
            pz[z] += joint[x * nz + z];
        }
    }
    let mut mi = 0.0;
    for x in 0..nx {
        for z in 0..nz {
            let p = joint[x * nz + z];
            if p > 0.0 {
                mi += p * (p / (px[x] * pz[z])).ln();
            }
        }
    }
    Ok(mi)
}

/// Co-information of a three-variable joint stored [nx * nn * nz],
/// computed by inclusion-exclusion over entropies:
/// H(X)+H(N)+H(Z) − H(X,N)−H(X,Z)−H(N,Z) + H(X,N,Z).
/// Symmetric in its arguments; can be negative (synergy).
pub fn interaction_information(table: &[f64], nx: usize, nn: usize, nz: usize) -> Result<f64> {
    if table.len() != nx * nn * nz {
        return Err(Error::shape(
            "interaction_information table",
            &[nx, nn, nz],
            &[table.len()],
        ));
    }
    validate_dist(table, "interaction_information table")?;
    let mut px = vec![0.0; nx];
    let mut pn = vec![0.0; nn];
    let mut pz = vec![0.0; nz];
    let mut pxn = vec![0.0; nx * nn];
    let mut pxz = vec![0.0; nx * nz];
    let mut pnz = vec![0.0; nn * nz];
    for x in 0..nx {
        for n in 0..nn {
            for z in 0..nz {
                let p = table[(x * nn + n) * nz + z];
                px[x] += p;
                pn[n] += p;
                pz[z] += p;
                pxn[x * nn + n] += p;
                pxz[x * nz + z] += p;
                pnz[n * nz + z] += p;
            }
        }
    }
    Ok(entropy_raw(&px) + entropy_raw(&pn) + entropy_raw(&pz)
        - entropy_raw(&pxn)
        - entropy_raw(&pxz)
        - entropy_raw(&pnz)
        + entropy_raw(table))
}

/// How Z is produced: conditioned on the full (X, N) pair, or only on
/// the sum X̃ = X + N (in which case Z is conditionally independent of
/// (X, N) given X̃).
#[derive(Debug, Clone)]
pub enum Channel {
    GivenPair { nz: usize, rows: Vec<f64> },
    GivenSum { nz: usize, rows: Vec<f64> },
}

/// A joint distribution over (X, N, Z) with the deterministic
/// composition X̃ = X + N over integer alphabets.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    nx: usize,
    nn: usize,
    nz: usize,
    /// p[(x * nn + n) * nz + z]
    p: Vec<f64>,
}

/// All the entropy and MI terms of the decomposition, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoReport {
    pub h_z: f64,
    pub h_z_given_x: f64,
    pub h_z_given_n: f64,
    pub h_z_given_xn: f64,
    pub h_z_given_xt: f64,
    pub i_xz: f64,
    pub i_nz: f64,
    pub i_xtz: f64,
    pub i_xnz: f64,
    pub i_xn: f64,
}

impl DiscreteJoint {
    pub fn new(nx: usize, nn: usize, nz: usize, p: Vec<f64>) -> Result<Self> {
        if nx == 0 || nn == 0 || nz == 0 || nx > MAX_ALPHABET || nn > MAX_ALPHABET || nz > MAX_ALPHABET
        {
            return Err(Error::Input(format!(
                "alphabet sizes ({nx}, {nn}, {nz}) outside [1, {MAX_ALPHABET}]"
            )));
        }
        if p.len() != nx * nn * nz {
            return Err(Error::shape("joint table", &[nx, nn, nz], &[p.len()]));
        }
        validate_dist(&p, "joint table")?;
        Ok(DiscreteJoint { nx, nn, nz, p })
    }

    /// Compose a joint over (X, N) with a channel for Z.
    pub fn from_channel(pxn: &[f64], nx: usize, nn: usize, channel: &Channel) -> Result<Self> {
        if pxn.len() != nx * nn {
            return Err(Error::shape("pxn", &[nx, nn], &[pxn.len()]));
        }
        validate_dist(pxn, "pxn")?;
        let nxt = nx + nn - 1;
        let (nz, rows, per_sum) = match channel {
            Channel::GivenPair { nz, rows } => {
                if rows.len() != nx * nn * nz {
                    return Err(Error::shape("channel rows", &[nx * nn, *nz], &[rows.len()]));
                }
                (*nz, rows, false)
            }
            Channel::GivenSum { nz, rows } => {
                if rows.len() != nxt * nz {
                    return Err(Error::Input(format!(
                        "sum channel has {} entries, expected {nxt} rows of {nz}",
                        rows.len()
                    )));
                }
                (*nz, rows, true)
            }
        };
        for (r, row) in rows.chunks(nz).enumerate() {
            validate_dist(row, &format!("channel row {r}"))?;
        }
        let mut p = vec![0.0; nx * nn * nz];
        for x in 0..nx {
            for n in 0..nn {
                let row = if per_sum { x + n } else { x * nn + n };
                for z in 0..nz {
                    p[(x * nn + n) * nz + z] = pxn[x * nn + n] * rows[row * nz + z];
                }
            }
        }
        DiscreteJoint::new(nx, nn, nz, p)
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.nx, self.nn, self.nz)
    }

    pub fn table(&self) -> &[f64] {
        &self.p
    }

    /// Marginal over (X̃, Z) with X̃ = X + N.
    fn pxt_z(&self) -> Vec<f64> {
        let nxt = self.nx + self.nn - 1;
        let mut out = vec![0.0; nxt * self.nz];
        for x in 0..self.nx {
            for n in 0..self.nn {
                for z in 0..self.nz {
                    out[(x + n) * self.nz + z] += self.p[(x * self.nn + n) * self.nz + z];
                }
            }
        }
        out
    }

    pub fn report(&self) -> InfoReport {
        let (nx, nn, nz) = (self.nx, self.nn, self.nz);
        let nxt = nx + nn - 1;
        let mut px = vec![0.0; nx];
        let mut pn = vec![0.0; nn];
        let mut pz = vec![0.0; nz];
        let mut pxn = vec![0.0; nx * nn];
        let mut pxz = vec![0.0; nx * nz];
        let mut pnz = vec![0.0; nn * nz];
        for x in 0..nx {
            for n in 0..nn {
                for z in 0..nz {
                    let p = self.p[(x * nn + n) * nz + z];
                    px[x] += p;
                    pn[n] += p;
                    pz[z] += p;
                    pxn[x * nn + n] += p;
                    pxz[x * nz + z] += p;
                    pnz[n * nz + z] += p;
                }
            }
        }
        let pxtz = self.pxt_z();
        let mut pxt = vec![0.0; nxt];
        for t in 0..nxt {
            for z in 0..nz {
                pxt[t] += pxtz[t * nz + z];
            }
        }
        let h_x = entropy_raw(&px);
        let h_n = entropy_raw(&pn);
        let h_z = entropy_raw(&pz);
        let h_xn = entropy_raw(&pxn);
        let h_xz = entropy_raw(&pxz);
        let h_nz = entropy_raw(&pnz);
        let h_xnz = entropy_raw(&self.p);
        let h_xt = entropy_raw(&pxt);
        let h_xtz = entropy_raw(&pxtz);
        InfoReport {
            h_z,
            h_z_given_x: h_xz - h_x,
            h_z_given_n: h_nz - h_n,
            h_z_given_xn: h_xnz - h_xn,
            h_z_given_xt: h_xtz - h_xt,
            i_xz: h_x + h_z - h_xz,
            i_nz: h_n + h_z - h_nz,
            i_xtz: h_xt + h_z - h_xtz,
            i_xnz: h_x + h_n + h_z - h_xn - h_xz - h_nz + h_xnz,
            i_xn: h_x + h_n - h_xn,
        }
    }

    pub fn interaction_information(&self) -> f64 {
        self.report().i_xnz
    }
}

/// Absolute residual of the decomposition identity. Zero up to float
/// noise for every valid joint; the acceptance gate allows 1e-12.
pub fn verify_theorem1(joint: &DiscreteJoint) -> f64 {
    let r = joint.report();
    let rhs = r.i_xz + r.i_nz - r.i_xnz + r.h_z_given_xn - r.h_z_given_xt;
    (r.i_xtz - rhs).abs()
}

/// The two assumption magnitudes of the additive approximation
/// I(X̃;Z) ≈ I(X;Z) + I(N;Z), and its actual error:
/// (|I(X;N;Z)|, |H(Z|X,N) − H(Z|X̃)|, |I(X̃;Z) − I(X;Z) − I(N;Z)|).
/// The identity forces third ≤ first + second (triangle inequality).
pub fn corollary1_residuals(joint: &DiscreteJoint) -> (f64, f64, f64) {
    let r = joint.report();
    (
        r.i_xnz.abs(),
        (r.h_z_given_xn - r.h_z_given_xt).abs(),
        (r.i_xtz - r.i_xz - r.i_nz).abs(),
    )
}

/// Uniform independent bits, Z = X xor N. Interaction information is
/// exactly −ln 2 (pure synergy).
pub fn xor_triple() -> DiscreteJoint {
    let mut p = vec![0.0; 2 * 2 * 2];
    for x in 0..2usize {
        for n in 0..2usize {
            let z = x ^ n;
            p[(x * 2 + n) * 2 + z] = 0.25;
        }
    }
    DiscreteJoint::new(2, 2, 2, p).unwrap()
}

/// X = N = Z, one uniform bit copied three times: +ln 2 (pure
/// redundancy).
pub fn copy_triple() -> DiscreteJoint {
    let mut p = vec![0.0; 2 * 2 * 2];
    p[(0 * 2 + 0) * 2 + 0] = 0.5;
    p[(1 * 2 + 1) * 2 + 1] = 0.5;
    DiscreteJoint::new(2, 2, 2, p).unwrap()
}

fn random_dist(rng: &mut SplitMix64, len: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..len).map(|_| rng.next_f64() + 1e-4).collect();
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= sum;
    }
    // Push residual normalization error into the largest cell so the
    // mass check holds to a few ulps even for big tables.
    let deficit = 1.0 - p.iter().sum::<f64>();
    let hi = (0..len).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    p[hi] += deficit;
    p
}

/// Random joint with alphabets in [2, max_alphabet], random (X, N)
/// dependence, and a stochastic channel that conditions on (X, N) for
/// even draws and on X̃ for odd ones.
pub fn random_joint(rng: &mut SplitMix64, max_alphabet: usize) -> DiscreteJoint {
    let span = (max_alphabet - 1) as u64;
    let nx = 2 + rng.next_below(span) as usize;
    let nn = 2 + rng.next_below(span) as usize;
    let nz = 2 + rng.next_below(span) as usize;
    let pxn = random_dist(rng, nx * nn);
    let per_sum = rng.next_below(2) == 1;
    let cond = if per_sum { nx + nn - 1 } else { nx * nn };
    let mut rows = Vec::with_capacity(cond * nz);
    for _ in 0..cond {
        rows.extend(random_dist(rng, nz));
    }
    let channel = if per_sum {
        Channel::GivenSum { nz, rows }
    } else {
        Channel::GivenPair { nz, rows }
    };
    DiscreteJoint::from_channel(&pxn, nx, nn, &channel).unwrap()
}

/// Worst case over a randomized sweep of decomposition checks.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub trials: usize,
    pub max_residual: f64,
    pub worst_trial: usize,
    pub worst: InfoReport,
    /// max over trials of third − (first + second) from
    /// `corollary1_residuals`; ≤ 0 up to float noise.
    pub max_triangle_violation: f64,
}

fn sweep_trial(seeds: &SeedTree, max_alphabet: usize, trial: usize) -> (f64, f64, InfoReport) {
    let mut rng = seeds.rng(&format!("trial/{trial}"));
    let joint = random_joint(&mut rng, max_alphabet);
    let residual = verify_theorem1(&joint);
    let (a, b, c) = corollary1_residuals(&joint);
    (residual, c - (a + b), joint.report())
}

fn sweep_reduce(trials: usize, results: Vec<(f64, f64, InfoReport)>) -> SweepOutcome {
    let mut out = SweepOutcome {
        trials,
        max_residual: -1.0,
        worst_trial: 0,
        worst: results[0].2.clone(),
        max_triangle_violation: f64::NEG_INFINITY,
    };
    for (i, (residual, violation, report)) in results.into_iter().enumerate() {
        if residual > out.max_residual {
            out.max_residual = residual;
            out.worst_trial = i;
            out.worst = report;
        }
        if violation > out.max_triangle_violation {
            out.max_triangle_violation = violation;
        }
    }
    out
}

pub fn theorem_sweep_seq(trials: usize, max_alphabet: usize, seed: u64) -> Result<SweepOutcome> {
    if trials == 0 || max_alphabet < 2 || max_alphabet > MAX_ALPHABET {
        return Err(Error::Input(format!(
            "sweep needs trials >= 1 and alphabet in [2, {MAX_ALPHABET}]"
        )));
    }
    let seeds = SeedTree::new(seed);
    let results: Vec<_> = (0..trials)
        .map(|i| sweep_trial(&seeds, max_alphabet, i))
        .collect();
    Ok(sweep_reduce(trials, results))
}

#[cfg(feature = "parallel")]
pub fn theorem_sweep_par(trials: usize, max_alphabet: usize, seed: u64) -> Result<SweepOutcome> {
    if trials == 0 || max_alphabet < 2 || max_alphabet > MAX_ALPHABET {
        return Err(Error::Input(format!(
            "sweep needs trials >= 1 and alphabet in [2, {MAX_ALPHABET}]"
        )));
    }
    let seeds = SeedTree::new(seed);
    // Trials are independent; collect preserves index order, and the
    // reduction below is the same serial fold as the sequential path,
    // so the outcome is bitwise identical for any thread count.
    let results: Vec<_> = (0..trials)
        .into_par_iter()
        .map(|i| sweep_trial(&seeds, max_alphabet, i))
        .collect();
    Ok(sweep_reduce(trials, results))
}

pub fn theorem_sweep(trials: usize, max_alphabet: usize, seed: u64) -> Result<SweepOutcome> {
    #[cfg(feature = "parallel")]
    {
        return theorem_sweep_par(trials, max_alphabet, seed);
    }
    #[cfg(not(feature = "parallel"))]
    theorem_sweep_seq(trials, max_alphabet, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - (4.0_f64).ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((h - 1.5 * LN2).abs() < 1e-15);
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        // Independent product: zero.
        let joint = [0.2 * 0.5, 0.2 * 0.5, 0.8 * 0.5, 0.8 * 0.5];
        assert!(mutual_information(&joint, 2, 2).unwrap().abs() < 1e-15);
        // Identity channel over 3 symbols: ln 3.
        let mut ident = vec![0.0; 9];
        for k in 0..3 {
            ident[k * 3 + k] = 1.0 / 3.0;
        }
        assert!((mutual_information(&ident, 3, 3).unwrap() - 3.0_f64.ln()).abs() < 1e-14);
        // Cross-check against the entropy formula.
        let j = [0.4, 0.1, 0.1, 0.4];
        let mi = mutual_information(&j, 2, 2).unwrap();
        let hx = entropy(&[0.5, 0.5]).unwrap();
        let hz = entropy(&[0.5, 0.5]).unwrap();
        let hxz = entropy(&j).unwrap();
        assert!((mi - (hx + hz - hxz)).abs() < 1e-14);
    }

    #[test]
    fn interaction_information_fixtures() {
        assert!((xor_triple().interaction_information() + LN2).abs() < 1e-12);
        assert!((copy_triple().interaction_information() - LN2).abs() < 1e-12);
        // Independent triple: zero.
        let p: Vec<f64> = vec![0.125; 8];
        assert!(interaction_information(&p, 2, 2, 2).unwrap().abs() < 1e-14);
    }

    #[test]
    fn interaction_information_is_symmetric() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            let j = random_joint(&mut rng, 4);
            let (nx, nn, nz) = j.sizes();
            let base = j.interaction_information();
            // Permute axes (x, n, z) -> (z, x, n) and recompute.
            let mut perm = vec![0.0; nx * nn * nz];
            for x in 0..nx {
                for n in 0..nn {
                    for z in 0..nz {
                        perm[(z * nx + x) * nn + n] = j.table()[(x * nn + n) * nz + z];
                    }
                }
            }
            let other = interaction_information(&perm, nz, nx, nn).unwrap();
            assert!((base - other).abs() < 1e-12);
        }
    }

    #[test]
    fn decomposition_residual_on_deterministic_channel() {
        // Product (X, N), deterministic Z = X̃ mod 2.
        let pxn = [0.06, 0.14, 0.24, 0.56];
        let mut rows = vec![0.0; 3 * 2];
        for t in 0..3 {
            rows[t * 2 + (t % 2)] = 1.0;
        }
        let j = DiscreteJoint::from_channel(&pxn, 2, 2, &Channel::GivenSum { nz: 2, rows })
            .unwrap();
        assert!(verify_theorem1(&j) <= 1e-12);
        // Channel on X̃ only: the conditional entropies agree.
        let r = j.report();
        assert!((r.h_z_given_xn - r.h_z_given_xt).abs() < 1e-12);
    }

    #[test]
    fn sweep_small_is_tight() {
        let out = theorem_sweep_seq(200, 4, 7).unwrap();
        assert!(out.max_residual <= 1e-12, "residual {}", out.max_residual);
        assert!(out.max_triangle_violation <= 1e-12);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn sweep_parallel_matches_sequential_bitwise() {
        let a = theorem_sweep_seq(100, 4, 9).unwrap();
        let b = theorem_sweep_par(100, 4, 9).unwrap();
        assert_eq!(a.max_residual.to_bits(), b.max_residual.to_bits());
        assert_eq!(a.worst_trial, b.worst_trial);
        assert_eq!(
            a.max_triangle_violation.to_bits(),
            b.max_triangle_violation.to_bits()
        );
    }

    #[test]
    fn conditioning_cannot_increase_entropy() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..100 {
            let j = random_joint(&mut rng, 4);
            let r = j.report();
            assert!(r.h_z_given_xn <= r.h_z_given_xt + 1e-12);
            // Pairwise MI terms are non-negative.
            assert!(r.i_xz >= -1e-12 && r.i_nz >= -1e-12 && r.i_xtz >= -1e-12);
            assert!(r.i_xn >= -1e-12);
        }
    }

    #[test]
    fn corollary_examples() {
        // Independent triple: all residuals zero.
        let p = vec![0.125; 8];
        let j = DiscreteJoint::new(2, 2, 2, p).unwrap();
        let (a, b, c) = corollary1_residuals(&j);
        assert!(a < 1e-14 && b < 1e-14 && c < 1e-14);
        // XOR: approximation error is ln 2, assumptions violated.
        let (a, b, c) = corollary1_residuals(&xor_triple());
        assert!((c - LN2).abs() < 1e-12);
        assert!(c <= a + b + 1e-12);
        // Channel on sum with independent (X, N): error equals |I(X;N;Z)|.
        let pxn = [0.25, 0.25, 0.25, 0.25];
        let rows = vec![
            0.9, 0.1, // x̃ = 0
            0.5, 0.5, // x̃ = 1
            0.2, 0.8, // x̃ = 2
        ];
        let j = DiscreteJoint::from_channel(&pxn, 2, 2, &Channel::GivenSum { nz: 2, rows })
            .unwrap();
        let (a, b, c) = corollary1_residuals(&j);
        assert!(b < 1e-12);
        assert!((c - a).abs() < 1e-12);
    }

    #[test]
    fn channel_size_validation() {
        let pxn = [0.25, 0.25, 0.25, 0.25];
        // GivenSum needs nx + nn - 1 = 3 rows; 2 is an error.
        let bad = Channel::GivenSum {
            nz: 2,
            rows: vec![0.5; 4],
        };
        assert!(DiscreteJoint::from_channel(&pxn, 2, 2, &bad).is_err());
    }
}
