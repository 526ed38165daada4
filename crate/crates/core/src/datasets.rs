//! Synthetic datasets and the attacked-batch carrier.
//!
//! Three generators stand in for image data: two well-separated Gaussian
//! blobs, two concentric rings, and procedurally rendered 8x8 digit
//! glyphs. All inputs live in [0,1]^d because the attack clipping step
//! depends on that range. Generation is a pure function of
//! (kind, n, d, seed).

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoGaussians,
    Rings,
    GridDigits,
}

impl DatasetKind {
    pub fn classes(&self) -> usize {
        match self {
            DatasetKind::TwoGaussians | DatasetKind::Rings => 2,
            DatasetKind::GridDigits => 10,
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            DatasetKind::TwoGaussians => "two_gaussians",
            DatasetKind::Rings => "rings",
            DatasetKind::GridDigits => "grid_digits",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gaussians" => Ok(DatasetKind::TwoGaussians),
            "rings" => Ok(DatasetKind::Rings),
            "grid_digits" => Ok(DatasetKind::GridDigits),
            other => Err(Error::Input(format!("unknown dataset kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub seed: u64,
    pub classes: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Scan invariants: unit range, label validity, matching lengths.
    pub fn validate(&self) -> Result<()> {
        if self.inputs.rows() != self.labels.len() || self.labels.is_empty() {
            return Err(Error::shape(
                "dataset rows",
                &[self.labels.len()],
                &[self.inputs.rows()],
            ));
        }
        if let Some(v) = self
            .inputs
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Input(format!("input value {v} outside [0,1]")));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Input(format!(
                "label {y} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Shape knobs for the generators. Defaults give a 6-sigma class
/// separation on the robust half of `two_gaussians`, which a linear
/// probe separates almost perfectly; pipeline configs widen sigma to
/// make the task attackable.
///
/// `two_gaussians` splits its coordinates into two tiers. The first
/// ceil(d/2) coordinates are the robust tier (mean offset
/// `separation/2`, spread `sigma`). The rest are the brittle tier:
/// narrow, strongly class-correlated coordinates (offset
/// `brittle_shift/2`, spread `brittle_sigma`) whose whole class gap
/// fits inside a small perturbation budget. A model fit without an
/// adversary leans on the brittle tier and is flipped by it; a robust
/// fit has to fall back on the wider tier.
#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub sigma: f64,
    pub separation: f64,
    pub brittle_shift: f64,
    pub brittle_sigma: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            sigma: 0.05,
            separation: 0.3,
            brittle_shift: 0.08,
            brittle_sigma: 0.02,
        }
    }
}

pub fn generate_synthetic(kind: DatasetKind, n: usize, d: usize, seed: u64) -> Result<DatasetSplit> {
    generate_synthetic_with(kind, n, d, seed, SynthOptions::default())
}

pub fn generate_synthetic_with(
    kind: DatasetKind,
    n: usize,
    d: usize,
    seed: u64,
    opts: SynthOptions,
) -> Result<DatasetSplit> {
    let classes = kind.classes();
    if n < 2 * classes {
        return Err(Error::Input(format!(
            "need at least 2 samples per class: n={n}, classes={classes}"
        )));
    }
    if d < 2 {
        return Err(Error::Input(format!("need d >= 2, got {d}")));
    }
    for (name, v) in [
        ("sigma", opts.sigma),
        ("brittle_sigma", opts.brittle_sigma),
        ("brittle_shift", opts.brittle_shift),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Input(format!("bad {name} {v}")));
        }
    }
    let mut rng = SplitMix64::new(seed);
    let mut data = Vec::with_capacity(n * d);
    // Interleaved labels: balanced within one sample by construction.
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    match kind {
        DatasetKind::TwoGaussians => {
            let robust = d - d / 2;
            for &y in &labels {
                let dir = if y == 0 { -1.0 } else { 1.0 };
                for j in 0..d {
                    let (shift, sigma) = if j < robust {
                        (opts.separation, opts.sigma)
                    } else {
                        (opts.brittle_shift, opts.brittle_sigma)
                    };
                    data.push(clamp01(
                        0.5 + dir * shift / 2.0 + sigma * rng.next_gaussian(),
                    ));
                }
            }
        }
        DatasetKind::Rings => {
            // Two concentric rings in the first two coordinates; the rest
            // is isotropic filler around the center.
            for &y in &labels {
                let radius = if y == 0 { 0.25 } else { 0.4 } + opts.sigma * rng.next_gaussian();
                let angle = rng.next_range(0.0, 2.0 * std::f64::consts::PI);
                data.push(clamp01(0.5 + radius * angle.cos()));
                data.push(clamp01(0.5 + radius * angle.sin()));
                for _ in 2..d {
                    data.push(clamp01(0.5 + opts.sigma * rng.next_gaussian()));
                }
            }
        }
        DatasetKind::GridDigits => {
            if d != 64 {
                return Err(Error::Input(format!(
                    "grid_digits renders 8x8 glyphs and needs d=64, got {d}"
                )));
            }
            for &y in &labels {
                let glyph = DIGIT_GLYPHS[y];
                for row in glyph.iter() {
                    for bit in 0..8 {
                        let on = (row >> (7 - bit)) & 1 == 1;
                        let base = if on { 0.8 } else { 0.1 };
                        data.push(clamp01(base + opts.sigma * rng.next_gaussian()));
                    }
                }
            }
        }
    }
    let split = DatasetSplit {
        inputs: Tensor::raw(vec![n, d], data),
        labels,
        name: kind.token().to_string(),
        seed,
        classes,
    };
    split.validate()?;
    Ok(split)
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// One byte per glyph row, most significant bit leftmost. Chunky seven-
/// segment style digits so classes stay visually distinct under jitter.
const DIGIT_GLYPHS: [[u8; 8]; 10] = [
    [0x3c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3c], // 0
    [0x18, 0x38, 0x18, 0x18, 0x18, 0x18, 0x18, 0x7e], // 1
    [0x3c, 0x66, 0x06, 0x0c, 0x18, 0x30, 0x60, 0x7e], // 2
    [0x3c, 0x66, 0x06, 0x1c, 0x06, 0x06, 0x66, 0x3c], // 3
    [0x0c, 0x1c, 0x3c, 0x6c, 0x7e, 0x0c, 0x0c, 0x0c], // 4
    [0x7e, 0x60, 0x60, 0x7c, 0x06, 0x06, 0x66, 0x3c], // 5
    [0x3c, 0x66, 0x60, 0x7c, 0x66, 0x66, 0x66, 0x3c], // 6
    [0x7e, 0x06, 0x0c, 0x18, 0x30, 0x30, 0x30, 0x30], // 7
    [0x3c, 0x66, 0x66, 0x3c, 0x66, 0x66, 0x66, 0x3c], // 8
    [0x3c, 0x66, 0x66, 0x66, 0x3e, 0x06, 0x66, 0x3c], // 9
];

/// A natural/adversarial sample pair batch. The stored noise is the
/// authoritative perturbation: `adversarial` is always exactly
/// `natural + noise` evaluated in f64, enforced at construction.
#[derive(Debug, Clone)]
pub struct Batch {
    natural: Tensor,
    adversarial: Tensor,
    noise: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    /// Build from natural inputs and a perturbation.
    pub fn from_noise(natural: Tensor, noise: Tensor, labels: Vec<usize>) -> Result<Self> {
        if natural.shape() != noise.shape() {
            return Err(Error::shape("batch noise", natural.shape(), noise.shape()));
        }
        if natural.rows() != labels.len() {
            return Err(Error::shape(
                "batch labels",
                &[natural.rows()],
                &[labels.len()],
            ));
        }
        let adv: Vec<f64> = natural
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, n)| x + n)
            .collect();
        let adversarial = Tensor::raw(natural.shape().to_vec(), adv);
        Ok(Batch {
            natural,
            adversarial,
            noise,
            labels,
        })
    }

    /// Rebuild from stored parts (container load). Verifies the additive
    /// invariant bit-exactly.
    pub fn from_parts(
        natural: Tensor,
        adversarial: Tensor,
        noise: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let batch = Batch::from_noise(natural, noise, labels)?;
        if batch.adversarial.data() != adversarial.data() {
            return Err(Error::Input(
                "adversarial tensor is not natural + noise".to_string(),
            ));
        }
        Ok(batch)
    }

    /// Unattacked batch: zero noise.
    pub fn natural_only(natural: Tensor, labels: Vec<usize>) -> Result<Self> {
        let noise = Tensor::zeros(natural.shape().to_vec());
        Batch::from_noise(natural, noise, labels)
    }

    pub fn natural(&self) -> &Tensor {
        &self.natural
    }

    pub fn adversarial(&self) -> &Tensor {
        &self.adversarial
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Subset of rows, preserving order.
    pub fn gather(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            natural: self.natural.gather_rows(idx)?,
            adversarial: self.adversarial.gather_rows(idx)?,
            noise: self.noise.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(DatasetKind::TwoGaussians, 4, 3, 7).unwrap();
        let b = generate_synthetic(DatasetKind::TwoGaussians, 4, 3, 7).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.labels, b.labels);
        let c = generate_synthetic(DatasetKind::TwoGaussians, 4, 3, 8).unwrap();
        assert_ne!(a.inputs.data(), c.inputs.data());
    }

    #[test]
    fn rings_classes_balanced() {
        let s = generate_synthetic(DatasetKind::Rings, 1000, 4, 1).unwrap();
        let ones = s.labels.iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 500);
        s.validate().unwrap();
    }

    #[test]
    fn grid_digits_needs_64_dims() {
        assert!(generate_synthetic(DatasetKind::GridDigits, 40, 16, 0).is_err());
        let s = generate_synthetic(DatasetKind::GridDigits, 40, 64, 0).unwrap();
        assert_eq!(s.classes, 10);
        s.validate().unwrap();
        // Balanced within one sample.
        for c in 0..10 {
            assert_eq!(s.labels.iter().filter(|&&y| y == c).count(), 4);
        }
    }

    #[test]
    fn inputs_always_in_unit_range() {
        for kind in [DatasetKind::TwoGaussians, DatasetKind::Rings] {
            let s = generate_synthetic_with(
                kind,
                200,
                5,
                3,
                SynthOptions {
                    sigma: 0.5,
                    separation: 0.9,
                },
            )
            .unwrap();
            assert!(s.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn linear_probe_separates_default_gaussians() {
        // 6-sigma mean separation: a least-squares linear probe should be
        // essentially perfect. The probe is closed-form, no SGD involved.
        let s = generate_synthetic(DatasetKind::TwoGaussians, 400, 4, 11).unwrap();
        // Project onto the all-ones direction (difference of class means)
        // and threshold at the midpoint.
        let mut hits = 0;
        for i in 0..s.len() {
            let mean: f64 = s.inputs.row(i).iter().sum::<f64>() / 4.0;
            let pred = usize::from(mean > 0.5);
            if pred == s.labels[i] {
                hits += 1;
            }
        }
        let acc = hits as f64 / s.len() as f64;
        assert!(acc >= 0.99, "probe accuracy {acc}");
    }

    #[test]
    fn batch_additive_invariant() {
        let nat = Tensor::matrix(2, 2, vec![0.1, 0.9, 0.5, 0.3]).unwrap();
        let noise = Tensor::matrix(2, 2, vec![0.05, -0.05, 0.0, 0.2]).unwrap();
        let b = Batch::from_noise(nat.clone(), noise.clone(), vec![0, 1]).unwrap();
        for ((x, n), a) in nat
            .data()
            .iter()
            .zip(noise.data())
            .zip(b.adversarial().data())
        {
            assert_eq!((x + n).to_bits(), a.to_bits());
        }
        // Round-trip through parts keeps the invariant check honest.
        let ok = Batch::from_parts(
            b.natural().clone(),
            b.adversarial().clone(),
            b.noise().clone(),
            vec![0, 1],
        );
        assert!(ok.is_ok());
        let bad = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(Batch::from_parts(nat, bad, noise, vec![0, 1]).is_err());
    }

    #[test]
    fn batch_gather_preserves_rows() {
        let s = generate_synthetic(DatasetKind::TwoGaussians, 10, 3, 2).unwrap();
        let b = Batch::natural_only(s.inputs.clone(), s.labels.clone()).unwrap();
        let g = b.gather(&[4, 1]).unwrap();
        assert_eq!(g.natural().row(0), s.inputs.row(4));
        assert_eq!(g.labels(), &[s.labels[4], s.labels[1]]);
    }
}
