//! Synthetic datasets: class-imbalanced Gaussian mixtures and a two-factor
//! dataset with a balanced primary factor and a skewed secondary factor.
//!
//! Rows are left unnormalized; the trainer normalizes embeddings itself.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Normal};
use serde::{Deserialize, Serialize};

use crate::distributions::{build_prior, PriorSpec};
use crate::error::{Error, Result};
use crate::sampling::LabeledIndex;
use crate::DataMatrix;

const BINARY_MAGIC: &[u8; 4] = b"PLDS";
const MEAN_PLACEMENT_RETRIES: usize = 10_000;

/// One generative factor: `num_values` values with means `separation·e_v`
/// in an `embedding_dim`-dimensional subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub num_values: usize,
    pub distribution: PriorSpec,
    pub embedding_dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
}

impl FactorSpec {
    pub fn primary_default() -> Self {
        Self {
            num_values: 10,
            distribution: PriorSpec::Uniform,
            embedding_dim: 16,
            separation: 1.0,
            noise_sigma: 0.3,
        }
    }

    pub fn secondary_default() -> Self {
        Self {
            distribution: PriorSpec::PowerLaw { tau: 0.5 },
            ..Self::primary_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_values == 0 {
            return Err(Error::InvalidArgument("factor needs at least one value".into()));
        }
        if self.embedding_dim < self.num_values {
            return Err(Error::InvalidArgument(format!(
                "embedding_dim {} < num_values {}",
                self.embedding_dim, self.num_values
            )));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::InvalidArgument(format!("separation = {}", self.separation)));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("noise_sigma = {}", self.noise_sigma)));
        }
        self.distribution.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub x: DataMatrix,
    pub primary_labels: Vec<usize>,
    pub secondary_labels: Option<Vec<usize>>,
}

impl SynthDataset {
    pub fn new(x: DataMatrix, primary_labels: Vec<usize>, secondary_labels: Option<Vec<usize>>) -> Result<Self> {
        let n = x.nrows();
        if primary_labels.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: primary_labels.len(),
            });
        }
        if let Some(s) = &secondary_labels {
            if s.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: s.len(),
                });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            x,
            primary_labels,
            secondary_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows paired with their primary labels, for class-aware samplers.
    pub fn labeled_indices(&self) -> Vec<LabeledIndex> {
        self.primary_labels
            .iter()
            .enumerate()
            .map(|(index, &class_id)| LabeledIndex { index, class_id })
            .collect()
    }

    fn label_columns(&self) -> Vec<(&'static str, &[usize])> {
        let mut cols = vec![("primary", self.primary_labels.as_slice())];
        if let Some(s) = &self.secondary_labels {
            cols.push(("secondary", s.as_slice()));
        }
        cols
    }

    /// One row per sample: feature columns `x0..`, then label columns.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let labels = self.label_columns();
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.extend(labels.iter().map(|(name, _)| name.to_string()));
        wr.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.x.outer_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.extend(labels.iter().map(|(_, l)| l[i].to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let d = header.iter().take_while(|h| h.starts_with('x')).count();
        let has_secondary = match header.iter().skip(d).collect::<Vec<_>>().as_slice() {
            ["primary"] => false,
            ["primary", "secondary"] => true,
            other => return Err(Error::Parse(format!("unexpected label columns {other:?}"))),
        };
        let mut values = Vec::new();
        let mut primary = Vec::new();
        let mut secondary = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            for j in 0..d {
                values.push(parse_field::<f64>(&rec[j])?);
            }
            primary.push(parse_field::<usize>(&rec[d])?);
            if has_secondary {
                secondary.push(parse_field::<usize>(&rec[d + 1])?);
            }
        }
        let n = primary.len();
        let x = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(x, primary, has_secondary.then_some(secondary))
    }

    /// Little-endian layout: magic, N, d and label-column count as u64, the
    /// row-major f64 features, then each label column as u64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let labels = self.label_columns();
        w.write_all(BINARY_MAGIC)?;
        for v in [self.len(), self.dim(), labels.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.x.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for (_, col) in labels {
            for &l in col {
                w.write_all(&(l as u64).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Parse("not a dataset file".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let n = next(&mut r)? as usize;
        let d = next(&mut r)? as usize;
        let label_cols = next(&mut r)? as usize;
        if !(1..=2).contains(&label_cols) {
            return Err(Error::Parse(format!("{label_cols} label columns")));
        }
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            values.push(f64::from_bits(next(&mut r)?));
        }
        let mut cols = Vec::new();
        for _ in 0..label_cols {
            cols.push((0..n).map(|_| next(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
        }
        let secondary = (label_cols == 2).then(|| cols.pop().expect("two columns"));
        let primary = cols.pop().expect("one column");
        let x = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(x, primary, secondary)
    }

    /// Writes CSV for `.csv` paths and the binary layout otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "csv") {
            self.write_csv(file)
        } else {
            self.write_binary(file)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        if path.extension().is_some_and(|e| e == "csv") {
            Self::read_csv(file)
        } else {
            Self::read_binary(file)
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e: T::Err| Error::Parse(format!("{s:?}: {e}")))
}

fn place_means(classes: usize, d: usize, separation: f64, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let mut means = Array2::zeros((classes, d));
    if d >= classes {
        // Scaled axes: every pair is exactly `separation` apart.
        let a = separation / 2f64.sqrt();
        for c in 0..classes {
            means[[c, c]] = a;
        }
        return Ok(means);
    }
    let half = separation * classes as f64;
    let mut placed = 0;
    for _ in 0..MEAN_PLACEMENT_RETRIES {
        let cand: Vec<f64> = (0..d).map(|_| rng.random_range(-half..half)).collect();
        let far = (0..placed).all(|c| {
            let d2: f64 = means.row(c).iter().zip(&cand).map(|(m, v)| (m - v) * (m - v)).sum();
            d2 >= separation * separation
        });
        if far {
            means.row_mut(placed).assign(&ndarray::Array1::from(cand));
            placed += 1;
            if placed == classes {
                return Ok(means);
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place {classes} means {separation} apart in {d} dimensions"
    )))
}

/// Isotropic Gaussian clusters with per-class counts drawn from
/// `class_distribution`. Every class receives at least one point; the
/// remaining `n − classes` points are assigned multinomially.
pub fn gaussian_mixture(
    classes: usize,
    class_distribution: &PriorSpec,
    n: usize,
    d: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if classes == 0 || d == 0 {
        return Err(Error::InvalidArgument("classes and d must be positive".into()));
    }
    if n < classes {
        return Err(Error::InvalidArgument(format!("N = {n} < classes = {classes}")));
    }
    if !(separation > 0.0) || !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("separation must be positive, noise non-negative".into()));
    }
    let probs = build_prior(class_distribution, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = place_means(classes, d, separation, &mut rng)?;
    let pick = WeightedIndex::new(probs.as_slice()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut labels: Vec<usize> = (0..classes).collect();
    labels.extend((classes..n).map(|_| pick.sample(&mut rng)));
    labels.sort_unstable();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut x = Array2::zeros((n, d));
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = means[[c, j]] + noise.sample(&mut rng);
        }
    }
    SynthDataset::new(x, labels, None)
}

/// Rows `concat(mean_primary[a] + ε₁, mean_secondary[b] + ε₂)` with a and b
/// drawn independently from their factor distributions.
pub fn two_factor_dataset(primary: &FactorSpec, secondary: &FactorSpec, n: usize, seed: u64) -> Result<SynthDataset> {
    primary.validate()?;
    secondary.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("N must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = primary.embedding_dim;
    let mut x = Array2::zeros((n, d1 + secondary.embedding_dim));
    let mut labels = Vec::new();
    for (offset, spec) in [(0, primary), (d1, secondary)] {
        let probs = build_prior(&spec.distribution, spec.num_values)?;
        let pick = WeightedIndex::new(probs.as_slice()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut factor = Vec::with_capacity(n);
        for i in 0..n {
            let v = pick.sample(&mut rng);
            factor.push(v);
            let mut block = x.slice_mut(s![i, offset..offset + spec.embedding_dim]);
            block.mapv_inplace(|_| noise.sample(&mut rng));
            block[v] += spec.separation;
        }
        labels.push(factor);
    }
    let secondary_labels = labels.pop();
    let primary_labels = labels.pop().expect("two factors");
    SynthDataset::new(x, primary_labels, secondary_labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAugmentation {
    pub noise_sigma: f64,
    /// Fraction of anchor coordinates zeroed, each independently.
    pub mask_fraction: f64,
}

impl ViewAugmentation {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("view noise {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::InvalidArgument(format!("mask fraction {}", self.mask_fraction)));
        }
        Ok(())
    }
}

/// Two noisy views of each row; only the anchor view is masked.
pub fn make_views(x: &DataMatrix, aug: &ViewAugmentation, seed: u64) -> Result<(DataMatrix, DataMatrix)> {
    aug.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = Bernoulli::new(aug.mask_fraction).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut anchor = x.clone();
    let mut target = x.clone();
    if aug.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, aug.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        anchor.mapv_inplace(|v| v + noise.sample(&mut rng));
        target.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    if aug.mask_fraction > 0.0 {
        anchor.mapv_inplace(|v| if mask.sample(&mut rng) { 0.0 } else { v });
    }
    Ok((anchor, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{adjusted_rand_index, lloyd_restarts};
    use std::collections::BTreeSet;

    fn factor(values: usize, dist: PriorSpec, noise: f64) -> FactorSpec {
        FactorSpec {
            num_values: values,
            distribution: dist,
            embedding_dim: values,
            separation: 1.0,
            noise_sigma: noise,
        }
    }

    #[test]
    fn well_separated_mixture_recovered() {
        let ds = gaussian_mixture(2, &PriorSpec::Uniform, 60, 2, 20.0, 1.0, 4).unwrap();
        let fit = lloyd_restarts(&ds.x, 2, 5, 0, 100, 1e-12).unwrap();
        let ari = adjusted_rand_index(fit.partition.assignment(), &ds.primary_labels).unwrap();
        assert!(ari > 0.99);
    }

    #[test]
    fn one_point_per_class() {
        let ds = gaussian_mixture(3, &PriorSpec::PowerLaw { tau: 2.0 }, 3, 4, 2.0, 1e-9, 1).unwrap();
        assert_eq!(ds.primary_labels, vec![0, 1, 2]);
        let a = 2.0 / 2f64.sqrt();
        assert!((ds.x[[1, 1]] - a).abs() < 1e-6);
    }

    #[test]
    fn low_dimensional_means_are_separated() {
        let ds = gaussian_mixture(5, &PriorSpec::Uniform, 5, 1, 3.0, 1e-12, 9).unwrap();
        let mut pts: Vec<f64> = ds.x.column(0).to_vec();
        pts.sort_by(f64::total_cmp);
        assert!(pts.windows(2).all(|w| w[1] - w[0] >= 3.0 - 1e-9));
        assert!(gaussian_mixture(5, &PriorSpec::Uniform, 4, 1, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn counts_sum_to_n() {
        let ds = gaussian_mixture(4, &PriorSpec::PowerLaw { tau: 1.5 }, 103, 3, 1.0, 0.5, 2).unwrap();
        assert_eq!(ds.len(), 103);
        assert!((0..4).all(|c| ds.primary_labels.contains(&c)));
    }

    #[test]
    fn near_noiseless_two_factor_has_100_points() {
        let p = factor(10, PriorSpec::Uniform, 1e-12);
        let s = factor(10, PriorSpec::PowerLaw { tau: 0.5 }, 1e-12);
        let ds = two_factor_dataset(&p, &s, 20_000, 5).unwrap();
        let distinct: BTreeSet<Vec<i64>> = ds
            .x
            .outer_iter()
            .map(|r| r.iter().map(|v| (v * 1e6).round() as i64).collect())
            .collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn seeded_generation_is_identical() {
        let a = two_factor_dataset(&FactorSpec::primary_default(), &FactorSpec::secondary_default(), 50, 3).unwrap();
        let b = two_factor_dataset(&FactorSpec::primary_default(), &FactorSpec::secondary_default(), 50, 3).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_binary(&mut x).unwrap();
        b.write_binary(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let ds = two_factor_dataset(&factor(3, PriorSpec::Uniform, 0.2), &factor(2, PriorSpec::Uniform, 0.2), 7, 1).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(SynthDataset::read_csv(buf.as_slice()).unwrap(), ds);
        let mut bin = Vec::new();
        ds.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 4 + 24 + 7 * 5 * 8 + 2 * 7 * 8);
        assert_eq!(SynthDataset::read_binary(bin.as_slice()).unwrap(), ds);
        assert!(SynthDataset::read_binary(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn factor_validation() {
        let mut f = FactorSpec::primary_default();
        f.embedding_dim = 4;
        assert!(f.validate().is_err());
        let mut f = FactorSpec::primary_default();
        f.noise_sigma = 0.0;
        assert!(f.validate().is_err());
    }

    #[test]
    fn views() {
        let x = Array2::from_shape_fn((4, 10), |(i, j)| (i * 10 + j) as f64 + 1.0);
        let none = ViewAugmentation {
            noise_sigma: 0.0,
            mask_fraction: 0.0,
        };
        let (a, t) = make_views(&x, &none, 0).unwrap();
        assert_eq!(a, x);
        assert_eq!(t, x);

        let half = ViewAugmentation {
            noise_sigma: 0.0,
            mask_fraction: 0.5,
        };
        let big = Array2::from_elem((2000, 10), 1.0);
        let (a, t) = make_views(&big, &half, 1).unwrap();
        assert_eq!(t, big);
        let zeros_per_row = a.iter().filter(|&&v| v == 0.0).count() as f64 / 2000.0;
        assert!((zeros_per_row - 5.0).abs() < 0.1);

        let noisy = ViewAugmentation {
            noise_sigma: 0.1,
            mask_fraction: 0.2,
        };
        assert_eq!(make_views(&x, &noisy, 9).unwrap(), make_views(&x, &noisy, 9).unwrap());
        assert!(make_views(&x, &ViewAugmentation { noise_sigma: 0.1, mask_fraction: 1.0 }, 0).is_err());
    }
}
