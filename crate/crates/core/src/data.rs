//! Dataset loading, preprocessing and synthetic generators.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::polynomial_design;
use crate::rng::{fill_standard_normal, standard_normal_vec, substream, tag};

/// Column-wise affine map `(x − μ_j) / s_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Divisor used for the variance: `n − ddof`.
    pub ddof: usize,
}

impl Standardization {
    /// Population statistics (divisor `n`). Constant columns get `s_j = 1`.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / n;
            means.push(m);
            stds.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Self { means, stds, ddof: 0 }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.means[j]) / self.stds[j])
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * self.stds[j] + self.means[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

/// Feature matrix with labels or regression targets.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub standardization: Option<Standardization>,
    pub split: SplitTag,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> TabularDataset {
        TabularDataset {
            features: self.features.select_rows(idx),
            targets: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.targets[i])),
            standardization: self.standardization.clone(),
            split: self.split,
        }
    }

    /// Integer class labels, for targets that hold small non-negative integers.
    pub fn class_labels(&self) -> Vec<usize> {
        self.targets.iter().map(|&t| t as usize).collect()
    }
}

/// Parses the original Wisconsin breast cancer file: id, nine integer features,
/// class 2 (benign) or 4 (malignant). Rows with a `?` are dropped. Features are
/// left unscaled.
pub fn load_wisconsin_raw(path: impl AsRef<Path>) -> Result<TabularDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_wisconsin(&text)
}

/// [`load_wisconsin_raw`] followed by standardization over all rows.
pub fn load_wisconsin(path: impl AsRef<Path>) -> Result<TabularDataset> {
    let mut ds = load_wisconsin_raw(path)?;
    let s = Standardization::fit(&ds.features);
    ds.features = s.apply(&ds.features);
    ds.standardization = Some(s);
    Ok(ds)
}

pub fn parse_wisconsin(text: &str) -> Result<TabularDataset> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 11 {
            return Err(err(format!("expected 11 columns, found {}", fields.len())));
        }
        if fields.contains(&"?") {
            continue;
        }
        for f in &fields[1..10] {
            let v: f64 = f.parse().map_err(|_| err(format!("non-numeric feature {f:?}")))?;
            feats.push(v);
        }
        labels.push(match fields[10] {
            "2" => 0.0,
            "4" => 1.0,
            other => return Err(err(format!("class must be 2 or 4, found {other:?}"))),
        });
    }
    let n = labels.len();
    Ok(TabularDataset {
        features: DMatrix::from_row_slice(n, 9, &feats),
        targets: DVector::from_vec(labels),
        standardization: None,
        split: SplitTag::Full,
    })
}

/// Per-class shuffled split; each class contributes `round(fraction · n_c)`
/// samples to the first part.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("split fraction {fraction} outside [0, 1]")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Dataset(format!("class {c} has fewer than 2 samples")));
        }
        idx.shuffle(&mut substream(seed, tag::SPLIT, c as u64, 0));
        let k = (fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Train/test pair with both halves standardized by train statistics.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: TabularDataset,
    pub test: TabularDataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

pub fn split_and_standardize(raw: &TabularDataset, fraction: f64, seed: u64) -> Result<SplitDataset> {
    let (tr, te) = stratified_split(&raw.class_labels(), fraction, seed)?;
    let mut train = raw.rows(&tr);
    let mut test = raw.rows(&te);
    let s = Standardization::fit(&train.features);
    train.features = s.apply(&train.features);
    test.features = s.apply(&test.features);
    train.standardization = Some(s.clone());
    test.standardization = Some(s);
    train.split = SplitTag::Train;
    test.split = SplitTag::Test;
    Ok(SplitDataset {
        train,
        test,
        train_indices: tr,
        test_indices: te,
        seed,
    })
}

/// Everything needed to rebuild a split exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub standardization: Option<Standardization>,
}

impl SplitDataset {
    pub fn metadata(&self) -> SplitMetadata {
        SplitMetadata {
            seed: self.seed,
            train_indices: self.train_indices.clone(),
            test_indices: self.test_indices.clone(),
            standardization: self.train.standardization.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorKind {
    Gaussian,
    StudentT { nu: f64 },
}

/// Synthetic linear-regression data.
#[derive(Debug, Clone)]
pub struct LinRegData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w_true: DVector<f64>,
}

/// Features `N(0, I)`, weights `N(0, α⁻¹ I)`, errors with scale σ.
pub fn gen_linreg_data(n_obs: usize, n_features: usize, alpha: f64, sigma: f64, errors: ErrorKind, seed: u64) -> LinRegData {
    let mut rng = substream(seed, tag::DATA, 0, 0);
    let x = DMatrix::from_vec(n_obs, n_features, standard_normal_vec(&mut rng, n_obs * n_features));
    let w_true = DVector::from_vec(standard_normal_vec(&mut rng, n_features)) / alpha.sqrt();
    let eps = draw_errors(n_obs, sigma, errors, &mut rng);
    let y = &x * &w_true + eps;
    LinRegData { x, y, w_true }
}

fn draw_errors<R: Rng + ?Sized>(n: usize, sigma: f64, errors: ErrorKind, rng: &mut R) -> DVector<f64> {
    let mut z = vec![0.0; n];
    fill_standard_normal(rng, &mut z);
    if let ErrorKind::StudentT { nu } = errors {
        let chi = ChiSquared::new(nu).expect("degrees of freedom must be positive");
        for v in z.iter_mut() {
            *v /= (chi.sample(rng) / nu).sqrt();
        }
    }
    DVector::from_vec(z) * sigma
}

/// Synthetic polynomial-regression data on `x ~ U[−2.5, 2.5]`.
#[derive(Debug, Clone)]
pub struct PolyData {
    pub x: Vec<f64>,
    pub y: DVector<f64>,
    pub w_true: DVector<f64>,
}

pub fn gen_poly_data(n_obs: usize, order: usize, alpha: f64, sigma_sq: f64, seed: u64) -> PolyData {
    let mut rng = substream(seed, tag::DATA, 0, 0);
    let x: Vec<f64> = (0..n_obs).map(|_| rng.random_range(-2.5..=2.5)).collect();
    let w_true = DVector::from_vec(standard_normal_vec(&mut rng, order + 1)) / alpha.sqrt();
    let eps = draw_errors(n_obs, sigma_sq.sqrt(), ErrorKind::Gaussian, &mut rng);
    let y = polynomial_design(&x, order) * &w_true + eps;
    PolyData { x, y, w_true }
}

/// Two interleaved half circles with Gaussian jitter; labels 0 and 1 alternate.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> TabularDataset {
    let mut rng = substream(seed, tag::DATA, 0, 0);
    let mut feats = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = PI * rng.random::<f64>();
        let c = i % 2;
        let (a, b) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let jitter = standard_normal_vec(&mut rng, 2);
        feats.push(a + noise * jitter[0]);
        feats.push(b + noise * jitter[1]);
        labels.push(c as f64);
    }
    TabularDataset {
        features: DMatrix::from_row_slice(n, 2, &feats),
        targets: DVector::from_vec(labels),
        standardization: None,
        split: SplitTag::Full,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wisconsin_line(id: usize, missing: bool, class: u8) -> String {
        let f = if missing { "?" } else { "3" };
        format!("{id},5,1,1,1,2,{f},3,1,1,{class}")
    }

    #[test]
    fn canonical_file_has_683_complete_rows() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/breast-cancer-wisconsin.data");
        let ds = load_wisconsin(path).unwrap();
        assert_eq!((ds.len(), ds.n_features()), (683, 9));
        for col in ds.features.column_iter() {
            assert!((col.sum() / 683.0).abs() < 1e-9);
            assert!((col.norm_squared() / 683.0 - 1.0).abs() < 1e-9);
        }
        assert_eq!(ds.targets.iter().filter(|&&v| v == 1.0).count(), 239);
    }

    #[test]
    fn missing_rows_are_dropped() {
        let text: Vec<String> = (0..10).map(|i| wisconsin_line(i, i == 4, if i % 2 == 0 { 2 } else { 4 })).collect();
        let ds = parse_wisconsin(&text.join("\n")).unwrap();
        assert_eq!(ds.len(), 9);
    }

    #[test]
    fn malformed_rows_report_the_line() {
        let text = format!("{}\n1,2,3\n", wisconsin_line(0, false, 2));
        assert!(matches!(parse_wisconsin(&text), Err(Error::Data { line: 2, .. })));
        let text = format!("{}\n{}", wisconsin_line(0, false, 2), wisconsin_line(1, false, 3));
        assert!(matches!(parse_wisconsin(&text), Err(Error::Data { line: 2, .. })));
        let text = "1,a,1,1,1,2,3,3,1,1,2";
        assert!(matches!(parse_wisconsin(text), Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn standardization_round_trip() {
        let mut rng = substream(0, tag::DATA, 0, 0);
        let x = DMatrix::from_vec(30, 4, standard_normal_vec(&mut rng, 120)) * 7.0 + DMatrix::from_element(30, 4, 3.0);
        let s = Standardization::fit(&x);
        assert!((s.invert(&s.apply(&x)) - &x).amax() < 1e-10);
    }

    #[test]
    fn split_examples() {
        let labels: Vec<usize> = (0..100).map(|i| (i >= 60) as usize).collect();
        let (tr, te) = stratified_split(&labels, 0.8, 3).unwrap();
        assert_eq!(tr.iter().filter(|&&i| labels[i] == 0).count(), 48);
        assert_eq!(tr.iter().filter(|&&i| labels[i] == 1).count(), 32);
        assert_eq!(te.len(), 20);
        let (tr1, te1) = stratified_split(&labels, 1.0, 3).unwrap();
        assert_eq!((tr1.len(), te1.len()), (100, 0));
        assert_eq!(stratified_split(&labels, 0.8, 3).unwrap(), (tr, te));
        assert!(stratified_split(&[0, 0, 1], 0.5, 0).is_err());
    }

    #[test]
    fn test_half_uses_train_statistics() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/breast-cancer-wisconsin.data");
        let raw = load_wisconsin_raw(path).unwrap();
        let sd = split_and_standardize(&raw, 0.8, 0).unwrap();
        let s = sd.train.standardization.as_ref().unwrap();
        let back = s.invert(&sd.test.features);
        assert!((back - raw.features.select_rows(&sd.test_indices)).amax() < 1e-10);
        let meta = serde_json::to_string(&sd.metadata()).unwrap();
        let parsed: SplitMetadata = serde_json::from_str(&meta).unwrap();
        assert_eq!(parsed.test_indices, sd.test_indices);
    }

    #[test]
    fn noiseless_generators_are_exact() {
        let d = gen_linreg_data(20, 3, 1.0, 0.0, ErrorKind::Gaussian, 1);
        assert!((&d.x * &d.w_true - &d.y).amax() == 0.0);
        let p = gen_poly_data(20, 1, 1.0, 0.0, 2);
        for (i, x) in p.x.iter().enumerate() {
            assert!((p.w_true[0] + p.w_true[1] * x - p.y[i]).abs() < 1e-12);
            assert!((-2.5..=2.5).contains(x));
        }
        let c = gen_poly_data(50, 0, 1.0, 1.0, 2);
        assert_eq!(c.w_true.len(), 1);
    }

    #[test]
    fn gaussian_error_variance() {
        let n = 100_000;
        let d = gen_linreg_data(n, 2, 1.0, 1.5, ErrorKind::Gaussian, 4);
        let r = &d.y - &d.x * &d.w_true;
        let var = r.norm_squared() / n as f64;
        let se = 2.25 * (2.0 / n as f64).sqrt();
        assert!((var - 2.25).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn student_t_errors_are_heavy_tailed() {
        let n = 100_000;
        let d = gen_linreg_data(n, 2, 1.0, 1.0, ErrorKind::StudentT { nu: 4.0 }, 5);
        let r = &d.y - &d.x * &d.w_true;
        let m2 = r.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let m4 = r.iter().map(|v| v.powi(4)).sum::<f64>() / n as f64;
        let kurt = m4 / (m2 * m2);
        let gaussian_se = (24.0 / n as f64).sqrt();
        assert!(kurt > 3.0 + 3.0 * gaussian_se, "{kurt}");
        assert!(kurt - 3.0 > 1.0);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_poly_data(30, 3, 1.0, 7.5, 9);
        let b = gen_poly_data(30, 3, 1.0, 7.5, 9);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let m = two_moons(40, 0.1, 1);
        assert_eq!(m.features, two_moons(40, 0.1, 1).features);
        assert_eq!(m.targets.iter().filter(|&&v| v == 1.0).count(), 20);
    }
}
