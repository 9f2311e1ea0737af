//! Labelled datasets, CSV I/O, run manifests and the synthetic
//! channel-distortion benchmark.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{FilmLayer, FilmParams};
use crate::error::{FitError, Result};
use crate::numerics::Matrix;

/// Feature matrix with integer class labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(FitError::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FitError::InsufficientData(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(FitError::InsufficientData("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Example count per class, length `num_classes`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Classes with at least one example, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Row indices of class `c`, in dataset order.
    pub fn indices_of(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rows `idx` in the given order, keeping the class vocabulary.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Keeps only examples whose class is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    /// Keeps the first `shots` examples of every class (dataset order).
    pub fn take_shots(&self, shots: usize) -> Self {
        let mut seen = vec![0; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                seen[c] += 1;
                seen[c] <= shots
            })
            .collect();
        self.subset(&idx)
    }

    /// Appends `other` after `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(FitError::DimensionMismatch(format!(
                "concat {}-dim with {}-dim",
                self.dim(),
                other.dim()
            )));
        }
        let dim = self.dim().max(other.dim());
        let mut data = self.features.as_slice().to_vec();
        data.extend_from_slice(other.features.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(
            Matrix::from_vec(labels.len(), dim, data)?,
            labels,
            self.num_classes.max(other.num_classes),
        )
    }
}

/// Reads `d_in` feature columns followed by one integer label column. A
/// header row is detected when its first field is not numeric. The class
/// count is the largest label plus one.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabelledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if row == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(FitError::RaggedRows {
                row,
                expected,
                found: record.len(),
            });
        }
        if expected < 2 {
            return Err(FitError::Parse {
                row,
                column: 0,
                message: "need at least one feature column and a label column".into(),
            });
        }
        for (column, field) in record.iter().enumerate().take(expected - 1) {
            let v: f64 = field.parse().map_err(|e| FitError::Parse {
                row,
                column,
                message: format!("{e}: {field:?}"),
            })?;
            data.push(v);
        }
        let field = &record[expected - 1];
        let label: usize = field.parse().map_err(|e| FitError::Parse {
            row,
            column: expected - 1,
            message: format!("{e}: {field:?}"),
        })?;
        labels.push(label);
    }
    let dim = width.map_or(0, |w| w - 1);
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabelledDataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, num_classes)
}

pub fn save_csv(d: &LabelledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.example(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(d.labels()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to rerun an experiment exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    pub spec: serde_json::Value,
    pub module_versions: BTreeMap<String, String>,
    pub git_describe: String,
    pub config_hash: String,
}

impl RunManifest {
    pub fn new<T: Serialize>(seed: u64, config: &T, git_describe: impl Into<String>) -> Result<Self> {
        let spec = serde_json::to_value(config)?;
        let mut module_versions = BTreeMap::new();
        module_versions.insert("fit-core".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Ok(Self {
            seed,
            config_hash: config_hash(&spec)?,
            spec,
            module_versions,
            git_describe: git_describe.into(),
        })
    }
}

/// SHA-256 of the config's canonical JSON encoding (object keys sorted).
pub fn config_hash(config: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_run_manifest(manifest: &RunManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_run_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

/// Synthetic benchmark: latent class Gaussians observed through a shared
/// per-channel affine distortion `x_j = s_j·z_j + t_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Latent dimension; the first `num_classes` channels carry the class
    /// means, the rest are class-independent nuisance channels.
    pub latent_dim: usize,
    /// Distance of every class mean from the origin along its own axis.
    pub separation: f64,
    /// Isotropic within-class standard deviation.
    pub noise_std: f64,
    /// Scales are drawn log-uniformly from `[1/d, d]`, shifts uniformly from
    /// `[-(d-1), d-1]`. `1.0` disables the distortion.
    pub distortion_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            latent_dim: 32,
            separation: 3.0,
            noise_std: 1.0,
            distortion_scale: 5.0,
            train_per_class: 10,
            test_per_class: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: LabelledDataset,
    pub test: LabelledDataset,
    /// FiLM setting that exactly undoes the distortion on an
    /// identity-with-film backbone.
    pub oracle_film: FilmParams,
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.latent_dim < self.num_classes {
            return Err(FitError::Config(format!(
                "latent_dim ({}) must be >= num_classes ({}) > 0",
                self.latent_dim, self.num_classes
            )));
        }
        if !(self.distortion_scale >= 1.0) || !(self.noise_std > 0.0) {
            return Err(FitError::Config(
                "distortion_scale must be >= 1 and noise_std > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Class `c` mean: `separation·e_c` (vertices of a scaled simplex).
fn latent_mean(spec: &SynthSpec, c: usize, j: usize) -> f64 {
    if j == c {
        spec.separation
    } else {
        0.0
    }
}

fn draw(
    spec: &SynthSpec,
    per_class: usize,
    scales: &[f64],
    shifts: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<LabelledDataset> {
    let d = spec.latent_dim;
    let n = per_class * spec.num_classes;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so that "first k of each class" is a natural prefix.
    for _ in 0..per_class {
        for c in 0..spec.num_classes {
            for j in 0..d {
                let eps: f64 = StandardNormal.sample(rng);
                let z = latent_mean(spec, c, j) + spec.noise_std * eps;
                data.push(scales[j] * z + shifts[j]);
            }
            labels.push(c);
        }
    }
    LabelledDataset::new(Matrix::from_vec(n, d, data)?, labels, spec.num_classes)
}

pub fn generate_synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.latent_dim;
    let log_scale = spec.distortion_scale.ln();
    let max_shift = spec.distortion_scale - 1.0;
    let scales: Vec<f64> = (0..d)
        .map(|_| (log_scale * rng.random_range(-1.0..=1.0)).exp())
        .collect();
    let shifts: Vec<f64> = (0..d)
        .map(|_| max_shift * rng.random_range(-1.0..=1.0))
        .collect();
    let train = draw(spec, spec.train_per_class, &scales, &shifts, &mut rng)?;
    let test = draw(spec, spec.test_per_class, &scales, &shifts, &mut rng)?;
    let oracle_film = FilmParams::new(vec![FilmLayer::new(
        scales.iter().map(|s| 1.0 / s).collect(),
        scales.iter().zip(&shifts).map(|(s, t)| -t / s).collect(),
    )?]);
    Ok(SynthData {
        train,
        test,
        oracle_film,
        scales,
        shifts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LabelledDataset {
        LabelledDataset::new(
            Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]),
            vec![0, 1, 0],
            2,
        )
        .unwrap()
    }

    #[test]
    fn counts_and_indices() {
        let d = toy();
        assert_eq!(d.class_counts(), vec![2, 1]);
        assert_eq!(d.indices_of(0), vec![0, 2]);
        assert_eq!(d.take_shots(1).labels(), &[0, 1]);
        assert_eq!(d.filter_classes(&[1]).len(), 1);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(LabelledDataset::new(Matrix::zeros(1, 1), vec![3], 2).is_err());
    }

    #[test]
    fn csv_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "1.5,2,0\n3,4,1\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!((d.len(), d.dim()), (2, 2));
    }

    #[test]
    fn csv_infers_class_count_from_max_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,b,label\n1,2,0\n3,4,3\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!(d.num_classes(), 4);
        assert_eq!(d.class_counts(), vec![1, 0, 0, 1]);
    }

    #[test]
    fn csv_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "1,2,0\n3,x,1\n").unwrap();
        match load_csv(&p) {
            Err(FitError::Parse { row: 1, column: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "1,2,0\n3,1\n").unwrap();
        assert!(matches!(
            load_csv(&p),
            Err(FitError::RaggedRows { row: 1, expected: 3, found: 2 })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let data = generate_synth(&SynthSpec {
            train_per_class: 3,
            test_per_class: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        save_csv(&data.train, &p).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.labels(), data.train.labels());
        assert!(back.features().max_abs_diff(data.train.features()) <= 1e-12);
    }

    #[test]
    fn synth_without_distortion_has_identity_oracle() {
        let data = generate_synth(&SynthSpec {
            distortion_scale: 1.0,
            ..SynthSpec::default()
        })
        .unwrap();
        assert!(data.oracle_film.is_identity());
    }

    #[test]
    fn synth_is_deterministic_and_oracle_inverts() {
        let spec = SynthSpec::default();
        let a = generate_synth(&spec).unwrap();
        let b = generate_synth(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train.example(0), a.test.example(0));
        let layer = &a.oracle_film.layers()[0];
        for j in 0..spec.latent_dim {
            let z = 0.37 * j as f64 - 1.0;
            let x = a.scales[j] * z + a.shifts[j];
            let back = layer.gamma()[j] * x + layer.beta()[j];
            assert!((back - z).abs() < 1e-12);
        }
    }

    #[test]
    fn manifest_hash_tracks_config() {
        let a = RunManifest::new(1, &SynthSpec::default(), "g").unwrap();
        let b = RunManifest::new(1, &SynthSpec::default(), "g").unwrap();
        assert_eq!(a, b);
        let c = RunManifest::new(
            1,
            &SynthSpec {
                separation: 3.5,
                ..SynthSpec::default()
            },
            "g",
        )
        .unwrap();
        assert_ne!(a.config_hash, c.config_hash);

        let dir = tempfile::tempdir().unwrap();
        save_run_manifest(&a, dir.path().join("a.json")).unwrap();
        save_run_manifest(&b, dir.path().join("b.json")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.json")).unwrap(),
            std::fs::read(dir.path().join("b.json")).unwrap()
        );
        assert_eq!(load_run_manifest(dir.path().join("a.json")).unwrap(), a);
    }
}
