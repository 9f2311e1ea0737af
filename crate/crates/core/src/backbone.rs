//! Frozen feature extractors with FiLM layers.
//!
//! Two desk-scale backbones are provided: an identity map followed by one
//! FiLM layer (for precomputed or synthetic embeddings), and a frozen random
//! MLP where every hidden layer is `linear -> standardize -> FiLM -> ReLU`
//! and a final FiLM modulates the `d_b` output. The frozen weights are
//! regenerated from the recorded seed and never receive gradients; only the
//! FiLM scales and shifts are trainable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FitError, Result};
use crate::numerics::autodiff::{film_rows, standardize_rows};
use crate::numerics::{Graph, Matrix, NodeId};

/// FiLM parameter count of a ResNet-50 with one FiLM layer per block plus one
/// at the end of the backbone.
pub const RESNET50_FILM_PARAMS: usize = 11_648;

/// Epsilon of the per-layer standardization.
pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    #[serde(alias = "identity")]
    IdentityWithFilm,
    #[serde(alias = "mlp")]
    MlpWithFilm,
}

/// Serializable description of a backbone. The frozen weights are a pure
/// function of this document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_dim: usize,
    /// Hidden layer widths (MLP only).
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Output embedding dimension `d_b`.
    pub d_b: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BackboneSpec {
    pub fn identity(d_b: usize) -> Self {
        Self {
            kind: BackboneKind::IdentityWithFilm,
            input_dim: d_b,
            widths: Vec::new(),
            d_b,
            seed: 0,
        }
    }

    pub fn mlp(input_dim: usize, widths: Vec<usize>, d_b: usize, seed: u64) -> Self {
        Self {
            kind: BackboneKind::MlpWithFilm,
            input_dim,
            widths,
            d_b,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_b == 0 || self.input_dim == 0 {
            return Err(FitError::Config("backbone dimensions must be positive".into()));
        }
        match self.kind {
            BackboneKind::IdentityWithFilm if self.input_dim != self.d_b || !self.widths.is_empty() => {
                Err(FitError::Config(
                    "identity-with-film needs input_dim == d_b and no hidden widths".into(),
                ))
            }
            BackboneKind::MlpWithFilm if self.widths.contains(&0) => {
                Err(FitError::Config("hidden widths must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Channel counts at each FiLM placement, front to back.
    pub fn film_widths(&self) -> Vec<usize> {
        let mut w = match self.kind {
            BackboneKind::IdentityWithFilm => Vec::new(),
            BackboneKind::MlpWithFilm => self.widths.clone(),
        };
        w.push(self.d_b);
        w
    }
}

/// `2·Σ` channel widths over all FiLM placements.
pub fn film_param_count(spec: &BackboneSpec) -> usize {
    2 * spec.film_widths().iter().sum::<usize>()
}

#[derive(Debug, Clone)]
struct FrozenLinear {
    /// Stored transposed (in x out) so that `x · w_t` maps rows.
    w_t: Matrix,
    bias: Matrix,
}

/// A built backbone: the spec plus its frozen weights.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    hidden: Vec<FrozenLinear>,
    output: Option<FrozenLinear>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut hidden = Vec::new();
        let mut output = None;
        if spec.kind == BackboneKind::MlpWithFilm {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut fan_in = spec.input_dim;
            for &w in &spec.widths {
                hidden.push(init_linear(fan_in, w, &mut rng));
                fan_in = w;
            }
            output = Some(init_linear(fan_in, spec.d_b, &mut rng));
        }
        Ok(Self {
            spec,
            hidden,
            output,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn d_b(&self) -> usize {
        self.spec.d_b
    }

    pub fn film_widths(&self) -> Vec<usize> {
        self.spec.film_widths()
    }

    pub fn identity_film(&self) -> FilmParams {
        FilmParams::identity(&self.film_widths())
    }

    fn check_psi(&self, psi: &FilmParams) -> Result<()> {
        if psi.widths() != self.film_widths() {
            return Err(FitError::DimensionMismatch(format!(
                "FiLM widths {:?} do not match backbone placements {:?}",
                psi.widths(),
                self.film_widths()
            )));
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim {
            return Err(FitError::DimensionMismatch(format!(
                "input has {cols} features, backbone expects {}",
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    /// Embeds every row of `x`.
    pub fn forward_batch(&self, psi: &FilmParams, x: &Matrix) -> Result<Matrix> {
        self.check_psi(psi)?;
        self.check_input(x.cols())?;
        let layers = psi.layers();
        let mut h = x.clone();
        for (lin, film) in self.hidden.iter().zip(layers) {
            h = h.matmul(&lin.w_t)?;
            add_bias(&mut h, &lin.bias);
            h = standardize_rows(&h, STANDARDIZE_EPS).0;
            h = film_rows(&h, &film.gamma_row(), &film.beta_row());
            h = h.map(|v| v.max(0.0));
        }
        if let Some(lin) = &self.output {
            h = h.matmul(&lin.w_t)?;
            add_bias(&mut h, &lin.bias);
        }
        let last = layers.last().expect("at least the output FiLM");
        Ok(film_rows(&h, &last.gamma_row(), &last.beta_row()))
    }

    pub fn forward(&self, psi: &FilmParams, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .forward_batch(psi, &Matrix::row_vector(x))?
            .into_vec())
    }

    /// The frozen network with every FiLM layer removed.
    pub fn forward_frozen(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x.cols())?;
        let mut h = x.clone();
        for lin in &self.hidden {
            h = h.matmul(&lin.w_t)?;
            add_bias(&mut h, &lin.bias);
            h = standardize_rows(&h, STANDARDIZE_EPS).0;
            h = h.map(|v| v.max(0.0));
        }
        if let Some(lin) = &self.output {
            h = h.matmul(&lin.w_t)?;
            add_bias(&mut h, &lin.bias);
        }
        Ok(h)
    }

    /// Records the forward pass on a tape. `psi` holds the (gamma, beta) row
    /// nodes per FiLM placement; frozen weights enter as constants.
    pub fn forward_graph(&self, g: &mut Graph, psi: &FilmNodes, x: NodeId) -> Result<NodeId> {
        if psi.layers.len() != self.film_widths().len() {
            return Err(FitError::DimensionMismatch(format!(
                "{} FiLM node pairs for {} placements",
                psi.layers.len(),
                self.film_widths().len()
            )));
        }
        self.check_input(g.shape(x).1)?;
        let mut h = x;
        for (lin, &(gamma, beta)) in self.hidden.iter().zip(&psi.layers) {
            let w = g.constant(lin.w_t.clone());
            let b = g.constant(lin.bias.clone());
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            h = g.standardize(h, STANDARDIZE_EPS);
            h = g.film(h, gamma, beta)?;
            h = g.relu(h);
        }
        if let Some(lin) = &self.output {
            let w = g.constant(lin.w_t.clone());
            let b = g.constant(lin.bias.clone());
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
        }
        let &(gamma, beta) = psi.layers.last().expect("output FiLM");
        g.film(h, gamma, beta)
    }
}

fn add_bias(h: &mut Matrix, bias: &Matrix) {
    let b = bias.as_slice();
    for i in 0..h.rows() {
        for (v, &bb) in h.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Scaled Gaussian init with gain √2 (variance `2 / fan_in`), zero bias.
fn init_linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> FrozenLinear {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    FrozenLinear {
        w_t: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
        bias: Matrix::zeros(1, fan_out),
    }
}

/// Per-channel scale and shift of one FiLM placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmLayer {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl FilmLayer {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(FitError::DimensionMismatch(format!(
                "gamma has {} channels, beta {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(Self { gamma, beta })
    }

    /// `γ = 1, β = 0`.
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    fn gamma_row(&self) -> Matrix {
        Matrix::row_vector(&self.gamma)
    }

    fn beta_row(&self) -> Matrix {
        Matrix::row_vector(&self.beta)
    }
}

/// `γ_j·a_j + β_j` per channel.
pub fn film(activations: &[f64], layer: &FilmLayer) -> Result<Vec<f64>> {
    if activations.len() != layer.width() {
        return Err(FitError::DimensionMismatch(format!(
            "{} activations for a {}-channel FiLM layer",
            activations.len(),
            layer.width()
        )));
    }
    Ok(activations
        .iter()
        .zip(layer.gamma.iter().zip(&layer.beta))
        .map(|(a, (g, b))| g * a + b)
        .collect())
}

/// All FiLM layers of a backbone, front to back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmParams {
    layers: Vec<FilmLayer>,
}

/// Tape nodes for a [`FilmParams`]: one `(gamma, beta)` pair per layer.
#[derive(Debug, Clone)]
pub struct FilmNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl FilmNodes {
    pub fn all(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(g, b)| [g, b])
    }
}

impl FilmParams {
    pub fn new(layers: Vec<FilmLayer>) -> Self {
        Self { layers }
    }

    pub fn identity(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&w| FilmLayer::identity(w)).collect(),
        }
    }

    pub fn layers(&self) -> &[FilmLayer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(FilmLayer::width).collect()
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.iter().map(FilmLayer::width).sum::<usize>()
    }

    pub fn is_identity(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.gamma.iter().all(|&g| g == 1.0) && l.beta.iter().all(|&b| b == 0.0))
    }

    /// Flat layout: for each layer, gamma then beta.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.gamma);
            v.extend_from_slice(&l.beta);
        }
        v
    }

    pub fn from_flat(widths: &[usize], flat: &[f64]) -> Result<Self> {
        let need = 2 * widths.iter().sum::<usize>();
        if flat.len() != need {
            return Err(FitError::DimensionMismatch(format!(
                "{} values for FiLM widths {widths:?} (need {need})",
                flat.len()
            )));
        }
        let mut off = 0;
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            let gamma = flat[off..off + w].to_vec();
            let beta = flat[off + w..off + 2 * w].to_vec();
            off += 2 * w;
            layers.push(FilmLayer { gamma, beta });
        }
        Ok(Self { layers })
    }

    /// Registers every gamma and beta as a trainable leaf.
    pub fn to_graph(&self, g: &mut Graph) -> FilmNodes {
        FilmNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (g.trainable(l.gamma_row()), g.trainable(l.beta_row())))
                .collect(),
        }
    }

    /// Same as [`to_graph`](Self::to_graph) but as constants.
    pub fn to_graph_const(&self, g: &mut Graph) -> FilmNodes {
        FilmNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (g.constant(l.gamma_row()), g.constant(l.beta_row())))
                .collect(),
        }
    }

    pub fn squared_distance(&self, other: &FilmParams) -> Result<f64> {
        if self.widths() != other.widths() {
            return Err(FitError::DimensionMismatch("FiLM shapes differ".into()));
        }
        Ok(self
            .flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Sidecar describing a flat little-endian f64 blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilmSidecar {
    pub dtype: String,
    pub count: usize,
    pub layers: Vec<FilmLayerOffsets>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilmLayerOffsets {
    pub index: usize,
    pub width: usize,
    /// Byte offsets into the blob.
    pub gamma_offset: usize,
    pub beta_offset: usize,
}

pub const F64_LE: &str = "f64-le";

impl FilmParams {
    pub fn sidecar(&self) -> FilmSidecar {
        let mut off = 0;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(index, l)| {
                let w = l.width();
                let entry = FilmLayerOffsets {
                    index,
                    width: w,
                    gamma_offset: off * 8,
                    beta_offset: (off + w) * 8,
                };
                off += 2 * w;
                entry
            })
            .collect();
        FilmSidecar {
            dtype: F64_LE.into(),
            count: self.param_count(),
            layers,
        }
    }

    /// Writes the blob at `path` and the sidecar at `path` + `.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_f64_blob(path, &self.flatten())?;
        let mut w = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(&mut w, &self.sidecar())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: FilmSidecar =
            serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
        if sidecar.dtype != F64_LE {
            return Err(FitError::Config(format!("unsupported dtype {}", sidecar.dtype)));
        }
        let flat = read_f64_blob(path)?;
        if flat.len() != sidecar.count {
            return Err(FitError::DimensionMismatch(format!(
                "blob holds {} values, sidecar says {}",
                flat.len(),
                sidecar.count
            )));
        }
        let mut layers = Vec::with_capacity(sidecar.layers.len());
        for l in &sidecar.layers {
            let (g0, b0) = (l.gamma_offset / 8, l.beta_offset / 8);
            if b0 + l.width > flat.len() || g0 + l.width > flat.len() {
                return Err(FitError::DimensionMismatch(format!(
                    "layer {} offsets exceed blob",
                    l.index
                )));
            }
            layers.push(FilmLayer {
                gamma: flat[g0..g0 + l.width].to_vec(),
                beta: flat[b0..b0 + l.width].to_vec(),
            });
        }
        Ok(Self { layers })
    }
}

pub fn sidecar_path(blob: &Path) -> std::path::PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f64_blob(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(FitError::DimensionMismatch(format!(
            "blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Min, quartiles and max (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: quantile_sorted(&v, 0.0),
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: quantile_sorted(&v, 1.0),
        }
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Box-plot summary of one FiLM layer's deviation from identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMagnitude {
    pub layer: usize,
    pub gamma_dev: FiveNumber,
    pub beta_abs: FiveNumber,
}

/// Per-layer summaries of `|γ − 1|` and `|β|`, in placement order.
pub fn film_magnitude_stats(psi: &FilmParams) -> Vec<LayerMagnitude> {
    psi.layers
        .iter()
        .enumerate()
        .map(|(layer, l)| LayerMagnitude {
            layer,
            gamma_dev: FiveNumber::of(&l.gamma.iter().map(|g| (g - 1.0).abs()).collect::<Vec<_>>()),
            beta_abs: FiveNumber::of(&l.beta.iter().map(|b| b.abs()).collect::<Vec<_>>()),
        })
        .collect()
}
