//! Task metrics and cross-modal alignment diagnostics.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Lowercases, drops ASCII punctuation, collapses whitespace.
pub fn normalize(s: &str) -> String {
    let cleaned: String = s.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1.0 when the normalized strings are equal, else 0.0.
pub fn exact_match(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize(pred) == normalize(gold)))
}

/// Word-overlap F1 over normalized whitespace tokens (multiset counts).
pub fn f1_score(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    let pw: Vec<&str> = p.split_whitespace().collect();
    let gw: Vec<&str> = g.split_whitespace().collect();
    match (pw.is_empty(), gw.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &gw {
        *counts.entry(w).or_default() += 1;
    }
    let mut tp = 0usize;
    for w in &pw {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / pw.len() as f64;
    let recall = tp as f64 / gw.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn success_rate(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::Empty("success rate of no results".into()));
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
    Other,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Speech => 1,
            Modality::Other => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Speech),
            2 => Ok(Modality::Other),
            _ => Err(Error::Parse(format!("unknown modality code {c}"))),
        }
    }
}

/// Pairwise cosine and Euclidean statistics; `None` where a modality has
/// fewer than the two (or one, across modalities) rows required.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalStats {
    pub tt_sim: Option<f64>,
    pub ss_sim: Option<f64>,
    pub st_sim: Option<f64>,
    pub tt_dist: Option<f64>,
    pub ss_dist: Option<f64>,
    pub st_dist: Option<f64>,
}

pub const DEFAULT_MAX_PAIRS: usize = 10_000;

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    (&a - &b).mapv(|x| x * x).sum().sqrt()
}

/// Index pairs `(i, j)` drawn from `a × b` (`i < j` within one set), all of
/// them when there are at most `cap`, else `cap` uniform samples.
fn pairs(a: &[usize], b: Option<&[usize]>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match b {
        None => {
            let n = a.len();
            let total = n * n.saturating_sub(1) / 2;
            if total <= cap {
                (0..n).flat_map(|i| (i + 1..n).map(move |j| (a[i], a[j]))).collect()
            } else {
                (0..cap)
                    .map(|_| {
                        let i = rng.gen_range(0..n);
                        let mut j = rng.gen_range(0..n - 1);
                        if j >= i {
                            j += 1;
                        }
                        (a[i], a[j])
                    })
                    .collect()
            }
        }
        Some(b) => {
            if a.len() * b.len() <= cap {
                a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).collect()
            } else {
                (0..cap).map(|_| (a[rng.gen_range(0..a.len())], b[rng.gen_range(0..b.len())])).collect()
            }
        }
    }
}

pub fn modal_stats(h: ArrayView2<f64>, modality: &[Modality], max_pairs: usize, seed: u64) -> Result<ModalStats> {
    if modality.len() != h.nrows() {
        return Err(Error::Shape(format!("{} modality tags for {} rows", modality.len(), h.nrows())));
    }
    let idx = |m: Modality| modality.iter().enumerate().filter(|(_, &x)| x == m).map(|(i, _)| i).collect::<Vec<_>>();
    let text = idx(Modality::Text);
    let speech = idx(Modality::Speech);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stat = |a: &[usize], b: Option<&[usize]>| -> (Option<f64>, Option<f64>) {
        let ok = match b {
            None => a.len() >= 2,
            Some(b) => !a.is_empty() && !b.is_empty(),
        };
        if !ok {
            return (None, None);
        }
        let ps = pairs(a, b, max_pairs, &mut rng);
        let n = ps.len() as f64;
        let sim = ps.iter().map(|&(i, j)| cosine(h.row(i), h.row(j))).sum::<f64>() / n;
        let dist = ps.iter().map(|&(i, j)| euclid(h.row(i), h.row(j))).sum::<f64>() / n;
        (Some(sim), Some(dist))
    };
    let (tt_sim, tt_dist) = stat(&text, None);
    let (ss_sim, ss_dist) = stat(&speech, None);
    let (st_sim, st_dist) = stat(&speech, Some(&text));
    Ok(ModalStats { tt_sim, ss_sim, st_sim, tt_dist, ss_dist, st_dist })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Riemannian {
    pub distance: f64,
    /// Positive real eigenvalues of `K_text⁻¹ K_speech` that entered the sum.
    pub eigenvalues: Vec<f64>,
    pub mu_speech: Vec<f64>,
    pub mu_text: Vec<f64>,
}

fn to_dmatrix(h: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[[i, j]])
}

/// Covariance `V Σ² Vᵀ / (n − 1)` from the SVD of the centered rows, plus
/// `eps · I`; returns it with the row mean.
pub fn covariance(h: ArrayView2<f64>, eps: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = h.nrows();
    if n < 2 {
        return Err(Error::Shape(format!("covariance needs at least 2 rows, got {n}")));
    }
    let x = to_dmatrix(h);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mu[j]);
    let svd = centered.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let s2 = DMatrix::from_diagonal(&svd.singular_values.map(|s| s * s));
    let k = vt.transpose() * s2 * &vt / (n as f64 - 1.0);
    let d = x.ncols();
    Ok((k + DMatrix::identity(d, d) * eps, mu))
}

/// `sqrt(Σ ln² λ_i) + ‖μ_s − μ_t‖²` with `λ` the positive real eigenvalues
/// of `K_text⁻¹ K_speech`.
pub fn riemannian_distance(h_speech: ArrayView2<f64>, h_text: ArrayView2<f64>, eps: f64) -> Result<Riemannian> {
    if h_speech.ncols() != h_text.ncols() {
        return Err(Error::Shape(format!("width {} vs {}", h_speech.ncols(), h_text.ncols())));
    }
    if eps < 0.0 {
        return Err(Error::Config("eps must be non-negative".into()));
    }
    let (ks, mu_s) = covariance(h_speech, eps)?;
    let (kt, mu_t) = covariance(h_text, eps)?;
    let sym = kt.clone().symmetric_eigenvalues();
    let max = sym.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min = sym.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if !(min > max * 1e-12) || max == 0.0 {
        return Err(Error::Singular(format!("text covariance is rank-deficient (eigenvalues in [{min:e}, {max:e}])")));
    }
    let kt_inv = kt.try_inverse().ok_or_else(|| Error::Singular("text covariance is not invertible".into()))?;
    let m = kt_inv * ks;
    // the shifted QR iteration can stall on near-identity products at the
    // tightest deflation threshold, so loosen it step by step
    let schur = [1e-14, 1e-12, 1e-10]
        .into_iter()
        .find_map(|tol| m.clone().try_schur(tol, 10_000))
        .ok_or_else(|| Error::Singular("eigenvalue iteration did not converge".into()))?;
    let eig: Vec<f64> = schur
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.re > 0.0 && z.im.abs() < 1e-8 * z.re.abs())
        .map(|z| z.re)
        .collect();
    let geo = eig.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt();
    let shift = (&mu_s - &mu_t).norm_squared();
    Ok(Riemannian { distance: geo + shift, eigenvalues: eig, mu_speech: mu_s.iter().copied().collect(), mu_text: mu_t.iter().copied().collect() })
}

/// Alignment diagnostics of one hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub layer: String,
    pub index: usize,
    pub stats: ModalStats,
    /// `None` when the covariance was singular.
    pub riemannian: Option<Riemannian>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub label: String,
    pub log_base: String,
    pub eps: f64,
    pub max_pairs: usize,
    pub layers: Vec<LayerAlignment>,
}

impl AlignmentReport {
    pub fn new(label: impl Into<String>, eps: f64, max_pairs: usize) -> Self {
        Self { label: label.into(), log_base: "e".into(), eps, max_pairs, layers: vec![] }
    }

    pub fn analyze_layer(
        &mut self,
        layer: impl Into<String>,
        index: usize,
        h: ArrayView2<f64>,
        modality: &[Modality],
        seed: u64,
    ) -> Result<()> {
        let stats = modal_stats(h, modality, self.max_pairs, seed)?;
        let pick = |m: Modality| h.select(Axis(0), &modality.iter().enumerate().filter(|(_, &x)| x == m).map(|(i, _)| i).collect::<Vec<_>>());
        let riemannian = match riemannian_distance(pick(Modality::Speech).view(), pick(Modality::Text).view(), self.eps) {
            Ok(r) => Some(r),
            Err(Error::Singular(_) | Error::Shape(_)) => None,
            Err(e) => return Err(e),
        };
        self.layers.push(LayerAlignment { layer: layer.into(), index, stats, riemannian });
        Ok(())
    }
}

const DUMP_MAGIC: &[u8; 4] = b"SLMH";
const DUMP_VERSION: u32 = 1;

/// Writes hidden states as
///
/// ```text
/// magic    4 bytes  b"SLMH"
/// version  u32 LE   1
/// rows     u64 LE
/// cols     u64 LE
/// tags     rows × u8 modality codes (0 text, 1 speech, 2 other)
/// values   rows × cols f32 LE, row-major
/// ```
pub fn write_hidden_dump<W: Write>(mut w: W, h: ArrayView2<f64>, modality: &[Modality]) -> Result<()> {
    if modality.len() != h.nrows() {
        return Err(Error::Shape(format!("{} modality tags for {} rows", modality.len(), h.nrows())));
    }
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(h.nrows() as u64).to_le_bytes())?;
    w.write_all(&(h.ncols() as u64).to_le_bytes())?;
    w.write_all(&modality.iter().map(|m| m.code()).collect::<Vec<_>>())?;
    let mut buf = Vec::with_capacity(h.len() * 4);
    for v in h.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_hidden_dump<R: Read>(mut r: R) -> Result<(Array2<f64>, Vec<Modality>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Parse("not a hidden-state dump".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != DUMP_VERSION {
        return Err(Error::Parse(format!("unsupported dump version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    let mut tags = vec![0u8; rows];
    r.read_exact(&mut tags)?;
    let modality = tags.into_iter().map(Modality::from_code).collect::<Result<Vec<_>>>()?;
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)?;
    let values = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let h = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((h, modality))
}
