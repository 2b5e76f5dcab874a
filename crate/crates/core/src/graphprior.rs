//! Band graphs, Laplacians and GMRF precision matrices.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::signal::Band;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("edge density must lie in (0, 1], got {0}")]
    BadDensity(f64),
    #[error("need at least 2 samples per channel, got {0}")]
    TooShort(usize),
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("precision matrix stays indefinite after jitter {jitter:e} (pivot {pivot})")]
    JitterExhausted { jitter: f64, pivot: usize },
    #[error("prior variant `none` has no precision matrix")]
    NoPrior,
    #[error("expected a {expected}x{expected} matrix, got {len} entries")]
    Size { expected: usize, len: usize },
}

/// Symmetric, zero-diagonal weighted adjacency of one band (`C × C`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct BandGraph {
    pub band: Band,
    nodes: usize,
    adjacency: Vec<f64>,
}

impl BandGraph {
    pub fn new(band: Band, nodes: usize, adjacency: Vec<f64>) -> Result<Self, GraphError> {
        if adjacency.len() != nodes * nodes {
            return Err(GraphError::Size {
                expected: nodes,
                len: adjacency.len(),
            });
        }
        Ok(Self {
            band,
            nodes,
            adjacency,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn edge_count(&self) -> usize {
        let c = self.nodes;
        (0..c)
            .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[i * c + j] != 0.0)
            .count()
    }
}

/// Absolute Pearson correlation between the rows of a `C × T` block.
/// Zero-variance channels correlate 0 with everything; the diagonal is 0.
pub fn abs_correlation(block: &[f64], channels: usize, len: usize) -> Result<Vec<f64>, GraphError> {
    if len < 2 {
        return Err(GraphError::TooShort(len));
    }
    let mut centered = vec![0.0; channels * len];
    let mut norms = vec![0.0; channels];
    for c in 0..channels {
        let row = &block[c * len..(c + 1) * len];
        let m = row.iter().sum::<f64>() / len as f64;
        let out = &mut centered[c * len..(c + 1) * len];
        for (o, v) in out.iter_mut().zip(row) {
            *o = v - m;
        }
        norms[c] = libm::sqrt(out.iter().map(|v| v * v).sum());
    }
    let mut corr = vec![0.0; channels * channels];
    for i in 0..channels {
        for j in i + 1..channels {
            let r = if norms[i] > 0.0 && norms[j] > 0.0 {
                let a = &centered[i * len..(i + 1) * len];
                let b = &centered[j * len..(j + 1) * len];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                libm::fabs(dot / (norms[i] * norms[j])).min(1.0)
            } else {
                0.0
            };
            corr[i * channels + j] = r;
            corr[j * channels + i] = r;
        }
    }
    Ok(corr)
}

/// Keeps the `⌈p·C(C−1)/2⌉` strongest undirected edges (ties broken by
/// position), zeroing the rest.
pub fn sparsify_top(weights: &[f64], channels: usize, density: f64) -> Result<Vec<f64>, GraphError> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(GraphError::BadDensity(density));
    }
    let mut pairs: Vec<(usize, usize)> = (0..channels)
        .flat_map(|i| (i + 1..channels).map(move |j| (i, j)))
        .collect();
    let keep = libm::ceil(density * pairs.len() as f64 - 1e-9) as usize;
    pairs.sort_by(|a, b| {
        let wa = weights[a.0 * channels + a.1];
        let wb = weights[b.0 * channels + b.1];
        wb.total_cmp(&wa)
    });
    let mut out = vec![0.0; channels * channels];
    for &(i, j) in pairs.iter().take(keep) {
        let w = weights[i * channels + j];
        out[i * channels + j] = w;
        out[j * channels + i] = w;
    }
    Ok(out)
}

/// Functional-connectivity graph of one band from its band-limited signals.
pub fn build_adjacency(
    block: &[f64],
    channels: usize,
    len: usize,
    density: f64,
    band: Band,
) -> Result<BandGraph, GraphError> {
    let corr = abs_correlation(block, channels, len)?;
    BandGraph::new(band, channels, sparsify_top(&corr, channels, density)?)
}

fn degrees(a: &[f64], c: usize) -> Vec<f64> {
    (0..c).map(|i| a[i * c..(i + 1) * c].iter().sum()).collect()
}

fn inv_sqrt_degrees(a: &[f64], c: usize) -> Vec<f64> {
    degrees(a, c)
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / libm::sqrt(d) } else { 0.0 })
        .collect()
}

/// `D^{-1/2} A D^{-1/2}` with `D^{-1/2} = 0` on isolated nodes.
pub fn normalized_adjacency(a: &[f64], c: usize) -> Vec<f64> {
    let s = inv_sqrt_degrees(a, c);
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            out[i * c + j] = a[i * c + j] * (s[i] * s[j]);
        }
    }
    out
}

/// `I − D^{-1/2} A D^{-1/2}`.
pub fn normalized_laplacian(a: &[f64], c: usize) -> Vec<f64> {
    let mut l = normalized_adjacency(a, c);
    for v in l.iter_mut() {
        *v = -*v;
    }
    for i in 0..c {
        l[i * c + i] += 1.0;
    }
    l
}

/// `D − A`.
pub fn laplacian(a: &[f64], c: usize) -> Vec<f64> {
    let d = degrees(a, c);
    let mut l: Vec<f64> = a.iter().map(|v| -v).collect();
    for i in 0..c {
        l[i * c + i] += d[i];
    }
    l
}

/// Family of GMRF priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PriorVariant {
    /// No prior; the KL term is dropped.
    None,
    /// `L + λ·I`.
    LaplacianShift,
    /// `L_norm + λ·I`.
    NormalizedShift,
    /// `L_norm + ε·I` with a fixed small jitter.
    PureNormalized,
}

impl PriorVariant {
    pub const ALL: [PriorVariant; 4] = [
        PriorVariant::None,
        PriorVariant::LaplacianShift,
        PriorVariant::NormalizedShift,
        PriorVariant::PureNormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorVariant::None => "none",
            PriorVariant::LaplacianShift => "laplacian-shift",
            PriorVariant::NormalizedShift => "normalized-laplacian-shift",
            PriorVariant::PureNormalized => "pure-normalized",
        }
    }
}

impl fmt::Display for PriorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorVariant {
    type Err = ();

    /// Accepts the full names and the short forms `l-shift`, `lnorm-shift`
    /// and `pure`.
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "l-shift" => return Ok(PriorVariant::LaplacianShift),
            "lnorm-shift" => return Ok(PriorVariant::NormalizedShift),
            "pure" => return Ok(PriorVariant::PureNormalized),
            _ => {}
        }
        PriorVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub variant: PriorVariant,
    pub shift: f64,
}

impl PriorSpec {
    pub fn new(variant: PriorVariant, shift: f64) -> Self {
        Self { variant, shift }
    }

    pub fn is_none(&self) -> bool {
        self.variant == PriorVariant::None
    }
}

/// Jitter for the pure normalized-Laplacian prior.
pub const PURE_JITTER: f64 = 1e-6;
const MAX_JITTER: f64 = 1e-2;

/// Positive-definite precision with its Cholesky factor and log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix {
    size: usize,
    q: Vec<f64>,
    chol: Vec<f64>,
    logdet: f64,
    jitter: f64,
}

impl PrecisionMatrix {
    /// Factors an arbitrary symmetric positive-definite matrix.
    pub fn from_matrix(q: Vec<f64>, size: usize) -> Result<Self, GraphError> {
        if q.len() != size * size {
            return Err(GraphError::Size {
                expected: size,
                len: q.len(),
            });
        }
        let chol = cholesky(&q, size)?;
        let logdet = logdet_from_cholesky(&chol, size);
        Ok(Self {
            size,
            q,
            chol,
            logdet,
            jitter: 0.0,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn matrix(&self) -> &[f64] {
        &self.q
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.size + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }

    /// Lower-triangular factor `L` with `Q = L Lᵀ`.
    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Diagonal jitter that was added beyond the prior's own shift.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn identity(size: usize) -> Self {
        let mut q = vec![0.0; size * size];
        for i in 0..size {
            q[i * size + i] = 1.0;
        }
        Self {
            size,
            chol: q.clone(),
            q,
            logdet: 0.0,
            jitter: 0.0,
        }
    }
}

/// Builds `Q` for adjacency `a` under `spec`, escalating diagonal jitter
/// tenfold (up to 1e-2) if factorization fails.
pub fn precision_matrix(a: &[f64], c: usize, spec: PriorSpec) -> Result<PrecisionMatrix, GraphError> {
    let (mut base, mut jitter) = match spec.variant {
        PriorVariant::None => return Err(GraphError::NoPrior),
        PriorVariant::LaplacianShift => (laplacian(a, c), 0.0),
        PriorVariant::NormalizedShift => (normalized_laplacian(a, c), 0.0),
        PriorVariant::PureNormalized => (normalized_laplacian(a, c), PURE_JITTER),
    };
    let shift = match spec.variant {
        PriorVariant::PureNormalized => 0.0,
        _ => spec.shift,
    };
    for i in 0..c {
        base[i * c + i] += shift;
    }
    let initial = jitter;
    loop {
        let mut q = base.clone();
        for i in 0..c {
            q[i * c + i] += jitter;
        }
        match cholesky(&q, c) {
            Ok(chol) => {
                let logdet = logdet_from_cholesky(&chol, c);
                return Ok(PrecisionMatrix {
                    size: c,
                    q,
                    chol,
                    logdet,
                    jitter,
                });
            }
            Err(GraphError::NotPositiveDefinite { pivot, .. }) => {
                let next = if jitter == 0.0 { PURE_JITTER } else { jitter * 10.0 };
                if next > MAX_JITTER * (1.0 + 1e-9) {
                    return Err(GraphError::JitterExhausted { jitter, pivot });
                }
                log::warn!("precision matrix not PD at pivot {pivot}; jitter {jitter:e} -> {next:e}");
                jitter = next;
            }
            Err(e) => return Err(e),
        }
        debug_assert!(jitter >= initial);
    }
}

/// Lower Cholesky factor of a symmetric matrix.
pub fn cholesky(q: &[f64], n: usize) -> Result<Vec<f64>, GraphError> {
    if q.len() != n * n {
        return Err(GraphError::Size {
            expected: n,
            len: q.len(),
        });
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = q[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(GraphError::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = libm::sqrt(d);
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = q[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

fn logdet_from_cholesky(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| libm::log(l[i * n + i])).sum::<f64>()
}

/// `log|Q|` of a positive-definite matrix via its Cholesky factor.
pub fn logdet_pd(q: &[f64], n: usize) -> Result<f64, GraphError> {
    Ok(logdet_from_cholesky(&cholesky(q, n)?, n))
}
