//! Multi-granularity transformer node-feature extractor.
//!
//! Every `(sample, band, channel)` signal is an independent sequence. Each
//! granularity turns it into tokens with a strided convolution, a leaky
//! rectifier and max pooling; the token blocks are concatenated, given a
//! sinusoidal positional encoding, passed through pre-norm transformer blocks
//! and pooled into one `d_h` vector. All sequences share the same weights, so
//! a whole batch is encoded as one `[sequences, T′]` tensor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::nn::Linear;
use crate::tensor::{Init, ParamId, ParameterStore, Tape, Tensor, TensorError, Var, LEAKY_SLOPE};

/// Non-overlapping max-pool factor after each convolution.
pub const POOL_FACTOR: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractorError {
    #[error("granularity {0} s must be positive and give a kernel of at least one sample")]
    BadGranularity(f64),
    #[error("unknown granularity configuration `{0}`")]
    UnknownConfig(String),
    #[error("signal of {len} samples is shorter than every kernel; no tokens produced")]
    AllSkipped { len: usize },
    #[error("{len} tokens exceed the positional table of {l_max}; raise l_max")]
    TooManyTokens { len: usize, l_max: usize },
    #[error("token width {width} is not divisible by {heads} heads")]
    Heads { width: usize, heads: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = core::result::Result<T, ExtractorError>;

/// Named set of token window lengths in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityConfig {
    pub name: String,
    pub granularities: Vec<f64>,
}

const PRESETS: [(&str, &[f64]); 8] = [
    ("fine", &[0.02, 0.03, 0.04]),
    ("medium", &[0.04, 0.06, 0.08]),
    ("coarse", &[0.08, 0.10, 0.12]),
    ("mixed-1", &[0.02, 0.06, 0.10]),
    ("mixed-2", &[0.03, 0.07, 0.11]),
    ("single-fine", &[0.02]),
    ("single-medium", &[0.06]),
    ("single-coarse", &[0.10]),
];

impl GranularityConfig {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn preset(name: &str) -> Option<Self> {
        PRESETS.iter().find(|p| p.0 == name).map(|p| Self {
            name: p.0.into(),
            granularities: p.1.to_vec(),
        })
    }

    pub fn custom(name: &str, granularities: Vec<f64>) -> Result<Self> {
        if let Some(&g) = granularities.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(ExtractorError::BadGranularity(g));
        }
        Ok(Self {
            name: name.into(),
            granularities,
        })
    }
}

impl FromStr for GranularityConfig {
    type Err = ExtractorError;

    fn from_str(s: &str) -> Result<Self> {
        Self::preset(s).ok_or_else(|| ExtractorError::UnknownConfig(s.into()))
    }
}

impl fmt::Display for GranularityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Kernel length `round(g·fs)`.
pub fn kernel_len(g: f64, fs: f64) -> Result<usize> {
    let k = libm::round(g * fs);
    if !(g > 0.0) || k < 1.0 {
        return Err(ExtractorError::BadGranularity(g));
    }
    Ok(k as usize)
}

/// Convolution stride `max(1, round(Φ/2))`.
pub fn stride_for(kernel: usize) -> usize {
    (libm::round(kernel as f64 / 2.0) as usize).max(1)
}

/// Tokens produced from `len` samples by one granularity, or `None` when the
/// signal is shorter than the kernel.
pub fn token_count(len: usize, kernel: usize) -> Option<usize> {
    if len < kernel {
        return None;
    }
    let conv = (len - kernel) / stride_for(kernel) + 1;
    Some(conv / POOL_FACTOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
}

impl FromStr for Aggregation {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub token_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub out_dim: usize,
    pub aggregation: Aggregation,
    pub l_max: usize,
    pub positional_encoding: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            token_dim: 16,
            heads: 2,
            layers: 2,
            out_dim: 16,
            aggregation: Aggregation::Mean,
            l_max: 1024,
            positional_encoding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBank {
    granularity: f64,
    kernel: usize,
    stride: usize,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ln2: (ParamId, ParamId),
    hidden: Linear,
    back: Linear,
}

/// Which granularities apply to a signal length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPlan {
    /// `(bank index, tokens)` of every usable granularity.
    pub used: Vec<(usize, usize)>,
    /// Granularities skipped because the signal is shorter than their kernel.
    pub skipped: Vec<usize>,
}

impl TokenPlan {
    pub fn total(&self) -> usize {
        self.used.iter().map(|u| u.1).sum()
    }
}

/// Shared-weight extractor for one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    config: ExtractorConfig,
    banks: Vec<ConvBank>,
    blocks: Vec<Block>,
    projection: Linear,
    pe: Vec<f64>,
}

impl Extractor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        config: ExtractorConfig,
        granularity: &GranularityConfig,
        fs: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.token_dim;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(ExtractorError::Heads {
                width: d,
                heads: config.heads,
            });
        }
        let mut banks = Vec::new();
        for (i, &g) in granularity.granularities.iter().enumerate() {
            let kernel = kernel_len(g, fs)?;
            let weight = store.init(
                &format!("{prefix}.conv{i}.weight"),
                &[d, kernel],
                Init::Glorot {
                    fan_in: kernel,
                    fan_out: d,
                },
                rng,
            )?;
            let bias = store.init(&format!("{prefix}.conv{i}.bias"), &[d], Init::Zeros, rng)?;
            banks.push(ConvBank {
                granularity: g,
                kernel,
                stride: stride_for(kernel),
                weight,
                bias,
            });
        }
        let mut blocks = Vec::new();
        for l in 0..config.layers {
            let p = format!("{prefix}.block{l}");
            let norm = |store: &mut ParameterStore, name: &str, rng: &mut R| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.init(&format!("{p}.{name}.gain"), &[d], Init::Ones, rng)?,
                    store.init(&format!("{p}.{name}.bias"), &[d], Init::Zeros, rng)?,
                ))
            };
            let ln1 = norm(store, "ln1", rng)?;
            let query = Linear::new(store, &format!("{p}.query"), d, d, rng)?;
            // a key bias shifts every score of a query row equally, which the
            // softmax ignores, so it would only ever receive zero gradient
            let key = Linear::without_bias(store, &format!("{p}.key"), d, d, rng)?;
            let value = Linear::new(store, &format!("{p}.value"), d, d, rng)?;
            let output = Linear::new(store, &format!("{p}.output"), d, d, rng)?;
            let ln2 = norm(store, "ln2", rng)?;
            let hidden = Linear::new(store, &format!("{p}.ffn1"), d, 4 * d, rng)?;
            let back = Linear::new(store, &format!("{p}.ffn2"), 4 * d, d, rng)?;
            blocks.push(Block {
                ln1,
                query,
                key,
                value,
                output,
                ln2,
                hidden,
                back,
            });
        }
        let projection = Linear::new(store, &format!("{prefix}.projection"), d, config.out_dim, rng)?;
        let pe = sinusoidal_table(config.l_max, d);
        Ok(Self {
            config,
            banks,
            blocks,
            projection,
            pe,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn granularities(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        self.banks.iter().map(|b| (b.granularity, b.kernel, b.stride))
    }

    pub fn plan(&self, len: usize) -> TokenPlan {
        let mut plan = TokenPlan {
            used: Vec::new(),
            skipped: Vec::new(),
        };
        for (i, b) in self.banks.iter().enumerate() {
            match token_count(len, b.kernel) {
                Some(n) if n > 0 => plan.used.push((i, n)),
                _ => plan.skipped.push(i),
            }
        }
        plan
    }

    /// Tokens of one granularity: `[N, T′] → [N, L_g, D_T]`.
    pub fn tokenize(&self, tape: &mut Tape, store: &ParameterStore, x: Var, bank: usize) -> Result<Var> {
        let b = &self.banks[bank];
        let w = tape.param(store, b.weight);
        let bias = tape.param(store, b.bias);
        let conv = tape.conv1d(x, w, bias, b.stride)?;
        let act = tape.leaky_relu(conv, LEAKY_SLOPE);
        Ok(tape.max_pool(act, POOL_FACTOR)?)
    }

    /// Concatenated tokens of every usable granularity, positional encoding
    /// added: `[N, T′] → [N, L, D_T]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let len = tape.shape(x)[1];
        let plan = self.plan(len);
        if plan.used.is_empty() {
            return Err(ExtractorError::AllSkipped { len });
        }
        for &i in &plan.skipped {
            log::warn!(
                "granularity {} s (kernel {}) skipped: signal has only {len} samples",
                self.banks[i].granularity,
                self.banks[i].kernel
            );
        }
        let total = plan.total();
        if total > self.config.l_max {
            return Err(ExtractorError::TooManyTokens {
                len: total,
                l_max: self.config.l_max,
            });
        }
        let mut parts = Vec::with_capacity(plan.used.len());
        for &(i, _) in &plan.used {
            parts.push(self.tokenize(tape, store, x, i)?);
        }
        let tokens = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
        if !self.config.positional_encoding {
            return Ok(tokens);
        }
        let d = self.config.token_dim;
        let pe = tape.constant(Tensor::new(&[total, d], self.pe[..total * d].to_vec())?);
        Ok(tape.add(tokens, pe)?)
    }

    /// Transformer stack over `[N, L, D_T]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, mut h: Var) -> Result<Var> {
        for block in &self.blocks {
            h = self.block(tape, store, block, h)?;
        }
        Ok(h)
    }

    fn block(&self, tape: &mut Tape, store: &ParameterStore, b: &Block, x: Var) -> Result<Var> {
        let heads = self.config.heads;
        let head_dim = self.config.token_dim / heads;
        let g = tape.param(store, b.ln1.0);
        let beta = tape.param(store, b.ln1.1);
        let n1 = tape.layer_norm(x, g, beta)?;
        let q = b.query.forward(tape, store, n1)?;
        let k = b.key.forward(tape, store, n1)?;
        let v = b.value.forward(tape, store, n1)?;
        let q = tape.split_heads(q, heads)?;
        let k = tape.split_heads(k, heads)?;
        let v = tape.split_heads(v, heads)?;
        let kt = tape.transpose(k)?;
        let scores = tape.batch_matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(head_dim as f64));
        let attn = tape.softmax(scores);
        let ctx = tape.batch_matmul(attn, v)?;
        let ctx = tape.merge_heads(ctx, heads)?;
        let out = b.output.forward(tape, store, ctx)?;
        let x = tape.add(x, out)?;

        let g = tape.param(store, b.ln2.0);
        let beta = tape.param(store, b.ln2.1);
        let n2 = tape.layer_norm(x, g, beta)?;
        let hdn = b.hidden.forward(tape, store, n2)?;
        let hdn = tape.leaky_relu(hdn, LEAKY_SLOPE);
        let ffn = b.back.forward(tape, store, hdn)?;
        Ok(tape.add(x, ffn)?)
    }

    /// Pools `[N, L, D_T]` over tokens and projects to `[N, d_h]`.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParameterStore, h: Var) -> Result<Var> {
        let pooled = match self.config.aggregation {
            Aggregation::Mean => tape.mean_axis(h, 1)?,
            Aggregation::Max => tape.max_axis(h, 1)?,
        };
        Ok(self.projection.forward(tape, store, pooled)?)
    }

    /// Full extractor: `[N, T′]` independent sequences → `[N, d_h]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let e = self.embed(tape, store, x)?;
        let h = self.encode(tape, store, e)?;
        self.aggregate(tape, store, h)
    }
}

/// `PE[p, 2i] = sin(p / 10000^{2i/D})`, `PE[p, 2i+1] = cos(…)`, row-major `L × D`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let pair = (i / 2) * 2;
            let angle = p as f64 / libm::pow(10000.0, pair as f64 / dim as f64);
            pe[p * dim + i] = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: ExtractorConfig, gran: &str, fs: f64) -> (Extractor, ParameterStore) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GranularityConfig::preset(gran).unwrap();
        let e = Extractor::new(&mut store, "mgt", cfg, &g, fs, &mut rng).unwrap();
        (e, store)
    }

    fn zero_biases(store: &mut ParameterStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).ends_with(".bias") {
                store.tensor_mut(id).data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn fine_single_granularity_lengths() {
        let k = kernel_len(0.02, 500.0).unwrap();
        assert_eq!((k, stride_for(k)), (10, 5));
        assert_eq!(token_count(2000, k), Some(199));
        assert_eq!(token_count(8, 10), None);
    }

    #[test]
    fn presets_match_table() {
        assert_eq!(GranularityConfig::preset_names().count(), 8);
        assert_eq!(GranularityConfig::preset("mixed-2").unwrap().granularities, vec![0.03, 0.07, 0.11]);
        assert!("ultra".parse::<GranularityConfig>().is_err());
    }

    #[test]
    fn short_signal_skips_granularity() {
        let (e, store) = build(ExtractorConfig::default(), "coarse", 100.0);
        let plan = e.plan(16);
        assert_eq!(plan.used.len(), 2);
        assert_eq!(plan.skipped, vec![2]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        assert_eq!(e.forward(&mut tape, &store, x), Err(ExtractorError::AllSkipped { len: 4 }));
    }

    #[test]
    fn token_budget_enforced() {
        let cfg = ExtractorConfig {
            l_max: 10,
            ..ExtractorConfig::default()
        };
        let (e, store) = build(cfg, "single-fine", 500.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 200]));
        assert!(matches!(
            e.forward(&mut tape, &store, x),
            Err(ExtractorError::TooManyTokens { len: 19, l_max: 10 })
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_tokens() {
        let (e, mut store) = build(ExtractorConfig::default(), "fine", 500.0);
        zero_biases(&mut store);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 100]));
        let t = e.tokenize(&mut tape, &store, x, 0).unwrap();
        assert!(tape.value(t).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_layers_is_tokens_plus_pe() {
        let cfg = ExtractorConfig {
            layers: 0,
            ..ExtractorConfig::default()
        };
        let (e, store) = build(cfg, "single-medium", 100.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 60], (0..60).map(|i| libm::sin(i as f64)).collect()).unwrap());
        let tokens = e.tokenize(&mut tape, &store, x, 0).unwrap();
        let embedded = e.embed(&mut tape, &store, x).unwrap();
        let encoded = e.encode(&mut tape, &store, embedded).unwrap();
        let l = tape.shape(tokens)[1];
        let d = 16;
        for (i, (&a, &b)) in tape.value(encoded).iter().zip(tape.value(tokens)).enumerate() {
            assert_eq!(a, b + e.pe[(i / d) % l * d + i % d]);
        }
    }

    #[test]
    fn output_width_independent_of_length() {
        let (e, store) = build(ExtractorConfig::default(), "single-fine", 500.0);
        for t in [1000, 2000, 4000] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::filled(&[1, t], 0.5));
            let h = e.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(h), &[1, 16]);
        }
    }

    #[test]
    fn positional_table_first_rows() {
        let pe = sinusoidal_table(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - libm::sin(1.0)).abs() < 1e-15);
        assert!((pe[6] - libm::sin(0.01)).abs() < 1e-15);
    }
}
