//! Residual retrieval models.
//!
//! * `rn2dwt`: series vs. learned templates -> `[L, L, K]` distance tensor ->
//!   7x7/2 stem -> 8 bottleneck blocks -> global average pool -> linear 64.
//!   A pure feature extractor, so database items are encoded once.
//! * `rn2d`: the same trunk over the single pairwise matrix of a
//!   (query, item) pair, with a scalar head. Runs once per scored pair.
//! * `rn1d`: three 1-D residual stages over the raw series, Siamese style.
//!
//! Relevance between embeddings is the negated Euclidean distance.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check_sampled, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::ts_core::LabeledCollection;

pub const EMBED_DIM: usize = 64;
pub const TRUNK_CHANNELS: usize = 64;
pub const BOTTLENECK_CHANNELS: usize = 16;
pub const N_BLOCKS: usize = 8;
pub const STEM_KERNEL: usize = 7;
/// Template counts accepted for `rn2dwt`.
pub const TEMPLATE_GRID: [usize; 6] = [8, 16, 24, 32, 40, 48];
pub const DEFAULT_TEMPLATES: usize = 32;

/// Series per forward pass during inference.
const INFERENCE_CHUNK: usize = 16;

const RN1D_KERNELS: [usize; 3] = [8, 5, 3];
const RN1D_STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Rn2dwt,
    Rn2d,
    Rn1d,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Rn2dwt => "rn2dwt",
            ModelKind::Rn2d => "rn2d",
            ModelKind::Rn1d => "rn1d",
        }
    }

    /// Whether the model maps a single series to an embedding.
    pub fn is_embedding(self) -> bool {
        !matches!(self, ModelKind::Rn2d)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rn2dwt" => Ok(ModelKind::Rn2dwt),
            "rn2d" => Ok(ModelKind::Rn2d),
            "rn1d" => Ok(ModelKind::Rn1d),
            other => Err(Error::ModelKind(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub series_length: usize,
    /// Number of learned templates; only meaningful for `rn2dwt`.
    pub n_templates: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, series_length: usize, n_templates: usize) -> Self {
        Self {
            kind,
            series_length,
            n_templates,
        }
    }

    /// Validate, additionally accepting template counts outside the sweep
    /// grid when `strict_grid` is false.
    pub fn validate_with(&self, strict_grid: bool) -> Result<()> {
        if self.series_length < 2 {
            return Err(Error::param(format!(
                "series length must be >= 2, got {}",
                self.series_length
            )));
        }
        if self.kind == ModelKind::Rn2dwt {
            if self.n_templates == 0 {
                return Err(Error::param("rn2dwt needs at least one template"));
            }
            if strict_grid && !TEMPLATE_GRID.contains(&self.n_templates) {
                return Err(Error::param(format!(
                    "template count must be one of {:?}, got {}",
                    TEMPLATE_GRID, self.n_templates
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(true)
    }
}

/// A 64-d representation of one series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding(pub [f32; EMBED_DIM]);

impl Embedding {
    pub fn from_slice(v: &[f32]) -> Result<Self> {
        let arr: [f32; EMBED_DIM] = v.try_into().map_err(|_| {
            Error::dim(format!("embedding must have {EMBED_DIM} values, got {}", v.len()))
        })?;
        Ok(Self(arr))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Squared Euclidean distance between two embedding rows. Accumulates in
/// eight fixed lanes so the loop vectorizes; the summation order is part of
/// the contract, as every search path ranks by this exact value.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `-||e1 - e2||`: zero for identical embeddings, more negative when further apart.
pub fn relevance_from_embeddings(e1: &Embedding, e2: &Embedding) -> f32 {
    -squared_distance(&e1.0, &e2.0).sqrt()
}

/// Slice variant of [`relevance_from_embeddings`] with a dimension check.
pub fn relevance(e1: &[f32], e2: &[f32]) -> Result<f32> {
    if e1.len() != EMBED_DIM || e2.len() != EMBED_DIM {
        return Err(Error::dim(format!(
            "relevance needs two {EMBED_DIM}-d embeddings, got {} and {}",
            e1.len(),
            e2.len()
        )));
    }
    Ok(-squared_distance(e1, e2).sqrt())
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn add_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kernel: &[usize], cin: usize, cout: usize) -> Result<()> {
    let fan_in = kernel.iter().product::<usize>() * cin;
    let mut wshape = kernel.to_vec();
    wshape.extend([cin, cout]);
    store.insert(format!("{name}.w"), uniform_tensor(rng, &wshape, fan_in))?;
    store.insert(format!("{name}.b"), uniform_tensor(rng, &[cout], fan_in))
}

fn add_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize) -> Result<()> {
    store.insert(format!("{name}.w"), uniform_tensor(rng, &[fin, fout], fin))?;
    store.insert(format!("{name}.b"), uniform_tensor(rng, &[fout], fin))
}

/// Parameter layout and initial values for `config`. `rn2dwt` templates are
/// drawn without replacement from `train`.
pub fn init_params(config: &ModelConfig, train: Option<&LabeledCollection>, seed: u64) -> Result<ParamStore> {
    config.validate_with(false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let len = config.series_length;
    match config.kind {
        ModelKind::Rn2dwt | ModelKind::Rn2d => {
            let stem_in = if config.kind == ModelKind::Rn2dwt {
                let k = config.n_templates;
                let train = train.ok_or_else(|| {
                    Error::param("rn2dwt template initialisation needs a training collection")
                })?;
                if train.fixed_length() != len {
                    return Err(Error::dim(format!(
                        "training series have length {}, model expects {len}",
                        train.fixed_length()
                    )));
                }
                if train.len() < k {
                    return Err(Error::param(format!(
                        "need at least {k} training series to initialise templates, got {}",
                        train.len()
                    )));
                }
                let picks = sample(&mut rng, train.len(), k).into_vec();
                let mut data = Vec::with_capacity(k * len);
                for i in picks {
                    data.extend(train.items()[i].values().iter().map(|&v| v as f32));
                }
                store.insert("templates", Tensor::new(vec![k, len], data)?)?;
                k
            } else {
                1
            };
            add_conv(&mut store, &mut rng, "stem", &[STEM_KERNEL, STEM_KERNEL], stem_in, TRUNK_CHANNELS)?;
            for b in 0..N_BLOCKS {
                add_conv(&mut store, &mut rng, &format!("block{b}.c1"), &[1, 1], TRUNK_CHANNELS, BOTTLENECK_CHANNELS)?;
                add_conv(&mut store, &mut rng, &format!("block{b}.c2"), &[3, 3], BOTTLENECK_CHANNELS, BOTTLENECK_CHANNELS)?;
                add_conv(&mut store, &mut rng, &format!("block{b}.c3"), &[1, 1], BOTTLENECK_CHANNELS, TRUNK_CHANNELS)?;
            }
            let out = if config.kind == ModelKind::Rn2dwt { EMBED_DIM } else { 1 };
            add_linear(&mut store, &mut rng, "head", TRUNK_CHANNELS, out)?;
        }
        ModelKind::Rn1d => {
            let mut cin = 1;
            for s in 0..RN1D_STAGES {
                for (j, &k) in RN1D_KERNELS.iter().enumerate() {
                    let c = if j == 0 { cin } else { TRUNK_CHANNELS };
                    add_conv(&mut store, &mut rng, &format!("stage{s}.conv{j}"), &[k], c, TRUNK_CHANNELS)?;
                }
                if cin != TRUNK_CHANNELS {
                    add_conv(&mut store, &mut rng, &format!("stage{s}.skip"), &[1], cin, TRUNK_CHANNELS)?;
                }
                cin = TRUNK_CHANNELS;
            }
            add_linear(&mut store, &mut rng, "head", TRUNK_CHANNELS, EMBED_DIM)?;
        }
    }
    Ok(store)
}

/// `relu(x + c3(relu(c2(relu(c1(x))))))` with 1x1, 3x3 (padding 1), 1x1
/// convolutions `64 -> 16 -> 16 -> 64`.
pub fn bottleneck_block<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let c = g.shape(x).last().copied().unwrap_or(0);
    if c != TRUNK_CHANNELS {
        return Err(Error::dim(format!(
            "bottleneck block needs {TRUNK_CHANNELS} input channels, got {c}"
        )));
    }
    let w = |n: &str| p.get(&format!("{prefix}.{n}.w"));
    let b = |n: &str| p.get(&format!("{prefix}.{n}.b"));
    let h = g.conv2d(x, w("c1"), b("c1"), 1, 0)?;
    let h = g.relu(h);
    let h = g.conv2d(h, w("c2"), b("c2"), 1, 1)?;
    let h = g.relu(h);
    let h = g.conv2d(h, w("c3"), b("c3"), 1, 0)?;
    let s = g.add(x, h)?;
    Ok(g.relu(s))
}

/// Stem, blocks and pooling over a `[N,H,W,C]` input, giving `[N,64]`.
fn trunk_2d<T: Scalar>(g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Var> {
    let h = g.conv2d(input, p.get("stem.w"), p.get("stem.b"), 2, STEM_KERNEL / 2)?;
    let mut h = g.relu(h);
    for b in 0..N_BLOCKS {
        h = bottleneck_block(g, p, &format!("block{b}"), h)?;
    }
    g.global_avg_pool(h)
}

fn trunk_1d<T: Scalar>(g: &mut Graph<T>, p: &Bound, series: Var) -> Result<Var> {
    let s = g.shape(series).to_vec();
    let mut x = g.reshape(series, &[s[0], s[1], 1])?;
    for stage in 0..RN1D_STAGES {
        let mut h = x;
        for (j, &k) in RN1D_KERNELS.iter().enumerate() {
            let name = format!("stage{stage}.conv{j}");
            // "same" padding, the extra column on the right for even kernels
            h = g.conv1d_padded(h, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), 1, (k - 1) / 2, k / 2)?;
            if j + 1 < RN1D_KERNELS.len() {
                h = g.relu(h);
            }
        }
        let skip = if stage == 0 {
            let name = format!("stage{stage}.skip");
            g.conv1d(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), 1, 0)?
        } else {
            x
        };
        let sum = g.add(h, skip)?;
        x = g.relu(sum);
    }
    g.global_avg_pool(x)
}

/// Forward pass of an embedding model over a `[N,L]` batch, giving `[N,64]`.
pub fn embed_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, kind: ModelKind, series: Var) -> Result<Var> {
    let pooled = match kind {
        ModelKind::Rn2dwt => {
            let d = g.template_distance(series, p.get("templates"))?;
            trunk_2d(g, p, d)?
        }
        ModelKind::Rn1d => trunk_1d(g, p, series)?,
        ModelKind::Rn2d => {
            return Err(Error::ModelKind(
                "rn2d scores pairs and has no per-series embedding".into(),
            ))
        }
    };
    g.linear(pooled, p.get("head.w"), p.get("head.b"))
}

/// Pairwise-model scores for row-aligned `[N,W]` and `[N,H]` batches,
/// giving `[N]`. The matrix is built as `|a_i - b_j|`.
pub fn pair_score_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, a: Var, b: Var) -> Result<Var> {
    let d = g.pairwise_abs(a, b)?;
    let pooled = trunk_2d(g, p, d)?;
    let s = g.linear(pooled, p.get("head.w"), p.get("head.b"))?;
    let n = g.shape(s)[0];
    g.reshape(s, &[n])
}

/// A model configuration with its parameters and a trunk-invocation counter.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    trunk_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            trunk_calls: AtomicU64::new(self.trunk_calls()),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate_with(false)?;
        let expected = init_params_layout(&config)?;
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::dim(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::param(format!("missing parameter {name:?}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::param(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            trunk_calls: AtomicU64::new(0),
        })
    }

    pub fn init(config: ModelConfig, train: Option<&LabeledCollection>, seed: u64) -> Result<Self> {
        let params = init_params(&config, train, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Per-series (or, for `rn2d`, per-pair) trunk evaluations so far.
    pub fn trunk_calls(&self) -> u64 {
        self.trunk_calls.load(Ordering::Relaxed)
    }

    pub fn reset_trunk_calls(&self) {
        self.trunk_calls.store(0, Ordering::Relaxed);
    }

    fn check_length(&self, len: usize) -> Result<()> {
        if len != self.config.series_length {
            return Err(Error::dim(format!(
                "series has length {len}, model expects {}",
                self.config.series_length
            )));
        }
        Ok(())
    }

    fn batch_tensor<S: AsRef<[f64]>>(&self, series: &[S]) -> Result<Tensor<f32>> {
        let len = self.config.series_length;
        let mut data = Vec::with_capacity(series.len() * len);
        for s in series {
            let s = s.as_ref();
            self.check_length(s.len())?;
            data.extend(s.iter().map(|&v| v as f32));
        }
        Tensor::new(vec![series.len(), len], data)
    }

    /// Embed every series; one trunk evaluation per series.
    pub fn embed_batch<S: AsRef<[f64]>>(&self, series: &[S]) -> Result<Vec<Embedding>> {
        if !self.kind().is_embedding() {
            return Err(Error::ModelKind(format!(
                "{} is a pairwise model; use pairwise scoring",
                self.kind()
            )));
        }
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::<f32>::new();
            let p = self.params.bind(&mut g, false);
            let x = g.leaf(self.batch_tensor(chunk)?, false);
            let e = embed_graph(&mut g, &p, self.kind(), x)?;
            self.trunk_calls.fetch_add(chunk.len() as u64, Ordering::Relaxed);
            for row in g.value(e).data().chunks_exact(EMBED_DIM) {
                out.push(Embedding::from_slice(row)?);
            }
        }
        Ok(out)
    }

    pub fn embed(&self, series: &[f64]) -> Result<Embedding> {
        Ok(self.embed_batch(&[series])?[0])
    }

    /// Pairwise-model scores of `(a_i, b_i)`; one trunk evaluation per pair.
    pub fn score_pairs<A: AsRef<[f64]>, B: AsRef<[f64]>>(&self, a: &[A], b: &[B]) -> Result<Vec<f32>> {
        if self.kind() != ModelKind::Rn2d {
            return Err(Error::ModelKind(format!(
                "{} is an embedding model; score via embeddings",
                self.kind()
            )));
        }
        if a.len() != b.len() {
            return Err(Error::dim(format!("{} left vs {} right series", a.len(), b.len())));
        }
        let mut out = Vec::with_capacity(a.len());
        for (ca, cb) in a.chunks(INFERENCE_CHUNK).zip(b.chunks(INFERENCE_CHUNK)) {
            let mut g = Graph::<f32>::new();
            let p = self.params.bind(&mut g, false);
            let xa = g.leaf(self.batch_tensor(ca)?, false);
            let xb = g.leaf(self.batch_tensor(cb)?, false);
            let s = pair_score_graph(&mut g, &p, xa, xb)?;
            self.trunk_calls.fetch_add(ca.len() as u64, Ordering::Relaxed);
            out.extend_from_slice(g.value(s).data());
        }
        Ok(out)
    }

    pub fn score_pair(&self, a: &[f64], b: &[f64]) -> Result<f32> {
        Ok(self.score_pairs(&[a], &[b])?[0])
    }

    /// Finite-difference check (in f64) of the gradient of a fixed random
    /// linear functional of the model output with respect to parameter
    /// `name`. `b` supplies the second series of each pair for `rn2d` and is
    /// ignored otherwise. Returns the worst relative error over at most
    /// `max_coords` sampled coordinates.
    pub fn gradient_check<S: AsRef<[f64]>>(
        &self,
        name: &str,
        a: &[S],
        b: &[S],
        step: f64,
        max_coords: usize,
        seed: u64,
    ) -> Result<f64> {
        let x: Tensor<f64> = self
            .params
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter {name:?}")))?
            .cast();
        let to64 = |batch: &[S]| -> Result<Tensor<f64>> {
            Ok(self.batch_tensor(batch)?.cast())
        };
        let ta = to64(a)?;
        let tb = if self.kind() == ModelKind::Rn2d { Some(to64(b)?) } else { None };
        let n_out = a.len() * if self.kind() == ModelKind::Rn2d { 1 } else { EMBED_DIM };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let weights: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kind = self.kind();
        let f = |g: &mut Graph<f64>, probe: Var| -> Result<Var> {
            let mut p = self.params.bind(g, false);
            p.replace(name, probe)?;
            let xa = g.leaf(ta.clone(), false);
            let out = match &tb {
                Some(tb) => {
                    let xb = g.leaf(tb.clone(), false);
                    pair_score_graph(g, &p, xa, xb)?
                }
                None => embed_graph(g, &p, kind, xa)?,
            };
            g.weighted_sum(out, &weights)
        };
        finite_difference_check_sampled(f, &x, step, max_coords, seed)
    }
}

/// Expected `(name, shape)` list for a configuration.
pub fn init_params_layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    // Shapes do not depend on the initial values, so a throwaway template
    // source is fine here.
    let mut out = Vec::new();
    let len = config.series_length;
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, kernel: &[usize], cin: usize, cout: usize| {
        let mut w = kernel.to_vec();
        w.extend([cin, cout]);
        out.push((format!("{name}.w"), w));
        out.push((format!("{name}.b"), vec![cout]));
    };
    match config.kind {
        ModelKind::Rn2dwt | ModelKind::Rn2d => {
            let stem_in = if config.kind == ModelKind::Rn2dwt {
                out.push(("templates".to_string(), vec![config.n_templates, len]));
                config.n_templates
            } else {
                1
            };
            conv(&mut out, "stem", &[STEM_KERNEL, STEM_KERNEL], stem_in, TRUNK_CHANNELS);
            for b in 0..N_BLOCKS {
                conv(&mut out, &format!("block{b}.c1"), &[1, 1], TRUNK_CHANNELS, BOTTLENECK_CHANNELS);
                conv(&mut out, &format!("block{b}.c2"), &[3, 3], BOTTLENECK_CHANNELS, BOTTLENECK_CHANNELS);
                conv(&mut out, &format!("block{b}.c3"), &[1, 1], BOTTLENECK_CHANNELS, TRUNK_CHANNELS);
            }
            let head_out = if config.kind == ModelKind::Rn2dwt { EMBED_DIM } else { 1 };
            out.push(("head.w".into(), vec![TRUNK_CHANNELS, head_out]));
            out.push(("head.b".into(), vec![head_out]));
        }
        ModelKind::Rn1d => {
            let mut cin = 1;
            for s in 0..RN1D_STAGES {
                for (j, &k) in RN1D_KERNELS.iter().enumerate() {
                    let c = if j == 0 { cin } else { TRUNK_CHANNELS };
                    conv(&mut out, &format!("stage{s}.conv{j}"), &[k], c, TRUNK_CHANNELS);
                }
                if cin != TRUNK_CHANNELS {
                    conv(&mut out, &format!("stage{s}.skip"), &[1], cin, TRUNK_CHANNELS);
                }
                cin = TRUNK_CHANNELS;
            }
            out.push(("head.w".into(), vec![TRUNK_CHANNELS, EMBED_DIM]));
            out.push(("head.b".into(), vec![EMBED_DIM]));
        }
    }
    Ok(out)
}
