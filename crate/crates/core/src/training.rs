//! Triplet sampling, BPR training with AdamW, validation-based model
//! selection and the `CTSR` checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{softplus, AdamW, Graph, ParamStore, Tensor};
use crate::binio::{check_header, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, Metric};
use crate::models::{embed_graph, init_params, pair_score_graph, Model, ModelConfig, ModelKind, DEFAULT_TEMPLATES};
use crate::ts_core::LabeledCollection;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTSR";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Cut-off of the validation metric used for model selection.
pub const SELECTION_K: usize = 10;

/// Positions into the sampled collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Item positions grouped by label, used to draw triplets.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    by_label: Vec<Vec<usize>>,
    label_of: Vec<usize>,
    anchors: Vec<usize>,
}

impl TripletSampler {
    pub fn new(collection: &LabeledCollection) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for i in 0..collection.len() {
            groups.entry(collection.label(i)).or_default().push(i);
        }
        if groups.len() < 2 {
            return Err(Error::Sampling(format!(
                "need at least 2 labels to draw negatives, got {}",
                groups.len()
            )));
        }
        let by_label: Vec<Vec<usize>> = groups.into_values().collect();
        let mut label_of = vec![0; collection.len()];
        for (l, members) in by_label.iter().enumerate() {
            for &i in members {
                label_of[i] = l;
            }
        }
        // only items with a same-label partner can anchor a triplet
        let anchors: Vec<usize> = (0..collection.len())
            .filter(|&i| by_label[label_of[i]].len() >= 2)
            .collect();
        if anchors.is_empty() {
            return Err(Error::Sampling("every class is a singleton; no positive exists".into()));
        }
        Ok(Self {
            by_label,
            label_of,
            anchors,
        })
    }

    pub fn sample(&self, m: usize, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
        let n = self.label_of.len();
        (0..m)
            .map(|_| {
                let anchor = self.anchors[rng.gen_range(0..self.anchors.len())];
                let same = &self.by_label[self.label_of[anchor]];
                // draw among the other members by skipping the anchor's slot
                let own = same.binary_search(&anchor).expect("anchor is in its class");
                let p = rng.gen_range(0..same.len() - 1);
                let positive = same[if p >= own { p + 1 } else { p }];
                let others = n - same.len();
                let mut r = rng.gen_range(0..others);
                let mut negative = 0;
                for (l, members) in self.by_label.iter().enumerate() {
                    if l == self.label_of[anchor] {
                        continue;
                    }
                    if r < members.len() {
                        negative = members[r];
                        break;
                    }
                    r -= members.len();
                }
                Triplet {
                    anchor,
                    positive,
                    negative,
                }
            })
            .collect()
    }
}

/// `m` triplets: anchor uniform over items that have a same-label partner,
/// positive uniform over the anchor's other same-label items, negative
/// uniform over different-label items.
pub fn sample_triplet_batch(collection: &LabeledCollection, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Triplet>> {
    Ok(TripletSampler::new(collection)?.sample(m, rng))
}

/// `sum_i softplus(neg_i - pos_i)`, i.e. `sum_i -log sigmoid(pos_i - neg_i)`.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(Error::dim(format!(
            "bpr loss needs equal non-empty score lists, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub n_templates: usize,
    pub series_length: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamW::default();
        Self {
            model_kind: ModelKind::Rn2dwt,
            batch_size: 32,
            epochs: 10,
            steps_per_epoch: 100,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            n_templates: DEFAULT_TEMPLATES,
            series_length: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.model_kind, self.series_length, self.n_templates)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::param("batch size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::param("lr and eps must be positive and weight decay nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta1 and beta2 must lie in [0, 1)"));
        }
        self.model_config().validate()
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "model_kind={}\nbatch_size={}\nepochs={}\nsteps_per_epoch={}\nlr={:?}\nbeta1={:?}\nbeta2={:?}\neps={:?}\nweight_decay={:?}\nn_templates={}\nseries_length={}\nseed={}\n",
            self.model_kind,
            self.batch_size,
            self.epochs,
            self.steps_per_epoch,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.n_templates,
            self.series_length,
            self.seed
        )
    }

    fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let v = kv.get(key).ok_or_else(|| Error::format(format!("config is missing {key:?}")))?;
            v.parse()
                .map_err(|_| Error::format(format!("config value {key}={v:?} does not parse")))
        }
        Ok(Self {
            model_kind: get(kv, "model_kind")?,
            batch_size: get(kv, "batch_size")?,
            epochs: get(kv, "epochs")?,
            steps_per_epoch: get(kv, "steps_per_epoch")?,
            lr: get(kv, "lr")?,
            beta1: get(kv, "beta1")?,
            beta2: get(kv, "beta2")?,
            eps: get(kv, "eps")?,
            weight_decay: get(kv, "weight_decay")?,
            n_templates: get(kv, "n_templates")?,
            series_length: get(kv, "series_length")?,
            seed: get(kv, "seed")?,
        })
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("config line {line:?} has no '='")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::format(format!("config key {k:?} repeated")));
        }
    }
    Ok(out)
}

/// A trained (or initial) model with its selection metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub best_val_ndcg10: f64,
    /// Epoch the parameters come from; 0 is the initialization.
    pub epoch: usize,
}

impl CheckpointRecord {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.model_config(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(self.config.model_kind.as_str())?;
        let text = format!(
            "{}best_val_ndcg10={:?}\nepoch={}\n",
            self.config.to_kv(),
            self.best_val_ndcg10,
            self.epoch
        );
        w.str(&text)?;
        w.len_u32(self.params.len())?;
        for (name, t) in self.params.iter() {
            w.str(name)?;
            w.len_u32(t.shape().len())?;
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f32(v);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        check_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let kind: ModelKind = r
            .str("model kind")?
            .parse()
            .map_err(|e: Error| Error::format(e.to_string()))?;
        let kv = parse_kv(&r.str("config")?)?;
        let config = TrainConfig::from_map(&kv)?;
        if config.model_kind != kind {
            return Err(Error::format(format!(
                "header says {kind} but config says {}",
                config.model_kind
            )));
        }
        let best_val_ndcg10: f64 = kv
            .get("best_val_ndcg10")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("config lacks a valid best_val_ndcg10"))?;
        let epoch: usize = kv
            .get("epoch")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("config lacks a valid epoch"))?;
        let count = r.u32("tensor count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(
                    usize::try_from(r.u64("tensor dim")?).map_err(|_| Error::format("tensor dim too large"))?,
                );
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(format!("tensor {name:?} shape {shape:?} overflows")))?;
            let data = r.f32s(numel, &format!("payload of {name:?}"))?;
            let t = Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?;
            params.insert(name, t).map_err(|e| Error::format(e.to_string()))?;
        }
        r.expect_end()?;
        let rec = Self {
            config,
            params,
            best_val_ndcg10,
            epoch,
        };
        rec.model().map_err(|e| Error::format(format!("parameters do not fit the config: {e}")))?;
        if !rec.params.all_finite() {
            return Err(Error::format("non-finite parameter value"));
        }
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(rec: &CheckpointRecord, path: impl AsRef<Path>) -> Result<()> {
    rec.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointRecord> {
    CheckpointRecord::load(path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_ndcg10: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: CheckpointRecord,
    pub log: Vec<EpochLog>,
    /// Loss of every step, in order.
    pub step_losses: Vec<f64>,
}

/// Mean NDCG@10 of `queries` ranked against `database`.
pub fn validation_ndcg10(model: &Model, database: &LabeledCollection, queries: &LabeledCollection) -> Result<f64> {
    evaluate_model(model, database, queries, &[SELECTION_K])?.mean(Metric::Ndcg, SELECTION_K)
}

fn batch_tensor(c: &LabeledCollection, rows: impl Iterator<Item = usize>, len: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    for i in rows {
        data.extend(c.items()[i].values().iter().map(|&v| v as f32));
        n += 1;
    }
    Tensor::new(vec![n, len], data)
}

/// Loss of one batch; gradients are accumulated into `params`.
fn train_step(params: &mut ParamStore, kind: ModelKind, c: &LabeledCollection, batch: &[Triplet], len: usize) -> Result<f64> {
    let m = batch.len();
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true);
    let (pos, neg) = if kind.is_embedding() {
        let rows = batch
            .iter()
            .map(|t| t.anchor)
            .chain(batch.iter().map(|t| t.positive))
            .chain(batch.iter().map(|t| t.negative));
        let x = g.leaf(batch_tensor(c, rows, len)?, false);
        let e = embed_graph(&mut g, &p, kind, x)?;
        let idx: Vec<usize> = (0..3 * m).collect();
        let a = g.gather_rows(e, &idx[..m])?;
        let ep = g.gather_rows(e, &idx[m..2 * m])?;
        let en = g.gather_rows(e, &idx[2 * m..])?;
        (g.neg_euclidean(a, ep)?, g.neg_euclidean(a, en)?)
    } else {
        // score(item, query) with the anchor as the query
        let items = batch.iter().map(|t| t.positive).chain(batch.iter().map(|t| t.negative));
        let queries = batch.iter().map(|t| t.anchor).chain(batch.iter().map(|t| t.anchor));
        let xi = g.leaf(batch_tensor(c, items, len)?, false);
        let xq = g.leaf(batch_tensor(c, queries, len)?, false);
        let s = pair_score_graph(&mut g, &p, xi, xq)?;
        let idx: Vec<usize> = (0..2 * m).collect();
        let s = g.reshape(s, &[2 * m, 1])?;
        let sp = g.gather_rows(s, &idx[..m])?;
        let sn = g.gather_rows(s, &idx[m..])?;
        (g.reshape(sp, &[m])?, g.reshape(sn, &[m])?)
    };
    let loss = g.bpr_loss(pos, neg)?;
    let value = g.value(loss).data()[0] as f64;
    if value.is_finite() {
        g.backward(loss)?;
        params.accumulate_grads(&g, &p)?;
    }
    Ok(value)
}

/// Runs `epochs x steps_per_epoch` AdamW steps on BPR loss over sampled
/// triplets, scoring validation NDCG@10 (validation queries against the
/// training collection) after every epoch, and returns the best epoch's
/// parameters, earliest on ties. With 0 epochs the initialization is
/// returned, scored the same way.
pub fn train(train: &LabeledCollection, val: &LabeledCollection, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(train, val, config, |_| {})
}

pub fn train_with_progress<F: FnMut(&EpochLog)>(
    train: &LabeledCollection,
    val: &LabeledCollection,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    let len = config.series_length;
    for (what, c) in [("training", train), ("validation", val)] {
        if c.fixed_length() != len {
            return Err(Error::dim(format!(
                "{what} series have length {}, config expects {len}",
                c.fixed_length()
            )));
        }
    }
    let sampler = TripletSampler::new(train)?;
    let mcfg = config.model_config();
    let mut params = init_params(&mcfg, Some(train), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let opt = config.optimizer();

    let score = |params: &ParamStore| -> Result<f64> {
        validation_ndcg10(&Model::new(mcfg, params.clone())?, train, val)
    };
    let mut best = if config.epochs == 0 {
        Some(CheckpointRecord {
            config: *config,
            params: params.detached(),
            best_val_ndcg10: score(&params)?,
            epoch: 0,
        })
    } else {
        None
    };
    let mut log = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::with_capacity(config.epochs * config.steps_per_epoch);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for step in 0..config.steps_per_epoch {
            let batch = sampler.sample(config.batch_size, &mut rng);
            let loss = train_step(&mut params, config.model_kind, train, &batch, len)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step + 1,
                    value: loss,
                });
            }
            params.adamw_step(&opt)?;
            total += loss;
            step_losses.push(loss);
        }
        let ndcg = score(&params)?;
        let entry = EpochLog {
            epoch,
            train_loss: if config.steps_per_epoch > 0 { total / config.steps_per_epoch as f64 } else { 0.0 },
            val_ndcg10: ndcg,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |b| ndcg > b.best_val_ndcg10) {
            best = Some(CheckpointRecord {
                config: *config,
                params: params.detached(),
                best_val_ndcg10: ndcg,
                epoch,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one candidate"),
        log,
        step_losses,
    })
}
