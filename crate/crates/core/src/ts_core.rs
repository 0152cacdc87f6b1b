//! Time-series types, TSV corpus IO, preprocessing and the synthetic
//! labeled corpus.
//!
//! The on-disk corpus format is one record per line,
//! `label<TAB>v1<TAB>...<TAB>vL`, UCR style.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Below this population standard deviation a series is treated as constant.
pub const CONSTANT_STD: f64 = 1e-8;

/// One univariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    id: String,
    values: Vec<f64>,
    label: Option<String>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, values: Vec<f64>, label: Option<String>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::dim(format!(
                "a series needs at least 2 values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite value at position {pos}")));
        }
        Ok(Self {
            id: id.into(),
            values,
            label,
        })
    }

    pub fn labeled(id: impl Into<String>, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        Self::new(id, values, Some(label.into()))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    /// Same id and label, new values. Values are assumed valid.
    fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2 && values.iter().all(|v| v.is_finite()));
        Self {
            id: self.id.clone(),
            values,
            label: self.label.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labeled, equal-length series belonging to one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCollection {
    items: Vec<TimeSeries>,
    split: Split,
    fixed_length: usize,
}

impl LabeledCollection {
    pub fn new(items: Vec<TimeSeries>, split: Split) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::EmptyInput("collection has no series".into()))?;
        let fixed_length = first.len();
        let mut ids = BTreeSet::new();
        for (i, s) in items.iter().enumerate() {
            if s.label.is_none() {
                return Err(Error::param(format!("series {} ({}) has no label", i, s.id)));
            }
            if s.len() != fixed_length {
                return Err(Error::dim(format!(
                    "series {} ({}) has length {}, expected {}",
                    i,
                    s.id,
                    s.len(),
                    fixed_length
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::param(format!("duplicate series id {}", s.id)));
            }
        }
        Ok(Self {
            items,
            split,
            fixed_length,
        })
    }

    pub fn items(&self) -> &[TimeSeries] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn fixed_length(&self) -> usize {
        self.fixed_length
    }

    pub fn label(&self, i: usize) -> &str {
        self.items[i].label().expect("collection items are labeled")
    }

    pub fn labels(&self) -> Vec<&str> {
        (0..self.items.len()).map(|i| self.label(i)).collect()
    }

    pub fn distinct_labels(&self) -> BTreeSet<&str> {
        self.labels().into_iter().collect()
    }
}

/// Read `label<TAB>v1<TAB>...` records. Blank lines are skipped; ids are
/// `<file stem>:<record ordinal>`.
pub fn load_tsv_series(path: impl AsRef<Path>, has_header: bool) -> Result<Vec<TimeSeries>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_tsv(&text, &stem, has_header)
}

pub fn parse_tsv(text: &str, id_prefix: &str, has_header: bool) -> Result<Vec<TimeSeries>> {
    let mut out = Vec::new();
    let mut header_pending = has_header;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let mut fields = line.split('\t');
        let label = fields.next().unwrap_or_default().trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "missing label".into(),
            });
        }
        let mut values = Vec::new();
        for tok in fields {
            let tok = tok.trim();
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric value {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value {tok:?}"),
                });
            }
            values.push(v);
        }
        if values.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 2 values, found {}", values.len()),
            });
        }
        let id = format!("{}:{}", id_prefix, out.len());
        out.push(TimeSeries {
            id,
            values,
            label: Some(label.to_string()),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no records found".into()));
    }
    Ok(out)
}

/// Load an equal-length labeled TSV file as a training-split collection.
pub fn load_tsv(path: impl AsRef<Path>, has_header: bool) -> Result<LabeledCollection> {
    LabeledCollection::new(load_tsv_series(path, has_header)?, Split::Train)
}

pub fn to_tsv(series: &[TimeSeries]) -> String {
    let mut out = String::new();
    for s in series {
        out.push_str(s.label().unwrap_or("?"));
        for v in &s.values {
            out.push('\t');
            // shortest round-trip representation
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_tsv(series: &[TimeSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_tsv(series).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero mean, unit population standard deviation. Constant series map to zeros.
pub fn z_normalize(s: &TimeSeries) -> TimeSeries {
    s.with_values(z_normalize_values(&s.values))
}

pub fn z_normalize_values(values: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(values);
    if std < CONSTANT_STD {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Linear interpolation onto `len` equally spaced positions over `[0, n-1]`.
pub fn resample_to_length(s: &TimeSeries, len: usize) -> Result<TimeSeries> {
    if len < 2 {
        return Err(Error::param(format!("target length must be >= 2, got {len}")));
    }
    Ok(s.with_values(resample_values(&s.values, len)))
}

pub(crate) fn resample_values(values: &[f64], len: usize) -> Vec<f64> {
    let n = values.len();
    if n == len {
        return values.to_vec();
    }
    let span = (n - 1) as f64;
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        if j == len - 1 {
            out.push(values[n - 1]);
            continue;
        }
        let x = j as f64 * span / (len - 1) as f64;
        let i0 = (x.floor() as usize).min(n - 1);
        let frac = x - i0 as f64;
        let v = if i0 + 1 < n {
            values[i0] + (values[i0 + 1] - values[i0]) * frac
        } else {
            values[i0]
        };
        out.push(v);
    }
    out
}

/// Preprocessing applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub length: usize,
    pub znorm: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            length: 64,
            znorm: true,
        }
    }
}

impl Preprocess {
    pub fn apply(&self, s: &TimeSeries) -> Result<TimeSeries> {
        let r = resample_to_length(s, self.length)?;
        Ok(if self.znorm { z_normalize(&r) } else { r })
    }

    pub fn collection(&self, series: &[TimeSeries], split: Split) -> Result<LabeledCollection> {
        let items = series
            .iter()
            .map(|s| self.apply(s))
            .collect::<Result<Vec<_>>>()?;
        LabeledCollection::new(items, split)
    }
}

/// Waveform families of the synthetic corpus, in class-index order.
pub const WAVEFORMS: [&str; 8] = [
    "sine",
    "square",
    "triangle",
    "chirp",
    "ramp",
    "two-bump",
    "damped-sine",
    "noise-burst",
];

const CYCLES: f64 = 3.0;
/// Per-item phase shifts are drawn from `[0, MAX_PHASE)` periods.
pub const MAX_PHASE: f64 = 0.25;
/// Per-item warp amplitudes are drawn from `(-MAX_WARP, MAX_WARP)`; any value
/// below 1 keeps the warp monotone.
pub const MAX_WARP: f64 = 0.9;
pub const DEFAULT_NOISE: f64 = 0.2;

/// Smooth monotone time warp fixing both ends of `[0,1]`.
pub fn time_warp(t: f64, amplitude: f64) -> f64 {
    use std::f64::consts::PI;
    t + amplitude * (2.0 * PI * t).sin() / (2.0 * PI)
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

fn circular_gap(a: f64, b: f64) -> f64 {
    let d = frac(a - b);
    d.min(1.0 - d)
}

/// Noise-free value of waveform `class` at relative time `t` in `[0,1)`,
/// shifted by `phase` (fraction of one period).
pub fn waveform(class: usize, t: f64, phase: f64) -> f64 {
    use std::f64::consts::PI;
    let u = CYCLES * t + phase;
    match class {
        0 => (2.0 * PI * u).sin(),
        1 => {
            if frac(u) < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        2 => 1.0 - 4.0 * (frac(u) - 0.5).abs(),
        3 => (2.0 * PI * (phase + t + 4.0 * t * t)).sin(),
        4 => 2.0 * frac(u) - 1.0,
        5 => {
            let bump = |c: f64| (-0.5 * (circular_gap(t, c) / 0.06).powi(2)).exp();
            bump(phase) + 0.6 * bump(phase + 0.45)
        }
        6 => (-3.0 * t).exp() * (2.0 * PI * (4.0 * t + phase)).sin(),
        7 => {
            let gap = circular_gap(t, phase);
            if gap < 0.15 {
                let window = 0.5 * (1.0 + (PI * gap / 0.15).cos());
                window * (2.0 * PI * 14.0 * t).sin()
            } else {
                0.0
            }
        }
        _ => unreachable!("class index checked by caller"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub length: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Random per-item phase shift; `false` fixes the phase at 0.
    pub phase_shift: bool,
    /// Random per-item time warp; `false` keeps time linear.
    pub time_warp: bool,
}

impl SynthConfig {
    pub fn new(n_classes: usize, length: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            n_classes,
            length,
            noise_sigma,
            seed,
            phase_shift: true,
            time_warp: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=WAVEFORMS.len()).contains(&self.n_classes) {
            return Err(Error::param(format!(
                "n_classes must be in [2, {}], got {}",
                WAVEFORMS.len(),
                self.n_classes
            )));
        }
        if self.length < 16 {
            return Err(Error::param(format!("length must be >= 16, got {}", self.length)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param(format!(
                "noise_sigma must be a finite value >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Generate `n_per_class` items per class for `split`. Each split draws
    /// from its own random stream, so split sizes do not influence each other.
    pub fn generate(&self, n_per_class: usize, split: Split) -> Result<LabeledCollection> {
        self.validate()?;
        if n_per_class == 0 {
            return Err(Error::param("n_per_class must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(match split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        });
        let noise = Normal::new(0.0, self.noise_sigma).map_err(|e| Error::param(e.to_string()))?;
        let mut items = Vec::with_capacity(n_per_class * self.n_classes);
        for i in 0..n_per_class {
            for class in 0..self.n_classes {
                let phase = if self.phase_shift {
                    rng.gen::<f64>() * MAX_PHASE
                } else {
                    0.0
                };
                let amp = if self.time_warp {
                    rng.gen_range(-MAX_WARP..MAX_WARP)
                } else {
                    0.0
                };
                let raw: Vec<f64> = (0..self.length)
                    .map(|j| {
                        let t = time_warp(j as f64 / self.length as f64, amp);
                        waveform(class, t, phase) + noise.sample(&mut rng)
                    })
                    .collect();
                let id = format!("{}:{}", split.as_str(), i * self.n_classes + class);
                items.push(TimeSeries {
                    id,
                    values: z_normalize_values(&raw),
                    label: Some(class.to_string()),
                });
            }
        }
        LabeledCollection::new(items, split)
    }
}

/// One collection of `n_per_class * n_classes` z-normalized series.
pub fn make_synthetic_corpus(
    n_per_class: usize,
    length: usize,
    n_classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledCollection> {
    SynthConfig::new(n_classes, length, noise_sigma, seed).generate(n_per_class, Split::Train)
}

/// Train/validation/test splits from one configuration.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledCollection,
    pub val: LabeledCollection,
    pub test: LabeledCollection,
}

pub fn make_synthetic_splits(
    cfg: &SynthConfig,
    train_per_class: usize,
    val_per_class: usize,
    test_per_class: usize,
) -> Result<Splits> {
    Ok(Splits {
        train: cfg.generate(train_per_class, Split::Train)?,
        val: cfg.generate(val_per_class, Split::Validation)?,
        test: cfg.generate(test_per_class, Split::Test)?,
    })
}
