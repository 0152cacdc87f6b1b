//! Ranking metrics with binary relevance, batch evaluation over a query
//! split, and Welch's two-sample t-test.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::index::{build_exact_index, query_distance_scan, query_pairwise_scan, Baseline, FeatureIndex, QueryResult};
use crate::models::Model;
use crate::ts_core::{LabeledCollection, TimeSeries};

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::param("k must be >= 1"));
    }
    Ok(())
}

/// `rel[i]` for `i < k`, with positions past the end counted as non-relevant.
fn top(rel: &[bool], k: usize) -> impl Iterator<Item = bool> + '_ {
    rel.iter().copied().chain(std::iter::repeat(false)).take(k)
}

pub fn precision_at_k(rel: &[bool], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(top(rel, k).filter(|&r| r).count() as f64 / k as f64)
}

/// Mean of the prefix precisions at relevant ranks within the top `k`,
/// over the number of relevant items found there; 0 if there are none.
pub fn average_precision_at_k(rel: &[bool], k: usize) -> Result<f64> {
    check_k(k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, r) in top(rel, k).enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Binary-gain NDCG with ideal gain from `min(k, total_relevant)` relevant items.
pub fn ndcg_at_k(rel: &[bool], k: usize, total_relevant: usize) -> Result<f64> {
    check_k(k)?;
    let found = top(rel, k).filter(|&r| r).count();
    if found > total_relevant {
        return Err(Error::param(format!(
            "{found} relevant items in the top {k} but total_relevant is {total_relevant}"
        )));
    }
    if total_relevant == 0 {
        return Ok(0.0);
    }
    let disc = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = top(rel, k).enumerate().filter(|&(_, r)| r).map(|(i, _)| disc(i)).sum();
    let idcg: f64 = (0..k.min(total_relevant)).map(disc).sum();
    Ok(dcg / idcg)
}

/// Ids and labels of a ranked database, with per-label counts.
#[derive(Debug, Clone)]
pub struct Judge {
    labels: Vec<String>,
    positions: HashMap<String, usize>,
    label_counts: HashMap<String, usize>,
}

impl Judge {
    pub fn new(ids: &[String], labels: &[String]) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::dim(format!("{} ids but {} labels", ids.len(), labels.len())));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        let mut label_counts: HashMap<String, usize> = HashMap::new();
        for (i, (id, l)) in ids.iter().zip(labels).enumerate() {
            positions.insert(id.clone(), i);
            *label_counts.entry(l.clone()).or_default() += 1;
        }
        Ok(Self {
            labels: labels.to_vec(),
            positions,
            label_counts,
        })
    }

    pub fn from_collection(c: &LabeledCollection) -> Self {
        let ids: Vec<String> = c.items().iter().map(|s| s.id().to_string()).collect();
        let labels: Vec<String> = (0..c.len()).map(|i| c.label(i).to_string()).collect();
        Self::new(&ids, &labels).expect("collection ids and labels align")
    }

    pub fn from_index(idx: &FeatureIndex) -> Self {
        Self::new(idx.ids(), idx.labels()).expect("index ids and labels align")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, pos: usize) -> &str {
        &self.labels[pos]
    }

    /// Database position holding the query itself, matched by id.
    pub fn self_position(&self, query_id: &str) -> Option<usize> {
        self.positions.get(query_id).copied()
    }

    /// Same-label database items, not counting the query itself.
    pub fn total_relevant(&self, query_id: &str, label: &str) -> usize {
        let all = self.label_counts.get(label).copied().unwrap_or(0);
        match self.self_position(query_id) {
            Some(p) if self.labels[p] == label => all - 1,
            _ => all,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    /// Values aligned with the report's `k_grid`.
    pub prec: Vec<f64>,
    pub ap: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub prec: Vec<f64>,
    pub ap: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k_grid: Vec<usize>,
    pub per_query: Vec<QueryMetrics>,
    pub means: Means,
    pub n_queries: usize,
    pub mean_query_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Prec,
    Ap,
    Ndcg,
}

impl MetricsReport {
    fn slot(&self, k: usize) -> Result<usize> {
        self.k_grid
            .iter()
            .position(|&g| g == k)
            .ok_or_else(|| Error::param(format!("k = {k} is not in the report grid {:?}", self.k_grid)))
    }

    pub fn mean(&self, metric: Metric, k: usize) -> Result<f64> {
        let s = self.slot(k)?;
        Ok(match metric {
            Metric::Prec => self.means.prec[s],
            Metric::Ap => self.means.ap[s],
            Metric::Ndcg => self.means.ndcg[s],
        })
    }

    /// Per-query values of one metric at `k`, in query order.
    pub fn per_query_values(&self, metric: Metric, k: usize) -> Result<Vec<f64>> {
        let s = self.slot(k)?;
        Ok(self
            .per_query
            .iter()
            .map(|q| match metric {
                Metric::Prec => q.prec[s],
                Metric::Ap => q.ap[s],
                Metric::Ndcg => q.ndcg[s],
            })
            .collect())
    }

    /// Same report with the timing field zeroed, for value comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            mean_query_time_s: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format(e.to_string()))
    }
}

/// Metrics of one ranked list of database positions, the query's own
/// entry already removed.
pub fn query_metrics(query_id: &str, rel: &[bool], total_relevant: usize, k_grid: &[usize]) -> Result<QueryMetrics> {
    let mut m = QueryMetrics {
        query_id: query_id.to_string(),
        prec: Vec::with_capacity(k_grid.len()),
        ap: Vec::with_capacity(k_grid.len()),
        ndcg: Vec::with_capacity(k_grid.len()),
    };
    for &k in k_grid {
        m.prec.push(precision_at_k(rel, k)?);
        m.ap.push(average_precision_at_k(rel, k)?);
        m.ndcg.push(ndcg_at_k(rel, k, total_relevant)?);
    }
    Ok(m)
}

/// Runs `query_fn(query, k)` for every query and scores the rankings
/// against label agreement. A query present in the database (same id) is
/// removed from its own ranking; `query_fn` is asked for one extra item to
/// make up for it.
pub fn evaluate_queries<F>(queries: &LabeledCollection, judge: &Judge, mut query_fn: F, k_grid: &[usize]) -> Result<MetricsReport>
where
    F: FnMut(&TimeSeries, usize) -> Result<QueryResult>,
{
    if queries.is_empty() {
        return Err(Error::param("empty query set"));
    }
    if k_grid.is_empty() {
        return Err(Error::param("empty k grid"));
    }
    for &k in k_grid {
        check_k(k)?;
    }
    let max_k = *k_grid.iter().max().expect("non-empty");
    let mut per_query = Vec::with_capacity(queries.len());
    let mut total_time = 0.0;
    for (qi, q) in queries.items().iter().enumerate() {
        let label = queries.label(qi);
        let own = judge.self_position(q.id());
        let want = if own.is_some() { max_k + 1 } else { max_k };
        let res = query_fn(q, want)?;
        total_time += res.elapsed_s;
        let rel: Vec<bool> = res
            .hits
            .iter()
            .filter(|h| Some(h.position) != own)
            .take(max_k)
            .map(|h| judge.label(h.position) == label)
            .collect();
        per_query.push(query_metrics(q.id(), &rel, judge.total_relevant(q.id(), label), k_grid)?);
    }
    let n = per_query.len() as f64;
    let mean_of = |f: &dyn Fn(&QueryMetrics) -> &Vec<f64>| -> Vec<f64> {
        (0..k_grid.len())
            .map(|s| per_query.iter().map(|q| f(q)[s]).sum::<f64>() / n)
            .collect()
    };
    let means = Means {
        prec: mean_of(&|q| &q.prec),
        ap: mean_of(&|q| &q.ap),
        ndcg: mean_of(&|q| &q.ndcg),
    };
    Ok(MetricsReport {
        k_grid: k_grid.to_vec(),
        n_queries: per_query.len(),
        per_query,
        means,
        mean_query_time_s: total_time / n,
    })
}

/// Evaluates a model with `database` as the ranked collection: exact
/// embedding search for embedding models, a full pairwise scan otherwise.
pub fn evaluate_model(model: &Model, database: &LabeledCollection, queries: &LabeledCollection, k_grid: &[usize]) -> Result<MetricsReport> {
    let judge = Judge::from_collection(database);
    if model.kind().is_embedding() {
        let idx = build_exact_index(database, model, "")?;
        evaluate_queries(queries, &judge, |q, k| idx.query_exact(model, q.values(), k), k_grid)
    } else {
        evaluate_queries(queries, &judge, |q, k| query_pairwise_scan(database, q.values(), k, model), k_grid)
    }
}

pub fn evaluate_baseline(baseline: Baseline, database: &LabeledCollection, queries: &LabeledCollection, k_grid: &[usize]) -> Result<MetricsReport> {
    let judge = Judge::from_collection(database);
    evaluate_queries(queries, &judge, |q, k| query_distance_scan(database, q.values(), k, baseline), k_grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

pub const ALPHA: f64 = 0.05;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test, two-sided, significance at 0.05.
pub fn two_sample_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Test(format!(
            "both samples need at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Test("samples contain non-finite values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::Test("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Test(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p_value,
        significant: p_value < ALPHA,
    })
}
