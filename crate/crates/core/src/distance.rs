//! Euclidean and DTW distances and the pairwise absolute-difference
//! matrices that feed the 2-D residual models.

use crate::error::{Error, Result};

/// Largest side length accepted by [`dtw_brute_force`].
pub const BRUTE_FORCE_MAX_LEN: usize = 8;

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "euclidean distance needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// `w x h` matrix of `|a_i - b_j|`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn pairwise_abs_matrix(a: &[f64], b: &[f64]) -> DistanceMatrix {
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        data.extend(b.iter().map(|&y| (x - y).abs()));
    }
    DistanceMatrix {
        rows: a.len(),
        cols: b.len(),
        data,
    }
}

/// Unconstrained DTW with an L1 local cost.
///
/// Accumulates `D[i,j] += min(D[i-1,j], D[i,j-1], D[i-1,j-1])` in row order;
/// the first row and column only have one predecessor.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::dim("dtw needs non-empty series"));
    }
    let h = b.len();
    let mut prev = vec![0.0f64; h];
    let mut cur = vec![0.0f64; h];
    for (i, &x) in a.iter().enumerate() {
        for j in 0..h {
            let cost = (x - b[j]).abs();
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[h - 1])
}

/// Minimum summed `|a_i - b_j|` over every monotone warping path from
/// `(0,0)` to `(w-1,h-1)`, by explicit enumeration.
pub fn dtw_brute_force(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::dim("dtw needs non-empty series"));
    }
    if a.len() > BRUTE_FORCE_MAX_LEN || b.len() > BRUTE_FORCE_MAX_LEN {
        return Err(Error::param(format!(
            "brute-force dtw limited to lengths <= {BRUTE_FORCE_MAX_LEN}, got {} and {}",
            a.len(),
            b.len()
        )));
    }

    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }

    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    Ok(best)
}

/// `w x h x K` stack of pairwise matrices against each template, channel
/// innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTensor {
    w: usize,
    h: usize,
    k: usize,
    data: Vec<f64>,
}

impl DistanceTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.w, self.h, self.k)
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.h + j) * self.k + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> DistanceMatrix {
        let data = (0..self.w * self.h).map(|p| self.data[p * self.k + c]).collect();
        DistanceMatrix {
            rows: self.w,
            cols: self.h,
            data,
        }
    }
}

pub fn template_distance_tensor<T: AsRef<[f64]>>(a: &[f64], templates: &[T]) -> Result<DistanceTensor> {
    let k = templates.len();
    let h = templates
        .first()
        .map(|t| t.as_ref().len())
        .ok_or_else(|| Error::dim("at least one template is required"))?;
    if let Some(bad) = templates.iter().position(|t| t.as_ref().len() != h) {
        return Err(Error::dim(format!(
            "template {bad} has length {}, expected {h}",
            templates[bad].as_ref().len()
        )));
    }
    let mut data = Vec::with_capacity(a.len() * h * k);
    for &x in a {
        for j in 0..h {
            data.extend(templates.iter().map(|t| (x - t.as_ref()[j]).abs()));
        }
    }
    Ok(DistanceTensor {
        w: a.len(),
        h,
        k,
        data,
    })
}
