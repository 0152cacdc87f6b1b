use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`,
/// with central differences of half-width `step`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_coords(&f, x, step, &coords)
}

/// Like [`finite_difference_check`] but over at most `max_coords` randomly
/// chosen coordinates.
pub fn finite_difference_check_sampled<F>(f: F, x: &Tensor<f64>, step: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, n, max_coords).into_vec();
        c.sort_unstable();
        c
    };
    check_coords(&f, x, step, &coords)
}

fn eval<F>(f: &F, x: Tensor<f64>, requires_grad: bool) -> Result<(Graph<f64>, Var, Var)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x, requires_grad);
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::dim("gradient check needs a scalar-valued function"));
    }
    Ok((g, xv, y))
}

/// Each step shrinks the half-width tenfold when the first choice straddles a kink.
const MAX_SHRINKS: usize = 4;

fn check_coords<F>(f: &F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let (mut g, xv, y) = eval(f, x.clone(), true)?;
    let base = g.kink_pattern();
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let probe = |c: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut moved = x.clone();
        moved.data_mut()[c] += delta;
        let (g, _, y) = eval(f, moved, false)?;
        Ok((g.value(y).data()[0], g.kink_pattern()))
    };
    let mut worst = 0.0f64;
    for &c in coords {
        // A central difference across a ReLU or |.| kink estimates neither
        // one-sided derivative, so shrink until both probes share x's piece.
        let mut h = step;
        let mut numeric;
        let mut shrinks = 0;
        loop {
            let (fp, kp) = probe(c, h)?;
            let (fm, km) = probe(c, -h)?;
            numeric = (fp - fm) / (2.0 * h);
            if (kp == base && km == base) || shrinks == MAX_SHRINKS {
                break;
            }
            h /= 10.0;
            shrinks += 1;
        }
        let a = analytic.data()[c];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
