//! Evaluation: importance-sampled log-likelihood, exact marginals and KL by
//! enumeration on small models, and finite-difference derivative checkers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::map_indexed;
use crate::model::{upward_pass, Architecture, Encoding, HelmholtzMachine, LayerStates, SigmoidBeliefNet};
use crate::trainers::log_sum_exp;
use crate::{Error, Result};

/// Most hidden units [`exact_log_marginal`] will enumerate.
pub const MAX_ENUM_HIDDEN: usize = 24;
/// Most visible units [`exact_kl`] and [`all_visible_states`] will enumerate.
pub const MAX_ENUM_VISIBLE: usize = 12;

/// Posterior samples drawn per datum in one batch of the IS estimator.
const IS_CHUNK: usize = 2000;
/// Rows per enumeration batch.
const ENUM_CHUNK: usize = 4096;

/// An explicit distribution over visible bit-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    support: Vec<Vec<bool>>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<Vec<bool>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::invalid("support and probabilities must be nonempty and aligned"));
        }
        let d = support[0].len();
        if support.iter().any(|s| s.len() != d) {
            return Err(Error::shape("support vectors differ in length"));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::invalid("probabilities must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[Vec<bool>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    /// Probability of `x` (0 outside the support).
    pub fn prob(&self, x: &[bool]) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(s, _)| s.as_slice() == x)
            .map(|(_, &p)| p)
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Support rows in the given encoding, one per support state.
    pub fn states(&self, encoding: Encoding) -> Array2<f64> {
        bits_to_states(&self.support, encoding)
    }

    /// `n` i.i.d. draws as an `n x d` matrix in the given encoding.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, encoding: Encoding, rng: &mut R) -> Array2<f64> {
        let idx = self.sample_indices(n, rng);
        let mut out = Array2::zeros((n, self.dim()));
        for (mut row, i) in out.axis_iter_mut(Axis(0)).zip(idx) {
            for (v, &b) in row.iter_mut().zip(&self.support[i]) {
                *v = encoding.encode(b);
            }
        }
        out
    }

    /// `n` i.i.d. draws as indices into the support.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let dist = WeightedIndex::new(&self.probs).expect("validated probabilities");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
}

fn bits_to_states(bits: &[Vec<bool>], encoding: Encoding) -> Array2<f64> {
    let d = bits.first().map_or(0, Vec::len);
    let mut out = Array2::zeros((bits.len(), d));
    for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(bits) {
        for (v, &bit) in row.iter_mut().zip(b) {
            *v = encoding.encode(bit);
        }
    }
    out
}

/// Rows `start..start+len` of the full `2^bits x bits` enumeration; bit `j` of
/// the row index sets column `j`.
pub fn enumeration_rows(bits: usize, start: usize, len: usize, encoding: Encoding) -> Array2<f64> {
    Array2::from_shape_fn((len, bits), |(r, j)| encoding.encode(((start + r) >> j) & 1 == 1))
}

/// Every configuration of `bits` units, `2^bits x bits`.
pub fn enumerate_configs(bits: usize, encoding: Encoding) -> Array2<f64> {
    enumeration_rows(bits, 0, 1 << bits, encoding)
}

/// Every visible configuration of the architecture (guarded).
pub fn all_visible_states(arch: &Architecture) -> Result<Array2<f64>> {
    guard("visible layer", arch.visible(), MAX_ENUM_VISIBLE)?;
    Ok(enumerate_configs(arch.visible(), arch.encoding()))
}

fn guard(what: &'static str, got: usize, limit: usize) -> Result<()> {
    if got > limit {
        return Err(Error::SizeGuard { what, got, limit });
    }
    Ok(())
}

/// Splits hidden-configuration rows into one matrix per hidden layer.
fn hidden_layers(arch: &Architecture, rows: &Array2<f64>) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(arch.depth());
    let mut col = 0;
    for i in 1..=arch.depth() {
        let l = arch.size(i);
        out.push(rows.slice(ndarray::s![.., col..col + l]).to_owned());
        col += l;
    }
    out
}

/// Joint states `(x, h)` for every hidden configuration `h` in
/// `start..start+len`, with `x` fixed.
fn joint_chunk(arch: &Architecture, x: ArrayView1<'_, f64>, start: usize, len: usize) -> Result<LayerStates> {
    let rows = enumeration_rows(arch.hidden_units(), start, len, arch.encoding());
    let mut states = Vec::with_capacity(arch.depth() + 1);
    states.push(x.broadcast((len, x.len())).expect("visible broadcast").to_owned());
    states.extend(hidden_layers(arch, &rows));
    LayerStates::from_states(states)
}

/// Every hidden configuration paired with `x`, plus `ln p(x, h)` per row.
/// Rows follow the enumeration order of [`enumerate_configs`] over all hidden
/// units, layer 1 first.
pub fn enumerate_joint(p: &SigmoidBeliefNet, x: ArrayView1<'_, f64>) -> Result<(LayerStates, Array1<f64>)> {
    let arch = p.architecture();
    guard("hidden layers", arch.hidden_units(), MAX_ENUM_HIDDEN)?;
    check_visible(arch, x)?;
    let states = joint_chunk(arch, x, 0, 1 << arch.hidden_units())?;
    let means = p.conditional_means(&states)?;
    let lp = p.log_prob_from_means(&states, &means);
    Ok((states, lp))
}

fn check_visible(arch: &Architecture, x: ArrayView1<'_, f64>) -> Result<()> {
    if x.len() != arch.visible() {
        return Err(Error::shape(format!(
            "datum has {} entries, visible layer has {}",
            x.len(),
            arch.visible()
        )));
    }
    Ok(())
}

/// `ln p(x) = ln sum_h p(x, h)` by exhaustive enumeration of the hidden units.
pub fn exact_log_marginal(p: &SigmoidBeliefNet, x: ArrayView1<'_, f64>) -> Result<f64> {
    let arch = p.architecture();
    guard("hidden layers", arch.hidden_units(), MAX_ENUM_HIDDEN)?;
    check_visible(arch, x)?;
    let total = 1usize << arch.hidden_units();
    let mut acc = f64::NEG_INFINITY;
    let mut start = 0;
    while start < total {
        let len = ENUM_CHUNK.min(total - start);
        let states = joint_chunk(arch, x, start, len)?;
        let means = p.conditional_means(&states)?;
        let lse = log_sum_exp(p.log_prob_from_means(&states, &means).view());
        acc = log_add(acc, lse);
        start += len;
    }
    Ok(acc)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// [`exact_log_marginal`] for every row of `xs`, in parallel.
pub fn exact_log_marginals(p: &SigmoidBeliefNet, xs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let out: Result<Vec<f64>> = map_indexed(xs.nrows(), |i| exact_log_marginal(p, xs.row(i)))
        .into_iter()
        .collect();
    Ok(Array1::from(out?))
}

/// `KL(p* || p) = sum_x p*(x) (ln p*(x) - ln p(x))`; states outside the support contribute 0.
pub fn exact_kl(pstar: &DiscreteDistribution, p: &SigmoidBeliefNet) -> Result<f64> {
    let arch = p.architecture();
    guard("visible layer", arch.visible(), MAX_ENUM_VISIBLE)?;
    if pstar.dim() != arch.visible() {
        return Err(Error::shape("distribution and model differ in visible size"));
    }
    let xs = pstar.states(arch.encoding());
    let lp = exact_log_marginals(p, xs.view())?;
    Ok(pstar
        .probs()
        .iter()
        .zip(&lp)
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, &l)| q * (q.ln() - l))
        .sum())
}

/// Per-datum IS estimates `ln (1/K) sum_k p(x, h_k) / q(h_k | x)` with `h_k ~ q(h | x)`.
///
/// Datum `i` draws from its own ChaCha stream (`seed`, stream `i`), so results
/// do not depend on thread scheduling.
pub fn is_log_likelihood_per_datum(
    hm: &HelmholtzMachine,
    xs: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
) -> Result<Array1<f64>> {
    if k == 0 {
        return Err(Error::invalid("IS estimate needs K >= 1"));
    }
    let out: Result<Vec<f64>> = map_indexed(xs.nrows(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        is_single(hm, xs.slice(ndarray::s![i..i + 1, ..]), k, &mut rng)
    })
    .into_iter()
    .collect();
    Ok(Array1::from(out?))
}

/// Dataset mean of [`is_log_likelihood_per_datum`], in nats per datum.
pub fn is_log_likelihood(hm: &HelmholtzMachine, xs: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<f64> {
    if xs.nrows() == 0 {
        return Err(Error::invalid("IS estimate over an empty set"));
    }
    Ok(is_log_likelihood_per_datum(hm, xs, k, seed)?.mean().unwrap())
}

fn is_single<R: Rng + ?Sized>(hm: &HelmholtzMachine, x: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Result<f64> {
    let mut acc = f64::NEG_INFINITY;
    let mut left = k;
    while left > 0 {
        let s = IS_CHUNK.min(left);
        let states = upward_pass(&hm.q, x, s, rng)?;
        let pm = hm.p.conditional_means(&states)?;
        let log_w = hm.p.log_prob_from_means(&states, &pm) - hm.q.log_prob_from_means(&states, &states.means);
        if log_w.iter().any(|v| v.is_nan()) {
            return Err(Error::NaN("importance weights"));
        }
        acc = log_add(acc, log_sum_exp(log_w.view()));
        left -= s;
    }
    Ok(acc - (k as f64).ln())
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "step must be positive");
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + step;
            let fp = f(&y);
            y[i] = x[i] - step;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Central-difference Hessian of `f` at `x` (symmetric by construction).
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Array2<f64> {
    assert!(step > 0.0, "step must be positive");
    let n = x.len();
    let f0 = f(x);
    let mut y = x.to_vec();
    let mut h = Array2::zeros((n, n));
    let h2 = step * step;
    for i in 0..n {
        y[i] = x[i] + step;
        let fp = f(&y);
        y[i] = x[i] - step;
        let fm = f(&y);
        y[i] = x[i];
        h[[i, i]] = (fp - 2.0 * f0 + fm) / h2;
        for j in 0..i {
            let mut at = |si: f64, sj: f64| {
                y[i] = x[i] + si * step;
                y[j] = x[j] + sj * step;
                let v = f(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h2);
            h[[i, j]] = v;
            h[[j, i]] = v;
        }
    }
    h
}
