//! Per-unit Fisher blocks of a sigmoid belief network and damped natural-gradient solves.
//!
//! For a layer whose units share the augmented parent activations `H`
//! (`n x (d + 1)`, one row per sample), the Fisher block of unit `j` is
//! `H^T Q_j H` with `Q_j = diag(sigmoid(a_jk) (1 - sigmoid(a_jk)) / n)`. The
//! damped metric is `F~ = (alpha I + H^T Q_j H) / (1 + alpha)` and its inverse
//! is applied through the Woodbury identity
//!
//! ```text
//! F~^{-1} g = (1 + alpha) / alpha * (g - H^T (alpha Q_j^{-1} + H H^T)^{-1} H g)
//! ```
//!
//! so only an `n x n` core is factored per unit and `H H^T` is shared by every
//! unit of the layer. When a layer has more samples than block columns the
//! `(d + 1) x (d + 1)` damped block is cheaper to factor directly; the
//! [`SolveRoute::Auto`] policy picks whichever core is smaller. Both routes
//! compute the same exact inverse.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{augment, outer_gram, weighted_gram, Cholesky};
use crate::{exec, Error, Result};

/// Jitter added to a core that fails to factor, before giving up.
pub const CORE_JITTER: f64 = 1e-10;

/// `q_diag` entries are floored at `Q_FLOOR / n` before being inverted.
pub const Q_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveRoute {
    /// Woodbury when `n <= d + 1`, dense block otherwise.
    #[default]
    Auto,
    /// Always factor the `n x n` core `alpha Q^{-1} + H H^T`.
    Woodbury,
    /// Always factor the `(d + 1) x (d + 1)` damped block.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Core {
    Woodbury,
    Dense,
}

/// Sampled Fisher information for every unit of one layer.
#[derive(Debug)]
pub struct FisherLayerState {
    h: Array2<f64>,
    q_diag: Array2<f64>,
    gram: Option<Array2<f64>>,
    alpha: f64,
    core: Core,
    factors: Vec<OnceLock<Option<Cholesky>>>,
    age: usize,
}

/// Builds the state from parent activations and the layer's conditional means,
/// weighting every sample by `1 / n`. `parents = None` means the layer has no
/// parents (a factorized prior), so `H` is a single column of ones.
pub fn build_fisher_state(
    parents: Option<ArrayView2<'_, f64>>,
    means: ArrayView2<'_, f64>,
    alpha: f64,
    route: SolveRoute,
) -> Result<FisherLayerState> {
    let n = means.nrows();
    if n == 0 {
        return Err(Error::invalid("Fisher estimate needs at least one sample"));
    }
    let w = Array1::from_elem(n, 1.0 / n as f64);
    build_weighted_fisher_state(parents, means, w.view(), alpha, route)
}

/// As [`build_fisher_state`] but with explicit per-sample weights (e.g. exact
/// probabilities when the rows enumerate every configuration).
pub fn build_weighted_fisher_state(
    parents: Option<ArrayView2<'_, f64>>,
    means: ArrayView2<'_, f64>,
    row_weights: ArrayView1<'_, f64>,
    alpha: f64,
    route: SolveRoute,
) -> Result<FisherLayerState> {
    let n = means.nrows();
    if n == 0 {
        return Err(Error::invalid("Fisher estimate needs at least one sample"));
    }
    if row_weights.len() != n {
        return Err(Error::shape("one weight per sample row"));
    }
    let h = match parents {
        Some(p) => {
            if p.nrows() != n {
                return Err(Error::shape(format!(
                    "{} parent rows for {n} mean rows",
                    p.nrows()
                )));
            }
            augment(p)
        }
        None => Array2::ones((n, 1)),
    };
    let mut q_diag = means.t().to_owned();
    for mut row in q_diag.axis_iter_mut(Axis(0)) {
        for (q, &w) in row.iter_mut().zip(row_weights.iter()) {
            *q = *q * (1.0 - *q) * w;
        }
    }
    FisherLayerState::from_parts(h, q_diag, alpha, route)
}

impl FisherLayerState {
    /// `h` is `n x (d + 1)` (already augmented); `q_diag` is `units x n`.
    pub fn from_parts(
        h: Array2<f64>,
        q_diag: Array2<f64>,
        alpha: f64,
        route: SolveRoute,
    ) -> Result<Self> {
        let n = h.nrows();
        if n == 0 {
            return Err(Error::invalid("Fisher estimate needs at least one sample"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("damping must be positive, got {alpha}")));
        }
        if q_diag.ncols() != n {
            return Err(Error::shape("q_diag must have one column per sample"));
        }
        let core = match route {
            SolveRoute::Woodbury => Core::Woodbury,
            SolveRoute::Dense => Core::Dense,
            SolveRoute::Auto if n <= h.ncols() => Core::Woodbury,
            SolveRoute::Auto => Core::Dense,
        };
        let gram = (core == Core::Woodbury).then(|| outer_gram(h.view()));
        let factors = (0..q_diag.nrows()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            h,
            q_diag,
            gram,
            alpha,
            core,
            factors,
            age: 0,
        })
    }

    pub fn units(&self) -> usize {
        self.q_diag.nrows()
    }

    /// Block side `d + 1`.
    pub fn block_size(&self) -> usize {
        self.h.ncols()
    }

    pub fn samples(&self) -> usize {
        self.h.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn h(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn q_diag(&self) -> &Array2<f64> {
        &self.q_diag
    }

    /// `H H^T`, present when the Woodbury core is in use.
    pub fn gram(&self) -> Option<&Array2<f64>> {
        self.gram.as_ref()
    }

    pub fn uses_woodbury(&self) -> bool {
        self.core == Core::Woodbury
    }

    /// The route that reproduces this state's core through [`Self::from_parts`].
    pub fn route(&self) -> SolveRoute {
        match self.core {
            Core::Woodbury => SolveRoute::Woodbury,
            Core::Dense => SolveRoute::Dense,
        }
    }

    pub fn age(&self) -> usize {
        self.age
    }

    /// The same estimate with its age set, e.g. when restoring a checkpoint.
    pub fn with_age(mut self, age: usize) -> Self {
        self.age = age;
        self
    }

    /// Marks one more optimizer step served by this estimate.
    pub fn tick(&mut self) {
        self.age += 1;
    }

    /// Undamped block `H^T Q_j H`. Only for tests and tiny nets.
    pub fn dense_block(&self, unit: usize) -> Array2<f64> {
        weighted_gram(self.h.view(), self.q_diag.row(unit))
    }

    fn factor(&self, unit: usize) -> Result<&Cholesky> {
        let slot = self.factors[unit].get_or_init(|| {
            let m = match self.core {
                Core::Woodbury => {
                    let n = self.samples() as f64;
                    let floor = Q_FLOOR / n;
                    let mut core = self.gram.clone().expect("gram for Woodbury core");
                    for (k, &q) in self.q_diag.row(unit).iter().enumerate() {
                        core[[k, k]] += self.alpha / q.max(floor);
                    }
                    core
                }
                Core::Dense => {
                    let mut block = self.dense_block(unit);
                    for k in 0..block.nrows() {
                        block[[k, k]] += self.alpha;
                    }
                    block
                }
            };
            Cholesky::factor(m.view()).or_else(|| Cholesky::factor_with_jitter(m.view(), CORE_JITTER))
        });
        slot.as_ref().ok_or(Error::NotFactorizable { unit })
    }

    /// Factors every unit's core now instead of on first use.
    pub fn prefactor(&self) -> Result<()> {
        let errs = exec::map_indexed(self.units(), |j| self.factor(j).err());
        match errs.into_iter().flatten().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// `F~_j^{-1} g` for unit `j`, without forming the dense block on the
    /// Woodbury route.
    pub fn natural_apply(&self, unit: usize, g: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if unit >= self.units() {
            return Err(Error::invalid(format!("unit {unit} out of range")));
        }
        if g.len() != self.block_size() {
            return Err(Error::shape(format!(
                "gradient row has {} entries, block is {}",
                g.len(),
                self.block_size()
            )));
        }
        let chol = self.factor(unit)?;
        let a = self.alpha;
        Ok(match self.core {
            Core::Woodbury => {
                let hg = self.h.dot(&g);
                let y = chol.solve(hg.view());
                let correction = self.h.t().dot(&y);
                (&g - &correction) * ((1.0 + a) / a)
            }
            Core::Dense => chol.solve(g) * (1.0 + a),
        })
    }

    /// Preconditions every row of `grads` (`units x (d + 1)`) in place.
    pub fn natural_apply_layer(&self, grads: &mut Array2<f64>) -> Result<()> {
        if grads.nrows() != self.units() {
            return Err(Error::shape("one gradient row per unit"));
        }
        exec::try_for_each_row_mut(grads, |j, mut row| {
            let out = self.natural_apply(j, row.view())?;
            row.assign(&out);
            Ok(())
        })
    }
}

/// Whether a trainer should rebuild a Fisher state from the current batch.
/// `K = 0` is treated as `K = 1`.
pub fn refresh_policy(state: Option<&FisherLayerState>, k: usize) -> bool {
    match state {
        None => true,
        Some(s) => s.age() >= k.max(1),
    }
}
