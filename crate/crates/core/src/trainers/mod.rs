//! Wake-sleep training: WS, RWS and their natural-gradient counterparts NWS, NRWS.
//!
//! A step runs the wake phase on a data batch (p-wake, plus q-wake for the
//! reweighted variants) and then the sleep phase on dreams from the
//! generative net (q-sleep). All gradients are ascent directions on
//! log-probability objectives. Natural variants precondition each unit's
//! gradient row with that unit's damped Fisher block, rebuilt every `K` steps.

pub mod optimizer;

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fisher::{build_fisher_state, refresh_policy, FisherLayerState, SolveRoute};
use crate::model::{downward_pass, upward_pass, Encoding, HelmholtzMachine, LayerStates, SigmoidBeliefNet};
use crate::{Error, Result};

pub use optimizer::{apply_update, Moments, Optimizer, OptimizerKind};

const FISHER_MAGIC: &[u8; 6] = b"HMFIS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ws,
    Nws,
    Rws,
    Nrws,
}

impl Algorithm {
    pub fn is_natural(self) -> bool {
        matches!(self, Algorithm::Nws | Algorithm::Nrws)
    }

    pub fn is_reweighted(self) -> bool {
        matches!(self, Algorithm::Rws | Algorithm::Nrws)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ws => "ws",
            Algorithm::Nws => "nws",
            Algorithm::Rws => "rws",
            Algorithm::Nrws => "nrws",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ws" => Ok(Algorithm::Ws),
            "nws" => Ok(Algorithm::Nws),
            "rws" => Ok(Algorithm::Rws),
            "nrws" => Ok(Algorithm::Nrws),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Which samples estimate the generative Fisher blocks during the wake phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherSource {
    /// Recognition samples of the current batch (the wake states themselves).
    #[default]
    Wake,
    /// Fresh joint samples from the generative net.
    Dream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    /// Posterior samples per datum (forced to 1 for WS/NWS).
    pub samples: usize,
    pub lr: f64,
    /// Damping for the natural variants.
    pub alpha: f64,
    /// Fisher refresh period in steps; 0 behaves as 1.
    pub kstep: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub route: SolveRoute,
    pub fisher_p_source: FisherSource,
    /// Overrides whether the q-wake update runs; `None` follows the algorithm.
    pub q_wake: Option<bool>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Nrws,
            samples: 10,
            lr: 0.002,
            alpha: 0.05,
            kstep: 50,
            optimizer: OptimizerKind::Sgd,
            batch_size: 100,
            epochs: 100,
            seed: 0,
            route: SolveRoute::Auto,
            fisher_p_source: FisherSource::Wake,
            q_wake: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.algorithm.is_natural() && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "damping must be positive for {}, got {}",
                self.algorithm.name(),
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn effective_samples(&self) -> usize {
        if self.algorithm.is_reweighted() {
            self.samples
        } else {
            1
        }
    }

    pub fn uses_q_wake(&self) -> bool {
        self.q_wake.unwrap_or(self.algorithm.is_reweighted())
    }
}

/// Unnormalized log-weights and their per-datum softmax.
#[derive(Debug, Clone)]
pub struct ImportanceWeightSet {
    pub log_w: Array2<f64>,
    pub w_tilde: Array2<f64>,
}

/// `log_w = log p(x, h) - log q(h | x)` per (datum, sample); `w~` is its row softmax.
pub fn compute_importance_weights(
    log_p_joint: ArrayView2<'_, f64>,
    log_q_cond: ArrayView2<'_, f64>,
) -> Result<ImportanceWeightSet> {
    if log_p_joint.dim() != log_q_cond.dim() {
        return Err(Error::shape("log p and log q weights differ in shape"));
    }
    let log_w = &log_p_joint - &log_q_cond;
    if log_w.iter().any(|v| v.is_nan()) {
        return Err(Error::NaN("importance weights"));
    }
    let mut w_tilde = log_w.clone();
    for mut row in w_tilde.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    Ok(ImportanceWeightSet { log_w, w_tilde })
}

impl ImportanceWeightSet {
    /// Per-datum `ln (1/s) sum_k exp(log_w_k)`.
    pub fn log_mean_weights(&self) -> Array1<f64> {
        let ln_s = (self.log_w.ncols() as f64).ln();
        self.log_w
            .axis_iter(Axis(0))
            .map(|r| log_sum_exp(r) - ln_s)
            .collect()
    }

    /// Negative mean importance-sampled bound over the batch.
    pub fn loss(&self) -> f64 {
        -self.log_mean_weights().mean().unwrap_or(f64::NAN)
    }
}

pub fn log_sum_exp(v: ArrayView1<'_, f64>) -> f64 {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `sum_k w_k (t_k - mean_k) [parent_k, 1]^T` for every unit, shape `units x (d + 1)`,
/// where `t` is the `{0, 1}` on-indicator of the unit's state.
pub fn bernoulli_grad(
    states: ArrayView2<'_, f64>,
    means: ArrayView2<'_, f64>,
    parents: Option<ArrayView2<'_, f64>>,
    row_weights: ArrayView1<'_, f64>,
    encoding: Encoding,
) -> Array2<f64> {
    let (n, units) = states.dim();
    debug_assert_eq!(means.dim(), (n, units));
    debug_assert_eq!(row_weights.len(), n);
    let mut delta = Array2::zeros((n, units));
    for (k, ((mut drow, srow), mrow)) in delta
        .axis_iter_mut(Axis(0))
        .zip(states.axis_iter(Axis(0)))
        .zip(means.axis_iter(Axis(0)))
        .enumerate()
    {
        let w = row_weights[k];
        for ((d, &s), &m) in drow.iter_mut().zip(srow).zip(mrow) {
            *d = w * (encoding.indicator(s) - m);
        }
    }
    let d = parents.map_or(0, |p| p.ncols());
    let mut g = Array2::zeros((units, d + 1));
    if let Some(p) = parents {
        debug_assert_eq!(p.nrows(), n);
        ndarray::linalg::general_mat_mul(1.0, &delta.t(), &p, 0.0, &mut g.slice_mut(ndarray::s![.., ..d]));
    }
    g.column_mut(d).assign(&delta.sum_axis(Axis(0)));
    g
}

/// Gradient for the generative parameters: one matrix per `p` layer plus the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrad {
    pub layers: Vec<Array2<f64>>,
    /// `l_L x 1`: the prior is a parentless layer.
    pub prior: Array2<f64>,
}

/// Gradient for the recognition parameters, one matrix per `q` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiGrad {
    pub layers: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub theta: ThetaGrad,
    pub phi: PhiGrad,
}

/// Weighted `p` gradient over the rows of `states`, with `p_means` from
/// [`SigmoidBeliefNet::conditional_means`].
pub fn p_gradient(
    p: &SigmoidBeliefNet,
    states: &LayerStates,
    p_means: &[Option<Array2<f64>>],
    row_weights: ArrayView1<'_, f64>,
) -> ThetaGrad {
    let enc = p.encoding();
    let depth = p.architecture().depth();
    let layers = (0..depth)
        .map(|i| {
            bernoulli_grad(
                states.states[i].view(),
                p_means[i].as_ref().expect("p means").view(),
                Some(states.states[i + 1].view()),
                row_weights,
                enc,
            )
        })
        .collect();
    let prior = bernoulli_grad(
        states.states[depth].view(),
        p_means[depth].as_ref().expect("prior means").view(),
        None,
        row_weights,
        enc,
    );
    ThetaGrad { layers, prior }
}

/// Weighted `q` gradient over the rows of `states`.
pub fn q_gradient(
    q: &SigmoidBeliefNet,
    states: &LayerStates,
    q_means: &[Option<Array2<f64>>],
    row_weights: ArrayView1<'_, f64>,
) -> PhiGrad {
    let enc = q.encoding();
    let depth = q.architecture().depth();
    let layers = (0..depth)
        .map(|i| {
            bernoulli_grad(
                states.states[i + 1].view(),
                q_means[i + 1].as_ref().expect("q means").view(),
                Some(states.states[i].view()),
                row_weights,
                enc,
            )
        })
        .collect();
    PhiGrad { layers }
}

/// One group of Fisher states (one per parameter matrix) with its rebuild counter.
#[derive(Debug, Default)]
pub struct FisherGroup {
    slots: Vec<Option<FisherLayerState>>,
    rebuilds: usize,
}

impl FisherGroup {
    fn new(n: usize) -> Self {
        Self {
            slots: (0..n).map(|_| None).collect(),
            rebuilds: 0,
        }
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn state(&self, slot: usize) -> Option<&FisherLayerState> {
        self.slots[slot].as_ref()
    }

    fn needs_refresh(&self, slot: usize, k: usize) -> bool {
        refresh_policy(self.slots[slot].as_ref(), k)
    }

    /// Refreshes the slot if due, then preconditions `grad` in place and ages the state.
    fn precondition(
        &mut self,
        slot: usize,
        k: usize,
        build: impl FnOnce() -> Result<FisherLayerState>,
        grad: &mut Array2<f64>,
    ) -> Result<()> {
        if refresh_policy(self.slots[slot].as_ref(), k) {
            self.slots[slot] = Some(build()?);
            self.rebuilds += 1;
        }
        let st = self.slots[slot].as_mut().expect("fresh Fisher state");
        st.natural_apply_layer(grad)?;
        st.tick();
        Ok(())
    }
}

/// Fisher states tracked by a natural trainer: generative blocks (one per `p`
/// layer, then the prior), recognition blocks for q-wake and for q-sleep.
#[derive(Debug, Default)]
pub struct FisherCache {
    pub p: FisherGroup,
    pub q_wake: FisherGroup,
    pub q_sleep: FisherGroup,
}

impl FisherCache {
    pub fn new(depth: usize) -> Self {
        Self {
            p: FisherGroup::new(depth + 1),
            q_wake: FisherGroup::new(depth),
            q_sleep: FisherGroup::new(depth),
        }
    }

    pub fn total_rebuilds(&self) -> usize {
        self.p.rebuilds + self.q_wake.rebuilds + self.q_sleep.rebuilds
    }

    /// Number of tracked layer-states.
    pub fn tracked(&self) -> usize {
        self.p.slots.len() + self.q_wake.slots.len() + self.q_sleep.slots.len()
    }

    fn groups(&self) -> [&FisherGroup; 3] {
        [&self.p, &self.q_wake, &self.q_sleep]
    }

    /// Writes every live estimate (`H`, `q_diag`, damping, route, age) so a
    /// resumed run reuses exactly the frozen blocks an uninterrupted run would.
    /// Rebuild counters are not stored.
    pub fn write_state<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let put_matrix = |w: &mut W, m: &Array2<f64>| -> std::io::Result<()> {
            w.write_all(&(m.nrows() as u64).to_le_bytes())?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for x in m.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        w.write_all(FISHER_MAGIC)?;
        for g in self.groups() {
            w.write_all(&(g.slots.len() as u32).to_le_bytes())?;
            for slot in &g.slots {
                let Some(st) = slot else {
                    w.write_all(&[0])?;
                    continue;
                };
                w.write_all(&[1, st.uses_woodbury() as u8])?;
                w.write_all(&st.alpha().to_le_bytes())?;
                w.write_all(&(st.age() as u64).to_le_bytes())?;
                put_matrix(&mut w, st.h())?;
                put_matrix(&mut w, st.q_diag())?;
            }
        }
        Ok(())
    }

    /// Restores estimates written by [`Self::write_state`] into a cache of the same depth.
    pub fn read_state<R: Read>(&mut self, mut r: R) -> Result<()> {
        let bad = |m: &str| Error::Config(format!("Fisher state: {m}"));
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != FISHER_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u8b = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> std::io::Result<u64> {
            r.read_exact(&mut u8b)?;
            Ok(u64::from_le_bytes(u8b))
        };
        for g in [&mut self.p, &mut self.q_wake, &mut self.q_sleep] {
            let mut u4 = [0u8; 4];
            r.read_exact(&mut u4)?;
            if u32::from_le_bytes(u4) as usize != g.slots.len() {
                return Err(bad("slot count differs from the model"));
            }
            for slot in &mut g.slots {
                let mut flag = [0u8; 1];
                r.read_exact(&mut flag)?;
                if flag[0] == 0 {
                    *slot = None;
                    continue;
                }
                r.read_exact(&mut flag)?;
                let route = if flag[0] == 1 { SolveRoute::Woodbury } else { SolveRoute::Dense };
                let alpha = f64::from_bits(read_u64(&mut r)?);
                let age = read_u64(&mut r)? as usize;
                let mut matrices = Vec::with_capacity(2);
                for _ in 0..2 {
                    let rows = read_u64(&mut r)? as usize;
                    let cols = read_u64(&mut r)? as usize;
                    if rows.checked_mul(cols).is_none_or(|n| n > 1 << 32) {
                        return Err(bad("implausible matrix size"));
                    }
                    let mut buf = vec![0u8; rows * cols * 8];
                    r.read_exact(&mut buf)?;
                    let data = buf
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    matrices.push(Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?);
                }
                let q_diag = matrices.pop().unwrap();
                let h = matrices.pop().unwrap();
                *slot = Some(FisherLayerState::from_parts(h, q_diag, alpha, route)?.with_age(age));
            }
        }
        Ok(())
    }
}

/// Samples and derived quantities of one wake phase.
#[derive(Debug, Clone)]
pub struct WakeSample {
    pub states: LayerStates,
    pub p_means: Vec<Option<Array2<f64>>>,
    pub q_means: Vec<Option<Array2<f64>>>,
    pub weights: ImportanceWeightSet,
}

impl WakeSample {
    /// Per-row gradient weights `w~ / batch`, datum-major.
    pub fn row_weights(&self) -> Array1<f64> {
        let batch = self.weights.w_tilde.nrows() as f64;
        self.weights.w_tilde.iter().map(|w| w / batch).collect()
    }
}

/// Draws `s` posterior samples per datum from `q` and weighs them.
pub fn wake_sample<R: Rng + ?Sized>(
    hm: &HelmholtzMachine,
    x: ArrayView2<'_, f64>,
    s: usize,
    rng: &mut R,
) -> Result<WakeSample> {
    if x.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let states = upward_pass(&hm.q, x, s, rng)?;
    let q_means = states.means.clone();
    let p_means = hm.p.conditional_means(&states)?;
    let log_p = hm.p.log_prob_from_means(&states, &p_means);
    let log_q = hm.q.log_prob_from_means(&states, &q_means);
    let batch = x.nrows();
    let shape = (batch, s);
    let weights = compute_importance_weights(
        log_p.into_shape_with_order(shape).unwrap().view(),
        log_q.into_shape_with_order(shape).unwrap().view(),
    )?;
    Ok(WakeSample {
        states,
        p_means,
        q_means,
        weights,
    })
}

fn precondition_theta(
    grad: &mut ThetaGrad,
    group: &mut FisherGroup,
    cfg: &TrainerConfig,
    states: &LayerStates,
    p_means: &[Option<Array2<f64>>],
) -> Result<()> {
    let depth = grad.layers.len();
    for (i, g) in grad.layers.iter_mut().enumerate() {
        group.precondition(
            i,
            cfg.kstep,
            || {
                build_fisher_state(
                    Some(states.states[i + 1].view()),
                    p_means[i].as_ref().unwrap().view(),
                    cfg.alpha,
                    cfg.route,
                )
            },
            g,
        )?;
    }
    group.precondition(
        depth,
        cfg.kstep,
        || build_fisher_state(None, p_means[depth].as_ref().unwrap().view(), cfg.alpha, cfg.route),
        &mut grad.prior,
    )
}

fn precondition_phi(
    grad: &mut PhiGrad,
    group: &mut FisherGroup,
    cfg: &TrainerConfig,
    states: &LayerStates,
    q_means: &[Option<Array2<f64>>],
) -> Result<()> {
    for (i, g) in grad.layers.iter_mut().enumerate() {
        group.precondition(
            i,
            cfg.kstep,
            || {
                build_fisher_state(
                    Some(states.states[i].view()),
                    q_means[i + 1].as_ref().unwrap().view(),
                    cfg.alpha,
                    cfg.route,
                )
            },
            g,
        )?;
    }
    Ok(())
}

/// p-wake gradient `sum_k w~_k d ln p(x, h_k) / d theta`, batch-averaged, from
/// an existing wake sample. Natural variants precondition with `F_p` built from
/// the same states, or from `dream` when the config asks for generative samples.
pub fn p_wake_gradient(
    hm: &HelmholtzMachine,
    wake: &WakeSample,
    cfg: &TrainerConfig,
    fisher: &mut FisherCache,
    dream: Option<&(LayerStates, Vec<Option<Array2<f64>>>)>,
) -> Result<ThetaGrad> {
    let mut g = p_gradient(&hm.p, &wake.states, &wake.p_means, wake.row_weights().view());
    if cfg.algorithm.is_natural() {
        let (states, means) = match (cfg.fisher_p_source, dream) {
            (FisherSource::Dream, Some((s, m))) => (s, m),
            _ => (&wake.states, &wake.p_means),
        };
        precondition_theta(&mut g, &mut fisher.p, cfg, states, means)?;
    }
    Ok(g)
}

/// q-wake gradient `sum_k w~_k d ln q(h_k | x) / d phi`, batch-averaged.
pub fn q_wake_gradient(
    hm: &HelmholtzMachine,
    wake: &WakeSample,
    cfg: &TrainerConfig,
    fisher: &mut FisherCache,
) -> Result<PhiGrad> {
    let mut g = q_gradient(&hm.q, &wake.states, &wake.q_means, wake.row_weights().view());
    if cfg.algorithm.is_natural() {
        precondition_phi(&mut g, &mut fisher.q_wake, cfg, &wake.states, &wake.q_means)?;
    }
    Ok(g)
}

/// Runs a wake pass on `x` and returns the p-wake gradient.
pub fn p_wake_update<R: Rng + ?Sized>(
    hm: &HelmholtzMachine,
    x: ArrayView2<'_, f64>,
    cfg: &TrainerConfig,
    fisher: &mut FisherCache,
    rng: &mut R,
) -> Result<ThetaGrad> {
    let wake = wake_sample(hm, x, cfg.effective_samples(), rng)?;
    p_wake_gradient(hm, &wake, cfg, fisher, None)
}

/// Runs a wake pass on `x` and returns the q-wake gradient.
pub fn q_wake_update<R: Rng + ?Sized>(
    hm: &HelmholtzMachine,
    x: ArrayView2<'_, f64>,
    cfg: &TrainerConfig,
    fisher: &mut FisherCache,
    rng: &mut R,
) -> Result<PhiGrad> {
    let wake = wake_sample(hm, x, cfg.effective_samples(), rng)?;
    q_wake_gradient(hm, &wake, cfg, fisher)
}

/// q-sleep gradient over `n` dreams: `(1/n) sum_k d ln q(h_k | x_k) / d phi`
/// with `(x_k, h_k) ~ p`.
pub fn q_sleep_update<R: Rng + ?Sized>(
    hm: &HelmholtzMachine,
    n: usize,
    cfg: &TrainerConfig,
    fisher: &mut FisherCache,
    rng: &mut R,
) -> Result<PhiGrad> {
    let dreams = downward_pass(&hm.p, n, rng)?;
    let q_means = hm.q.conditional_means(&dreams)?;
    let w = Array1::from_elem(n, 1.0 / n as f64);
    let mut g = q_gradient(&hm.q, &dreams, &q_means, w.view());
    if cfg.algorithm.is_natural() {
        precondition_phi(&mut g, &mut fisher.q_sleep, cfg, &dreams, &q_means)?;
    }
    Ok(g)
}

fn apply_theta(hm: &mut HelmholtzMachine, g: &ThetaGrad, opt: &mut Optimizer) {
    let (kind, lr) = (opt.kind, opt.lr);
    for (i, (layer, gi)) in hm.p.layers_mut().iter_mut().zip(&g.layers).enumerate() {
        let w = layer.weights_mut().as_slice_mut().expect("standard layout");
        apply_update(w, gi.as_slice().expect("standard layout"), kind, opt.p_slot(i), lr);
    }
    let prior = hm.p.prior_biases_mut().expect("generative prior");
    apply_update(
        prior.as_slice_mut().unwrap(),
        g.prior.as_slice().unwrap(),
        kind,
        opt.prior_slot(),
        lr,
    );
}

fn apply_phi(hm: &mut HelmholtzMachine, g: &PhiGrad, opt: &mut Optimizer) {
    let (kind, lr) = (opt.kind, opt.lr);
    for (i, (layer, gi)) in hm.q.layers_mut().iter_mut().zip(&g.layers).enumerate() {
        let w = layer.weights_mut().as_slice_mut().expect("standard layout");
        apply_update(w, gi.as_slice().expect("standard layout"), kind, opt.q_slot(i), lr);
    }
}

/// What one training step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Negative mean importance-sampled bound on the batch, before the update.
    pub loss: f64,
    /// Number of gradient applications (parameter updates) performed.
    pub applications: usize,
    /// Fisher states rebuilt during this step.
    pub fisher_rebuilds: usize,
}

/// One wake phase followed by one sleep phase.
///
/// Wake gradients for `p` and `q` come from the same samples and are applied
/// together; the sleep phase then dreams from the updated `p`.
pub fn train_step<R: Rng + ?Sized>(
    hm: &mut HelmholtzMachine,
    x: ArrayView2<'_, f64>,
    cfg: &TrainerConfig,
    fisher: &mut FisherCache,
    opt: &mut Optimizer,
    rng: &mut R,
) -> Result<StepReport> {
    let s = cfg.effective_samples();
    let n = x.nrows() * s;
    let rebuilds_before = fisher.total_rebuilds();

    let dream = if cfg.algorithm.is_natural()
        && cfg.fisher_p_source == FisherSource::Dream
        && (0..fisher.p.slots.len()).any(|i| fisher.p.needs_refresh(i, cfg.kstep))
    {
        let d = downward_pass(&hm.p, n, rng)?;
        let m = hm.p.conditional_means(&d)?;
        Some((d, m))
    } else {
        None
    };

    let wake = wake_sample(hm, x, s, rng)?;
    let loss = wake.weights.loss();
    let g_theta = p_wake_gradient(hm, &wake, cfg, fisher, dream.as_ref())?;
    let g_phi_wake = if cfg.uses_q_wake() {
        Some(q_wake_gradient(hm, &wake, cfg, fisher)?)
    } else {
        None
    };
    let mut applications = 0;
    apply_theta(hm, &g_theta, opt);
    applications += 1;
    if let Some(g) = &g_phi_wake {
        apply_phi(hm, g, opt);
        applications += 1;
    }

    let g_phi_sleep = q_sleep_update(hm, n, cfg, fisher, rng)?;
    apply_phi(hm, &g_phi_sleep, opt);
    applications += 1;

    Ok(StepReport {
        loss,
        applications,
        fisher_rebuilds: fisher.total_rebuilds() - rebuilds_before,
    })
}

/// Owns a machine with its optimizer and Fisher cache.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub hm: HelmholtzMachine,
    pub opt: Optimizer,
    pub fisher: FisherCache,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, hm: HelmholtzMachine) -> Result<Self> {
        cfg.validate()?;
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, &hm);
        let fisher = FisherCache::new(hm.architecture().depth());
        Ok(Self { cfg, hm, opt, fisher })
    }

    pub fn step<R: Rng + ?Sized>(&mut self, x: ArrayView2<'_, f64>, rng: &mut R) -> Result<StepReport> {
        train_step(&mut self.hm, x, &self.cfg, &mut self.fisher, &mut self.opt, rng)
    }

    /// Drops every cached Fisher estimate (the next step rebuilds all of them).
    pub fn reset_fisher(&mut self) {
        self.fisher = FisherCache::new(self.hm.architecture().depth());
    }
}
