//! Sigmoid belief networks and the Helmholtz machine built from two of them.
//!
//! Weights are stored in augmented form: a layer with `u` units and `d`
//! parents holds a `u x (d + 1)` matrix whose last column is the bias. Unit
//! `r` is "on" with probability `sigmoid(W_r . [h_parent, 1])` under either
//! encoding; with `PlusMinusOne` the "on" value is `+1`, so
//! `p(h_r | parent) = sigmoid(h_r * a_r)`.
//!
//! Layer numbering follows the visible layer as layer 0 and the top hidden
//! layer as layer `L`. In the generative net `p.layers[i]` produces layer `i`
//! from layer `i + 1` and the prior covers layer `L`; in the recognition net
//! `q.layers[i]` produces layer `i + 1` from layer `i`.

pub mod checkpoint;

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Conditional means are clamped into `[MEAN_CLAMP, 1 - MEAN_CLAMP]` before any log.
pub const MEAN_CLAMP: f64 = 1e-7;

/// Half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    ZeroOne,
    #[default]
    PlusMinusOne,
}

impl Encoding {
    #[inline]
    pub fn on(self) -> f64 {
        1.0
    }

    #[inline]
    pub fn off(self) -> f64 {
        match self {
            Encoding::ZeroOne => 0.0,
            Encoding::PlusMinusOne => -1.0,
        }
    }

    #[inline]
    pub fn encode(self, bit: bool) -> f64 {
        if bit {
            self.on()
        } else {
            self.off()
        }
    }

    /// Maps a unit value to its `{0, 1}` indicator of being "on".
    #[inline]
    pub fn indicator(self, v: f64) -> f64 {
        match self {
            Encoding::ZeroOne => v,
            Encoding::PlusMinusOne => 0.5 * (v + 1.0),
        }
    }

    pub fn is_valid(self, v: f64) -> bool {
        v == self.on() || v == self.off()
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Encoding::ZeroOne => 0,
            Encoding::PlusMinusOne => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Encoding::ZeroOne),
            1 => Some(Encoding::PlusMinusOne),
            _ => None,
        }
    }
}

/// Layer sizes `l_0 .. l_L` (`l_0` visible) plus the unit-value encoding.
/// Shared verbatim by both networks of a machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    encoding: Encoding,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, encoding: Encoding) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid(
                "architecture needs a visible layer and at least one hidden layer",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(Self {
            layer_sizes,
            encoding,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn visible(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn size(&self, layer: usize) -> usize {
        self.layer_sizes[layer]
    }

    pub fn hidden_units(&self) -> usize {
        self.layer_sizes[1..].iter().sum()
    }

    pub fn total_units(&self) -> usize {
        self.layer_sizes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    TopDown,
    BottomUp,
}

/// A conditional Bernoulli layer in augmented form (`units x (parents + 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticLayer {
    weights: Array2<f64>,
}

impl StochasticLayer {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.ncols() == 0 {
            return Err(Error::shape("augmented weights need a bias column"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("layer weights must be finite"));
        }
        Ok(Self { weights })
    }

    pub fn zeros(units: usize, parents: usize) -> Self {
        Self {
            weights: Array2::zeros((units, parents + 1)),
        }
    }

    pub fn random<R: Rng + ?Sized>(units: usize, parents: usize, rng: &mut R) -> Self {
        let mut weights = Array2::zeros((units, parents + 1));
        for mut row in weights.axis_iter_mut(Axis(0)) {
            for w in row.iter_mut().take(parents) {
                *w = rng.random_range(-INIT_SCALE..=INIT_SCALE);
            }
        }
        Self { weights }
    }

    pub fn units(&self) -> usize {
        self.weights.nrows()
    }

    pub fn parents(&self) -> usize {
        self.weights.ncols() - 1
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn bias(&self) -> ArrayView1<'_, f64> {
        self.weights.column(self.parents())
    }

    /// Pre-activations `a = parents . W^T + b`, shape `n x units`.
    pub fn pre_activations(&self, parent_states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let d = self.parents();
        if parent_states.ncols() != d {
            return Err(Error::shape(format!(
                "layer expects {d} parent units, got {}",
                parent_states.ncols()
            )));
        }
        let n = parent_states.nrows();
        let mut a = Array2::zeros((n, self.units()));
        if d > 0 {
            general_mat_mul(
                1.0,
                &parent_states,
                &self.weights.slice(s![.., ..d]).t(),
                0.0,
                &mut a,
            );
        }
        a += &self.bias();
        Ok(a)
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `P(unit on | parents)` for every row and unit, shape `n x units`.
pub fn layer_conditional_means(
    layer: &StochasticLayer,
    parent_states: ArrayView2<'_, f64>,
    encoding: Encoding,
) -> Result<Array2<f64>> {
    debug_assert!(parent_states.iter().all(|&v| encoding.is_valid(v)));
    let mut a = layer.pre_activations(parent_states)?;
    a.mapv_inplace(sigmoid);
    Ok(a)
}

/// Draws each unit independently: "on" iff `u < mean` for `u ~ U[0, 1)`.
/// Consumes one uniform per entry in row-major order.
pub fn sample_layer<R: Rng + ?Sized>(
    means: ArrayView2<'_, f64>,
    encoding: Encoding,
    rng: &mut R,
) -> Array2<f64> {
    means.mapv(|m| encoding.encode(rng.random::<f64>() < m))
}

/// Sum over units of `ln Bern(state; mean)` per row, with clamped means.
pub fn bernoulli_log_mass(
    states: ArrayView2<'_, f64>,
    means: ArrayView2<'_, f64>,
    encoding: Encoding,
) -> Array1<f64> {
    debug_assert_eq!(states.dim(), means.dim());
    let mut out = Array1::zeros(states.nrows());
    for ((o, srow), mrow) in out
        .iter_mut()
        .zip(states.axis_iter(Axis(0)))
        .zip(means.axis_iter(Axis(0)))
    {
        let mut acc = 0.0;
        for (&v, &m) in srow.iter().zip(mrow.iter()) {
            let m = m.clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP);
            acc += if encoding.indicator(v) > 0.5 {
                m.ln()
            } else {
                (1.0 - m).ln()
            };
        }
        *o = acc;
    }
    out
}

/// Unit values and conditional means for every layer `0..=L`, one row per sample.
///
/// `means[i]` is `None` for layers whose values were given rather than sampled
/// (the visible layer of an upward pass).
#[derive(Debug, Clone)]
pub struct LayerStates {
    pub states: Vec<Array2<f64>>,
    pub means: Vec<Option<Array2<f64>>>,
}

impl LayerStates {
    pub fn n(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn depth(&self) -> usize {
        self.states.len() - 1
    }

    pub fn visible(&self) -> &Array2<f64> {
        &self.states[0]
    }

    /// Builds states from explicit per-layer values (no recorded means).
    pub fn from_states(states: Vec<Array2<f64>>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::shape("need at least two layers of states"));
        }
        let n = states[0].nrows();
        if states.iter().any(|s| s.nrows() != n) {
            return Err(Error::shape("all layers must have the same number of rows"));
        }
        let means = vec![None; states.len()];
        Ok(Self { states, means })
    }

    fn check_against(&self, arch: &Architecture) -> Result<()> {
        if self.states.len() != arch.layer_sizes.len() {
            return Err(Error::shape(format!(
                "states cover {} layers, architecture has {}",
                self.states.len(),
                arch.layer_sizes.len()
            )));
        }
        for (i, (s, &l)) in self.states.iter().zip(&arch.layer_sizes).enumerate() {
            if s.ncols() != l {
                return Err(Error::shape(format!(
                    "layer {i} has {} columns, expected {l}",
                    s.ncols()
                )));
            }
        }
        Ok(())
    }
}

/// A layered directed Bernoulli model, oriented top-down (generative) or
/// bottom-up (recognition).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmoidBeliefNet {
    layers: Vec<StochasticLayer>,
    prior_biases: Option<Array1<f64>>,
    direction: Direction,
    arch: Architecture,
}

impl SigmoidBeliefNet {
    pub fn new(
        arch: Architecture,
        direction: Direction,
        layers: Vec<StochasticLayer>,
        prior_biases: Option<Array1<f64>>,
    ) -> Result<Self> {
        let sizes = arch.layer_sizes();
        let depth = arch.depth();
        if layers.len() != depth {
            return Err(Error::shape(format!(
                "{} layers given for depth {depth}",
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (units, parents) = match direction {
                Direction::TopDown => (sizes[i], sizes[i + 1]),
                Direction::BottomUp => (sizes[i + 1], sizes[i]),
            };
            if layer.units() != units || layer.parents() != parents {
                return Err(Error::shape(format!(
                    "layer {i} is {}x{}, expected {units}x{}",
                    layer.units(),
                    layer.parents() + 1,
                    parents + 1
                )));
            }
        }
        match (direction, &prior_biases) {
            (Direction::TopDown, Some(b)) if b.len() == sizes[depth] => {}
            (Direction::TopDown, Some(_)) => {
                return Err(Error::shape("prior biases must match the top layer"))
            }
            (Direction::TopDown, None) => {
                return Err(Error::invalid("a top-down net needs prior biases"))
            }
            (Direction::BottomUp, Some(_)) => {
                return Err(Error::invalid("a bottom-up net has no prior"))
            }
            (Direction::BottomUp, None) => {}
        }
        if let Some(b) = &prior_biases {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("prior biases must be finite"));
            }
        }
        Ok(Self {
            layers,
            prior_biases,
            direction,
            arch,
        })
    }

    pub fn zeros(arch: &Architecture, direction: Direction) -> Self {
        Self::init(arch, direction, |units, parents| {
            StochasticLayer::zeros(units, parents)
        })
    }

    /// Weights uniform in `[-INIT_SCALE, INIT_SCALE]`, biases and prior zero.
    pub fn random<R: Rng + ?Sized>(arch: &Architecture, direction: Direction, rng: &mut R) -> Self {
        Self::init(arch, direction, |units, parents| {
            StochasticLayer::random(units, parents, rng)
        })
    }

    fn init(
        arch: &Architecture,
        direction: Direction,
        mut make: impl FnMut(usize, usize) -> StochasticLayer,
    ) -> Self {
        let sizes = arch.layer_sizes();
        let layers = (0..arch.depth())
            .map(|i| match direction {
                Direction::TopDown => make(sizes[i], sizes[i + 1]),
                Direction::BottomUp => make(sizes[i + 1], sizes[i]),
            })
            .collect();
        let prior_biases = match direction {
            Direction::TopDown => Some(Array1::zeros(sizes[arch.depth()])),
            Direction::BottomUp => None,
        };
        Self {
            layers,
            prior_biases,
            direction,
            arch: arch.clone(),
        }
    }

    pub fn layers(&self) -> &[StochasticLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [StochasticLayer] {
        &mut self.layers
    }

    pub fn prior_biases(&self) -> Option<&Array1<f64>> {
        self.prior_biases.as_ref()
    }

    pub fn prior_biases_mut(&mut self) -> Option<&mut Array1<f64>> {
        self.prior_biases.as_mut()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn encoding(&self) -> Encoding {
        self.arch.encoding
    }

    /// Layer index produced by `layers[i]`.
    pub fn child_of(&self, i: usize) -> usize {
        match self.direction {
            Direction::TopDown => i,
            Direction::BottomUp => i + 1,
        }
    }

    /// Layer index feeding `layers[i]`.
    pub fn parent_of(&self, i: usize) -> usize {
        match self.direction {
            Direction::TopDown => i + 1,
            Direction::BottomUp => i,
        }
    }

    /// Factorized prior means `sigmoid(b)` over the top layer.
    pub fn prior_means(&self) -> Option<Array1<f64>> {
        self.prior_biases.as_ref().map(|b| b.mapv(sigmoid))
    }

    /// Conditional means this net assigns to each layer it generates, given
    /// `states`. Indexed by layer number; `None` for layers the net does not
    /// generate (the visible layer for a recognition net). For a generative net
    /// the top entry holds the prior means broadcast over rows.
    pub fn conditional_means(&self, states: &LayerStates) -> Result<Vec<Option<Array2<f64>>>> {
        states.check_against(&self.arch)?;
        let depth = self.arch.depth();
        let mut out = vec![None; depth + 1];
        for (i, layer) in self.layers.iter().enumerate() {
            let parent = &states.states[self.parent_of(i)];
            out[self.child_of(i)] =
                Some(layer_conditional_means(layer, parent.view(), self.encoding())?);
        }
        if let Some(pm) = self.prior_means() {
            let n = states.n();
            out[depth] = Some(
                pm.broadcast((n, pm.len()))
                    .expect("prior broadcast")
                    .to_owned(),
            );
        }
        Ok(out)
    }

    /// Per-row log-probability of `states` under this net, using means
    /// already computed by [`Self::conditional_means`].
    pub fn log_prob_from_means(
        &self,
        states: &LayerStates,
        means: &[Option<Array2<f64>>],
    ) -> Array1<f64> {
        let mut total = Array1::zeros(states.n());
        for (s, m) in states.states.iter().zip(means) {
            if let Some(m) = m {
                total += &bernoulli_log_mass(s.view(), m.view(), self.encoding());
            }
        }
        total
    }
}

/// A generative net `p` (top-down, with prior) paired with a recognition net `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmholtzMachine {
    pub p: SigmoidBeliefNet,
    pub q: SigmoidBeliefNet,
    architecture: Architecture,
}

impl HelmholtzMachine {
    pub fn new(p: SigmoidBeliefNet, q: SigmoidBeliefNet) -> Result<Self> {
        if p.direction != Direction::TopDown || q.direction != Direction::BottomUp {
            return Err(Error::invalid("p must be top-down and q bottom-up"));
        }
        if p.arch != q.arch {
            return Err(Error::invalid("p and q must share one architecture"));
        }
        let architecture = p.arch.clone();
        Ok(Self { p, q, architecture })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            p: SigmoidBeliefNet::zeros(arch, Direction::TopDown),
            q: SigmoidBeliefNet::zeros(arch, Direction::BottomUp),
            architecture: arch.clone(),
        }
    }

    pub fn random<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let p = SigmoidBeliefNet::random(arch, Direction::TopDown, rng);
        let q = SigmoidBeliefNet::random(arch, Direction::BottomUp, rng);
        Self {
            p,
            q,
            architecture: arch.clone(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }
}

/// Replicates each row of `x` `s` times (datum-major) and samples every hidden
/// layer ancestrally through `q`.
pub fn upward_pass<R: Rng + ?Sized>(
    q: &SigmoidBeliefNet,
    x: ArrayView2<'_, f64>,
    s: usize,
    rng: &mut R,
) -> Result<LayerStates> {
    if q.direction != Direction::BottomUp {
        return Err(Error::invalid("upward pass needs a bottom-up net"));
    }
    if s == 0 {
        return Err(Error::invalid("need at least one sample per datum"));
    }
    let arch = &q.arch;
    if x.ncols() != arch.visible() {
        return Err(Error::shape(format!(
            "data has {} columns, visible layer has {}",
            x.ncols(),
            arch.visible()
        )));
    }
    let visible = if s == 1 {
        x.to_owned()
    } else {
        let mut v = Array2::zeros((x.nrows() * s, x.ncols()));
        for (b, row) in x.axis_iter(Axis(0)).enumerate() {
            for k in 0..s {
                v.row_mut(b * s + k).assign(&row);
            }
        }
        v
    };
    let depth = arch.depth();
    let mut states = Vec::with_capacity(depth + 1);
    let mut means = Vec::with_capacity(depth + 1);
    states.push(visible);
    means.push(None);
    for layer in &q.layers {
        let m = layer_conditional_means(layer, states.last().unwrap().view(), arch.encoding)?;
        states.push(sample_layer(m.view(), arch.encoding, rng));
        means.push(Some(m));
    }
    Ok(LayerStates { states, means })
}

/// Samples `n` joint configurations from the generative net: top layer from
/// the prior, then each lower layer down to the visible one.
pub fn downward_pass<R: Rng + ?Sized>(
    p: &SigmoidBeliefNet,
    n: usize,
    rng: &mut R,
) -> Result<LayerStates> {
    let prior = p
        .prior_means()
        .ok_or_else(|| Error::invalid("downward pass needs a net with a prior"))?;
    let arch = &p.arch;
    let depth = arch.depth();
    let mut states: Vec<Option<Array2<f64>>> = vec![None; depth + 1];
    let mut means: Vec<Option<Array2<f64>>> = vec![None; depth + 1];
    let top_means = prior
        .broadcast((n, prior.len()))
        .expect("prior broadcast")
        .to_owned();
    states[depth] = Some(sample_layer(top_means.view(), arch.encoding, rng));
    means[depth] = Some(top_means);
    for i in (0..depth).rev() {
        let parent = states[i + 1].as_ref().unwrap();
        let m = layer_conditional_means(&p.layers[i], parent.view(), arch.encoding)?;
        states[i] = Some(sample_layer(m.view(), arch.encoding, rng));
        means[i] = Some(m);
    }
    Ok(LayerStates {
        states: states.into_iter().map(Option::unwrap).collect(),
        means,
    })
}

/// `ln p(x, h)` per row: prior over the top layer plus every conditional below it.
pub fn log_joint_p(p: &SigmoidBeliefNet, states: &LayerStates) -> Result<Array1<f64>> {
    if p.direction != Direction::TopDown {
        return Err(Error::invalid("log_joint_p needs the generative net"));
    }
    let means = p.conditional_means(states)?;
    Ok(p.log_prob_from_means(states, &means))
}

/// `ln q(h | x)` per row; the visible layer contributes nothing.
pub fn log_q_given_x(q: &SigmoidBeliefNet, states: &LayerStates) -> Result<Array1<f64>> {
    if q.direction != Direction::BottomUp {
        return Err(Error::invalid("log_q_given_x needs the recognition net"));
    }
    let means = q.conditional_means(states)?;
    Ok(q.log_prob_from_means(states, &means))
}
