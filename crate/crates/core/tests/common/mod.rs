//! Independent oracles for the integration and acceptance tests.
//!
//! Everything here is plain scalar code over `Vec<f64>`: log-probabilities of
//! explicit configurations, exhaustive enumeration, and a Gaussian-elimination
//! solver. Only parameter values are read from the library's types.

// Dense oracle algorithms read most clearly with explicit indices.
#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use helmholtz::model::{Architecture, Encoding, HelmholtzMachine};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `ln sigmoid(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scalar copy of a Helmholtz machine's parameters.
///
/// `p[i]` maps layer `i + 1` to layer `i` (rows: units of layer `i`, last
/// column bias); `prior` holds the top-layer biases; `q[i]` maps layer `i` to
/// layer `i + 1`.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub sizes: Vec<usize>,
    pub enc: Encoding,
    pub p: Vec<Vec<Vec<f64>>>,
    pub prior: Vec<f64>,
    pub q: Vec<Vec<Vec<f64>>>,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

impl Oracle {
    pub fn from_machine(hm: &HelmholtzMachine) -> Self {
        Self {
            sizes: hm.architecture().layer_sizes().to_vec(),
            enc: hm.architecture().encoding(),
            p: hm.p.layers().iter().map(|l| rows(l.weights())).collect(),
            prior: hm.p.prior_biases().unwrap().to_vec(),
            q: hm.q.layers().iter().map(|l| rows(l.weights())).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `ln P(v | a)` for one unit with pre-activation `a`.
    fn unit(&self, v: f64, a: f64) -> f64 {
        let on = match self.enc {
            Encoding::ZeroOne => v > 0.5,
            Encoding::PlusMinusOne => v > 0.0,
        };
        if on {
            log_sigmoid(a)
        } else {
            log_sigmoid(-a)
        }
    }

    fn pre(w: &[f64], parents: &[f64]) -> f64 {
        w[..parents.len()].iter().zip(parents).map(|(a, b)| a * b).sum::<f64>() + w[parents.len()]
    }

    /// `ln p(x, h)` for explicit layer values `states[0..=L]`.
    pub fn log_p(&self, states: &[Vec<f64>]) -> f64 {
        let l = self.depth();
        let mut total: f64 = states[l].iter().zip(&self.prior).map(|(&v, &b)| self.unit(v, b)).sum();
        for i in 0..l {
            for (j, w) in self.p[i].iter().enumerate() {
                total += self.unit(states[i][j], Self::pre(w, &states[i + 1]));
            }
        }
        total
    }

    /// `ln q(h | x)` for explicit layer values.
    pub fn log_q(&self, states: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.depth() {
            for (j, w) in self.q[i].iter().enumerate() {
                total += self.unit(states[i + 1][j], Self::pre(w, &states[i]));
            }
        }
        total
    }

    pub fn value(&self, bit: bool) -> f64 {
        match (self.enc, bit) {
            (_, true) => 1.0,
            (Encoding::ZeroOne, false) => 0.0,
            (Encoding::PlusMinusOne, false) => -1.0,
        }
    }

    /// Every hidden configuration, split into layers 1..=L.
    pub fn hidden_configs(&self) -> Vec<Vec<Vec<f64>>> {
        let total: usize = self.sizes[1..].iter().sum();
        (0..1usize << total)
            .map(|code| {
                let mut bit = 0;
                self.sizes[1..]
                    .iter()
                    .map(|&l| {
                        (0..l)
                            .map(|_| {
                                let v = self.value(code >> bit & 1 == 1);
                                bit += 1;
                                v
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn visible_configs(&self) -> Vec<Vec<f64>> {
        let d = self.sizes[0];
        (0..1usize << d)
            .map(|code| (0..d).map(|j| self.value(code >> j & 1 == 1)).collect())
            .collect()
    }

    pub fn joint(x: &[f64], h: &[Vec<f64>]) -> Vec<Vec<f64>> {
        std::iter::once(x.to_vec()).chain(h.iter().cloned()).collect()
    }

    /// `ln p(x)` by enumeration.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .hidden_configs()
            .iter()
            .map(|h| self.log_p(&Self::joint(x, h)))
            .collect();
        lse(&terms)
    }

    /// Exact posterior `p(h | x)` over [`Self::hidden_configs`].
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let lp: Vec<f64> = self
            .hidden_configs()
            .iter()
            .map(|h| self.log_p(&Self::joint(x, h)))
            .collect();
        let z = lse(&lp);
        lp.iter().map(|v| (v - z).exp()).collect()
    }

    /// `KL(p(. | x) || q(. | x))`.
    pub fn posterior_kl(&self, x: &[f64]) -> f64 {
        let post = self.posterior(x);
        self.hidden_configs()
            .iter()
            .zip(&post)
            .filter(|(_, &w)| w > 0.0)
            .map(|(h, &w)| w * (w.ln() - self.log_q(&Self::joint(x, h))))
            .sum()
    }

    /// `E_{p(x, h)}[ln q(h | x)]`.
    pub fn sleep_objective(&self) -> f64 {
        let mut total = 0.0;
        for x in self.visible_configs() {
            for h in self.hidden_configs() {
                let s = Self::joint(&x, &h);
                total += self.log_p(&s).exp() * self.log_q(&s);
            }
        }
        total
    }

    /// Generative parameters flattened: p layers row-major, then the prior.
    pub fn theta(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.p.iter().flatten().flatten().copied().collect();
        v.extend(&self.prior);
        v
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        let mut o = self.clone();
        let mut it = theta.iter().copied();
        for layer in &mut o.p {
            for row in layer {
                for w in row {
                    *w = it.next().unwrap();
                }
            }
        }
        for b in &mut o.prior {
            *b = it.next().unwrap();
        }
        o
    }

    /// Recognition parameters flattened, q layers row-major.
    pub fn phi(&self) -> Vec<f64> {
        self.q.iter().flatten().flatten().copied().collect()
    }

    pub fn with_phi(&self, phi: &[f64]) -> Self {
        let mut o = self.clone();
        let mut it = phi.iter().copied();
        for layer in &mut o.q {
            for row in layer {
                for w in row {
                    *w = it.next().unwrap();
                }
            }
        }
        o
    }
}

pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r: Vec<f64> = a.row(i).to_vec();
            r.push(b[i]);
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Array1::from(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// A machine whose weights are uniform in `[-scale, scale]` (biases included).
pub fn random_machine(sizes: &[usize], enc: Encoding, scale: f64, seed: u64) -> HelmholtzMachine {
    let arch = Architecture::new(sizes.to_vec(), enc).unwrap();
    let mut r = rng(seed);
    let mut hm = HelmholtzMachine::zeros(&arch);
    for l in hm.p.layers_mut().iter_mut().chain(hm.q.layers_mut()) {
        l.weights_mut().mapv_inplace(|_| r.random_range(-scale..scale));
    }
    hm.p.prior_biases_mut().unwrap().mapv_inplace(|_| r.random_range(-scale..scale));
    hm
}

/// Max-abs difference of two equally long slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Flattens a list of matrices row-major.
pub fn flatten(ms: &[Array2<f64>]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.iter().copied()).collect()
}

/// Flat copy of every parameter of a machine (p layers, prior, q layers).
pub fn machine_params(hm: &HelmholtzMachine) -> Vec<f64> {
    let o = Oracle::from_machine(hm);
    let mut v = o.theta();
    v.extend(o.phi());
    v
}

pub mod criteria;
