//! Random finite instances and dense reference computations shared by the
//! property and acceptance tests. The reference routines work on plain
//! `Vec<f64>` tables and never call into the library's arithmetic.

#![allow(dead_code)]

use blindspot::measure::joint;
use blindspot::{BoundedLoss, Distribution, JointLaw, Kernel, Label, Normalization, Regime};
use rand::Rng;

/// Probability vector of length `n`; roughly `zero_rate` of the entries are
/// zero, but at least one is positive.
pub fn simplex<R: Rng>(rng: &mut R, n: usize, zero_rate: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(zero_rate) {
                0.0
            } else {
                // Exp(1) draws give a flat Dirichlet after normalizing
                -(1.0 - rng.random::<f64>()).ln() + 1e-12
            }
        })
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        let i = rng.random_range(0..n);
        w[i] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Dense `rho`, two kernels and a loss over `|X| × |Y|` cells.
#[derive(Clone, Debug)]
pub struct Instance {
    pub xs: Vec<String>,
    pub ys: Vec<String>,
    pub rho: Vec<f64>,
    pub pi: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    /// Loss values in `[0, l_max]`.
    pub loss: Vec<Vec<f64>>,
    pub l_max: f64,
}

pub fn random_instance<R: Rng>(rng: &mut R, max_x: usize, max_y: usize) -> Instance {
    let nx = rng.random_range(1..=max_x);
    let ny = rng.random_range(1..=max_y);
    let zero_rate = [0.0, 0.2, 0.5][rng.random_range(0..3)];
    let l_max = [1.0, rng.random_range(0.01..10.0)][rng.random_range(0..2)];
    Instance {
        xs: (0..nx).map(|i| format!("x{i}")).collect(),
        ys: (0..ny).map(|j| format!("y{j}")).collect(),
        rho: simplex(rng, nx, zero_rate),
        pi: (0..nx).map(|_| simplex(rng, ny, zero_rate)).collect(),
        q: (0..nx).map(|_| simplex(rng, ny, zero_rate)).collect(),
        loss: (0..nx)
            .map(|_| (0..ny).map(|_| rng.random_range(0.0..=l_max)).collect())
            .collect(),
        l_max,
    }
}

fn labels(ids: &[String]) -> Vec<Label> {
    ids.iter().map(|s| Label::new(s.as_str()).unwrap()).collect()
}

impl Instance {
    fn kernel(&self, rows: &[Vec<f64>]) -> Kernel {
        let ys = labels(&self.ys);
        let rows = labels(&self.xs)
            .into_iter()
            .zip(rows)
            .map(|(x, r)| {
                (
                    x,
                    Distribution::new(ys.clone(), r.clone(), Normalization::Strict).unwrap(),
                )
            })
            .collect();
        Kernel::new(ys, rows).unwrap()
    }

    pub fn rho_dist(&self) -> Distribution {
        Distribution::new(labels(&self.xs), self.rho.clone(), Normalization::Strict).unwrap()
    }

    pub fn p(&self) -> JointLaw {
        joint(self.rho_dist(), self.kernel(&self.pi), Regime::OnPolicy).unwrap()
    }

    pub fn q(&self) -> JointLaw {
        joint(self.rho_dist(), self.kernel(&self.q), Regime::OffPolicy).unwrap()
    }

    /// The loss with bounds `[0, l_max]`.
    pub fn bounded_loss(&self) -> BoundedLoss {
        BoundedLoss::new(
            labels(&self.xs),
            labels(&self.ys),
            self.loss.iter().flatten().copied().collect(),
            0.0,
            self.l_max,
        )
        .unwrap()
    }

    /// `P(x, y) − Q(x, y)` for every cell.
    pub fn cell_diffs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, r) in self.rho.iter().enumerate() {
            for j in 0..self.ys.len() {
                out.push(r * self.pi[i][j] - r * self.q[i][j]);
            }
        }
        out
    }

    pub fn ref_tv(&self) -> f64 {
        0.5 * self.cell_diffs().iter().map(|d| d.abs()).sum::<f64>()
    }

    /// `Σ_x rho(x) · TV(pi(·|x), q(·|x))`.
    pub fn ref_conditional_tv(&self) -> f64 {
        self.rho
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r * 0.5
                    * self.pi[i]
                        .iter()
                        .zip(&self.q[i])
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
            })
            .sum()
    }

    /// `(R_gen, R_disc)` for the instance loss.
    pub fn ref_risks(&self) -> (f64, f64) {
        let (mut rp, mut rq) = (0.0, 0.0);
        for (i, r) in self.rho.iter().enumerate() {
            for j in 0..self.ys.len() {
                rp += r * self.pi[i][j] * self.loss[i][j];
                rq += r * self.q[i][j] * self.loss[i][j];
            }
        }
        (rp, rq)
    }
}
