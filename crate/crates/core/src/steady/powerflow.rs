use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::SteadyError;
use crate::model::{build_admittance, find_islands, BusKind, GridModel};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// p.u., indexed like `model.buses`
    pub v_mag: Vec<f64>,
    /// radians
    pub v_ang: Vec<f64>,
    /// Net injection (generation minus load), MW
    pub p_inj: Vec<f64>,
    /// Mvar
    pub q_inj: Vec<f64>,
    pub iterations: usize,
    /// p.u.
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn voltage(&self, i: usize) -> Complex64 {
        Complex64::from_polar(self.v_mag[i], self.v_ang[i])
    }
}

/// Polar-form mismatch equations of a network with fixed bus types.
///
/// The unknown vector is `[θ(pv), θ(pq), |V|(pq)]`; the mismatch vector is
/// `[ΔP(pv), ΔP(pq), ΔQ(pq)]` with `ΔS = V·conj(Y·V) − S_spec`.
#[derive(Debug, Clone)]
pub struct PowerFlowProblem {
    pub y_bus: DMatrix<Complex64>,
    pub p_spec: Vec<f64>,
    pub q_spec: Vec<f64>,
    pub slack: usize,
    pub pv: Vec<usize>,
    pub pq: Vec<usize>,
    /// Magnitudes of slack and PV buses (set-points); PQ entries are the flat-start guess.
    pub v_fixed: Vec<f64>,
}

impl PowerFlowProblem {
    pub fn from_model(model: &GridModel) -> Self {
        let y = build_admittance(model, &model.initial_breaker_states(), &[]).to_dense();
        let n = model.bus_count();
        let s_base = model.s_base;
        let mut p_spec = vec![0.0; n];
        let mut q_spec = vec![0.0; n];
        let mut pv = vec![];
        let mut pq = vec![];
        let mut slack = 0;
        let mut v_fixed = vec![1.0; n];
        for (i, b) in model.buses.iter().enumerate() {
            let gen: f64 = model
                .machines
                .iter()
                .filter(|m| m.bus == b.id)
                .map(|m| m.p_dispatch)
                .chain(
                    model
                        .inverters
                        .iter()
                        .filter(|inv| inv.bus == b.id)
                        .map(|inv| inv.p_set),
                )
                .sum();
            p_spec[i] = (gen - b.load_p) / s_base;
            q_spec[i] = -b.load_q / s_base;
            match b.kind {
                BusKind::Slack => {
                    slack = i;
                    v_fixed[i] = b.v_set;
                }
                BusKind::PV => {
                    pv.push(i);
                    v_fixed[i] = b.v_set;
                }
                BusKind::PQ => pq.push(i),
            }
        }
        Self {
            y_bus: y,
            p_spec,
            q_spec,
            slack,
            pv,
            pq,
            v_fixed,
        }
    }

    pub fn unknowns(&self) -> usize {
        self.pv.len() + 2 * self.pq.len()
    }

    /// Flat start: 1.0∠0 on PQ buses, set-points elsewhere.
    pub fn flat_start(&self) -> DVector<f64> {
        let npv = self.pv.len();
        let npq = self.pq.len();
        let mut x = DVector::zeros(self.unknowns());
        for k in 0..npq {
            x[npv + npq + k] = 1.0;
        }
        x
    }

    pub fn voltages(&self, x: &DVector<f64>) -> Vec<Complex64> {
        let npv = self.pv.len();
        let npq = self.pq.len();
        let mut vm = self.v_fixed.clone();
        let mut va = vec![0.0; vm.len()];
        for (k, &i) in self.pv.iter().enumerate() {
            va[i] = x[k];
        }
        for (k, &i) in self.pq.iter().enumerate() {
            va[i] = x[npv + k];
            vm[i] = x[npv + npq + k];
        }
        vm.iter()
            .zip(&va)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    fn injections(&self, v: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let vv = DVector::from_column_slice(v);
        let i_bus = &self.y_bus * &vv;
        let s = v
            .iter()
            .zip(i_bus.iter())
            .map(|(vk, ik)| vk * ik.conj())
            .collect();
        (s, i_bus.iter().copied().collect())
    }

    pub fn mismatch(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = self.voltages(x);
        let (s, _) = self.injections(&v);
        let npv = self.pv.len();
        let npq = self.pq.len();
        let mut f = DVector::zeros(self.unknowns());
        for (k, &i) in self.pv.iter().chain(&self.pq).enumerate() {
            f[k] = s[i].re - self.p_spec[i];
        }
        for (k, &i) in self.pq.iter().enumerate() {
            f[npv + npq + k] = s[i].im - self.q_spec[i];
        }
        f
    }

    /// Analytic Jacobian of [`Self::mismatch`].
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let v = self.voltages(x);
        let n = v.len();
        let (_, i_bus) = self.injections(&v);
        // dS/dθ = j·diag(V)·conj(diag(I) − Y·diag(V))
        // dS/d|V| = diag(V)·conj(Y·diag(V/|V|)) + conj(diag(I))·diag(V/|V|)
        let j = Complex64::new(0.0, 1.0);
        let ds_dva = |r: usize, c: usize| -> Complex64 {
            let mut t = -self.y_bus[(r, c)] * v[c];
            if r == c {
                t += i_bus[r];
            }
            j * v[r] * t.conj()
        };
        let ds_dvm = |r: usize, c: usize| -> Complex64 {
            let unit = v[c] / v[c].norm();
            let mut t = v[r] * (self.y_bus[(r, c)] * unit).conj();
            if r == c {
                t += i_bus[r].conj() * unit;
            }
            t
        };
        let rows_p: Vec<usize> = self.pv.iter().chain(&self.pq).copied().collect();
        let cols_a = &rows_p;
        let npa = rows_p.len();
        let npq = self.pq.len();
        let dim = npa + npq;
        debug_assert!(n >= dim / 2);
        let mut jac = DMatrix::zeros(dim, dim);
        for (ri, &r) in rows_p.iter().enumerate() {
            for (ci, &c) in cols_a.iter().enumerate() {
                jac[(ri, ci)] = ds_dva(r, c).re;
            }
            for (ci, &c) in self.pq.iter().enumerate() {
                jac[(ri, npa + ci)] = ds_dvm(r, c).re;
            }
        }
        for (ri, &r) in self.pq.iter().enumerate() {
            for (ci, &c) in cols_a.iter().enumerate() {
                jac[(npa + ri, ci)] = ds_dva(r, c).im;
            }
            for (ci, &c) in self.pq.iter().enumerate() {
                jac[(npa + ri, npa + ci)] = ds_dvm(r, c).im;
            }
        }
        jac
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Full Newton-Raphson power flow from a flat start.
///
/// Generator buses are held at their voltage set-points (no reactive limits);
/// the iteration count includes the pass that detects convergence.
pub fn solve_power_flow(
    model: &GridModel,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, SteadyError> {
    let islands = find_islands(model, &model.initial_breaker_states());
    if islands.len() != 1 {
        return Err(SteadyError::Disconnected {
            islands: islands.len(),
        });
    }
    let prob = PowerFlowProblem::from_model(model);
    let mut x = prob.flat_start();
    let mut last = f64::INFINITY;
    for it in 1..=max_iter {
        let f = prob.mismatch(&x);
        let norm = inf_norm(&f);
        if !norm.is_finite() {
            return Err(SteadyError::VoltageCollapse {
                iteration: it,
                detail: "mismatch became non-finite".into(),
            });
        }
        last = norm;
        if norm < tol {
            return Ok(finish(model, &prob, &x, it, norm));
        }
        let jac = prob.jacobian(&x);
        let dx = jac.lu().solve(&(-f)).ok_or_else(|| SteadyError::VoltageCollapse {
            iteration: it,
            detail: "singular Jacobian".into(),
        })?;
        x += dx;
        let pq_off = prob.pv.len() + prob.pq.len();
        if x.rows(pq_off, prob.pq.len()).iter().any(|&vm| !(vm > 0.0)) {
            return Err(SteadyError::VoltageCollapse {
                iteration: it,
                detail: "non-positive voltage magnitude".into(),
            });
        }
    }
    Err(SteadyError::NotConverged {
        iterations: max_iter,
        max_mismatch: last,
    })
}

fn finish(
    model: &GridModel,
    prob: &PowerFlowProblem,
    x: &DVector<f64>,
    iterations: usize,
    max_mismatch: f64,
) -> PowerFlowSolution {
    let v = prob.voltages(x);
    let (s, _) = prob.injections(&v);
    PowerFlowSolution {
        v_mag: v.iter().map(|c| c.norm()).collect(),
        v_ang: v.iter().map(|c| c.arg()).collect(),
        p_inj: s.iter().map(|c| c.re * model.s_base).collect(),
        q_inj: s.iter().map(|c| c.im * model.s_base).collect(),
        iterations,
        max_mismatch,
    }
}
