//! Dual transformation for state- and input-constrained problems.
//!
//! A problem with general inequality constraints on states and inputs has a
//! dual that is again a finite-horizon optimal control problem — with
//! reversed time, horizon `N + 1`, zero initial state and sign constraints
//! on part of the inputs only. That shape is exactly what the active-set
//! machinery of this crate handles, so state constraints can be treated by
//! solving dual subproblems while the outer iteration keeps primal
//! bookkeeping.
//!
//! The dual data is derived from the Lagrangian with multipliers on the
//! dynamics, the output coupling `z = M x` and the inequalities. The
//! derivation is validated by strong-duality and recovery oracles in the
//! test suite rather than taken on faith.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::asqp::{BoundSide, CftocProblem, CftocStage, PartitionedData, StageWorkingSet, WorkingSet};
use crate::linalg::{factor_psd, LinalgError, SymMat, DEFAULT_TOL};
use crate::riccati::{RiccatiError, Trajectory, UftocProblem};

#[derive(Debug, Error)]
pub enum DualizeError {
    #[error("stage {stage}: stacked cost is not positive definite")]
    NotPd { stage: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("invalid working set: {0}")]
    InvalidWorkingSet(String),
}

pub type Result<T> = std::result::Result<T, DualizeError>;

/// One stage of the general constrained problem: dynamics on `x`, outputs
/// `z = M x`, a strictly convex cost on `(z, u)` and inequality rows
/// `h_x x + h_u u + h0 ⪯ 0`.
#[derive(Debug, Clone)]
pub struct GeneralStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub m: DMatrix<f64>,
    pub q_z: SymMat,
    pub q_zu: DMatrix<f64>,
    pub q_u: SymMat,
    pub l_z: DVector<f64>,
    pub l_u: DVector<f64>,
    pub cost_offset: f64,
    pub h_x: DMatrix<f64>,
    pub h_u: DMatrix<f64>,
    pub h0: DVector<f64>,
}

impl GeneralStage {
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn constraint_dim(&self) -> usize {
        self.h0.len()
    }

    fn stacked_cost(&self) -> SymMat {
        let nz = self.q_z.dim();
        let nu = self.q_u.dim();
        let mut m = DMatrix::zeros(nz + nu, nz + nu);
        m.view_mut((0, 0), (nz, nz)).copy_from(self.q_z.matrix());
        m.view_mut((0, nz), (nz, nu)).copy_from(&self.q_zu);
        m.view_mut((nz, 0), (nu, nz))
            .copy_from(&self.q_zu.transpose());
        m.view_mut((nz, nz), (nu, nu)).copy_from(self.q_u.matrix());
        SymMat::symmetrize(m)
    }
}

/// General constrained problem over horizon `N`, with terminal output cost
/// and terminal state constraints.
#[derive(Debug, Clone)]
pub struct GeneralCftoc {
    pub stages: Vec<GeneralStage>,
    pub terminal_output: DMatrix<f64>,
    pub terminal_cost: SymMat,
    pub terminal_linear: DVector<f64>,
    pub terminal_offset: f64,
    pub terminal_h_x: DMatrix<f64>,
    pub terminal_h0: DVector<f64>,
    pub initial_state: DVector<f64>,
}

impl GeneralCftoc {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn output_dim(&self) -> usize {
        self.terminal_output.nrows()
    }

    /// Constraint count at stage `t ∈ 0..=N`.
    pub fn constraint_dim(&self, t: usize) -> usize {
        if t == self.horizon() {
            self.terminal_h0.len()
        } else {
            self.stages[t].constraint_dim()
        }
    }

    /// Objective of a primal trajectory (with `z = M x` substituted).
    pub fn objective(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for (t, st) in self.stages.iter().enumerate() {
            let z = &st.m * &states[t];
            let u = &inputs[t];
            total += 0.5 * (z.dot(&(st.q_z.matrix() * &z)) + u.dot(&(st.q_u.matrix() * u)))
                + z.dot(&(&st.q_zu * u))
                + st.l_z.dot(&z)
                + st.l_u.dot(u)
                + st.cost_offset;
        }
        let zn = &self.terminal_output * &states[self.horizon()];
        total
            + 0.5 * zn.dot(&(self.terminal_cost.matrix() * &zn))
            + self.terminal_linear.dot(&zn)
            + self.terminal_offset
    }

    /// Maximum inequality violation of a trajectory (≤ 0 means feasible).
    pub fn max_violation(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (t, st) in self.stages.iter().enumerate() {
            if st.constraint_dim() == 0 {
                continue;
            }
            let r = &st.h_x * &states[t] + &st.h_u * &inputs[t] + &st.h0;
            worst = worst.max(r.max());
        }
        if self.terminal_h0.len() > 0 {
            let r = &self.terminal_h_x * &states[self.horizon()] + &self.terminal_h0;
            worst = worst.max(r.max());
        }
        worst
    }
}

/// Inverse blocks of one stacked stage cost.
#[derive(Debug, Clone)]
pub struct StageInverse {
    pub q_z: DMatrix<f64>,
    pub q_zu: DMatrix<f64>,
    pub q_u: DMatrix<f64>,
}

/// Index bookkeeping between the primal problem and its dual.
#[derive(Debug, Clone)]
pub struct DualMap {
    pub horizon: usize,
    pub n_z: usize,
    /// Constraint counts per primal stage `0..=N`.
    pub n_c: Vec<usize>,
    /// Inverse cost blocks per primal stage `0..N`.
    pub inverses: Vec<StageInverse>,
    /// Inverse of the terminal output cost.
    pub terminal_inverse: DMatrix<f64>,
}

impl DualMap {
    /// Dual stage carrying the multipliers of primal stage `t`.
    pub fn dual_stage_of(&self, t: usize) -> usize {
        self.horizon - t
    }

    /// Dual input coordinate of the `i`-th inequality multiplier.
    pub fn gamma_coord(&self, i: usize) -> usize {
        self.n_z + i
    }
}

fn invert_pd(m: &SymMat, stage: usize) -> Result<DMatrix<f64>> {
    let f = factor_psd(m, DEFAULT_TOL).map_err(|_| DualizeError::NotPd { stage })?;
    if !f.is_cholesky() {
        return Err(DualizeError::NotPd { stage });
    }
    Ok(f.solve(&DMatrix::identity(m.dim(), m.dim()))?)
}

/// Builds the dual problem of a strictly convex general problem.
///
/// The dual has horizon `N + 1`, runs in reversed time, starts from a zero
/// state and constrains only the inequality-multiplier part of its inputs
/// to be nonnegative. Its optimal value is the negated primal optimum.
pub fn build_dual(p: &GeneralCftoc) -> Result<(CftocProblem, DualMap)> {
    let n = p.horizon();
    let n_x = p.state_dim();
    let n_z = p.output_dim();
    let mut inverses = Vec::with_capacity(n);
    for (t, st) in p.stages.iter().enumerate() {
        let inv = invert_pd(&st.stacked_cost(), t)?;
        inverses.push(StageInverse {
            q_z: inv.view((0, 0), (n_z, n_z)).into_owned(),
            q_zu: inv.view((0, n_z), (n_z, st.input_dim())).into_owned(),
            q_u: inv
                .view((n_z, n_z), (st.input_dim(), st.input_dim()))
                .into_owned(),
        });
    }
    let terminal_inverse = invert_pd(&p.terminal_cost, n)?;

    let mut dual_stages = Vec::with_capacity(n + 1);
    for tau in 0..=n {
        let t = n - tau; // primal stage the multipliers belong to
        let n_c = p.constraint_dim(t);
        let n_ud = n_z + n_c;
        let mut q_x = SymMat::zeros(n_x);
        let mut q_xu = DMatrix::zeros(n_x, n_ud);
        let mut q_u = DMatrix::zeros(n_ud, n_ud);
        let mut l_x = DVector::zeros(n_x);
        let mut l_u = DVector::zeros(n_ud);
        let cost_offset;
        let a_d;
        let b_d;
        if t == n {
            // Multipliers of the terminal output and terminal constraints.
            let q_bar = &terminal_inverse;
            q_u.view_mut((0, 0), (n_z, n_z)).copy_from(q_bar);
            let p_z = q_bar * &p.terminal_linear;
            l_u.rows_mut(0, n_z).copy_from(&(-&p_z));
            if n_c > 0 {
                l_u.rows_mut(n_z, n_c).copy_from(&(-&p.terminal_h0));
            }
            cost_offset = 0.5 * p.terminal_linear.dot(&p_z) - p.terminal_offset;
            a_d = DMatrix::zeros(n_x, n_x);
            let mut b = DMatrix::zeros(n_x, n_ud);
            b.view_mut((0, 0), (n_x, n_z))
                .copy_from(&p.terminal_output.transpose());
            if n_c > 0 {
                b.view_mut((0, n_z), (n_x, n_c))
                    .copy_from(&p.terminal_h_x.transpose());
            }
            b_d = b;
        } else {
            let st = &p.stages[t];
            let inv = &inverses[t];
            let bqu = &st.b * &inv.q_u; // B Q̄_u
            q_x = SymMat::symmetrize(&bqu * st.b.transpose());
            q_xu
                .view_mut((0, 0), (n_x, n_z))
                .copy_from(&(-(&st.b * inv.q_zu.transpose())));
            if n_c > 0 {
                q_xu
                    .view_mut((0, n_z), (n_x, n_c))
                    .copy_from(&(&bqu * st.h_u.transpose()));
            }
            q_u.view_mut((0, 0), (n_z, n_z)).copy_from(&inv.q_z);
            if n_c > 0 {
                let zu_hu = -(&inv.q_zu * st.h_u.transpose());
                q_u.view_mut((0, n_z), (n_z, n_c)).copy_from(&zu_hu);
                q_u.view_mut((n_z, 0), (n_c, n_z))
                    .copy_from(&zu_hu.transpose());
                let huu = &st.h_u * &inv.q_u * st.h_u.transpose();
                q_u.view_mut((n_z, n_z), (n_c, n_c)).copy_from(&huu);
            }
            let p_z = &inv.q_z * &st.l_z + &inv.q_zu * &st.l_u;
            let p_u = inv.q_zu.transpose() * &st.l_z + &inv.q_u * &st.l_u;
            l_x = &st.b * &p_u - &st.offset;
            l_u.rows_mut(0, n_z).copy_from(&(-&p_z));
            if n_c > 0 {
                l_u.rows_mut(n_z, n_c)
                    .copy_from(&(&st.h_u * &p_u - &st.h0));
            }
            cost_offset = 0.5 * (st.l_z.dot(&p_z) + st.l_u.dot(&p_u)) - st.cost_offset;
            a_d = st.a.transpose().into_owned();
            let mut b = DMatrix::zeros(n_x, n_ud);
            b.view_mut((0, 0), (n_x, n_z)).copy_from(&st.m.transpose());
            if n_c > 0 {
                b.view_mut((0, n_z), (n_x, n_c))
                    .copy_from(&st.h_x.transpose());
            }
            b_d = b;
        }
        // β is unconstrained, γ ⪰ 0.
        let mut u_min = DVector::from_element(n_ud, f64::NEG_INFINITY);
        for i in n_z..n_ud {
            u_min[i] = 0.0;
        }
        let u_max = DVector::from_element(n_ud, f64::INFINITY);
        dual_stages.push(CftocStage {
            a: a_d,
            b: b_d,
            offset: DVector::zeros(n_x),
            q_x,
            q_xu,
            q_u: SymMat::symmetrize(q_u),
            l_x,
            l_u,
            cost_offset,
            u_min,
            u_max,
        });
    }

    let dual = CftocProblem {
        stages: dual_stages,
        terminal_cost: SymMat::zeros(n_x),
        terminal_linear: -&p.initial_state,
        terminal_offset: 0.0,
        initial_state: DVector::zeros(n_x),
    };
    let map = DualMap {
        horizon: n,
        n_z,
        n_c: (0..=n).map(|t| p.constraint_dim(t)).collect(),
        inverses,
        terminal_inverse,
    };
    Ok((dual, map))
}

/// Recovers the primal trajectory from a dual solution.
///
/// `dual_states`, `dual_inputs` and `dual_costates` are the trajectory of
/// the dual problem built by [`build_dual`]; the primal states are the
/// negated dual costates in reversed time, the primal inputs come from the
/// stationarity of the stage Lagrangian.
pub fn recover_primal(
    p: &GeneralCftoc,
    map: &DualMap,
    dual_states: &[DVector<f64>],
    dual_inputs: &[DVector<f64>],
    dual_costates: &[DVector<f64>],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = p.horizon();
    let states: Vec<DVector<f64>> = (0..=n).map(|t| -&dual_costates[n + 1 - t]).collect();
    let inputs: Vec<DVector<f64>> = (0..n)
        .map(|t| {
            let st = &p.stages[t];
            let inv = &map.inverses[t];
            let tau = map.dual_stage_of(t);
            let beta = dual_inputs[tau].rows(0, map.n_z).into_owned();
            let gamma = dual_inputs[tau].rows(map.n_z, map.n_c[t]).into_owned();
            let p_u = inv.q_zu.transpose() * &st.l_z + &inv.q_u * &st.l_u;
            -&p_u - &inv.q_u * (st.b.transpose() * &dual_states[tau]) + inv.q_zu.transpose() * beta
                - &inv.q_u * (st.h_u.transpose() * gamma)
        })
        .collect();
    (states, inputs)
}

/// Active primal inequality constraints, one index set per stage `0..=N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimalActiveSet {
    pub active: Vec<Vec<usize>>,
}

impl PrimalActiveSet {
    pub fn empty(p: &GeneralCftoc) -> Self {
        PrimalActiveSet {
            active: vec![Vec::new(); p.horizon() + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.active.iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps a primal working set to the dual one: the multiplier of every
/// *inactive* primal constraint is fixed to zero in the dual, active ones
/// stay free. Removing a primal constraint therefore adds a dual fixing and
/// vice versa.
pub fn map_working_set(map: &DualMap, primal: &PrimalActiveSet) -> Result<WorkingSet> {
    if primal.active.len() != map.horizon + 1 {
        return Err(DualizeError::InvalidWorkingSet(
            "active set horizon mismatch".into(),
        ));
    }
    let mut stages = Vec::with_capacity(map.horizon + 1);
    for tau in 0..=map.horizon {
        let t = map.horizon - tau;
        let n_c = map.n_c[t];
        let active = &primal.active[t];
        if active.iter().any(|&i| i >= n_c) {
            return Err(DualizeError::InvalidWorkingSet(format!(
                "constraint index out of range at stage {t}"
            )));
        }
        let mut sw = StageWorkingSet::default();
        for i in 0..map.n_z {
            sw.free.push(i);
        }
        for i in 0..n_c {
            if active.contains(&i) {
                sw.free.push(map.gamma_coord(i));
            } else {
                sw.fixed.push((map.gamma_coord(i), BoundSide::Lower));
            }
        }
        stages.push(sw);
    }
    Ok(WorkingSet { stages })
}

/// Inverse of [`map_working_set`].
pub fn unmap_working_set(map: &DualMap, dual_ws: &WorkingSet) -> PrimalActiveSet {
    let mut active = vec![Vec::new(); map.horizon + 1];
    for (tau, sw) in dual_ws.stages.iter().enumerate() {
        let t = map.horizon - tau;
        let fixed: Vec<usize> = sw.fixed.iter().map(|&(i, _)| i).collect();
        for i in 0..map.n_c[t] {
            if !fixed.contains(&map.gamma_coord(i)) {
                active[t].push(i);
            }
        }
    }
    PrimalActiveSet { active }
}

/// Solves the dual equality-constrained subproblem for a given dual working
/// set: eliminates the fixed multipliers and runs the Riccati recursions.
pub fn dual_search_direction(
    dual: &CftocProblem,
    dual_ws: &WorkingSet,
) -> Result<(UftocProblem, PartitionedData, Trajectory)> {
    let (uftoc, part) = crate::asqp::partition(dual, dual_ws)
        .map_err(|e| DualizeError::InvalidWorkingSet(e.to_string()))?;
    let (_, _, traj) = crate::riccati::solve_default(&uftoc)?;
    Ok((uftoc, part, traj))
}
