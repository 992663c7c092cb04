//! Equality-constrained finite-horizon subproblem and its Riccati solution.
//!
//! The subproblem minimizes a stage-wise quadratic cost over states and the
//! free part of the control inputs, subject to affine dynamics and a fixed
//! initial state. Its KKT system is solved by a backward factorization that
//! produces cost-to-go matrices and feedback gains, followed by backward and
//! forward substitutions. Input weight blocks are allowed to be singular: the
//! factorization then stores an eigendecomposition and uses minimum-norm
//! solves, and the backward pass checks that right-hand sides stay in range.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{factor_psd, LinalgError, PsdFactorization, SymMat, DEFAULT_TOL};

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: LinalgError,
    },
    #[error("dimension mismatch at stage {stage}: {what}")]
    Dimension { stage: usize, what: String },
    #[error("KKT system is infeasible or unbounded at stage {stage}")]
    InfeasibleOrUnbounded { stage: usize },
}

pub type Result<T> = std::result::Result<T, RiccatiError>;

/// One stage of the subproblem: dynamics `x⁺ = A x + B w + offset` and cost
/// `½ (x,w)ᵀ [[q_x, q_xw],[q_xwᵀ, q_w]] (x,w) + l_xᵀx + l_wᵀw + cost_offset`.
#[derive(Debug, Clone)]
pub struct UftocStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub q_x: SymMat,
    pub q_xw: DMatrix<f64>,
    pub q_w: SymMat,
    pub l_x: DVector<f64>,
    pub l_w: DVector<f64>,
    pub cost_offset: f64,
}

impl UftocStage {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Stacked stage cost matrix `[[q_x, q_xw],[q_xwᵀ, q_w]]`.
    pub fn stacked_cost(&self) -> SymMat {
        let nx = self.q_x.dim();
        let nw = self.q_w.dim();
        let mut m = DMatrix::zeros(nx + nw, nx + nw);
        m.view_mut((0, 0), (nx, nx)).copy_from(self.q_x.matrix());
        m.view_mut((0, nx), (nx, nw)).copy_from(&self.q_xw);
        m.view_mut((nx, 0), (nw, nx))
            .copy_from(&self.q_xw.transpose());
        m.view_mut((nx, nx), (nw, nw)).copy_from(self.q_w.matrix());
        SymMat::symmetrize(m)
    }

    fn check_dims(&self, stage: usize, n_x: usize) -> Result<()> {
        let n_w = self.input_dim();
        let ok = self.a.nrows() == n_x
            && self.a.ncols() == n_x
            && self.b.nrows() == n_x
            && self.offset.len() == n_x
            && self.q_x.dim() == n_x
            && self.q_xw.nrows() == n_x
            && self.q_xw.ncols() == n_w
            && self.q_w.dim() == n_w
            && self.l_x.len() == n_x
            && self.l_w.len() == n_w;
        if ok {
            Ok(())
        } else {
            Err(RiccatiError::Dimension {
                stage,
                what: "inconsistent stage block sizes".into(),
            })
        }
    }
}

/// The full subproblem over horizon `N` with terminal cost and fixed
/// initial state. Input dimensions may vary per stage.
#[derive(Debug, Clone)]
pub struct UftocProblem {
    pub stages: Vec<UftocStage>,
    pub terminal_cost: SymMat,
    pub terminal_linear: DVector<f64>,
    pub terminal_offset: f64,
    pub initial_state: DVector<f64>,
}

impl UftocProblem {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn input_dim(&self, t: usize) -> usize {
        self.stages[t].input_dim()
    }

    pub fn check_dims(&self) -> Result<()> {
        let n_x = self.state_dim();
        for (t, st) in self.stages.iter().enumerate() {
            st.check_dims(t, n_x)?;
        }
        if self.terminal_cost.dim() != n_x || self.terminal_linear.len() != n_x {
            return Err(RiccatiError::Dimension {
                stage: self.horizon(),
                what: "terminal block size".into(),
            });
        }
        Ok(())
    }

    /// Full validation including PSD checks of every stacked stage cost.
    pub fn validate(&self, tol: f64) -> Result<()> {
        self.check_dims()?;
        for (t, st) in self.stages.iter().enumerate() {
            st.stacked_cost()
                .validate_psd(tol)
                .map_err(|source| RiccatiError::Stage { stage: t, source })?;
        }
        self.terminal_cost
            .validate_psd(tol)
            .map_err(|source| RiccatiError::Stage {
                stage: self.horizon(),
                source,
            })?;
        Ok(())
    }

    /// Objective value of a (not necessarily optimal) trajectory.
    pub fn objective(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for (t, st) in self.stages.iter().enumerate() {
            let x = &states[t];
            let w = &inputs[t];
            total += 0.5 * (x.dot(&(st.q_x.matrix() * x)) + w.dot(&(st.q_w.matrix() * w)))
                + x.dot(&(&st.q_xw * w))
                + st.l_x.dot(x)
                + st.l_w.dot(w)
                + st.cost_offset;
        }
        let xn = &states[self.horizon()];
        total
            + 0.5 * xn.dot(&(self.terminal_cost.matrix() * xn))
            + self.terminal_linear.dot(xn)
            + self.terminal_offset
    }
}

/// Per-stage blocks of the factorized KKT system.
///
/// `state_block`, `cross_block` and `input_block` partition the stage kernel
/// matrix assembled from the stage cost and the downstream cost-to-go;
/// `gain` solves `input_block · gain = −cross_blockᵀ`.
#[derive(Debug, Clone)]
pub struct StageFactors {
    pub state_block: SymMat,
    pub cross_block: DMatrix<f64>,
    pub input_block: SymMat,
    pub gain: DMatrix<f64>,
    pub input_fact: PsdFactorization,
}

impl StageFactors {
    pub fn is_singular(&self) -> bool {
        self.input_fact.numeric_rank() < self.input_block.dim()
    }
}

/// Result of the backward factorization: cost-to-go matrices for every
/// stage boundary plus the per-stage factor blocks.
#[derive(Debug, Clone)]
pub struct RiccatiFactorization {
    /// Cost-to-go Hessians, `horizon + 1` entries.
    pub cost_to_go: Vec<SymMat>,
    pub stages: Vec<StageFactors>,
}

impl RiccatiFactorization {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Stages whose input block is numerically singular.
    pub fn singular_stages(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_singular())
            .map(|(t, _)| t)
            .collect()
    }
}

/// Backward substitution output: adjoint vectors, feedforward terms and the
/// accumulated constant of the cost-to-go.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// `horizon + 1` adjoint vectors.
    pub adjoint: Vec<DVector<f64>>,
    /// Feedforward input terms, entry `t` belongs to stage `t`.
    pub feedforward: Vec<DVector<f64>>,
    /// Constant part of the cost-to-go, `horizon + 1` entries.
    pub value_const: Vec<f64>,
}

/// Primal/dual trajectory of the subproblem.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub costates: Vec<DVector<f64>>,
}

/// Fixed-input data of one stage, as produced by the working-set partition.
/// Needed to evaluate the multipliers of the temporarily fixed inputs.
#[derive(Debug, Clone)]
pub struct FixedStage {
    pub b_v: DMatrix<f64>,
    pub q_xv: DMatrix<f64>,
    pub q_wv: DMatrix<f64>,
    pub q_v: SymMat,
    pub l_v: DVector<f64>,
    /// Bound values the fixed inputs are held at.
    pub values: DVector<f64>,
}

/// Computes the Riccati factorization (cost-to-go matrices and gains).
///
/// Singular input blocks are factored with the eigen fallback and the gain
/// is the minimum-norm solution; `singular_stages` on the result reports
/// which stages were affected.
pub fn factorize(p: &UftocProblem, tol: f64) -> Result<RiccatiFactorization> {
    p.check_dims()?;
    let n = p.horizon();
    let mut cost_to_go = vec![SymMat::zeros(0); n + 1];
    let mut stages: Vec<Option<StageFactors>> = (0..n).map(|_| None).collect();
    cost_to_go[n] = p.terminal_cost.clone();
    for t in (0..n).rev() {
        let factors = factorize_stage(&p.stages[t], &cost_to_go[t + 1], tol)
            .map_err(|source| RiccatiError::Stage { stage: t, source })?;
        cost_to_go[t] = cost_to_go_from(&factors);
        stages[t] = Some(factors);
    }
    Ok(RiccatiFactorization {
        cost_to_go,
        stages: stages.into_iter().map(Option::unwrap).collect(),
    })
}

/// One step of the backward factorization.
pub(crate) fn factorize_stage(
    st: &UftocStage,
    p_next: &SymMat,
    tol: f64,
) -> std::result::Result<StageFactors, LinalgError> {
    let pa = p_next.matrix() * &st.a;
    let pb = p_next.matrix() * &st.b;
    let state_block = SymMat::symmetrize(st.q_x.matrix() + st.a.transpose() * &pa);
    let input_block = SymMat::symmetrize(st.q_w.matrix() + st.b.transpose() * &pb);
    let cross_block = &st.q_xw + st.a.transpose() * &pb;
    let input_fact = factor_psd(&input_block, tol)?;
    let gain = input_fact.solve(&(-cross_block.transpose()))?;
    Ok(StageFactors {
        state_block,
        cross_block,
        input_block,
        gain,
        input_fact,
    })
}

/// `P = F − Kᵀ G K` for a stage's factors.
pub(crate) fn cost_to_go_from(f: &StageFactors) -> SymMat {
    SymMat::symmetrize(
        f.state_block.matrix() - f.gain.transpose() * f.input_block.matrix() * &f.gain,
    )
}

/// Backward recursion for the linear terms.
///
/// At stages with a singular input block the feedforward solve is checked
/// for consistency; an out-of-range right-hand side means the KKT system has
/// no solution and is reported as `InfeasibleOrUnbounded`.
pub fn backward(p: &UftocProblem, f: &RiccatiFactorization, tol: f64) -> Result<BackwardPass> {
    let n = p.horizon();
    let mut bp = BackwardPass {
        adjoint: vec![DVector::zeros(0); n + 1],
        feedforward: vec![DVector::zeros(0); n],
        value_const: vec![0.0; n + 1],
    };
    bp.adjoint[n] = -&p.terminal_linear;
    bp.value_const[n] = p.terminal_offset;
    for t in (0..n).rev() {
        backward_stage(p, f, &mut bp, t, tol)?;
    }
    Ok(bp)
}

/// Recomputes one backward stage of `bp` in place.
pub(crate) fn backward_stage(
    p: &UftocProblem,
    f: &RiccatiFactorization,
    bp: &mut BackwardPass,
    t: usize,
    tol: f64,
) -> Result<()> {
    let st = &p.stages[t];
    let factors = &f.stages[t];
    let p_next = &f.cost_to_go[t + 1];
    let pa_v = p_next.matrix() * &st.offset;
    let adj_shift = &bp.adjoint[t + 1] - &pa_v;
    let rhs = st.b.transpose() * &adj_shift - &st.l_w;
    let kff = factors
        .input_fact
        .solve_vec(&rhs)
        .map_err(|source| RiccatiError::Stage { stage: t, source })?;
    if factors.is_singular() {
        let resid = (factors.input_block.matrix() * &kff - &rhs).norm();
        if resid > tol.max(1e-8) * (1.0 + rhs.norm()) {
            return Err(RiccatiError::InfeasibleOrUnbounded { stage: t });
        }
    }
    bp.adjoint[t] = st.a.transpose() * &adj_shift - &factors.cross_block * &kff - &st.l_x;
    bp.value_const[t] = bp.value_const[t + 1]
        + st.cost_offset
        + 0.5 * st.offset.dot(&pa_v)
        - bp.adjoint[t + 1].dot(&st.offset)
        - 0.5 * kff.dot(&(factors.input_block.matrix() * &kff));
    bp.feedforward[t] = kff;
    Ok(())
}

/// Forward recursion producing states, inputs and costates.
pub fn forward(p: &UftocProblem, f: &RiccatiFactorization, bp: &BackwardPass) -> Trajectory {
    let n = p.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    let mut costates = Vec::with_capacity(n + 1);
    states.push(p.initial_state.clone());
    for t in 0..n {
        let st = &p.stages[t];
        let x = states[t].clone();
        let w = &bp.feedforward[t] + &f.stages[t].gain * &x;
        let x_next = &st.a * &x + &st.b * &w + &st.offset;
        costates.push(f.cost_to_go[t].matrix() * &x - &bp.adjoint[t]);
        states.push(x_next);
        inputs.push(w);
    }
    costates.push(f.cost_to_go[n].matrix() * &states[n] - &bp.adjoint[n]);
    Trajectory {
        states,
        inputs,
        costates,
    }
}

/// Multipliers of the temporarily fixed inputs (zero on the free part).
///
/// Entry `t` is the gradient of the stage Lagrangian with respect to the
/// fixed inputs; the sign convention relative to the inequality multipliers
/// is resolved by the active-set layer based on the bound side.
pub fn dual_forward(fixed: &[FixedStage], traj: &Trajectory) -> Vec<DVector<f64>> {
    fixed
        .iter()
        .enumerate()
        .map(|(t, fp)| {
            &fp.l_v
                + fp.q_xv.transpose() * &traj.states[t]
                + fp.q_wv.transpose() * &traj.inputs[t]
                + fp.q_v.matrix() * &fp.values
                + fp.b_v.transpose() * &traj.costates[t + 1]
        })
        .collect()
}

/// Euclidean norm of the KKT residual of the subproblem.
///
/// Assembled directly from problem data and the trajectory, independently of
/// the factorization path: stationarity in the inputs and states, the
/// terminal condition, the dynamics defects and the initial state.
pub fn kkt_residual(p: &UftocProblem, traj: &Trajectory) -> f64 {
    let n = p.horizon();
    let mut acc = 0.0;
    acc += (&traj.states[0] - &p.initial_state).norm_squared();
    for t in 0..n {
        let st = &p.stages[t];
        let x = &traj.states[t];
        let w = &traj.inputs[t];
        let dyn_res = &traj.states[t + 1] - (&st.a * x + &st.b * w + &st.offset);
        acc += dyn_res.norm_squared();
        let stat_w = st.q_xw.transpose() * x
            + st.q_w.matrix() * w
            + &st.l_w
            + st.b.transpose() * &traj.costates[t + 1];
        acc += stat_w.norm_squared();
        let stat_x = st.q_x.matrix() * x
            + &st.q_xw * w
            + &st.l_x
            + st.a.transpose() * &traj.costates[t + 1]
            - &traj.costates[t];
        acc += stat_x.norm_squared();
    }
    let terminal =
        p.terminal_cost.matrix() * &traj.states[n] + &p.terminal_linear - &traj.costates[n];
    acc += terminal.norm_squared();
    acc.sqrt()
}

/// Convenience: factorize, backward and forward in one call.
pub fn solve(
    p: &UftocProblem,
    tol: f64,
) -> Result<(RiccatiFactorization, BackwardPass, Trajectory)> {
    let f = factorize(p, tol)?;
    let bp = backward(p, &f, tol)?;
    let traj = forward(p, &f, &bp);
    Ok((f, bp, traj))
}

/// Default-tolerance shortcut.
pub fn solve_default(p: &UftocProblem) -> Result<(RiccatiFactorization, BackwardPass, Trajectory)> {
    solve(p, DEFAULT_TOL)
}
