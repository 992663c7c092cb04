//! Primal active-set solver for box-constrained finite-horizon problems.
//!
//! Each iteration solves the equality-constrained subproblem induced by the
//! current working set through the Riccati machinery, takes the longest
//! feasible step towards its solution, and either fixes the blocking input
//! at its bound or frees the fixed input with the most negative multiplier.
//! After the first iteration the factorization is updated through
//! [`crate::lowrank`] instead of being recomputed (unless disabled).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::SymMat;
use crate::lowrank::{
    modify_factorization, refresh_solution, DeltaKind, LowrankError, ModifyOptions, StageChange,
    WorkingSetDelta,
};
use crate::riccati::{
    backward, dual_forward, factorize, forward, kkt_residual, BackwardPass, FixedStage,
    RiccatiError, RiccatiFactorization, Trajectory, UftocProblem, UftocStage,
};

#[derive(Debug, Error)]
pub enum AsError {
    #[error("iteration limit reached after {0} iterations")]
    IterationLimit(usize),
    #[error("subproblem unbounded at stage {stage}: zero-curvature direction without blocking constraint")]
    UnboundedDirection { stage: usize },
    #[error("active-set cycle detected")]
    CycleDetected,
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Lowrank(#[from] LowrankError),
    #[error("invalid problem or working set: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AsError>;

/// One stage of the box-constrained problem.
#[derive(Debug, Clone)]
pub struct CftocStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub q_x: SymMat,
    pub q_xu: DMatrix<f64>,
    pub q_u: SymMat,
    pub l_x: DVector<f64>,
    pub l_u: DVector<f64>,
    pub cost_offset: f64,
    /// Lower/upper input bounds; entries may be infinite.
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl CftocStage {
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct CftocProblem {
    pub stages: Vec<CftocStage>,
    pub terminal_cost: SymMat,
    pub terminal_linear: DVector<f64>,
    pub terminal_offset: f64,
    pub initial_state: DVector<f64>,
}

impl CftocProblem {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn input_dim(&self, t: usize) -> usize {
        self.stages[t].input_dim()
    }

    pub fn total_inputs(&self) -> usize {
        self.stages.iter().map(|s| s.input_dim()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n_x = self.state_dim();
        for (t, st) in self.stages.iter().enumerate() {
            let n_u = st.input_dim();
            if st.a.nrows() != n_x
                || st.a.ncols() != n_x
                || st.b.nrows() != n_x
                || st.offset.len() != n_x
                || st.q_x.dim() != n_x
                || st.q_xu.nrows() != n_x
                || st.q_xu.ncols() != n_u
                || st.q_u.dim() != n_u
                || st.l_x.len() != n_x
                || st.l_u.len() != n_u
                || st.u_min.len() != n_u
                || st.u_max.len() != n_u
            {
                return Err(AsError::Invalid(format!("stage {t}: inconsistent sizes")));
            }
            for i in 0..n_u {
                if !(st.u_min[i] <= st.u_max[i]) {
                    return Err(AsError::Invalid(format!(
                        "stage {t}: empty bound interval on input {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Objective value of a trajectory.
    pub fn objective(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for (t, st) in self.stages.iter().enumerate() {
            let x = &states[t];
            let u = &inputs[t];
            total += 0.5 * (x.dot(&(st.q_x.matrix() * x)) + u.dot(&(st.q_u.matrix() * u)))
                + x.dot(&(&st.q_xu * u))
                + st.l_x.dot(x)
                + st.l_u.dot(u)
                + st.cost_offset;
        }
        let xn = &states[self.horizon()];
        total
            + 0.5 * xn.dot(&(self.terminal_cost.matrix() * xn))
            + self.terminal_linear.dot(xn)
            + self.terminal_offset
    }

    /// Forward-simulates the dynamics for the given inputs.
    pub fn simulate(&self, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut states = Vec::with_capacity(self.horizon() + 1);
        states.push(self.initial_state.clone());
        for (t, st) in self.stages.iter().enumerate() {
            let next = &st.a * &states[t] + &st.b * &inputs[t] + &st.offset;
            states.push(next);
        }
        states
    }
}

/// Which bound a fixed input sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundSide {
    Lower,
    Upper,
}

/// Working set of one stage. Both lists keep insertion order: the free list
/// order is the column order of the reduced input blocks, the fixed list
/// order is the column order of the fixed-part data. Together they realize
/// the stage permutation `u = Π (w; v)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageWorkingSet {
    pub free: Vec<usize>,
    pub fixed: Vec<(usize, BoundSide)>,
}

impl StageWorkingSet {
    pub fn all_free(n_u: usize) -> Self {
        StageWorkingSet {
            free: (0..n_u).collect(),
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkingSet {
    pub stages: Vec<StageWorkingSet>,
}

impl WorkingSet {
    pub fn all_free(p: &CftocProblem) -> Self {
        WorkingSet {
            stages: p
                .stages
                .iter()
                .map(|s| StageWorkingSet::all_free(s.input_dim()))
                .collect(),
        }
    }

    pub fn validate(&self, p: &CftocProblem) -> Result<()> {
        if self.stages.len() != p.horizon() {
            return Err(AsError::Invalid("working set horizon mismatch".into()));
        }
        for (t, ws) in self.stages.iter().enumerate() {
            let n_u = p.input_dim(t);
            let mut seen = vec![false; n_u];
            for &i in ws.free.iter().chain(ws.fixed.iter().map(|(i, _)| i)) {
                if i >= n_u || std::mem::replace(&mut seen[i], true) {
                    return Err(AsError::Invalid(format!(
                        "stage {t}: working set does not partition the inputs"
                    )));
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(AsError::Invalid(format!(
                    "stage {t}: working set does not cover all inputs"
                )));
            }
            for &(i, side) in &ws.fixed {
                let bound = match side {
                    BoundSide::Lower => p.stages[t].u_min[i],
                    BoundSide::Upper => p.stages[t].u_max[i],
                };
                if !bound.is_finite() {
                    return Err(AsError::Invalid(format!(
                        "stage {t}: input {i} fixed at an infinite bound"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total number of fixed inputs.
    pub fn fixed_count(&self) -> usize {
        self.stages.iter().map(|s| s.fixed.len()).sum()
    }

    fn key(&self) -> Vec<(usize, usize, bool)> {
        let mut key: Vec<(usize, usize, bool)> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(t, s)| {
                s.fixed
                    .iter()
                    .map(move |&(i, side)| (t, i, side == BoundSide::Upper))
            })
            .collect();
        key.sort_unstable();
        key
    }
}

/// Fixed-part data of the partition, aligned with the fixed lists of the
/// working set.
#[derive(Debug, Clone)]
pub struct PartitionedData {
    pub fixed: Vec<FixedStage>,
}

/// Splits the problem along the working set into the reduced subproblem
/// over the free inputs and the fixed-part data.
pub fn partition(p: &CftocProblem, ws: &WorkingSet) -> Result<(UftocProblem, PartitionedData)> {
    ws.validate(p)?;
    let mut stages = Vec::with_capacity(p.horizon());
    let mut fixed_parts = Vec::with_capacity(p.horizon());
    for (t, st) in p.stages.iter().enumerate() {
        let sw = &ws.stages[t];
        let free = &sw.free;
        let fixed_idx: Vec<usize> = sw.fixed.iter().map(|&(i, _)| i).collect();
        let values = DVector::from_fn(fixed_idx.len(), |j, _| match sw.fixed[j] {
            (i, BoundSide::Lower) => st.u_min[i],
            (i, BoundSide::Upper) => st.u_max[i],
        });
        let b_v = st.b.select_columns(fixed_idx.iter());
        let q_xv = st.q_xu.select_columns(fixed_idx.iter());
        let q_w = SymMat::symmetrize(DMatrix::from_fn(free.len(), free.len(), |i, j| {
            st.q_u[(free[i], free[j])]
        }));
        let q_wv = DMatrix::from_fn(free.len(), fixed_idx.len(), |i, j| {
            st.q_u[(free[i], fixed_idx[j])]
        });
        let q_v = SymMat::symmetrize(DMatrix::from_fn(fixed_idx.len(), fixed_idx.len(), |i, j| {
            st.q_u[(fixed_idx[i], fixed_idx[j])]
        }));
        let l_w_bar = DVector::from_fn(free.len(), |i, _| st.l_u[free[i]]);
        let l_v = DVector::from_fn(fixed_idx.len(), |i, _| st.l_u[fixed_idx[i]]);
        stages.push(UftocStage {
            a: st.a.clone(),
            b: st.b.select_columns(free.iter()),
            offset: &st.offset + &b_v * &values,
            q_x: st.q_x.clone(),
            q_xw: st.q_xu.select_columns(free.iter()),
            q_w,
            l_x: &st.l_x + &q_xv * &values,
            l_w: &l_w_bar + &q_wv * &values,
            cost_offset: st.cost_offset
                + l_v.dot(&values)
                + 0.5 * values.dot(&(q_v.matrix() * &values)),
        });
        fixed_parts.push(FixedStage {
            b_v,
            q_xv,
            q_wv,
            q_v,
            l_v,
            values,
        });
    }
    Ok((
        UftocProblem {
            stages,
            terminal_cost: p.terminal_cost.clone(),
            terminal_linear: p.terminal_linear.clone(),
            terminal_offset: p.terminal_offset,
            initial_state: p.initial_state.clone(),
        },
        PartitionedData { fixed: fixed_parts },
    ))
}

#[derive(Debug, Clone)]
pub struct AsOptions {
    /// Stationarity/feasibility tolerance.
    pub tol: f64,
    /// Iteration cap; defaults to `50 · Σ n_u`.
    pub max_iter: Option<usize>,
    /// Reuse the factorization across iterations via low-rank updates.
    pub modification: bool,
    /// Change several working-set entries per iteration when possible.
    pub batch_deltas: bool,
    /// Recompute-fallback threshold passed to the modification machinery.
    pub recompute_ratio: f64,
}

impl Default for AsOptions {
    fn default() -> Self {
        AsOptions {
            tol: 1e-8,
            max_iter: None,
            modification: true,
            batch_deltas: false,
            recompute_ratio: 0.5,
        }
    }
}

/// What happened in one iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub kind: Option<DeltaKind>,
    /// `(stage, input index)` pairs changed this iteration.
    pub changes: Vec<(usize, usize)>,
    pub step_length: f64,
    pub modification_dim: usize,
    pub fallback: bool,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct AsSolution {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub costates: Vec<DVector<f64>>,
    /// Signed inequality multipliers per stage (zero on inactive inputs).
    pub ineq_multipliers: Vec<DVector<f64>>,
    pub working_set: WorkingSet,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub objective: f64,
    /// KKT residual of the final reduced subproblem.
    pub residual: f64,
}

/// Decision taken on a candidate subproblem solution.
#[derive(Debug, Clone, PartialEq)]
pub enum StepDecision {
    /// Candidate feasible and all multipliers nonnegative.
    Optimal,
    /// Candidate feasible; free the inputs with negative multipliers.
    Remove { indices: Vec<(usize, usize)> },
    /// Candidate infeasible; largest step and the bounds it hits.
    Blocking {
        alpha: f64,
        hits: Vec<(usize, usize, BoundSide)>,
    },
}

/// Classifies a candidate: feasibility first, then the sign condition of
/// the fixed-input multipliers. `raw_mu` follows the fixed-list order of
/// the working set; the inequality multiplier is `+raw` on lower and
/// `−raw` on upper bounds. Ties break lexicographically in `(stage, input)`.
pub fn optimality_check(
    p: &CftocProblem,
    ws: &WorkingSet,
    current: &[DVector<f64>],
    candidate: &[DVector<f64>],
    raw_mu: &[DVector<f64>],
    opts: &AsOptions,
) -> StepDecision {
    // Ratio test over the free coordinates.
    let mut alpha = 1.0f64;
    let mut hits: Vec<(usize, usize, BoundSide)> = Vec::new();
    for (t, sw) in ws.stages.iter().enumerate() {
        let st = &p.stages[t];
        for &i in &sw.free {
            let cur = current[t][i];
            let cand = candidate[t][i];
            let (bound, side) = if cand > st.u_max[i] + opts.tol {
                (st.u_max[i], BoundSide::Upper)
            } else if cand < st.u_min[i] - opts.tol {
                (st.u_min[i], BoundSide::Lower)
            } else {
                continue;
            };
            let step = ((bound - cur) / (cand - cur)).clamp(0.0, 1.0);
            if step < alpha - 1e-12 {
                alpha = step;
                hits.clear();
                hits.push((t, i, side));
            } else if (step - alpha).abs() <= 1e-12 {
                hits.push((t, i, side));
            }
        }
    }
    if !hits.is_empty() {
        hits.sort_unstable_by_key(|&(t, i, _)| (t, i));
        if !opts.batch_deltas {
            hits.truncate(1);
        }
        return StepDecision::Blocking { alpha, hits };
    }

    // Candidate is feasible: check the multiplier signs.
    let mut worst: Option<(f64, usize, usize)> = None;
    let mut negative: Vec<(f64, usize, usize)> = Vec::new();
    for (t, sw) in ws.stages.iter().enumerate() {
        for (j, &(i, side)) in sw.fixed.iter().enumerate() {
            let signed = match side {
                BoundSide::Lower => raw_mu[t][j],
                BoundSide::Upper => -raw_mu[t][j],
            };
            if signed < -opts.tol {
                negative.push((signed, t, i));
                let better = match worst {
                    None => true,
                    Some((w, wt, wi)) => {
                        signed < w - 1e-15 || ((signed - w).abs() <= 1e-15 && (t, i) < (wt, wi))
                    }
                };
                if better {
                    worst = Some((signed, t, i));
                }
            }
        }
    }
    match worst {
        None => StepDecision::Optimal,
        Some((_, t, i)) => {
            if opts.batch_deltas {
                negative.sort_unstable_by_key(|&(_, t, i)| (t, i));
                StepDecision::Remove {
                    indices: negative.into_iter().map(|(_, t, i)| (t, i)).collect(),
                }
            } else {
                StepDecision::Remove {
                    indices: vec![(t, i)],
                }
            }
        }
    }
}

/// Embeds a reduced solution and the fixed values into full input vectors.
fn embed(
    p: &CftocProblem,
    ws: &WorkingSet,
    traj: &Trajectory,
    part: &PartitionedData,
) -> Vec<DVector<f64>> {
    (0..p.horizon())
        .map(|t| {
            let sw = &ws.stages[t];
            let mut u = DVector::zeros(p.input_dim(t));
            for (j, &i) in sw.free.iter().enumerate() {
                u[i] = traj.inputs[t][j];
            }
            for (j, &(i, _)) in sw.fixed.iter().enumerate() {
                u[i] = part.fixed[t].values[j];
            }
            u
        })
        .collect()
}

/// Start point: fixed inputs at their bounds, free inputs at zero clamped
/// into the bound interval.
fn initial_point(p: &CftocProblem, ws: &WorkingSet, part: &PartitionedData) -> Vec<DVector<f64>> {
    (0..p.horizon())
        .map(|t| {
            let st = &p.stages[t];
            let sw = &ws.stages[t];
            let mut u = DVector::zeros(p.input_dim(t));
            for &i in &sw.free {
                u[i] = 0.0f64.clamp(st.u_min[i], st.u_max[i]);
            }
            for (j, &(i, _)) in sw.fixed.iter().enumerate() {
                u[i] = part.fixed[t].values[j];
            }
            u
        })
        .collect()
}

struct SubproblemState {
    uftoc: UftocProblem,
    part: PartitionedData,
    fact: RiccatiFactorization,
    backward: BackwardPass,
    traj: Trajectory,
}

fn solve_subproblem_fresh(p: &CftocProblem, ws: &WorkingSet, tol: f64) -> Result<SubproblemState> {
    let (uftoc, part) = partition(p, ws)?;
    let fact = factorize(&uftoc, tol)?;
    let bp = backward(&uftoc, &fact, tol).map_err(map_unbounded)?;
    let traj = forward(&uftoc, &fact, &bp);
    Ok(SubproblemState {
        uftoc,
        part,
        fact,
        backward: bp,
        traj,
    })
}

fn map_unbounded(e: RiccatiError) -> AsError {
    match e {
        RiccatiError::InfeasibleOrUnbounded { stage } => AsError::UnboundedDirection { stage },
        other => AsError::Riccati(other),
    }
}

/// Solves the box-constrained problem with a primal active-set method.
pub fn solve(p: &CftocProblem, init_ws: &WorkingSet, opts: &AsOptions) -> Result<AsSolution> {
    p.validate()?;
    let mut ws = init_ws.clone();
    let max_iter = opts.max_iter.unwrap_or(50 * p.total_inputs()).max(1);
    let mod_opts = ModifyOptions {
        tol: crate::linalg::DEFAULT_TOL,
        recompute_ratio: opts.recompute_ratio,
    };

    let mut sub = solve_subproblem_fresh(p, &ws, mod_opts.tol)?;
    let mut u_cur = initial_point(p, &ws, &sub.part);
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut visits: HashMap<Vec<(usize, usize, bool)>, usize> = HashMap::new();
    let mut degenerate_streak = 0usize;

    for iter in 1..=max_iter {
        let candidate = embed(p, &ws, &sub.traj, &sub.part);
        let raw_mu = dual_forward(&sub.part.fixed, &sub.traj);
        match optimality_check(p, &ws, &u_cur, &candidate, &raw_mu, opts) {
            StepDecision::Optimal => {
                let states = p.simulate(&candidate);
                let objective = p.objective(&states, &candidate);
                let mut multipliers: Vec<DVector<f64>> = (0..p.horizon())
                    .map(|t| DVector::zeros(p.input_dim(t)))
                    .collect();
                for (t, sw) in ws.stages.iter().enumerate() {
                    for (j, &(i, side)) in sw.fixed.iter().enumerate() {
                        multipliers[t][i] = match side {
                            BoundSide::Lower => raw_mu[t][j],
                            BoundSide::Upper => -raw_mu[t][j],
                        };
                    }
                }
                let residual = kkt_residual(&sub.uftoc, &sub.traj);
                return Ok(AsSolution {
                    inputs: candidate,
                    states,
                    costates: sub.traj.costates.clone(),
                    ineq_multipliers: multipliers,
                    working_set: ws,
                    iterations: iter,
                    history,
                    objective,
                    residual,
                });
            }
            StepDecision::Remove { indices } => {
                // Full step to the subproblem optimum, then free the inputs.
                u_cur = candidate;
                let mut per_stage: HashMap<usize, usize> = HashMap::new();
                for &(t, i) in &indices {
                    let pos = ws.stages[t]
                        .fixed
                        .iter()
                        .position(|&(idx, _)| idx == i)
                        .expect("removal index is fixed");
                    ws.stages[t].fixed.remove(pos);
                    ws.stages[t].free.push(i);
                    *per_stage.entry(t).or_insert(0) += 1;
                }
                let changes: Vec<StageChange> = per_stage
                    .iter()
                    .map(|(&t, &k)| {
                        let new_len = ws.stages[t].free.len();
                        StageChange {
                            stage: t,
                            positions: (new_len - k..new_len).collect(),
                        }
                    })
                    .collect();
                let delta = WorkingSetDelta {
                    kind: DeltaKind::Remove,
                    changes,
                };
                let record = apply_delta(p, &ws, &mut sub, delta, opts, &mod_opts)?;
                history.push(IterationRecord {
                    step_length: 1.0,
                    objective: current_objective(p, &u_cur),
                    changes: indices,
                    ..record
                });
                degenerate_streak = 0;
            }
            StepDecision::Blocking { alpha, hits } => {
                // Partial step on the free coordinates, then fix the blockers.
                for (t, sw) in ws.stages.iter().enumerate() {
                    for &i in &sw.free {
                        u_cur[t][i] += alpha * (candidate[t][i] - u_cur[t][i]);
                    }
                }
                for &(t, i, side) in &hits {
                    u_cur[t][i] = match side {
                        BoundSide::Lower => p.stages[t].u_min[i],
                        BoundSide::Upper => p.stages[t].u_max[i],
                    };
                }
                let mut per_stage: HashMap<usize, Vec<usize>> = HashMap::new();
                for &(t, i, side) in &hits {
                    let pos = ws.stages[t]
                        .free
                        .iter()
                        .position(|&idx| idx == i)
                        .expect("blocking index is free");
                    per_stage.entry(t).or_default().push(pos);
                    ws.stages[t].fixed.push((i, side));
                }
                for (&t, positions) in per_stage.iter_mut() {
                    positions.sort_unstable();
                    for &pos in positions.iter().rev() {
                        ws.stages[t].free.remove(pos);
                    }
                }
                let changes: Vec<StageChange> = per_stage
                    .into_iter()
                    .map(|(stage, positions)| StageChange { stage, positions })
                    .collect();
                let delta = WorkingSetDelta {
                    kind: DeltaKind::Add,
                    changes,
                };
                let record = apply_delta(p, &ws, &mut sub, delta, opts, &mod_opts)?;
                history.push(IterationRecord {
                    step_length: alpha,
                    objective: current_objective(p, &u_cur),
                    changes: hits.iter().map(|&(t, i, _)| (t, i)).collect(),
                    ..record
                });
                if alpha <= 1e-12 {
                    degenerate_streak += 1;
                    let count = visits.entry(ws.key()).or_insert(0);
                    *count += 1;
                    if *count > 2 || degenerate_streak > 2 * p.total_inputs().max(1) {
                        return Err(AsError::CycleDetected);
                    }
                } else {
                    degenerate_streak = 0;
                }
            }
        }
    }
    Err(AsError::IterationLimit(max_iter))
}

fn current_objective(p: &CftocProblem, u: &[DVector<f64>]) -> f64 {
    let states = p.simulate(u);
    p.objective(&states, u)
}

/// Re-solves the subproblem after a working-set change, either through the
/// low-rank modification path or from scratch.
fn apply_delta(
    p: &CftocProblem,
    ws: &WorkingSet,
    sub: &mut SubproblemState,
    delta: WorkingSetDelta,
    opts: &AsOptions,
    mod_opts: &ModifyOptions,
) -> Result<IterationRecord> {
    let kind = delta.kind;
    if opts.modification {
        let (post_uftoc, post_part) = partition(p, ws)?;
        let t_m = delta.max_stage().expect("delta is nonempty");
        let report = modify_factorization(&sub.uftoc, &post_uftoc, &mut sub.fact, &delta, mod_opts)?;
        #[cfg(debug_assertions)]
        {
            // Continuous oracle: the modified factorization must match a
            // fresh one for the current subproblem.
            let fresh = factorize(&post_uftoc, mod_opts.tol)?;
            for t in 0..post_uftoc.horizon() {
                let diff = (sub.fact.cost_to_go[t].matrix() - fresh.cost_to_go[t].matrix()).norm();
                debug_assert!(
                    diff <= 1e-8 * (1.0 + fresh.cost_to_go[t].norm()),
                    "modified factorization drifted from recomputed one at stage {t}: {diff:.3e}"
                );
            }
        }
        let (bp, traj) = refresh_solution(&post_uftoc, &sub.fact, &sub.backward, t_m, mod_opts.tol)
            .map_err(|e| match e {
                LowrankError::Riccati(r) => map_unbounded(r),
                other => AsError::Lowrank(other),
            })?;
        sub.uftoc = post_uftoc;
        sub.part = post_part;
        sub.backward = bp;
        sub.traj = traj;
        Ok(IterationRecord {
            kind: Some(kind),
            changes: Vec::new(),
            step_length: 0.0,
            modification_dim: report.max_dim(),
            fallback: report.fallback_stage.is_some(),
            objective: 0.0,
        })
    } else {
        *sub = solve_subproblem_fresh(p, ws, mod_opts.tol)?;
        Ok(IterationRecord {
            kind: Some(kind),
            changes: Vec::new(),
            step_length: 0.0,
            modification_dim: 0,
            fallback: false,
            objective: 0.0,
        })
    }
}
