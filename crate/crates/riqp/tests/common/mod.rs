//! Shared oracles for the integration tests.
//!
//! Everything here solves the same optimization problems as the library but
//! through a different route: stacked dense KKT systems, condensed
//! Hessians and dense active-set loops. None of it touches the Riccati
//! code paths, so agreement between the two is meaningful evidence.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use riqp::asqp::{BoundSide, CftocProblem, WorkingSet};
use riqp::dualize::GeneralCftoc;
use riqp::lowrank::{DeltaKind, StageChange, WorkingSetDelta};
use riqp::riccati::UftocProblem;

fn add_block(dst: &mut DMatrix<f64>, r: usize, c: usize, m: &DMatrix<f64>) {
    let mut v = dst.view_mut((r, c), (m.nrows(), m.ncols()));
    v += m;
}

fn set_block(dst: &mut DMatrix<f64>, r: usize, c: usize, m: &DMatrix<f64>) {
    dst.view_mut((r, c), (m.nrows(), m.ncols())).copy_from(m);
}

fn add_rows(dst: &mut DVector<f64>, r: usize, v: &DVector<f64>) {
    let mut view = dst.rows_mut(r, v.len());
    view += v;
}

pub struct DenseSolution {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub costates: Vec<DVector<f64>>,
    pub objective: f64,
}

/// Solves the equality-constrained subproblem by assembling the full KKT
/// system over stacked states and inputs and handing it to a dense LU.
pub fn dense_uftoc_solve(p: &UftocProblem) -> Option<DenseSolution> {
    let n = p.horizon();
    let n_x = p.state_dim();
    let input_offsets: Vec<usize> = p
        .stages
        .iter()
        .scan(0usize, |acc, s| {
            let cur = *acc;
            *acc += s.input_dim();
            Some(cur)
        })
        .collect();
    let total_w: usize = p.stages.iter().map(|s| s.input_dim()).sum();
    let nv = (n + 1) * n_x + total_w;
    let ne = (n + 1) * n_x;
    let x_off = |t: usize| t * n_x;
    let w_off = |t: usize| (n + 1) * n_x + input_offsets[t];

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut lin = DVector::<f64>::zeros(nv);
    for (t, st) in p.stages.iter().enumerate() {
        add_block(&mut h, x_off(t), x_off(t), st.q_x.matrix());
        add_block(&mut h, x_off(t), w_off(t), &st.q_xw);
        add_block(&mut h, w_off(t), x_off(t), &st.q_xw.transpose());
        add_block(&mut h, w_off(t), w_off(t), st.q_w.matrix());
        add_rows(&mut lin, x_off(t), &st.l_x);
        add_rows(&mut lin, w_off(t), &st.l_w);
    }
    add_block(&mut h, x_off(n), x_off(n), p.terminal_cost.matrix());
    add_rows(&mut lin, x_off(n), &p.terminal_linear);

    let mut e = DMatrix::<f64>::zeros(ne, nv);
    let mut rhs_e = DVector::<f64>::zeros(ne);
    set_block(&mut e, 0, 0, &DMatrix::identity(n_x, n_x));
    rhs_e.rows_mut(0, n_x).copy_from(&p.initial_state);
    for (t, st) in p.stages.iter().enumerate() {
        let row = (t + 1) * n_x;
        set_block(&mut e, row, x_off(t + 1), &DMatrix::identity(n_x, n_x));
        set_block(&mut e, row, x_off(t), &(-&st.a));
        set_block(&mut e, row, w_off(t), &(-&st.b));
        rhs_e.rows_mut(row, n_x).copy_from(&st.offset);
    }

    let dim = nv + ne;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    set_block(&mut kkt, 0, 0, &h);
    set_block(&mut kkt, 0, nv, &e.transpose());
    set_block(&mut kkt, nv, 0, &e);
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs.rows_mut(0, nv).copy_from(&(-&lin));
    rhs.rows_mut(nv, ne).copy_from(&rhs_e);

    let sol = kkt.lu().solve(&rhs)?;
    let states: Vec<DVector<f64>> = (0..=n)
        .map(|t| sol.rows(x_off(t), n_x).into_owned())
        .collect();
    let inputs: Vec<DVector<f64>> = (0..n)
        .map(|t| sol.rows(w_off(t), p.stages[t].input_dim()).into_owned())
        .collect();
    // The multiplier of equality row block t is the negated costate.
    let costates: Vec<DVector<f64>> = (0..=n)
        .map(|t| -sol.rows(nv + t * n_x, n_x).into_owned())
        .collect();
    let objective = p.objective(&states, &inputs);
    Some(DenseSolution {
        states,
        inputs,
        costates,
        objective,
    })
}

pub struct CondensedQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// `(stage, input)` for every condensed coordinate.
    pub coords: Vec<(usize, usize)>,
}

/// Eliminates the states of a box-constrained problem, leaving a dense QP
/// in the stacked inputs.
pub fn condense(p: &CftocProblem) -> CondensedQp {
    let n = p.horizon();
    let n_x = p.state_dim();
    let total_u = p.total_inputs();
    let offsets: Vec<usize> = p
        .stages
        .iter()
        .scan(0usize, |acc, s| {
            let cur = *acc;
            *acc += s.input_dim();
            Some(cur)
        })
        .collect();

    // x_t = free[t] + gamma[t] · u_stacked.
    let mut free = Vec::with_capacity(n + 1);
    let mut gamma: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    free.push(p.initial_state.clone());
    gamma.push(DMatrix::zeros(n_x, total_u));
    for (t, st) in p.stages.iter().enumerate() {
        let mut g = &st.a * &gamma[t];
        set_block(&mut g, 0, offsets[t], &st.b);
        gamma.push(g);
        free.push(&st.a * &free[t] + &st.offset);
    }

    let mut hess = DMatrix::<f64>::zeros(total_u, total_u);
    let mut lin = DVector::<f64>::zeros(total_u);
    let mut constant = 0.0;
    for (t, st) in p.stages.iter().enumerate() {
        let g = &gamma[t];
        let e = &free[t];
        hess += g.transpose() * (st.q_x.matrix() * g);
        let cross = g.transpose() * &st.q_xu; // total_u × nu
        add_block(&mut hess, 0, offsets[t], &cross);
        add_block(&mut hess, offsets[t], 0, &cross.transpose());
        add_block(&mut hess, offsets[t], offsets[t], st.q_u.matrix());
        lin += g.transpose() * (st.q_x.matrix() * e + &st.l_x);
        add_rows(&mut lin, offsets[t], &(st.q_xu.transpose() * e + &st.l_u));
        constant += 0.5 * e.dot(&(st.q_x.matrix() * e)) + st.l_x.dot(e) + st.cost_offset;
    }
    let g = &gamma[n];
    let e = &free[n];
    hess += g.transpose() * (p.terminal_cost.matrix() * g);
    lin += g.transpose() * (p.terminal_cost.matrix() * e + &p.terminal_linear);
    constant += 0.5 * e.dot(&(p.terminal_cost.matrix() * e))
        + p.terminal_linear.dot(e)
        + p.terminal_offset;

    let mut lower = DVector::zeros(total_u);
    let mut upper = DVector::zeros(total_u);
    let mut coords = Vec::with_capacity(total_u);
    for (t, st) in p.stages.iter().enumerate() {
        for i in 0..st.input_dim() {
            lower[offsets[t] + i] = st.u_min[i];
            upper[offsets[t] + i] = st.u_max[i];
            coords.push((t, i));
        }
    }
    CondensedQp {
        hessian: 0.5 * (&hess + hess.transpose()),
        linear: lin,
        constant,
        lower,
        upper,
        coords,
    }
}

pub struct BoxQpSolution {
    pub point: DVector<f64>,
    pub objective: f64,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
}

/// Textbook primal active-set loop for a strictly convex box QP.
pub fn dense_box_qp(qp: &CondensedQp, tol: f64) -> Option<BoxQpSolution> {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Free,
        Lo,
        Hi,
    }
    let n = qp.linear.len();
    let mut state = vec![State::Free; n];
    let mut u = DVector::zeros(n);
    for i in 0..n {
        u[i] = 0.0f64.clamp(qp.lower[i], qp.upper[i]);
    }
    for _ in 0..(50 * n.max(1) + 10) {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == State::Free).collect();
        let mut cand = u.clone();
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |i, j| {
                qp.hessian[(free[i], free[j])]
            });
            let mut rhs = DVector::from_fn(free.len(), |i, _| -qp.linear[free[i]]);
            for (fi, &i) in free.iter().enumerate() {
                for j in 0..n {
                    if state[j] != State::Free {
                        rhs[fi] -= qp.hessian[(i, j)] * u[j];
                    }
                }
            }
            let sol = hff.cholesky()?.solve(&rhs);
            for (fi, &i) in free.iter().enumerate() {
                cand[i] = sol[fi];
            }
        }
        let mut alpha = 1.0f64;
        let mut blocker: Option<(usize, State)> = None;
        for &i in &free {
            let (bound, st) = if cand[i] > qp.upper[i] + tol {
                (qp.upper[i], State::Hi)
            } else if cand[i] < qp.lower[i] - tol {
                (qp.lower[i], State::Lo)
            } else {
                continue;
            };
            let step = ((bound - u[i]) / (cand[i] - u[i])).clamp(0.0, 1.0);
            if step < alpha {
                alpha = step;
                blocker = Some((i, st));
            }
        }
        match blocker {
            Some((i, st)) => {
                for &j in &free {
                    u[j] += alpha * (cand[j] - u[j]);
                }
                u[i] = match st {
                    State::Lo => qp.lower[i],
                    State::Hi => qp.upper[i],
                    State::Free => unreachable!(),
                };
                state[i] = st;
            }
            None => {
                u = cand;
                let grad = &qp.hessian * &u + &qp.linear;
                let mut worst: Option<(f64, usize)> = None;
                for i in 0..n {
                    let signed = match state[i] {
                        State::Free => continue,
                        State::Lo => grad[i],
                        State::Hi => -grad[i],
                    };
                    if signed < -tol && worst.is_none_or(|(w, _)| signed < w) {
                        worst = Some((signed, i));
                    }
                }
                match worst {
                    Some((_, i)) => state[i] = State::Free,
                    None => {
                        let objective =
                            0.5 * u.dot(&(&qp.hessian * &u)) + qp.linear.dot(&u) + qp.constant;
                        return Some(BoxQpSolution {
                            active_lower: (0..n).filter(|&i| state[i] == State::Lo).collect(),
                            active_upper: (0..n).filter(|&i| state[i] == State::Hi).collect(),
                            point: u,
                            objective,
                        });
                    }
                }
            }
        }
    }
    None
}

/// Reference solve of a box-constrained problem: condensation plus the
/// dense active-set loop above. Returns per-stage inputs and the optimum.
pub fn dense_cftoc_solve(p: &CftocProblem, tol: f64) -> Option<(Vec<DVector<f64>>, f64)> {
    let qp = condense(p);
    let sol = dense_box_qp(&qp, tol)?;
    let mut inputs: Vec<DVector<f64>> = p
        .stages
        .iter()
        .map(|s| DVector::zeros(s.input_dim()))
        .collect();
    for (k, &(t, i)) in qp.coords.iter().enumerate() {
        inputs[t][i] = sol.point[k];
    }
    Some((inputs, sol.objective))
}

/// Stacked-variable layout of a general constrained problem.
pub struct GeneralQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub n_x: usize,
    pub n_z: usize,
    pub horizon: usize,
}

impl GeneralQp {
    pub fn split(
        &self,
        y: &DVector<f64>,
        p: &GeneralCftoc,
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = self.horizon;
        let states = (0..=n)
            .map(|t| y.rows(t * self.n_x, self.n_x).into_owned())
            .collect();
        let mut off = (n + 1) * (self.n_x + self.n_z);
        let mut inputs = Vec::with_capacity(n);
        for t in 0..n {
            let nu = p.stages[t].input_dim();
            inputs.push(y.rows(off, nu).into_owned());
            off += nu;
        }
        (states, inputs)
    }
}

/// Builds the stacked QP data of a general constrained problem over
/// variables `(x_0..x_N, z_0..z_N, u_0..u_{N−1})`.
pub fn stack_general(p: &GeneralCftoc) -> GeneralQp {
    let n = p.horizon();
    let n_x = p.state_dim();
    let n_z = p.output_dim();
    let total_u: usize = p.stages.iter().map(|s| s.input_dim()).sum();
    let x_off = |t: usize| t * n_x;
    let z_off = |t: usize| (n + 1) * n_x + t * n_z;
    let u_offsets: Vec<usize> = p
        .stages
        .iter()
        .scan((n + 1) * (n_x + n_z), |acc, s| {
            let cur = *acc;
            *acc += s.input_dim();
            Some(cur)
        })
        .collect();
    let nv = (n + 1) * (n_x + n_z) + total_u;

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut lin = DVector::<f64>::zeros(nv);
    let mut constant = 0.0;
    for (t, st) in p.stages.iter().enumerate() {
        add_block(&mut h, z_off(t), z_off(t), st.q_z.matrix());
        add_block(&mut h, z_off(t), u_offsets[t], &st.q_zu);
        add_block(&mut h, u_offsets[t], z_off(t), &st.q_zu.transpose());
        add_block(&mut h, u_offsets[t], u_offsets[t], st.q_u.matrix());
        add_rows(&mut lin, z_off(t), &st.l_z);
        add_rows(&mut lin, u_offsets[t], &st.l_u);
        constant += st.cost_offset;
    }
    add_block(&mut h, z_off(n), z_off(n), p.terminal_cost.matrix());
    add_rows(&mut lin, z_off(n), &p.terminal_linear);
    constant += p.terminal_offset;

    // Equalities: initial state, dynamics, output couplings.
    let ne = (n + 1) * n_x + (n + 1) * n_z;
    let mut eq = DMatrix::<f64>::zeros(ne, nv);
    let mut eq_rhs = DVector::<f64>::zeros(ne);
    set_block(&mut eq, 0, 0, &DMatrix::identity(n_x, n_x));
    eq_rhs.rows_mut(0, n_x).copy_from(&p.initial_state);
    for (t, st) in p.stages.iter().enumerate() {
        let row = (t + 1) * n_x;
        set_block(&mut eq, row, x_off(t + 1), &DMatrix::identity(n_x, n_x));
        set_block(&mut eq, row, x_off(t), &(-&st.a));
        set_block(&mut eq, row, u_offsets[t], &(-&st.b));
        eq_rhs.rows_mut(row, n_x).copy_from(&st.offset);
    }
    for t in 0..=n {
        let row = (n + 1) * n_x + t * n_z;
        let m = if t == n {
            &p.terminal_output
        } else {
            &p.stages[t].m
        };
        set_block(&mut eq, row, z_off(t), &DMatrix::identity(n_z, n_z));
        set_block(&mut eq, row, x_off(t), &(-m));
    }

    // Inequalities, as rows of `G y ≤ g`.
    let total_c: usize = (0..=n).map(|t| p.constraint_dim(t)).sum();
    let mut ineq = DMatrix::<f64>::zeros(total_c, nv);
    let mut ineq_rhs = DVector::<f64>::zeros(total_c);
    let mut row = 0;
    for (t, st) in p.stages.iter().enumerate() {
        let nc = st.constraint_dim();
        set_block(&mut ineq, row, x_off(t), &st.h_x);
        set_block(&mut ineq, row, u_offsets[t], &st.h_u);
        ineq_rhs.rows_mut(row, nc).copy_from(&(-&st.h0));
        row += nc;
    }
    let nc = p.terminal_h0.len();
    if nc > 0 {
        set_block(&mut ineq, row, x_off(n), &p.terminal_h_x);
        ineq_rhs.rows_mut(row, nc).copy_from(&(-&p.terminal_h0));
    }

    GeneralQp {
        hessian: h,
        linear: lin,
        constant,
        eq,
        eq_rhs,
        ineq,
        ineq_rhs,
        n_x,
        n_z,
        horizon: n,
    }
}

/// Primal active-set solve of a stacked QP with equalities and general
/// inequalities, starting from a strictly feasible point.
pub fn dense_general_qp(qp: &GeneralQp, start: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let nv = qp.linear.len();
    let ne = qp.eq_rhs.len();
    let m = qp.ineq_rhs.len();
    let mut y = start.clone();
    let mut active: Vec<usize> = Vec::new();
    for _ in 0..(60 * (m + 1)) {
        let na = active.len();
        let dim = nv + ne + na;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        set_block(&mut kkt, 0, 0, &qp.hessian);
        set_block(&mut kkt, 0, nv, &qp.eq.transpose());
        set_block(&mut kkt, nv, 0, &qp.eq);
        for (k, &r) in active.iter().enumerate() {
            let entries: Vec<f64> = qp.ineq.row(r).iter().copied().collect();
            let row = DMatrix::from_row_slice(1, nv, &entries);
            set_block(&mut kkt, 0, nv + ne + k, &row.transpose());
            set_block(&mut kkt, nv + ne + k, 0, &row);
        }
        let mut rhs = DVector::<f64>::zeros(dim);
        rhs.rows_mut(0, nv).copy_from(&(-&qp.linear));
        rhs.rows_mut(nv, ne).copy_from(&qp.eq_rhs);
        for (k, &r) in active.iter().enumerate() {
            rhs[nv + ne + k] = qp.ineq_rhs[r];
        }
        let sol = kkt.lu().solve(&rhs)?;
        let cand = sol.rows(0, nv).into_owned();

        let mut alpha = 1.0f64;
        let mut blocker: Option<usize> = None;
        for r in 0..m {
            if active.contains(&r) {
                continue;
            }
            let gc = (qp.ineq.row(r) * &cand)[0] - qp.ineq_rhs[r];
            if gc <= tol {
                continue;
            }
            let gy = (qp.ineq.row(r) * &y)[0] - qp.ineq_rhs[r];
            let step = ((-gy) / (gc - gy)).clamp(0.0, 1.0);
            if step < alpha {
                alpha = step;
                blocker = Some(r);
            }
        }
        match blocker {
            Some(r) => {
                y += alpha * (&cand - &y);
                active.push(r);
            }
            None => {
                y = cand;
                let mult = sol.rows(nv + ne, na).into_owned();
                let mut worst: Option<(f64, usize)> = None;
                for (k, &r) in active.iter().enumerate() {
                    if mult[k] < -tol && worst.is_none_or(|(w, _)| mult[k] < w) {
                        worst = Some((mult[k], r));
                    }
                }
                match worst {
                    Some((_, r)) => active.retain(|&q| q != r),
                    None => return Some(y),
                }
            }
        }
    }
    None
}

/// Reference solve of a general constrained problem. Returns states,
/// inputs and the optimal objective.
pub fn dense_general_solve(
    p: &GeneralCftoc,
    feasible: &(Vec<DVector<f64>>, Vec<DVector<f64>>),
    tol: f64,
) -> Option<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> {
    let qp = stack_general(p);
    let nv = qp.linear.len();
    let mut start = DVector::zeros(nv);
    let n = p.horizon();
    let (n_x, n_z) = (qp.n_x, qp.n_z);
    for t in 0..=n {
        start.rows_mut(t * n_x, n_x).copy_from(&feasible.0[t]);
        let m = if t == n {
            &p.terminal_output
        } else {
            &p.stages[t].m
        };
        start
            .rows_mut((n + 1) * n_x + t * n_z, n_z)
            .copy_from(&(m * &feasible.0[t]));
    }
    let mut off = (n + 1) * (n_x + n_z);
    for t in 0..n {
        let nu = p.stages[t].input_dim();
        start.rows_mut(off, nu).copy_from(&feasible.1[t]);
        off += nu;
    }
    let y = dense_general_qp(&qp, &start, tol)?;
    let (states, inputs) = qp.split(&y, p);
    let objective = p.objective(&states, &inputs);
    Some((states, inputs, objective))
}

// ───────────────────────── working-set scenarios ─────────────────────────

pub struct DeltaScenario {
    pub pre_ws: WorkingSet,
    pub post_ws: WorkingSet,
    pub pre: UftocProblem,
    pub post: UftocProblem,
    pub delta: WorkingSetDelta,
}

/// Random working set fixing each input independently with probability
/// `fix_prob` (side chosen at random; bounds from `gen::cftoc` are finite).
pub fn random_working_set(rng: &mut ChaCha8Rng, p: &CftocProblem, fix_prob: f64) -> WorkingSet {
    let mut ws = WorkingSet::all_free(p);
    for t in 0..p.horizon() {
        for i in 0..p.input_dim(t) {
            if rng.random_range(0.0..1.0) < fix_prob {
                let side = if rng.random_range(0.0..1.0) < 0.5 {
                    BoundSide::Lower
                } else {
                    BoundSide::Upper
                };
                let pos = ws.stages[t].free.iter().position(|&j| j == i).unwrap();
                ws.stages[t].free.remove(pos);
                ws.stages[t].fixed.push((i, side));
            }
        }
    }
    ws
}

/// Builds a single-kind delta scenario from a parent problem and a random
/// starting working set. Returns `None` when the requested kind has no
/// applicable entries.
pub fn random_delta_scenario(
    rng: &mut ChaCha8Rng,
    parent: &CftocProblem,
    start: &WorkingSet,
    kind: DeltaKind,
    max_changes: usize,
) -> Option<DeltaScenario> {
    let mut post_ws = start.clone();
    let mut per_stage: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    match kind {
        DeltaKind::Remove => {
            let candidates: Vec<(usize, usize)> = start
                .stages
                .iter()
                .enumerate()
                .flat_map(|(t, s)| s.fixed.iter().map(move |&(i, _)| (t, i)))
                .collect();
            if candidates.is_empty() {
                return None;
            }
            let count = rng.random_range(1..=candidates.len().min(max_changes));
            for (t, i) in pick_distinct(rng, &candidates, count) {
                let pos = post_ws.stages[t]
                    .fixed
                    .iter()
                    .position(|&(j, _)| j == i)
                    .unwrap();
                post_ws.stages[t].fixed.remove(pos);
                post_ws.stages[t].free.push(i);
                per_stage.entry(t).or_default().push(0);
            }
            for (&t, list) in per_stage.iter_mut() {
                let k = list.len();
                let new_len = post_ws.stages[t].free.len();
                *list = (new_len - k..new_len).collect();
            }
        }
        DeltaKind::Add => {
            let candidates: Vec<(usize, usize, usize)> = start
                .stages
                .iter()
                .enumerate()
                .flat_map(|(t, s)| s.free.iter().enumerate().map(move |(pos, &i)| (t, i, pos)))
                .collect();
            if candidates.is_empty() {
                return None;
            }
            let count = rng.random_range(1..=candidates.len().min(max_changes));
            for (t, i, pos) in pick_distinct(rng, &candidates, count) {
                let side = if rng.random_range(0.0..1.0) < 0.5 {
                    BoundSide::Lower
                } else {
                    BoundSide::Upper
                };
                post_ws.stages[t].fixed.push((i, side));
                per_stage.entry(t).or_default().push(pos);
            }
            for positions in per_stage.values_mut() {
                positions.sort_unstable();
            }
            for (&t, positions) in per_stage.iter() {
                for &pos in positions.iter().rev() {
                    post_ws.stages[t].free.remove(pos);
                }
            }
        }
    }
    let (pre, _) = riqp::asqp::partition(parent, start).ok()?;
    let (post, _) = riqp::asqp::partition(parent, &post_ws).ok()?;
    let changes = per_stage
        .into_iter()
        .map(|(stage, positions)| StageChange { stage, positions })
        .collect();
    Some(DeltaScenario {
        pre_ws: start.clone(),
        post_ws,
        pre,
        post,
        delta: WorkingSetDelta { kind, changes },
    })
}

fn pick_distinct<T: Clone>(rng: &mut ChaCha8Rng, pool: &[T], count: usize) -> Vec<T> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..count {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..count].iter().map(|&i| pool[i].clone()).collect()
}

// ───────────────────────────── misc helpers ──────────────────────────────

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Median wall time in nanoseconds of `reps` runs of `f`, each on a fresh
/// value produced by `setup` (setup time excluded).
pub fn median_time_ns<S, F: FnMut(S), G: FnMut() -> S>(reps: usize, mut setup: G, mut f: F) -> f64 {
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let s = setup();
            let t0 = std::time::Instant::now();
            f(s);
            t0.elapsed().as_nanos() as f64
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

/// Relative matrix difference `‖a − b‖ / (1 + ‖b‖)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}
