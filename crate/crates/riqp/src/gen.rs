//! Deterministic random problem generators.
//!
//! Used by the test suites and the benchmark harness. All generators are
//! pure functions of their seed (ChaCha8 streams), so the same seed always
//! reproduces the same problem bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::asqp::{CftocProblem, CftocStage, WorkingSet};
use crate::dualize::{GeneralCftoc, GeneralStage};
use crate::linalg::SymMat;
use crate::riccati::{UftocProblem, UftocStage};

/// Curvature class of the generated stage costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Convexity {
    /// Every stacked stage cost has smallest eigenvalue ≥ `min_curvature`.
    Strict { min_curvature: f64 },
    /// Positive semidefinite only: the last stage gets a costless input
    /// whose dynamics column is in the null space of the terminal cost, so
    /// the input kernel block of the factorization is singular there.
    Semidefinite,
}

impl Convexity {
    pub fn strict() -> Self {
        Convexity::Strict {
            min_curvature: 1e-3,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// PSD matrix `RᵀR/dim` with optional ridge.
fn random_cost(rng: &mut ChaCha8Rng, dim: usize, ridge: f64) -> DMatrix<f64> {
    if dim == 0 {
        return DMatrix::zeros(0, 0);
    }
    let r = randn(rng, dim, dim);
    r.transpose() * &r / dim as f64 + DMatrix::identity(dim, dim) * ridge
}

/// Random equality-constrained problem.
///
/// Dynamics entries are standard normal scaled by `1/√n_x`; cost blocks are
/// Gram matrices. In semidefinite mode the last stage's final input carries
/// no cost and its dynamics column is projected out of the terminal cost,
/// which makes both the stage cost and the assembled input kernel singular.
pub fn uftoc(seed: u64, horizon: usize, n_x: usize, n_w: usize, convexity: Convexity) -> UftocProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n_x as f64).sqrt();
    let ridge = match convexity {
        Convexity::Strict { min_curvature } => min_curvature,
        Convexity::Semidefinite => 0.0,
    };
    let mut stages = Vec::with_capacity(horizon);
    let mut singular_column: Option<DVector<f64>> = None;
    for t in 0..horizon {
        let a = randn(&mut rng, n_x, n_x) * scale;
        let b = randn(&mut rng, n_x, n_w) * scale;
        let dim = n_x + n_w;
        let mut q = random_cost(&mut rng, dim, ridge);
        let mut l = randn_vec(&mut rng, dim) * 0.3;
        if convexity == Convexity::Semidefinite && t == horizon - 1 && n_w > 0 {
            // Zero out the cost of the last input entirely.
            let j = dim - 1;
            for i in 0..dim {
                q[(i, j)] = 0.0;
                q[(j, i)] = 0.0;
            }
            l[j] = 0.0;
            singular_column = Some(b.column(n_w - 1).into_owned());
        }
        let q = SymMat::symmetrize(q);
        stages.push(UftocStage {
            q_x: SymMat::symmetrize(q.view((0, 0), (n_x, n_x)).into_owned()),
            q_xw: q.view((0, n_x), (n_x, n_w)).into_owned(),
            q_w: SymMat::symmetrize(q.view((n_x, n_x), (n_w, n_w)).into_owned()),
            l_x: l.rows(0, n_x).into_owned(),
            l_w: l.rows(n_x, n_w).into_owned(),
            offset: randn_vec(&mut rng, n_x) * 0.1,
            cost_offset: 0.1 * rng.random_range(-1.0..1.0),
            a,
            b,
        });
    }
    let mut terminal = random_cost(&mut rng, n_x, ridge);
    if let Some(col) = singular_column {
        // Project the terminal cost's rows orthogonal to the singular
        // input's dynamics column so the input kernel block is singular.
        let nrm2 = col.norm_squared();
        if nrm2 > 0.0 {
            let proj = DMatrix::identity(n_x, n_x) - &col * col.transpose() / nrm2;
            let r = randn(&mut rng, n_x, n_x) * &proj;
            terminal = r.transpose() * &r / n_x as f64;
        }
    }
    UftocProblem {
        stages,
        terminal_cost: SymMat::symmetrize(terminal),
        terminal_linear: randn_vec(&mut rng, n_x) * 0.3,
        terminal_offset: 0.1 * rng.random_range(-1.0..1.0),
        initial_state: randn_vec(&mut rng, n_x),
    }
}

/// Random box-constrained problem.
///
/// Bounds are placed relative to the unconstrained optimum so that roughly
/// `active_fraction` of them bind at the solution: a binding bound cuts the
/// corresponding coordinate off from its unconstrained value, the rest get
/// a wide interval around it.
pub fn cftoc(
    seed: u64,
    horizon: usize,
    n_x: usize,
    n_u: usize,
    convexity: Convexity,
    active_fraction: f64,
) -> CftocProblem {
    let base = uftoc(seed, horizon, n_x, n_u, convexity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut stages: Vec<CftocStage> = base
        .stages
        .iter()
        .map(|st| CftocStage {
            a: st.a.clone(),
            b: st.b.clone(),
            offset: st.offset.clone(),
            q_x: st.q_x.clone(),
            q_xu: st.q_xw.clone(),
            q_u: st.q_w.clone(),
            l_x: st.l_x.clone(),
            l_u: st.l_w.clone(),
            cost_offset: st.cost_offset,
            u_min: DVector::from_element(st.input_dim(), f64::NEG_INFINITY),
            u_max: DVector::from_element(st.input_dim(), f64::INFINITY),
        })
        .collect();
    // Reference point for bound placement: the unconstrained optimum when
    // it exists, zero otherwise.
    let reference: Vec<DVector<f64>> = match crate::riccati::solve_default(&base) {
        Ok((_, _, traj)) => traj.inputs,
        Err(_) => (0..horizon).map(|t| DVector::zeros(base.input_dim(t))).collect(),
    };
    for (t, st) in stages.iter_mut().enumerate() {
        for i in 0..st.input_dim() {
            let center = reference[t][i];
            let scale = center.abs().max(1.0);
            let width = scale * rng.random_range(0.5..1.5);
            let gap = scale * rng.random_range(0.05..0.3);
            if rng.random_range(0.0..1.0) < active_fraction {
                if rng.random_range(0.0..1.0) < 0.5 {
                    // Force the upper bound below the unconstrained value.
                    st.u_max[i] = center - gap;
                    st.u_min[i] = center - gap - width;
                } else {
                    st.u_min[i] = center + gap;
                    st.u_max[i] = center + gap + width;
                }
            } else {
                st.u_min[i] = center - width;
                st.u_max[i] = center + width;
            }
        }
    }
    CftocProblem {
        stages,
        terminal_cost: base.terminal_cost,
        terminal_linear: base.terminal_linear,
        terminal_offset: base.terminal_offset,
        initial_state: base.initial_state,
    }
}

/// Random strictly convex general problem plus a strictly feasible
/// reference trajectory (used by oracles as a phase-1-free start).
pub fn general_cftoc(
    seed: u64,
    horizon: usize,
    n_x: usize,
    n_z: usize,
    n_u: usize,
    n_c: usize,
) -> (GeneralCftoc, (Vec<DVector<f64>>, Vec<DVector<f64>>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n_x as f64).sqrt();
    let ridge = 0.1;
    let mut stages = Vec::with_capacity(horizon);
    let reference_inputs: Vec<DVector<f64>> =
        (0..horizon).map(|_| randn_vec(&mut rng, n_u) * 0.5).collect();
    for _ in 0..horizon {
        let dim = n_z + n_u;
        let q = SymMat::symmetrize(random_cost(&mut rng, dim, ridge));
        stages.push(GeneralStage {
            a: randn(&mut rng, n_x, n_x) * scale,
            b: randn(&mut rng, n_x, n_u) * scale,
            offset: randn_vec(&mut rng, n_x) * 0.1,
            m: randn(&mut rng, n_z, n_x),
            q_z: SymMat::symmetrize(q.view((0, 0), (n_z, n_z)).into_owned()),
            q_zu: q.view((0, n_z), (n_z, n_u)).into_owned(),
            q_u: SymMat::symmetrize(q.view((n_z, n_z), (n_u, n_u)).into_owned()),
            l_z: randn_vec(&mut rng, n_z) * 0.3,
            l_u: randn_vec(&mut rng, n_u) * 0.3,
            cost_offset: 0.1 * rng.random_range(-1.0..1.0),
            h_x: randn(&mut rng, n_c, n_x) * 0.5,
            h_u: randn(&mut rng, n_c, n_u) * 0.5,
            h0: DVector::zeros(n_c),
        });
    }
    let mut p = GeneralCftoc {
        stages,
        terminal_output: randn(&mut rng, n_z, n_x),
        terminal_cost: SymMat::symmetrize(random_cost(&mut rng, n_z, ridge)),
        terminal_linear: randn_vec(&mut rng, n_z) * 0.3,
        terminal_offset: 0.1 * rng.random_range(-1.0..1.0),
        terminal_h_x: randn(&mut rng, n_c, n_x) * 0.5,
        terminal_h0: DVector::zeros(n_c),
        initial_state: randn_vec(&mut rng, n_x),
    };
    // Simulate the reference and shift the constraint offsets so that it is
    // strictly feasible with a randomized slack.
    let mut states = vec![p.initial_state.clone()];
    for t in 0..horizon {
        let st = &p.stages[t];
        let next = &st.a * &states[t] + &st.b * &reference_inputs[t] + &st.offset;
        states.push(next);
    }
    for t in 0..horizon {
        let slack = DVector::from_fn(n_c, |_, _| rng.random_range(0.1..0.6));
        let level =
            &p.stages[t].h_x * &states[t] + &p.stages[t].h_u * &reference_inputs[t];
        p.stages[t].h0 = -level - slack;
    }
    let slack = DVector::from_fn(n_c, |_, _| rng.random_range(0.1..0.6));
    p.terminal_h0 = -(&p.terminal_h_x * &states[horizon]) - slack;
    (p, (states, reference_inputs))
}

/// A working set fixing the trailing `k` inputs of every stage at their
/// lower bound.
pub fn fix_trailing_inputs(p: &CftocProblem, k: usize) -> WorkingSet {
    let mut ws = WorkingSet::all_free(p);
    for (t, sw) in ws.stages.iter_mut().enumerate() {
        let n_u = p.input_dim(t);
        for i in n_u - k..n_u {
            let pos = sw.free.iter().position(|&j| j == i).unwrap();
            sw.free.remove(pos);
            sw.fixed.push((i, crate::asqp::BoundSide::Lower));
        }
    }
    ws
}
