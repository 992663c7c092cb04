//! Low-rank modification of an existing Riccati factorization.
//!
//! When the working set of an active-set iteration changes, the cost-to-go
//! matrices of the factorization change by a signed low-rank term
//! `P̃ = P ∓ V·C†·Vᵀ`. This module propagates such terms stage by stage,
//! applies the working-set removal/addition steps that seed or enlarge them,
//! and orchestrates the full factorization update: stages above the largest
//! changed index are left untouched, and a configurable cumulative-rank
//! threshold falls back to recomputing the remaining stages from scratch.
//!
//! Sign conventions are strict: downdate steps consume the pre-modification
//! factor blocks, update steps consume the post-modification blocks.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{
    chol_append_columns, chol_delete_columns, chol_rank1_downdate, chol_rank1_update, factor_psd,
    smw_solve, LinalgError, ModSign, PsdFactorization, SymMat,
};
use crate::riccati::{
    backward_stage, cost_to_go_from, factorize_stage, forward, BackwardPass, RiccatiError,
    RiccatiFactorization, StageFactors, Trajectory, UftocProblem,
};

/// Tolerance for the range-membership condition of modification pairs.
const RANGE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LowrankError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("range condition violated (residual {residual:.3e})")]
    RangeConditionViolated { residual: f64 },
    #[error("invalid working-set delta: {0}")]
    InvalidDelta(String),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("stage {stage}: {source}")]
    AtStage {
        stage: usize,
        #[source]
        source: Box<LowrankError>,
    },
}

pub type Result<T> = std::result::Result<T, LowrankError>;

fn at_stage(stage: usize) -> impl Fn(LowrankError) -> LowrankError {
    move |source| LowrankError::AtStage {
        stage,
        source: Box::new(source),
    }
}

/// A signed low-rank term `V·C†·Vᵀ` attached to one cost-to-go matrix.
#[derive(Debug, Clone)]
pub struct Modification {
    pub sign: ModSign,
    pub v: DMatrix<f64>,
    pub c: SymMat,
    pub c_fact: PsdFactorization,
}

impl Modification {
    /// Builds the pair and verifies the range condition `Vᵀ ∈ R(C)`.
    pub fn new(sign: ModSign, v: DMatrix<f64>, c: SymMat, tol: f64) -> Result<Self> {
        if v.ncols() != c.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: c.dim(),
                got: v.ncols(),
            }
            .into());
        }
        let c_fact = factor_psd(&c, tol)?;
        if v.ncols() > 0 {
            let vt = v.transpose();
            let x = c_fact.solve(&vt)?;
            let residual = (c.matrix() * x - &vt).norm();
            if residual > RANGE_TOL * (1.0 + vt.norm()) {
                return Err(LowrankError::RangeConditionViolated { residual });
            }
        }
        Ok(Modification { sign, v, c, c_fact })
    }

    /// Number of columns of `V` (the dimension `k̃` of the modification).
    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    /// Numeric rank of the inner matrix `C`.
    pub fn numeric_rank(&self) -> usize {
        self.c_fact.numeric_rank()
    }

    /// The dense term `V·C†·Vᵀ`.
    pub fn term(&self) -> SymMat {
        if self.dim() == 0 {
            return SymMat::zeros(self.v.nrows());
        }
        let x = self.c_fact.solve(&self.v.transpose()).expect("dims checked");
        SymMat::symmetrize(&self.v * x)
    }

    /// `P ∓ V·C†·Vᵀ` depending on the sign.
    pub fn apply_to(&self, p: &SymMat) -> SymMat {
        SymMat::symmetrize(p.matrix() + self.sign.as_f64() * self.term().matrix())
    }
}

/// Which way the working set changes; all stages of one delta share the
/// kind, mixed changes must be applied as two sequential deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaKind {
    /// Constraints leave the working set: inputs become free, blocks grow.
    Remove,
    /// Constraints enter the working set: inputs become fixed, blocks shrink.
    Add,
}

/// Input-column positions changed at one stage.
///
/// For `Remove` the positions refer to the post-change problem and must be
/// the trailing columns (freed inputs are appended at the end); for `Add`
/// they refer to the pre-change problem and may be anywhere.
#[derive(Debug, Clone)]
pub struct StageChange {
    pub stage: usize,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct WorkingSetDelta {
    pub kind: DeltaKind,
    pub changes: Vec<StageChange>,
}

impl WorkingSetDelta {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }

    /// Largest changed stage.
    pub fn max_stage(&self) -> Option<usize> {
        self.changes.iter().map(|c| c.stage).max()
    }

    fn validate(&self, pre: &UftocProblem, post: &UftocProblem) -> Result<()> {
        let err = |what: &str| Err(LowrankError::InvalidDelta(what.into()));
        if pre.horizon() != post.horizon() || pre.state_dim() != post.state_dim() {
            return err("pre and post problems have different shapes");
        }
        let mut seen = vec![false; pre.horizon()];
        for ch in &self.changes {
            if ch.stage >= pre.horizon() {
                return err("change stage out of range");
            }
            if std::mem::replace(&mut seen[ch.stage], true) {
                return err("duplicate stage in delta");
            }
            if ch.positions.is_empty() {
                return err("empty position list");
            }
            if ch.positions.windows(2).any(|w| w[0] >= w[1]) {
                return err("positions must be sorted and unique");
            }
            let k = ch.positions.len();
            let (pre_nw, post_nw) = (pre.input_dim(ch.stage), post.input_dim(ch.stage));
            match self.kind {
                DeltaKind::Remove => {
                    if post_nw != pre_nw + k {
                        return err("post input dimension does not match removal count");
                    }
                    if ch.positions.iter().enumerate().any(|(i, &p)| p != pre_nw + i) {
                        return err("freed inputs must occupy the trailing columns");
                    }
                }
                DeltaKind::Add => {
                    if pre_nw != post_nw + k {
                        return err("post input dimension does not match addition count");
                    }
                    if *ch.positions.last().unwrap() >= pre_nw {
                        return err("fixed input position out of range");
                    }
                }
            }
        }
        for t in 0..pre.horizon() {
            if !seen[t] && pre.input_dim(t) != post.input_dim(t) {
                return err("input dimension changed at a stage not listed in the delta");
            }
        }
        Ok(())
    }
}

/// Data of the columns appended to a stage when inputs are freed: the new
/// dynamics columns and the new rows/columns of the stage cost.
#[derive(Debug, Clone)]
pub struct AppendedColumns {
    pub b: DMatrix<f64>,
    pub q_xw: DMatrix<f64>,
    /// Coupling of the old input block with the new columns.
    pub q_w_cross: DMatrix<f64>,
    pub q_w_corner: SymMat,
}

impl AppendedColumns {
    /// Extracts the appended trailing columns of a post-change stage.
    pub fn from_post_stage(st: &crate::riccati::UftocStage, pre_nw: usize) -> Self {
        let k = st.input_dim() - pre_nw;
        AppendedColumns {
            b: st.b.columns(pre_nw, k).into_owned(),
            q_xw: st.q_xw.columns(pre_nw, k).into_owned(),
            q_w_cross: st.q_w.view((0, pre_nw), (pre_nw, k)).into_owned(),
            q_w_corner: SymMat::symmetrize(st.q_w.view((pre_nw, pre_nw), (k, k)).into_owned()),
        }
    }
}

/// Per-stage record of a factorization update.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: usize,
    /// Dimension of the modification produced at this stage.
    pub modification_dim: usize,
    /// Numeric rank of its inner matrix.
    pub modification_rank: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ModifyReport {
    pub stages: Vec<StageReport>,
    /// Stage at which the cumulative rank crossed the recompute threshold,
    /// triggering a fresh partial factorization; `None` if never.
    pub fallback_stage: Option<usize>,
}

impl ModifyReport {
    pub fn max_dim(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.modification_dim)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ModifyOptions {
    pub tol: f64,
    /// Cumulative modification dimension at which the remaining stages are
    /// recomputed from scratch, as a fraction of the state dimension.
    pub recompute_ratio: f64,
}

impl Default for ModifyOptions {
    fn default() -> Self {
        ModifyOptions {
            tol: crate::linalg::DEFAULT_TOL,
            recompute_ratio: 0.5,
        }
    }
}

impl ModifyOptions {
    /// Disables the recompute fallback entirely.
    pub fn never_recompute() -> Self {
        ModifyOptions {
            recompute_ratio: f64::INFINITY,
            ..Default::default()
        }
    }
}

/// Refreshed factorization of `G − U·C†·Uᵀ`: rank-1 downdate chain on a
/// Cholesky factor, explicit refactorization otherwise or on breakdown.
fn refact_downdate(
    fact: &PsdFactorization,
    u: &DMatrix<f64>,
    c_fact: &PsdFactorization,
    modified: &SymMat,
    tol: f64,
) -> Result<PsdFactorization> {
    if fact.is_cholesky() {
        let z = c_fact.pseudo_inverse_sqrt();
        let ut = u * z;
        let mut cur = fact.clone();
        let mut ok = true;
        for j in 0..ut.ncols() {
            match chol_rank1_downdate(&cur, &ut.column(j).into_owned()) {
                Ok(next) => cur = next,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(cur);
        }
    }
    Ok(factor_psd(modified, tol)?)
}

/// Refreshed factorization of `G + U·C†·Uᵀ` (updates cannot break positive
/// definiteness, so the chain only falls back for eigen-kind factors).
fn refact_update(
    fact: &PsdFactorization,
    u: &DMatrix<f64>,
    c_fact: &PsdFactorization,
    modified: &SymMat,
    tol: f64,
) -> Result<PsdFactorization> {
    if fact.is_cholesky() {
        let z = c_fact.pseudo_inverse_sqrt();
        let ut = u * z;
        let mut cur = fact.clone();
        for j in 0..ut.ncols() {
            cur = chol_rank1_update(&cur, &ut.column(j).into_owned())?;
        }
        return Ok(cur);
    }
    Ok(factor_psd(modified, tol)?)
}

/// Propagates a downdate of the next cost-to-go through one unchanged stage.
///
/// The outgoing pair is built from the *unmodified* blocks; the stored
/// blocks, gain and factorization are replaced by their modified versions.
pub fn propagate_downdate(
    a: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    factors: &mut StageFactors,
    incoming: &Modification,
    tol: f64,
) -> Result<Modification> {
    debug_assert_eq!(incoming.sign, ModSign::Downdate);
    if incoming.dim() == 0 {
        return Modification::new(ModSign::Downdate, DMatrix::zeros(a.nrows(), 0), SymMat::zeros(0), tol);
    }
    let u = b_w.transpose() * &incoming.v; // BᵀV
    let av = a.transpose() * &incoming.v; // AᵀV
    let w_u = incoming.c_fact.solve(&u.transpose())?; // C†VᵀB
    let w_a = incoming.c_fact.solve(&av.transpose())?; // C†VᵀA
    let g_mod = SymMat::symmetrize(factors.input_block.matrix() - &u * &w_u);
    let h_mod = &factors.cross_block - &av * &w_u;
    let f_mod = SymMat::symmetrize(factors.state_block.matrix() - &av * &w_a);

    // Outgoing pair from the unmodified blocks.
    let gi_u = factors.input_fact.solve(&u)?; // G†BᵀV
    let v_out = &av - &factors.cross_block * &gi_u;
    let c_out = SymMat::symmetrize(incoming.c.matrix() - u.transpose() * &gi_u);
    let outgoing = Modification::new(ModSign::Downdate, v_out, c_out, tol)?;

    let neg_ht = -h_mod.transpose();
    let gain_smw = smw_solve(&factors.input_fact, &u, &incoming.c_fact, ModSign::Downdate, &neg_ht).ok();
    let new_fact = refact_downdate(&factors.input_fact, &u, &incoming.c_fact, &g_mod, tol)?;
    let gain = match gain_smw {
        Some(g) => g,
        None => new_fact.solve(&neg_ht)?,
    };

    factors.state_block = f_mod;
    factors.cross_block = h_mod;
    factors.input_block = g_mod;
    factors.gain = gain;
    factors.input_fact = new_fact;
    Ok(outgoing)
}

/// Propagates an update of the next cost-to-go through one unchanged stage.
///
/// Unlike the downdate, the outgoing pair is built from the *modified*
/// blocks.
pub fn propagate_update(
    a: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    factors: &mut StageFactors,
    incoming: &Modification,
    tol: f64,
) -> Result<Modification> {
    debug_assert_eq!(incoming.sign, ModSign::Update);
    if incoming.dim() == 0 {
        return Modification::new(ModSign::Update, DMatrix::zeros(a.nrows(), 0), SymMat::zeros(0), tol);
    }
    let u = b_w.transpose() * &incoming.v;
    let av = a.transpose() * &incoming.v;
    let w_u = incoming.c_fact.solve(&u.transpose())?;
    let w_a = incoming.c_fact.solve(&av.transpose())?;
    let g_mod = SymMat::symmetrize(factors.input_block.matrix() + &u * &w_u);
    let h_mod = &factors.cross_block + &av * &w_u;
    let f_mod = SymMat::symmetrize(factors.state_block.matrix() + &av * &w_a);

    let neg_ht = -h_mod.transpose();
    let gain_smw = smw_solve(&factors.input_fact, &u, &incoming.c_fact, ModSign::Update, &neg_ht).ok();
    let new_fact = refact_update(&factors.input_fact, &u, &incoming.c_fact, &g_mod, tol)?;
    let gain = match gain_smw {
        Some(g) => g,
        None => new_fact.solve(&neg_ht)?,
    };

    // Outgoing pair from the modified blocks.
    let gi_u = new_fact.solve(&u)?; // G̃†BᵀV
    let v_out = &av - &h_mod * &gi_u;
    let c_out = SymMat::symmetrize(incoming.c.matrix() - u.transpose() * &gi_u);
    let outgoing = Modification::new(ModSign::Update, v_out, c_out, tol)?;

    factors.state_block = f_mod;
    factors.cross_block = h_mod;
    factors.input_block = g_mod;
    factors.gain = gain;
    factors.input_fact = new_fact;
    Ok(outgoing)
}

/// Frees `k` inputs at a stage: the stage blocks grow by the appended
/// columns and the outgoing downdate has dimension `k̃ + k`.
///
/// `p_next` must be the cost-to-go *before* any modification — the border
/// terms are built against the original matrix, with the incoming term
/// subtracted separately.
pub fn remove_constraints_step(
    a: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    p_next: &SymMat,
    cols: &AppendedColumns,
    factors: &mut StageFactors,
    incoming: Option<&Modification>,
    tol: f64,
) -> Result<Modification> {
    let n_w = b_w.ncols();
    let k = cols.b.ncols();
    let pb = p_next.matrix() * &cols.b;
    let h_new = &cols.q_xw + a.transpose() * &pb; // n_x × k
    let g_new = &cols.q_w_cross + b_w.transpose() * &pb; // n_w × k
    let g_corner = SymMat::symmetrize(cols.q_w_corner.matrix() + cols.b.transpose() * &pb);

    // Bordered, still unmodified blocks.
    let mut g_bord = DMatrix::zeros(n_w + k, n_w + k);
    g_bord
        .view_mut((0, 0), (n_w, n_w))
        .copy_from(factors.input_block.matrix());
    g_bord.view_mut((0, n_w), (n_w, k)).copy_from(&g_new);
    g_bord
        .view_mut((n_w, 0), (k, n_w))
        .copy_from(&g_new.transpose());
    g_bord
        .view_mut((n_w, n_w), (k, k))
        .copy_from(g_corner.matrix());
    let mut h_bord = DMatrix::zeros(a.nrows(), n_w + k);
    h_bord
        .view_mut((0, 0), (a.nrows(), n_w))
        .copy_from(&factors.cross_block);
    h_bord
        .view_mut((0, n_w), (a.nrows(), k))
        .copy_from(&h_new);

    let gi_g = factors.input_fact.solve(&g_new)?; // G†g

    let (g_mod, h_mod, f_mod, v_out, c_out, new_fact) = match incoming {
        None => {
            // No prior modification: the outgoing pair is just the Schur
            // complement of the appended corner.
            let c_out = SymMat::symmetrize(g_corner.matrix() - g_new.transpose() * &gi_g);
            let v_out = &h_new - &factors.cross_block * &gi_g;
            let g_mod = SymMat::symmetrize(g_bord);
            let new_fact = match chol_append_columns(&factors.input_fact, &g_new, &g_corner, tol) {
                Ok(f) => f,
                Err(_) => factor_psd(&g_mod, tol)?,
            };
            (
                g_mod,
                h_bord,
                factors.state_block.clone(),
                v_out,
                c_out,
                new_fact,
            )
        }
        Some(m) => {
            debug_assert_eq!(m.sign, ModSign::Downdate);
            let mut b_tilde = DMatrix::zeros(a.nrows(), n_w + k);
            b_tilde.view_mut((0, 0), (a.nrows(), n_w)).copy_from(b_w);
            b_tilde
                .view_mut((0, n_w), (a.nrows(), k))
                .copy_from(&cols.b);
            let u_big = b_tilde.transpose() * &m.v; // (n_w+k) × k̃
            let av = a.transpose() * &m.v;
            let w_u = m.c_fact.solve(&u_big.transpose())?;
            let w_a = m.c_fact.solve(&av.transpose())?;
            let g_mod = SymMat::symmetrize(&g_bord - &u_big * &w_u);
            let h_mod = &h_bord - &av * &w_u;
            let f_mod = SymMat::symmetrize(factors.state_block.matrix() - &av * &w_a);

            // Outgoing pair, all against the original blocks.
            let u_old = b_w.transpose() * &m.v; // n_w × k̃
            let gi_uold = factors.input_fact.solve(&u_old)?;
            let v_new = &h_new - &factors.cross_block * &gi_g;
            let v_old = &av - &factors.cross_block * &gi_uold;
            let mut v_out = DMatrix::zeros(a.nrows(), k + m.dim());
            v_out.view_mut((0, 0), (a.nrows(), k)).copy_from(&v_new);
            v_out
                .view_mut((0, k), (a.nrows(), m.dim()))
                .copy_from(&v_old);
            let mut c_out = DMatrix::zeros(k + m.dim(), k + m.dim());
            c_out
                .view_mut((0, 0), (k, k))
                .copy_from(&(g_corner.matrix() - g_new.transpose() * &gi_g));
            let coupling = cols.b.transpose() * &m.v - g_new.transpose() * &gi_uold;
            c_out.view_mut((0, k), (k, m.dim())).copy_from(&coupling);
            c_out
                .view_mut((k, 0), (m.dim(), k))
                .copy_from(&coupling.transpose());
            c_out
                .view_mut((k, k), (m.dim(), m.dim()))
                .copy_from(&(m.c.matrix() - u_old.transpose() * &gi_uold));
            let c_out = SymMat::symmetrize(c_out);

            let appended = chol_append_columns(&factors.input_fact, &g_new, &g_corner, tol);
            let new_fact = match appended {
                Ok(f) => refact_downdate(&f, &u_big, &m.c_fact, &g_mod, tol)?,
                Err(_) => factor_psd(&g_mod, tol)?,
            };
            (g_mod, h_mod, f_mod, v_out, c_out, new_fact)
        }
    };

    let gain = new_fact.solve(&(-h_mod.transpose()))?;
    factors.state_block = f_mod;
    factors.cross_block = h_mod;
    factors.input_block = g_mod;
    factors.gain = gain;
    factors.input_fact = new_fact;
    Modification::new(ModSign::Downdate, v_out, c_out, tol)
}

/// Fixes `k` inputs at a stage: the listed columns are deleted from the
/// stage blocks and the outgoing update has dimension `k̃ + k`.
///
/// All border quantities come from the current blocks after undoing the
/// incoming update, and the outgoing pair uses the *modified* (shrunk)
/// blocks.
pub fn add_constraints_step(
    a: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    positions: &[usize],
    factors: &mut StageFactors,
    incoming: Option<&Modification>,
    tol: f64,
) -> Result<Modification> {
    let n_w = b_w.ncols();
    let k = positions.len();
    let keep: Vec<usize> = (0..n_w).filter(|i| !positions.contains(i)).collect();
    let b_del = b_w.select_columns(positions.iter());
    let b_keep = b_w.select_columns(keep.iter());

    // Undo the incoming update to recover the bordered form of the shrunk
    // blocks, then slice it apart.
    let (g_hat, h_hat, f_mod, undo) = match incoming {
        None => (
            factors.input_block.matrix().clone(),
            factors.cross_block.clone(),
            factors.state_block.clone(),
            None,
        ),
        Some(m) => {
            debug_assert_eq!(m.sign, ModSign::Update);
            let u_full = b_w.transpose() * &m.v;
            let av = a.transpose() * &m.v;
            let w_u = m.c_fact.solve(&u_full.transpose())?;
            let w_a = m.c_fact.solve(&av.transpose())?;
            let g_hat = factors.input_block.matrix() + &u_full * &w_u;
            let h_hat = &factors.cross_block + &av * &w_u;
            let f_mod = SymMat::symmetrize(factors.state_block.matrix() + &av * &w_a);
            (g_hat, h_hat, f_mod, Some((u_full, av)))
        }
    };
    let g_mod = SymMat::symmetrize(DMatrix::from_fn(keep.len(), keep.len(), |i, j| {
        g_hat[(keep[i], keep[j])]
    }));
    let g_cross = DMatrix::from_fn(keep.len(), k, |i, j| g_hat[(keep[i], positions[j])]);
    let g_corner = SymMat::symmetrize(DMatrix::from_fn(k, k, |i, j| {
        g_hat[(positions[i], positions[j])]
    }));
    let h_mod = h_hat.select_columns(keep.iter());
    let h_del = h_hat.select_columns(positions.iter());

    let new_fact = {
        let chained = match (&undo, factors.input_fact.is_cholesky()) {
            (Some((u_full, _)), true) => {
                refact_update(&factors.input_fact, u_full, &incoming.unwrap().c_fact, &SymMat::symmetrize(g_hat.clone()), tol)
                    .ok()
                    .filter(|f| f.is_cholesky())
            }
            (None, true) => Some(factors.input_fact.clone()),
            _ => None,
        };
        match chained {
            Some(f) => match chol_delete_columns(&f, positions) {
                Ok(f) => f,
                Err(_) => factor_psd(&g_mod, tol)?,
            },
            None => factor_psd(&g_mod, tol)?,
        }
    };

    let gi_g = new_fact.solve(&g_cross)?; // G̃†g̃
    let v_new = &h_del - &h_mod * &gi_g;
    let c_new = SymMat::symmetrize(g_corner.matrix() - g_cross.transpose() * &gi_g);
    let (v_out, c_out) = match incoming {
        None => (v_new, c_new.into_matrix()),
        Some(m) => {
            let u_keep = b_keep.transpose() * &m.v;
            let gi_ukeep = new_fact.solve(&u_keep)?;
            let (_, av) = undo.as_ref().unwrap();
            let v_old = av - &h_mod * &gi_ukeep;
            let mut v_out = DMatrix::zeros(a.nrows(), k + m.dim());
            v_out.view_mut((0, 0), (a.nrows(), k)).copy_from(&v_new);
            v_out
                .view_mut((0, k), (a.nrows(), m.dim()))
                .copy_from(&v_old);
            let coupling = b_del.transpose() * &m.v - g_cross.transpose() * &gi_ukeep;
            let mut c_out = DMatrix::zeros(k + m.dim(), k + m.dim());
            c_out.view_mut((0, 0), (k, k)).copy_from(c_new.matrix());
            c_out.view_mut((0, k), (k, m.dim())).copy_from(&coupling);
            c_out
                .view_mut((k, 0), (m.dim(), k))
                .copy_from(&coupling.transpose());
            c_out
                .view_mut((k, k), (m.dim(), m.dim()))
                .copy_from(&(m.c.matrix() - u_keep.transpose() * &gi_ukeep));
            (v_out, c_out)
        }
    };

    let gain = new_fact.solve(&(-h_mod.transpose()))?;
    factors.state_block = f_mod;
    factors.cross_block = h_mod;
    factors.input_block = g_mod;
    factors.gain = gain;
    factors.input_fact = new_fact;
    Modification::new(ModSign::Update, v_out, SymMat::symmetrize(c_out), tol)
}

/// Applies a working-set delta to an existing factorization in place.
///
/// Stages above the largest changed index are not touched. Only the stages
/// at or below it are rewritten: the change stages run the remove/add step,
/// the rest propagate the accumulated modification. When the cumulative
/// modification dimension reaches `recompute_ratio · n_x`, the remaining
/// stages are refactorized from scratch instead (reported, not an error).
pub fn modify_factorization(
    pre: &UftocProblem,
    post: &UftocProblem,
    f: &mut RiccatiFactorization,
    delta: &WorkingSetDelta,
    opts: &ModifyOptions,
) -> Result<ModifyReport> {
    delta.validate(pre, post)?;
    let mut report = ModifyReport::default();
    let Some(t_m) = delta.max_stage() else {
        return Ok(report);
    };
    let n_x = pre.state_dim();
    let threshold = opts.recompute_ratio * n_x as f64;
    let mut modification: Option<Modification> = None;
    // Original cost-to-go of stage t+1, kept one step ahead of the loop so
    // the border terms of a removal never see an already-modified matrix.
    let mut p_next_original = f.cost_to_go[t_m + 1].clone();
    for t in (0..=t_m).rev() {
        let change = delta.changes.iter().find(|c| c.stage == t);
        let incoming_dim = modification.as_ref().map_or(0, |m| m.dim());
        let grown = incoming_dim + change.map_or(0, |c| c.positions.len());
        if (grown as f64) >= threshold {
            partial_refactorize(post, f, t, opts.tol)?;
            report.fallback_stage = Some(t);
            return Ok(report);
        }
        let p_original_t = f.cost_to_go[t].clone();
        let pre_stage = &pre.stages[t];
        let outgoing = match (change, delta.kind) {
            (None, DeltaKind::Remove) => propagate_downdate(
                &pre_stage.a,
                &pre_stage.b,
                &mut f.stages[t],
                modification.as_ref().expect("interior stage has incoming"),
                opts.tol,
            ),
            (None, DeltaKind::Add) => propagate_update(
                &pre_stage.a,
                &pre_stage.b,
                &mut f.stages[t],
                modification.as_ref().expect("interior stage has incoming"),
                opts.tol,
            ),
            (Some(_), DeltaKind::Remove) => {
                let cols = AppendedColumns::from_post_stage(&post.stages[t], pre_stage.input_dim());
                remove_constraints_step(
                    &pre_stage.a,
                    &pre_stage.b,
                    &p_next_original,
                    &cols,
                    &mut f.stages[t],
                    modification.as_ref(),
                    opts.tol,
                )
            }
            (Some(ch), DeltaKind::Add) => add_constraints_step(
                &pre_stage.a,
                &pre_stage.b,
                &ch.positions,
                &mut f.stages[t],
                modification.as_ref(),
                opts.tol,
            ),
        }
        .map_err(at_stage(t))?;
        f.cost_to_go[t] = outgoing.apply_to(&p_original_t);
        report.stages.push(StageReport {
            stage: t,
            modification_dim: outgoing.dim(),
            modification_rank: outgoing.numeric_rank(),
        });
        modification = Some(outgoing);
        p_next_original = p_original_t;
    }
    Ok(report)
}

/// Standard backward factorization of stages `0..=up_to` against the
/// (possibly already modified) cost-to-go above.
fn partial_refactorize(
    post: &UftocProblem,
    f: &mut RiccatiFactorization,
    up_to: usize,
    tol: f64,
) -> Result<()> {
    for t in (0..=up_to).rev() {
        let factors = factorize_stage(&post.stages[t], &f.cost_to_go[t + 1], tol)
            .map_err(|source| RiccatiError::Stage { stage: t, source })?;
        f.cost_to_go[t] = cost_to_go_from(&factors);
        f.stages[t] = factors;
    }
    Ok(())
}

/// Recomputes the solution after a factorization update: the backward
/// recursion is redone only for stages `t ≤ t_m`, the forward pass fully.
pub fn refresh_solution(
    post: &UftocProblem,
    f: &RiccatiFactorization,
    previous: &BackwardPass,
    t_m: usize,
    tol: f64,
) -> Result<(BackwardPass, Trajectory)> {
    let mut bp = previous.clone();
    for t in (0..=t_m).rev() {
        backward_stage(post, f, &mut bp, t, tol)?;
    }
    let traj = forward(post, f, &bp);
    Ok((bp, traj))
}
