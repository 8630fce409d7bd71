//! The information-based scale transformation linking historical and
//! current regression parameters.
//!
//! For side `k` the standardized parameter is `s_k(β) = I_k,BB(β)^{1/2} β_B`,
//! where `I_k,BB` is the borrowed sub-block of `φ_k X₀ᵀ V_k(β) X₀`. The
//! constraint tying the two models together is `s₀(η) = s₁(θ) + c₀`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{GlmFamily, GlmParams, BERNOULLI_SATURATION};
use crate::linalg::{logdet_abs, LinalgError, Matrix, SpdRoot, SylvesterSolver, SymMatrix, Vector};

const SOLVE_TOL: f64 = 1e-10;
const SOLVE_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("information matrix is indefinite or degenerate: {0}")]
    IndefiniteInformation(String),
    #[error("constraint solver did not converge (best residual {best_residual:e})")]
    NonConvergence { best_residual: f64 },
    #[error("transformation Jacobian is singular")]
    SingularJacobian,
    #[error("invalid transform context: {0}")]
    InvalidContext(String),
}

impl From<LinalgError> for TransformError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::SingularMatrix | LinalgError::SingularSylvester => TransformError::SingularJacobian,
            other => TransformError::IndefiniteInformation(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Hist,
    Curr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HistToCurr,
    CurrToHist,
}

/// Everything needed to evaluate `g`, `g⁻¹` and their shifted variants.
#[derive(Debug, Clone)]
pub struct TransformContext {
    hist_family: GlmFamily,
    curr_family: GlmFamily,
    x0: Arc<Matrix>,
    borrowed: Vec<usize>,
    c0: Vector,
    // Square root of (X₀ᵀX₀)_BB and its inverse, used whenever a side's
    // information does not depend on β.
    unit_root: SymMatrix,
    unit_inv_root: SymMatrix,
    unit_root_logdet: f64,
}

impl TransformContext {
    pub fn new(
        hist_family: GlmFamily,
        curr_family: GlmFamily,
        x0: Arc<Matrix>,
        borrowed: Vec<usize>,
    ) -> Result<Self, TransformError> {
        let p = x0.ncols();
        if borrowed.is_empty() {
            return Err(TransformError::InvalidContext("no borrowed coordinates".into()));
        }
        if borrowed.windows(2).any(|w| w[0] >= w[1]) || borrowed.iter().any(|&j| j >= p) {
            return Err(TransformError::InvalidContext(format!(
                "borrowed indices {borrowed:?} must be sorted, distinct and below {p}"
            )));
        }
        let xtx = SymMatrix::symmetrized(x0.transpose() * x0.as_ref());
        let block = xtx.submatrix(&borrowed);
        let root = SpdRoot::compute(&block)?;
        let unit_inv_root = root.inv_sqrt().map_err(|_| {
            TransformError::InvalidContext("historical design is rank deficient".into())
        })?;
        let unit_root_logdet = logdet_abs(root.sqrt.as_matrix())?;
        let r = borrowed.len();
        Ok(TransformContext {
            hist_family,
            curr_family,
            x0,
            borrowed,
            c0: Vector::zeros(r),
            unit_root: root.sqrt,
            unit_inv_root,
            unit_root_logdet,
        })
    }

    /// Context borrowing every coordinate.
    pub fn full(hist_family: GlmFamily, curr_family: GlmFamily, x0: Arc<Matrix>) -> Result<Self, TransformError> {
        let p = x0.ncols();
        Self::new(hist_family, curr_family, x0, (0..p).collect())
    }

    pub fn with_shift(&self, c0: Vector) -> Result<Self, TransformError> {
        if c0.len() != self.r() {
            return Err(TransformError::InvalidContext(format!(
                "shift has length {} but {} coordinates are borrowed",
                c0.len(),
                self.r()
            )));
        }
        let mut ctx = self.clone();
        ctx.c0 = c0;
        Ok(ctx)
    }

    pub fn set_shift(&mut self, c0: &[f64]) {
        self.c0.copy_from_slice(c0);
    }

    pub fn family(&self, side: Side) -> &GlmFamily {
        match side {
            Side::Hist => &self.hist_family,
            Side::Curr => &self.curr_family,
        }
    }

    pub fn hist_family(&self) -> &GlmFamily {
        &self.hist_family
    }

    pub fn curr_family(&self) -> &GlmFamily {
        &self.curr_family
    }

    pub fn x0(&self) -> &Matrix {
        &self.x0
    }

    pub fn x0_arc(&self) -> Arc<Matrix> {
        Arc::clone(&self.x0)
    }

    pub fn borrowed(&self) -> &[usize] {
        &self.borrowed
    }

    pub fn c0(&self) -> &Vector {
        &self.c0
    }

    pub fn p(&self) -> usize {
        self.x0.ncols()
    }

    pub fn r(&self) -> usize {
        self.borrowed.len()
    }

    pub fn is_full(&self) -> bool {
        self.r() == self.p()
    }

    /// Non-borrowed coordinate indices.
    pub fn unborrowed(&self) -> Vec<usize> {
        (0..self.p()).filter(|j| !self.borrowed.contains(j)).collect()
    }

    /// Whether the information on `side` is free of the regression coefficients.
    pub fn closed_form(&self, side: Side) -> bool {
        !self.family(side).information_depends_on_beta()
    }

    fn borrowed_part(&self, beta: &Vector) -> Vector {
        Vector::from_iterator(self.r(), self.borrowed.iter().map(|&j| beta[j]))
    }

    fn check(&self, params: &GlmParams) -> Result<(), TransformError> {
        if params.dim() != self.p() {
            return Err(TransformError::InvalidContext(format!(
                "parameter of length {} for a {}-column design",
                params.dim(),
                self.p()
            )));
        }
        Ok(())
    }

    /// Borrowed sub-block of the side's information and `∂/∂β_{B_j}` of it.
    fn info_block(
        &self,
        side: Side,
        params: &GlmParams,
        with_derivatives: bool,
    ) -> Result<(SymMatrix, Vec<SymMatrix>), TransformError> {
        let fam = self.family(side);
        let x = self.x0.as_ref();
        let n = x.nrows();
        let r = self.r();
        let b = &self.borrowed;
        let eta = x * &params.beta;
        if matches!(fam, GlmFamily::BernoulliLogit)
            && eta.iter().any(|e| !(e.abs() <= BERNOULLI_SATURATION))
        {
            return Err(TransformError::IndefiniteInformation(
                "logistic linear predictor saturated".into(),
            ));
        }
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(TransformError::IndefiniteInformation("non-finite linear predictor".into()));
        }
        let mut w = vec![0.0; n];
        let mut dw = vec![0.0; n];
        for i in 0..n {
            if with_derivatives {
                (w[i], dw[i]) = fam.fisher_weight_with_derivative(eta[i]);
            } else {
                w[i] = fam.fisher_weight(eta[i]);
            }
        }
        let cols: Vec<&[f64]> = b.iter().map(|&j| &x.as_slice()[j * n..(j + 1) * n]).collect();
        let mut info = Matrix::zeros(r, r);
        let mut derivs = if with_derivatives { vec![Matrix::zeros(r, r); r] } else { Vec::new() };
        let mut wx = vec![0.0; n];
        for a in 0..r {
            for (t, v) in wx.iter_mut().enumerate() {
                *v = w[t] * cols[a][t];
            }
            for c in a..r {
                info[(a, c)] = dot(&wx, cols[c]);
            }
        }
        if with_derivatives {
            for (j, d) in derivs.iter_mut().enumerate() {
                for a in 0..r {
                    for (t, v) in wx.iter_mut().enumerate() {
                        *v = dw[t] * cols[j][t] * cols[a][t];
                    }
                    for c in a..r {
                        d[(a, c)] = dot(&wx, cols[c]);
                    }
                }
            }
        }
        let finish = |mut m: Matrix| {
            for a in 0..r {
                for c in 0..a {
                    m[(a, c)] = m[(c, a)];
                }
            }
            SymMatrix::symmetrized(m * params.phi)
        };
        Ok((finish(info), derivs.into_iter().map(finish).collect()))
    }

    /// `I_BB^{1/2}` for `side` at `params`.
    pub fn info_root(&self, side: Side, params: &GlmParams) -> Result<SymMatrix, TransformError> {
        self.check(params)?;
        if self.closed_form(side) {
            return Ok(self.unit_root.scale(params.phi.sqrt()));
        }
        let (block, _) = self.info_block(side, params, false)?;
        Ok(SpdRoot::compute(&block)?.sqrt)
    }

    /// `I_BB^{-1/2}` for a side whose information is free of `β`.
    fn closed_inv_root(&self, phi: f64) -> SymMatrix {
        self.unit_inv_root.scale(1.0 / phi.sqrt())
    }

    fn closed_logdet(&self, phi: f64) -> f64 {
        self.unit_root_logdet + 0.5 * self.r() as f64 * phi.ln()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standardized borrowed parameter `I_BB^{1/2}(params) β_B` on `side`.
pub fn standardize(ctx: &TransformContext, side: Side, params: &GlmParams) -> Result<Vector, TransformError> {
    let root = ctx.info_root(side, params)?;
    Ok(root.as_matrix() * ctx.borrowed_part(&params.beta))
}

/// Standardized parameter together with its derivative with respect to the
/// borrowed coordinates: column `j` is `(∂I_BB^{1/2}/∂β_{B_j}) β_B + I_BB^{1/2} e_j`.
pub fn standardization_jacobian(
    ctx: &TransformContext,
    side: Side,
    params: &GlmParams,
) -> Result<(Vector, Matrix), TransformError> {
    ctx.check(params)?;
    let bb = ctx.borrowed_part(&params.beta);
    if ctx.closed_form(side) {
        let root = ctx.unit_root.scale(params.phi.sqrt()).into_matrix();
        return Ok((&root * bb, root));
    }
    let (block, derivs) = ctx.info_block(side, params, true)?;
    let spd = SpdRoot::compute(&block)?;
    let solver = SylvesterSolver::from_root(&spd)?;
    let root = spd.sqrt;
    let mut a = root.as_matrix().clone();
    for (j, dm) in derivs.iter().enumerate() {
        let ds = solver.solve(dm)?;
        let col = ds.as_matrix() * &bb;
        for i in 0..ctx.r() {
            a[(i, j)] += col[i];
        }
    }
    Ok((root.as_matrix() * bb, a))
}

fn with_borrowed(ctx: &TransformContext, template: &GlmParams, bb: &Vector) -> GlmParams {
    let mut out = template.clone();
    for (a, &j) in ctx.borrowed.iter().enumerate() {
        out.beta[j] = bb[a];
    }
    out
}

fn residual(ctx: &TransformContext, side: Side, params: &GlmParams, target: &Vector) -> Result<(Vector, Matrix), TransformError> {
    let (s, a) = standardization_jacobian(ctx, side, params)?;
    Ok((s - target, a))
}

fn newton(
    ctx: &TransformContext,
    side: Side,
    target: &Vector,
    template: &GlmParams,
    start: Vector,
    best: &mut f64,
) -> Option<GlmParams> {
    let mut cur = with_borrowed(ctx, template, &start);
    let (mut res, mut jac) = residual(ctx, side, &cur, target).ok()?;
    let mut norm = res.amax();
    *best = best.min(norm);
    for _ in 0..SOLVE_MAX_ITER {
        if norm < SOLVE_TOL {
            return Some(cur);
        }
        let step = jac.clone().lu().solve(&res)?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let bb = ctx.borrowed_part(&cur.beta) - &step * t;
            let cand = with_borrowed(ctx, template, &bb);
            if let Ok((r2, j2)) = residual(ctx, side, &cand, target) {
                let n2 = r2.amax();
                if n2.is_finite() && n2 < norm {
                    cur = cand;
                    res = r2;
                    jac = j2;
                    norm = n2;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        *best = best.min(norm);
        if !moved {
            break;
        }
    }
    (norm < SOLVE_TOL).then_some(cur)
}

/// Finds borrowed coordinates `β_B` with `standardize(side, β) = target`.
///
/// Non-borrowed coordinates and the dispersion are taken from `template`,
/// whose borrowed coordinates are also the first Newton start.
pub fn solve_constraint(
    ctx: &TransformContext,
    side: Side,
    target: &Vector,
    template: &GlmParams,
) -> Result<GlmParams, TransformError> {
    ctx.check(template)?;
    if target.len() != ctx.r() {
        return Err(TransformError::InvalidContext(format!(
            "target of length {} for {} borrowed coordinates",
            target.len(),
            ctx.r()
        )));
    }
    if target.iter().any(|t| !t.is_finite()) {
        return Err(TransformError::NonConvergence { best_residual: f64::INFINITY });
    }
    if ctx.closed_form(side) {
        let bb = ctx.closed_inv_root(template.phi).as_matrix() * target;
        return Ok(with_borrowed(ctx, template, &bb));
    }
    let mut best = f64::INFINITY;
    let warm = ctx.borrowed_part(&template.beta);
    if let Some(sol) = newton(ctx, side, target, template, warm, &mut best) {
        return Ok(sol);
    }
    // First-order guess from the information at β_B = 0.
    let mut zero = template.clone();
    for &j in &ctx.borrowed {
        zero.beta[j] = 0.0;
    }
    let guess = match ctx.info_root(side, &zero) {
        Ok(root) => SpdRoot::compute(&SymMatrix::symmetrized(root.as_matrix() * root.as_matrix()))
            .and_then(|r| r.inv_sqrt())
            .map(|inv| inv.as_matrix() * target)
            .ok(),
        Err(_) => None,
    };
    if let Some(g) = guess {
        if let Some(sol) = newton(ctx, side, target, template, g.clone(), &mut best) {
            return Ok(sol);
        }
        for k in 0..ctx.r() {
            for delta in [0.5, -0.5] {
                let mut start = g.clone();
                start[k] += delta;
                if let Some(sol) = newton(ctx, side, target, template, start, &mut best) {
                    return Ok(sol);
                }
            }
        }
    }
    Err(TransformError::NonConvergence { best_residual: best })
}

/// Maps parameters across the constraint `s₀(η) = s₁(θ) + c₀`.
///
/// The target's non-borrowed coordinates and dispersion come from
/// `target_template`; by default they are copied from `source` with the
/// target family's fixed dispersion where it has one.
pub fn map_params(
    ctx: &TransformContext,
    source: &GlmParams,
    direction: Direction,
    target_template: Option<&GlmParams>,
) -> Result<GlmParams, TransformError> {
    map_params_with_shift(ctx, source, direction, target_template, &ctx.c0)
}

/// [`map_params`] with an explicit shift in place of the context's `c₀`.
pub fn map_params_with_shift(
    ctx: &TransformContext,
    source: &GlmParams,
    direction: Direction,
    target_template: Option<&GlmParams>,
    c0: &Vector,
) -> Result<GlmParams, TransformError> {
    let (from, to) = match direction {
        Direction::HistToCurr => (Side::Hist, Side::Curr),
        Direction::CurrToHist => (Side::Curr, Side::Hist),
    };
    let template = match target_template {
        Some(t) => t.clone(),
        None => GlmParams::for_family(ctx.family(to), source.beta.clone(), source.phi),
    };
    ctx.check(&template)?;
    if c0.len() != ctx.r() {
        return Err(TransformError::InvalidContext("shift has the wrong length".into()));
    }
    // Identical models with no shift: the map is the identity on β_B.
    let same = ctx.hist_family == ctx.curr_family
        && c0.iter().all(|&c| c == 0.0)
        && template.phi == source.phi
        && ctx.unborrowed().iter().all(|&j| template.beta[j] == source.beta[j]);
    if same {
        ctx.check(source)?;
        return Ok(with_borrowed(ctx, &template, &ctx.borrowed_part(&source.beta)));
    }
    let s = standardize(ctx, from, source)?;
    let target = match direction {
        Direction::HistToCurr => s - c0,
        Direction::CurrToHist => s + c0,
    };
    solve_constraint(ctx, to, &target, &template)
}

/// [`standardize`] and [`side_logdet`] from a single information evaluation.
pub fn standardize_with_logdet(ctx: &TransformContext, side: Side, params: &GlmParams) -> Result<(Vector, f64), TransformError> {
    if ctx.closed_form(side) {
        return Ok((standardize(ctx, side, params)?, ctx.closed_logdet(params.phi)));
    }
    let (s, a) = standardization_jacobian(ctx, side, params)?;
    Ok((s, logdet_abs(&a)?))
}

/// `log |det A|` of the standardization Jacobian on one side.
pub fn side_logdet(ctx: &TransformContext, side: Side, params: &GlmParams) -> Result<f64, TransformError> {
    if ctx.closed_form(side) {
        ctx.check(params)?;
        return Ok(ctx.closed_logdet(params.phi));
    }
    let (_, a) = standardization_jacobian(ctx, side, params)?;
    Ok(logdet_abs(&a)?)
}

/// `log |det dη_B/dθ_B|` at a current parameter and its matching historical one.
pub fn jacobian_logdet(ctx: &TransformContext, curr: &GlmParams, hist: &GlmParams) -> Result<f64, TransformError> {
    Ok(side_logdet(ctx, Side::Curr, curr)? - side_logdet(ctx, Side::Hist, hist)?)
}

/// Maps `curr` to the historical side first, then evaluates [`jacobian_logdet`].
pub fn jacobian_logdet_mapped(
    ctx: &TransformContext,
    curr: &GlmParams,
    hist_template: Option<&GlmParams>,
) -> Result<(f64, GlmParams), TransformError> {
    let hist = map_params(ctx, curr, Direction::CurrToHist, hist_template)?;
    Ok((jacobian_logdet(ctx, curr, &hist)?, hist))
}
