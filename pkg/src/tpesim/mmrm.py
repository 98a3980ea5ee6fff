"""Repeated-measures model: REML fit, marginal means, policy standardization.

The model regresses change from baseline at visits 1..5 on visit-specific
cell means (cells are arm, arm x status, or arm x pattern level) plus a
visit-specific baseline slope, with one unstructured covariance shared by
both arms.  Monotone withdrawal means every subject contributes an
observed prefix, which keeps all per-subject blocks equal to leading
submatrices of the 5x5 covariance.

The covariance is optimized over its log-Cholesky parameters with an
analytic gradient; small-sample inference uses the Kenward-Roger adjusted
covariance and degrees of freedom computed in the linear covariance
parametrization (whose second derivatives vanish).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import f as f_dist
from scipy.stats import t as t_dist

from .collapse import ON_TREATMENT_LEVEL, PatternCoding, plan_for
from .dgm import CONTROL, J, TREATMENT, TrialDataset
from .results import DEFAULT_ALPHA, DEFAULT_MARGIN, EstimateResult, t_inference

_LOG2PI = float(np.log(2.0 * np.pi))


class MmrmError(RuntimeError):
    pass


class RankDeficientError(MmrmError):
    """A cell required by the policy estimand has no observed outcomes."""

    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"no observed outcomes in required cell {cell}; collapse the coding first")


class NonConvergenceError(MmrmError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__(f"REML did not converge: {diagnostics}")


@dataclass(frozen=True)
class DesignSpec:
    """Fixed-effect structure: plain visit x arm cells, or cells split by
    the recoded discontinuation status/pattern level."""

    kind: str  # "simple" | "status" | "pattern"
    coding: PatternCoding | None = None

    def __post_init__(self):
        if self.kind not in ("simple", "status", "pattern"):
            raise MmrmError(f"unknown design kind {self.kind!r}")
        if self.kind != "simple" and self.coding is None:
            raise MmrmError(f"{self.kind} design needs a pattern coding")


@dataclass
class _Group:
    v: int
    idx: np.ndarray
    X: np.ndarray  # (n_g, v, p)
    y: np.ndarray  # (n_g, v)
    Xmat: np.ndarray = None  # (v, n_g * p), contiguous visit-major copy
    ymat: np.ndarray = None  # (v, n_g)

    def __post_init__(self):
        if self.Xmat is None:
            n, v, p = self.X.shape
            self.Xmat = np.ascontiguousarray(self.X.transpose(1, 0, 2).reshape(v, n * p))
            self.ymat = np.ascontiguousarray(self.y.T)


@dataclass
class _DesignData:
    groups: list[_Group]
    p: int
    cells_by_visit: list[list[tuple[int, int]]]
    col_of_cell: dict
    col_of_base: dict
    levels: np.ndarray  # (n, 5) covariate levels for all patients
    baseline_mean: float
    n_fit: int
    n_rows: int


@dataclass
class MmrmFit:
    coefficients: np.ndarray
    coef_cov: np.ndarray  # (X' V^-1 X)^-1 at the REML estimate
    sigma: np.ndarray  # 5x5
    reml_loglik: float
    converged: bool
    n_iterations: int
    design: _DesignData
    spec: DesignSpec
    _ctx: dict = field(default_factory=dict, repr=False)


def _observed_prefix_lengths(miss: np.ndarray) -> np.ndarray:
    any_miss = miss.any(axis=1)
    return np.where(any_miss, miss.argmax(axis=1), J)


def build_design(dataset: TrialDataset, spec: DesignSpec) -> _DesignData:
    n = dataset.n
    if spec.kind == "simple":
        levels = np.zeros((n, J), dtype=np.int64)
    else:
        levels = spec.coding.level_matrix(dataset.ie_pattern())
    v_len = _observed_prefix_lengths(dataset.miss)
    change = dataset.change()
    baseline = dataset.baseline
    baseline_mean = float(baseline.mean())

    cells_by_visit: list[list[tuple[int, int]]] = []
    col_of_cell, col_of_base = {}, {}
    col = 0
    for j in range(1, J + 1):
        obs_j = v_len >= j
        combos = sorted(set(zip(dataset.arm[obs_j].tolist(), levels[obs_j, j - 1].tolist())))
        cells_by_visit.append(combos)
        for cell in combos:
            col_of_cell[(j, cell[0], cell[1])] = col
            col += 1
        col_of_base[j] = col
        col += 1
    p = col

    # The final-visit policy mean needs every populated level estimable in
    # both arms; fail loudly if the coding did not take care of that.
    for arm in (CONTROL, TREATMENT):
        in_arm = dataset.arm == arm
        for lv in np.unique(levels[in_arm, J - 1]):
            if (J, arm, int(lv)) not in col_of_cell:
                raise RankDeficientError((J, arm, int(lv)))

    X = np.zeros((n, J, p))
    for j in range(1, J + 1):
        obs_j = v_len >= j
        for (arm, lv) in cells_by_visit[j - 1]:
            rows = obs_j & (dataset.arm == arm) & (levels[:, j - 1] == lv)
            X[rows, j - 1, col_of_cell[(j, arm, lv)]] = 1.0
        X[obs_j, j - 1, col_of_base[j]] = baseline[obs_j]

    y = np.where(np.isnan(change), 0.0, change)
    groups = []
    n_fit = 0
    n_rows = 0
    for v in range(1, J + 1):
        idx = np.where(v_len == v)[0]
        if idx.size == 0:
            continue
        groups.append(_Group(v=v, idx=idx, X=np.ascontiguousarray(X[idx, :v, :]), y=y[idx, :v]))
        n_fit += idx.size
        n_rows += idx.size * v

    if n_fit - p < J + 1:
        raise MmrmError(f"too few subjects ({n_fit}) for {p} fixed-effect columns")
    return _DesignData(groups, p, cells_by_visit, col_of_cell, col_of_base, levels,
                       baseline_mean, n_fit, n_rows)


# log-Cholesky parameter order: row-major lower triangle of L, diagonal on
# the log scale.
_TRI_IDX = [(a, b) for a in range(J) for b in range(a + 1)]
N_COVPAR = len(_TRI_IDX)


def _chol_from_params(gamma: np.ndarray) -> np.ndarray:
    L = np.zeros((J, J))
    for t, (a, b) in enumerate(_TRI_IDX):
        L[a, b] = np.exp(gamma[t]) if a == b else gamma[t]
    return L


def _params_from_chol(L: np.ndarray) -> np.ndarray:
    return np.array([np.log(L[a, a]) if a == b else L[a, b] for (a, b) in _TRI_IDX])


def _start_covariance(design: _DesignData) -> np.ndarray:
    """Pairwise-complete covariance of per-visit OLS residuals."""
    resid = np.full((design.n_fit, J), np.nan)
    offsets = {}
    pos = 0
    for g in design.groups:
        offsets[g.v] = (pos, pos + g.idx.size)
        pos += g.idx.size
    for j in range(1, J + 1):
        Xj, yj, rows = [], [], []
        for g in design.groups:
            if g.v >= j:
                Xj.append(g.X[:, j - 1, :])
                yj.append(g.y[:, j - 1])
                rows.append(np.arange(*offsets[g.v]))
        Xj = np.vstack(Xj)
        yj = np.concatenate(yj)
        rows = np.concatenate(rows)
        coef, *_ = np.linalg.lstsq(Xj, yj, rcond=None)
        resid[rows, j - 1] = yj - Xj @ coef
    cov = np.empty((J, J))
    for a in range(J):
        for b in range(a + 1):
            both = ~np.isnan(resid[:, a]) & ~np.isnan(resid[:, b])
            m = max(both.sum(), 2)
            cov[a, b] = cov[b, a] = float(np.nansum(resid[both, a] * resid[both, b]) / (m - 1))
    w, q = np.linalg.eigh(cov)
    floor = max(w.max(), 1e-3) * 1e-4
    w = np.maximum(w, floor)
    return (q * w) @ q.T


def _reml_negloglik(gamma: np.ndarray, design: _DesignData, want_ctx: bool = False):
    """Negative REML log-likelihood and its analytic gradient.

    Works in the whitened space y -> C^-1 y per observed-prefix group, so
    each evaluation costs one triangular solve and one Gram product per
    group.  The gradient uses d l / d gamma_t = -1/2 tr(T dSigma_t) with
    T = sum_g [n_g Sigma_v^-1 - F_g - U_g], where F and U are computed by
    sandwiching their whitened counterparts, and the trace against the
    log-Cholesky basis reduces to one product T L.
    """
    L = _chol_from_params(gamma)
    p = design.p
    A = np.zeros((p, p))
    b = np.zeros(p)
    yy = 0.0
    logdet_v = 0.0
    per_group = []
    for g in design.groups:
        n = g.idx.size
        Cv = L[: g.v, : g.v]
        dg = np.diag(Cv)
        if np.any(dg <= 0):
            return np.inf, np.zeros(N_COVPAR)
        Xw_flat = solve_triangular(Cv, g.Xmat, lower=True)  # (v, n p)
        yw = solve_triangular(Cv, g.ymat, lower=True)  # (v, n)
        Xw2 = Xw_flat.reshape(g.v * n, p)
        A += Xw2.T @ Xw2
        b += Xw2.T @ yw.reshape(-1)
        yy += float(np.sum(yw * yw))
        logdet_v += 2.0 * n * float(np.log(dg).sum())
        per_group.append((g, Cv, Xw_flat, yw))
    try:
        cfac = cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros(N_COVPAR)
    beta = cho_solve(cfac, b)
    quad = yy - float(b @ beta)
    logdet_a = 2.0 * float(np.log(np.diag(cfac[0])).sum())
    negll = 0.5 * (logdet_v + logdet_a + quad) + 0.5 * (design.n_rows - p) * _LOG2PI

    a_inv = cho_solve(cfac, np.eye(p))
    T = np.zeros((J, J))
    ctx_groups = []
    for g, Cv, Xw_flat, yw in per_group:
        n = g.idx.size
        Xw = Xw_flat.reshape(g.v, n, p)
        rw = yw - Xw @ beta  # (v, n)
        # whitened building blocks; F = C^-T Fw C^-1, U = C^-T Uw C^-1
        G2 = Xw_flat.reshape(-1, p) @ a_inv
        Fw = np.einsum("vnp,wnp->vw", G2.reshape(g.v, n, p), Xw)
        Uw = rw @ rw.T
        W = n * np.eye(g.v) - Fw - Uw
        W = solve_triangular(Cv.T, W, lower=False)
        W = solve_triangular(Cv.T, W.T, lower=False)  # symmetric sandwich
        T[: g.v, : g.v] += W
        if want_ctx:
            u = solve_triangular(Cv.T, rw, lower=False)  # Sigma^-1 r, (v, n)
            Z = solve_triangular(Cv.T, Xw_flat, lower=False).reshape(g.v, n, p)
            S = cho_solve((Cv, True), np.eye(g.v))
            ctx_groups.append({"group": g, "Z": Z.transpose(1, 0, 2), "S": S, "u": u.T})
    T = (T + T.T) / 2.0
    G = T @ L
    grad = np.empty(N_COVPAR)
    for t, (a, bb) in enumerate(_TRI_IDX):
        grad[t] = G[a, bb] * (L[a, a] if a == bb else 1.0)
    if want_ctx:
        ctx = {
            "A": A,
            "a_inv": a_inv,
            "beta": beta,
            "groups": ctx_groups,
            "loglik": -negll,
            "L": L,
        }
        return negll, grad, ctx
    return negll, grad


def reml_fit(dataset: TrialDataset, spec: DesignSpec, max_iter: int = 200,
             n_restarts: int = 3) -> MmrmFit:
    """REML estimation of the fixed effects and shared 5x5 covariance."""
    design = build_design(dataset, spec)
    sigma0 = _start_covariance(design)
    gamma0 = _params_from_chol(np.linalg.cholesky(sigma0))
    bounds = [(-8.0, 8.0) if a == b else (-30.0, 30.0) for (a, b) in _TRI_IDX]

    trace: list[float] = []

    def objective(gamma):
        negll, grad = _reml_negloglik(gamma, design)
        trace.append(float(negll))
        return negll, grad

    best = None
    attempts = []
    for attempt in range(n_restarts + 1):
        g0 = gamma0
        if attempt > 0:
            jitter = np.random.default_rng(1234 + attempt).normal(0.0, 0.05 * attempt, N_COVPAR)
            g0 = gamma0 + jitter
        res = minimize(
            objective,
            g0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iter, "ftol": 1e-13, "gtol": 1e-6},
        )
        attempts.append(res)
        if best is None or res.fun < best.fun:
            best = res
        if res.success:
            best = res
            break
    converged = bool(best.success)
    if not converged and not np.isfinite(best.fun):
        raise NonConvergenceError({"message": best.message, "fun": best.fun})

    negll, grad, ctx = _reml_negloglik(best.x, design, want_ctx=True)
    ctx["grad_norm"] = float(np.linalg.norm(grad))
    ctx["trace"] = trace
    L = ctx["L"]
    sigma = L @ L.T
    fit = MmrmFit(
        coefficients=ctx["beta"],
        coef_cov=ctx["a_inv"],
        sigma=sigma,
        reml_loglik=float(ctx["loglik"]),
        converged=converged,
        n_iterations=int(best.nit),
        design=design,
        spec=spec,
        _ctx=ctx,
    )
    if not converged:
        raise NonConvergenceError(
            {"message": best.message, "loglik": fit.reml_loglik,
             "grad_norm": float(np.linalg.norm(grad))}
        )
    return fit


# ---------------------------------------------------------------------------
# Kenward-Roger adjustment
# ---------------------------------------------------------------------------

# Elementary decomposition of the symmetric covariance basis: entry (a, b)
# of the lower triangle maps to E_ab + E_ba (just E_aa on the diagonal).
_SYM_TERMS = [((a, b),) if a == b else ((a, b), (b, a)) for (a, b) in _TRI_IDX]


@dataclass
class KrAdjustment:
    phi: np.ndarray  # unadjusted covariance of fixed effects
    phi_adj: np.ndarray  # KR first-order adjusted covariance
    w: np.ndarray  # asymptotic covariance of the covariance parameters
    p_stack: np.ndarray  # (15, p, p) derivative matrices X'V^-1 dV V^-1 X


def kenward_roger(fit: MmrmFit) -> KrAdjustment:
    """First-order adjusted covariance and the ingredients for adjusted df.

    Derivative matrices live in the linear covariance parametrization
    (symmetric elementary basis), where second derivatives vanish.  All
    basis sums are assembled through a (25 x 25) map between the symmetric
    basis and elementary index pairs, so nothing loops over basis pairs in
    Python.
    """
    if "kr" in fit._ctx:
        return fit._ctx["kr"]
    p = fit.design.p
    phi = fit.coef_cov
    groups = fit._ctx["groups"]

    H_list, S_list, n_list = [], [], []
    for item in groups:
        g, Z, S = item["group"], item["Z"], item["S"]
        H = np.zeros((J, J, p, p))
        # H[a, b] = sum_n outer(Z[n, a, :], Z[n, b, :])
        H[: g.v, : g.v] = np.tensordot(Z, Z, axes=(0, 0)).transpose(0, 2, 1, 3)
        Sp = np.zeros((J, J))
        Sp[: g.v, : g.v] = S
        H_list.append(H)
        S_list.append(Sp)
        n_list.append(g.idx.size)

    # basis -> elementary-pair incidence, elementary pairs indexed x * J + y
    M = np.zeros((N_COVPAR, J * J))
    for t, terms in enumerate(_SYM_TERMS):
        for (x, y) in terms:
            M[t, x * J + y] = 1.0

    p_stack = np.zeros((N_COVPAR, p, p))
    for H in H_list:
        p_stack += np.tensordot(M, H.reshape(J * J, p, p), axes=(1, 0))

    # T1 = sum_g n_g tr(S D_i S D_j), closed form over padded S entries
    a_idx = np.array([ab[0] for ab in _TRI_IDX])
    b_idx = np.array([ab[1] for ab in _TRI_IDX])
    diag_i = (a_idx == b_idx).astype(float)
    t1 = np.zeros((N_COVPAR, N_COVPAR))
    for S, ng in zip(S_list, n_list):
        g1 = S[np.ix_(a_idx, a_idx)] * S[np.ix_(b_idx, b_idx)]
        g2 = S[np.ix_(a_idx, b_idx)] * S[np.ix_(b_idx, a_idx)]
        scale = 2.0 / (2.0 ** diag_i[:, None]) / (2.0 ** diag_i[None, :])
        t1 += ng * (g1 + g2) * scale

    # T2[i, j] = tr(phi Q_ij) with Q_ij = sum S[y1, x2] H[x1, y2]:
    # build the (25 x 25) elementary kernel and fold through M.
    x_of = np.repeat(np.arange(J), J)
    y_of = np.tile(np.arange(J), J)
    t2 = np.zeros((N_COVPAR, N_COVPAR))
    for S, H in zip(S_list, H_list):
        TH = np.einsum("uwpq,pq->uw", H, phi)
        kern = S[np.ix_(y_of, x_of)] * TH[np.ix_(x_of, y_of)]
        t2 += M @ kern @ M.T

    r_stack = phi @ p_stack
    t3 = np.einsum("ipq,jqp->ij", r_stack, r_stack, optimize=True)

    info = 0.5 * (t1 - 2.0 * t2 + t3)
    try:
        w = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        w = np.linalg.pinv(info)

    # Lambda = phi [ sum_ij W_ij (Q_ij - P_i phi P_j) ] phi; the linear
    # parametrization kills the second-derivative term.  The Q part folds
    # the basis-level weights down to elementary pairs.
    coef = M.T @ w @ M  # (25, 25) elementary weights
    q_sum = np.zeros((p, p))
    C4 = coef.reshape(J, J, J, J)  # [x1, y1, x2, y2]
    for S, H in zip(S_list, H_list):
        wt = np.einsum("abcd,bc->ad", C4, S)
        q_sum += np.tensordot(wt, H, axes=([0, 1], [0, 1]))
    v_stack = np.tensordot(w, p_stack, axes=(1, 0))
    pp_sum = np.zeros((p, p))
    for i in range(N_COVPAR):
        pp_sum += p_stack[i] @ phi @ v_stack[i]
    lam = phi @ (q_sum - pp_sum) @ phi
    phi_adj = phi + 2.0 * lam

    adj = KrAdjustment(phi=phi, phi_adj=phi_adj, w=w, p_stack=p_stack)
    fit._ctx["kr"] = adj
    return adj


def kr_contrast_df(fit: MmrmFit, ell: np.ndarray) -> tuple[float, float]:
    """Kenward-Roger (df, scale) for a one-dimensional contrast."""
    adj = kenward_roger(fit)
    phi_ell = adj.phi @ ell
    denom = float(ell @ phi_ell)
    c = np.einsum("ipq,p,q->i", adj.p_stack, phi_ell, phi_ell) / denom
    a = float(c @ adj.w @ c)
    a = max(a, 0.0)
    e_star_inv = 1.0 - a
    if e_star_inv <= 0 or (1.0 - 2.0 * a) <= 0:
        return satterthwaite_df(fit, ell), 1.0
    v_star = 2.0 * (1.0 - 0.5 * a) / ((1.0 - a) ** 2 * (1.0 - 2.0 * a))
    rho = v_star * e_star_inv**2 / 2.0
    if rho <= 1.0 + 1e-12:
        df = 1e7
    else:
        df = 4.0 + 3.0 / (rho - 1.0)
    e_star = 1.0 / e_star_inv
    scale = df / (e_star * (df - 2.0)) if df > 2.0 else 1.0
    return float(df), float(scale)


def satterthwaite_df(fit: MmrmFit, ell: np.ndarray) -> float:
    adj = kenward_roger(fit)
    phi_ell = adj.phi @ ell
    phi_val = float(ell @ phi_ell)
    d = np.einsum("ipq,p,q->i", adj.p_stack, phi_ell, phi_ell)
    var_phi = float(d @ adj.w @ d)
    if var_phi <= 0:
        return 1e7
    return 2.0 * phi_val**2 / var_phi


# ---------------------------------------------------------------------------
# Marginal means and the policy estimand
# ---------------------------------------------------------------------------


@dataclass
class LsMeans:
    cells: list[tuple[int, int]]  # (arm, level) at the requested visit
    rows: np.ndarray  # contrast rows building each cell mean
    means: np.ndarray
    cov: np.ndarray  # model-based covariance (adjusted when requested)


def lsmeans(fit: MmrmFit, visit: int = J, cells=None, adjusted: bool = True) -> LsMeans:
    """Cell means at a visit with baseline held at its grand mean."""
    design = fit.design
    if cells is None:
        cells = design.cells_by_visit[visit - 1]
    rows = np.zeros((len(cells), design.p))
    for r, (arm, lv) in enumerate(cells):
        key = (visit, arm, lv)
        if key not in design.col_of_cell:
            raise RankDeficientError(key)
        rows[r, design.col_of_cell[key]] = 1.0
        rows[r, design.col_of_base[visit]] = design.baseline_mean
    means = rows @ fit.coefficients
    cov_base = kenward_roger(fit).phi_adj if adjusted else fit.coef_cov
    cov = rows @ cov_base @ rows.T
    return LsMeans(list(cells), rows, means, (cov + cov.T) / 2.0)


@dataclass
class PolicyEstimate:
    policy_means: dict  # arm -> weighted mean
    policy_vars: dict  # arm -> delta-method variance
    theta_hat: dict  # arm -> proportions over that arm's cells
    contrast: float = 0.0
    se: float = 0.0
    df: float = np.nan


def policy_mean(cell_means: np.ndarray, theta_hat: np.ndarray) -> float:
    """Proportion-weighted combination of cell means."""
    return float(np.dot(cell_means, theta_hat))


def policy_variance(cell_means: np.ndarray, mean_cov: np.ndarray,
                    theta_hat: np.ndarray, n_arm: int) -> tuple[float, float, float]:
    """Delta-method variance of a weighted policy mean.

    The last cell is the reference (on-treatment) one.  Returns the total
    and its two blocks: the multinomial proportion component and the
    cell-mean component, which add under the assumption that proportions
    and outcomes are independent.
    """
    k = theta_hat.size
    mean_part = float(theta_hat @ mean_cov @ theta_hat)
    if k == 1:
        return mean_part, 0.0, mean_part
    th = theta_hat[:-1]
    grad = cell_means[:-1] - cell_means[-1]
    v_mult = (np.diag(th) - np.outer(th, th)) / n_arm
    prop_part = float(grad @ v_mult @ grad)
    return prop_part + mean_part, prop_part, mean_part


def _policy_cells(fit: MmrmFit, dataset: TrialDataset, arm: int) -> tuple[list, np.ndarray]:
    """Final-visit cells for one arm, reference level last, with weights
    computed over every randomized subject in the arm."""
    design = fit.design
    in_arm = dataset.arm == arm
    lv = design.levels[in_arm, J - 1]
    present = sorted(set(int(x) for x in lv))
    if ON_TREATMENT_LEVEL in present:
        present = [x for x in present if x != ON_TREATMENT_LEVEL] + [ON_TREATMENT_LEVEL]
    counts = np.array([(lv == x).sum() for x in present], dtype=float)
    theta = counts / in_arm.sum()
    cells = [(arm, x) for x in present]
    return cells, theta


# ---------------------------------------------------------------------------
# Method entry points
# ---------------------------------------------------------------------------


def _contrast_df(fit: MmrmFit, ell: np.ndarray, df_method: str) -> tuple[float, float]:
    if df_method == "kr":
        return kr_contrast_df(fit, ell)
    if df_method == "satterthwaite":
        return satterthwaite_df(fit, ell), 1.0
    raise MmrmError(f"unknown df method {df_method!r}")


def infer_simple_contrast(fit: MmrmFit, ell: np.ndarray, df_method: str = "kr",
                          margin: float = DEFAULT_MARGIN, alpha: float = DEFAULT_ALPHA):
    """Scaled-F inference for a plain one-dimensional fixed-effect contrast.

    Uses the adjusted covariance for the standard error; the scale factor
    folds into the p-values and interval exactly as the adjusted F test
    prescribes (it is 1 under the Satterthwaite fallback).
    """
    est = float(ell @ fit.coefficients)
    df, scale = _contrast_df(fit, ell, df_method)
    cov = kenward_roger(fit).phi_adj if df_method == "kr" else fit.coef_cov
    se = float(np.sqrt(ell @ cov @ ell))
    fcrit = f_dist.ppf(1.0 - alpha, 1, df)
    half = se * np.sqrt(fcrit / scale)
    p_zero = float(f_dist.sf(scale * (est / se) ** 2, 1, df)) if se > 0 else 0.0
    # one-sided margin test from the signed square root of the scaled F
    tstat = np.sqrt(scale) * (est - margin) / se if se > 0 else np.inf * np.sign(est - margin)
    p_margin = float(t_dist.cdf(tstat, df))
    return est, se, df, (est - half, est + half), p_zero, p_margin


def estimate_mmrm(dataset: TrialDataset, variant: int, df_method: str = "kr",
                  margin: float = DEFAULT_MARGIN, alpha: float = DEFAULT_ALPHA) -> EstimateResult:
    """Fit one of the three repeated-measures variants and test the contrast.

    Variant 1 contrasts the final-visit marginal means directly.  Variants
    2 and 3 run the pre-specified collapse, fit cells by recoded status or
    pattern, and standardize the cell means by the observed proportions,
    with the delta-method standard error and the adjusted df of the
    fixed-weight contrast.
    """
    if variant == 1:
        spec = DesignSpec("simple")
        collapse_level, collapse_label = None, None
    else:
        target = "status" if variant == 2 else "pattern"
        coding = plan_for(dataset, target)
        collapse_level, collapse_label = coding.n_levels, coding.label
        spec = DesignSpec(target, coding)
    fit = reml_fit(dataset, spec)

    # With a single level everything is one cell per arm and the policy
    # mean is that marginal mean, so use the plain contrast machinery.
    if variant == 1 or collapse_level == 1:
        lv = 0 if variant == 1 else ON_TREATMENT_LEVEL
        cells = [(TREATMENT, lv), (CONTROL, lv)]
        lm = lsmeans(fit, J, cells, adjusted=False)
        ell = lm.rows[0] - lm.rows[1]
        est, se, df, ci, p_zero, p_margin = infer_simple_contrast(
            fit, ell, df_method, margin, alpha)
        return EstimateResult(
            method=f"MMRM{variant}", estimate=est, se=se, df=df,
            ci_lo=ci[0], ci_hi=ci[1], p_zero=p_zero, p_margin=p_margin,
            collapse_level=collapse_level, collapse_label=collapse_label,
            diagnostics={"n_iterations": fit.n_iterations, "reml_loglik": fit.reml_loglik},
        )

    policy = PolicyEstimate(policy_means={}, policy_vars={}, theta_hat={})
    ell_policy = np.zeros(fit.design.p)
    adjusted = df_method == "kr"
    for arm, sign in ((TREATMENT, 1.0), (CONTROL, -1.0)):
        cells, theta = _policy_cells(fit, dataset, arm)
        lm = lsmeans(fit, J, cells, adjusted=adjusted)
        total, _, _ = policy_variance(lm.means, lm.cov, theta, int((dataset.arm == arm).sum()))
        policy.policy_means[arm] = policy_mean(lm.means, theta)
        policy.policy_vars[arm] = total
        policy.theta_hat[arm] = theta
        ell_policy += sign * theta @ lm.rows
    est = policy.policy_means[TREATMENT] - policy.policy_means[CONTROL]
    se = float(np.sqrt(policy.policy_vars[TREATMENT] + policy.policy_vars[CONTROL]))
    df, _ = _contrast_df(fit, ell_policy, df_method)
    ci, p_zero, p_margin = t_inference(est, se, df, margin, alpha)
    return EstimateResult(
        method=f"MMRM{variant}", estimate=float(est), se=se, df=df,
        ci_lo=ci[0], ci_hi=ci[1], p_zero=p_zero, p_margin=p_margin,
        collapse_level=collapse_level, collapse_label=collapse_label,
        diagnostics={"n_iterations": fit.n_iterations, "reml_loglik": fit.reml_loglik},
    )
