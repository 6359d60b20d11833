"""Weighted estimating-equation engine with plug-in sandwich inference.

The estimator solves, for linear-in-theta mean models,

    0 = sum_i sum_d I_i(d) W_i D_i(d)' V_d^{-1} (Y_i - D_i(d) theta),

alternating between theta solves and moment estimation of the working
covariance parameters until the theta iterates stabilize.  Variance
estimates are of sandwich form J^{-1} Q J^{-1} / N and remain valid under
working covariance misspecification.

Per-cluster contributions are grouped by (regime, cluster size) so each
iteration reduces to a handful of batched einsum contractions; clusters are
processed in sorted-id order, which makes every result reproducible and
independent of input row order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit
from scipy.stats import norm, t as student_t

from .data import ClusterRecord, TrialDataset, validate
from .design import DesignKind, EmbeddedCai, SmartDesign, consistency_indicator, design_weight, enumerate_cais
from .errors import (
    InconsistentCluster,
    InsufficientData,
    NotPositiveDefinite,
    RankDeficient,
    Separation,
    ZeroVariance,
)
from .meanmodel import ContrastVector, MeanModelSpec, ThetaEstimate
from .workingcov import (
    AlphaEstimate,
    ResidualGroup,
    ResidualSet,
    WorkingCovSpec,
    build_V,
    estimate_alpha,
)

__all__ = [
    "WeightMode",
    "AdjustmentOptions",
    "FitOptions",
    "FitResult",
    "WaldResult",
    "WeightModel",
    "fit",
    "solve_theta",
    "sandwich_covariance",
    "estimate_weight_model",
    "sandwich_estimated_weights",
    "finite_sample_adjust",
    "wald_test",
    "fit_end_of_study",
    "end_of_study_contrast",
]

_MAX_COND = 1e12


class WeightMode(Enum):
    DESIGN_KNOWN = "design_known"
    ESTIMATED = "estimated"


@dataclass(frozen=True)
class AdjustmentOptions:
    enforce_nonneg_corr: bool = False
    t_reference: bool = False
    bias_correct: bool = False

    @classmethod
    def all(cls) -> "AdjustmentOptions":
        return cls(enforce_nonneg_corr=True, t_reference=True, bias_correct=True)

    def any(self) -> bool:
        return self.enforce_nonneg_corr or self.t_reference or self.bias_correct


@dataclass(frozen=True)
class FitOptions:
    tolerance: float = 1e-8
    max_iter: int = 50
    weight_mode: WeightMode = WeightMode.DESIGN_KNOWN
    adjustments: AdjustmentOptions = AdjustmentOptions()
    stage1_covariates: Tuple[str, ...] = ()
    stage2_covariates: Tuple[str, ...] = ()


@dataclass(frozen=True)
class WaldResult:
    label: str
    estimate: float
    se: float
    statistic: float
    df: Optional[int]
    p_value: float
    ci: Tuple[float, float]
    level: float


@dataclass(frozen=True)
class WeightModel:
    """Fitted randomization-probability models and their score contributions."""

    stage1_coef: np.ndarray
    stage2_coef: Dict[Tuple[int, int], np.ndarray]
    scores: np.ndarray            # (N, q), canonical cluster order
    fitted_weights: np.ndarray    # (N,)
    fallback_cells: Tuple[Tuple[int, int], ...] = ()

    @property
    def score_sum_norm(self) -> float:
        return float(np.abs(self.scores.sum(axis=0)).max()) if self.scores.size else 0.0


@dataclass(frozen=True)
class _Group:
    """Same-size clusters replicated under one regime, stacked for batching."""

    cai: EmbeddedCai
    n: int
    cluster_pos: np.ndarray  # (m,) indices into canonical cluster order
    design: np.ndarray       # (m, rows, p)
    y: np.ndarray            # (m, rows)


class _Workspace:
    """Preassembled design/outcome stacks for one dataset and mean model."""

    def __init__(
        self,
        ds: TrialDataset,
        mean_spec: MeanModelSpec,
        weights: np.ndarray,
        clusters: Sequence[ClusterRecord],
    ) -> None:
        self.ds = ds
        self.mean_spec = mean_spec
        self.clusters = list(clusters)
        self.weights = np.asarray(weights, dtype=float)
        self.N = len(self.clusters)
        self.p = mean_spec.n_params
        self.cais = enumerate_cais(ds.design)
        self.groups = self._build_groups()
        self.y_scale = 1.0 + max(
            (abs(v) for cl in self.clusters for ind in cl.individuals for v in ind.y),
            default=0.0,
        )

    # -- assembly -----------------------------------------------------------

    def _cluster_design(self, d: EmbeddedCai, cl: ClusterRecord, gamma_block: np.ndarray) -> np.ndarray:
        n_times, n_gamma = gamma_block.shape
        spec = self.mean_spec
        n_cov = len(spec.covariate_terms)
        rows = cl.n * n_times
        out = np.empty((rows, n_gamma + n_cov))
        out[:, :n_gamma] = np.tile(gamma_block, (cl.n, 1))
        for c_idx, name in enumerate(spec.covariate_terms):
            if name in self.ds.cluster_covariates:
                value = cl.x_cluster[self.ds.cluster_covariates.index(name)]
                out[:, n_gamma + c_idx] = value
            else:
                idx = self.ds.individual_covariates.index(name)
                col = np.repeat([ind.x_individual[idx] for ind in cl.individuals], n_times)
                out[:, n_gamma + c_idx] = col
        return out

    def _build_groups(self) -> List[_Group]:
        spec = self.mean_spec
        for name in spec.covariate_terms:
            if (
                name not in self.ds.cluster_covariates
                and name not in self.ds.individual_covariates
            ):
                raise ValueError(f"covariate {name!r} not present in the dataset schema")
        gamma_blocks = {
            d: np.stack([spec.basis.gamma_row(t, d) for t in spec.grid.times])
            for d in self.cais
        }
        buckets: Dict[Tuple[EmbeddedCai, int], List[Tuple[int, np.ndarray, np.ndarray]]] = {}
        for pos, cl in enumerate(self.clusters):
            y = np.asarray([v for ind in cl.individuals for v in ind.y], dtype=float)
            for d in self.cais:
                if consistency_indicator(cl, d, self.ds.design):
                    D = self._cluster_design(d, cl, gamma_blocks[d])
                    buckets.setdefault((d, cl.n), []).append((pos, D, y))
        groups = []
        for (d, n) in sorted(buckets, key=lambda k: (self.cais.index(k[0]), k[1])):
            items = buckets[(d, n)]
            groups.append(
                _Group(
                    cai=d,
                    n=n,
                    cluster_pos=np.array([i for i, _, _ in items]),
                    design=np.stack([D for _, D, _ in items]),
                    y=np.stack([y for _, _, y in items]),
                )
            )
        return groups

    # -- linear algebra over groups ------------------------------------------

    def _vinv_design(self, factors: Optional[Mapping[Tuple[EmbeddedCai, int], object]]) -> List[np.ndarray]:
        """Per group, V^{-1} D applied through the cached Cholesky factor."""
        out = []
        for g in self.groups:
            if factors is None:
                out.append(g.design)
                continue
            m, rows, p = g.design.shape
            flat = g.design.transpose(1, 0, 2).reshape(rows, m * p)
            solved = cho_solve(factors[(g.cai, g.n)], flat)
            out.append(solved.reshape(rows, m, p).transpose(1, 0, 2))
        return out

    def normal_equations(self, vinv_design: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        A = np.zeros((self.p, self.p))
        b = np.zeros(self.p)
        for g, vd in zip(self.groups, vinv_design):
            w = self.weights[g.cluster_pos]
            A += np.einsum("mrp,mrq,m->pq", g.design, vd, w, optimize=True)
            b += np.einsum("mrp,mr,m->p", vd, g.y, w, optimize=True)
        return A, b

    def solve(self, factors=None) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
        vd = self._vinv_design(factors)
        A, b = self.normal_equations(vd)
        if not np.all(np.isfinite(A)) or np.linalg.cond(A) > _MAX_COND:
            raise RankDeficient(
                "weighted normal system is singular; the mean model is not "
                "identified on this dataset"
            )
        theta = np.linalg.solve(A, b)
        return theta, A, vd

    def residual_groups(self, theta: np.ndarray) -> ResidualSet:
        groups = []
        for g in self.groups:
            eps = g.y - np.einsum("mrp,p->mr", g.design, theta)
            groups.append(
                ResidualGroup(
                    cai=g.cai,
                    weights=self.weights[g.cluster_pos],
                    eps=eps.reshape(eps.shape[0], g.n, -1),
                )
            )
        return ResidualSet(tuple(groups))

    def u_rows(
        self,
        theta: np.ndarray,
        vinv_design: Sequence[np.ndarray],
        leverage_inverse_from: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Per-cluster estimating-function contributions U_i, shape (N, p).

        With ``leverage_inverse_from`` set to the unnormalized bread matrix,
        each residual block is premultiplied by (I - H_id)^{-1} where H_id
        is that cluster-regime's hat block.
        """
        U = np.zeros((self.N, self.p))
        G = None
        if leverage_inverse_from is not None:
            G = np.linalg.inv(leverage_inverse_from)
        for g, vd in zip(self.groups, vinv_design):
            w = self.weights[g.cluster_pos]
            eps = g.y - np.einsum("mrp,p->mr", g.design, theta)
            if G is not None:
                hat = np.einsum("mrp,pq,msq,m->mrs", g.design, G, vd, w, optimize=True)
                eye = np.eye(g.design.shape[1])
                eps = np.linalg.solve(eye[None] - hat, eps[..., None])[..., 0]
            contrib = np.einsum("mrp,mr,m->mp", vd, eps, w, optimize=True)
            np.add.at(U, g.cluster_pos, contrib)
        return U

    def factorize(self, cov_spec: WorkingCovSpec, alpha: AlphaEstimate):
        factors = {}
        for key in {(g.cai, g.n) for g in self.groups}:
            V = build_V(cov_spec, alpha, key[0], key[1], self.mean_spec.grid)
            factors[key] = cho_factor(V, lower=True)
        return factors


@dataclass(frozen=True)
class FitResult:
    theta: ThetaEstimate
    alpha: AlphaEstimate
    sigma_theta: np.ndarray
    iterations: int
    converged: bool
    max_delta: float
    weight_mode: WeightMode
    adjustments_applied: Tuple[str, ...]
    n_clusters: int
    param_names: Tuple[str, ...]
    df: Optional[int]
    ee_residual_norm: float
    j_hat: np.ndarray
    q_hat: np.ndarray
    weight_model: Optional[WeightModel] = None
    mean_spec: Optional[MeanModelSpec] = field(default=None, repr=False, compare=False)
    cov_spec: Optional[WorkingCovSpec] = field(default=None, repr=False, compare=False)
    _workspace: Optional[_Workspace] = field(default=None, repr=False, compare=False)

    @property
    def p(self) -> int:
        return len(self.param_names)


def _split_theta(mean_spec: MeanModelSpec, theta: np.ndarray) -> ThetaEstimate:
    n_gamma = mean_spec.n_gamma
    return ThetaEstimate(
        gamma=theta[:n_gamma], eta=theta[n_gamma:], names=mean_spec.param_names
    )


def sandwich_covariance(j_hat: np.ndarray, q_hat: np.ndarray, n_clusters: int) -> np.ndarray:
    """Plug-in covariance of theta-hat, (1/N) J^{-1} Q J^{-1}."""
    if not np.all(np.isfinite(j_hat)) or np.linalg.cond(j_hat) > _MAX_COND:
        raise RankDeficient("bread matrix J is singular")
    ji = np.linalg.inv(j_hat)
    sigma = ji @ q_hat @ ji / n_clusters
    return (sigma + sigma.T) / 2.0


def solve_theta(
    ds: TrialDataset,
    mean_spec: MeanModelSpec,
    cov_spec: Optional[WorkingCovSpec] = None,
    alpha: Optional[AlphaEstimate] = None,
    weights: Optional[np.ndarray] = None,
) -> ThetaEstimate:
    """One weighted linear solve of the estimating equation.

    ``cov_spec``/``alpha`` absent means an identity working covariance.
    ``weights`` (aligned with clusters sorted by id) default to the design
    weights.
    """
    ws = _make_workspace(ds, mean_spec, weights)
    factors = None
    if cov_spec is not None:
        if alpha is None:
            raise ValueError("alpha estimates are required alongside cov_spec")
        factors = ws.factorize(cov_spec, alpha)
    theta, A, vd = ws.solve(factors)
    return _split_theta(mean_spec, theta)


def _canonical_clusters(ds: TrialDataset) -> List[ClusterRecord]:
    return sorted(ds.clusters, key=lambda cl: cl.cluster_id)


def _make_workspace(
    ds: TrialDataset, mean_spec: MeanModelSpec, weights: Optional[np.ndarray] = None
) -> _Workspace:
    clusters = _canonical_clusters(ds)
    if weights is None:
        weights = np.array([design_weight(cl, ds.design) for cl in clusters])
    return _Workspace(ds, mean_spec, weights, clusters)


def _require_valid(ds: TrialDataset) -> None:
    report = validate(ds)
    if report.violations:
        v = report.violations[0]
        raise InconsistentCluster(f"cluster {v.cluster_id!r}: {v.message}")
    for cai in enumerate_cais(ds.design):
        if not any(consistency_indicator(cl, cai, ds.design) for cl in ds.clusters):
            raise InsufficientData(f"no cluster is consistent with embedded regime {cai}")


def fit(
    ds: TrialDataset,
    mean_spec: MeanModelSpec,
    cov_spec: WorkingCovSpec,
    options: FitOptions = FitOptions(),
) -> FitResult:
    """Alternate theta solves with working-covariance estimation to a root.

    The iteration starts from an identity working covariance, stops when the
    sup-norm change in theta falls below ``options.tolerance``, and returns
    the best iterate with ``converged=False`` after ``max_iter`` sweeps.
    """
    _require_valid(ds)
    clusters = _canonical_clusters(ds)
    cais = enumerate_cais(ds.design)

    weight_model = None
    if options.weight_mode is WeightMode.ESTIMATED:
        weight_model = estimate_weight_model(
            ds, options.stage1_covariates, options.stage2_covariates
        )
        weights = weight_model.fitted_weights
    else:
        weights = np.array([design_weight(cl, ds.design) for cl in clusters])

    ws = _Workspace(ds, mean_spec, weights, clusters)
    theta0, _, _ = ws.solve(None)
    alpha0 = estimate_alpha(ws.residual_groups(theta0), cov_spec, cais)

    if not options.tolerance < math.inf:
        # degenerate stopping rule: accept the identity-covariance fit
        theta, alpha = theta0, alpha0
        iterations, converged, max_delta = 0, True, 0.0
        factors = None
    else:
        # invariant: theta is always the exact root under V(alpha)
        theta, alpha = theta0, alpha0
        factors = None
        iterations = 0
        converged = False
        max_delta = math.inf
        for k in range(1, options.max_iter + 1):
            factors = ws.factorize(cov_spec, alpha)
            theta_new, _, _ = ws.solve(factors)
            max_delta = float(np.abs(theta_new - theta).max())
            iterations = k
            theta = theta_new
            if max_delta < options.tolerance:
                converged = True
                break
            if k < options.max_iter:
                alpha = estimate_alpha(ws.residual_groups(theta), cov_spec, cais)
        if not converged:
            warnings.warn(
                f"fit did not converge in {options.max_iter} iterations "
                f"(last delta {max_delta:.3e})",
                RuntimeWarning,
            )

    result = _assemble(
        ws, mean_spec, cov_spec, theta, alpha, factors,
        iterations=iterations, converged=converged, max_delta=max_delta,
        weight_mode=options.weight_mode, weight_model=weight_model,
    )
    if options.adjustments.any():
        result = finite_sample_adjust(result, options.adjustments)
    return result


def _assemble(
    ws: _Workspace,
    mean_spec: MeanModelSpec,
    cov_spec: WorkingCovSpec,
    theta: np.ndarray,
    alpha: AlphaEstimate,
    factors,
    *,
    iterations: int,
    converged: bool,
    max_delta: float,
    weight_mode: WeightMode,
    weight_model: Optional[WeightModel],
    adjustments: Tuple[str, ...] = (),
    df: Optional[int] = None,
    bias_correct: bool = False,
) -> FitResult:
    vd = ws._vinv_design(factors)
    A, b = ws.normal_equations(vd)
    ee_residual = float(np.abs(b - A @ theta).max())
    j_hat = A / ws.N
    leverage = A if bias_correct else None
    U = ws.u_rows(theta, vd, leverage_inverse_from=leverage)
    q_hat = U.T @ U / ws.N
    if weight_mode is WeightMode.ESTIMATED and weight_model is not None:
        q_hat = _score_corrected_q(q_hat, U, weight_model.scores)
    sigma = sandwich_covariance(j_hat, q_hat, ws.N)
    return FitResult(
        theta=_split_theta(mean_spec, theta),
        alpha=alpha,
        sigma_theta=sigma,
        iterations=iterations,
        converged=converged,
        max_delta=max_delta,
        weight_mode=weight_mode,
        adjustments_applied=adjustments,
        n_clusters=ws.N,
        param_names=mean_spec.param_names,
        df=df,
        ee_residual_norm=ee_residual,
        j_hat=j_hat,
        q_hat=q_hat,
        weight_model=weight_model,
        mean_spec=mean_spec,
        cov_spec=cov_spec,
        _workspace=ws,
    )


def _score_corrected_q(q_hat: np.ndarray, U: np.ndarray, scores: np.ndarray) -> np.ndarray:
    N = U.shape[0]
    B = U.T @ scores / N
    if not np.any(B):
        return q_hat  # projection of zero: plain sandwich
    M = scores.T @ scores / N
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > _MAX_COND:
        raise RankDeficient("score outer-product matrix is singular")
    corrected = q_hat - B @ np.linalg.solve(M, B.T)
    return (corrected + corrected.T) / 2.0


def sandwich_estimated_weights(fit_result: FitResult, wm: WeightModel) -> np.ndarray:
    """Sandwich with the score-projection-corrected meat matrix."""
    ws = fit_result._workspace
    if ws is None:
        raise ValueError("fit result carries no workspace; refit before adjusting")
    factors = None
    if fit_result.cov_spec is not None and fit_result.iterations > 0:
        factors = ws.factorize(fit_result.cov_spec, fit_result.alpha)
    vd = ws._vinv_design(factors)
    U = ws.u_rows(fit_result.theta.full, vd)
    q_raw = U.T @ U / ws.N
    q_corr = _score_corrected_q(q_raw, U, wm.scores)
    return sandwich_covariance(fit_result.j_hat, q_corr, ws.N)


# -- estimated weights ---------------------------------------------------------


def _logistic_mle(X: np.ndarray, y: np.ndarray, max_iter: int = 50) -> np.ndarray:
    """Newton-Raphson MLE for a canonical-link binary model; raises on separation."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = expit(X @ beta)
        grad = X.T @ (y - p)
        H = X.T @ (X * (p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise Separation("singular information matrix in weight model") from exc
        beta = beta + step
        if np.abs(beta).max() > 15.0:
            raise Separation("weight-model MLE is diverging")
        if np.abs(step).max() < 1e-12:
            break
    if np.abs(X.T @ (y - expit(X @ beta))).max() > 1e-8 * max(1, len(y)):
        raise Separation("weight-model score did not vanish")
    return beta


def _design_columns(
    clusters: Sequence[ClusterRecord], ds: TrialDataset, names: Sequence[str]
) -> np.ndarray:
    cols = [np.ones(len(clusters))]
    for name in names:
        if name not in ds.cluster_covariates:
            raise ValueError(
                f"weight-model covariate {name!r} must be a cluster-level covariate"
            )
        idx = ds.cluster_covariates.index(name)
        cols.append(np.array([cl.x_cluster[idx] for cl in clusters]))
    return np.column_stack(cols)


def _observed_a2(cl: ClusterRecord, kind: DesignKind) -> Optional[int]:
    if kind is DesignKind.I and cl.r == 1:
        return cl.a2r
    return cl.a2nr


def estimate_weight_model(
    ds: TrialDataset,
    stage1_covariates: Sequence[str] = (),
    stage2_covariates: Sequence[str] = (),
) -> WeightModel:
    """Per-cell maximum-likelihood randomization models and implied weights.

    Stage-two models are fit separately within each (a1, r) cell where the
    design re-randomizes.  Cells whose MLE separates fall back to the design
    probabilities (flagged) and contribute no score terms.
    """
    clusters = _canonical_clusters(ds)
    N = len(clusters)
    design = ds.design
    kind = design.kind

    X1 = _design_columns(clusters, ds, stage1_covariates)
    y1 = np.array([1.0 if cl.a1 == 1 else 0.0 for cl in clusters])
    fallback: List[Tuple[int, int]] = []
    score_blocks: List[np.ndarray] = []

    try:
        beta1 = _logistic_mle(X1, y1)
        p1_plus = expit(X1 @ beta1)
        score_blocks.append(X1 * (y1 - p1_plus)[:, None])
    except Separation:
        beta1 = np.array([math.log(design.p_a1 / (1.0 - design.p_a1))] + [0.0] * (X1.shape[1] - 1))
        p1_plus = np.full(N, design.p_a1)
        fallback.append((0, -9))  # sentinel for the first-stage model

    prob = np.where(y1 == 1.0, p1_plus, 1.0 - p1_plus)

    X2 = _design_columns(clusters, ds, stage2_covariates)
    stage2_coef: Dict[Tuple[int, int], np.ndarray] = {}
    for cell in sorted(design.p_a2_given):
        a1_c, r_c = cell
        members = np.array(
            [i for i, cl in enumerate(clusters) if cl.a1 == a1_c and cl.r == r_c],
            dtype=int,
        )
        if members.size == 0:
            continue
        a2_obs = np.array([_observed_a2(clusters[i], kind) for i in members], dtype=float)
        y2 = (a2_obs == 1).astype(float)
        Xc = X2[members]
        design_p = design.p_a2_given[cell]
        try:
            beta2 = _logistic_mle(Xc, y2)
            p2_plus = expit(Xc @ beta2)
            block = np.zeros((N, Xc.shape[1]))
            block[members] = Xc * (y2 - p2_plus)[:, None]
            score_blocks.append(block)
        except Separation:
            beta2 = np.array([math.log(design_p / (1.0 - design_p))] + [0.0] * (Xc.shape[1] - 1))
            p2_plus = np.full(members.size, design_p)
            fallback.append(cell)
        stage2_coef[cell] = beta2
        prob[members] *= np.where(y2 == 1.0, p2_plus, 1.0 - p2_plus)

    scores = np.hstack(score_blocks) if score_blocks else np.zeros((N, 0))
    return WeightModel(
        stage1_coef=beta1,
        stage2_coef=stage2_coef,
        scores=scores,
        fitted_weights=1.0 / prob,
        fallback_cells=tuple(c for c in fallback if c != (0, -9)),
    )


# -- finite-sample adjustments and Wald inference ------------------------------


def _clamp_nonneg(alpha: AlphaEstimate) -> AlphaEstimate:
    rho_w = {k: max(v, 0.0) for k, v in alpha.rho_w.items()}
    rho_b = {k: max(v, 0.0) for k, v in alpha.rho_b.items()}
    return replace(alpha, rho_w=rho_w, rho_b=rho_b)


def finite_sample_adjust(fit_result: FitResult, options: AdjustmentOptions) -> FitResult:
    """Small-sample refinements applied on top of a converged fit.

    Nonnegative-correlation clamping refits theta once under the clamped
    working covariance; the bias correction inflates each cluster's residual
    by its inverse leverage inside the meat matrix; the t reference switches
    Wald inference to ``t`` with ``N - p`` degrees of freedom.
    """
    ws = fit_result._workspace
    if ws is None:
        raise ValueError("fit result carries no workspace; refit before adjusting")
    applied = list(fit_result.adjustments_applied)
    theta = fit_result.theta.full
    alpha = fit_result.alpha

    if options.enforce_nonneg_corr:
        alpha = _clamp_nonneg(alpha)
        factors = ws.factorize(fit_result.cov_spec, alpha)
        theta, _, _ = ws.solve(factors)
        applied.append("enforce_nonneg_corr")
    elif fit_result.cov_spec is not None and fit_result.iterations > 0:
        factors = ws.factorize(fit_result.cov_spec, alpha)
    else:
        factors = None

    if options.bias_correct:
        applied.append("bias_correct")

    df = fit_result.df
    if options.t_reference:
        df = ws.N - ws.p
        applied.append("t_reference")

    updated = _assemble(
        ws, fit_result.mean_spec, fit_result.cov_spec, theta, alpha, factors,
        iterations=fit_result.iterations, converged=fit_result.converged,
        max_delta=fit_result.max_delta, weight_mode=fit_result.weight_mode,
        weight_model=fit_result.weight_model,
        adjustments=tuple(applied), df=df, bias_correct=options.bias_correct,
    )
    return updated


def wald_test(fit_result: FitResult, contrast: ContrastVector, level: float = 0.95) -> WaldResult:
    """Univariate Wald test of ``c' theta = 0`` with a two-sided p-value."""
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    c = contrast.c
    if c.size != fit_result.p:
        raise ValueError(f"contrast has {c.size} entries, fit has {fit_result.p} parameters")
    # work with a max-normalized copy so the statistic is scale-stable
    scale = float(np.abs(c).max())
    cn = c / scale
    est_n = float(cn @ fit_result.theta.full)
    var_n = float(cn @ fit_result.sigma_theta @ cn)
    if var_n <= 0.0:
        raise ZeroVariance(f"contrast {contrast.label!r} has nonpositive variance")
    se_n = math.sqrt(var_n)
    statistic = est_n / se_n
    estimate = scale * est_n
    se = scale * se_n
    if fit_result.df is None:
        p_value = 2.0 * float(norm.sf(abs(statistic)))
        quantile = float(norm.ppf(0.5 + level / 2.0))
    else:
        p_value = 2.0 * float(student_t.sf(abs(statistic), fit_result.df))
        quantile = float(student_t.ppf(0.5 + level / 2.0, fit_result.df))
    ci = (estimate - quantile * se, estimate + quantile * se)
    return WaldResult(
        label=contrast.label,
        estimate=estimate,
        se=se,
        statistic=statistic,
        df=fit_result.df,
        p_value=p_value,
        ci=ci,
        level=level,
    )


# -- end-of-study-only comparator ----------------------------------------------


@dataclass(frozen=True)
class EndOfStudyFit:
    """Weighted fit of per-regime means using only the final measurement."""

    cell_means: np.ndarray
    eta: np.ndarray
    sigma_theta: np.ndarray
    cais: Tuple[EmbeddedCai, ...]
    param_names: Tuple[str, ...]
    n_clusters: int
    sigma2: float
    rho_b: float
    df: Optional[int]


def fit_end_of_study(
    ds: TrialDataset,
    covariate_terms: Sequence[str] = (),
    tolerance: float = 1e-8,
    max_iter: int = 50,
    t_reference: bool = False,
) -> EndOfStudyFit:
    """Single-time analysis of the final outcome with an exchangeable
    between-person working correlation, for efficiency comparisons against
    the longitudinal fit."""
    _require_valid(ds)
    clusters = _canonical_clusters(ds)
    cais = enumerate_cais(ds.design)
    N = len(clusters)
    weights = np.array([design_weight(cl, ds.design) for cl in clusters])

    n_cells = len(cais)
    names = tuple(f"mu[{c}]" for c in cais) + tuple(f"eta_{c}" for c in covariate_terms)
    p = n_cells + len(covariate_terms)

    entries = []  # (cluster_pos, cai index, n, D, y)
    for pos, cl in enumerate(clusters):
        y = np.array([ind.y[-1] for ind in cl.individuals])
        for ci, d in enumerate(cais):
            if not consistency_indicator(cl, d, ds.design):
                continue
            D = np.zeros((cl.n, p))
            D[:, ci] = 1.0
            for k, name in enumerate(covariate_terms):
                if name in ds.cluster_covariates:
                    D[:, n_cells + k] = cl.x_cluster[ds.cluster_covariates.index(name)]
                elif name in ds.individual_covariates:
                    idx = ds.individual_covariates.index(name)
                    D[:, n_cells + k] = [ind.x_individual[idx] for ind in cl.individuals]
                else:
                    raise ValueError(f"covariate {name!r} not present in the dataset schema")
            entries.append((pos, ci, cl.n, D, y))

    def solve(sigma2: float, rho_b: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        A = np.zeros((p, p))
        b = np.zeros(p)
        vinv_cache: Dict[int, np.ndarray] = {}
        for pos, ci, n, D, y in entries:
            if n not in vinv_cache:
                V = sigma2 * ((1.0 - rho_b) * np.eye(n) + rho_b * np.ones((n, n)))
                vinv_cache[n] = np.linalg.inv(V)
            vd = vinv_cache[n] @ D
            w = weights[pos]
            A += w * D.T @ vd
            b += w * vd.T @ y
        if np.linalg.cond(A) > _MAX_COND:
            raise RankDeficient("end-of-study normal system is singular")
        theta = np.linalg.solve(A, b)
        U = np.zeros((N, p))
        for pos, ci, n, D, y in entries:
            vd = vinv_cache[n] @ D
            U[pos] += weights[pos] * vd.T @ (y - D @ theta)
        return theta, A, U

    def alpha_step(theta: np.ndarray) -> Tuple[float, float]:
        s_num = s_den = b_num = b_den = 0.0
        for pos, ci, n, D, y in entries:
            w = weights[pos]
            eps = y - D @ theta
            s_num += w * float(eps @ eps)
            s_den += w * n
            if n >= 2:
                b_num += w * float(eps.sum() ** 2 - eps @ eps)
                b_den += w * n * (n - 1)
        sigma2 = s_num / s_den
        if sigma2 <= 0.0:
            raise ZeroVariance("degenerate final-time variance")
        rho_b = float(np.clip(b_num / b_den / sigma2, -1 + 1e-8, 1 - 1e-8)) if b_den > 0 else 0.0
        return sigma2, rho_b

    theta, A, U = solve(1.0, 0.0)
    sigma2, rho_b = alpha_step(theta)
    for _ in range(max_iter):
        theta_new, A, U = solve(sigma2, rho_b)
        if np.abs(theta_new - theta).max() < tolerance:
            theta = theta_new
            break
        theta = theta_new
        sigma2, rho_b = alpha_step(theta)
    j_hat = A / N
    q_hat = U.T @ U / N
    sigma = sandwich_covariance(j_hat, q_hat, N)
    return EndOfStudyFit(
        cell_means=theta[:n_cells],
        eta=theta[n_cells:],
        sigma_theta=sigma,
        cais=tuple(cais),
        param_names=names,
        n_clusters=N,
        sigma2=sigma2,
        rho_b=rho_b,
        df=(N - p) if t_reference else None,
    )


def end_of_study_contrast(
    eos: EndOfStudyFit, d: EmbeddedCai, d_prime: EmbeddedCai, level: float = 0.95
) -> WaldResult:
    """Wald comparison of two regime means from the end-of-study-only fit."""
    if d == d_prime:
        raise ValueError("contrast requires two distinct embedded regimes")
    c = np.zeros(len(eos.param_names))
    c[eos.cais.index(d)] = 1.0
    c[eos.cais.index(d_prime)] = -1.0
    estimate = float(c[: len(eos.cais)] @ eos.cell_means)
    var = float(c @ eos.sigma_theta @ c)
    if var <= 0.0:
        raise ZeroVariance("end-of-study contrast has nonpositive variance")
    se = math.sqrt(var)
    statistic = estimate / se
    if eos.df is None:
        p_value = 2.0 * float(norm.sf(abs(statistic)))
        quantile = float(norm.ppf(0.5 + level / 2.0))
    else:
        p_value = 2.0 * float(student_t.sf(abs(statistic), eos.df))
        quantile = float(student_t.ppf(0.5 + level / 2.0, eos.df))
    return WaldResult(
        label=f"end_of_study_static {d} vs {d_prime}",
        estimate=estimate,
        se=se,
        statistic=statistic,
        df=eos.df,
        p_value=p_value,
        ci=(estimate - quantile * se, estimate + quantile * se),
        level=level,
    )
