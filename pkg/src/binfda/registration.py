"""Registration of binary learning curves.

Latent aligned log-odds curves are modelled as a spline mean plus spline
principal components with standard normal scores (generalized FPCA with a
logit link), fitted by variational EM on the quadratic logistic bound of
Jaakkola and Jordan. Given the curves, each subject's monotone spline warp
is re-estimated by maximizing the Bernoulli log-likelihood of its raw
outcomes. The two steps alternate until the total log-likelihood settles.

Time convention: ``gamma_i`` maps observed trial position ``s`` to internal
time, so the probability of success at ``s`` is
``inverse_logit(nu_star_i(gamma_i(s)))``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, log_expit

from binfda import diagnostics
from binfda.basis import SplineBasis, Warp, eval_basis, eval_warp
from binfda.errors import GroupError, InvalidSeries
from binfda.fdcore import FunctionalSample, Grid, SampleKind, TrialSeries
from binfda.transforms import LOGIT_EPS, clr_forward, inverse_logit, warp_derivative

logger = logging.getLogger(__name__)

LOGIT_BOUND = float(np.log((1 - LOGIT_EPS) / LOGIT_EPS))


@dataclass(frozen=True)
class RegistrationConfig:
    K_a: int = 4
    K_p: int = 4
    n_components: int = 10
    max_outer_iters: int = 20
    outer_tol: float = 1e-4
    inner_tol: float = 1e-5
    max_inner_iters: int = 500
    seed: int = 0
    grid_size: Optional[int] = None
    warp_ridge: float = 20.0
    warp_max_iter: int = 200
    warp_gtol: float = 1e-6

    def __post_init__(self):
        if self.K_a < 2 or self.K_p < 2:
            raise ValueError("K_a and K_p must be at least 2")
        if self.n_components < 1:
            raise ValueError("n_components must be at least 1")
        if min(self.outer_tol, self.inner_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ValueError("iteration caps must be positive")

    @property
    def amplitude_basis(self) -> SplineBasis:
        return SplineBasis.uniform(self.K_a, min(3, self.K_a - 1))

    @property
    def phase_basis(self) -> SplineBasis:
        return SplineBasis.uniform(self.K_p, min(3, self.K_p - 1))


# --------------------------------------------------------------------------
# Generalized FPCA by variational EM
# --------------------------------------------------------------------------

def _jj_lambda(xi):
    xi = np.abs(xi)
    out = np.full_like(xi, 0.125)
    big = xi > 1e-6
    out[big] = np.tanh(0.5 * xi[big]) / (4.0 * xi[big])
    return out


@dataclass(eq=False)
class GfpcaFit:
    """Result of one GFPCA fit.

    ``coefficients[i]`` is the spline coefficient vector of subject ``i``'s
    posterior-mean log-odds curve, ``mean_coef + components @ scores[i]``.
    """

    basis: SplineBasis
    mean_coef: np.ndarray
    components: np.ndarray
    scores: np.ndarray
    score_cov: np.ndarray
    coefficients: np.ndarray
    degenerate: np.ndarray
    bound_trace: list
    converged: bool
    xi: list = field(default_factory=list, repr=False)


def _running_mean(y: np.ndarray, window: int) -> np.ndarray:
    kernel = np.ones(window)
    total = np.convolve(y, kernel, mode="same")
    count = np.convolve(np.ones_like(y, dtype=float), kernel, mode="same")
    return total / count


def _initial_coefficients(times, outcomes, basis: SplineBasis) -> np.ndarray:
    coefs = []
    for t, y in zip(times, outcomes):
        window = max(1, len(y) // 20)
        p = np.clip(_running_mean(y.astype(float), window), 0.5 / window, 1 - 0.5 / window)
        p = np.clip(p, LOGIT_EPS, 1 - LOGIT_EPS)
        B = basis.design(t)
        gram = B.T @ B + 1e-8 * np.eye(basis.num_basis)
        coefs.append(linalg.solve(gram, B.T @ np.log(p / (1 - p)), assume_a="pos"))
    return np.array(coefs)


def _degenerate_coefficients(outcomes, basis: SplineBasis) -> tuple[np.ndarray, np.ndarray]:
    flags = np.array([y.min() == y.max() for y in outcomes])
    sat = np.array([LOGIT_BOUND if y[0] == 1 else -LOGIT_BOUND for y in outcomes])
    return flags, np.outer(sat, np.ones(basis.num_basis))


def gfpca_step(times: Sequence[np.ndarray], outcomes: Sequence[np.ndarray],
               config: RegistrationConfig, init: Optional[GfpcaFit] = None) -> GfpcaFit:
    """Fit subject log-odds curves to binary outcomes at the given internal times.

    Subjects whose outcomes are all 0 or all 1 are flagged, left out of the
    fit and pinned to the clamped log-odds bound.
    """
    basis = config.amplitude_basis
    Ka = basis.num_basis
    outcomes = [np.asarray(y, dtype=float) for y in outcomes]
    degenerate, sat_coef = _degenerate_coefficients(outcomes, basis)
    keep = np.flatnonzero(~degenerate)
    n_all = len(outcomes)
    if degenerate.any():
        diagnostics.record("gfpca_degenerate_subject", int(degenerate.sum()))
        logger.info("%d subject(s) with constant outcomes pinned to the clamp bound",
                    degenerate.sum())
    n_fit = keep.size
    K = max(0, min(config.n_components, Ka, n_fit - 1))
    if K < config.n_components:
        logger.debug("GFPCA components capped at %d (requested %d)", K, config.n_components)

    if n_fit == 0:
        return GfpcaFit(basis, np.zeros(Ka), np.zeros((Ka, 0)), np.zeros((n_all, 0)),
                        np.zeros((n_all, 0, 0)), sat_coef, degenerate, [], True)

    lengths = np.array([outcomes[i].size for i in keep])
    starts = np.r_[0, np.cumsum(lengths)[:-1]]
    owner = np.repeat(np.arange(n_fit), lengths)
    B = np.vstack([basis.design(times[i]) for i in keep])
    y = np.concatenate([outcomes[i] for i in keep])
    BB = np.einsum("jk,jl->jkl", B, B)
    r = np.add.reduceat(B * (y - 0.5)[:, None], starts, axis=0)

    if init is not None and init.components.shape[1] == K and not np.any(init.degenerate[keep]):
        alpha = init.mean_coef.copy()
        Psi = init.components.copy()
        theta0 = init.coefficients[keep]
    else:
        theta0 = _initial_coefficients([times[i] for i in keep], [outcomes[i] for i in keep],
                                       basis)
        alpha = theta0.mean(axis=0)
        Psi = np.zeros((Ka, K))
        if K:
            _, sv, vt = linalg.svd(theta0 - alpha, full_matrices=False)
            Psi = vt[:K].T * (sv[:K] / np.sqrt(max(n_fit - 1, 1)))
            # a zero column is a fixed point of EM; nudge it off deterministically
            jitter = np.random.default_rng(config.seed).normal(scale=1e-3, size=Psi.shape)
            Psi = Psi + jitter
    xi = np.abs(np.einsum("jk,jk->j", B, theta0[owner]))

    eyeK = np.eye(K)
    trace = []
    converged = False
    m = np.zeros((n_fit, K))
    S = np.broadcast_to(eyeK, (n_fit, K, K)).copy()
    for _ in range(config.max_inner_iters):
        lam = _jj_lambda(xi)
        G = np.add.reduceat(BB * lam[:, None, None], starts, axis=0)
        # E-step: Gaussian posterior of the scores
        if K:
            P = eyeK + 2.0 * np.einsum("ak,nab,bl->nkl", Psi, G, Psi)
            S = np.linalg.inv(P)
            S = 0.5 * (S + np.swapaxes(S, 1, 2))
            rhs = np.einsum("ak,na->nk", Psi, r - 2.0 * G @ alpha)
            m = np.einsum("nkl,nl->nk", S, rhs)
        theta = alpha + m @ Psi.T
        # variational parameters
        M = np.einsum("na,nb->nab", theta, theta)
        if K:
            M = M + np.einsum("ak,nkl,bl->nab", Psi, S, Psi)
        xi = np.sqrt(np.maximum(np.einsum("ja,jab,jb->j", B, M[owner], B), 0.0))
        lam = _jj_lambda(xi)
        G = np.add.reduceat(BB * lam[:, None, None], starts, axis=0)
        # M-step for [alpha, Psi] jointly
        mt = np.hstack([np.ones((n_fit, 1)), m])
        R = np.einsum("nk,nl->nkl", mt, mt)
        R[:, 1:, 1:] += S
        A = np.einsum("nkl,nab->kalb", R, G).reshape((K + 1) * Ka, (K + 1) * Ka)
        rhs = 0.5 * (r.T @ mt).reshape(-1, order="F")
        A_sym = 0.5 * (A + A.T)
        try:
            vec = linalg.solve(A_sym, rhs, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            diagnostics.record("gfpca_ridge")
            logger.info("singular M-step system, adding ridge 1e-8")
            vec = linalg.solve(A_sym + 1e-8 * np.eye(A.shape[0]), rhs)
        Theta = vec.reshape(Ka, K + 1, order="F")
        alpha, Psi = Theta[:, 0].copy(), Theta[:, 1:].copy()

        bound = _variational_bound(B, y, owner, xi, lam, alpha, Psi, m, S)
        if trace and abs(bound - trace[-1]) <= config.inner_tol * abs(trace[-1]):
            trace.append(bound)
            converged = True
            break
        trace.append(bound)

    coefficients = sat_coef.copy()
    coefficients[keep] = alpha + m @ Psi.T
    scores = np.zeros((n_all, K))
    scores[keep] = m
    cov = np.zeros((n_all, K, K))
    cov[keep] = S
    return GfpcaFit(basis, alpha, Psi, scores, cov, coefficients, degenerate, trace, converged)


def _variational_bound(B, y, owner, xi, lam, alpha, Psi, m, S) -> float:
    theta = alpha + m @ Psi.T
    ex = np.einsum("ja,ja->j", B, theta[owner])
    ex2 = ex ** 2
    K = Psi.shape[1]
    if K:
        C = np.einsum("ak,nkl,bl->nab", Psi, S, Psi)
        ex2 = ex2 + np.einsum("ja,jab,jb->j", B, C[owner], B)
    obs = log_expit(xi) - 0.5 * xi + lam * xi ** 2 + (y - 0.5) * ex - lam * ex2
    kl = 0.0
    if K:
        _, logdet = np.linalg.slogdet(S)
        kl = 0.5 * np.sum(np.trace(S, axis1=1, axis2=2) + np.sum(m ** 2, axis=1) - K - logdet)
    return float(obs.sum() - kl)


# --------------------------------------------------------------------------
# Warp estimation
# --------------------------------------------------------------------------

def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def bernoulli_loglik(nu, outcomes) -> float:
    nu = np.asarray(nu, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    return float(np.sum(y * nu - np.logaddexp(0.0, nu)))


class _WarpObjective:
    """Penalized negative log-likelihood in log-increment coordinates.

    The penalty ``ridge * ||c - c_identity||^2`` is on the scale of the total
    log-likelihood (a Gaussian prior on the coefficients); the whole objective
    is divided by the trial count to keep the optimizer well scaled.
    """

    def __init__(self, times, outcomes, template: SplineBasis, template_coef, basis_p, ridge):
        self.y = np.asarray(outcomes, dtype=float)
        self.Bp = basis_p.design(times)
        k = basis_p.num_basis
        self.L = np.tril(np.ones((k, k - 1)), -1)
        self.c_id = basis_p.greville
        self.spl = template.spline(template_coef)
        self.dspl = self.spl.derivative()
        self.ridge = ridge
        self.n = self.y.size

    def coefficients(self, z):
        c = self.L @ _softmax(z)
        c[-1] = 1.0
        return c

    def loglik(self, c) -> float:
        g = np.clip(self.Bp @ c, 0.0, 1.0)
        return bernoulli_loglik(self.spl(g), self.y)

    def __call__(self, z):
        d = _softmax(z)
        c = self.L @ d
        g = np.clip(self.Bp @ c, 0.0, 1.0)
        nu = self.spl(g)
        ll = np.sum(self.y * nu - np.logaddexp(0.0, nu))
        dev = c - self.c_id
        obj = (-ll + self.ridge * dev @ dev) / self.n
        resid = (self.y - expit(nu)) * self.dspl(g)
        grad_c = (-(self.Bp.T @ resid) + 2.0 * self.ridge * dev) / self.n
        grad_d = self.L.T @ grad_c
        return obj, d * (grad_d - d @ grad_d)


def _z_from_warp(warp: Warp) -> np.ndarray:
    inc = np.diff(warp.coefficients)
    return np.log(np.maximum(inc, 1e-12))


def warp_step(times, outcomes, template_coef, config: RegistrationConfig,
              start: Optional[Warp] = None) -> Warp:
    """Monotone warp maximizing the Bernoulli log-likelihood of ``outcomes``.

    ``template_coef`` are the amplitude-spline coefficients of the target
    log-odds curve on internal time. The search starts from the identity and,
    if given, from ``start``; the best penalized candidate wins, so the
    returned likelihood is never below that of the identity (or of ``start``).
    """
    basis_p = config.phase_basis
    identity = Warp.identity(basis_p)
    obj = _WarpObjective(times, outcomes, config.amplitude_basis, template_coef, basis_p,
                         config.warp_ridge)
    starts = [_z_from_warp(identity)]
    if start is not None:
        starts.append(_z_from_warp(start))
    candidates = list(starts)
    for z0 in starts:
        try:
            res = optimize.minimize(obj, z0, jac=True, method="BFGS",
                                    options={"maxiter": config.warp_max_iter,
                                             "gtol": config.warp_gtol})
        except (ValueError, FloatingPointError, linalg.LinAlgError):
            res = None
        if res is None or not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            diagnostics.record("warp_optimizer_failure")
            continue
        candidates.append(res.x)
    values = [obj(z)[0] for z in candidates]
    best = candidates[int(np.argmin(values))]
    try:
        return Warp(basis_p, obj.coefficients(best))
    except ValueError:
        diagnostics.record("warp_optimizer_failure")
        return identity


# --------------------------------------------------------------------------
# Outer loop
# --------------------------------------------------------------------------

@dataclass(eq=False)
class RegistrationResult:
    """Registered cohort.

    Curves are stored as spline coefficients; the sampled views
    (``aligned_logit``, ``unaligned_logit``, ``warp_clr`` ...) are evaluated on
    ``grid`` on first access.
    """

    grid: Grid
    subject_ids: tuple
    labels: tuple
    delay: int
    config: RegistrationConfig
    coefficients: np.ndarray
    warps: list
    loglik_trace: list
    converged: bool
    degenerate: np.ndarray

    def _clamped(self, values):
        out = np.clip(values, -LOGIT_BOUND, LOGIT_BOUND)
        return out

    @cached_property
    def aligned_logit(self) -> FunctionalSample:
        B = eval_basis(self.config.amplitude_basis, self.grid)
        return FunctionalSample(self.grid, self._clamped(self.coefficients @ B.T), self.labels,
                                SampleKind.ALIGNED_LOGIT)

    @cached_property
    def aligned_prob(self) -> FunctionalSample:
        return FunctionalSample(self.grid, inverse_logit(self.aligned_logit.values), self.labels,
                                SampleKind.PROBABILITY)

    @cached_property
    def warp_values(self) -> FunctionalSample:
        vals = np.array([eval_warp(w, self.grid) for w in self.warps])
        return FunctionalSample(self.grid, vals, self.labels, SampleKind.WARP)

    @cached_property
    def unaligned_logit(self) -> FunctionalSample:
        basis = self.config.amplitude_basis
        vals = np.array([basis.spline(c)(g) for c, g in
                         zip(self.coefficients, self.warp_values.values)])
        return FunctionalSample(self.grid, self._clamped(vals), self.labels,
                                SampleKind.UNALIGNED_LOGIT)

    @cached_property
    def unaligned_prob(self) -> FunctionalSample:
        return FunctionalSample(self.grid, inverse_logit(self.unaligned_logit.values),
                                self.labels, SampleKind.PROBABILITY)

    @cached_property
    def warp_clr(self) -> FunctionalSample:
        vals = np.array([clr_forward(warp_derivative(w, self.grid), self.grid).values
                         for w in self.warps])
        return FunctionalSample(self.grid, vals, self.labels, SampleKind.WARP_CLR)

    def to_dict(self) -> dict:
        return {
            "delay": self.delay,
            "grid_size": self.grid.n_points,
            "subject_ids": list(self.subject_ids),
            "labels": list(self.labels),
            "amplitude_coefficients": self.coefficients.tolist(),
            "warp_coefficients": [w.coefficients.tolist() for w in self.warps],
            "loglik_trace": list(self.loglik_trace),
            "converged": bool(self.converged),
            "degenerate": [bool(d) for d in self.degenerate],
            "config": asdict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RegistrationResult":
        names = {f.name for f in fields(RegistrationConfig)}
        config = RegistrationConfig(**{k: v for k, v in doc["config"].items() if k in names})
        basis_p = config.phase_basis
        return cls(
            grid=Grid(doc["grid_size"]),
            subject_ids=tuple(doc["subject_ids"]),
            labels=tuple(doc["labels"]),
            delay=int(doc["delay"]),
            config=config,
            coefficients=np.array(doc["amplitude_coefficients"], dtype=float),
            warps=[Warp(basis_p, c) for c in doc["warp_coefficients"]],
            loglik_trace=list(doc["loglik_trace"]),
            converged=bool(doc["converged"]),
            degenerate=np.array(doc["degenerate"], dtype=bool),
        )

    @classmethod
    def from_json(cls, text: str) -> "RegistrationResult":
        return cls.from_dict(json.loads(text))


def total_loglik(data: Sequence[TrialSeries], coefficients, warps, basis: SplineBasis) -> float:
    total = 0.0
    for s, c, w in zip(data, coefficients, warps):
        nu = np.clip(basis.spline(c)(w(s.times)), -LOGIT_BOUND, LOGIT_BOUND)
        total += bernoulli_loglik(nu, s.outcomes)
    return total


def register(data: Sequence[TrialSeries], config: RegistrationConfig = RegistrationConfig()
             ) -> RegistrationResult:
    """Jointly estimate latent probability curves and warps for one stage.

    The first pass aligns every subject to the cohort mean curve; later
    passes align each subject to its own GFPCA curve and refit, keeping an
    iterate only if it does not lower the total log-likelihood.
    """
    data = list(data)
    if len(data) < 2:
        raise GroupError(f"registration needs at least 2 subjects, got {len(data)}")
    min_len = max(config.K_a, config.K_p) + 4
    short = [s.subject_id for s in data if len(s) < min_len]
    if short:
        raise InvalidSeries(f"series shorter than {min_len} trials: {short}")
    delays = {s.delay for s in data}
    if len(delays) != 1:
        raise InvalidSeries(f"registration runs on one delay at a time, got {sorted(delays)}")

    grid = Grid(config.grid_size or min(len(s) for s in data))
    basis_a, basis_p = config.amplitude_basis, config.phase_basis
    ys = [s.outcomes for s in data]
    identity = Warp.identity(basis_p)

    fit = gfpca_step([s.times for s in data], ys, config)
    warps = []
    for s, degenerate in zip(data, fit.degenerate):
        warps.append(identity if degenerate
                     else warp_step(s.times, s.outcomes, fit.mean_coef, config))
    fit = gfpca_step([w(s.times) for s, w in zip(data, warps)], ys, config, init=fit)
    ll = total_loglik(data, fit.coefficients, warps, basis_a)
    trace = [ll]
    converged = False
    for _ in range(1, config.max_outer_iters):
        new_warps = [
            w if degenerate else warp_step(s.times, s.outcomes, c, config, start=w)
            for s, c, w, degenerate in zip(data, fit.coefficients, warps, fit.degenerate)
        ]
        new_fit = gfpca_step([w(s.times) for s, w in zip(data, new_warps)], ys, config,
                             init=fit)
        new_ll = total_loglik(data, new_fit.coefficients, new_warps, basis_a)
        change = (new_ll - ll) / abs(ll) if ll else new_ll - ll
        if new_ll < ll:
            # keep the better iterate; a small dip counts as convergence
            converged = -change < config.outer_tol
            logger.debug("outer iteration lowered log-likelihood by %.3g; stopping", -change)
            break
        fit, warps, ll = new_fit, new_warps, new_ll
        trace.append(ll)
        if change < config.outer_tol:
            converged = True
            break
    if not converged:
        diagnostics.record("registration_not_converged")
        logger.warning("registration stopped after %d accepted outer iterations without "
                       "converging (the next iterate lowered the log-likelihood or the "
                       "iteration cap was reached)", len(trace))
    return RegistrationResult(
        grid=grid,
        subject_ids=tuple(s.subject_id for s in data),
        labels=tuple(s.group for s in data),
        delay=data[0].delay,
        config=config,
        coefficients=fit.coefficients,
        warps=warps,
        loglik_trace=trace,
        converged=converged,
        degenerate=fit.degenerate,
    )
