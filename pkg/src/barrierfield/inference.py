"""Gaussian-likelihood fitting of the stationary, Barrier and Neumann models.

The observation model is

    y_i = beta_0 + u(s_i) + e_i,    e_i ~ N(0, sigma_eps^2),

with ``u`` one of the spatial fields from :mod:`barrierfield.precision` and
``beta_0`` an intercept with a nearly flat Gaussian prior.  Because the
likelihood is Gaussian the evidence ``p(y | r, sigma_u, sigma_eps)`` is exact,
so hyperparameters are chosen by maximizing evidence plus PC log-prior over a
logarithmic grid, and the field is then conditioned at the maximizer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import gmrf
from .mesh import Projector, project_points
from .precision import BarrierSpec, SpatialModel, assemble_Q

__all__ = [
    "ObservationSet",
    "PcPriors",
    "GridSpec",
    "FitResult",
    "gaussian_log_evidence",
    "log_marginal_likelihood",
    "pc_log_prior",
    "EvidenceGrid",
    "fit",
    "predict",
]

FLAT_PRECISION = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ObservationSet:
    """Point observations ``values`` at 2-D ``locations``."""

    locations: np.ndarray
    values: np.ndarray
    noise_sd: float | None = None

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        val = np.asarray(self.values, dtype=float).ravel()
        if loc.shape[0] != val.size:
            raise ValueError(f"{loc.shape[0]} locations but {val.size} values")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(val))):
            raise ValueError("observations must be finite")
        if self.noise_sd is not None and not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "values", val)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class PcPriors:
    """Exponential PC-prior rates for ``sigma_eps``, ``sigma_u`` and ``1/r``."""

    lam_eps: float = 1.5
    lam_sigma: float = 1.5
    lam_inv_range: float = math.log(2.0)

    def __post_init__(self):
        for name in ("lam_eps", "lam_sigma", "lam_inv_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_medians(cls, sigma_eps: float, sigma_u: float, range_: float) -> "PcPriors":
        """Rates giving the requested prior medians (the range median goes through ``1/r``)."""
        ln2 = math.log(2.0)
        return cls(ln2 / sigma_eps, ln2 / sigma_u, ln2 * range_)


@dataclass(frozen=True)
class GridSpec:
    """Log-spaced hyperparameter grid for MAP selection.

    ``range_bounds`` is in units of ``length_scale``.
    """

    n_points: int = 15
    range_bounds: tuple = (0.1, 10.0)
    sigma_u_bounds: tuple = (0.01, 10.0)
    sigma_eps_bounds: tuple = (0.01, 10.0)
    length_scale: float = 1.0
    refine: bool = True

    def axes(self):
        def ax(lo, hi):
            return np.geomspace(lo, hi, self.n_points)

        r0, r1 = self.range_bounds
        return (
            ax(r0 * self.length_scale, r1 * self.length_scale),
            ax(*self.sigma_u_bounds),
            ax(*self.sigma_eps_bounds),
        )


@dataclass
class FitResult:
    """Posterior summary of one fitted model.

    ``mean`` and ``sd`` live on the nodes of ``model.mesh``; for MN
    ``model.parent_nodes`` maps them back to the full mesh.
    """

    kind: str
    mean: np.ndarray
    sd: np.ndarray
    intercept_mean: float
    intercept_sd: float
    range: float
    sigma_u: float
    sigma_eps: float
    log_evidence: float
    log_prior: float | None = None
    diagnostics: dict = field(default_factory=dict)
    model: SpatialModel | None = field(default=None, repr=False)
    _factor: gmrf.Factorization | None = field(default=None, repr=False)

    @property
    def log_posterior(self) -> float | None:
        if self.log_prior is None:
            return None
        return self.log_evidence + self.log_prior

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "range": self.range,
            "sigma_u": self.sigma_u,
            "sigma_eps": self.sigma_eps,
            "intercept_mean": self.intercept_mean,
            "intercept_sd": self.intercept_sd,
            "log_evidence": self.log_evidence,
            "log_prior": self.log_prior,
            "diagnostics": self.diagnostics,
        }

    def save(self, json_path, csv_path=None) -> None:
        """Write hyperparameters and evidence as JSON, node fields as CSV."""
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is None:
            return
        verts = self.model.mesh.vertices if self.model is not None else np.full((self.mean.size, 2), np.nan)
        nodes = self.model.parent_nodes if self.model is not None else np.arange(self.mean.size)
        with Path(csv_path).open("w", newline="") as fh:
            fh.write("node,x,y,mean,sd\r\n")
            rows = zip(np.asarray(nodes).tolist(), np.asarray(verts).tolist(), self.mean.tolist(), self.sd.tolist())
            for i, (x, y), m, s in rows:
                fh.write(f"{i},{x!r},{y!r},{m!r},{s!r}\r\n")


def _exp_logpdf(x: float, lam: float) -> float:
    return math.log(lam) - lam * x


def pc_log_prior(priors: PcPriors, r: float, sigma_u: float, sigma_eps: float) -> float:
    """Joint PC log-density in ``(r, sigma_u, sigma_eps)``.

    Exponential priors on ``sigma_eps``, ``sigma_u`` and ``1/r``; the last is
    written as a density in ``r`` through the Jacobian ``1/r^2``.
    """
    if not (r > 0 and sigma_u > 0 and sigma_eps > 0):
        raise ValueError("hyperparameters must be positive")
    return (
        _exp_logpdf(sigma_eps, priors.lam_eps)
        + _exp_logpdf(sigma_u, priors.lam_sigma)
        + _exp_logpdf(1.0 / r, priors.lam_inv_range)
        - 2.0 * math.log(r)
    )


def gaussian_log_evidence(prior, proj, y, noise_var: float, extra_flat_effects: int = 1,
                          flat_precision: float = FLAT_PRECISION) -> float:
    """``ln p(y)`` for ``y = P x + beta 1 + e`` with ``x ~ N(0, prior^{-1})``.

    Uses the GMRF identity

        ln p(y) = ln p(y | mu) + ln p(mu) - ln p(mu | y)

    evaluated at the posterior mean, which needs the log-determinants of the
    prior and posterior precisions and one solve.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        return 0.0
    if isinstance(proj, Projector):
        proj = proj.matrix
    mean, Qpost = gmrf.condition(prior, proj, noise_var, y, extra_flat_effects, flat_precision)
    Qz = sp.block_diag([sp.csc_matrix(prior), flat_precision * sp.identity(extra_flat_effects)], format="csc")
    A = gmrf.augmented_design(proj, extra_flat_effects)
    resid = y - A @ mean
    ld_prior = gmrf.factorize(Qz).logdet
    ld_post = gmrf.factorize(Qpost).logdet
    quad = resid @ resid / noise_var + mean @ (Qz @ mean)
    return float(-0.5 * y.size * (_LOG_2PI + math.log(noise_var)) + 0.5 * (ld_prior - ld_post) - 0.5 * quad)


def _projector(model: SpatialModel, obs: ObservationSet | Projector) -> Projector:
    proj = obs if isinstance(obs, Projector) else project_points(model.mesh, obs.locations)
    if not proj.valid.all():
        bad = np.flatnonzero(~proj.valid).tolist()
        raise ValueError(f"observations outside the {model.kind} mesh: indices {bad}")
    return proj


def log_marginal_likelihood(model: SpatialModel, spec: BarrierSpec, obs: ObservationSet,
                            sigma_eps: float, flat_precision: float = FLAT_PRECISION) -> float:
    """Exact log evidence of ``obs`` under ``model`` at fixed hyperparameters."""
    if len(obs) == 0:
        return 0.0
    Qop = assemble_Q(model.fem, spec)
    return gaussian_log_evidence(Qop.Q, _projector(model, obs), obs.values, sigma_eps**2,
                                 1, flat_precision)


class EvidenceGrid:
    """Fast evaluation of the evidence over many ``(r, sigma_u, sigma_eps)``.

    Writing ``kappa = sigma_u^2 / sigma_eps^2`` and ``Q = Q1(r) / sigma_u^2``,
    the scaled posterior precision of the field is ``B = Q1 + kappa P'P``
    and the intercept enters through a scalar Schur complement whose only
    ``sigma_u`` dependence is ``sigma_u^2 * tau``.  One factorization of ``B``
    per ``(r, kappa)`` therefore serves every ``sigma_u`` on that ray, and
    one factorization of ``Q1`` per ``r`` gives the prior determinant.
    """

    def __init__(self, model: SpatialModel, proj: Projector, y, flat_precision: float = FLAT_PRECISION):
        self.model = model
        P = sp.csr_matrix(proj.matrix)
        y = np.asarray(y, dtype=float).ravel()
        self.m = y.size
        self.tau = flat_precision
        self.PtP = (P.T @ P).tocsc()
        self.Pt1 = np.asarray(P.sum(axis=0)).ravel()
        self.Pty = P.T @ y
        self.yty = float(y @ y)
        self.ysum = float(y.sum())
        self._prior = {}
        self._post = {}
        self.n_factorizations = 0
        Q1 = self._q1(1.0)
        # union pattern of every Q1(r) + kappa P'P
        pat = abs(Q1) + abs(self.PtP) + sp.identity(Q1.shape[0])
        self._pattern = sp.csc_matrix(pat)
        self._pattern.sort_indices()
        self.symbolic = gmrf.analyze(self._pattern)

    def _q1(self, r: float) -> sp.csc_matrix:
        return assemble_Q(self.model.fem, self.model.spec(r, 1.0)).Q

    @staticmethod
    def _on_pattern(M) -> sp.csc_matrix:
        # every Q1(r) + kappa P'P lies inside the analyzed union pattern
        M = sp.csc_matrix(M)
        M.sort_indices()
        return M

    def _prior_factor(self, r: float):
        if r not in self._prior:
            Q1 = self._q1(r)
            f = gmrf.factorize(self._on_pattern(Q1), self.symbolic, check=False)
            self.n_factorizations += 1
            self._prior[r] = (Q1, f.logdet)
        return self._prior[r]

    def _ray(self, r: float, kappa: float):
        key = (r, kappa)
        if key not in self._post:
            Q1, ld_prior = self._prior_factor(r)
            B = self._on_pattern(Q1 + kappa * self.PtP)
            f = gmrf.factorize(B, self.symbolic, check=False)
            self.n_factorizations += 1
            W = f.solve(np.column_stack([self.Pty, self.Pt1]))
            self._post[key] = (
                ld_prior,
                f.logdet,
                float(self.Pty @ W[:, 0]),
                float(self.Pt1 @ W[:, 1]),
                float(self.Pt1 @ W[:, 0]),
            )
        return self._post[key]

    def log_evidence(self, r: float, sigma_u: float, sigma_eps: float) -> float:
        if self.m == 0:
            return 0.0
        s2u = sigma_u * sigma_u
        # rays shared by several grid points must hit the same cache entry
        kappa = float(f"{s2u / (sigma_eps * sigma_eps):.12e}")
        ld_q1, ld_b, yWy, oWo, oWy = self._ray(float(r), float(kappa))
        k2 = kappa * kappa
        schur = s2u * self.tau + kappa * self.m - k2 * oWo
        gMg = k2 * yWy + (kappa * self.ysum - k2 * oWy) ** 2 / schur
        quad = (kappa * self.yty - gMg) / s2u
        half_ld = 0.5 * (ld_q1 + math.log(self.tau) - ld_b - math.log(schur) + math.log(s2u))
        return -0.5 * self.m * (_LOG_2PI + math.log(sigma_eps * sigma_eps)) + half_ld - 0.5 * quad


def _grid_argmax(engine: EvidenceGrid, priors: PcPriors, rs, sus, ses):
    best = (-np.inf, None)
    failures = 0
    values = np.full((len(rs), len(sus), len(ses)), -np.inf)
    for i, r in enumerate(rs):
        for j, su in enumerate(sus):
            for k, se in enumerate(ses):
                try:
                    v = engine.log_evidence(r, su, se) + pc_log_prior(priors, r, su, se)
                except np.linalg.LinAlgError:
                    failures += 1
                    continue
                values[i, j, k] = v
                if v > best[0]:
                    best = (v, (i, j, k))
    return best, values, failures


def _refined_axis(axis: np.ndarray, idx: int) -> np.ndarray:
    step = math.log(axis[1] / axis[0]) if axis.size > 1 else 0.0
    return axis[idx] * np.exp(step * np.linspace(-1.0, 1.0, 5))


def map_hyperparameters(model: SpatialModel, proj: Projector, y, priors: PcPriors,
                        grid: GridSpec = GridSpec()):
    """Grid maximizer of evidence + PC log-prior, refined once around the optimum.

    Returns ``(r, sigma_u, sigma_eps, diagnostics)``.
    """
    engine = EvidenceGrid(model, proj, y)
    rs, sus, ses = grid.axes()
    (val, idx), values, failures = _grid_argmax(engine, priors, rs, sus, ses)
    if idx is None:
        raise np.linalg.LinAlgError("every grid point failed to factorize")
    theta = (rs[idx[0]], sus[idx[1]], ses[idx[2]])
    diag = {"coarse_max": val, "coarse_index": list(idx), "grid_failures": failures}
    if grid.refine:
        axes = [_refined_axis(a, i) for a, i in zip((rs, sus, ses), idx)]
        (val2, idx2), _, f2 = _grid_argmax(engine, priors, *axes)
        diag["grid_failures"] += f2
        if idx2 is not None and val2 >= val:
            val = val2
            theta = tuple(a[i] for a, i in zip(axes, idx2))
    diag["log_posterior"] = val
    diag["factorizations"] = engine.n_factorizations
    return (*(float(t) for t in theta), diag)


def fit(model: SpatialModel, obs: ObservationSet, hyper_mode: str = "map", theta=None,
        priors: PcPriors | None = None, grid: GridSpec | None = None,
        flat_precision: float = FLAT_PRECISION, compute_sd: bool = True) -> FitResult:
    """Fit ``model`` to ``obs``.

    Parameters
    ----------
    model : SpatialModel
        MS, MB or MN model from :func:`barrierfield.precision.build_model`.
    obs : ObservationSet
    hyper_mode : {"map", "fixed"}
        ``"fixed"`` conditions at ``theta = (r, sigma_u, sigma_eps)``;
        ``"map"`` first selects ``theta`` on ``grid`` under ``priors``.
    compute_sd : bool
        Posterior sds need the selected inverse of the posterior precision;
        skip it when only the mean is wanted.

    Raises
    ------
    ValueError
        If some observation falls outside the model's mesh.
    """
    proj = _projector(model, obs)
    priors = priors or PcPriors()
    diagnostics = {"n_obs": len(obs), "hyper_mode": hyper_mode}
    if hyper_mode == "fixed":
        if theta is None:
            raise ValueError("fixed mode needs theta = (r, sigma_u, sigma_eps)")
        r, su, se = (float(t) for t in theta)
    elif hyper_mode == "map":
        r, su, se, d = map_hyperparameters(model, proj, obs.values, priors, grid or GridSpec())
        diagnostics.update(d)
    else:
        raise ValueError(f"unknown hyper_mode {hyper_mode!r}")

    Qop = model.precision(r, su)
    mean, Qpost = gmrf.condition(Qop.Q, proj, se * se, obs.values, 1, flat_precision)
    factor = gmrf.factorize(Qpost)
    n = model.mesh.n_vertices
    if compute_sd:
        sd = np.sqrt(factor.marginal_variances())
    else:
        sd = np.full(n + 1, np.nan)
    log_ev = gaussian_log_evidence(Qop.Q, proj, obs.values, se * se, 1, flat_precision)
    return FitResult(
        kind=model.kind,
        mean=mean[:n],
        sd=sd[:n],
        intercept_mean=float(mean[n]),
        intercept_sd=float(sd[n]),
        range=r,
        sigma_u=su,
        sigma_eps=se,
        log_evidence=log_ev,
        log_prior=pc_log_prior(priors, r, su, se),
        diagnostics=diagnostics,
        model=model,
        _factor=factor,
    )


def predict(fit_result: FitResult, locations, with_sd: bool = True):
    """Posterior mean (field plus intercept) and sd at arbitrary locations.

    Locations outside the model's mesh get NaN in both outputs.
    """
    model = fit_result.model
    if model is None:
        raise ValueError("fit result carries no model")
    proj = project_points(model.mesh, locations)
    n = model.mesh.n_vertices
    mean = np.full(proj.n_points, np.nan)
    sd = np.full(proj.n_points, np.nan)
    ok = proj.valid
    mean[ok] = proj.matrix[ok] @ fit_result.mean + fit_result.intercept_mean
    if not with_sd or not ok.any():
        return mean, sd
    # var(w'x + beta) over the (at most four) latent entries of each row
    nodes = np.column_stack([proj.nodes[ok], np.full(ok.sum(), n)])
    w = np.column_stack([proj.weights[ok], np.ones(ok.sum())])
    a = np.repeat(nodes, 4, axis=1).ravel()
    b = np.tile(nodes, (1, 4)).ravel()
    cov = fit_result._factor.covariance_entries(a, b).reshape(-1, 4, 4)
    var = np.einsum("ti,tij,tj->t", w, cov, w)
    sd[ok] = np.sqrt(np.maximum(var, 0.0))
    return mean, sd
