"""Runners for the validation and benchmark experiments.

* :func:`run_stationary_validation` compares FEM correlations with the
  analytic Matérn curve.
* :func:`run_channel` closes a gap in a thin land strip and records how the
  correlation across the strip responds.
* :func:`run_horseshoe` reconstructs the modified horseshoe test surface
  from noisy scattered data with the MS, MB and MN models.

Each runner is a pure function of its config; outputs are written with
``repr`` floats so repeated runs are byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .inference import GridSpec, ObservationSet, PcPriors, fit, predict
from .mesh import BarrierGeometry, TriangleMesh, mark_barrier, project_points, regular_mesh
from .precision import build_model, matern_correlation, point_correlation, write_field_csv, write_pgm

__all__ = [
    "HORSESHOE_BBOX",
    "horseshoe_truth",
    "horseshoe_inside",
    "horseshoe_mesh",
    "HorseshoeConfig",
    "run_horseshoe",
    "ChannelConfig",
    "run_channel",
    "run_stationary_validation",
]

# modified horseshoe: centre-line radius, arm half-width margin, arm length, slope
_R0, _RMID, _LEN, _B = 0.1, 0.5, 3.0, 1.0
HORSESHOE_BBOX = (-1.0, 3.5, -1.0, 1.0)
MODELS = ("MS", "MB", "MN")


def _horseshoe_ad(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.empty(np.broadcast(x, y).shape)
    d = np.empty_like(a)
    x, y = np.broadcast_arrays(x, y)
    up = (x >= 0) & (y > 0)
    down = (x >= 0) & (y <= 0)
    left = x < 0
    a[up] = math.pi * _RMID / 2 + x[up]
    d[up] = y[up] - _RMID
    a[down] = -math.pi * _RMID / 2 - x[down]
    d[down] = -y[down] - _RMID
    xl, yl = x[left], y[left]
    a[left] = -np.arctan(yl / xl) * _RMID
    d[left] = np.hypot(xl, yl) - _RMID
    return a, d, x


def horseshoe_inside(x, y, margin: float = 0.0):
    """In-domain test; ``margin > 0`` shrinks the domain (strict interior)."""
    _, d, x = _horseshoe_ad(x, y)
    half = _RMID - _R0 - margin
    return (np.abs(d) <= half) & ((x <= _LEN) | ((x - _LEN) ** 2 + d**2 <= half**2))


def horseshoe_truth(x, y):
    """Modified horseshoe surface and in-domain flag.

    Returns
    -------
    value : ndarray
        ``a b + d^2`` in the along-arm / across-arm coordinates ``(a, d)``.
    inside : ndarray of bool
    """
    a, d, _ = _horseshoe_ad(x, y)
    return a * _B + d**2, horseshoe_inside(x, y)


def horseshoe_mesh(spacing: float = 0.1, extension: float = 1.0) -> TriangleMesh:
    """Regular mesh around the horseshoe with everything outside it labelled land.

    A triangle is water when its centroid, a vertex or an edge midpoint lies
    strictly inside the domain. This keeps the two arms apart (the grid lines
    run along the arm edges) while covering the curved coast, so every
    in-domain point lies in the water mesh.
    """
    base = regular_mesh(HORSESHOE_BBOX, spacing, extension)
    P = base.vertices[base.triangles]
    samples = [P[:, 0], P[:, 1], P[:, 2], P.mean(axis=1),
               0.5 * (P[:, 0] + P[:, 1]), 0.5 * (P[:, 1] + P[:, 2]), 0.5 * (P[:, 2] + P[:, 0])]
    water = np.zeros(base.n_triangles, bool)
    for s in samples:
        water |= horseshoe_inside(s[:, 0], s[:, 1], margin=1e-9)
    return base.with_subdomain(np.where(water, 1, 2))


def evaluation_grid(nx: int = 200, ny: int = 100) -> np.ndarray:
    """In-domain points of a cell-centred ``nx`` by ``ny`` grid over the bounding box."""
    x0, x1, y0, y1 = HORSESHOE_BBOX
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts[horseshoe_inside(pts[:, 0], pts[:, 1])]


def sample_locations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform in-domain locations by rejection from the bounding box."""
    x0, x1, y0, y1 = HORSESHOE_BBOX
    out = np.empty((0, 2))
    while out.shape[0] < n:
        cand = rng.uniform((x0, y0), (x1, y1), size=(2 * n, 2))
        out = np.vstack([out, cand[horseshoe_inside(cand[:, 0], cand[:, 1])]])
    return out[:n]


@dataclass(frozen=True)
class HorseshoeConfig:
    """Settings for the horseshoe reconstruction study.

    ``theta`` is only used when ``hyper_mode == "fixed"`` and holds
    ``(r, sigma_u, sigma_eps)`` shared by all models.
    """

    sigma_eps: float = 0.1
    n: int = 600
    replicates: int = 100
    seed: int = 0
    grid_shape: tuple = (200, 100)
    mesh_spacing: float = 0.1
    extension: float = 1.0
    barrier_fraction: float = 0.1
    hyper_mode: str = "map"
    theta: tuple | None = None
    models: tuple = MODELS
    n_grid_points: int = 15

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be non-negative")
        if self.hyper_mode == "fixed" and self.theta is None:
            raise ValueError("fixed mode needs theta")
        bad = set(m.upper() for m in self.models) - set(MODELS)
        if bad:
            raise ValueError(f"unknown models {sorted(bad)}")


def _replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))


def horseshoe_replicate(config: HorseshoeConfig, replicate: int, models: dict, grid_pts, truth):
    """Fit every model on one simulated data set; returns a list of result rows."""
    rng = _replicate_rng(config.seed, replicate)
    loc = sample_locations(rng, config.n)
    y = horseshoe_truth(loc[:, 0], loc[:, 1])[0] + config.sigma_eps * rng.standard_normal(config.n)
    obs = ObservationSet(loc, y)
    priors = PcPriors(1.5, 1.5, math.log(2.0))
    grid = GridSpec(n_points=config.n_grid_points, length_scale=1.0)
    rows = []
    for kind, model in models.items():
        row = {"replicate": replicate, "model": kind}
        try:
            res = fit(model, obs, config.hyper_mode, theta=config.theta, priors=priors, grid=grid,
                      compute_sd=False)
            mean, _ = predict(res, grid_pts, with_sd=False)
            if not np.all(np.isfinite(mean)):
                raise ValueError("evaluation points outside the model mesh")
            row.update(rmse=float(np.sqrt(np.mean((mean - truth) ** 2))), range=res.range,
                       sigma_u=res.sigma_u, sigma_eps=res.sigma_eps, status="ok")
        except (ValueError, np.linalg.LinAlgError) as exc:
            row.update(rmse=float("nan"), range=float("nan"), sigma_u=float("nan"),
                       sigma_eps=float("nan"), status=f"failed: {exc}")
        rows.append(row)
    return rows


_FIELDS = ["replicate", "model", "rmse", "range", "sigma_u", "sigma_eps", "status"]


def _csv_text(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def summarize_horseshoe(rows) -> dict:
    """Quartiles per model plus the MB-vs-MS comparison."""
    out = {"models": {}, "failures": 0}
    by = {}
    for row in rows:
        if row["status"] != "ok":
            out["failures"] += 1
            continue
        by.setdefault(row["model"], {})[row["replicate"]] = row["rmse"]
    for kind, vals in sorted(by.items()):
        v = np.array([vals[k] for k in sorted(vals)])
        q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
        out["models"][kind] = {"count": int(v.size), "min": q[0], "q1": q[1], "median": q[2],
                               "q3": q[3], "max": q[4], "mean": float(v.mean())}
    if "MB" in by and "MS" in by:
        common = sorted(set(by["MB"]) & set(by["MS"]))
        out["mb_beats_ms"] = int(sum(by["MB"][k] < by["MS"][k] for k in common))
        out["median_ratio_mb_ms"] = out["models"]["MB"]["median"] / out["models"]["MS"]["median"]
    return out


def run_horseshoe(config: HorseshoeConfig, out_dir=None, progress=None) -> dict:
    """Run the study; optionally write ``horseshoe_rmse.csv`` and summaries to ``out_dir``.

    Returns a dict with ``rows`` (sorted by replicate then model) and ``summary``.
    """
    mesh = horseshoe_mesh(config.mesh_spacing, config.extension)
    models = {k.upper(): build_model(mesh, k, config.barrier_fraction) for k in config.models}
    grid_pts = evaluation_grid(*config.grid_shape)
    truth = horseshoe_truth(grid_pts[:, 0], grid_pts[:, 1])[0]
    rows = []
    for rep in range(config.replicates):
        rows.extend(horseshoe_replicate(config, rep, models, grid_pts, truth))
        if progress is not None:
            progress(rep, rows[-len(models):])
    rows.sort(key=lambda r: (r["replicate"], MODELS.index(r["model"])))
    summary = summarize_horseshoe(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "horseshoe_rmse.csv").write_text(_csv_text(rows, _FIELDS), newline="")
        srows = [{"model": k, **v} for k, v in summary["models"].items()]
        (out / "horseshoe_summary.csv").write_text(
            _csv_text(srows, ["model", "count", "min", "q1", "median", "q3", "max", "mean"]), newline="")
        meta = {"config": asdict(config), "summary": summary}
        (out / "horseshoe_summary.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float) + "\n")
    return {"rows": rows, "summary": summary}


@dataclass(frozen=True)
class ChannelConfig:
    """Square sea split by a thin horizontal land strip with a centred gap.

    The strip spans the whole extended mesh so the only water path between
    the two probes is through the gap. ``extension`` defaults to 1.5 ranges.
    The default spacing of 0.1 puts triangle centroids inside even the
    narrowest gap, so each gap width opens a different set of triangles.
    """

    side: float = 10.0
    strip: tuple = (5.0, 5.5)
    gaps: tuple = (0.4, 0.2, 0.1, 0.0)
    probes: tuple = ((5.0, 4.5), (5.0, 6.0))
    range: float = 4.0
    spacing: float = 0.1
    extension: float | None = None
    barrier_fraction: float = 0.1
    sigma_u: float = 1.0

    def __post_init__(self):
        g = np.asarray(self.gaps, dtype=float)
        if np.any(np.diff(g) > 0):
            raise ValueError("gap widths must be nonincreasing")
        (_, ya), (_, yb) = self.probes
        lo, hi = self.strip
        if not ((ya < lo and yb > hi) or (yb < lo and ya > hi)):
            raise ValueError("probes must lie on opposite sides of the strip")

    @property
    def ext(self) -> float:
        return 1.5 * self.range if self.extension is None else self.extension

    def same_side_probe(self) -> tuple:
        """Point on the first probe's side at the same distance, moved along x."""
        (xa, ya), (xb, yb) = self.probes
        dist = math.hypot(xb - xa, yb - ya)
        return (xa - dist, ya)

    def barrier(self, gap: float) -> BarrierGeometry:
        lo, hi = self.strip
        left, right = -self.ext - 1.0, self.side + self.ext + 1.0
        mid = 0.5 * self.side
        if gap <= 0:
            return BarrierGeometry.rectangles((left, right, lo, hi))
        rects = []
        if mid - gap / 2 > left:
            rects.append((left, mid - gap / 2, lo, hi))
        if mid + gap / 2 < right:
            rects.append((mid + gap / 2, right, lo, hi))
        return BarrierGeometry.rectangles(*rects)


def run_channel(config: ChannelConfig = ChannelConfig(), out_dir=None, heatmaps: bool = True) -> list:
    """Probe correlations for every gap width under MB and MN, plus the MS reference.

    Returns rows ``{gap_width, model, cross_corr, same_side_corr}``; MS rows
    carry ``gap_width = nan`` since the stationary model ignores the strip.
    """
    base = regular_mesh((0.0, config.side, 0.0, config.side), config.spacing, config.ext)
    probes = np.array([config.probes[0], config.probes[1], config.same_side_probe()])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    view = (-0.5, config.side + 0.5, -0.5, config.side + 0.5)
    rows = []

    def record(gap, model, tag):
        Qop = model.precision(config.range, config.sigma_u)
        C = point_correlation(Qop, project_points(model.mesh, probes))
        rows.append({"gap_width": gap, "model": model.kind,
                     "cross_corr": float(C[0, 1]), "same_side_corr": float(C[0, 2])})
        if out is not None and heatmaps:
            centre = model.mesh.nearest_node(config.probes[0])
            corr = Qop.correlation_surface(centre)
            write_field_csv(out / f"corr_{tag}.csv", model.mesh, corr, model.parent_nodes)
            write_pgm(out / f"corr_{tag}.pgm", model.mesh, corr, bbox=view, vmin=0.0, vmax=1.0, cutoff=0.1)

    record(float("nan"), build_model(base, "MS", config.barrier_fraction), "ms")
    for gap in config.gaps:
        marked = mark_barrier(base, config.barrier(gap))
        for kind in ("MB", "MN"):
            record(float(gap), build_model(marked, kind, config.barrier_fraction), f"{kind.lower()}_gap{gap:g}")
    if out is not None:
        (out / "channel.csv").write_text(
            _csv_text(rows, ["gap_width", "model", "cross_corr", "same_side_corr"]), newline="")
    return rows


def run_stationary_validation(bbox=(0.0, 10.0, 0.0, 10.0), spacing: float = 0.2, extension: float = 4.5,
                              range_: float = 3.0, sigma_u: float = 1.0, out_path=None) -> dict:
    """Compare the FEM correlation from a central node with the Matérn curve.

    Nodes inside ``bbox`` are binned by distance in steps of half the mesh
    spacing. Each bin reports the mean empirical and analytic correlation and
    the largest per-node absolute error.

    Returns
    -------
    dict
        ``rows`` (bin table), ``max_error`` over ``[0.3 r, 2 r]``, and the
        interior marginal sd range.
    """
    if spacing > range_ / 5:
        raise ValueError("mesh spacing must be at most r/5")
    if extension < 1.5 * range_ - 1e-12:
        raise ValueError("extension must be at least 1.5 r")
    mesh = regular_mesh(bbox, spacing, extension)
    model = build_model(mesh, "MS")
    Qop = model.precision(range_, sigma_u)
    x0, x1, y0, y1 = bbox
    centre = mesh.nearest_node(((x0 + x1) / 2, (y0 + y1) / 2))
    corr = Qop.correlation_surface(centre)
    V = mesh.vertices
    inside = (V[:, 0] >= x0) & (V[:, 0] <= x1) & (V[:, 1] >= y0) & (V[:, 1] <= y1)
    d = np.linalg.norm(V - V[centre], axis=1)[inside]
    emp = corr[inside]
    ana = matern_correlation(d, range_)
    w = spacing / 2
    b = np.round(d / w).astype(np.int64)
    rows = []
    for k in np.unique(b):
        sel = b == k
        rows.append({"distance": float(k * w), "empirical": float(emp[sel].mean()),
                     "analytic": float(ana[sel].mean()),
                     "abs_error": float(np.abs(emp[sel] - ana[sel]).max())})
    band = (d >= 0.3 * range_) & (d <= 2 * range_)
    sd = Qop.marginal_sd()[inside]
    result = {
        "rows": rows,
        "max_error": float(np.abs(emp - ana)[band].max()),
        "sd_min": float(sd.min()),
        "sd_max": float(sd.max()),
        "n_nodes": mesh.n_vertices,
    }
    if out_path is not None:
        Path(out_path).write_text(_csv_text(rows, ["distance", "empirical", "analytic", "abs_error"]), newline="")
    return result
