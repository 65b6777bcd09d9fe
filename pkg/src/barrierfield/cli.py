"""Command-line front end.

Subcommands::

    barrierfield mesh build|mark|info
    barrierfield precision corr|sd
    barrierfield validate stationary
    barrierfield experiment channel|horseshoe
    barrierfield fit

Failures print ``{"error": ..., "message": ...}`` on stderr and exit with 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .fem import write_coordinate
from .inference import GridSpec, ObservationSet, PcPriors, fit
from .mesh import (
    BarrierGeometry,
    MeshError,
    build_regular_mesh,
    load_mesh,
    mark_barrier,
    regular_mesh,
    save_mesh,
)
from .precision import build_model, write_field_csv, write_pgm


class CliError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _model_args(p, need_mesh: bool = True) -> None:
    if need_mesh:
        p.add_argument("--mesh", required=True, help="mesh JSON file")
    p.add_argument("--model", choices=["ms", "mb", "mn"], default="mb")
    p.add_argument("--range", type=float, default=1.0, dest="range_")
    p.add_argument("--sigma-u", type=float, default=1.0)
    p.add_argument("--barrier-fraction", type=float, default=0.1)
    p.add_argument("--out", default="results")
    p.add_argument("--dump-matrices", action="store_true",
                   help="also write J, D_q and Q as 'row col value' text files")


# -- mesh -----------------------------------------------------------------

def cmd_mesh_build(args) -> dict:
    if args.spacing is not None:
        mesh = regular_mesh(args.bbox, args.spacing, args.extension)
    else:
        mesh = build_regular_mesh(args.bbox, args.nx, args.ny, args.extension)
    save_mesh(mesh, args.out)
    return {"mesh": args.out, "vertices": mesh.n_vertices, "triangles": mesh.n_triangles}


def _load_polygons(path) -> BarrierGeometry:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed polygon JSON: {exc}") from exc
    polys = doc["polygons"] if isinstance(doc, dict) else doc
    return BarrierGeometry(tuple(np.asarray(p, dtype=float) for p in polys))


def cmd_mesh_mark(args) -> dict:
    mesh = load_mesh(args.mesh)
    if args.polygons:
        geom = _load_polygons(args.polygons)
    else:
        geom = BarrierGeometry.rectangles(*(args.rect or []))
    marked = mark_barrier(mesh, geom)
    save_mesh(marked, args.out)
    return {"mesh": args.out, "barrier_triangles": int((marked.subdomain == 2).sum())}


def cmd_mesh_info(args) -> dict:
    mesh = load_mesh(args.mesh)
    labels, counts = np.unique(mesh.subdomain, return_counts=True)
    area = mesh.areas
    return {
        "vertices": mesh.n_vertices,
        "triangles": mesh.n_triangles,
        "bbox": list(mesh.bbox),
        "area": float(area.sum()),
        "subdomains": {int(q): {"triangles": int(c), "area": float(area[mesh.subdomain == q].sum())}
                       for q, c in zip(labels, counts)},
        "edge_length": {"min": float(mesh.edge_lengths().min()), "max": float(mesh.edge_lengths().max())},
    }


# -- precision ------------------------------------------------------------

def _precision(args):
    mesh = load_mesh(args.mesh)
    model = build_model(mesh, args.model, args.barrier_fraction)
    Qop = model.precision(args.range_, args.sigma_u)
    out = _out_dir(args)
    if args.dump_matrices:
        write_coordinate(out / "J.txt", model.fem.J)
        for q, Dq in enumerate(model.fem.D, start=1):
            write_coordinate(out / f"D{q}.txt", Dq)
        write_coordinate(out / "Q.txt", Qop.Q)
    return model, Qop, out


def cmd_precision_corr(args) -> dict:
    model, Qop, out = _precision(args)
    if args.node is not None:
        node = args.node
        if model.kind == "MN":
            hit = np.flatnonzero(model.parent_nodes == node)
            if hit.size == 0:
                raise CliError(f"node {node} is not in the water mesh")
            node = int(hit[0])
    else:
        node = model.mesh.nearest_node(args.point)
    corr = Qop.correlation_surface(node)
    tag = model.kind.lower()
    write_field_csv(out / f"corr_{tag}.csv", model.mesh, corr, model.parent_nodes)
    write_pgm(out / f"corr_{tag}.pgm", model.mesh, corr, vmin=0.0, vmax=1.0, cutoff=0.1)
    return {"kind": model.kind, "node": int(model.parent_nodes[node]), "csv": str(out / f"corr_{tag}.csv")}


def cmd_precision_sd(args) -> dict:
    model, Qop, out = _precision(args)
    sd = Qop.marginal_sd()
    tag = model.kind.lower()
    write_field_csv(out / f"sd_{tag}.csv", model.mesh, sd, model.parent_nodes)
    write_pgm(out / f"sd_{tag}.pgm", model.mesh, sd)
    return {"kind": model.kind, "sd_min": float(sd.min()), "sd_max": float(sd.max()),
            "csv": str(out / f"sd_{tag}.csv")}


# -- validation and experiments -------------------------------------------

def cmd_validate_stationary(args) -> dict:
    out = _out_dir(args)
    ext = 1.5 * args.range_ if args.extension is None else args.extension
    res = ex.run_stationary_validation(args.bbox, args.spacing, ext, args.range_, args.sigma_u,
                                       out_path=out / "stationary.csv")
    summary = {k: v for k, v in res.items() if k != "rows"}
    (out / "stationary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_experiment_channel(args) -> dict:
    cfg = ex.ChannelConfig(range=args.range_, spacing=args.spacing, extension=args.extension,
                           barrier_fraction=args.barrier_fraction, sigma_u=args.sigma_u,
                           gaps=tuple(args.gaps))
    rows = ex.run_channel(cfg, _out_dir(args), heatmaps=not args.no_heatmaps)
    return {"rows": rows}


def cmd_experiment_horseshoe(args) -> dict:
    theta = None
    if args.hyper == "fixed":
        if args.range_ is None:
            raise CliError("--hyper fixed needs --range")
        theta = (args.range_, args.sigma_u, args.sigma_eps)
    cfg = ex.HorseshoeConfig(sigma_eps=args.sigma_eps, n=args.n, replicates=args.replicates, seed=args.seed,
                             barrier_fraction=args.barrier_fraction, hyper_mode=args.hyper, theta=theta,
                             mesh_spacing=args.spacing)
    progress = None
    if args.verbose:
        def progress(rep, rows):
            print(f"replicate {rep}: " + ", ".join(f"{r['model']}={r['rmse']:.4f}" for r in rows),
                  file=sys.stderr, flush=True)
    res = ex.run_horseshoe(cfg, _out_dir(args), progress=progress)
    return res["summary"]


def _read_data(path) -> ObservationSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"x", "y", "value"} <= set(rows[0]):
        raise CliError("data CSV needs columns x,y,value")
    loc = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    val = np.array([float(r["value"]) for r in rows])
    return ObservationSet(loc, val)


def cmd_fit(args) -> dict:
    mesh = load_mesh(args.mesh)
    model = build_model(mesh, args.model, args.barrier_fraction)
    obs = _read_data(args.data)
    if args.hyper == "fixed":
        if args.sigma_eps is None:
            raise CliError("--hyper fixed needs --sigma-eps")
        res = fit(model, obs, "fixed", theta=(args.range_, args.sigma_u, args.sigma_eps))
    else:
        priors = PcPriors(args.lam_eps, args.lam_sigma, args.lam_range)
        res = fit(model, obs, "map", priors=priors, grid=GridSpec(length_scale=args.length_scale))
    out = _out_dir(args)
    res.save(out / "fit.json", out / "fit_nodes.csv")
    return res.to_dict()


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="barrierfield", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="group", required=True)

    mesh = sub.add_parser("mesh", help="build, mark and inspect meshes").add_subparsers(dest="cmd", required=True)
    p = mesh.add_parser("build", help="regular union-jack mesh")
    p.add_argument("--bbox", type=float, nargs=4, required=True, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    p.add_argument("--nx", type=int, default=50)
    p.add_argument("--ny", type=int, default=50)
    p.add_argument("--spacing", type=float, help="target edge length; overrides --nx/--ny")
    p.add_argument("--extension", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output mesh JSON")
    p.set_defaults(func=cmd_mesh_build)

    p = mesh.add_parser("mark", help="label triangles inside barrier polygons as subdomain 2")
    p.add_argument("--mesh", required=True)
    p.add_argument("--rect", type=float, nargs=4, action="append", metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    p.add_argument("--polygons", help='JSON list of polygons, or {"polygons": [...]}')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh_mark)

    p = mesh.add_parser("info", help="print mesh statistics as JSON")
    p.add_argument("--mesh", required=True)
    p.set_defaults(func=cmd_mesh_info)

    prec = sub.add_parser("precision", help="correlation and sd fields").add_subparsers(dest="cmd", required=True)
    p = prec.add_parser("corr", help="correlation surface around a node")
    _model_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--node", type=int, help="node index in the input mesh")
    g.add_argument("--point", type=float, nargs=2, metavar=("X", "Y"), help="use the nearest node")
    p.set_defaults(func=cmd_precision_corr)
    p = prec.add_parser("sd", help="marginal standard deviation per node")
    _model_args(p)
    p.set_defaults(func=cmd_precision_sd)

    val = sub.add_parser("validate", help="checks against analytic results").add_subparsers(dest="cmd", required=True)
    p = val.add_parser("stationary", help="FEM correlation versus the Matérn curve")
    p.add_argument("--bbox", type=float, nargs=4, default=[0.0, 10.0, 0.0, 10.0])
    p.add_argument("--spacing", type=float, default=0.2)
    p.add_argument("--extension", type=float, default=None, help="default 1.5 ranges")
    p.add_argument("--range", type=float, default=3.0, dest="range_")
    p.add_argument("--sigma-u", type=float, default=1.0)
    p.add_argument("--out", default="results")
    p.set_defaults(func=cmd_validate_stationary)

    exp = sub.add_parser("experiment", help="benchmark experiments").add_subparsers(dest="cmd", required=True)
    p = exp.add_parser("channel", help="correlation across a closing gap in a land strip")
    p.add_argument("--range", type=float, default=4.0, dest="range_")
    p.add_argument("--sigma-u", type=float, default=1.0)
    p.add_argument("--barrier-fraction", type=float, default=0.1)
    p.add_argument("--spacing", type=float, default=0.1)
    p.add_argument("--extension", type=float, default=None, help="default 1.5 ranges")
    p.add_argument("--gaps", type=float, nargs="+", default=[0.4, 0.2, 0.1, 0.0])
    p.add_argument("--no-heatmaps", action="store_true")
    p.add_argument("--out", default="results")
    p.set_defaults(func=cmd_experiment_channel)

    p = exp.add_parser("horseshoe", help="MS/MB/MN reconstruction of the horseshoe surface")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--sigma-eps", type=float, default=0.1)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--hyper", choices=["map", "fixed"], default="map")
    p.add_argument("--range", type=float, default=None, dest="range_", help="fixed mode only")
    p.add_argument("--sigma-u", type=float, default=1.0, help="fixed mode only")
    p.add_argument("--barrier-fraction", type=float, default=0.1)
    p.add_argument("--spacing", type=float, default=0.1)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default="results")
    p.set_defaults(func=cmd_experiment_horseshoe)

    p = sub.add_parser("fit", help="fit a model to x,y,value data")
    _model_args(p)
    p.add_argument("--data", required=True, help="CSV with columns x,y,value")
    p.add_argument("--hyper", choices=["map", "fixed"], default="map")
    p.add_argument("--sigma-eps", type=float, default=None)
    p.add_argument("--lam-eps", type=float, default=1.5)
    p.add_argument("--lam-sigma", type=float, default=1.5)
    p.add_argument("--lam-range", type=float, default=float(np.log(2.0)),
                   help="rate of the exponential prior on 1/range")
    p.add_argument("--length-scale", type=float, default=1.0, help="scales the range grid")
    p.set_defaults(func=cmd_fit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (CliError, MeshError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
