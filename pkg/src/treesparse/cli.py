"""Command line entry point: ``tsp simulate|cluster|fit|cv|project|report``.

Every command writes its artifacts atomically and a JSON run manifest that
lists the resolved parameters, the digests of inputs and outputs, the tool
version and the timing.  The manifest is the only output that changes
between two runs with identical inputs.

Exit status is 0 on success, 2 on usage or input errors and 1 on failures
during computation.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import ClusterTree, read_tree, ward_cluster, write_tree
from .datagen import SimulationSpec, SpecError, make_truth, simulate
from .feature import project_to_voxels, scale_slice, write_voxel_map
from .grid import GridMask, adjacency, parse_dims, read_mask
from .harness import (
    PlanError,
    cross_validate,
    format_table,
    lambda_grid,
    make_plan,
    read_reports,
)
from .io import (
    MatrixFormatError,
    atomic_write_text,
    dump_json,
    file_digest,
    read_matrix,
    read_vector,
    write_matrix,
)
from .loss import Dataset
from .penalty import StructureError, tree_groups
from .solver import (
    ConfigurationError,
    ModelSpec,
    SolverConfig,
    build_problem,
    fit_model,
)

__all__ = ["main", "build_parser", "UsageError"]


class UsageError(Exception):
    """Bad flags or unreadable inputs (exit status 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sub = self.prog.split(" ", 1)[1] if " " in self.prog else ""
        raise UsageError(f"{sub}: {message}" if sub else message)


class _Run:
    """Collects inputs and artifacts of one command for its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.params = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.t0 = time.perf_counter()

    def read(self, path):
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"input file not found: {path}")
        self.inputs[str(path)] = file_digest(path)
        return path

    def wrote(self, *paths):
        for p in paths:
            self.outputs[str(p)] = file_digest(p)

    def finish(self, manifest_path, seed=None, extra=None):
        doc = {
            "command": self.command,
            "parameters": _jsonable(self.params),
            "inputs": self.inputs,
            "artifacts": self.outputs,
            "seed": seed,
            "version": __version__,
            "started": self.started,
            "wall_seconds": round(time.perf_counter() - self.t0, 6),
        }
        if extra:
            doc.update(_jsonable(extra))
        atomic_write_text(manifest_path, dump_json(doc))
        return manifest_path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _manifest_path(args, primary) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    primary = Path(primary)
    return primary.with_name(primary.stem + ".manifest.json")


def _jobs(args) -> int:
    if args.jobs is not None:
        jobs = args.jobs
    else:
        env = os.environ.get("TSP_JOBS", "").strip()
        if not env:
            return 1
        try:
            jobs = int(env)
        except ValueError:
            raise UsageError(f"TSP_JOBS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return jobs


# ---------------------------------------------------------------------------
# input helpers


@contextlib.contextmanager
def _input_errors():
    """Report malformed inputs and flag values as usage errors."""
    try:
        yield
    except UsageError:
        raise
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _matrix(run: _Run, path) -> np.ndarray:
    with _input_errors():
        return read_matrix(run.read(path))


def _vector(run: _Run, path) -> np.ndarray:
    with _input_errors():
        return read_vector(run.read(path))


def _mask(run: _Run, args, n_voxels: int | None = None) -> GridMask:
    with _input_errors():
        if args.mask:
            mask = read_mask(run.read(args.mask))
        else:
            mask = GridMask.full(parse_dims(args.dims))
    if n_voxels is not None and mask.n_voxels != n_voxels:
        raise UsageError(f"mask has {mask.n_voxels} voxels but the data has {n_voxels}")
    return mask


def _tree(run: _Run, path, n_leaves: int | None = None) -> ClusterTree:
    with _input_errors():
        tree = read_tree(run.read(path))
    if n_leaves is not None and tree.n_leaves != n_leaves:
        raise UsageError(f"tree has {tree.n_leaves} leaves but X has {n_leaves} columns")
    return tree


def _dataset(run: _Run, args, loss: str) -> Dataset:
    X = _matrix(run, args.x)
    y = _vector(run, args.y)
    groups = _vector(run, args.groups) if getattr(args, "groups", None) else None
    task = "regression" if loss == "squared" else "classification"
    with _input_errors():
        return Dataset(X, y, groups, task)


def _model(args, lam=1.0) -> ModelSpec:
    with _input_errors():
        return ModelSpec(loss=args.loss, penalty=args.model, lam=lam, rho=args.rho,
                         alpha=args.alpha, stages=args.stages)


def _config(args) -> SolverConfig:
    with _input_errors():
        return SolverConfig(max_iter=args.max_iter, rel_tol=args.tol,
                            accelerate=not args.ista, seed=args.seed)


def _parse_depths(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 0:
        raise ValueError(f"depths must be non-negative integers, got {text!r}")
    return sorted(set(out))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, run: _Run) -> int:
    with _input_errors():
        text = run.read(args.spec).read_text() if args.spec else ""
        overrides = {k: v for k, v in (("seed", args.seed), ("n", args.n)) if v is not None}
        spec = SimulationSpec.from_text(text, **overrides)
    data = simulate(spec)
    write_matrix(args.out_x, data.X)
    write_matrix(args.out_y, data.y[:, None])
    write_matrix(args.out_truth, make_truth(spec)[:, None])
    run.wrote(args.out_x, args.out_y, args.out_truth)
    if args.out_spec:
        atomic_write_text(args.out_spec, spec.to_text())
        run.wrote(args.out_spec)
    run.finish(_manifest_path(args, args.out_x), seed=spec.seed,
               extra={"simulation": spec.to_text().splitlines()})
    return 0


def cmd_cluster(args, run: _Run) -> int:
    X = _matrix(run, args.input)
    mask = _mask(run, args, X.shape[1])
    tree = ward_cluster(X, adjacency(mask))
    write_tree(tree, args.out)
    run.wrote(args.out)
    if args.dump_groups:
        tree_groups(tree, args.rho, args.flavor).write(args.dump_groups)
        run.wrote(args.dump_groups)
    run.finish(_manifest_path(args, args.out),
               extra={"n_nodes": tree.n_nodes, "max_depth": tree.max_depth})
    return 0


def cmd_fit(args, run: _Run) -> int:
    spec = _model(args, args.lam)
    data = _dataset(run, args, spec.loss)
    tree = _tree(run, args.tree, data.X.shape[1]) if args.tree else None
    if spec.needs_tree and tree is None:
        raise UsageError(f"--model {args.model} needs --tree")
    result = fit_model(data, spec, tree, _config(args))
    out = Path(args.out)
    coef_path = out.with_suffix(".coef.csv")
    write_matrix(coef_path, np.asarray(result.coef).reshape(len(result.coef), -1))
    atomic_write_text(out, result.to_json())
    run.wrote(out, coef_path)
    run.finish(_manifest_path(args, out), seed=args.seed,
               extra={"converged": result.converged, "n_iter": result.n_iter})
    return 0


def cmd_cv(args, run: _Run) -> int:
    spec = _model(args)
    data = _dataset(run, args, spec.loss)
    tree = _tree(run, args.tree, data.X.shape[1]) if args.tree else None
    if spec.needs_tree and tree is None:
        raise UsageError(f"--model {args.model} needs --tree")
    if args.folds in ("loo-group", "loo_group"):
        if data.groups is None:
            raise UsageError("--folds loo-group needs --groups")
        plan = make_plan(data.n_samples, "loo_group", groups=data.groups, seed=args.seed,
                         nested=args.nested)
    else:
        try:
            k = int(args.folds)
        except ValueError:
            raise UsageError(f"--folds must be 'loo-group' or an integer, got {args.folds!r}") from None
        plan = make_plan(data.n_samples, "kfold", k=k, seed=args.seed, nested=args.nested)
    config = _config(args)
    problem = build_problem(data, spec, tree, config) if args.grid == "auto" else None
    grid = lambda_grid(args.grid, args.count, problem)
    name = args.name or spec.penalty
    jobs = _jobs(args)
    report = cross_validate(data, plan, spec, grid, config, tree, jobs=jobs, name=name)
    atomic_write_text(args.out, report.to_csv())
    run.wrote(args.out)
    if args.table:
        atomic_write_text(args.table, format_table(read_reports([report.to_csv()])))
        run.wrote(args.table)
    run.finish(_manifest_path(args, args.out), seed=args.seed,
               extra={"wall_time": report.wall_time, "grid": grid.tolist(), "jobs": jobs,
                      "mean_error": report.mean, "std_error": report.std})
    return 0


def cmd_project(args, run: _Run) -> int:
    W = _matrix(run, args.weights)
    tree = _tree(run, args.tree)
    mask = _mask(run, args, tree.n_leaves)
    with _input_errors():
        requested = _parse_depths(args.depth)
    if W.shape[0] == 1 and W.shape[1] in (tree.n_nodes, tree.n_leaves):
        W = W.T
    if W.shape[0] == tree.n_leaves and tree.n_leaves != tree.n_nodes:
        maps, depths = W, []
    elif W.shape[0] == tree.n_nodes:
        maps, depths = project_to_voxels(W, tree), requested
    else:
        raise UsageError(f"weights have {W.shape[0]} rows; expected {tree.n_nodes} "
                         f"(augmented) or {tree.n_leaves} (voxel)")
    prefix = Path(args.out_prefix)
    for k in range(W.shape[1]):
        tag = "" if W.shape[1] == 1 else f".class{k}"
        run.wrote(*write_voxel_map(f"{prefix}{tag}", maps[:, k], mask))
        for d in depths:
            vals = scale_slice(W[:, k], tree, d)
            run.wrote(*write_voxel_map(f"{prefix}{tag}.depth{d}", vals, mask))
    run.finish(_manifest_path(args, f"{prefix}.project"),
               extra={"depths": depths, "max_depth": tree.max_depth})
    return 0


def cmd_report(args, run: _Run) -> int:
    texts = [run.read(p).read_text() for p in args.reports]
    with _input_errors():
        reports = read_reports(texts)
    if args.reference and args.reference not in reports:
        raise UsageError(f"reference model {args.reference!r} not among {sorted(reports)}")
    table = format_table(reports, args.reference)
    sys.stdout.write(table)
    if args.out:
        atomic_write_text(args.out, table)
        run.wrote(args.out)
        run.finish(_manifest_path(args, args.out))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p, need_lambda: bool):
    p.add_argument("--x", required=True, help="design matrix (CSV or TSP1)")
    p.add_argument("--y", required=True, help="targets or integer class labels")
    p.add_argument("--model", required=True,
                   help="penalty: ridge, l1, elastic-net, reweighted-l1, l1-aug, "
                        "weighted-l1, tree-l2, tree-linf, multitask-l2, multitask-linf")
    p.add_argument("--loss", default="squared",
                   help="squared, ova-squared, ova-logistic or multinomial")
    if need_lambda:
        p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--rho", type=float, default=1.0, help="tree weight ratio (eta = rho**depth)")
    p.add_argument("--alpha", type=float, default=0.05, help="elastic-net l2/l1 ratio")
    p.add_argument("--stages", type=int, default=4, help="reweighted-l1 stages")
    p.add_argument("--tree", help="cluster tree file (needed by tree penalties)")
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-7, help="relative objective tolerance")
    p.add_argument("--ista", action="store_true", help="disable acceleration")
    p.add_argument("--seed", type=int, default=0)


def _add_grid_flags(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--mask", help="mask file ('dims nx ny nz' + 0/1 grid)")
    g.add_argument("--dims", help="full grid 'nx,ny[,nz]'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsp", description="Tree-structured sparse regression toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    common = _Parser(add_help=False)
    common.add_argument("--manifest", help="run manifest path (default: next to the output)")
    common.add_argument("--jobs", type=int, default=None,
                        help="maximum concurrent fits (default: $TSP_JOBS or 1)")

    p = sub.add_parser("simulate", parents=[common], help="draw the synthetic benchmark")
    p.add_argument("--seed", type=int, default=None, help="overrides the seed given in --spec (default 0)")
    p.add_argument("--spec", help="'key = value' simulation spec file")
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.add_argument("--out-x", default="X.csv")
    p.add_argument("--out-y", default="y.csv")
    p.add_argument("--out-truth", default="w_true.csv")
    p.add_argument("--out-spec", help="write the resolved spec here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", parents=[common], help="spatially constrained Ward tree")
    p.add_argument("--input", required=True, help="data matrix, one column per voxel")
    _add_grid_flags(p)
    p.add_argument("--out", default="tree.txt")
    p.add_argument("--dump-groups", help="also write the tree group structure")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--flavor", choices=("l2", "linf"), default="l2")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fit", parents=[common], help="fit one model at a fixed lambda")
    _add_model_flags(p, need_lambda=True)
    p.add_argument("--out", default="fit.json", help="result JSON; coefficients go to *.coef.csv")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", parents=[common], help="cross-validated evaluation")
    _add_model_flags(p, need_lambda=False)
    p.add_argument("--groups", help="group id per sample (for --folds loo-group)")
    p.add_argument("--folds", default="loo-group", help="'loo-group' or number of folds")
    p.add_argument("--grid", choices=("simulation", "auto"), default="auto")
    p.add_argument("--count", type=int, default=30, help="grid size")
    p.add_argument("--nested", action=argparse.BooleanOptionalAction, default=True,
                   help="select lambda by inner CV on each training part")
    p.add_argument("--name", help="model name in the report (default: the penalty)")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--table", help="also write the aligned text table")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("project", parents=[common], help="export voxel maps and scale slices")
    p.add_argument("--weights", required=True, help="coefficient CSV (q or p rows)")
    p.add_argument("--tree", required=True)
    _add_grid_flags(p)
    p.add_argument("--depth", default="0-6", help="slice depths, e.g. '0-6' or '1,3,5'")
    p.add_argument("--out-prefix", default="weights")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("report", parents=[common], help="merge reports and run paired tests")
    p.add_argument("reports", nargs="+", help="report CSV files from 'cv'")
    p.add_argument("--reference", help="model compared against the others")
    p.add_argument("--out", help="write the table here as well")
    p.set_defaults(func=cmd_report)
    return parser


_USAGE_ERRORS = (UsageError, MatrixFormatError, ConfigurationError, PlanError, SpecError,
                 StructureError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, _Run(args.command, args))
    except _USAGE_ERRORS as exc:
        print(f"tsp: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit with a status
        print(f"tsp: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
