"""Cross-validation, regularization-path model selection and paired tests."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .cluster import ClusterTree
from .feature import augment, averaging_operator
from .io import rng_stream
from .loss import Dataset
from .solver import (
    ConfigurationError,
    FitResult,
    ModelSpec,
    SolverConfig,
    build_problem,
    lambda_max,
    predict,
    solve,
    warm_start_of,
)

__all__ = [
    "PlanError",
    "CVPlan",
    "EvalReport",
    "make_plan",
    "lambda_grid",
    "fit_path",
    "prediction_error",
    "cross_validate",
    "wilcoxon_signed_rank",
    "read_reports",
    "format_table",
]


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class CVPlan:
    """Fold id per sample.

    ``kind`` is ``"kfold"`` or ``"loo_group"``; ``nested`` selects the
    penalty level by an inner CV on each training part instead of by the
    outer folds themselves.
    """

    kind: str
    folds: np.ndarray
    nested: bool = True
    seed: int = 0
    groups: np.ndarray | None = None

    @property
    def n_folds(self) -> int:
        return int(self.folds.max()) + 1 if self.folds.size else 0

    def split(self, f: int):
        test = np.flatnonzero(self.folds == f)
        train = np.flatnonzero(self.folds != f)
        if test.size == 0 or train.size == 0:
            raise PlanError(f"fold {f} leaves an empty train or test part")
        return train, test

    def inner(self, train: np.ndarray) -> "CVPlan":
        """Plan of the same kind over the training samples ``train``."""
        if self.kind == "loo_group":
            return make_plan(len(train), "loo_group", groups=self.groups[train],
                             seed=self.seed + 1, nested=False)
        k = self.n_folds
        return make_plan(len(train), "kfold", k=k, seed=self.seed + 1, nested=False)


def make_plan(n: int, kind: str = "kfold", k: int | None = None, groups=None,
              seed: int = 0, nested: bool = True) -> CVPlan:
    """Deterministic fold assignment from ``(n, groups, seed)``."""
    if kind in ("loo-group", "loo_group"):
        if groups is None:
            raise PlanError("leave-one-group-out needs group ids")
        groups = np.asarray(groups).reshape(-1)
        if groups.size != n:
            raise PlanError(f"{groups.size} group ids for {n} samples")
        _, folds = np.unique(groups, return_inverse=True)
        if folds.max() < 1:
            raise PlanError("leave-one-group-out needs at least two groups")
        return CVPlan("loo_group", folds.astype(np.int64), nested, seed, groups)
    if kind != "kfold":
        raise PlanError(f"unknown split kind {kind!r}")
    if k is None or k < 2 or k > n:
        raise PlanError(f"k-fold needs 2 <= k <= n, got k={k}, n={n}")
    perm = rng_stream(seed, "cv.folds").permutation(n)
    folds = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, k)):
        folds[chunk] = f
    return CVPlan("kfold", folds, nested, seed, None if groups is None else np.asarray(groups))


def lambda_grid(preset: str = "simulation", count: int = 30, problem=None) -> np.ndarray:
    """Decreasing log-spaced penalty levels.

    ``"simulation"`` spans 1e3 .. 1e-3; ``"auto"`` is
    ``lambda_max * 2**-k`` for k = 0..count-1 where ``lambda_max`` zeroes
    every coefficient of ``problem``.
    """
    if count < 2:
        raise ValueError("count must be >= 2")
    if preset == "simulation":
        return np.logspace(3, -3, count)
    if preset == "auto":
        if problem is None:
            raise ValueError("the 'auto' grid needs a problem to scale lambda_max")
        return lambda_max(problem) * 2.0 ** -np.arange(count, dtype=float)
    raise ValueError(f"unknown grid preset {preset!r}")


def prediction_error(dataset: Dataset, pred) -> float:
    """MSE for regression, misclassification percentage otherwise."""
    if dataset.task == "regression":
        return float(np.mean((dataset.y - pred) ** 2))
    return 100.0 * float(np.mean(pred != dataset.y))


def fit_path(train: Dataset, spec: ModelSpec, grid, tree: ClusterTree | None = None,
             config: SolverConfig | None = None, design=None) -> list[FitResult]:
    """Fits along ``grid`` (largest first), each warm-started from the previous."""
    config = config or SolverConfig()
    grid = np.asarray(grid, dtype=float)
    order = np.argsort(-grid, kind="stable")
    problem = build_problem(train, replace(spec, lam=float(grid[order[0]])), tree, config, design)
    out = [None] * len(grid)
    warm = None
    for i in order:
        problem.spec = replace(spec, lam=float(grid[i]))
        problem.penalty.lam = float(grid[i])
        res = solve(problem, config, warm)
        warm = warm_start_of(problem, res)
        out[i] = res
    return out


def _select(grid, mean_err):
    # lowest error; ties go to the larger penalty
    best = None
    for i in np.argsort(-np.asarray(grid), kind="stable"):
        if best is None or mean_err[i] < mean_err[best]:
            best = i
    return int(best)


@dataclass
class EvalReport:
    model: str
    fold_errors: np.ndarray
    chosen_lambdas: np.ndarray
    nonzero_fractions: np.ndarray
    wall_time: float = 0.0
    fits: list = field(default_factory=list, repr=False)
    path_errors: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_folds(self) -> int:
        return len(self.fold_errors)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_errors))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_errors))

    @property
    def median_nonzero(self) -> float:
        return float(np.median(self.nonzero_fractions))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "fold", "error", "lambda", "nonzero_pct"])
        for f, (e, lam, nz) in enumerate(
            zip(self.fold_errors, self.chosen_lambdas, self.nonzero_fractions)
        ):
            w.writerow([self.model, f, "%.17g" % e, "%.17g" % lam, "%.17g" % nz])
        return buf.getvalue()


def _design_all(dataset, spec, tree):
    if spec.needs_tree:
        if tree is None:
            raise ConfigurationError(f"penalty {spec.penalty!r} needs a cluster tree")
        op = averaging_operator(tree)
        return augment(dataset.X, tree, op), "augmented", op
    return dataset.X, "voxel", None


def cross_validate(dataset: Dataset, plan: CVPlan, spec: ModelSpec, grid,
                   config: SolverConfig | None = None, tree: ClusterTree | None = None,
                   jobs: int = 1, name: str | None = None) -> EvalReport:
    """Outer-fold test errors with the penalty level chosen along ``grid``.

    The tree, when needed, is taken as given (it is built without labels).
    """
    t0 = time.perf_counter()
    config = config or SolverConfig()
    grid = np.asarray(grid, dtype=float)
    if plan.folds.shape != (dataset.n_samples,):
        raise PlanError("plan does not match the number of samples")
    Xd, space, op = _design_all(dataset, spec, tree)

    def path_errors(train_idx, test_idx):
        tr, te = dataset.subset(train_idx), dataset.subset(test_idx)
        fits = fit_path(tr, spec, grid, tree, config, (Xd[train_idx], space))
        errs = np.array([prediction_error(te, predict(r, Xd[test_idx])) for r in fits])
        return errs, fits

    def outer(f):
        train, test = plan.split(f)
        if not plan.nested:
            return path_errors(train, test)
        inner = plan.inner(train)
        inner_err = np.array([
            path_errors(train[tr], train[te])[0]
            for tr, te in (inner.split(g) for g in range(inner.n_folds))
        ])
        best = _select(grid, inner_err.mean(axis=0))
        sub = grid[grid >= grid[best]]
        fit = fit_path(dataset.subset(train), spec, sub, tree, config,
                       (Xd[train], space))[int(np.argmin(sub))]
        err = prediction_error(dataset.subset(test), predict(fit, Xd[test]))
        return best, err, fit

    folds = range(plan.n_folds)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(outer, folds))
    else:
        results = [outer(f) for f in folds]

    if plan.nested:
        chosen = grid[[r[0] for r in results]]
        errors = np.array([r[1] for r in results])
        fits = [r[2] for r in results]
        path = None
    else:
        path = np.array([r[0] for r in results])
        best = _select(grid, path.mean(axis=0))
        chosen = np.full(plan.n_folds, grid[best])
        errors = path[:, best]
        fits = [r[1][best] for r in results]
    nz = np.array([r.nonzero_fraction for r in fits])
    return EvalReport(name or spec.penalty, errors, chosen, nz,
                      time.perf_counter() - t0, fits, path)


# ---------------------------------------------------------------------------
# paired test


def wilcoxon_signed_rank(a, b, exact_max: int = 12) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are discarded and tied magnitudes get average ranks.
    Up to ``exact_max`` nonzero pairs the null distribution is enumerated
    over all sign patterns; beyond that a normal approximation with
    continuity correction is used.  All-zero differences give ``p = 1``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1D arrays of equal length")
    if a.size < 5:
        raise ValueError("need at least 5 pairs")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if n <= exact_max:
        signs = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
        null = signs @ ranks
        tol = 1e-9 * ranks.sum()
        lo = np.count_nonzero(null <= t_plus + tol) / null.size
        hi = np.count_nonzero(null >= t_plus - tol) / null.size
        return float(min(1.0, 2.0 * min(lo, hi)))
    mu = n * (n + 1) / 4.0
    sd = math.sqrt(float(np.sum(ranks * ranks)) / 4.0)
    z = max(abs(t_plus - mu) - 0.5, 0.0) / sd
    return float(min(1.0, 2.0 * ndtr(-z)))


# ---------------------------------------------------------------------------
# report files


def read_reports(texts) -> dict[str, dict[str, np.ndarray]]:
    """Parse report CSVs into ``{model: {"error", "lambda", "nonzero_pct"}}``."""
    acc: dict[str, list] = {}
    for text in texts:
        for row in csv.DictReader(io.StringIO(text)):
            acc.setdefault(row["model"], []).append(
                (int(row["fold"]), float(row["error"]), float(row["lambda"]),
                 float(row["nonzero_pct"]))
            )
    out = {}
    for model, rows in acc.items():
        rows.sort()
        arr = np.array([r[1:] for r in rows])
        out[model] = {"error": arr[:, 0], "lambda": arr[:, 1], "nonzero_pct": arr[:, 2]}
    return out


def format_table(reports: dict, reference: str | None = None) -> str:
    """Aligned summary: error mean/std, p-value against ``reference``, sparsity."""
    header = ["model", "folds", "error_mean", "error_std", "p_value", "median_nonzero_pct"]
    rows = [header]
    ref = reports.get(reference) if reference else None
    for model, r in reports.items():
        err = r["error"]
        if ref is None or model == reference:
            pval = "-"
        elif len(err) != len(ref["error"]) or len(err) < 5:
            pval = "n/a"
        else:
            pval = "%.4g" % wilcoxon_signed_rank(err, ref["error"])
        rows.append([model, str(len(err)), "%.4g" % np.mean(err), "%.4g" % np.std(err), pval,
                     "%.4g" % np.median(r["nonzero_pct"])])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "".join(
        "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in rows
    )

