"""Forward-backward splitting solvers and the model dispatcher."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cluster import ClusterTree
from .feature import augment, averaging_operator
from .loss import LOSSES, Dataset, indicator_response, lipschitz_bound, score_value_grad
from .penalty import (
    multitask_norm,
    norm_value,
    prox_elastic_net,
    prox_l1,
    prox_multitask,
    prox_ridge,
    prox_tree,
    prox_weighted_l1,
    tree_groups,
)

__all__ = [
    "ConfigurationError",
    "DivergenceError",
    "SolverConfig",
    "FitResult",
    "ModelSpec",
    "Penalty",
    "Problem",
    "PENALTIES",
    "fista",
    "ista",
    "reweighted_l1",
    "build_problem",
    "fit_model",
    "predict",
    "lambda_max",
]

PENALTIES = (
    "ridge", "l1", "elastic_net", "reweighted_l1", "l1_aug", "weighted_l1",
    "tree_l2", "tree_linf", "multitask_l2", "multitask_linf",
)
TREE_PENALTIES = ("l1_aug", "weighted_l1", "tree_l2", "tree_linf")
_PATIENCE = 5


class ConfigurationError(ValueError):
    """Model specification is inconsistent with the data or missing inputs."""


class DivergenceError(RuntimeError):
    def __init__(self, iteration):
        super().__init__(f"objective became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class SolverConfig:
    max_iter: int = 5000
    rel_tol: float = 1e-7
    accelerate: bool = True
    lipschitz: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")


@dataclass
class FitResult:
    coef: np.ndarray
    intercept: float | np.ndarray = 0.0
    objective: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    lam: float | None = None
    penalty: dict = field(default_factory=dict)
    loss: str | None = None
    space: str = "voxel"
    classes: np.ndarray | None = None
    stage_objectives: list = field(default_factory=list)

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.coef))

    @property
    def nonzero_fraction(self) -> float:
        """Percentage of nonzero coefficients (intercepts excluded)."""
        return 100.0 * self.n_nonzero / max(np.size(self.coef), 1)

    def to_json(self) -> str:
        """Metadata as JSON; the coefficients go to a CSV sidecar."""
        meta = {
            "lam": self.lam,
            "penalty": self.penalty,
            "loss": self.loss,
            "space": self.space,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "coef_shape": list(np.shape(self.coef)),
            "intercept": np.asarray(self.intercept, dtype=float).tolist(),
            "classes": None if self.classes is None else np.asarray(self.classes).tolist(),
            "objective": [float(v) for v in self.objective],
            "stage_objectives": [[float(v) for v in s] for s in self.stage_objectives],
        }
        return json.dumps(meta, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, coef) -> "FitResult":
        meta = json.loads(text)
        coef = np.asarray(coef, dtype=float).reshape(meta["coef_shape"])
        intercept = meta["intercept"]
        return cls(
            coef=coef,
            intercept=np.asarray(intercept) if isinstance(intercept, list) else intercept,
            objective=meta["objective"],
            n_iter=meta["n_iter"],
            converged=meta["converged"],
            lam=meta["lam"],
            penalty=meta["penalty"],
            loss=meta["loss"],
            space=meta["space"],
            classes=None if meta["classes"] is None else np.asarray(meta["classes"]),
            stage_objectives=meta["stage_objectives"],
        )


# ---------------------------------------------------------------------------
# generic solvers


def _forward_backward(f, prox, x0, L, config, penalty, accelerate):
    if not L > 0:
        raise ValueError("Lipschitz constant must be > 0")
    config = config or SolverConfig()
    step = 1.0 / L
    g = penalty if penalty is not None else (lambda x: 0.0)
    linear = hasattr(f, "forward")

    def value_at(x):
        if linear:
            z = f.forward(x)
            return f.from_scores(z)[0] + g(x), z
        return f(x)[0] + g(x), None

    x = np.array(x0, dtype=float)
    F, zx = value_at(x)
    if not math.isfinite(F):
        raise DivergenceError(0)
    trace = [F]
    y, zy, t = x, zx, 1.0
    small = 0
    converged = False
    k = 0
    for k in range(1, config.max_iter + 1):
        if linear:
            grad = f.backward(f.from_scores(zy)[1])
        else:
            grad = f(y)[1]
        x_new = prox(y - step * grad, step)
        F_new, zx_new = value_at(x_new)
        if not math.isfinite(F_new):
            raise DivergenceError(k)
        trace.append(F_new)
        if accelerate:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            beta = (t - 1.0) / t_new
            y = x_new + beta * (x_new - x)
            if linear:
                zy = zx_new + beta * (zx_new - zx)
            t = t_new
        else:
            y, zy = x_new, zx_new
        rel = abs(F_new - F) / max(abs(F), 1e-300)
        small = small + 1 if rel < config.rel_tol else 0
        x, zx, F = x_new, zx_new, F_new
        if small >= _PATIENCE:
            converged = True
            break
    return FitResult(coef=x, objective=trace, n_iter=k, converged=converged)


def fista(f, prox, x0, L, config=None, penalty=None) -> FitResult:
    """Accelerated proximal gradient with constant step ``1/L``.

    Parameters
    ----------
    f : callable or linear-model oracle
        ``f(x) -> (value, grad)`` for the smooth part.  Objects exposing
        ``forward``/``backward``/``from_scores`` are driven in score space.
    prox : callable
        ``prox(v, step)`` returns the prox of ``step * g`` at ``v``.
    penalty : callable, optional
        ``g(x)`` for the objective trace.
    """
    return _forward_backward(f, prox, x0, L, config, penalty, accelerate=True)


def ista(f, prox, x0, L, config=None, penalty=None) -> FitResult:
    """Plain forward-backward splitting; the objective trace is non-increasing."""
    return _forward_backward(f, prox, x0, L, config, penalty, accelerate=False)


def reweighted_l1(f, lam, x0, L, config=None, stages=4, eps=0.01, n_penalized=None):
    """Sequence of weighted-l1 fits, weights ``1 / (|w_prev| + eps)``.

    Only the first ``n_penalized`` rows of the variable are penalized (all
    rows by default).  The first stage is a plain lasso.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if stages < 1:
        raise ValueError("stages must be >= 1")
    x = np.array(x0, dtype=float)
    m = x.shape[0] if n_penalized is None else n_penalized
    weights = np.ones_like(x[:m])
    traces = []
    res = None
    for _ in range(stages):
        prox, pen = _weighted_l1_oracles(lam, weights, m)
        res = _forward_backward(f, prox, x, L, config, pen,
                                accelerate=(config or SolverConfig()).accelerate)
        traces.append(res.objective)
        x = res.coef
        weights = 1.0 / (np.abs(x[:m]) + eps)
    res.stage_objectives = traces
    res.penalty = {"kind": "reweighted_l1", "stages": stages, "eps": eps,
                   "final_weights_min": float(weights.min()) if weights.size else 0.0}
    res.stage_weights = weights
    return res


def _weighted_l1_oracles(lam, weights, m):
    def prox(v, step):
        out = v.copy()
        out[:m] = prox_weighted_l1(v[:m], step * lam, weights)
        return out

    def pen(x):
        return lam * float(np.sum(weights * np.abs(x[:m])))

    return prox, pen


# ---------------------------------------------------------------------------
# model layer


@dataclass
class ModelSpec:
    """Loss, penalty and its parameters.

    ``alpha`` is the elastic-net ratio (second penalty = ``alpha * lam``).
    ``rho`` sets tree weights ``rho ** depth``.
    """

    loss: str = "squared"
    penalty: str = "tree_l2"
    lam: float = 1.0
    rho: float = 1.0
    alpha: float = 0.05
    stages: int = 4
    eps: float = 0.01

    def __post_init__(self):
        self.loss = self.loss.replace("-", "_")
        self.penalty = self.penalty.replace("-", "_")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.penalty not in PENALTIES:
            raise ConfigurationError(
                f"unknown penalty {self.penalty!r}; expected one of {PENALTIES}"
            )
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if self.rho <= 0:
            raise ConfigurationError("rho must be > 0")

    @property
    def needs_tree(self) -> bool:
        return self.penalty in TREE_PENALTIES

    @property
    def classification(self) -> bool:
        return self.loss != "squared"

    def descriptor(self) -> dict:
        return asdict(self)


class Penalty:
    """``lam * Omega`` on the coefficient block, with its scaled prox."""

    def __init__(self, spec: ModelSpec, tree: ClusterTree | None = None, d: int | None = None):
        self.kind = spec.penalty
        self.lam = float(spec.lam)
        self.alpha = float(spec.alpha)
        self.gs = None
        self.eta = None
        if self.kind in ("tree_l2", "tree_linf"):
            self.gs = tree_groups(tree, spec.rho, "l2" if self.kind == "tree_l2" else "linf")
        elif self.kind == "weighted_l1":
            self.eta = float(spec.rho) ** tree.depth.astype(float)

    @property
    def eta_min(self) -> float:
        if self.gs is not None:
            return float(self.gs.weights.min())
        if self.eta is not None:
            return float(self.eta.min())
        return 1.0

    def value(self, W) -> float:
        lam, k = self.lam, self.kind
        if k == "ridge":
            return lam * float(np.sum(W * W))
        if k in ("l1", "l1_aug", "reweighted_l1"):
            return lam * float(np.sum(np.abs(W)))
        if k == "elastic_net":
            return lam * float(np.sum(np.abs(W))) + self.alpha * lam * float(np.sum(W * W))
        if k == "weighted_l1":
            eta = self.eta if W.ndim == 1 else self.eta[:, None]
            return lam * float(np.sum(eta * np.abs(W)))
        if k in ("tree_l2", "tree_linf"):
            return lam * norm_value(W, self.gs)
        return lam * multitask_norm(W, "l2" if k == "multitask_l2" else "linf")

    def prox(self, V, step, lam=None) -> np.ndarray:
        t = step * (self.lam if lam is None else lam)
        k = self.kind
        if k == "ridge":
            return prox_ridge(V, t)
        if k in ("l1", "l1_aug", "reweighted_l1"):
            return prox_l1(V, t)
        if k == "elastic_net":
            return prox_elastic_net(V, t, self.alpha * t)
        if k == "weighted_l1":
            return prox_weighted_l1(V, t, self.eta)
        if k in ("tree_l2", "tree_linf"):
            return prox_tree(V, t, self.gs)
        return prox_multitask(V, t, "l2" if k == "multitask_l2" else "linf")


class LinearModelLoss:
    """Smooth loss of ``Z = X @ W (+ b)``; ``b`` is the last row of the variable."""

    def __init__(self, X, target, kind, intercept):
        self.X = X
        self.target = target
        self.kind = kind
        self.intercept = intercept
        self.d = X.shape[1]

    def forward(self, x):
        if self.intercept:
            return self.X @ x[: self.d] + x[self.d]
        return self.X @ x

    def from_scores(self, Z):
        return score_value_grad(self.kind, Z, self.target)

    def backward(self, dZ):
        g = self.X.T @ dZ
        if self.intercept:
            return np.vstack([g, dZ.sum(axis=0)[None, :]])
        return g

    def __call__(self, x):
        val, dZ = self.from_scores(self.forward(x))
        return val, self.backward(dZ)


@dataclass
class Problem:
    """A fully assembled optimization problem for one dataset and model."""

    spec: ModelSpec
    loss: LinearModelLoss
    penalty: Penalty
    L: float
    x0: np.ndarray
    d: int
    x_mean: np.ndarray | None
    t_mean: np.ndarray | float | None
    space: str
    classes: np.ndarray | None

    def coef_block(self, x):
        return x[: self.d] if self.loss.intercept else x

    def prox(self, v, step, lam=None):
        if self.loss.intercept:
            out = v.copy()
            out[: self.d] = self.penalty.prox(v[: self.d], step, lam)
            return out
        return self.penalty.prox(v, step, lam)

    def penalty_value(self, x):
        return self.penalty.value(self.coef_block(x))

    def objective(self, x) -> float:
        return self.loss(x)[0] + self.penalty_value(x)

    def fixed_point_residual(self, x) -> float:
        step = 1.0 / self.L
        _, grad = self.loss(x)
        return float(np.max(np.abs(x - self.prox(x - step * grad, step))))

    def zero_point(self):
        x = self.x0.copy()
        x[: self.d] = 0.0
        return x

    def to_result(self, res: FitResult) -> FitResult:
        x = res.coef
        if self.loss.intercept:
            coef, b = x[: self.d].copy(), x[self.d].copy()
        else:
            coef = x.copy()
            b = self.t_mean - self.x_mean @ coef
        res.coef = coef
        res.intercept = float(b) if np.ndim(b) == 0 else np.asarray(b)
        res.lam = float(self.spec.lam)
        res.penalty = {**self.spec.descriptor(), **{k: v for k, v in res.penalty.items()
                                                    if k not in ("kind",)}}
        res.loss = self.spec.loss
        res.space = self.space
        res.classes = self.classes
        return res


def _design(dataset: Dataset, spec: ModelSpec, tree, op=None):
    if spec.needs_tree:
        if tree is None:
            raise ConfigurationError(f"penalty {spec.penalty!r} needs a cluster tree")
        if tree.n_leaves != dataset.X.shape[1]:
            raise ConfigurationError(
                f"tree has {tree.n_leaves} leaves but X has {dataset.X.shape[1]} columns"
            )
        return augment(dataset.X, tree, op), "augmented"
    return dataset.X, "voxel"


def _intercept_init(codes, c, kind, n):
    counts = np.bincount(codes, minlength=c).astype(float)
    freq = np.clip(counts / n, 0.5 / n, 1 - 0.5 / n)
    if kind == "ova_logistic":
        return np.log(freq) - np.log1p(-freq)
    b = np.log(freq)
    return b - b.mean()


def build_problem(dataset: Dataset, spec: ModelSpec, tree: ClusterTree | None = None,
                  config: SolverConfig | None = None, design=None) -> Problem:
    """Assemble loss oracle, penalty, step size and starting point.

    ``design`` optionally supplies a precomputed ``(matrix, space)`` pair.
    """
    config = config or SolverConfig()
    if spec.classification and dataset.task != "classification":
        raise ConfigurationError(f"loss {spec.loss!r} needs class labels")
    if not spec.classification and dataset.task != "regression":
        raise ConfigurationError("squared-loss regression needs real-valued targets")
    if spec.penalty.startswith("multitask") and not spec.classification:
        raise ConfigurationError("multi-task penalties need a multi-class loss")
    Xd, space = design if design is not None else _design(dataset, spec, tree)
    n, d = Xd.shape
    classes = dataset.classes if spec.classification else None
    x_mean = t_mean = None
    if spec.loss == "squared":
        x_mean = Xd.mean(axis=0)
        t_mean = float(dataset.y.mean())
        loss = LinearModelLoss(Xd - x_mean, dataset.y - t_mean, "squared", False)
        x0 = np.zeros(d)
    elif spec.loss == "ova_squared":
        x_mean = Xd.mean(axis=0)
        Y = indicator_response(dataset.codes, dataset.n_classes)
        t_mean = Y.mean(axis=0)
        loss = LinearModelLoss(Xd - x_mean, Y - t_mean, "ova_squared", False)
        x0 = np.zeros((d, dataset.n_classes))
    else:
        c = dataset.n_classes
        target = (indicator_response(dataset.codes, c) if spec.loss == "ova_logistic"
                  else dataset.codes)
        loss = LinearModelLoss(Xd, target, spec.loss, True)
        x0 = np.zeros((d + 1, c))
        x0[d] = _intercept_init(dataset.codes, c, spec.loss, n)
    L = config.lipschitz or lipschitz_bound(loss.X, spec.loss, intercept=loss.intercept)
    if not L > 0:
        raise ConfigurationError("design matrix is zero; Lipschitz bound vanishes")
    return Problem(spec, loss, Penalty(spec, tree, d), L, x0, d, x_mean, t_mean, space, classes)


def solve(problem: Problem, config: SolverConfig | None = None, warm_start=None) -> FitResult:
    config = config or SolverConfig()
    x0 = problem.x0 if warm_start is None else np.array(warm_start, dtype=float)
    spec = problem.spec
    if spec.penalty == "reweighted_l1":
        res = reweighted_l1(problem.loss, spec.lam, x0, problem.L, config,
                            stages=spec.stages, eps=spec.eps, n_penalized=problem.d)
    else:
        solver = fista if config.accelerate else ista
        res = solver(problem.loss, problem.prox, x0, problem.L, config, problem.penalty_value)
    return problem.to_result(res)


def fit_model(dataset: Dataset, spec: ModelSpec, tree: ClusterTree | None = None,
              config: SolverConfig | None = None, warm_start=None) -> FitResult:
    """Fit one loss/penalty combination.

    Tree-based penalties are fitted in the augmented space (one column per
    tree node); multi-class losses fit the whole coefficient matrix jointly.
    """
    return solve(build_problem(dataset, spec, tree, config), config, warm_start)


def warm_start_of(problem: Problem, result: FitResult):
    """Variable layout of a previous result, for warm-starting ``problem``."""
    if problem.loss.intercept:
        return np.vstack([result.coef, np.asarray(result.intercept)[None, :]])
    return result.coef


def lambda_max(problem: Problem, rtol=1e-6) -> float:
    """Smallest penalty level at which the zero coefficient block is optimal.

    Starts from the bound ``||grad||_inf / eta_min`` and tightens it by
    bisection on the prox; a 0.1% margin is added.  Ridge never yields
    zeros and returns the plain gradient scale.
    """
    x = problem.zero_point()
    _, grad = problem.loss(x)
    G = problem.coef_block(grad)
    gmax = float(np.max(np.abs(G))) if G.size else 0.0
    if gmax == 0.0:
        return 1.0
    kind = problem.penalty.kind
    if kind == "ridge":
        return gmax
    if kind == "multitask_l2":
        return 1.001 * float(np.sqrt((G * G).sum(axis=1)).max())
    if kind == "multitask_linf":
        return 1.001 * float(np.abs(G).sum(axis=1).max())
    hi = gmax / problem.penalty.eta_min
    lo = 0.0

    def is_zero(lam):
        return not np.any(problem.penalty.prox(-G, 1.0, lam))

    if not is_zero(hi):  # pragma: no cover - the bound is provable
        raise RuntimeError("lambda_max bound failed to zero the coefficients")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if is_zero(mid):
            hi = mid
        else:
            lo = mid
    return 1.001 * hi


def predict(result: FitResult, X, tree: ClusterTree | None = None, op=None) -> np.ndarray:
    """Predicted targets (regression) or class labels (classification).

    Augmented-space models accept either augmented input or raw voxel input
    together with the tree.
    """
    X = np.asarray(X, dtype=float)
    coef = np.asarray(result.coef)
    if X.ndim != 2:
        raise ValueError("X must be 2D")
    if X.shape[1] != coef.shape[0]:
        if result.space == "augmented" and tree is not None and X.shape[1] == tree.n_leaves:
            X = augment(X, tree, op if op is not None else averaging_operator(tree))
        else:
            raise ValueError(f"X has {X.shape[1]} columns, model expects {coef.shape[0]}")
    scores = X @ coef + result.intercept
    if result.loss in (None, "squared"):
        return scores
    labels = np.argmax(scores, axis=1)
    return labels if result.classes is None else np.asarray(result.classes)[labels]
