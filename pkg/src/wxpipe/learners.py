"""Regression learners for sensor calibration.

All learners share one contract: fit on a feature matrix holding the six
low-cost hourly parameters (in records.SENSORS order) plus the target column
index of the sensor being calibrated, and predict deterministically from the
fitted state.  The tree kernels are numba-compiled; everything else is plain
numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

KINDS = ("mean", "lm", "mlr", "ridge", "knn", "tree", "forest", "ensemble")
KIND_IDS = {k: i for i, k in enumerate(KINDS)}


class FeatureMismatch(ValueError):
    """Prediction input does not match the model's feature contract."""


def derive_seed(*parts: int) -> int:
    """Stable child seed from integer context (experiment, phase, kind...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# non-negative least squares (active set)

def nnls(A, b, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Minimize ||A w - b|| subject to w >= 0.

    Active-set iteration: repeatedly move the variable with the largest
    positive dual into the passive set, solve the unconstrained subproblem,
    and step back along the segment to the previous iterate when the
    subproblem turns a passive variable negative.  tol bounds the dual
    feasibility at exit.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    if b.shape != (m,):
        raise ValueError("A and b are incompatible")
    max_iter = max_iter or 30 * n
    scale = max(1.0, float(np.abs(A.T @ b).max()))
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        w = A.T @ (b - A @ x)
        w = np.where(passive, -np.inf, w)
        j = int(np.argmax(w))
        if not np.isfinite(w[j]) or w[j] <= tol * scale:
            break
        passive[j] = True
        while True:
            sol, *_ = np.linalg.lstsq(A[:, passive], b, rcond=None)
            z = np.zeros(n)
            z[passive] = sol
            if sol.size and sol.min() > 0.0:
                x = z
                break
            blocking = passive & (z <= 0.0)
            ratios = x[blocking] / (x[blocking] - z[blocking])
            alpha = float(ratios.min())
            x = x + alpha * (z - x)
            drop = passive & (x <= 1e-12 * max(1.0, float(x.max())))
            passive &= ~drop
            x[~passive] = 0.0
            if not passive.any():
                break
    return x


# ---------------------------------------------------------------------------
# tree kernels

@njit(cache=True)
def _tree_build(X, y, min_leaf, max_depth, feat_buf, n_feats):  # pragma: no cover
    n = X.shape[0]
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, np.int64)
    thresh = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    value = np.zeros(max_nodes, np.float64)

    idx = np.arange(n)
    st_start = np.empty(max_nodes, np.int64)
    st_end = np.empty(max_nodes, np.int64)
    st_depth = np.empty(max_nodes, np.int64)
    st_parent = np.empty(max_nodes, np.int64)
    st_left = np.empty(max_nodes, np.int64)
    st_start[0], st_end[0], st_depth[0], st_parent[0], st_left[0] = 0, n, 0, -1, 0
    top = 1
    n_nodes = 0
    buf_pos = 0
    buf_len = feat_buf.shape[0]

    while top > 0:
        top -= 1
        s, e = st_start[top], st_end[top]
        depth, parent, is_left = st_depth[top], st_parent[top], st_left[top]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if is_left == 1:
                left[parent] = node
            else:
                right[parent] = node
        m = e - s
        tot = 0.0
        totsq = 0.0
        for i in range(s, e):
            v = y[idx[i]]
            tot += v
            totsq += v * v
        mean = tot / m
        value[node] = mean
        if m < 2 * min_leaf or (max_depth > 0 and depth >= max_depth):
            continue
        if totsq - tot * mean <= 1e-12 * max(1.0, abs(totsq)):
            continue  # node is already pure

        best_gain = -1.0
        best_f = -1
        best_t = 0.0
        for fj in range(n_feats):
            f = feat_buf[(buf_pos + fj) % buf_len]
            xs = np.empty(m, np.float64)
            for i in range(m):
                xs[i] = X[idx[s + i], f]
            order = np.argsort(xs, kind="quicksort")
            csum = 0.0
            for kk in range(m - 1):
                oi = order[kk]
                csum += y[idx[s + oi]]
                xk1 = xs[order[kk + 1]]
                if kk + 1 < min_leaf or m - kk - 1 < min_leaf:
                    continue
                if xk1 == xs[oi]:
                    continue
                k = kk + 1.0
                g = csum * csum / k + (tot - csum) * (tot - csum) / (m - k)
                if g > best_gain:
                    best_gain = g
                    best_f = f
                    best_t = 0.5 * (xs[oi] + xk1)
        buf_pos += n_feats
        if best_f < 0:
            continue

        tmp = np.empty(m, np.int64)
        nl = 0
        for i in range(s, e):
            if X[idx[i], best_f] <= best_t:
                tmp[nl] = idx[i]
                nl += 1
        if nl == 0 or nl == m:
            continue  # degenerate midpoint rounding, keep as leaf
        nr = nl
        for i in range(s, e):
            if X[idx[i], best_f] > best_t:
                tmp[nr] = idx[i]
                nr += 1
        for i in range(m):
            idx[s + i] = tmp[i]
        feature[node] = best_f
        thresh[node] = best_t
        st_start[top], st_end[top] = s, s + nl
        st_depth[top], st_parent[top], st_left[top] = depth + 1, node, 1
        top += 1
        st_start[top], st_end[top] = s + nl, e
        st_depth[top], st_parent[top], st_left[top] = depth + 1, node, 0
        top += 1

    return (feature[:n_nodes], thresh[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes])


@njit(cache=True)
def _tree_eval(feature, thresh, left, right, value, X):  # pragma: no cover
    n = X.shape[0]
    out = np.empty(n, np.float64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= thresh[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


# ---------------------------------------------------------------------------
# learner catalogue

@dataclass(frozen=True)
class LearnerSpec:
    """A learner kind plus its hyperparameters."""

    kind: str
    ridge_lambda: float = 1.0
    knn_k: int = 5
    min_leaf: int = 5
    max_depth: int = 0          # 0 means unbounded
    n_trees: int = 100
    mtry: int = 0               # 0 means ceil(p / 3)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")


def default_candidates(n_trees: int = 100, max_depth: int = 0) -> list[LearnerSpec]:
    """The base candidate pool used by the stacked ensemble."""
    return [
        LearnerSpec("mean"),
        LearnerSpec("lm"),
        LearnerSpec("mlr"),
        LearnerSpec("ridge"),
        LearnerSpec("knn"),
        LearnerSpec("tree", max_depth=max_depth),
        LearnerSpec("forest", n_trees=n_trees, max_depth=max_depth),
    ]


@dataclass
class FittedModel:
    """A trained learner: prediction is a pure function of (payload, input)."""

    kind: str
    target_col: int
    n_features: int
    payload: dict
    meta: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


def _standardize_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return mean, std


def _lstsq_fit(design: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    coef, _res, rank, _sv = np.linalg.lstsq(design, y, rcond=None)
    return coef, bool(rank < design.shape[1])


def fit_learner(spec: LearnerSpec, X, y, target_col: int,
                seed: int = 0) -> FittedModel:
    """Fit one learner.  Collinear designs fall back to the minimum-norm
    least-squares solution and are flagged in meta["singular"]."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, p) and y (n,)")
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least 2 training rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("features and target must be finite")
    if not 0 <= target_col < p:
        raise ValueError(f"target_col out of range: {target_col}")

    meta: dict = {"seed": seed, "hyperparams": asdict(spec)}
    if spec.kind == "mean":
        payload = {"value": float(y.mean())}
    elif spec.kind == "lm":
        col = X[:, target_col]
        design = np.column_stack([np.ones(n), col])
        coef, singular = _lstsq_fit(design, y)
        payload = {"intercept": float(coef[0]), "coef": float(coef[1])}
        meta["singular"] = singular
    elif spec.kind == "mlr":
        design = np.column_stack([np.ones(n), X])
        coef, singular = _lstsq_fit(design, y)
        payload = {"intercept": float(coef[0]), "coef": coef[1:]}
        meta["singular"] = singular
    elif spec.kind == "ridge":
        x_mean, x_std = _standardize_fit(X)
        z = (X - x_mean) / x_std
        y_mean = float(y.mean())
        lhs = z.T @ z + spec.ridge_lambda * np.eye(p)
        coef = np.linalg.solve(lhs, z.T @ (y - y_mean))
        payload = {"intercept": y_mean, "coef": coef,
                   "x_mean": x_mean, "x_std": x_std}
    elif spec.kind == "knn":
        x_mean, x_std = _standardize_fit(X)
        payload = {"k": min(spec.knn_k, n), "x_mean": x_mean, "x_std": x_std,
                   "xz": (X - x_mean) / x_std, "y": y.copy()}
    elif spec.kind == "tree":
        nodes = _tree_build(X, y, spec.min_leaf, spec.max_depth,
                            np.arange(p, dtype=np.int64), p)
        payload = {"nodes": nodes, "min_leaf": spec.min_leaf}
    elif spec.kind == "forest":
        mtry = spec.mtry if spec.mtry > 0 else math.ceil(p / 3)
        mtry = min(mtry, p)
        rng = np.random.default_rng(seed)
        trees = []
        for _ in range(spec.n_trees):
            boot = rng.integers(0, n, size=n)
            if mtry >= p:
                buf = np.arange(p, dtype=np.int64)
            else:
                slots = n // spec.min_leaf + 1
                buf = np.argsort(rng.random((slots, p)), axis=1)[:, :mtry]
                buf = np.ascontiguousarray(buf.ravel(), dtype=np.int64)
            trees.append(_tree_build(np.ascontiguousarray(X[boot]), y[boot],
                                     spec.min_leaf, spec.max_depth, buf, mtry))
        payload = {"trees": trees, "mtry": mtry, "min_leaf": spec.min_leaf}
    else:
        raise ValueError(f"fit_learner cannot fit kind {spec.kind!r}")

    return FittedModel(kind=spec.kind, target_col=target_col, n_features=p,
                       payload=payload, meta=meta)


def _check_features(model: FittedModel, X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise FeatureMismatch(
            f"model expects {model.n_features} features, got {X.shape}")
    return X


def predict(model: FittedModel, X) -> np.ndarray:
    """Deterministic predictions; output is finite for finite input."""
    X = _check_features(model, X)
    pl = model.payload
    if model.kind == "mean":
        return np.full(X.shape[0], pl["value"])
    if model.kind == "lm":
        return pl["intercept"] + pl["coef"] * X[:, model.target_col]
    if model.kind == "mlr":
        return pl["intercept"] + X @ pl["coef"]
    if model.kind == "ridge":
        z = (X - pl["x_mean"]) / pl["x_std"]
        return pl["intercept"] + z @ pl["coef"]
    if model.kind == "knn":
        z = (X - pl["x_mean"]) / pl["x_std"]
        d2 = ((pl["xz"][None, :, :] - z[:, None, :]) ** 2).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")[:, :pl["k"]]
        return pl["y"][order].mean(axis=1)
    if model.kind == "tree":
        return _tree_eval(*pl["nodes"], X)
    if model.kind == "forest":
        acc = np.zeros(X.shape[0])
        for nodes in pl["trees"]:
            acc += _tree_eval(*nodes, X)
        return acc / len(pl["trees"])
    if model.kind == "ensemble":
        acc = np.zeros(X.shape[0])
        for w, sub in zip(pl["weights"], pl["models"]):
            if w != 0.0:
                acc += w * predict(sub, X)
        return acc
    raise ValueError(f"cannot predict kind {model.kind!r}")


# ---------------------------------------------------------------------------
# persistence

def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, list):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, FittedModel):
        return {"__model__": model_to_dict(obj)}
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def model_to_dict(model: FittedModel) -> dict:
    return {
        "kind": model.kind,
        "target_col": model.target_col,
        "n_features": model.n_features,
        "payload": _to_jsonable(model.payload),
        "meta": _to_jsonable(model.meta),
    }


_NODE_DTYPES = (np.int64, np.float64, np.int64, np.int64, np.float64)


def _nodes_from_lists(lists) -> tuple:
    return tuple(np.asarray(part, dtype=dt)
                 for part, dt in zip(lists, _NODE_DTYPES))


def model_from_dict(doc: dict) -> FittedModel:
    kind = doc["kind"]
    pl = doc["payload"]
    payload: dict = {}
    if kind in ("lm", "mean"):
        payload = dict(pl)
    elif kind in ("mlr", "ridge"):
        payload = dict(pl)
        payload["coef"] = np.asarray(pl["coef"], dtype=float)
        for key in ("x_mean", "x_std"):
            if key in pl:
                payload[key] = np.asarray(pl[key], dtype=float)
    elif kind == "knn":
        payload = {"k": pl["k"],
                   "x_mean": np.asarray(pl["x_mean"], dtype=float),
                   "x_std": np.asarray(pl["x_std"], dtype=float),
                   "xz": np.asarray(pl["xz"], dtype=float),
                   "y": np.asarray(pl["y"], dtype=float)}
    elif kind == "tree":
        payload = dict(pl)
        payload["nodes"] = _nodes_from_lists(pl["nodes"])
    elif kind == "forest":
        payload = dict(pl)
        payload["trees"] = [_nodes_from_lists(t) for t in pl["trees"]]
    elif kind == "ensemble":
        payload = {"weights": np.asarray(pl["weights"], dtype=float),
                   "models": [model_from_dict(m["__model__"])
                              for m in pl["models"]]}
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return FittedModel(kind=kind, target_col=doc["target_col"],
                       n_features=doc["n_features"], payload=payload,
                       meta=doc.get("meta", {}))


def save_model(model: FittedModel, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> FittedModel:
    with open(path, encoding="ascii") as fh:
        return model_from_dict(json.load(fh))
