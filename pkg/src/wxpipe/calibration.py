"""Sensor calibration: dataset splitting, cross-validated stacking, seeded
experiment sweeps, model ranking and hourly-data correction.

The central object is the stacked ensemble: every candidate learner produces
out-of-fold predictions on the training set, non-negative least squares picks
the weighting that minimizes the pooled out-of-fold squared error, and the
weighted candidates are refit on the full training set.  A single-candidate
stack degenerates to that candidate with weight one, which is how individual
learner kinds are evaluated in the experiment sweeps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Mapping, Sequence

import numpy as np

from .learners import (
    KIND_IDS, FeatureMismatch, FittedModel, LearnerSpec, default_candidates,
    derive_seed, fit_learner, nnls, predict,
)
from .metrics import MetricsReport, ZeroVariance, build_report, paired_t_test
from .records import SENSORS, HourlyRecord, PairedDataset

log = logging.getLogger(__name__)

_PHASE_FOLD = 1
_PHASE_FULL = 2


class TooFewRows(ValueError):
    pass


class KExceedsN(ValueError):
    pass


def split_dataset(data: PairedDataset | int, train_fraction: float = 0.6,
                  mode: str = "random", seed: int = 0,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive (train, test) row indices, both sorted.

    Random mode shuffles with the seed; chronological mode takes the earliest
    rows as training data.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = data if isinstance(data, int) else len(data)
    if n < 5:
        raise TooFewRows(f"need at least 5 rows, got {n}")
    n_train = min(max(int(round(n * train_fraction)), 1), n - 1)
    if mode == "random":
        perm = np.random.default_rng(seed).permutation(n)
        train = np.sort(perm[:n_train])
        test = np.sort(perm[n_train:])
    elif mode == "chronological":
        if not isinstance(data, int):
            order = np.argsort(np.array([h.timestamp() for h in data.hours]))
        else:
            order = np.arange(n)
        train = np.sort(order[:n_train])
        test = np.sort(order[n_train:])
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return train, test


def kfold_indices(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """k disjoint validation folds covering [0, n), sizes differing by <= 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise KExceedsN(f"k={k} exceeds n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    base, rem = divmod(n, k)
    folds, pos = [], 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        folds.append(np.sort(perm[pos:pos + size]))
        pos += size
    return folds


def _fold_seed(seed: int, fold_i: int, kind: str) -> int:
    return derive_seed(seed, _PHASE_FOLD, fold_i, KIND_IDS[kind])


def _full_seed(seed: int, kind: str) -> int:
    return derive_seed(seed, _PHASE_FULL, KIND_IDS[kind])


def out_of_fold_matrix(X, y, target_col: int, candidates: Sequence[LearnerSpec],
                       n_folds: int, seed: int) -> np.ndarray:
    """Each candidate's predictions for every training row, made by the fold
    fit that excluded that row."""
    n = X.shape[0]
    folds = kfold_indices(n, n_folds, seed)
    Z = np.empty((n, len(candidates)))
    for fold_i, val in enumerate(folds):
        mask = np.ones(n, dtype=bool)
        mask[val] = False
        for j, cand in enumerate(candidates):
            fit = fit_learner(cand, X[mask], y[mask], target_col,
                              seed=_fold_seed(seed, fold_i, cand.kind))
            Z[val, j] = predict(fit, X[val])
    return Z


def super_learner(X, y, target_col: int, candidates: Sequence[LearnerSpec],
                  n_folds: int = 10, seed: int = 0, *,
                  oof: np.ndarray | None = None,
                  full_fits: Mapping[str, FittedModel] | None = None,
                  ) -> FittedModel:
    """Stacked ensemble minimizing pooled out-of-fold MSE.

    The reported cv_mse is the achieved NNLS objective; the deployed weights
    are the NNLS solution normalized onto the simplex (each vertex of which
    is a single candidate, so the objective never exceeds the best single
    candidate's out-of-fold MSE).  ``oof``/``full_fits`` let callers inject
    fold work they already did; results are identical to a fresh run because
    fit seeds depend only on (seed, phase, fold, kind).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not candidates:
        raise ValueError("need at least one candidate")
    if len({c.kind for c in candidates}) != len(candidates):
        raise ValueError("candidate kinds must be unique")
    n = X.shape[0]
    if n < n_folds:
        raise KExceedsN(f"{n} rows cannot make {n_folds} folds")

    Z = oof if oof is not None else out_of_fold_matrix(
        X, y, target_col, candidates, n_folds, seed)
    cand_mse = ((y[:, None] - Z) ** 2).mean(axis=0)

    w_raw = nnls(Z, y)
    total = w_raw.sum()
    if total <= 0.0:
        weights = np.zeros(len(candidates))
        weights[int(np.argmin(cand_mse))] = 1.0
        cv_mse = float(cand_mse.min())
    else:
        weights = w_raw / total
        cv_mse = float(((y - Z @ w_raw) ** 2).mean())

    members, member_weights = [], []
    for j, cand in enumerate(candidates):
        if weights[j] == 0.0:
            continue
        if full_fits is not None and cand.kind in full_fits:
            fit = full_fits[cand.kind]
        else:
            fit = fit_learner(cand, X, y, target_col,
                              seed=_full_seed(seed, cand.kind))
        members.append(fit)
        member_weights.append(float(weights[j]))

    return FittedModel(
        kind="ensemble", target_col=target_col, n_features=X.shape[1],
        payload={"weights": np.array(member_weights), "models": members},
        meta={
            "seed": seed,
            "folds": n_folds,
            "cv_mse": cv_mse,
            "candidate_kinds": [c.kind for c in candidates],
            "candidate_cv_mse": {c.kind: float(m)
                                 for c, m in zip(candidates, cand_mse)},
            "weights": {c.kind: float(w)
                        for c, w in zip(candidates, weights)},
        },
    )


@dataclass(frozen=True)
class ExperimentOutput:
    """One seeded pipeline run: fitted model, split, predictions, metrics."""

    kind: str
    seed: int
    sensor: str
    model: FittedModel
    train_idx: np.ndarray
    test_idx: np.ndarray
    yhat: np.ndarray
    metrics: MetricsReport


def candidates_for_kind(kind: str, base: Sequence[LearnerSpec],
                        ) -> list[LearnerSpec]:
    if kind == "ensemble":
        return list(base)
    matches = [c for c in base if c.kind == kind]
    if not matches:
        raise ValueError(f"kind {kind!r} not in the candidate pool")
    return matches


def learning_pipeline(data: PairedDataset, kind: str, seed: int,
                      base: Sequence[LearnerSpec] | None = None,
                      n_folds: int = 10, train_fraction: float = 0.6,
                      ) -> ExperimentOutput:
    """Split 60/40 at the seed, stack on the training part, score on test."""
    base = list(base) if base is not None else default_candidates()
    train_idx, test_idx = split_dataset(data, train_fraction, "random", seed)
    candidates = candidates_for_kind(kind, base)
    model = super_learner(data.covariates[train_idx], data.pws[train_idx],
                          SENSORS.index(data.sensor), candidates,
                          n_folds=n_folds, seed=seed)
    yhat = predict(model, data.covariates[test_idx])
    return ExperimentOutput(
        kind=kind, seed=seed, sensor=data.sensor, model=model,
        train_idx=train_idx, test_idx=test_idx, yhat=yhat,
        metrics=build_report(yhat, data.pws[test_idx]),
    )


def run_experiments(data: PairedDataset, kinds: Sequence[str],
                    seeds: Sequence[int],
                    base: Sequence[LearnerSpec] | None = None,
                    n_folds: int = 10, train_fraction: float = 0.6,
                    ) -> dict[tuple[str, int], ExperimentOutput]:
    """Every (kind, seed) pipeline run.

    Runs with the same seed share their split, folds and fold fits (fit seeds
    depend only on seed, fold and kind), so the fold work is computed once
    per seed and the outputs are identical to independent runs.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    base = list(base) if base is not None else default_candidates()
    for kind in kinds:
        candidates_for_kind(kind, base)

    target_col = SENSORS.index(data.sensor)
    outputs: dict[tuple[str, int], ExperimentOutput] = {}
    for seed in seeds:
        train_idx, test_idx = split_dataset(data, train_fraction, "random", seed)
        Xtr = data.covariates[train_idx]
        ytr = data.pws[train_idx]
        Z = out_of_fold_matrix(Xtr, ytr, target_col, base, n_folds, seed)
        full_fits = {c.kind: fit_learner(c, Xtr, ytr, target_col,
                                         seed=_full_seed(seed, c.kind))
                     for c in base}
        col = {c.kind: j for j, c in enumerate(base)}
        for kind in kinds:
            candidates = candidates_for_kind(kind, base)
            sub = Z[:, [col[c.kind] for c in candidates]]
            try:
                model = super_learner(Xtr, ytr, target_col, candidates,
                                      n_folds=n_folds, seed=seed,
                                      oof=sub, full_fits=full_fits)
                yhat = predict(model, data.covariates[test_idx])
                outputs[(kind, seed)] = ExperimentOutput(
                    kind=kind, seed=seed, sensor=data.sensor, model=model,
                    train_idx=train_idx, test_idx=test_idx, yhat=yhat,
                    metrics=build_report(yhat, data.pws[test_idx]),
                )
            except ValueError as exc:
                log.warning("experiment (%s, %d) failed: %s", kind, seed, exc)
    return outputs


@dataclass(frozen=True)
class RankRow:
    kind: str
    rank: int
    r2_mean: float
    r2_sd: float
    t_value: float | None      # None for the top row and for ties
    p_value: float | None
    tie: bool = False


def rank_models(outputs: Mapping[tuple[str, int], ExperimentOutput],
                baseline_r2: Mapping[int, float] | None = None,
                ) -> list[RankRow]:
    """Kinds ordered by mean test R2; each is t-tested (paired on seed)
    against the top kind.  baseline_r2 adds an uncorrected pseudo-entry."""
    by_kind: dict[str, dict[int, float]] = {}
    for (kind, seed), out in outputs.items():
        by_kind.setdefault(kind, {})[seed] = out.metrics.r2
    if baseline_r2:
        by_kind["raw"] = dict(baseline_r2)
    if len(by_kind) < 2:
        raise ValueError("ranking needs at least two entries")
    seed_sets = {frozenset(v) for v in by_kind.values()}
    if len(seed_sets) != 1:
        raise ValueError("all kinds must cover the same seeds")
    seeds = sorted(next(iter(seed_sets)))
    if len(seeds) < 2:
        raise ValueError("ranking needs at least two seeds")

    series = {kind: np.array([v[s] for s in seeds])
              for kind, v in by_kind.items()}
    order = sorted(series, key=lambda k: -series[k].mean())
    top = series[order[0]]
    rows = []
    for rank, kind in enumerate(order, start=1):
        r2s = series[kind]
        if rank == 1:
            t_value: float | None = None
            p_value: float | None = None
            tie = False
        else:
            try:
                t_value, p_value, _ = paired_t_test(top, r2s)
                tie = False
            except ZeroVariance:
                t_value, p_value, tie = None, None, True
        rows.append(RankRow(kind=kind, rank=rank,
                            r2_mean=float(r2s.mean()),
                            r2_sd=float(r2s.std(ddof=1)),
                            t_value=t_value, p_value=p_value, tie=tie))
    return rows


def postprocess_predictions(sensor: str, yhat: np.ndarray) -> np.ndarray:
    """Clamp predictions back into the sensor's physical domain."""
    out = np.asarray(yhat, dtype=float).copy()
    if sensor in ("RG", "WS"):
        out = np.maximum(out, 0.0)
    elif sensor == "WD":
        out = np.mod(out, 360.0)
        out[out >= 360.0] = 0.0
    return out


def correct_dataset(model: FittedModel, hourly: Sequence[HourlyRecord],
                    sensor: str) -> list[HourlyRecord]:
    """Replace one sensor's hourly column with model predictions."""
    if sensor not in SENSORS:
        raise ValueError(f"unknown sensor {sensor!r}")
    if model.target_col != SENSORS.index(sensor):
        raise FeatureMismatch(
            f"model was trained for {SENSORS[model.target_col]}, not {sensor}")
    X = hourly_features(hourly)
    yhat = postprocess_predictions(sensor, predict(model, X))
    field_name = {"AP": "ap_mean", "AT": "at_mean", "RH": "rh_mean",
                  "RG": "rg_sum", "WS": "ws_mean", "WD": "wd_mean"}[sensor]
    return [replace(rec, **{field_name: float(v)})
            for rec, v in zip(hourly, yhat)]


def hourly_features(hourly: Sequence[HourlyRecord]) -> np.ndarray:
    return np.array([[r.ap_mean, r.at_mean, r.rh_mean,
                      r.rg_sum, r.ws_mean, r.wd_mean] for r in hourly])


@dataclass(frozen=True)
class FinalCorrection:
    """Chronological train/test experiment for one sensor."""

    sensor: str
    model: FittedModel
    train_idx: np.ndarray
    test_idx: np.ndarray
    yhat: np.ndarray
    raw_metrics: MetricsReport
    corrected_metrics: MetricsReport


def final_correction(data: PairedDataset,
                     base: Sequence[LearnerSpec] | None = None,
                     n_folds: int = 10, seed: int = 0,
                     train_fraction: float = 0.6) -> FinalCorrection:
    """Fit the stack on the chronologically earliest rows and score the
    correction on the held-out tail, against the uncorrected baseline."""
    base = list(base) if base is not None else default_candidates()
    train_idx, test_idx = split_dataset(data, train_fraction,
                                        "chronological", seed)
    model = super_learner(data.covariates[train_idx], data.pws[train_idx],
                          SENSORS.index(data.sensor), base,
                          n_folds=n_folds, seed=seed)
    yhat = postprocess_predictions(
        data.sensor, predict(model, data.covariates[test_idx]))
    return FinalCorrection(
        sensor=data.sensor, model=model,
        train_idx=train_idx, test_idx=test_idx, yhat=yhat,
        raw_metrics=build_report(data.lcaws[test_idx], data.pws[test_idx]),
        corrected_metrics=build_report(yhat, data.pws[test_idx]),
    )


# ---------------------------------------------------------------------------
# paired data construction and CSV form

def pair_hourly(lcaws: Sequence[HourlyRecord], pws: Sequence[HourlyRecord],
                sensor: str) -> PairedDataset:
    """Inner-join the two hourly series on hour_start."""
    ref = {r.hour_start: r for r in pws}
    hours, lc_vals, pws_vals, covs = [], [], [], []
    for rec in sorted(lcaws, key=lambda r: r.hour_start):
        other = ref.get(rec.hour_start)
        if other is None:
            continue
        hours.append(rec.hour_start)
        lc_vals.append(rec.value(sensor))
        pws_vals.append(other.value(sensor))
        covs.append([rec.value(s) for s in SENSORS])
    return PairedDataset(
        sensor=sensor, hours=tuple(hours),
        lcaws=np.array(lc_vals), pws=np.array(pws_vals),
        covariates=np.array(covs).reshape(len(hours), len(SENSORS)),
    )


PAIRED_HEADER = "hour_start,lcaws_value,pws_value," + ",".join(
    f"cov_{s.lower()}" for s in SENSORS)


def paired_csv_lines(data: PairedDataset) -> list[str]:
    lines = [PAIRED_HEADER + "\n"]
    for i, hour in enumerate(data.hours):
        cov = ",".join(f"{v:.10g}" for v in data.covariates[i])
        lines.append(
            f"{hour.strftime('%Y-%m-%dT%H:%M:%SZ')},"
            f"{data.lcaws[i]:.10g},{data.pws[i]:.10g},{cov}\n")
    return lines


def parse_paired_csv(text: str, sensor: str) -> PairedDataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != PAIRED_HEADER:
        raise ValueError("not a paired-dataset CSV")
    hours, lc, pw, covs = [], [], [], []
    for ln in lines[1:]:
        f = ln.split(",")
        if len(f) != 3 + len(SENSORS):
            raise ValueError(f"bad paired CSV line {ln!r}")
        hours.append(datetime.strptime(f[0], "%Y-%m-%dT%H:%M:%SZ")
                     .replace(tzinfo=timezone.utc))
        lc.append(float(f[1]))
        pw.append(float(f[2]))
        covs.append([float(v) for v in f[3:]])
    return PairedDataset(sensor=sensor, hours=tuple(hours),
                         lcaws=np.array(lc), pws=np.array(pw),
                         covariates=np.array(covs).reshape(len(hours),
                                                           len(SENSORS)))
