"""Fusion-weight calibration against high-frequency anchor trajectories.

High-frequency trips yield trustworthy shortest-path routes; thinning them
produces low-frequency variants whose candidate paths can be scored and
compared against those routes. A tiny linear model then learns how much each
judge's score predicts path accuracy, with the weights kept on the simplex
through a softmax parameterization.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .history import Trajectory
from .network import EdgeKey, InputFormatError, RoadNetwork
from .path_search import CandidatePath, SubGraph, candidates_for_probe, k_shortest_paths
from .scoring import FusionWeights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationSample:
    """Judge scores of one candidate path (fractions) and its true accuracy."""

    kinematic: float
    habit: float
    traffic: float
    accuracy: float


def ground_truth_paths(trajectory: Trajectory, network: RoadNetwork, *,
                       radius: float = 170.0) -> list[tuple[int, CandidatePath | None]]:
    """Shortest path between the nearest candidate edges of each probe pair.

    Intended for high-frequency anchor data where the shortest path is a
    safe stand-in for the real route. Unreachable pairs are skipped with a
    log line; the returned index is the segment's end-probe position.
    """
    whole = SubGraph.whole(network)
    out: list[tuple[int, CandidatePath | None]] = []
    prev_cands = None
    for i in range(1, len(trajectory.probes)):
        if prev_cands is None:
            prev_cands = candidates_for_probe(trajectory.probes[i - 1], network, radius)
        cur_cands = candidates_for_probe(trajectory.probes[i], network, radius)
        if not prev_cands or not cur_cands:
            log.info("trajectory %s: no candidate edge around probe %d", trajectory.id, i)
            out.append((i, None))
            prev_cands = cur_cands or None
            continue
        found = k_shortest_paths(whole, [prev_cands[0]], [cur_cands[0]], 1)
        if not found:
            log.info("trajectory %s: probes %d-%d unreachable", trajectory.id, i - 1, i)
            out.append((i, None))
            prev_cands = cur_cands
            continue
        path = found[0]
        out.append((i, path))
        # anchor the next segment at this segment's end projection
        prev_cands = [path.end]
    return out


def downsample(trajectory: Trajectory, keep_interval: float) -> Trajectory:
    """Thin a trajectory to probes on a coarser regular grid.

    ``keep_interval`` must be an integer multiple of the source probing
    interval; probes at multiples of it from the start time are retained
    untouched.
    """
    source = trajectory.probing_interval
    if source <= 0:
        raise ValueError("trajectory has no probing interval")
    ratio = keep_interval / source
    if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
        raise ValueError(
            f"keep interval {keep_interval} is not a multiple of the source interval {source}")
    t0 = trajectory.t0
    kept = tuple(p for p in trajectory.probes
                 if abs((p.t - t0) / keep_interval - round((p.t - t0) / keep_interval)) < 1e-6)
    return Trajectory(trajectory.id, trajectory.vehicle, kept, trajectory.finished)


def path_accuracy(path_edges: Sequence[EdgeKey], truth_edges: Sequence[EdgeKey]) -> float:
    """Fraction of a path's edges that appear in the reference path."""
    if not path_edges or not truth_edges:
        raise ValueError("paths must be non-empty")
    truth = set(truth_edges)
    return sum(1 for e in path_edges if e in truth) / len(path_edges)


@dataclass
class WeightFit:
    weights: FusionWeights            # raw fitted weights (consumed by the matcher)
    rounded: FusionWeights            # one-decimal presentation weights
    bias: float
    train_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    best_val: float = math.inf
    degenerate: bool = False
    epochs: int = 0


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _round_weights(w: np.ndarray) -> FusionWeights:
    r = np.round(w, 1)
    total = r.sum()
    if total <= 0:
        return FusionWeights.equal()
    r = r / total
    return FusionWeights(float(r[0]), float(r[1]), float(r[2]))


def fit_weights(samples: Sequence[CalibrationSample], *,
                max_epochs: int = 20000, learning_rate: float = 0.5,
                patience: int = 50, seed: int = 0) -> WeightFit:
    """Fit the judge weights to predict path accuracy from scores.

    Scores enter as fractions in [0, 1]. The weights are a softmax over
    three logits (initialized at zero, i.e. equal weights) so they stay
    nonnegative and sum to one at every epoch; a free bias absorbs offsets
    and is dropped at inference, where it cannot change the argmax. Training
    is full-batch gradient descent with a backtracking step and early stop
    on a 6:2:2 validation split.
    """
    if len(samples) < 30:
        raise ValueError(f"need at least 30 samples, got {len(samples)}")
    scores = np.array([[s.kinematic, s.habit, s.traffic] for s in samples], dtype=float)
    target = np.array([s.accuracy for s in samples], dtype=float)
    if np.all(scores.std(axis=0) < 1e-12):
        log.warning("degenerate calibration samples (constant scores); using equal weights")
        return WeightFit(FusionWeights.equal(), FusionWeights.equal(), 0.0, degenerate=True)
    if target.std() < 1e-12:
        # constant targets put no signal on the weights; the bias absorbs it all
        bias = float(target.mean())
        return WeightFit(FusionWeights(1 / 3, 1 / 3, 1 / 3, bias), FusionWeights.equal(), bias)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    scores, target = scores[order], target[order]
    n = len(samples)
    n_train = max(1, int(round(0.6 * n)))
    n_val = max(1, min(int(round(0.2 * n)), n - n_train))
    s_train, y_train = scores[:n_train], target[:n_train]
    s_val, y_val = scores[n_train:n_train + n_val], target[n_train:n_train + n_val]

    logits = np.zeros(3)
    bias = 0.0
    result = WeightFit(FusionWeights.equal(), FusionWeights.equal(), 0.0)
    best = (logits.copy(), bias)
    step = learning_rate
    stale = 0

    def loss(s, y, lg, b):
        pred = s @ _softmax(lg) + b
        resid = pred - y
        return float(resid @ resid / len(y))

    for epoch in range(max_epochs):
        w = _softmax(logits)
        pred = s_train @ w + bias
        resid = pred - y_train
        base_loss = float(resid @ resid / n_train)
        d_pred = 2.0 * resid / n_train
        d_w = s_train.T @ d_pred
        d_logits = w * (d_w - float(w @ d_w))   # softmax Jacobian
        d_bias = float(d_pred.sum())

        accepted = base_loss
        trial = step
        for _ in range(40):
            cand_logits = logits - trial * d_logits
            cand_bias = bias - trial * d_bias
            cand_loss = loss(s_train, y_train, cand_logits, cand_bias)
            if cand_loss <= base_loss + 1e-15:
                logits, bias, accepted = cand_logits, cand_bias, cand_loss
                step = trial * 1.2
                break
            trial /= 2.0
        val_loss = loss(s_val, y_val, logits, bias)
        result.train_history.append(accepted)
        result.val_history.append(val_loss)
        result.epochs = epoch + 1
        if val_loss < result.best_val - 1e-15:
            result.best_val = val_loss
            best = (logits.copy(), bias)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
        if float(d_logits @ d_logits) + d_bias * d_bias < 1e-24:
            break

    logits, bias = best
    w = _softmax(logits)
    result.weights = FusionWeights(float(w[0]), float(w[1]), float(w[2]), bias)
    result.rounded = _round_weights(w)
    result.bias = bias
    return result


# -- file formats -----------------------------------------------------------

def write_samples_csv(path: str, samples: Sequence[CalibrationSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["S_P", "S_C", "S_A", "Y"])
        for s in samples:
            writer.writerow([f"{s.kinematic:.9f}", f"{s.habit:.9f}",
                             f"{s.traffic:.9f}", f"{s.accuracy:.9f}"])


def read_samples_csv(path: str) -> list[CalibrationSample]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                any(c not in reader.fieldnames for c in ("S_P", "S_C", "S_A", "Y")):
            raise InputFormatError(f"{path}: expected columns S_P,S_C,S_A,Y")
        for rec in reader:
            try:
                out.append(CalibrationSample(float(rec["S_P"]), float(rec["S_C"]),
                                             float(rec["S_A"]), float(rec["Y"])))
            except (TypeError, ValueError) as exc:
                raise InputFormatError(f"{path}: bad row {rec}") from exc
    return out


def write_weights_json(path: str, fit: WeightFit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"wp": fit.weights.kinematic, "wc": fit.weights.habit,
                   "wa": fit.weights.traffic, "bias": fit.bias}, fh)


def read_weights_json(path: str) -> FusionWeights:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        return FusionWeights(float(payload["wp"]), float(payload["wc"]),
                             float(payload["wa"]), float(payload.get("bias", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"{path}: bad weights file: {exc}") from exc
