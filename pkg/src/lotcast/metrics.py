"""Evaluation suite: oracle (min-) and final (f-) displacement, miss,
overlap, and average-precision metrics over K joint scene candidates.

Conventions:

* ADE averages position error over all agents and timesteps; scene FDE
  averages the final-step error over agents.
* A sample is a miss when no candidate brings every agent's final error
  within the threshold (2.0 m by default).
* The overlap flag fires on oriented-footprint contact at any timestep
  between two agents at least one of which is a vehicle, or between a
  vehicle footprint and a hard map segment. Pedestrian-pedestrian contact
  never flags. Footprint headings are derived from consecutive predicted
  positions (stationary steps inherit the previous heading).
* Per-sample AP uses all-points interpolation over the selector ranking;
  a sample with no positive candidates contributes AP = 0 or is excluded,
  per the ``zero_positive`` policy.
* Final (f-) metrics read the selector's top-1 candidate; ties resolve to
  the lowest candidate index. f-mAP is top-1 precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import geom
from .scene import Episode, Scene

MISS_THRESHOLD = 2.0  # meters

TABLE_COLUMNS = ("minADE", "minFDE", "MR", "OR", "mAP",
                 "f_ADE", "f_FDE", "f_MR", "f_OR", "f_mAP")


def ade_fde(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Displacement errors for one joint future: (ADE, FDE), meters."""
    err = np.linalg.norm(np.asarray(pred, dtype=np.float64) - gt, axis=-1)
    return float(err.mean()), float(err[:, -1].mean())


def per_agent_fde(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(pred[:, -1] - gt[:, -1], axis=-1)


def scene_miss(candidates: np.ndarray, gt: np.ndarray,
               threshold: float = MISS_THRESHOLD) -> bool:
    """True iff every candidate leaves some agent's final error > threshold."""
    final_err = np.linalg.norm(candidates[:, :, -1] - gt[None, :, -1], axis=-1)
    return bool(np.all(final_err.max(axis=1) > threshold))


def _footprints(futures: np.ndarray, scene: Scene) -> np.ndarray:
    headings, _ = geom.headings_from_positions(
        scene.last_positions(), scene.last_headings(), futures)
    sizes = scene.sizes()
    return geom.footprint_corners(futures, headings,
                                  sizes[:, 0:1], sizes[:, 1:2])  # (N, T, 4, 2)


def overlap_rate(futures: np.ndarray, scene: Scene) -> bool:
    """Flag footprint contact per the vehicle-centric taxonomy (see module doc)."""
    futures = np.asarray(futures, dtype=np.float64)
    corners = _footprints(futures, scene)
    is_vehicle = np.array([c == "vehicle" for c in scene.categories()])
    N = futures.shape[0]
    for i in range(N):
        for j in range(i + 1, N):
            if not (is_vehicle[i] or is_vehicle[j]):
                continue
            if geom.rects_overlap(corners[i], corners[j]).any():
                return True
    segs = scene.map.hard_segments
    if segs.shape[0]:
        for i in np.flatnonzero(is_vehicle):
            if geom.footprint_touches_segments(corners[i], segs).any():
                return True
    return False


def map_score(labels: np.ndarray, ranking: np.ndarray) -> float:
    """All-points average precision of boolean ``labels`` under ``ranking``."""
    ordered = np.asarray(labels, dtype=bool)[np.asarray(ranking)]
    positives = int(ordered.sum())
    if positives == 0:
        return 0.0
    hits = np.cumsum(ordered)
    ranks = np.arange(1, len(ordered) + 1)
    return float((hits[ordered] / ranks[ordered]).sum() / positives)


def selector_ranking(probs: np.ndarray) -> np.ndarray:
    """Candidate indices by descending probability; ties keep lower index."""
    return np.lexsort((np.arange(len(probs)), -np.asarray(probs)))


@dataclass(frozen=True)
class Prediction:
    """K joint candidates for one episode, in the episode's scene frame."""

    candidates: np.ndarray   # (K, N, T_f, 2)
    probs: np.ndarray        # (K,)


@dataclass(frozen=True)
class EvalRecord:
    minADE: float
    minFDE: float
    miss: bool
    minOR: bool
    f_ADE: float
    f_FDE: float
    f_miss: bool
    f_OR: bool
    labels: np.ndarray       # (K,) bool: all-agent FDE within threshold
    ranking: np.ndarray      # (K,) selector order, best first
    ap: float


def evaluate_sample(pred: Prediction, episode: Episode,
                    threshold: float = MISS_THRESHOLD) -> EvalRecord:
    gt = episode.gt_futures
    cands, probs = pred.candidates, pred.probs
    K = cands.shape[0]

    pairs = [ade_fde(cands[k], gt) for k in range(K)]
    ades = np.array([p[0] for p in pairs])
    fdes = np.array([p[1] for p in pairs])
    flags = np.array([overlap_rate(cands[k], episode.scene) for k in range(K)])
    labels = np.array([bool(np.all(per_agent_fde(cands[k], gt) <= threshold))
                       for k in range(K)])
    ranking = selector_ranking(probs)
    top1 = int(np.argmax(probs))

    return EvalRecord(
        minADE=float(ades.min()), minFDE=float(fdes.min()),
        miss=scene_miss(cands, gt, threshold), minOR=bool(flags.all()),
        f_ADE=float(ades[top1]), f_FDE=float(fdes[top1]),
        f_miss=bool(np.any(per_agent_fde(cands[top1], gt) > threshold)),
        f_OR=bool(flags[top1]),
        labels=labels, ranking=ranking,
        ap=map_score(labels, ranking),
    )


def aggregate(records: Sequence[EvalRecord],
              zero_positive: str = "zero") -> dict[str, float]:
    """Dataset table: mean of per-sample records, all ten columns."""
    n = len(records)
    if n == 0:
        raise ValueError("cannot aggregate zero records")
    if zero_positive == "zero":
        ap_values = [r.ap for r in records]
    elif zero_positive == "exclude":
        ap_values = [r.ap for r in records if r.labels.any()]
    else:
        raise ValueError("zero_positive must be 'zero' or 'exclude'")
    return {
        "minADE": sum(r.minADE for r in records) / n,
        "minFDE": sum(r.minFDE for r in records) / n,
        "MR": sum(r.miss for r in records) / n,
        "OR": sum(r.minOR for r in records) / n,
        "mAP": sum(ap_values) / len(ap_values) if ap_values else 0.0,
        "f_ADE": sum(r.f_ADE for r in records) / n,
        "f_FDE": sum(r.f_FDE for r in records) / n,
        "f_MR": sum(r.f_miss for r in records) / n,
        "f_OR": sum(r.f_OR for r in records) / n,
        "f_mAP": sum(bool(r.labels[r.ranking[0]]) for r in records) / n,
    }


def evaluate(episodes: Sequence[Episode],
             predict_fn: Callable[[Episode], Prediction],
             threshold: float = MISS_THRESHOLD,
             zero_positive: str = "zero") -> tuple[dict[str, float], list[EvalRecord]]:
    records = [evaluate_sample(predict_fn(ep), ep, threshold) for ep in episodes]
    return aggregate(records, zero_positive), records
