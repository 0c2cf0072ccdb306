"""Minimum-redundancy maximum-relevance ranking with histogram MI.

Mutual information is computed on discretized series: ratings on 10 uniform
levels over their declared range, features on equal-frequency (quantile)
bins so the estimate is invariant to monotone rescalings of a feature. MI
is reported in nats; only its ordering matters to the ranking.

The greedy criterion at step m+1 picks the unpicked feature i maximizing

    MI(rating, F_i) - (1/m) * sum_{j picked} MI(F_i, F_j)

with ties broken toward the lower feature index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiscretizedSeries:
    levels: np.ndarray  # integer levels in [0, bins)
    bin_edges: np.ndarray  # bins + 1 edges

    @property
    def bins(self) -> int:
        return len(self.bin_edges) - 1

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class SelectionResult:
    ranked_indices: np.ndarray  # greedy pick order, distinct
    scores: np.ndarray  # criterion value at each pick
    relevance: np.ndarray  # MI(rating, feature) for every feature

    def top(self, k: int) -> np.ndarray:
        return self.ranked_indices[:k]


@dataclass(frozen=True)
class FrameWindowSet:
    """Accepted low-variation windows: (start, length) ranges plus the modal
    rating level of each."""

    windows: list[tuple[int, int]]
    levels: list[int]

    @property
    def frame_indices(self) -> np.ndarray:
        if not self.windows:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([np.arange(s, s + n) for s, n in self.windows])

    def __len__(self) -> int:
        return len(self.windows)


def discretize(values, bins: int, value_range: tuple[float, float]) -> DiscretizedSeries:
    """Equal-width binning over [lo, hi]; out-of-range values clamp into the
    end bins. Bin of x is min(floor((x - lo)/width), bins - 1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot discretize an empty sequence")
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    lo, hi = value_range
    if not lo < hi:
        raise ValueError(f"bad range [{lo}, {hi}]")
    width = (hi - lo) / bins
    levels = np.clip(np.floor((values - lo) / width).astype(np.int64), 0, bins - 1)
    edges = lo + width * np.arange(bins + 1)
    return DiscretizedSeries(levels=levels, bin_edges=edges)


def discretize_quantile(values, bins: int) -> DiscretizedSeries:
    """Equal-frequency binning: edges at the data quantiles. Duplicate edges
    (heavily tied data) simply leave some bins empty."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot discretize an empty sequence")
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1))
    levels = np.clip(np.searchsorted(edges[1:-1], values, side="right"), 0, bins - 1)
    return DiscretizedSeries(levels=levels.astype(np.int64), bin_edges=edges)


def mutual_information(a: DiscretizedSeries, b: DiscretizedSeries) -> float:
    """Histogram MI in nats: sum over joint cells of p log(p / (pa pb)).

    The summation runs in a canonical argument order so the result is
    bit-identical under argument swap.
    """
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("mutual information of empty series")
    if (a.bins, a.levels.tobytes()) > (b.bins, b.levels.tobytes()):
        a, b = b, a
    return _mi_from_levels(a.levels, a.bins, b.levels, b.bins)


def _mi_from_levels(la, na, lb, nb) -> float:
    n = la.size
    joint = np.bincount(la * nb + lb, minlength=na * nb).reshape(na, nb) / n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    outer = pa[:, None] * pb[None, :]
    return float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))


def entropy(s: DiscretizedSeries) -> float:
    p = np.bincount(s.levels, minlength=s.bins) / len(s)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def rank_mrmr(
    features: np.ndarray,
    ratings: DiscretizedSeries,
    k: int,
    feature_bins: int = 10,
) -> SelectionResult:
    """Greedy mRMR ranking of feature columns against the rating levels.

    ``features`` holds the selection frames only, one row per frame.
    """
    features = np.asarray(features)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be [frames, width] with at least one frame")
    if features.shape[0] != len(ratings):
        raise ValueError(
            f"{features.shape[0]} feature rows vs {len(ratings)} ratings"
        )
    n_feat = features.shape[1]
    k = min(k, n_feat)

    cols = [discretize_quantile(features[:, j], feature_bins) for j in range(n_feat)]
    relevance = np.array([mutual_information(ratings, c) for c in cols])

    picked: list[int] = []
    scores: list[float] = []
    redundancy_sum = np.zeros(n_feat)
    available = np.ones(n_feat, dtype=bool)
    for _ in range(k):
        if picked:
            criterion = relevance - redundancy_sum / len(picked)
        else:
            criterion = relevance.copy()
        criterion[~available] = -np.inf
        best = int(np.argmax(criterion))  # argmax ties -> lowest index
        picked.append(best)
        scores.append(float(criterion[best]))
        available[best] = False
        if len(picked) < k:
            picked_col = cols[best]
            for j in np.nonzero(available)[0]:
                redundancy_sum[j] += mutual_information(cols[j], picked_col)
    return SelectionResult(
        ranked_indices=np.array(picked, dtype=np.int64),
        scores=np.array(scores),
        relevance=relevance,
    )


def select_frames(ratings, budget_fraction: float, window: int = 50, bins: int = 10,
                  rating_range: tuple[float, float] = (-1.0, 1.0)) -> FrameWindowSet:
    """Low-variation window selection for the MI estimation set.

    A candidate window of ``window`` frames qualifies when at least 80% of
    its frames share the window's modal discretized level. Qualifying
    windows are grouped by modal level and accepted in a left-to-right,
    level-stratified round-robin (no overlaps) until the frame budget is
    met or candidates run out. An empty result signals that no window
    qualified; callers fall back to uniform sampling.
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    if not 0.0 < budget_fraction < 1.0:
        raise ValueError(f"budget_fraction must be in (0, 1), got {budget_fraction}")
    t = ratings.size
    if t < window:
        raise ValueError(f"need at least {window} frames, got {t}")
    levels = discretize(ratings, bins, rating_range).levels
    need = int(0.8 * window)

    # Modal level and count per candidate start, via windowed level counts.
    onehot = np.zeros((bins, t), dtype=np.int32)
    onehot[levels, np.arange(t)] = 1
    cum = np.concatenate([np.zeros((bins, 1), np.int32), np.cumsum(onehot, axis=1)], axis=1)
    starts = np.arange(t - window + 1)
    counts = cum[:, starts + window] - cum[:, starts]  # [bins, n_starts]
    modal_level = counts.argmax(axis=0)
    modal_count = counts.max(axis=0)
    qualifying = modal_count >= need

    by_level: dict[int, list[int]] = {}
    for s in starts[qualifying]:
        by_level.setdefault(int(modal_level[s]), []).append(int(s))

    max_windows = int(budget_fraction * t) // window
    taken: list[tuple[int, int]] = []
    taken_levels: list[int] = []
    occupied = np.zeros(t, dtype=bool)
    queues = {lvl: iter_starts for lvl, iter_starts in sorted(by_level.items())}
    while len(taken) < max_windows and queues:
        for lvl in list(queues):
            starts_left = queues[lvl]
            while starts_left and occupied[starts_left[0] : starts_left[0] + window].any():
                starts_left.pop(0)
            if not starts_left:
                del queues[lvl]
                continue
            s = starts_left.pop(0)
            taken.append((s, window))
            taken_levels.append(lvl)
            occupied[s : s + window] = True
            if len(taken) >= max_windows:
                break
    order = np.argsort([s for s, _ in taken]) if taken else []
    return FrameWindowSet(
        windows=[taken[i] for i in order],
        levels=[taken_levels[i] for i in order],
    )


def save_selection(result: SelectionResult, path) -> None:
    """One line per pick: "rank, feature_index, score, relevance"."""
    with open(path, "w", encoding="utf-8") as fh:
        for rank, idx in enumerate(result.ranked_indices):
            fh.write(
                f"{rank}, {int(idx)}, {result.scores[rank]:.12g}, "
                f"{result.relevance[idx]:.12g}\n"
            )


def load_selection(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse the text format back into (ranked_indices, scores, relevance-at-pick)."""
    idx, scores, rel = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise ValueError(f"malformed selection line: {line!r}")
            idx.append(int(parts[1]))
            scores.append(float(parts[2]))
            rel.append(float(parts[3]))
    return np.array(idx, dtype=np.int64), np.array(scores), np.array(rel)
