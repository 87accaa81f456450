"""Scale equalizer: global normalization per fusion branch, the dataset
statistics pass, and the equivalent one-shot weight calibration.

The equalizer replaces each concatenation subject x_i by (x_i - mu_i)/sigma_i
using dataset-global scalars.  Folding the same affine map into the fusion
convolution (w_i' = w_i / sigma_i plus a bias correction) gives an exactly
equivalent network with zero cost in the training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateFeatureError

STATS_HEADER = "# scaleq global-stats v1"


def scale_equalize(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """(x - mu) / sigma with constant mu, sigma."""
    if sigma <= 0:
        raise DegenerateFeatureError(f"sigma must be positive, got {sigma}")
    return (np.asarray(x) - mu) / sigma


@dataclass(frozen=True)
class GlobalStats:
    """Finalized per-branch global mean/std over a statistics dataset."""

    mu: tuple
    sigma: tuple
    count: int

    @property
    def n_branches(self) -> int:
        return len(self.mu)


class StatsAccumulator:
    """Streaming accumulation of per-branch E[x] and E[x^2], one term per
    dataset sample (or mini-batch); merge is associative."""

    def __init__(self, n_branches: int):
        if n_branches < 1:
            raise ContractError("need at least one branch")
        self.m1 = np.zeros(n_branches)
        self.m2 = np.zeros(n_branches)
        self.count = 0

    def add(self, taps) -> None:
        if len(taps) != self.m1.size:
            raise ContractError(
                f"expected {self.m1.size} branch taps, got {len(taps)}")
        for i, tap in enumerate(taps):
            tap = np.asarray(tap, dtype=np.float64)
            self.m1[i] += tap.mean()
            self.m2[i] += np.mean(tap * tap)
        self.count += 1

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if other.m1.size != self.m1.size:
            raise ContractError("accumulators have different branch counts")
        out = StatsAccumulator(self.m1.size)
        out.m1 = self.m1 + other.m1
        out.m2 = self.m2 + other.m2
        out.count = self.count + other.count
        return out

    def finalize(self, sigma_floor: float | None = None) -> GlobalStats:
        if self.count == 0:
            raise ContractError("no samples accumulated")
        mu = self.m1 / self.count
        var = self.m2 / self.count - mu * mu
        var = np.maximum(var, 0.0)          # guard round-off only
        sigma = np.sqrt(var)
        for i, s in enumerate(sigma):
            if s <= 0.0:
                if sigma_floor is None:
                    raise DegenerateFeatureError(
                        f"branch {i} is constant over the stats dataset "
                        f"(sigma == 0); use a sigma floor only if this is "
                        f"intentional")
                sigma[i] = sigma_floor
        return GlobalStats(tuple(mu.tolist()), tuple(sigma.tolist()), self.count)


def accumulate_stats(dataset, tap_fn, n_branches: int, batch_size: int = 8,
                     sigma_floor: float | None = None) -> GlobalStats:
    """One full pass over `dataset` (a sequence of input tensors), calling
    `tap_fn(batch) -> list of branch tensors` per mini-batch and averaging
    the per-batch moments.  Model weights are untouched."""
    items = list(dataset)
    if not items:
        raise ContractError("stats dataset is empty")
    acc = StatsAccumulator(n_branches)
    for lo in range(0, len(items), batch_size):
        batch = np.concatenate(items[lo:lo + batch_size], axis=0)
        acc.add(tap_fn(batch))
    return acc.finalize(sigma_floor)


def calibrate_weights(weight: np.ndarray, bias: np.ndarray | None,
                      stats: GlobalStats, groups, *, bias_skip: bool = False):
    """Fold the equalizers of each branch into the fusion layer:
    w_i' = w_i / sigma_i per channel group, and (unless skipped because a
    batch normalization follows) b' = b - sum_i mu_i/sigma_i * sum(w_i)
    aggregated over the group's channels and spatial kernel taps."""
    weight = np.asarray(weight, dtype=np.float64)
    spans = [(int(a), int(b)) for a, b in groups]
    if len(spans) != stats.n_branches:
        raise ContractError(
            f"{len(spans)} groups vs {stats.n_branches} branches in stats")
    cursor = 0
    for a, b in sorted(spans):
        if a != cursor or b <= a:
            raise ContractError(f"groups {spans} do not tile the channel axis")
        cursor = b
    if cursor != weight.shape[1]:
        raise ContractError(
            f"groups cover {cursor} channels, weight has {weight.shape[1]}")
    new_w = weight.copy()
    correction = np.zeros(weight.shape[0])
    for (a, b), mu, sigma in zip(spans, stats.mu, stats.sigma):
        if sigma <= 0:
            raise DegenerateFeatureError(f"sigma <= 0 for group {(a, b)}")
        new_w[:, a:b] = weight[:, a:b] / sigma
        correction += (mu / sigma) * weight[:, a:b].sum(axis=tuple(range(1, weight.ndim)))
    if bias_skip:
        new_b = None if bias is None else np.array(bias, dtype=np.float64)
    else:
        base = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
        new_b = base - correction
    return new_w, new_b


def branch_pad_values(stats: GlobalStats, groups) -> np.ndarray:
    """Per-input-channel pad constants for the calibrated fusion conv: each
    branch's channels pad with its global mean, so zero padding of the
    equalized feature and mean padding of the raw feature coincide."""
    spans = [(int(a), int(b)) for a, b in groups]
    size = max(b for _, b in spans)
    out = np.zeros(size)
    for (a, b), mu in zip(spans, stats.mu):
        out[a:b] = mu
    return out


def save_stats(path, stats: GlobalStats) -> None:
    lines = [STATS_HEADER]
    lines.append("branch,mu,sigma,count")
    for i, (mu, sigma) in enumerate(zip(stats.mu, stats.sigma)):
        lines.append(f"{i},{mu!r},{sigma!r},{stats.count}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_stats(path) -> GlobalStats:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != STATS_HEADER:
        raise ValueError(f"{path} is not a scaleq stats file")
    mu, sigma, count = [], [], 0
    for ln in lines[2:]:
        _, m, s, c = ln.split(",")
        mu.append(float(m))
        sigma.append(float(s))
        count = int(c)
    return GlobalStats(tuple(mu), tuple(sigma), count)
