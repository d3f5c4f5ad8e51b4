"""Non-parametric information estimates for disentanglement scoring.

Mutual information between a discrete factor and a continuous code is
estimated with the nearest-neighbor method of Ross (PLOS ONE 2014); discrete
factor entropies use the digamma-corrected plug-in estimator. Both feed the
mutual-information-gap style disentanglement score, which compares how much
each true factor (content vs pose) is captured by its intended latent versus
the other one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import digamma
from sklearn.neighbors import NearestNeighbors

from .errors import ConfigError

DEFAULT_NEIGHBORS = 3
POSITION_GRID = 8


@dataclass(frozen=True)
class FactorSamples:
    """Discrete ground-truth factors: content per clip, pose per (clip, frame)."""

    f_c: np.ndarray  # (n_clips,) int
    f_p: np.ndarray  # (n_clips, n_frames) int

    def validate(self) -> "FactorSamples":
        if self.f_c.ndim != 1 or self.f_p.ndim != 2:
            raise ValueError("f_c must be (n_clips,), f_p (n_clips, n_frames)")
        if self.f_c.shape[0] != self.f_p.shape[0]:
            raise ValueError("factor arrays disagree on clip count")
        return self


@dataclass(frozen=True)
class RepSamples:
    """Learned codes aligned with :class:`FactorSamples`."""

    z_c: np.ndarray  # (n_clips, content_dim) float
    z_p: np.ndarray  # (n_clips, n_frames, pose_dim) float

    def validate(self) -> "RepSamples":
        if self.z_c.ndim != 2 or self.z_p.ndim != 3:
            raise ValueError("z_c must be 2-d, z_p 3-d")
        if self.z_c.shape[0] != self.z_p.shape[0]:
            raise ValueError("representation arrays disagree on clip count")
        if not (np.isfinite(self.z_c).all() and np.isfinite(self.z_p).all()):
            raise ValueError("representations contain non-finite values")
        return self


@dataclass(frozen=True)
class MigReport:
    """Disentanglement score plus the intermediate information quantities."""

    mig: float
    i_fc_zc: float
    i_fc_zp: float
    i_fp_zc: float
    i_fp_zp: float
    h_fc: float
    h_fp: float

    CSV_COLUMNS = ("experiment", "i_fc_zc", "i_fc_zp", "i_fp_zc", "i_fp_zp", "mig")

    def csv_row(self, experiment: str) -> list:
        return [experiment, self.i_fc_zc, self.i_fc_zp,
                self.i_fp_zc, self.i_fp_zp, self.mig]


def write_mig_csv(reports: dict[str, MigReport], path) -> None:
    """Write one CSV row per experiment with the standard MI columns."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MigReport.CSV_COLUMNS)
        for name, report in reports.items():
            writer.writerow(report.csv_row(name))


def knn_mi_discrete_continuous(labels: np.ndarray, vectors: np.ndarray,
                               k: int = DEFAULT_NEIGHBORS) -> float:
    """Mutual information (nats) between discrete labels and vectors.

    For each sample the distance to its k-th nearest neighbor within its own
    class is found (Chebyshev metric), then the count m of all-sample
    neighbors inside that radius replaces the naive class-conditional density.
    The estimate is psi(N) - <psi(n_label)> + psi(k) - <psi(m)>, clipped at 0.

    Coincident points (zero k-NN radius, e.g. constant codes per class) are
    handled by counting the coincident multiplicity as both k and m, which
    keeps degenerate per-class constants converging to the label entropy.
    """
    labels = np.asarray(labels)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    if labels.ndim != 1 or labels.shape[0] != vectors.shape[0]:
        raise ValueError("labels and vectors must be index-aligned 1-d/2-d arrays")
    if not np.isfinite(vectors).all():
        raise ValueError("vectors contain non-finite values")
    if k < 1:
        raise ValueError("k must be >= 1")

    n = labels.shape[0]
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    short = counts < k + 1
    if short.any():
        bad = uniq[short][0]
        raise ValueError(
            f"label class {bad!r} has {int(counts[short][0])} samples; "
            f"need at least k+1 = {k + 1}"
        )

    radius = np.empty(n, dtype=np.float64)
    for class_idx in range(uniq.shape[0]):
        mask = inverse == class_idx
        nn = NearestNeighbors(n_neighbors=k, metric="chebyshev")
        nn.fit(vectors[mask])
        dist, _ = nn.kneighbors()
        radius[mask] = dist[:, -1]

    # Shrink so the k-th neighbor itself falls outside; m then counts the
    # query point plus strictly nearer neighbors.
    shrunk = np.nextafter(radius, 0.0)
    m = _count_within_radius(vectors, shrunk)

    k_eff = np.full(n, k, dtype=np.float64)
    ties = radius == 0.0
    if ties.any():
        # Coincident points: replace k by the same-class coincidence count
        # (and m is the all-sample coincidence count), the mixed-distribution
        # correction of Gao et al.
        k_eff[ties] = _class_coincidences(vectors, inverse)[ties]

    mi = (digamma(n) - np.mean(digamma(counts[inverse]))
          + np.mean(digamma(k_eff)) - np.mean(digamma(m)))
    return max(0.0, float(mi))


def _class_coincidences(vectors: np.ndarray, class_index: np.ndarray) -> np.ndarray:
    """Per point: how many samples share both its vector and its class."""
    order = np.lexsort(vectors.T)
    ordered = vectors[order]
    boundary = np.any(ordered[1:] != ordered[:-1], axis=1)
    group_sorted = np.concatenate(([0], np.cumsum(boundary)))
    group = np.empty(vectors.shape[0], dtype=np.int64)
    group[order] = group_sorted
    pair = group * (class_index.max() + 1) + class_index
    _, pair_inverse, pair_counts = np.unique(pair, return_inverse=True,
                                             return_counts=True)
    return pair_counts[pair_inverse].astype(np.float64)


def _count_within_radius(vectors: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Per-point count of samples within the point's own radius (inclusive)."""
    n, dim = vectors.shape
    if dim <= 15:
        from sklearn.neighbors import KDTree

        tree = KDTree(vectors, metric="chebyshev")
        return tree.query_radius(vectors, radii, count_only=True).astype(np.float64)
    # Tree structures degrade in high dimension; count by chunked brute force.
    from scipy.spatial.distance import cdist

    counts = np.empty(n, dtype=np.float64)
    chunk = max(16, int(2**22 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        dist = cdist(vectors[start:stop], vectors, metric="chebyshev")
        counts[start:stop] = (dist <= radii[start:stop, None]).sum(axis=1)
    return counts


def grassberger_entropy(label_counts) -> float:
    """Entropy (nats) of a discrete distribution from per-class counts.

    Digamma-corrected plug-in: H = psi(N) - (1/N) sum_i n_i psi(n_i).
    """
    counts = np.asarray(label_counts)
    if counts.size == 0:
        raise ValueError("label_counts is empty")
    if not np.issubdtype(counts.dtype, np.integer):
        if not np.all(counts == np.floor(counts)):
            raise ValueError("label_counts must be integers")
        counts = counts.astype(np.int64)
    if (counts <= 0).any():
        raise ValueError("label_counts must be positive")
    n = int(counts.sum())
    return float(digamma(n) - np.sum(counts * digamma(counts)) / n)


def entropy_from_labels(labels: np.ndarray) -> float:
    _, counts = np.unique(np.asarray(labels).ravel(), return_counts=True)
    return grassberger_entropy(counts)


def quantize_positions(positions: np.ndarray, bounds: np.ndarray,
                       grid: int = POSITION_GRID) -> np.ndarray:
    """Bin normalized positions onto a grid, one discrete label per sample.

    Positions are first rescaled by their clip's reachable span ([lo, hi] per
    axis, which depends on sprite scale), so the pose labels carry no scale
    information and every grid cell is reachable by every clip.
    """
    positions = np.asarray(positions, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.float64)
    lo = bounds[..., 0]
    hi = bounds[..., 1]
    span = hi - lo
    if np.any(span <= 0):
        raise ValueError("degenerate position bounds")
    rel = (positions - lo[..., None, None]) / span[..., None, None] \
        if positions.ndim == 3 else (positions - lo) / span
    cells = np.clip((rel * grid).astype(np.int64), 0, grid - 1)
    return cells[..., 0] * grid + cells[..., 1]


def mig_score(factors: FactorSamples, reps: RepSamples,
              k: int = DEFAULT_NEIGHBORS) -> MigReport:
    """Disentanglement score from factor/representation sample pairs.

    Four MI terms are estimated with :func:`knn_mi_discrete_continuous` and
    combined with the factor entropies:

        0.5/H(f_c) * (I(f_c,z_c) - I(f_c,z_p))
      + 0.5/H(f_p) * (I(f_p,z_p) - I(f_p,z_c))

    Pose-side terms pool all (clip, frame) samples. The I(f_p, z_c) term uses
    the first frame of each clip only, because the clip's content code would
    otherwise appear duplicated under every pose label and break the
    neighbor-distance estimate.
    """
    factors.validate()
    reps.validate()
    n_clips, n_frames = factors.f_p.shape
    if reps.z_p.shape[:2] != (n_clips, n_frames):
        raise ValueError("z_p not aligned with f_p")
    if reps.z_c.shape[0] != n_clips:
        raise ValueError("z_c not aligned with f_c")

    h_fc = entropy_from_labels(factors.f_c)
    h_fp = entropy_from_labels(factors.f_p)
    if h_fc <= 0.0 or h_fp <= 0.0:
        raise ValueError("factor entropies must be positive for the gap score")

    f_c_pooled = np.repeat(factors.f_c, n_frames)
    z_p_pooled = reps.z_p.reshape(n_clips * n_frames, -1)

    i_fc_zc = knn_mi_discrete_continuous(factors.f_c, reps.z_c, k)
    i_fc_zp = knn_mi_discrete_continuous(f_c_pooled, z_p_pooled, k)
    i_fp_zp = knn_mi_discrete_continuous(factors.f_p.ravel(), z_p_pooled, k)
    i_fp_zc = knn_mi_discrete_continuous(factors.f_p[:, 0], reps.z_c, k)

    mig = (0.5 / h_fc * (i_fc_zc - i_fc_zp)
           + 0.5 / h_fp * (i_fp_zp - i_fp_zc))
    return MigReport(
        mig=float(mig),
        i_fc_zc=i_fc_zc, i_fc_zp=i_fc_zp,
        i_fp_zc=i_fp_zc, i_fp_zp=i_fp_zp,
        h_fc=h_fc, h_fp=h_fp,
    )
