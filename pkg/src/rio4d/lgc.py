"""Local-geometry + RCS (LGC) histogram descriptors and their matching.

Keypoints are the strongest-RCS points of every azimuth x elevation cell.
Each keypoint is described by a 2D histogram over (distance to neighbor,
neighbor RCS) for its nearest keypoint neighbors.  Histograms are compared
with a neighborhood-expanded intersection (NHI) in which every occupied bin
of A may pair with a nearby occupied bin of B, discounted by the Manhattan
offset between them.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import DegenerateGeometry
from .preprocess import EmptyScan, IntervalGrid, RadarScan

log = logging.getLogger(__name__)


class BinConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LgcConfig:
    distance_bin_width: float = 0.2
    rcs_bin_width: float = 1.0
    distance_bins: int = 100
    rcs_bins: int = 50
    neighbors: int = 30
    nhi_threshold: float = 5.0
    nhi_radius: int = 1
    rcs_origin: float = 0.0
    rcs_screen: float = 3.0
    keypoints_per_cell: int = 30


RADAR_PROFILES: dict[str, LgcConfig] = {
    "ars548": LgcConfig(),
    "eagle_g7": LgcConfig(
        distance_bin_width=0.1, rcs_bin_width=0.01, distance_bins=100, rcs_bins=100,
        neighbors=15, nhi_threshold=10.0,
    ),
}


@dataclass(frozen=True)
class LgcHistogram:
    bins: np.ndarray  # (distance_bins, rcs_bins) int counts
    distance_bin_width: float
    rcs_bin_width: float
    rcs_origin: float
    owner_index: int
    owner_rcs: float
    clamped: int = 0

    @property
    def total(self) -> int:
        return int(self.bins.sum())

    def same_layout(self, other: LgcHistogram) -> bool:
        return (
            self.bins.shape == other.bins.shape
            and self.distance_bin_width == other.distance_bin_width
            and self.rcs_bin_width == other.rcs_bin_width
            and self.rcs_origin == other.rcs_origin
        )


@dataclass(frozen=True)
class KeypointCloud:
    scan: RadarScan
    indices: np.ndarray  # rows of ``scan``, ascending
    histograms: np.ndarray | None = field(default=None, repr=False)  # (L, s_h, t_h)
    config: LgcConfig | None = None
    clamped: int = 0

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def positions(self) -> np.ndarray:
        return self.scan.positions[self.indices]

    @property
    def rcs(self) -> np.ndarray:
        return self.scan.rcs[self.indices]

    def histogram(self, k: int) -> LgcHistogram:
        """Descriptor of the k-th keypoint (position in ``indices``)."""
        if self.histograms is None or self.config is None:
            raise ValueError("histograms not built")
        c = self.config
        return LgcHistogram(
            self.histograms[k], c.distance_bin_width, c.rcs_bin_width, c.rcs_origin,
            int(self.indices[k]), float(self.rcs[k]),
        )


@dataclass(frozen=True)
class Correspondence:
    index_a: int
    index_b: int
    similarity: float
    inlier: bool = False


def extract_keypoints(scan: RadarScan, grid: IntervalGrid, k: int = 30) -> KeypointCloud:
    """Up to ``k`` highest-RCS points per interval cell; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(scan) == 0:
        raise EmptyScan("cannot extract keypoints from an empty scan")
    cell = grid.cell_idx
    idx = np.arange(len(scan))
    order = np.lexsort((idx, -scan.rcs, cell))
    sorted_cell = cell[order]
    first = np.searchsorted(sorted_cell, sorted_cell, side="left")
    rank = np.arange(len(order)) - first
    keep = np.sort(order[rank < k])
    return KeypointCloud(scan, keep)


def _bin_indices(values: np.ndarray, origin: float, width: float, n: int) -> tuple[np.ndarray, int]:
    u = np.floor((values - origin) / width).astype(np.int64)
    clamped = int(np.sum((u < 0) | (u >= n)))
    return np.clip(u, 0, n - 1), clamped


def build_histograms(kp: KeypointCloud, config: LgcConfig | None = None) -> KeypointCloud:
    """Attach an LGC histogram to every keypoint (k-NN within the keypoint cloud)."""
    config = config or LgcConfig()
    n = len(kp)
    H = np.zeros((n, config.distance_bins, config.rcs_bins), dtype=np.int32)
    if n <= 1:
        if n == 1:
            log.debug("single keypoint: histogram left empty")
        return replace(kp, histograms=H, config=config, clamped=0)
    pos = kp.positions
    rcs = kp.rcs
    k = min(config.neighbors, n - 1)
    dist, nbr = cKDTree(pos).query(pos, k=k + 1)
    dist = dist[:, 1:].reshape(n, k)
    nbr = nbr[:, 1:].reshape(n, k)
    di, c1 = _bin_indices(dist, 0.0, config.distance_bin_width, config.distance_bins)
    ri, c2 = _bin_indices(rcs[nbr], config.rcs_origin, config.rcs_bin_width, config.rcs_bins)
    owner = np.repeat(np.arange(n), k)
    np.add.at(H, (owner, di.ravel(), ri.ravel()), 1)
    return replace(kp, histograms=H, config=config, clamped=c1 + c2)


def build_histogram(
    kp: KeypointCloud, point: int, neighbors: int | None = None, config: LgcConfig | None = None
) -> LgcHistogram:
    """Histogram for keypoint number ``point``; see :func:`build_histograms`."""
    config = config or LgcConfig()
    if neighbors is not None:
        config = replace(config, neighbors=neighbors)
    pos = kp.positions
    rcs = kp.rcs
    H = np.zeros((config.distance_bins, config.rcs_bins), dtype=np.int32)
    clamped = 0
    n = len(kp)
    if n > 1:
        k = min(config.neighbors, n - 1)
        dist, nbr = cKDTree(pos).query(pos[point], k=k + 1)
        dist, nbr = np.atleast_1d(dist)[1:], np.atleast_1d(nbr)[1:]
        di, c1 = _bin_indices(dist, 0.0, config.distance_bin_width, config.distance_bins)
        ri, c2 = _bin_indices(rcs[nbr], config.rcs_origin, config.rcs_bin_width, config.rcs_bins)
        np.add.at(H, (di, ri), 1)
        clamped = c1 + c2
    else:
        log.debug("keypoint cloud has no neighbors for point %d", point)
    return LgcHistogram(
        H, config.distance_bin_width, config.rcs_bin_width, config.rcs_origin,
        int(kp.indices[point]), float(rcs[point]), clamped,
    )


# -- NHI ---------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _offsets(r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx, dy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    dx, dy = dx.ravel(), dy.ravel()
    return dx, dy, 1.0 / (1.0 + np.abs(dx) + np.abs(dy))


def _nhi_batch(a_bins: np.ndarray, b_padded: np.ndarray, r: int) -> np.ndarray:
    """NHI of one dense histogram A against a stack of zero-padded B histograms."""
    ii, jj = np.nonzero(a_bins)
    if ii.size == 0 or len(b_padded) == 0:
        return np.zeros(len(b_padded))
    va = a_bins[ii, jj].astype(float)
    dx, dy, W = _offsets(r)
    rows = ii[None, :] + r + dx[:, None]
    cols = jj[None, :] + r + dy[:, None]
    vb = b_padded[:, rows, cols]  # (nb, n_offsets, n_a)
    terms = np.minimum(vb, va[None, None, :]) * W[None, :, None]
    return terms.max(axis=1).sum(axis=1)


def _pad(h: np.ndarray, r: int) -> np.ndarray:
    width = [(0, 0)] * (h.ndim - 2) + [(r, r), (r, r)]
    return np.pad(h, width)


def nhi_similarity(A: LgcHistogram, B: LgcHistogram, r: int = 1) -> float:
    """Neighborhood-expanded histogram intersection of A against B (not symmetric)."""
    if not A.same_layout(B):
        raise BinConfigMismatch("histograms use different bin layouts")
    if r < 0:
        raise ValueError("radius must be >= 0")
    return float(_nhi_batch(np.asarray(A.bins), _pad(np.asarray(B.bins), r)[None], r)[0])


def similarity_matrix(a: KeypointCloud, b: KeypointCloud, rcs_screen: float, r: int) -> np.ndarray:
    """NHI for every RCS-compatible pair; screened-out pairs hold -inf."""
    S = np.full((len(a), len(b)), -np.inf)
    if len(a) == 0 or len(b) == 0:
        return S
    cand = np.abs(a.rcs[:, None] - b.rcs[None, :]) <= rcs_screen
    Bp = _pad(b.histograms, r)
    for i in np.nonzero(cand.any(axis=1))[0]:
        js = np.nonzero(cand[i])[0]
        S[i, js] = _nhi_batch(a.histograms[i], Bp[js], r)
    return S


def match_keypoints(
    a: KeypointCloud,
    b: KeypointCloud,
    rcs_screen: float | None = None,
    nhi_threshold: float | None = None,
    r: int | None = None,
) -> list[Correspondence]:
    """Mutual-best NHI matches between RCS-compatible keypoints.

    Parameters left as None come from the clouds' histogram config.
    """
    cfg = a.config or LgcConfig()
    if b.config is not None and a.config is not None and b.config != a.config:
        raise BinConfigMismatch("keypoint clouds built with different histogram configs")
    if a.histograms is None or b.histograms is None:
        raise ValueError("build_histograms() first")
    rcs_screen = cfg.rcs_screen if rcs_screen is None else rcs_screen
    nhi_threshold = cfg.nhi_threshold if nhi_threshold is None else nhi_threshold
    r = cfg.nhi_radius if r is None else r
    S = similarity_matrix(a, b, rcs_screen, r)
    if S.size == 0:
        return []
    best_b = np.argmax(S, axis=1)
    best_a = np.argmax(S, axis=0)
    out = []
    for i, j in enumerate(best_b):
        s = S[i, j]
        if np.isfinite(s) and s >= nhi_threshold and best_a[j] == i:
            out.append(Correspondence(int(a.indices[i]), int(b.indices[j]), float(s)))
    return out


# -- RANSAC ------------------------------------------------------------------


def kabsch_batch(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transforms (R, t) with ``R p + t ~ q`` for stacked (B, n, 3) sets."""
    mp = P.mean(axis=1, keepdims=True)
    mq = Q.mean(axis=1, keepdims=True)
    H = np.einsum("bni,bnj->bij", P - mp, Q - mq)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bij,bjk->bik", U, Vt)))
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = np.where(d == 0, 1.0, d)
    R = np.einsum("bji,bjk,blk->bil", Vt, D, U)
    t = mq[:, 0, :] - np.einsum("bij,bj->bi", R, mp[:, 0, :])
    return R, t


def _positions(x) -> np.ndarray:
    scan = getattr(x, "scan", x)
    return scan.positions


def _triangle_ok(pts: np.ndarray, eps: float) -> np.ndarray:
    cr = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    return np.linalg.norm(cr, axis=-1) > eps


def ransac_filter(
    matches: Sequence[Correspondence],
    a,
    b,
    inlier_dist: float = 0.5,
    iterations: int = 200,
    rng: np.random.Generator | int | None = 0,
) -> list[Correspondence]:
    """Largest set of matches consistent with one rigid transform.

    ``a``/``b`` are the scans (or keypoint clouds) the match indices refer
    to.  Fewer than three matches are returned unchanged with ``inlier``
    left False, meaning unverified.
    """
    matches = list(matches)
    if len(matches) < 3:
        return matches
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pa = _positions(a)[[m.index_a for m in matches]]
    pb = _positions(b)[[m.index_b for m in matches]]
    n = len(matches)

    samples = np.empty((iterations, 3), dtype=np.int64)
    filled = 0
    for _ in range(20):
        draw = np.argsort(rng.random((iterations, n)), axis=1)[:, :3]
        ok = _triangle_ok(pa[draw], 1e-6) & _triangle_ok(pb[draw], 1e-6)
        good = draw[ok][: iterations - filled]
        samples[filled : filled + len(good)] = good
        filled += len(good)
        if filled == iterations:
            break
    if filled == 0:
        raise DegenerateGeometry("all match triples are collinear")
    samples = samples[:filled]

    R, t = kabsch_batch(pa[samples], pb[samples])
    moved = np.einsum("bij,nj->bni", R, pa) + t[:, None, :]
    inl = np.linalg.norm(moved - pb[None], axis=-1) < inlier_dist
    best = int(np.argmax(inl.sum(axis=1)))
    return [replace(m, inlier=True) for m, ok in zip(matches, inl[best]) if ok]
