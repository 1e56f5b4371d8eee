"""Per-site image filters and the linear classifier built on them.

Every classifier here is a linear score over some pixel summary followed
by a threshold: score >= theta reads out bright, with the tie going to
bright. The four kinds are

    square    unweighted sum over an s x s window
    gaussian  fixed Gaussian-weighted sum matched to the point spread
    mf-site   learned weights over the s x s window plus a bias
    mf-array  mf-site features plus the mean intensity of each
              neighboring site's window, to cancel crosstalk

Windows are anchored by rounding the site center to the nearest pixel and
going s // 2 pixels up and left, so an odd s is centered and an even s
leans down-right. Learned feature vectors end with a constant bias slot
(c = 1 by default); the trained bias weight absorbs any scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .util import round_half_up

KINDS = ("square", "gaussian", "mf-site", "mf-array")

GAUSSIAN_CUTOFF = 1e-3
BIAS_C = 1.0


def window_origin(center, s: int) -> tuple[int, int]:
    """Top-left pixel of the s x s window for a (possibly subpixel) center."""
    if s < 1:
        raise ConfigError(f"window size must be >= 1, got {s}")
    return (round_half_up(center[0]) - s // 2, round_half_up(center[1]) - s // 2)


def window_slice(center, s: int, shape) -> tuple[slice, slice]:
    """Row/col slices of the window; errors if it crosses the image edge."""
    r0, c0 = window_origin(center, s)
    h, w = shape
    if r0 < 0 or c0 < 0 or r0 + s > h or c0 + s > w:
        raise ConfigError(
            f"{s}x{s} window at center {tuple(center)} leaves the {h}x{w} image"
        )
    return slice(r0, r0 + s), slice(c0, c0 + s)


def window_fits(center, s: int, shape) -> bool:
    r0, c0 = window_origin(center, s)
    return r0 >= 0 and c0 >= 0 and r0 + s <= shape[0] and c0 + s <= shape[1]


def _as_stack(images) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        return images[None, :, :]
    if images.ndim != 3:
        raise DataError(f"expected an image or image stack, got shape {images.shape}")
    return images


def square_score(images, center, s: int):
    """Sum of the s x s window, per frame. Scalar for a single image."""
    stack = _as_stack(images)
    rs, cs = window_slice(center, s, stack.shape[1:])
    out = stack[:, rs, cs].sum(axis=(1, 2), dtype=np.float64)
    return float(out[0]) if np.asarray(images).ndim == 2 else out


def gaussian_weight_map(center, sigma: float, shape, cutoff: float = GAUSSIAN_CUTOFF) -> np.ndarray:
    """Full-frame weight image exp(-d^2 / 2 sigma^2), zeroed at or below cutoff.

    The cutoff is relative to the unit analytic peak, so for sigma = 1.8
    and the default 1e-3 everything beyond 7 px of the center drops out.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if not 0.0 < cutoff < 1.0:
        raise ConfigError("cutoff must lie in (0, 1)")
    rr = np.arange(shape[0], dtype=float)[:, None] - center[0]
    cc = np.arange(shape[1], dtype=float)[None, :] - center[1]
    w = np.exp(-(rr**2 + cc**2) / (2.0 * sigma**2))
    w[w <= cutoff] = 0.0
    return w


def gaussian_score(images, weight_map):
    """Weighted pixel sum per frame. Scalar for a single image."""
    stack = _as_stack(images)
    if stack.shape[1:] != weight_map.shape:
        raise DataError(
            f"weight map {weight_map.shape} does not match images {stack.shape[1:]}"
        )
    out = np.tensordot(stack.astype(np.float64), weight_map, axes=([1, 2], [0, 1]))
    return float(out[0]) if np.asarray(images).ndim == 2 else out


def unsupervised_threshold(scores_dark, scores_bright) -> float:
    """Decision boundary between two score populations.

    Fits a 1D Gaussian to each class and returns the density intersection
    lying between the class means. With no such intersection (including
    the identical-distribution case) the midpoint of the means is used.
    """
    sd = np.asarray(scores_dark, dtype=float)
    sb = np.asarray(scores_bright, dtype=float)
    if sd.size < 2 or sb.size < 2:
        raise DataError("both classes need at least two scores")
    m0, s0 = float(sd.mean()), float(sd.std())
    m1, s1 = float(sb.mean()), float(sb.std())
    if s0 == 0.0 or s1 == 0.0:
        raise DataError("zero-variance score class, threshold undefined")

    lo, hi = min(m0, m1), max(m0, m1)
    mid = 0.5 * (m0 + m1)
    # density equality as a quadratic in the score
    a = 1.0 / (2.0 * s1**2) - 1.0 / (2.0 * s0**2)
    b = m0 / s0**2 - m1 / s1**2
    c = m1**2 / (2.0 * s1**2) - m0**2 / (2.0 * s0**2) + np.log(s1 / s0)
    if a == 0.0:
        roots = [] if b == 0.0 else [-c / b]
    else:
        disc = b * b - 4.0 * a * c
        if disc < 0:
            roots = []
        else:
            sq = float(np.sqrt(disc))
            roots = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
    between = [r for r in roots if lo < r < hi]
    if not between:
        return mid
    return float(min(between, key=lambda r: abs(r - mid)))


def neighbor_sites(geometry, site: int) -> tuple[int, ...]:
    """Sites whose crosstalk the array filter models, ascending order.

    On arrays up to 3x3 every other site counts as a neighbor; on larger
    arrays only the 8-connected ring does, keeping the feature count flat
    as the array grows.
    """
    n = geometry.n_sites
    if site < 0 or site >= n:
        raise ConfigError(f"site {site} out of range for {n} sites")
    if geometry.rows <= 3 and geometry.cols <= 3:
        return tuple(k for k in range(n) if k != site)
    r, c = divmod(site, geometry.cols)
    out = []
    for rr in (r - 1, r, r + 1):
        for cc in (c - 1, c, c + 1):
            if (rr, cc) != (r, c) and 0 <= rr < geometry.rows and 0 <= cc < geometry.cols:
                out.append(rr * geometry.cols + cc)
    return tuple(sorted(out))


def extract_site_features(images, center, s: int, c: float = BIAS_C) -> np.ndarray:
    """Design matrix for mf-site: window pixels row-major, then the bias c.

    Shape (s*s + 1, M) for M frames.
    """
    stack = _as_stack(images)
    rs, cs = window_slice(center, s, stack.shape[1:])
    m = stack.shape[0]
    pix = stack[:, rs, cs].reshape(m, s * s).T.astype(np.float64)
    return np.vstack([pix, np.full((1, m), c)])


def extract_array_features(
    images, centers, site: int, s: int, neighbors, c: float = BIAS_C
) -> np.ndarray:
    """Design matrix for mf-array: window pixels, neighbor window means, c.

    Neighbor windows use the same size s as the target site and contribute
    one feature each (their mean intensity), in the order given. Shape
    (s*s + len(neighbors) + 1, M).
    """
    stack = _as_stack(images)
    m = stack.shape[0]
    rs, cs = window_slice(centers[site], s, stack.shape[1:])
    pix = stack[:, rs, cs].reshape(m, s * s).T.astype(np.float64)
    rows = [pix]
    for k in neighbors:
        nrs, ncs = window_slice(centers[k], s, stack.shape[1:])
        rows.append(stack[:, nrs, ncs].mean(axis=(1, 2), dtype=np.float64)[None, :])
    rows.append(np.full((1, m), c))
    return np.vstack(rows)


@dataclass
class FilterModel:
    """One trained (or fixed) per-site classifier.

    weights is the learned coefficient vector for mf-site / mf-array with
    the bias weight last, and None for the fixed kinds. site and neighbors
    are zero-based in memory; serialization uses one-based site numbers to
    match the row-major site labels on reports.
    """

    kind: str
    site: int
    center: tuple[float, float]
    s: int
    theta: float
    sigma: float | None = None
    weights: np.ndarray | None = None
    neighbors: tuple[int, ...] = ()
    all_centers: np.ndarray | None = None
    bias_c: float = BIAS_C
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        if self.kind == "gaussian" and (self.sigma is None or self.sigma <= 0):
            raise ConfigError("gaussian filter needs a positive sigma")
        if self.kind in ("mf-site", "mf-array"):
            if self.weights is None:
                raise ConfigError(f"{self.kind} filter needs weights")
            if not 0.0 < self.theta < 1.0:
                raise ConfigError(
                    f"threshold for {self.kind} must lie in (0, 1), got {self.theta}"
                )
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind == "mf-array":
            if self.all_centers is None:
                raise ConfigError("mf-array filter needs the full center list")
            self.all_centers = np.asarray(self.all_centers, dtype=np.float64)
        if self.kind == "mf-site" and self.weights.size != self.s * self.s + 1:
            raise ConfigError(
                f"mf-site weights length {self.weights.size} != s^2+1 = {self.s * self.s + 1}"
            )
        if self.kind == "mf-array" and self.weights.size != self.s * self.s + len(self.neighbors) + 1:
            raise ConfigError("mf-array weights length does not match s^2 + neighbors + 1")

    def features(self, images) -> np.ndarray:
        """Design matrix (d, M) for the learned kinds."""
        if self.kind == "mf-site":
            return extract_site_features(images, self.center, self.s, self.bias_c)
        if self.kind == "mf-array":
            return extract_array_features(
                images, self.all_centers, self.site, self.s, self.neighbors, self.bias_c
            )
        raise ConfigError(f"{self.kind} filter has no feature vector")

    def scores(self, images) -> np.ndarray:
        """Linear score per frame, shape (M,)."""
        stack = _as_stack(images)
        if self.kind == "square":
            return square_score(stack, self.center, self.s)
        if self.kind == "gaussian":
            wmap = gaussian_weight_map(self.center, self.sigma, stack.shape[1:])
            return gaussian_score(stack, wmap)
        x = self.features(stack)
        if x.shape[0] != self.weights.size:
            raise DataError(
                f"model expects {self.weights.size} features, images give {x.shape[0]}"
            )
        return self.weights @ x

    def predict(self, images) -> np.ndarray:
        """0/1 readout per frame; a score exactly at theta reads bright."""
        return (self.scores(images) >= self.theta).astype(np.uint8)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "site": self.site + 1,
            "center": [float(self.center[0]), float(self.center[1])],
            "s": int(self.s),
            "c": float(self.bias_c),
            "theta": float(self.theta),
            "weights": [] if self.weights is None else [float(v) for v in self.weights],
        }
        if self.sigma is not None:
            d["sigma"] = float(self.sigma)
        if self.image_shape is not None:
            d["image_shape"] = [int(self.image_shape[0]), int(self.image_shape[1])]
        if self.kind == "mf-array":
            d["neighbors"] = [int(k) + 1 for k in self.neighbors]
            d["all_centers"] = [[float(r), float(c)] for r, c in self.all_centers]
        return d

    @staticmethod
    def from_dict(d: dict) -> "FilterModel":
        try:
            weights = np.asarray(d["weights"], dtype=float) if d["weights"] else None
            return FilterModel(
                kind=d["kind"],
                site=int(d["site"]) - 1,
                center=(float(d["center"][0]), float(d["center"][1])),
                s=int(d["s"]),
                theta=float(d["theta"]),
                sigma=float(d["sigma"]) if d.get("sigma") is not None else None,
                weights=weights,
                neighbors=tuple(int(k) - 1 for k in d.get("neighbors", ())),
                all_centers=np.asarray(d["all_centers"], float)
                if d.get("all_centers") is not None
                else None,
                bias_c=float(d.get("c", BIAS_C)),
                image_shape=tuple(int(v) for v in d["image_shape"])
                if d.get("image_shape") is not None
                else None,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise DataError(f"bad filter model dict: {exc}") from exc


def classify_stack(models, images) -> np.ndarray:
    """Predictions for every frame and model, shape (M, len(models))."""
    stack = _as_stack(images)
    out = np.zeros((stack.shape[0], len(models)), dtype=np.uint8)
    for j, model in enumerate(models):
        out[:, j] = model.predict(stack)
    return out
