"""Readout quality metrics: fidelity, cross-fidelity between site pairs,
infidelity reduction against a baseline, and multi-shuffle error bars.

All metrics are exact rational functions of integer counts, so
recomputing them on the same predictions is bitwise stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .filters import classify_stack
from .locate import grid_shape
from .util import derive_seed


@dataclass(frozen=True)
class ConfusionCounts:
    """Tallies behind the fidelity formula; false-X = predicted X wrongly."""

    n_bright_true: int
    n_dark_true: int
    n_false_bright: int
    n_false_dark: int

    def __post_init__(self):
        if min(self.n_bright_true, self.n_dark_true, self.n_false_bright, self.n_false_dark) < 0:
            raise DataError("negative confusion count")
        if self.n_false_bright > self.n_dark_true or self.n_false_dark > self.n_bright_true:
            raise DataError("false counts exceed their class totals")


def confusion(preds, labels) -> ConfusionCounts:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.size != labels.size:
        raise DataError(f"{preds.size} predictions vs {labels.size} labels")
    if not (np.isin(preds, (0, 1)).all() and np.isin(labels, (0, 1)).all()):
        raise DataError("predictions and labels must be 0/1")
    bright = labels == 1
    return ConfusionCounts(
        n_bright_true=int(bright.sum()),
        n_dark_true=int((~bright).sum()),
        n_false_bright=int((preds[~bright] == 1).sum()),
        n_false_dark=int((preds[bright] == 0).sum()),
    )


def fidelity(counts: ConfusionCounts) -> float:
    """F = 1 - [P(bright_pred | dark) + P(dark_pred | bright)] / 2."""
    if counts.n_bright_true == 0 or counts.n_dark_true == 0:
        raise DataError("fidelity undefined with an empty true class")
    p_fb = counts.n_false_bright / counts.n_dark_true
    p_fd = counts.n_false_dark / counts.n_bright_true
    return 1.0 - 0.5 * (p_fb + p_fd)


def cross_fidelity(preds_k, preds_l) -> float:
    """F_CF = 1 - P(dark_k | bright_l) - P(bright_k | dark_l).

    1 means site k's prediction copies site l's, -1 means it mirrors it,
    0 means no predicted-state coupling. Conditions on site l, so site l
    must show both outcomes.
    """
    pk = np.asarray(preds_k).ravel()
    pl = np.asarray(preds_l).ravel()
    if pk.size != pl.size:
        raise DataError(f"{pk.size} vs {pl.size} predictions")
    if pk.size == 0:
        raise DataError("empty prediction vectors")
    bright_l = pl == 1
    n_bright = int(bright_l.sum())
    n_dark = pk.size - n_bright
    if n_bright == 0 or n_dark == 0:
        raise DataError("site l predictions are single-class, conditionals undefined")
    p_dark_k_given_bright_l = float((pk[bright_l] == 0).sum()) / n_bright
    p_bright_k_given_dark_l = float((pk[~bright_l] == 1).sum()) / n_dark
    return 1.0 - p_dark_k_given_bright_l - p_bright_k_given_dark_l


def infidelity_reduction(f_sigma: float, f_mf: float) -> float:
    """Fractional drop of (1 - F) relative to the baseline filter."""
    if f_sigma >= 1.0:
        raise DataError("baseline fidelity of 1 leaves nothing to reduce")
    return ((1.0 - f_sigma) - (1.0 - f_mf)) / (1.0 - f_sigma)


def standard_error(values) -> float:
    """Population std over shuffles divided by sqrt(n)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ConfigError("need at least two values for a standard error")
    return float(arr.std() / np.sqrt(arr.size))


def shuffle_statistics(metric_fn, dataset, n_shuffles: int = 10, base_seed: int = 0):
    """(mean, stderr) of metric_fn(dataset, seed_i) over derived shuffle seeds."""
    if n_shuffles < 2:
        raise ConfigError("need at least two shuffles")
    values = [
        float(metric_fn(dataset, derive_seed(base_seed, "shuffle", i)))
        for i in range(n_shuffles)
    ]
    arr = np.asarray(values)
    return float(arr.mean()), standard_error(arr)


def center_site(rows: int, cols: int) -> int | None:
    """Index of the central site, or None when the array has no single center."""
    if rows % 2 == 1 and cols % 2 == 1:
        return (rows // 2) * cols + cols // 2
    return None


def cnn_pairs(rows: int, cols: int) -> list[tuple[int, int]]:
    """Center-to-nearest-neighbor pairs (k, l) = (center, neighbor)."""
    c = center_site(rows, cols)
    if c is None:
        return []
    r, col = divmod(c, cols)
    out = []
    for rr, cc in ((r - 1, col), (r, col - 1), (r, col + 1), (r + 1, col)):
        if 0 <= rr < rows and 0 <= cc < cols:
            out.append((c, rr * cols + cc))
    return out


def edge_pairs(rows: int, cols: int) -> list[tuple[int, int]]:
    """Corner-site pairs: top, bottom, left, right, then both diagonals."""
    tl, tr = 0, cols - 1
    bl, br = (rows - 1) * cols, rows * cols - 1
    raw = [(tl, tr), (bl, br), (tl, bl), (tr, br), (tl, br), (tr, bl)]
    seen = set()
    out = []
    for k, l in raw:
        if k != l and (k, l) not in seen:
            seen.add((k, l))
            out.append((k, l))
    return out


@dataclass
class MetricsReport:
    """Evaluation of one model kind on one labeled stack.

    cross_values entries are None where the conditional was undefined
    (single-class site), as is eta for sites whose baseline is already
    perfect. Mean-of-|F_CF| summaries skip the undefined entries.
    """

    kind: str
    fidelities: np.ndarray
    cross_pairs: list[tuple[int, int]] = field(default_factory=list)
    cross_values: list[float | None] = field(default_factory=list)
    cnn_mean_abs: float | None = None
    ee_mean_abs: float | None = None
    eta_vs_baseline: list[float | None] | None = None
    baseline_kind: str | None = None

    @property
    def mean_fidelity(self) -> float:
        return float(np.mean(self.fidelities))


def evaluate(model_set, images, labels, baseline_set=None) -> MetricsReport:
    """Per-site fidelity, cross-fidelities for the standard pair families, and eta.

    labels must align with the frames; the baseline set (conventionally
    the gaussian filter) is evaluated on the same frames for eta.
    """
    models = model_set.ordered()
    labels = np.asarray(labels)
    images = np.asarray(images)
    if labels.shape != (images.shape[0], len(models)):
        raise DataError(
            f"labels shape {labels.shape} does not match {images.shape[0]} frames x {len(models)} sites"
        )
    preds = classify_stack(models, images)
    fids = np.array([fidelity(confusion(preds[:, s], labels[:, s])) for s in range(len(models))])

    centers = np.array([m.center for m in models])
    rows, cols, _, _ = grid_shape(centers)
    pairs_c = cnn_pairs(rows, cols)
    pairs_e = edge_pairs(rows, cols)
    cross_values: list[float | None] = []
    for k, l in pairs_c + pairs_e:
        try:
            cross_values.append(cross_fidelity(preds[:, k], preds[:, l]))
        except DataError:
            cross_values.append(None)

    def mean_abs(section):
        vals = [abs(v) for v in section if v is not None]
        return float(np.mean(vals)) if vals else None

    eta = None
    baseline_kind = None
    if baseline_set is not None:
        base_preds = classify_stack(baseline_set.ordered(), images)
        baseline_kind = baseline_set.kind
        eta = []
        for s in range(len(models)):
            f_base = fidelity(confusion(base_preds[:, s], labels[:, s]))
            try:
                eta.append(infidelity_reduction(f_base, float(fids[s])))
            except DataError:
                eta.append(None)

    return MetricsReport(
        kind=model_set.kind,
        fidelities=fids,
        cross_pairs=pairs_c + pairs_e,
        cross_values=cross_values,
        cnn_mean_abs=mean_abs(cross_values[: len(pairs_c)]),
        ee_mean_abs=mean_abs(cross_values[len(pairs_c) :]),
        eta_vs_baseline=eta,
        baseline_kind=baseline_kind,
    )
