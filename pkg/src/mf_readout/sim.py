"""Synthetic fluorescence-image generator for a square array of trapped atoms.

Bright atoms emit a Poisson number of photons, each landing at a position
drawn from an isotropic Gaussian point-spread function and binned into the
hit pixel. On top of that every pixel sees Poisson background counts and
additive Gaussian read noise. All randomness is drawn from named
counter-style streams derived from the dataset seed, so frame k depends
only on (seed, k) and generation parallelizes without changing output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .util import map_indexed, stream


@dataclass(frozen=True)
class ArrayGeometry:
    """Site layout of the trap array, in pixel units.

    Sites are numbered 1..rows*cols in row-major order. origin_px is the
    subpixel (row, col) position of site 1; spacing_px the site-to-site
    pitch along both axes.
    """

    rows: int
    cols: int
    spacing_px: float
    origin_px: tuple[float, float]
    psf_sigma_px: float

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("array must have at least one row and one column")
        if self.spacing_px <= 0:
            raise ConfigError("spacing_px must be positive")
        if self.psf_sigma_px <= 0:
            raise ConfigError("psf_sigma_px must be positive")

    @property
    def n_sites(self) -> int:
        return self.rows * self.cols

    def site_centers(self) -> np.ndarray:
        """(n_sites, 2) array of (row, col) centers, row-major site order."""
        r0, c0 = self.origin_px
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        centers = np.stack(
            [r0 + rr.ravel() * self.spacing_px, c0 + cc.ravel() * self.spacing_px], axis=1
        )
        return centers.astype(float)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "spacing_px": self.spacing_px,
            "origin_px": list(self.origin_px),
            "psf_sigma_px": self.psf_sigma_px,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArrayGeometry":
        try:
            return ArrayGeometry(
                rows=int(d["rows"]),
                cols=int(d["cols"]),
                spacing_px=float(d["spacing_px"]),
                origin_px=(float(d["origin_px"][0]), float(d["origin_px"][1])),
                psf_sigma_px=float(d["psf_sigma_px"]),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"bad geometry dict: {exc}") from exc


@dataclass(frozen=True)
class SimConfig:
    """Full parametrization of one synthetic dataset.

    bright_photon_rate is the photon emission rate per bright atom before
    attenuation; the measured path collects rate * attenuation * exposure
    photons on average. dark_count_rate is background photons per pixel
    per ms. decay_prob_per_ms > 0 lets bright atoms go dark mid-exposure.
    """

    geometry: ArrayGeometry
    image_height: int
    image_width: int
    exposure_ms: float
    bright_photon_rate: float
    attenuation: float
    dark_count_rate: float
    read_noise_sigma: float
    p_bright: float
    seed: int
    n_images: int
    decay_prob_per_ms: float = 0.0

    def __post_init__(self):
        if self.exposure_ms <= 0:
            raise ConfigError("exposure_ms must be positive")
        if not 0.0 <= self.p_bright <= 1.0:
            raise ConfigError("p_bright must lie in [0, 1]")
        if not 0.0 < self.attenuation <= 1.0:
            raise ConfigError("attenuation must lie in (0, 1]")
        if self.bright_photon_rate < 0 or self.dark_count_rate < 0:
            raise ConfigError("photon rates must be non-negative")
        if self.read_noise_sigma < 0 or self.decay_prob_per_ms < 0:
            raise ConfigError("noise parameters must be non-negative")
        if self.n_images < 0:
            raise ConfigError("n_images must be non-negative")
        self.validate_bounds()

    def validate_bounds(self):
        """All nominal site centers must lie strictly inside the image."""
        centers = self.geometry.site_centers()
        h, w = self.image_height, self.image_width
        if (
            np.any(centers[:, 0] <= 0)
            or np.any(centers[:, 0] >= h - 1)
            or np.any(centers[:, 1] <= 0)
            or np.any(centers[:, 1] >= w - 1)
        ):
            raise ConfigError(
                f"site centers exceed the {h}x{w} image bounds: {centers.tolist()}"
            )

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "image_height": self.image_height,
            "image_width": self.image_width,
            "exposure_ms": self.exposure_ms,
            "bright_photon_rate": self.bright_photon_rate,
            "attenuation": self.attenuation,
            "dark_count_rate": self.dark_count_rate,
            "read_noise_sigma": self.read_noise_sigma,
            "p_bright": self.p_bright,
            "decay_prob_per_ms": self.decay_prob_per_ms,
            "seed": self.seed,
            "n_images": self.n_images,
        }

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        try:
            return SimConfig(
                geometry=ArrayGeometry.from_dict(d["geometry"]),
                image_height=int(d["image_height"]),
                image_width=int(d["image_width"]),
                exposure_ms=float(d["exposure_ms"]),
                bright_photon_rate=float(d["bright_photon_rate"]),
                attenuation=float(d["attenuation"]),
                dark_count_rate=float(d["dark_count_rate"]),
                read_noise_sigma=float(d["read_noise_sigma"]),
                p_bright=float(d["p_bright"]),
                decay_prob_per_ms=float(d.get("decay_prob_per_ms", 0.0)),
                seed=int(d["seed"]),
                n_images=int(d["n_images"]),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad sim config dict: {exc}") from exc


@dataclass
class LabeledImageStack:
    """A stack of rendered frames with the ground-truth state of each site."""

    images: np.ndarray  # (n, H, W) float32
    truth: np.ndarray  # (n, n_sites) uint8, 1 = bright
    config: SimConfig

    def __post_init__(self):
        if self.images.shape[0] != self.truth.shape[0]:
            raise DataError(
                f"image count {self.images.shape[0]} != label count {self.truth.shape[0]}"
            )

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def n_sites(self) -> int:
        return self.truth.shape[1]


def default_geometry() -> ArrayGeometry:
    """3x3 array, 6 px pitch, 1.8 px PSF width, sized for a 28x28 frame."""
    return ArrayGeometry(rows=3, cols=3, spacing_px=6.0, origin_px=(8.0, 8.0), psf_sigma_px=1.8)


def default_config(**overrides) -> SimConfig:
    """Default dataset parameters.

    Photon rate, background, and read noise are chosen so the Gaussian
    filter lands near 1e-2 infidelity at the default exposure, which is the
    regime where the classifier comparison is interesting.
    """
    base = dict(
        geometry=default_geometry(),
        image_height=28,
        image_width=28,
        exposure_ms=20.0,
        bright_photon_rate=20.0,
        attenuation=0.1,
        dark_count_rate=0.04,
        read_noise_sigma=1.0,
        p_bright=0.5,
        seed=0,
        n_images=6002,
    )
    base.update(overrides)
    return SimConfig(**base)


def crosstalk_config(**overrides) -> SimConfig:
    """Dataset parameters for a crosstalk-dominated array.

    The PSF width is 40% of the site pitch, so every filter collects a
    sizeable fraction of its neighbors' light. Exposure and read noise
    put the Gaussian filter just under 5e-2 infidelity, the regime where
    its noise weighting still beats the plain box sum while the matched
    filters show a large margin from crosstalk cancellation.
    """
    base = dict(
        geometry=ArrayGeometry(
            rows=3, cols=3, spacing_px=6.0, origin_px=(8.0, 8.0), psf_sigma_px=2.4
        ),
        image_height=28,
        image_width=28,
        exposure_ms=47.0,
        bright_photon_rate=20.0,
        attenuation=0.1,
        dark_count_rate=0.04,
        read_noise_sigma=2.0,
        p_bright=0.5,
        seed=0,
        n_images=6000,
    )
    base.update(overrides)
    return SimConfig(**base)


def sample_states(n_images: int, n_sites: int, p_bright: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli(p_bright) bright/dark states, shape (n_images, n_sites)."""
    if n_images < 0 or n_sites < 1:
        raise ConfigError("need n_images >= 0 and n_sites >= 1")
    return (rng.random((n_images, n_sites)) < p_bright).astype(np.uint8)


def _bin_photons(rows, cols, height, width):
    """Histogram photon positions into pixels; positions off the sensor are lost."""
    ri = np.floor(rows + 0.5).astype(np.int64)
    ci = np.floor(cols + 0.5).astype(np.int64)
    ok = (ri >= 0) & (ri < height) & (ci >= 0) & (ci < width)
    flat = ri[ok] * width + ci[ok]
    counts = np.bincount(flat, minlength=height * width)
    return counts.reshape(height, width).astype(np.float64)


def render_image(states_row, config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Render one frame for the given per-site bright/dark states.

    Draw order is fixed (per-atom decay, photon count, photon positions in
    site order; then background; then read noise) so a frame is a pure
    function of the generator state.
    """
    states_row = np.asarray(states_row)
    geometry = config.geometry
    if states_row.shape[0] != geometry.n_sites:
        raise DataError(
            f"states row has {states_row.shape[0]} entries for {geometry.n_sites} sites"
        )
    h, w = config.image_height, config.image_width
    image = np.zeros((h, w), dtype=np.float64)

    centers = geometry.site_centers()
    mean_rate = config.bright_photon_rate * config.attenuation
    for site in range(geometry.n_sites):
        if not states_row[site]:
            continue
        emit_ms = config.exposure_ms
        if config.decay_prob_per_ms > 0:
            emit_ms = min(emit_ms, rng.exponential(1.0 / config.decay_prob_per_ms))
        n_photons = rng.poisson(mean_rate * emit_ms)
        if n_photons == 0:
            continue
        offsets = rng.standard_normal((n_photons, 2)) * geometry.psf_sigma_px
        image += _bin_photons(
            centers[site, 0] + offsets[:, 0], centers[site, 1] + offsets[:, 1], h, w
        )

    if config.dark_count_rate > 0:
        image += rng.poisson(config.dark_count_rate * config.exposure_ms, size=(h, w))
    if config.read_noise_sigma > 0:
        image += rng.standard_normal((h, w)) * config.read_noise_sigma
    return image


def generate_dataset(config: SimConfig, threads: int = 1) -> LabeledImageStack:
    """Generate the full labeled stack described by config.

    States come from the "states" stream and frame k from the ("frame", k)
    stream, so output is byte-identical for a given config regardless of
    worker count or generation order.
    """
    truth = sample_states(
        config.n_images, config.geometry.n_sites, config.p_bright, stream(config.seed, "states")
    )

    def _render(k):
        return render_image(truth[k], config, stream(config.seed, "frame", k))

    frames = map_indexed(_render, config.n_images, threads)
    images = np.zeros((config.n_images, config.image_height, config.image_width), dtype=np.float32)
    for k, frame in enumerate(frames):
        images[k] = frame.astype(np.float32)
    return LabeledImageStack(images=images, truth=truth, config=config)


def _class_threshold(dark_scores, bright_scores):
    """Score threshold between two labeled score populations.

    Uses the Gaussian-intersection rule where it is defined; degenerate
    cases (an empty or zero-variance class) fall back to midpoints so label
    generation never aborts.
    """
    from .filters import unsupervised_threshold

    dark_scores = np.asarray(dark_scores, dtype=float)
    bright_scores = np.asarray(bright_scores, dtype=float)
    if dark_scores.size == 0 and bright_scores.size == 0:
        return 0.0
    if dark_scores.size == 0:
        return float(bright_scores.mean()) - 1.0
    if bright_scores.size == 0:
        return float(dark_scores.mean()) + 1.0
    if dark_scores.size < 2 or bright_scores.size < 2 or dark_scores.std() == 0 or bright_scores.std() == 0:
        return 0.5 * (float(dark_scores.mean()) + float(bright_scores.mean()))
    return unsupervised_threshold(dark_scores, bright_scores)


def generate_label_path(
    config: SimConfig, truth: np.ndarray, rate_boost: float = 1.0, threads: int = 1
) -> np.ndarray:
    """Near-perfect labels from a second, unattenuated imaging path.

    Renders every frame again at attenuation 1 (optionally with a boosted
    photon rate), scores each site with the fixed Gaussian filter built
    from the true geometry, and thresholds at the per-site score-histogram
    intersection. The result mimics experimentally derived ground truth:
    essentially exact at high SNR but not guaranteed to equal the true
    states.
    """
    from .filters import gaussian_score, gaussian_weight_map

    truth = np.asarray(truth)
    if truth.shape != (config.n_images, config.geometry.n_sites):
        raise DataError(
            f"truth shape {truth.shape} does not match config "
            f"({config.n_images}, {config.geometry.n_sites})"
        )
    label_config = replace(
        config,
        attenuation=1.0,
        bright_photon_rate=config.bright_photon_rate * rate_boost,
    )

    centers = config.geometry.site_centers()
    shape = (config.image_height, config.image_width)
    maps = [
        gaussian_weight_map(tuple(centers[s]), config.geometry.psf_sigma_px, shape)
        for s in range(config.geometry.n_sites)
    ]

    def _score_frame(k):
        frame = render_image(truth[k], label_config, stream(config.seed, "label", k))
        return [gaussian_score(frame, m) for m in maps]

    scores = np.array(map_indexed(_score_frame, config.n_images, threads), dtype=float)
    scores = scores.reshape(config.n_images, config.geometry.n_sites)

    labels = np.zeros_like(truth, dtype=np.uint8)
    for s in range(config.geometry.n_sites):
        col = scores[:, s]
        theta = _class_threshold(col[truth[:, s] == 0], col[truth[:, s] == 1])
        labels[:, s] = (col >= theta).astype(np.uint8)
    return labels
