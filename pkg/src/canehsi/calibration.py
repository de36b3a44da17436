"""Radiometric calibration: dark subtraction and white-panel normalisation.

The white panel is located as the brightest k-means cluster of the
dark-corrected cube.  Its pixels are ranked by mean intensity, the top
fraction is dropped (saturation guard) and the next ``reference_pixel_count``
pixels are averaged into the white reference curve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hypercube import CubeKind, HyperCube, Mask, SpectralCurve


@dataclass
class CalibrationParams:
    kmeans_k: int = 4
    kmeans_iters: int = 50
    saturation_reject_fraction: float = 0.01
    reference_pixel_count: int = 1000
    epsilon: float = 1e-8
    seed: int = 0
    # known reflectance of the white panel; the measured curve is panel * illumination
    panel_reflectance: float = 0.99

    def validate(self) -> None:
        if self.kmeans_k < 2:
            raise ValueError("kmeans_k must be >= 2")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be >= 1")
        if not 0.0 <= self.saturation_reject_fraction < 0.5:
            raise ValueError("saturation_reject_fraction must lie in [0, 0.5)")
        if self.reference_pixel_count < 1:
            raise ValueError("reference_pixel_count must be >= 1")
        if not 0.0 < self.panel_reflectance <= 1.0:
            raise ValueError("panel_reflectance must lie in (0, 1]")


@dataclass
class CalibrationReport:
    white_curve: SpectralCurve | None = None
    spectralon_mask: Mask | None = None
    spectralon_pixel_count: int = 0
    reference_pixel_count_used: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "white_curve": None if self.white_curve is None else self.white_curve.to_json(),
            "spectralon_pixel_count": self.spectralon_pixel_count,
            "reference_pixel_count_used": self.reference_pixel_count_used,
            "warnings": list(self.warnings),
        }


def dark_correct(raw: HyperCube, dark: HyperCube, report: CalibrationReport | None = None) -> HyperCube:
    """``max(0, raw - dark)``; clamped pixels are noted in ``report``."""
    if raw.shape != dark.shape:
        raise ValueError(f"raw {raw.shape} and dark {dark.shape} differ in shape")
    diff = raw.data - dark.data
    negative = int(np.count_nonzero(diff < 0))
    if negative and report is not None:
        report.warnings.append(f"dark_correct: clamped {negative} negative values to 0")
    return raw.with_data(np.maximum(diff, 0.0), CubeKind.RAW_DN)


def _sq_dist(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared distances; X and centers are float64
    return (
        np.einsum("ij,ij->i", X, X)[:, None]
        - 2.0 * X @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )


def kmeans_spectra(cube: HyperCube, k: int, iters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm on per-pixel spectra; returns an (H, W) int label map.

    Initialisation: a seeded uniform pick for the first centre, then repeated
    farthest-point selection (ties to the lowest pixel index).  Empty clusters
    are re-seeded at the point farthest from its assigned centre.
    """
    X = cube.pixels().astype(np.float64)
    n = X.shape[0]
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds pixel count {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    mind = np.maximum(_sq_dist(X, centers[:1])[:, 0], 0.0)
    for j in range(1, k):
        centers[j] = X[int(np.argmax(mind))]
        mind = np.minimum(mind, np.maximum(_sq_dist(X, centers[j : j + 1])[:, 0], 0.0))

    labels = np.full(n, -1)
    for _ in range(iters):
        d = _sq_dist(X, centers)
        new = np.argmin(d, axis=1)
        empty = np.flatnonzero(np.bincount(new, minlength=k) == 0)
        if empty.size:
            own = d[np.arange(n), new]
            for j in empty:
                far = int(np.argmax(own))
                new[far] = j
                own[far] = -np.inf
        if np.array_equal(new, labels):
            break
        labels = new
        # fixed-order accumulation keeps results independent of threading
        for j in range(k):
            centers[j] = X[labels == j].mean(axis=0)
    return labels.reshape(cube.height, cube.width)


def find_spectralon(cube: HyperCube, params: CalibrationParams, report: CalibrationReport | None = None) -> Mask:
    params.validate()
    labels = kmeans_spectra(cube, params.kmeans_k, params.kmeans_iters, params.seed)
    X = cube.pixels().astype(np.float64)
    flat = labels.reshape(-1)
    brightness = np.full(params.kmeans_k, -np.inf)
    for j in range(params.kmeans_k):
        sel = flat == j
        if sel.any():
            brightness[j] = X[sel].mean()
    best = int(np.argmax(brightness))
    mask = Mask(labels == best)
    if report is not None:
        report.spectralon_mask = mask
        report.spectralon_pixel_count = mask.count
        used = np.unique(flat)
        if used.size < params.kmeans_k or np.ptp(X, axis=0).max() == 0:
            report.warnings.append("find_spectralon: degenerate clustering (uniform or near-uniform cube)")
    return mask


def white_reference(cube: HyperCube, spectralon: Mask, params: CalibrationParams):
    """Mean spectrum of the brightest panel pixels after dropping the saturated top."""
    spectralon.check_matches(cube)
    rows, cols = np.nonzero(spectralon.bits)  # row-major order
    count = rows.size
    if count == 0:
        raise ValueError("spectralon mask is empty")
    report = CalibrationReport(spectralon_mask=spectralon, spectralon_pixel_count=count)
    spectra = cube.data[rows, cols].astype(np.float64)
    brightness = spectra.mean(axis=1)
    # descending brightness, ties by (row, col) ascending: lexsort is stable on the row-major order
    order = np.lexsort((cols, rows, -brightness))
    dropped = math.ceil(params.saturation_reject_fraction * count)
    remaining = count - dropped
    if remaining < 1:
        raise ValueError(f"no panel pixels left after dropping {dropped} of {count}")
    used = min(params.reference_pixel_count, remaining)
    if remaining < params.reference_pixel_count:
        report.warnings.append(
            f"white_reference: fewer than reference_pixel_count ({remaining} < {params.reference_pixel_count})"
        )
    chosen = order[dropped : dropped + used]
    curve = SpectralCurve(cube.wavelengths_nm, spectra[chosen].mean(axis=0))
    report.white_curve = curve
    report.reference_pixel_count_used = used
    return curve, report


def white_correct(
    cube: HyperCube,
    white: SpectralCurve,
    epsilon: float = 1e-8,
    report: CalibrationReport | None = None,
    gain: float = 1.0,
) -> HyperCube:
    if len(white) != cube.bands:
        raise ValueError(f"white curve has {len(white)} values for {cube.bands} bands")
    w = white.values.astype(np.float64)
    if np.any(w < epsilon) and report is not None:
        bad = np.flatnonzero(w < epsilon).tolist()
        report.warnings.append(f"white_correct: bands {bad} below epsilon, divided by epsilon")
    out = cube.data / np.maximum(w, epsilon) * gain
    return cube.with_data(out, CubeKind.REFLECTANCE)


def calibrate(raw: HyperCube, dark: HyperCube, params: CalibrationParams | None = None):
    """dark_correct -> find_spectralon -> white_reference -> white_correct.

    The measured white curve is panel_reflectance * illumination, so the
    quotient is multiplied back by ``panel_reflectance``.
    """
    params = params or CalibrationParams()
    params.validate()
    report = CalibrationReport()
    corrected = dark_correct(raw, dark, report)
    spectralon = find_spectralon(corrected, params, report)
    white, wr = white_reference(corrected, spectralon, params)
    report.white_curve = white
    report.reference_pixel_count_used = wr.reference_pixel_count_used
    report.warnings.extend(wr.warnings)
    out = white_correct(corrected, white, params.epsilon, report, gain=params.panel_reflectance)
    return out, report
