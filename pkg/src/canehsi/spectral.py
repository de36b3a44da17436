"""Mean spectra, spectral angles and 3x3-neighbourhood graph Laplacians."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .hypercube import HyperCube, Mask, SpectralCurve, save_pgm16

# 8-neighbourhood offsets in row-major order
NEIGHBOR_OFFSETS = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0))


def mean_spectral_curve(cube: HyperCube, mask: Mask) -> SpectralCurve:
    mask.check_matches(cube)
    if not mask.bits.any():
        raise ValueError("mask selects no pixels")
    values = cube.data[mask.bits].astype(np.float64).mean(axis=0)
    return SpectralCurve(cube.wavelengths_nm, values)


def sam_angle(x, y) -> float:
    """Spectral angle in radians, ``arccos(x.y / (|x| |y|))``.

    Evaluated as ``2 * atan2(|u - v|, |u + v|)`` on the unit vectors, which
    equals the arccos form but keeps full precision near 0 and pi (the plain
    arccos of a cosine that rounds to 1 - 1e-16 is already 1.5e-8).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"spectra differ in length: {x.shape} vs {y.shape}")
    nx = np.sqrt(x @ x)
    ny = np.sqrt(y @ y)
    if nx == 0 or ny == 0:
        raise ValueError("spectral angle undefined for a zero vector")
    u = x / nx
    v = y / ny
    d = u - v
    s = u + v
    return float(2.0 * np.arctan2(np.sqrt(d @ d), np.sqrt(s @ s)))


def sam_angles(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Row-wise spectral angles between two (..., B) arrays; zero rows give NaN."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    nx = np.sqrt(np.einsum("...b,...b->...", X, X))[..., None]
    ny = np.sqrt(np.einsum("...b,...b->...", Y, Y))[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        u = X / nx
        v = Y / ny
    d = u - v
    s = u + v
    theta = 2.0 * np.arctan2(np.sqrt(np.einsum("...b,...b->...", d, d)), np.sqrt(np.einsum("...b,...b->...", s, s)))
    return np.where((nx[..., 0] > 0) & (ny[..., 0] > 0), theta, np.nan)


def affinity(theta):
    return np.clip(np.cos(theta), 0.0, 1.0)


@dataclass
class LocalGraph:
    pixel_ids: list
    W: np.ndarray
    D: np.ndarray
    L: np.ndarray

    @property
    def m(self) -> int:
        return len(self.pixel_ids)


def laplacian_from_affinity(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    D = np.diag(W.sum(axis=1))
    return D, D - W


def local_laplacian(cube: HyperCube, mask: Mask, r: int, c: int) -> LocalGraph:
    """Graph over the centre pixel and its in-image foreground 8-neighbours (centre first)."""
    mask.check_matches(cube)
    if not (0 <= r < cube.height and 0 <= c < cube.width) or not mask.bits[r, c]:
        raise ValueError(f"pixel ({r}, {c}) is not foreground")
    ids = [(r, c)]
    for dr, dc in NEIGHBOR_OFFSETS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < cube.height and 0 <= cc < cube.width and mask.bits[rr, cc]:
            ids.append((rr, cc))
    spectra = np.array([cube.data[i, j] for i, j in ids], dtype=np.float64)
    m = len(ids)
    W = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            W[i, j] = W[j, i] = affinity(sam_angle(spectra[i], spectra[j]))
    D, L = laplacian_from_affinity(W)
    return LocalGraph(ids, W, D, L)


@dataclass
class ScalarMap:
    values: np.ndarray
    valid: Mask

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def save_pgm(self, path, sidecar_path=None) -> dict:
        """Min-max normalised 16-bit PGM; normalisation constants go to the JSON sidecar."""
        v = self.values[self.valid.bits]
        lo = float(v.min()) if v.size else 0.0
        hi = float(v.max()) if v.size else 0.0
        span = hi - lo if hi > lo else 1.0
        img = np.where(self.valid.bits, np.round((self.values - lo) / span * 65535.0), 0.0)
        save_pgm16(np.clip(img, 0, 65535).astype(np.uint16), path)
        meta = {"min": lo, "max": hi, "scale": 65535.0 / span}
        if sidecar_path is not None:
            with open(sidecar_path, "w") as fh:
                json.dump(meta, fh, indent=2)
        return meta

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("row,col,value\n")
            for r, c in zip(*np.nonzero(self.valid.bits)):
                fh.write(f"{r},{c},{float(self.values[r, c])!r}\n")


def _shifted(a: np.ndarray, dr: int, dc: int, fill):
    """out[r, c] = a[r + dr, c + dc] where in range, else ``fill``."""
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    rs = slice(max(0, -dr), min(h, h - dr))
    cs = slice(max(0, -dc), min(w, w - dc))
    rs_src = slice(max(0, dr), min(h, h + dr))
    cs_src = slice(max(0, dc), min(w, w + dc))
    out[rs, cs] = a[rs_src, cs_src]
    return out


def laplacian_map(cube: HyperCube, mask: Mask, statistic: str = "mean_angle") -> ScalarMap:
    """Per-pixel neighbourhood statistic over foreground pixels.

    ``mean_angle``: mean spectral angle from the centre to its valid neighbours.
    ``degree``: the centre row sum of the local affinity matrix.
    Pixels without any valid neighbour are marked invalid.
    """
    if statistic not in ("mean_angle", "degree"):
        raise ValueError(f"unknown statistic {statistic!r}")
    mask.check_matches(cube)
    X = cube.data.astype(np.float64)
    fg = mask.bits
    angle_sum = np.zeros(fg.shape)
    aff_sum = np.zeros(fg.shape)
    count = np.zeros(fg.shape, dtype=np.int64)
    for dr, dc in NEIGHBOR_OFFSETS:
        theta = sam_angles(X, _shifted(X, dr, dc, 0.0))
        # zero spectra have no defined angle; such pairs are not edges
        nb_ok = _shifted(fg, dr, dc, False) & fg & np.isfinite(theta)
        theta = np.where(nb_ok, theta, 0.0)
        angle_sum += theta
        aff_sum += np.where(nb_ok, affinity(theta), 0.0)
        count += nb_ok
    valid = fg & (count > 0)
    if statistic == "mean_angle":
        values = np.where(valid, angle_sum / np.maximum(count, 1), 0.0)
    else:
        values = np.where(valid, aff_sum, 0.0)
    return ScalarMap(values, Mask(valid))
