"""Deterministic synthetic scenes standing in for field captures.

Every scene has three regions: a leaf rectangle carrying a vegetation
spectrum with a class-dependent mosaic texture, a white reference panel
(reflectance 0.99 in every band) and a flat dark background (0.05).

Random numbers
--------------
All randomness comes from numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence(seed)``, which is spawned into independent
child streams (texture lattice, raw-frame noise, dark-frame noise).
Uniform draws are ``Generator.random()`` doubles in [0, 1).  Gaussian
noise uses the cosine branch of the Box-Muller transform::

    z = sqrt(-2 * ln(1 - u1)) * cos(2 * pi * u2)

with ``u1`` and ``u2`` drawn as two consecutive blocks of ``n`` uniforms.

Mosaic texture
--------------
Value noise: a lattice with spacing ``mosaic_scale_px * SCALE_FACTOR[k]``
holds uniform [0, 1) values and is bilinearly interpolated onto the leaf
pixels (random sub-cell phase).  The interpolated field ``t`` mixes the
healthy curve towards a chlorotic curve::

    leaf(b) = healthy(b) + mosaic_amplitude * AMPLITUDE_FACTOR[k] * t * (chlorotic(b) - healthy(b))
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hypercube import CubeKind, HyperCube, Mask, SpectralCurve, even_wavelengths

RATING_CLASSES = (1, 2, 5, 6, 7, 8, 9)

# Per-class texture parameters, indexed like RATING_CLASSES.  Pairs are distinct.
SCALE_FACTOR = (1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.5)
AMPLITUDE_FACTOR = (0.5, 0.5, 0.7, 0.7, 1.0, 1.0, 0.85)

SPECTRALON_REFLECTANCE = 0.99
BACKGROUND_REFLECTANCE = 0.05
MAX_REFLECTANCE = 1.2

Rect = tuple  # (row, col, height, width)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def healthy_curve(wavelengths_nm) -> np.ndarray:
    """Green-leaf reflectance: ~0.06 in the red, red edge near 718 nm, ~0.5 NIR plateau."""
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    return 0.04 + 0.46 * _sigmoid((wl - 718.0) / 9.0)


def chlorotic_curve(wavelengths_nm) -> np.ndarray:
    """Mosaic-lesion reflectance: brighter red, red edge shifted to 705 nm, lower NIR."""
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    return 0.10 + 0.30 * _sigmoid((wl - 705.0) / 9.0)


def class_index(rating_class: int) -> int:
    try:
        return RATING_CLASSES.index(int(rating_class))
    except ValueError:
        raise ValueError(f"rating class {rating_class} not in {RATING_CLASSES}") from None


def texture_params(rating_class: int, spec: "SceneSpec") -> tuple[float, float]:
    """(correlation length in px, mixing amplitude) for a class."""
    k = class_index(rating_class)
    return spec.mosaic_scale_px * SCALE_FACTOR[k], spec.mosaic_amplitude * AMPLITUDE_FACTOR[k]


def flat_illumination(bands: int = 11, level: float = 1.0) -> SpectralCurve:
    wl = even_wavelengths(bands)
    return SpectralCurve(wl, np.full(bands, level))


def tilted_illumination(bands: int = 11, lo: float = 0.7, hi: float = 1.3) -> SpectralCurve:
    wl = even_wavelengths(bands)
    return SpectralCurve(wl, np.linspace(lo, hi, bands))


@dataclass
class SceneSpec:
    height: int = 96
    width: int = 160
    bands: int = 11
    rating_class: int = 1
    leaf_rect: Rect = (20, 8, 56, 80)
    spectralon_rect: Rect = (32, 116, 32, 32)
    illumination: SpectralCurve = field(default_factory=flat_illumination)
    dark_level: float = 0.02
    noise_sigma: float = 0.005
    mosaic_amplitude: float = 0.9
    mosaic_scale_px: float = 2.5
    seed: int = 0

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) < 1:
            raise ValueError("scene dimensions must be positive")
        if int(self.rating_class) not in RATING_CLASSES:
            raise ValueError(f"rating_class {self.rating_class} not in {RATING_CLASSES}")
        for name in ("leaf_rect", "spectralon_rect"):
            r, c, h, w = getattr(self, name)
            if h < 1 or w < 1 or r < 0 or c < 0 or r + h > self.height or c + w > self.width:
                raise ValueError(f"{name} {getattr(self, name)} outside {self.height}x{self.width} image")
        if _rects_overlap(self.leaf_rect, self.spectralon_rect):
            raise ValueError("leaf_rect and spectralon_rect overlap")
        if len(self.illumination) != self.bands:
            raise ValueError(f"illumination has {len(self.illumination)} values for {self.bands} bands")
        if np.any(self.illumination.values <= 0):
            raise ValueError("illumination gains must be positive")
        if self.dark_level < 0 or self.noise_sigma < 0:
            raise ValueError("dark_level and noise_sigma must be >= 0")
        if not 0.0 <= self.mosaic_amplitude <= 1.0:
            raise ValueError("mosaic_amplitude must lie in [0, 1]")
        if self.mosaic_scale_px <= 0:
            raise ValueError("mosaic_scale_px must be > 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["illumination"] = self.illumination.to_json()
        d["leaf_rect"] = list(self.leaf_rect)
        d["spectralon_rect"] = list(self.spectralon_rect)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "illumination" in d:
            ill = d["illumination"]
            if isinstance(ill, dict):
                d["illumination"] = SpectralCurve.from_json(ill)
            else:
                d["illumination"] = SpectralCurve(even_wavelengths(len(ill)), ill)
        for name in ("leaf_rect", "spectralon_rect"):
            if name in d:
                d[name] = tuple(int(v) for v in d[name])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown SceneSpec fields: {sorted(unknown)}")
        spec = cls(**d)
        if "illumination" not in d:
            spec.illumination = flat_illumination(spec.bands)
        return spec


@dataclass
class SceneTruth:
    reflectance: HyperCube
    mask: Mask
    label: int
    white_curve: SpectralCurve


def _rects_overlap(a: Rect, b: Rect) -> bool:
    ar, ac, ah, aw = a
    br, bc, bh, bw = b
    return ar < br + bh and br < ar + ah and ac < bc + bw and bc < ac + aw


def _rng(seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seq))


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    u1 = rng.random(n)
    u2 = rng.random(n)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def value_noise(rng: np.random.Generator, height: int, width: int, spacing: float) -> np.ndarray:
    """Bilinearly interpolated uniform lattice, values in [0, 1)."""
    rows = int(np.ceil(height / spacing)) + 2
    cols = int(np.ceil(width / spacing)) + 2
    lattice = rng.random((rows, cols))
    phase_r, phase_c = rng.random(2)
    y = (np.arange(height) / spacing + phase_r)[:, None]
    x = (np.arange(width) / spacing + phase_c)[None, :]
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    fy = y - y0
    fx = x - x0
    top = lattice[y0, x0] * (1 - fx) + lattice[y0, x0 + 1] * fx
    bot = lattice[y0 + 1, x0] * (1 - fx) + lattice[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def generate_scene(spec: SceneSpec) -> tuple[HyperCube, HyperCube, SceneTruth]:
    """Render (raw, dark, truth) for one scene.

    raw = reflectance * illumination + dark_level + noise; dark = dark_level + noise.
    """
    spec.validate()
    h, w, b = spec.height, spec.width, spec.bands
    wl = np.asarray(spec.illumination.wavelengths_nm, dtype=np.float64)
    tex_seq, raw_seq, dark_seq = np.random.SeedSequence(int(spec.seed)).spawn(3)

    refl = np.full((h, w, b), BACKGROUND_REFLECTANCE, dtype=np.float64)
    sr, sc, sh, sw = spec.spectralon_rect
    refl[sr : sr + sh, sc : sc + sw, :] = SPECTRALON_REFLECTANCE

    lr, lc, lh, lw = spec.leaf_rect
    scale, amp = texture_params(spec.rating_class, spec)
    t = value_noise(_rng(tex_seq), lh, lw, scale)
    healthy = healthy_curve(wl)
    delta = chlorotic_curve(wl) - healthy
    refl[lr : lr + lh, lc : lc + lw, :] = healthy + amp * t[:, :, None] * delta

    gain = np.asarray(spec.illumination.values, dtype=np.float64)
    raw = refl * gain + spec.dark_level
    dark = np.full((h, w, b), spec.dark_level, dtype=np.float64)
    if spec.noise_sigma > 0:
        n = h * w * b
        raw += spec.noise_sigma * box_muller(_rng(raw_seq), n).reshape(h, w, b)
        dark += spec.noise_sigma * box_muller(_rng(dark_seq), n).reshape(h, w, b)

    mask = np.zeros((h, w), dtype=bool)
    mask[lr : lr + lh, lc : lc + lw] = True
    truth = SceneTruth(
        reflectance=HyperCube(refl, wl, CubeKind.REFLECTANCE),
        mask=Mask(mask),
        label=int(spec.rating_class),
        white_curve=SpectralCurve(wl, gain),
    )
    return HyperCube(raw, wl), HyperCube(dark, wl), truth


def _jitter_spec(base: SceneSpec, rating_class: int, rng: np.random.Generator, max_shift: int) -> SceneSpec:
    lr, lc, lh, lw = base.leaf_rect
    for _ in range(100):
        dr, dc = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        rect = (lr + dr, lc + dc, lh, lw)
        ok = (
            rect[0] >= 0
            and rect[1] >= 0
            and rect[0] + lh <= base.height
            and rect[1] + lw <= base.width
            and not _rects_overlap(rect, base.spectralon_rect)
        )
        if ok:
            break
    else:
        rect = base.leaf_rect
    # linear illumination tilt across the band range, +/-20% at the ends
    tilt = rng.uniform(-0.2, 0.2)
    ramp = np.linspace(-1.0, 1.0, base.bands)
    gain = np.asarray(base.illumination.values, dtype=np.float64) * (1.0 + tilt * ramp)
    return dataclasses.replace(
        base,
        rating_class=rating_class,
        leaf_rect=rect,
        illumination=SpectralCurve(base.illumination.wavelengths_nm, gain),
        seed=int(rng.integers(0, 2**63)),
    )


def dataset_specs(base: SceneSpec, per_class: int, seed: int, max_shift: int = 6) -> list[SceneSpec]:
    """Scene specs for ``per_class`` scenes of each rating class, class-major order.

    Each scene gets its own stream ``SeedSequence([seed, rating, i])`` that jitters
    the leaf position, tilts the illumination and picks the render seed.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    base.validate()
    specs = []
    for rating in RATING_CLASSES:
        for i in range(per_class):
            rng = _rng(np.random.SeedSequence([int(seed), rating, i]))
            specs.append(_jitter_spec(base, rating, rng, max_shift))
    return specs


def generate_dataset(base: SceneSpec, per_class: int, seed: int, max_shift: int = 6):
    """Rendered (raw, dark, truth) triples for :func:`dataset_specs`."""
    return [generate_scene(s) for s in dataset_specs(base, per_class, seed, max_shift)]


def separability(spec: SceneSpec, other_class: int) -> float:
    """Mean SAM angle (rad) between leaf pixels of ``spec`` and the same scene re-rendered
    as ``other_class`` (same seed, geometry, illumination and noise draws)."""
    from .spectral import sam_angles

    raw_a, _, truth = generate_scene(spec)
    raw_b, _, _ = generate_scene(dataclasses.replace(spec, rating_class=other_class))
    m = truth.mask.bits
    return float(np.nanmean(sam_angles(raw_a.data[m], raw_b.data[m])))


def environment_preset(name: str, bands: int = 11) -> dict:
    """Illumination and noise presets for the two capture settings."""
    if name == "indoor":
        return {"illumination": flat_illumination(bands, 1.0), "noise_sigma": 0.005}
    if name == "outdoor":
        return {"illumination": tilted_illumination(bands, 0.8, 1.4), "noise_sigma": 0.01}
    raise ValueError(f"unknown environment {name!r}")


def write_scene(out_dir, stem: str, raw: HyperCube, dark: HyperCube, truth: SceneTruth) -> None:
    from .hypercube import save_cube, save_mask_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(raw, out / f"{stem}_raw.hsc")
    save_cube(dark, out / f"{stem}_dark.hsc")
    save_cube(truth.reflectance, out / f"{stem}_truth.hsc")
    save_mask_pgm(truth.mask, out / f"{stem}_mask.pgm")
    sidecar = {"label": truth.label, "white_curve": truth.white_curve.to_json()}
    (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
