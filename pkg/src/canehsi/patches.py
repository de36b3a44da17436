"""Sliding-window patches, augmentation and train/validation/test splits.

HPS container (little-endian)::

    b"HPS1" | u32 count | u32 n | u32 bands
    then per patch: u8 label | u32 scene_id | u32 row | u32 col | u8 augmented
                    | n*n*bands x f32 payload (BIP)
"""
from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hypercube import HyperCube, Mask
from .synthgen import RATING_CLASSES

HPS_MAGIC = b"HPS1"
_SET_HEADER = struct.Struct("<4sIII")
_PATCH_HEADER = struct.Struct("<BIIIB")

MAX_SHIFT_PX = 3
MAX_ROT_DEG = 20.0


@dataclass(eq=False)
class Patch:
    data: np.ndarray  # (n, n, bands) float32
    label: int
    origin: tuple  # (scene_id, row, col)
    augmented: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"patch data must be (n, n, bands), got {self.data.shape}")
        if int(self.label) not in RATING_CLASSES:
            raise ValueError(f"label {self.label} not in {RATING_CLASSES}")
        self.origin = tuple(int(v) for v in self.origin)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class PatchSet:
    patches: list = field(default_factory=list)
    n: int = 0
    bands: int = 0

    def __post_init__(self):
        if self.patches:
            first = self.patches[0]
            self.n = self.n or first.n
            self.bands = self.bands or first.bands
            for p in self.patches:
                if p.n != self.n or p.bands != self.bands:
                    raise ValueError("patches in a set must share n and bands")

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    @property
    def class_counts(self) -> dict:
        counts = Counter(int(p.label) for p in self.patches)
        return {k: counts[k] for k in sorted(counts)}

    def stack(self) -> np.ndarray:
        if not self.patches:
            return np.zeros((0, self.n, self.n, self.bands), dtype=np.float32)
        return np.stack([p.data for p in self.patches])

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patches], dtype=np.int64)

    def features(self) -> np.ndarray:
        """(count, n*n*bands) flattened matrix."""
        return self.stack().reshape(len(self.patches), -1)

    def extend(self, other: "PatchSet") -> "PatchSet":
        return PatchSet(self.patches + other.patches, self.n or other.n, self.bands or other.bands)


@dataclass
class SplitResult:
    train: PatchSet
    validation: PatchSet
    test: PatchSet


def _full_windows(bits: np.ndarray, n: int) -> np.ndarray:
    """Boolean map over anchors (r, c): True iff bits[r:r+n, c:c+n] is all True."""
    integral = np.zeros((bits.shape[0] + 1, bits.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = bits.astype(np.int64).cumsum(0).cumsum(1)
    s = integral[n:, n:] - integral[:-n, n:] - integral[n:, :-n] + integral[:-n, :-n]
    return s == n * n


def anchor_count(height: int, width: int, n: int, stride: int) -> int:
    return ((height - n) // stride + 1) * ((width - n) // stride + 1)


def extract_patches(cube: HyperCube, mask: Mask, label: int, n: int, stride: int, scene_id: int = 0) -> PatchSet:
    """Windows at multiples of ``stride`` kept only when every pixel is foreground."""
    mask.check_matches(cube)
    if n < 1 or stride < 1:
        raise ValueError("n and stride must be >= 1")
    if n > min(cube.height, cube.width):
        raise ValueError(f"patch side {n} larger than image {cube.height}x{cube.width}")
    full = _full_windows(mask.bits, n)
    out = []
    for r in range(0, cube.height - n + 1, stride):
        for c in range(0, cube.width - n + 1, stride):
            if full[r, c]:
                out.append(Patch(cube.data[r : r + n, c : c + n], label, (scene_id, r, c)))
    return PatchSet(out, n, cube.bands)


def flatten(patch: Patch) -> np.ndarray:
    """Row-major spatial order, bands contiguous per pixel: length n*n*bands."""
    return patch.data.reshape(-1)


def transform_patch(
    cube: HyperCube,
    mask: Mask,
    origin: tuple,
    n: int,
    shift: tuple = (0, 0),
    angle_deg: float = 0.0,
    label: int = 1,
    scene_id: int = 0,
) -> Patch | None:
    """Nearest-neighbour resample of a shifted, rotated window from the parent image.

    Each output pixel is inverse-rotated about the shifted patch centre; the
    patch is rejected (None) if any source pixel leaves the image or the mask.
    """
    r0, c0 = origin
    cc = (n - 1) / 2.0
    phi = math.radians(angle_deg)
    cos, sin = math.cos(phi), math.sin(phi)
    rel = np.arange(n, dtype=np.float64) - cc
    dy = rel[:, None]
    dx = rel[None, :]
    src_r = r0 + shift[0] + cc + (cos * dy + sin * dx)
    src_c = c0 + shift[1] + cc + (-sin * dy + cos * dx)
    ri = np.floor(src_r + 0.5).astype(np.int64)
    ci = np.floor(src_c + 0.5).astype(np.int64)
    if ri.min() < 0 or ci.min() < 0 or ri.max() >= cube.height or ci.max() >= cube.width:
        return None
    if not mask.bits[ri, ci].all():
        return None
    return Patch(cube.data[ri, ci], label, (scene_id, r0, c0), augmented=True)


def augment_seed(seed: int, scene_id: int, row: int, col: int, draw: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(scene_id), int(row), int(col), int(draw)])


def draw_transform(seq, max_shift_px: int = MAX_SHIFT_PX, max_rot_deg: float = MAX_ROT_DEG):
    rng = np.random.Generator(np.random.PCG64(seq))
    dr, dc = (int(v) for v in rng.integers(-max_shift_px, max_shift_px + 1, size=2))
    return (dr, dc), float(rng.uniform(-max_rot_deg, max_rot_deg))


def augment_patch(
    cube: HyperCube,
    mask: Mask,
    origin: tuple,
    n: int,
    max_shift_px: int = MAX_SHIFT_PX,
    max_rot_deg: float = MAX_ROT_DEG,
    seed=0,
    label: int = 1,
    scene_id: int = 0,
) -> Patch | None:
    """One random shift/rotation draw; ``seed`` may be an int or a SeedSequence."""
    r0, c0 = origin
    if r0 < 0 or c0 < 0 or r0 + n > cube.height or c0 + n > cube.width:
        raise ValueError(f"origin {origin} is not a valid anchor for n={n}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    shift, angle = draw_transform(seq, max_shift_px, max_rot_deg)
    return transform_patch(cube, mask, origin, n, shift, angle, label, scene_id)


def augment_set(train: PatchSet, scenes: dict, multiplicity: int, seed: int) -> PatchSet:
    """``multiplicity`` draws per training patch; ``scenes`` maps scene_id -> (cube, mask)."""
    out = []
    for p in train:
        sid, r, c = p.origin
        cube, mask = scenes[sid]
        for k in range(multiplicity):
            a = augment_patch(cube, mask, (r, c), p.n, seed=augment_seed(seed, sid, r, c, k), label=p.label, scene_id=sid)
            if a is not None:
                out.append(a)
    return PatchSet(out, train.n, train.bands)


def _portion_counts(k: int, ratios) -> tuple[int, int, int]:
    # cumulative floors keep every portion within one item of its exact share
    total = float(sum(ratios))
    a = math.floor(k * ratios[0] / total)
    ab = math.floor(k * (ratios[0] + ratios[1]) / total)
    return a, ab - a, k - ab


def _class_rng(seed: int, label: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(label)])))


def split(patch_set: PatchSet, ratios=(6, 2, 2), seed: int = 0, stratified: bool = True) -> SplitResult:
    """Seed-shuffled 6:2:2 split per class (or overall); see :func:`_portion_counts`."""
    if len(patch_set) == 0:
        raise ValueError("cannot split an empty patch set")
    labels = patch_set.labels()
    groups = [(int(c), np.flatnonzero(labels == c)) for c in np.unique(labels)] if stratified else [(0, np.arange(len(labels)))]
    parts = ([], [], [])
    for key, idx in groups:
        idx = _class_rng(seed, key).permutation(idx)
        a, b, _ = _portion_counts(idx.size, ratios)
        for part, sel in zip(parts, (idx[:a], idx[a : a + b], idx[a + b :])):
            part.extend(np.sort(sel).tolist())
    return _result(patch_set, parts)


def split_by_scene(patch_set: PatchSet, ratios=(6, 2, 2), seed: int = 0) -> SplitResult:
    """Leakage-free variant: whole scenes go to one split, stratified by class."""
    if len(patch_set) == 0:
        raise ValueError("cannot split an empty patch set")
    by_scene: dict = {}
    for i, p in enumerate(patch_set):
        by_scene.setdefault((int(p.label), p.origin[0]), []).append(i)
    parts = ([], [], [])
    for label in sorted({k[0] for k in by_scene}):
        scenes = np.array(sorted(sid for lab, sid in by_scene if lab == label))
        scenes = _class_rng(seed, label).permutation(scenes)
        a, b, _ = _portion_counts(scenes.size, ratios)
        for part, sel in zip(parts, (scenes[:a], scenes[a : a + b], scenes[a + b :])):
            for sid in sel:
                part.extend(by_scene[(label, int(sid))])
    return _result(patch_set, tuple(sorted(p) for p in parts))


def _result(patch_set: PatchSet, parts) -> SplitResult:
    sets = [PatchSet([patch_set.patches[i] for i in sorted(p)], patch_set.n, patch_set.bands) for p in parts]
    return SplitResult(*sets)


# --- HPS container ---------------------------------------------------------


def save_patchset(patch_set: PatchSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_SET_HEADER.pack(HPS_MAGIC, len(patch_set), patch_set.n, patch_set.bands))
        for p in patch_set:
            sid, r, c = p.origin
            fh.write(_PATCH_HEADER.pack(int(p.label), sid, r, c, int(bool(p.augmented))))
            fh.write(p.data.astype("<f4").tobytes())


def load_patchset(path) -> PatchSet:
    raw = Path(path).read_bytes()
    if raw[:4] != HPS_MAGIC:
        raise ValueError(f"{path}: not an HPS1 file")
    _, count, n, bands = _SET_HEADER.unpack_from(raw)
    off = _SET_HEADER.size
    payload = n * n * bands
    need = off + count * (_PATCH_HEADER.size + 4 * payload)
    if len(raw) < need:
        raise ValueError(f"{path}: truncated, expected {need} bytes, found {len(raw)}")
    out = []
    for _ in range(count):
        label, sid, r, c, aug = _PATCH_HEADER.unpack_from(raw, off)
        off += _PATCH_HEADER.size
        data = np.frombuffer(raw, dtype="<f4", count=payload, offset=off).reshape(n, n, bands)
        off += 4 * payload
        out.append(Patch(data, label, (sid, r, c), bool(aug)))
    return PatchSet(out, n, bands)
