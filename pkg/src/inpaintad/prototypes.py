"""Normal patch-feature banks built from the k-shot support set, and the
prototype-guided masks derived from nearest-prototype error maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParameterError
from .imageops import resize_nearest
from .masks import MaskProposal
from .ports import PatchFeatureExtractor

_BANK_MAGIC = b"PBNK1\n"

# cap on elements of one (positions x bank x dim) distance block
_CHUNK_ELEMS = 1 << 24


@dataclass(frozen=True)
class PrototypeBank:
    """Immutable per-category set of normal patch-feature vectors."""

    category: str
    vectors: np.ndarray          # (count, dim)
    source_count: int

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ParameterError("bank vectors must be a non-empty (count, dim) array")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ErrorMap:
    """Per-position squared distance to the nearest prototype."""

    values: np.ndarray
    threshold: float | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or np.any(self.values < 0):
            raise ParameterError("error map must be a non-negative 2-D array")


def extract_patch_features(image: np.ndarray, fx: PatchFeatureExtractor) -> np.ndarray:
    """Concatenate the level-2 feature map with the nearest-upsampled
    level-3 map along channels: (c2 + c3, H', W')."""
    f2 = fx.features_at(2, image)
    f3 = fx.features_at(3, image)
    f3_up = resize_nearest(f3, f2.shape[-2:])
    return np.concatenate([f2, f3_up], axis=0)


def build_prototype_bank(
    support: list[np.ndarray],
    fx: PatchFeatureExtractor,
    rotations=(0, 90, 180, 270),
    category: str = "",
) -> PrototypeBank:
    """All spatial feature vectors of every rotated support image.

    Only right-angle rotations are accepted; they enrich the bank without
    interpolation artifacts.
    """
    if not support:
        raise ContractError("support set is empty")
    for angle in rotations:
        if angle % 90 != 0:
            raise ParameterError(f"rotation {angle} is not a multiple of 90 degrees")
    vectors = []
    for image in support:
        for angle in rotations:
            rotated = np.rot90(image, (angle // 90) % 4, axes=(0, 1))
            psi = extract_patch_features(rotated, fx)
            c = psi.shape[0]
            vectors.append(psi.reshape(c, -1).T)
    stacked = np.concatenate(vectors, axis=0)
    return PrototypeBank(category=category, vectors=stacked, source_count=stacked.shape[0])


def prototype_error_map(image: np.ndarray, bank: PrototypeBank, fx: PatchFeatureExtractor) -> ErrorMap:
    """Squared Euclidean distance from each spatial feature vector to its
    nearest bank vector."""
    psi = extract_patch_features(image, fx)
    c, h, w = psi.shape
    if c != bank.dim:
        raise ParameterError(f"feature dim {c} != bank dim {bank.dim}")
    # contiguous rows keep the reduction bitwise equal to a per-position sum
    feats = np.ascontiguousarray(psi.reshape(c, -1).T)   # (h*w, c)
    n_bank = bank.vectors.shape[0]
    chunk = max(1, _CHUNK_ELEMS // max(1, n_bank * c))
    mins = np.empty(feats.shape[0])
    for start in range(0, feats.shape[0], chunk):
        block = feats[start:start + chunk]
        d = ((block[:, None, :] - bank.vectors[None, :, :]) ** 2).sum(axis=2)
        mins[start:start + block.shape[0]] = d.min(axis=1)
    return ErrorMap(values=mins.reshape(h, w))


def variance_split_threshold(E: ErrorMap) -> float | None:
    """The threshold r over the unique error values that minimizes
    Var({e >= r}) + Var({e < r}).

    Ties prefer the largest r (smaller masks mean less inpainting work).
    Returns None for a constant map, where no split exists.
    """
    flat = np.sort(E.values.ravel())
    uniq, first_idx = np.unique(flat, return_index=True)
    if uniq.size < 2:
        return None
    n = flat.size
    csum = np.concatenate(([0.0], np.cumsum(flat)))
    csq = np.concatenate(([0.0], np.cumsum(flat * flat)))

    best_obj = np.inf
    best_r = None
    for i in range(uniq.size):
        split = int(first_idx[i])            # elements < r occupy flat[:split]
        obj = _side_var(csum, csq, 0, split) + _side_var(csum, csq, split, n)
        if obj <= best_obj:
            best_obj = obj
            best_r = float(uniq[i])
    return best_r


def _side_var(csum: np.ndarray, csq: np.ndarray, lo: int, hi: int) -> float:
    """Population variance of flat[lo:hi] from prefix sums; empty or
    singleton sides contribute zero."""
    m = hi - lo
    if m <= 1:
        return 0.0
    s = csum[hi] - csum[lo]
    q = csq[hi] - csq[lo]
    v = q / m - (s / m) ** 2
    return max(v, 0.0)


def prototype_mask(E: ErrorMap, r: float, H: int, W: int) -> MaskProposal:
    """Binarize the error map at r (upper set {e >= r} -> 1) and
    nearest-upsample to image size."""
    if not np.isfinite(r):
        raise ParameterError(f"threshold must be finite, got {r}")
    binary = (E.values >= r).astype(np.uint8)
    return MaskProposal(mask=resize_nearest(binary, (H, W)), provenance="prototype")


def save_bank(bank: PrototypeBank, path) -> None:
    """Persist as: magic, one JSON header line, then flat float32 data."""
    header = {
        "category": bank.category,
        "dim": int(bank.dim),
        "count": int(bank.vectors.shape[0]),
        "source_count": int(bank.source_count),
    }
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(bank.vectors, dtype=np.float32).tobytes())


def load_bank(path) -> PrototypeBank:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_BANK_MAGIC))
        if magic != _BANK_MAGIC:
            raise ParameterError(f"{path} is not a prototype bank file")
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=np.float32)
    count, dim = header["count"], header["dim"]
    if data.size != count * dim:
        raise ParameterError(f"{path} truncated: {data.size} values for {count}x{dim}")
    vectors = data.reshape(count, dim).astype(np.float64)
    return PrototypeBank(category=header["category"], vectors=vectors,
                         source_count=header["source_count"])
