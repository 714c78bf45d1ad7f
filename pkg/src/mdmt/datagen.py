"""Synthetic two-domain volumetric data.

Every volume is Gaussian background noise plus a domain intensity offset
plus a few non-overlapping spheres ("nodes").  A subset of spheres is
brighter than the rest ("metastatic").  Optionally, bright axis-aligned
tubes ("distractors") are added that belong to neither the label nor the
mask.  Domain-1 scans carry only the scan-level label *contains at least
one metastatic sphere*; domain-2 scans carry only a voxel mask of every
sphere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, GenerationError, NumericError

SPLITS = ("train", "val", "test")
_TUPLE_FIELDS = ("shape", "blob_count", "blob_radius", "metastatic_count", "distractor_count")


@dataclass(frozen=True)
class DomainSpec:
    """Generative knobs of one domain.

    ``positive_fraction`` fixes the exact share of scans that contain a
    metastatic sphere.  Domain 2 uses it for its latent class, which is never
    exposed as a label.  Distractor tubes have radius ``distractor_radius``,
    run along a random axis for at least half its extent and add
    ``distractor_delta``; they never touch a sphere.
    """

    domain_id: int
    n_patients: int
    shape: tuple[int, int, int] = (16, 16, 8)
    noise_mean: float = 0.0
    noise_std: float = 1.0
    intensity_offset: float = 0.0
    blob_count: tuple[int, int] = (1, 3)
    blob_radius: tuple[float, float] = (1.5, 2.5)
    blob_delta: float = 1.0
    metastatic_delta: float = 2.0
    metastatic_count: tuple[int, int] = (1, 1)
    positive_fraction: float = 0.5
    distractor_count: tuple[int, int] = (0, 0)
    distractor_delta: float = 2.0
    distractor_radius: float = 1.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.domain_id not in (1, 2):
            raise ConfigError(f"domain_id must be 1 or 2, got {self.domain_id}")
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"shape must be three positive extents, got {self.shape}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        lo, hi = self.blob_count
        if not 0 <= lo <= hi:
            raise ConfigError(f"blob_count range {self.blob_count} invalid")
        mlo, mhi = self.metastatic_count
        if not 1 <= mlo <= mhi:
            raise ConfigError(f"metastatic_count range {self.metastatic_count} invalid")
        rlo, rhi = self.blob_radius
        if not 0 < rlo <= rhi:
            raise ConfigError(f"blob_radius range {self.blob_radius} invalid")
        if 2 * math.ceil(rhi) + 1 > min(self.shape):
            raise ConfigError(f"blob radius {rhi} does not fit in shape {self.shape}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        if self.positive_fraction > 0 and hi < 1:
            raise ConfigError("positive scans need blob_count max >= 1")
        dlo, dhi = self.distractor_count
        if not 0 <= dlo <= dhi:
            raise ConfigError(f"distractor_count range {self.distractor_count} invalid")
        if dhi and not 0 < self.distractor_radius < (min(self.shape) - 1) / 2:
            raise ConfigError(f"distractor_radius {self.distractor_radius} does not fit in {self.shape}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for name in _TUPLE_FIELDS:
            d[name] = list(d[name])
        return d


@dataclass
class DomainDataset:
    """Volumes of one domain with their annotations and split assignment."""

    domain_id: int
    volumes: np.ndarray
    patient_ids: np.ndarray
    labels: np.ndarray | None = None
    masks: np.ndarray | None = None
    splits: np.ndarray | None = None
    stats: tuple[float, float] | None = None
    spec: DomainSpec | None = None
    blobs: list = field(default_factory=list)
    distractors: list = field(default_factory=list)
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.volumes.shape[1:])

    def indices(self, splits: str | Iterable[str]) -> np.ndarray:
        """Record indices belonging to any of ``splits``, in record order."""
        if self.splits is None:
            raise ConfigError(f"domain {self.domain_id} dataset has no split assignment")
        wanted = (splits,) if isinstance(splits, str) else tuple(splits)
        for s in wanted:
            if s not in SPLITS:
                raise ConfigError(f"unknown split {s!r}")
        return np.flatnonzero(np.isin(self.splits, wanted))

    def split_patients(self, split: str) -> set[int]:
        return {int(p) for p in self.patient_ids[self.indices(split)]}


def _sphere(shape, center, radius) -> np.ndarray:
    zz, yy, xx = np.ogrid[tuple(slice(0, s) for s in shape)]
    cz, cy, cx = center
    return (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def render_blobs(shape, blobs: Sequence[dict]) -> np.ndarray:
    """Union of the blobs' voxelised spheres as a uint8 mask."""
    mask = np.zeros(shape, dtype=bool)
    for b in blobs:
        mask |= _sphere(shape, b["center"], b["radius"])
    return mask.astype(np.uint8)


def scan_label(blobs: Sequence[dict]) -> int:
    """Scan-level label: 1 iff any blob is metastatic."""
    return int(any(b["metastatic"] for b in blobs))


def _place_blobs(rng, spec: DomainSpec, n_blobs: int) -> list[dict]:
    placed: list[dict] = []
    rlo, rhi = spec.blob_radius
    for _ in range(n_blobs):
        for _attempt in range(spec.max_retries):
            r = float(rng.uniform(rlo, rhi))
            m = math.ceil(r)
            center = [int(rng.integers(m, s - m)) for s in spec.shape]
            ok = all(
                math.dist(center, other["center"]) > r + other["radius"] + 1.0
                for other in placed
            )
            if ok:
                placed.append({"center": center, "radius": r, "metastatic": False})
                break
        else:
            raise GenerationError(
                f"could not place {n_blobs} blobs in {spec.shape} after {spec.max_retries} retries")
    return placed


def _tube(shape, tube: dict) -> np.ndarray:
    axis, (a, b), (start, stop), r = tube["axis"], tube["cross"], tube["extent"], tube["radius"]
    other = [d for d in range(3) if d != axis]
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    inside = (grids[other[0]] - a) ** 2 + (grids[other[1]] - b) ** 2 <= r ** 2
    along = (grids[axis] >= start) & (grids[axis] < stop)
    return inside & along


def render_distractors(shape, tubes: Sequence[dict]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for t in tubes:
        mask |= _tube(shape, t)
    return mask.astype(np.uint8)


def _tube_clear(tube: dict, blob: dict) -> bool:
    # distance from the sphere centre to the tube's axis segment
    axis, cross, (start, stop) = tube["axis"], tube["cross"], tube["extent"]
    c = blob["center"]
    other = [d for d in range(3) if d != axis]
    along = min(max(c[axis], start), stop - 1)
    d = math.sqrt((c[axis] - along) ** 2 + (c[other[0]] - cross[0]) ** 2 + (c[other[1]] - cross[1]) ** 2)
    return d > blob["radius"] + tube["radius"] + 1.0


def _place_distractors(rng, spec: DomainSpec, blobs: list[dict]) -> list[dict]:
    lo, hi = spec.distractor_count
    n = int(rng.integers(lo, hi + 1))
    m = math.ceil(spec.distractor_radius)
    tubes: list[dict] = []
    for _ in range(n):
        for _attempt in range(spec.max_retries):
            axis = int(rng.integers(3))
            extent = spec.shape[axis]
            length = int(rng.integers((extent + 1) // 2, extent + 1))
            start = int(rng.integers(0, extent - length + 1))
            cross = [int(rng.integers(m, spec.shape[d] - m)) for d in range(3) if d != axis]
            tube = {"axis": axis, "cross": cross, "extent": [start, start + length],
                    "radius": spec.distractor_radius}
            if all(_tube_clear(tube, b) for b in blobs):
                tubes.append(tube)
                break
        else:
            raise GenerationError(
                f"could not place {n} distractors in {spec.shape} after {spec.max_retries} retries")
    return tubes


def _patient_volume(spec: DomainSpec, pid: int, positive: bool):
    rng = np.random.default_rng([spec.seed, spec.domain_id, pid])
    lo, hi = spec.blob_count
    n = int(rng.integers(max(lo, 1) if positive else lo, hi + 1))
    blobs = _place_blobs(rng, spec, n)
    if positive:
        k = int(rng.integers(spec.metastatic_count[0], spec.metastatic_count[1] + 1))
        for idx in rng.permutation(n)[:min(k, n)]:
            blobs[int(idx)]["metastatic"] = True
    vol = spec.noise_mean + spec.intensity_offset + spec.noise_std * rng.standard_normal(spec.shape)
    for b in blobs:
        vol[_sphere(spec.shape, b["center"], b["radius"])] += (
            spec.metastatic_delta if b["metastatic"] else spec.blob_delta)
    # drawn last so that specs without distractors keep their streams
    tubes = _place_distractors(rng, spec, blobs)
    if tubes:
        vol[render_distractors(spec.shape, tubes).astype(bool)] += spec.distractor_delta
    return vol, blobs, tubes


def generate_domain(spec: DomainSpec) -> DomainDataset:
    """Deterministically generate one domain from its spec.

    Exactly ``round(positive_fraction * n_patients)`` scans are positive.
    Each patient's noise and blobs come from a stream seeded by
    ``(seed, domain_id, patient_id)``.
    """
    n = spec.n_patients
    n_pos = int(math.floor(spec.positive_fraction * n + 0.5))
    order = np.random.default_rng([spec.seed, spec.domain_id]).permutation(n)
    positive = np.zeros(n, dtype=bool)
    positive[order[:n_pos]] = True
    volumes = np.empty((n,) + spec.shape)
    all_blobs, all_tubes = [], []
    for pid in range(n):
        volumes[pid], blobs, tubes = _patient_volume(spec, pid, bool(positive[pid]))
        all_blobs.append(blobs)
        all_tubes.append(tubes)
    ds = DomainDataset(domain_id=spec.domain_id, volumes=volumes,
                       patient_ids=np.arange(n, dtype=np.int64), spec=spec, blobs=all_blobs,
                       distractors=all_tubes)
    if spec.domain_id == 1:
        ds.labels = np.array([scan_label(b) for b in all_blobs], dtype=np.int64)
    else:
        ds.masks = np.stack([render_blobs(spec.shape, b) for b in all_blobs])
    return ds


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_val = int(math.floor(fractions[1] * n + 0.5))
    n_test = int(math.floor(fractions[2] * n + 0.5))
    return n - n_val - n_test, n_val, n_test


def split_patientwise(ds: DomainDataset, fractions=(0.6, 0.15, 0.25), seed: int = 0,
                      stratify: bool = False) -> DomainDataset:
    """Assign every patient to exactly one of train/val/test.

    Patients are permuted with ``seed`` and cut into contiguous runs whose
    lengths are the rounded fractions (train takes the remainder).  With
    ``stratify=True`` this is done per scan label, so each split keeps the
    class ratio.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} must be three non-negatives summing to 1")
    n = len(ds)
    rng = np.random.default_rng(seed)
    assign = np.empty(n, dtype=object)
    if stratify:
        if ds.labels is None:
            raise ConfigError("stratified split needs scan labels")
        groups = [np.flatnonzero(ds.labels == c) for c in (0, 1)]
    else:
        groups = [np.arange(n)]
    totals = np.zeros(3, dtype=int)
    for idx in groups:
        counts = _split_counts(len(idx), fractions)
        perm = idx[rng.permutation(len(idx))]
        start = 0
        for name, c in zip(SPLITS, counts):
            assign[perm[start:start + c]] = name
            start += c
        totals += counts
    if (totals < 1).any():
        raise ConfigError(
            f"split of {n} patients with fractions {fractions} leaves an empty split {tuple(totals)}")
    return replace(ds, splits=assign.astype(str))


def compute_stats(ds: DomainDataset, split: str = "train") -> tuple[float, float]:
    """Mean and (population) standard deviation of all voxels in ``split``."""
    vox = ds.volumes[ds.indices(split)]
    mu = float(vox.mean())
    sigma = float(vox.std())
    if not sigma > 0:
        raise NumericError(f"domain {ds.domain_id} {split} split has zero variance")
    return mu, sigma


def normalize(ds: DomainDataset, stats: tuple[float, float] | None = None) -> DomainDataset:
    """Standardise every split with the dataset's own training statistics."""
    if ds.normalized:
        return ds
    mu, sigma = stats if stats is not None else (ds.stats or compute_stats(ds))
    if not sigma > 0:
        raise NumericError("normalization sigma must be > 0")
    return replace(ds, volumes=(ds.volumes - mu) / sigma, stats=(mu, sigma), normalized=True)
