"""Deterministic synthetic segmentation data with a cohort covariate.

Each image is a field of concentric regions around a jittered center.
Region radii and per-region intensity drift smoothly with the image's
cohort value (0..100), so partitioning a dataset by cohort range yields
clients with genuinely shifted distributions. Per-pixel features are
(noisy intensity, x, y, distractor noise), all scaled by a single factor
so the classifier's learning budget matches the feature magnitudes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .seeding import derive_seed

FEATURE_CHANNELS = 4

BTDS_MAGIC = b"BTDS"
BTDS_VERSION = 1

# Fraction by which cohort 0..100 rescales region radii at cohort_shift=1.
_RADIUS_SWING = 0.3
_CENTER_JITTER = 0.1
_OUTER_RADIUS = 0.95


@dataclass
class SegImage:
    """One labeled image: flat per-pixel features plus its cohort value."""

    height: int
    width: int
    features: np.ndarray  # (height*width, FEATURE_CHANNELS) float64
    labels: np.ndarray  # (height*width,) int64
    cohort: float

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.height * self.width
        if self.features.shape != (n, FEATURE_CHANNELS):
            raise ValueError(
                f"features shape {self.features.shape} does not match "
                f"{n}x{FEATURE_CHANNELS} for a {self.height}x{self.width} image"
            )
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} does not match {n} pixels")
        if not 0.0 <= self.cohort <= 100.0:
            raise ValueError(f"cohort must be in [0, 100], got {self.cohort}")


@dataclass
class DatasetShard:
    """One client's local training data."""

    client_index: int
    images: list[SegImage]

    def __post_init__(self) -> None:
        if len(self.images) == 0:
            raise ValueError(f"shard for client {self.client_index} is empty")

    @property
    def sample_count(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic generator."""

    num_train: int = 20
    num_test: int = 10
    height: int = 32
    width: int = 32
    num_classes: int = 4
    noise_std: float = 0.1
    cohort_shift: float = 1.0
    feature_scale: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_train < 1 or self.num_test < 1:
            raise ValueError("num_train and num_test must both be >= 1")
        if self.height < 4 or self.width < 4:
            raise ValueError("image size must be at least 4x4")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.cohort_shift <= 1.9:
            # Above ~1.9 the per-class intensity bands start to overlap
            # across cohorts and the noiseless task stops being separable.
            raise ValueError(f"cohort_shift must be in [0, 1.9], got {self.cohort_shift}")
        if self.feature_scale <= 0:
            raise ValueError(f"feature_scale must be > 0, got {self.feature_scale}")


def class_intensity(cfg: GenConfig, labels: np.ndarray, cohort: float) -> np.ndarray:
    """Noise-free centered intensity for each label at a given cohort."""
    k = cfg.num_classes
    return (labels + 0.5 * cfg.cohort_shift * (cohort / 100.0)) / k - 0.5


def bayes_predict(cfg: GenConfig, features: np.ndarray) -> np.ndarray:
    """Optimal classifier for noiseless images: invert the intensity band."""
    value = features[:, 0] / cfg.feature_scale + 0.5
    return np.clip(np.floor(value * cfg.num_classes), 0, cfg.num_classes - 1).astype(np.int64)


def _region_radii(cfg: GenConfig, cohort: float) -> np.ndarray:
    bases = _OUTER_RADIUS * np.arange(cfg.num_classes - 1, 0, -1) / (cfg.num_classes - 1)
    scale = 1.0 + _RADIUS_SWING * cfg.cohort_shift * (cohort / 100.0 - 0.5)
    return bases * scale


def _make_image(cfg: GenConfig, cohort: float, rng: np.random.Generator) -> SegImage:
    h, w = cfg.height, cfg.width
    cx = 0.5 + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER)
    cy = 0.5 + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER)

    xs = np.arange(w) / (w - 1)
    ys = np.arange(h) / (h - 1)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    dist = 2.0 * np.hypot(grid_x - cx, grid_y - cy)

    radii = _region_radii(cfg, cohort)
    labels = np.zeros((h, w), dtype=np.int64)
    for k, radius in enumerate(radii, start=1):
        labels[dist <= radius] = k
    labels = labels.ravel()

    intensity = class_intensity(cfg, labels, cohort)
    intensity = intensity + cfg.noise_std * rng.standard_normal(h * w)
    features = np.stack(
        [
            intensity,
            grid_x.ravel() - 0.5,
            grid_y.ravel() - 0.5,
            rng.standard_normal(h * w),
        ],
        axis=1,
    )
    features *= cfg.feature_scale
    return SegImage(height=h, width=w, features=features, labels=labels, cohort=float(cohort))


def _generate(
    cfg: GenConfig,
    train_cohorts: np.ndarray,
    test_cohorts: np.ndarray,
) -> tuple[list[SegImage], list[SegImage]]:
    images = []
    cohorts = np.concatenate([train_cohorts, test_cohorts])
    for index, cohort in enumerate(cohorts):
        rng = np.random.default_rng(derive_seed(cfg.seed, "image", index))
        images.append(_make_image(cfg, float(cohort), rng))
    return images[: cfg.num_train], images[cfg.num_train :]


def generate_dataset(cfg: GenConfig) -> tuple[list[SegImage], list[SegImage]]:
    """Generate disjoint train/test image lists, deterministic in cfg."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "cohorts"))
    cohorts = rng.uniform(0.0, 100.0, size=cfg.num_train + cfg.num_test)
    return _generate(cfg, cohorts[: cfg.num_train], cohorts[cfg.num_train :])


def cohort_bucket_indices(boundaries: list[float], cohorts: np.ndarray) -> np.ndarray:
    """Bucket index per cohort: bucket 0 is (-inf, b0], bucket i is (b[i-1], b[i]].

    An empty boundary list is the degenerate single-bucket split.
    """
    bounds = np.asarray(boundaries, dtype=np.float64).reshape(-1)
    if np.any(np.diff(bounds) <= 0):
        raise ValueError(f"boundaries must be strictly increasing, got {boundaries}")
    return np.searchsorted(bounds, cohorts, side="left")


def generate_dataset_for_cohorts(
    cfg: GenConfig,
    boundaries: list[float],
    counts: list[int],
    max_attempts: int = 32,
) -> tuple[list[SegImage], list[SegImage]]:
    """Generate a dataset whose train cohorts hit exact per-bucket counts.

    Train cohorts are drawn inside their target buckets, then the realized
    histogram is verified; on a miss the whole generation retries with the
    seed bumped by one, up to max_attempts.
    """
    if len(counts) != len(boundaries) + 1:
        raise ValueError(
            f"need {len(boundaries) + 1} counts for {len(boundaries)} boundaries, got {len(counts)}"
        )
    if any(c < 1 for c in counts):
        raise ValueError(f"every cohort bucket needs at least one image, got {counts}")
    if sum(counts) != cfg.num_train:
        raise ValueError(f"counts {counts} must sum to num_train={cfg.num_train}")

    edges = [0.0, *boundaries, 100.0]
    if not all(edges[i] < edges[i + 1] for i in range(len(edges) - 1)):
        raise ValueError(f"boundaries {boundaries} must lie strictly inside (0, 100)")

    for attempt in range(max_attempts):
        attempt_cfg = replace(cfg, seed=cfg.seed + attempt)
        rng = np.random.default_rng(derive_seed(attempt_cfg.seed, "cohorts-targeted"))
        per_bucket = [
            rng.uniform(edges[i], edges[i + 1], size=counts[i]) for i in range(len(counts))
        ]
        train_cohorts = np.concatenate(per_bucket)
        rng.shuffle(train_cohorts)
        test_cohorts = rng.uniform(0.0, 100.0, size=cfg.num_test)
        train, test = _generate(attempt_cfg, train_cohorts, test_cohorts)
        realized = np.bincount(
            cohort_bucket_indices(boundaries, np.array([im.cohort for im in train])),
            minlength=len(counts),
        )
        if list(realized) == list(counts):
            return train, test
    raise RuntimeError(
        f"could not realize cohort counts {counts} within {max_attempts} attempts"
    )


def split_uniform(train: list[SegImage], n_clients: int, seed: int) -> list[DatasetShard]:
    """Randomly partition images into near-equal shards (sizes differ by at most 1).

    A remainder goes to the lowest-index clients, so 20 images over 7
    clients yields sizes [3, 3, 3, 3, 3, 3, 2].
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > len(train):
        raise ValueError(
            f"cannot split {len(train)} images across {n_clients} clients without empty shards"
        )
    order = np.random.default_rng(seed).permutation(len(train))
    base, extra = divmod(len(train), n_clients)
    shards = []
    offset = 0
    for i in range(n_clients):
        size = base + (1 if i < extra else 0)
        shards.append(
            DatasetShard(client_index=i, images=[train[j] for j in order[offset : offset + size]])
        )
        offset += size
    return shards


def split_by_cohort(
    train: list[SegImage],
    boundaries: list[float],
    expected_counts: list[int] | None = None,
) -> list[DatasetShard]:
    """Partition images into cohort-range buckets, one shard per bucket."""
    buckets = cohort_bucket_indices(boundaries, np.array([im.cohort for im in train]))
    n_buckets = len(boundaries) + 1
    groups: list[list[SegImage]] = [[] for _ in range(n_buckets)]
    for image, bucket in zip(train, buckets):
        groups[int(bucket)].append(image)

    edges = [float("-inf"), *boundaries, float("inf")]
    for i, group in enumerate(groups):
        if not group:
            raise ValueError(
                f"cohort bucket {i} ({edges[i]}, {edges[i + 1]}] contains no images"
            )
    if expected_counts is not None:
        realized = [len(g) for g in groups]
        if realized != list(expected_counts):
            raise ValueError(
                f"cohort bucket sizes {realized} do not match expected {list(expected_counts)}"
            )
    return [DatasetShard(client_index=i, images=group) for i, group in enumerate(groups)]


def save_dataset(images: list[SegImage], num_classes: int, path) -> None:
    """Write images to one file in the BTDS binary layout (all little-endian)."""
    with open(path, "wb") as fh:
        fh.write(BTDS_MAGIC)
        fh.write(struct.pack("<B", BTDS_VERSION))
        fh.write(struct.pack("<III", len(images), num_classes, FEATURE_CHANNELS))
        for image in images:
            fh.write(struct.pack("<IId", image.height, image.width, image.cohort))
            fh.write(image.features.astype("<f8").tobytes())
            fh.write(image.labels.astype("<u2").tobytes())


def load_dataset(path) -> tuple[list[SegImage], int]:
    """Read a BTDS file back into images plus its num_classes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != BTDS_MAGIC:
        raise ValueError(f"not a BTDS file: bad magic {data[:4]!r}")
    version = data[4]
    if version != BTDS_VERSION:
        raise ValueError(f"unsupported BTDS version {version}")
    n_images, num_classes, channels = struct.unpack_from("<III", data, 5)
    if channels != FEATURE_CHANNELS:
        raise ValueError(f"unsupported channel count {channels}")
    offset = 17
    images = []
    for _ in range(n_images):
        height, width, cohort = struct.unpack_from("<IId", data, offset)
        offset += 16
        n = height * width
        features = np.frombuffer(data, dtype="<f8", count=n * channels, offset=offset).reshape(
            n, channels
        )
        offset += 8 * n * channels
        labels = np.frombuffer(data, dtype="<u2", count=n, offset=offset).astype(np.int64)
        offset += 2 * n
        images.append(
            SegImage(
                height=height,
                width=width,
                features=features.copy(),
                labels=labels,
                cohort=cohort,
            )
        )
    if offset != len(data):
        raise ValueError(f"trailing bytes after {n_images} images")
    return images, num_classes
