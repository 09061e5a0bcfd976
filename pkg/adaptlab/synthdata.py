"""
Synthetic SI task and accented speakers.

The SI task is a mixture of Gaussian classes. A speaker's "accent" is an affine
distortion of feature space plus extra noise, x -> A_s x + b_s + eps, whose
magnitude grows with the speaker's severity (slight / medium / heavy).
Speaker data is produced in blocks of frames; a block plays the role of one
utterance, and the split protocol counts blocks.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from adaptlab.checkpoint import Kind, PayloadReader, PayloadWriter, read_container, write_container
from adaptlab.errors import CheckpointError, InsufficientDataError
from adaptlab.nn import Dataset
from adaptlab.utils import derive_seed, make_rng, sanitize_log_message

logger = logging.getLogger(__name__)


class Severity(str, Enum):
    SLIGHT = "slight"
    MEDIUM = "medium"
    HEAVY = "heavy"


SEVERITY_ORDER = (Severity.SLIGHT, Severity.MEDIUM, Severity.HEAVY)

DEFAULT_SEVERITY_RANGES: dict[Severity, tuple[float, float]] = {
    Severity.SLIGHT: (0.05, 0.1),
    Severity.MEDIUM: (0.45, 0.55),
    Severity.HEAVY: (0.6, 1.0),
}
# 2 slight, 4 medium, 4 heavy speakers.
DEFAULT_ROSTER: dict[Severity, int] = {
    Severity.SLIGHT: 2,
    Severity.MEDIUM: 4,
    Severity.HEAVY: 4,
}


@dataclass(frozen=True, eq=False)
class TaskSpec:
    n_classes: int = 10
    feature_dim: int = 20
    seed: int = 0
    class_sep: float = 1.5
    within_std: float = 1.0
    # Per-class, per-dimension std multipliers are drawn from this range.
    std_jitter: tuple[float, float] = (0.8, 1.2)
    block_size: int = 10
    means: np.ndarray = field(init=False, repr=False)
    stds: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes!r}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim!r}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size!r}")
        rng = make_rng(derive_seed(self.seed, "geometry"))
        means = self.class_sep * rng.normal(size=(self.n_classes, self.feature_dim))
        lo, hi = self.std_jitter
        stds = self.within_std * rng.uniform(lo, hi, size=(self.n_classes, self.feature_dim))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        check_geometry(means)

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.normal(size=(labels.shape[0], self.feature_dim))
        return self.means[labels] + self.stds[labels] * noise


def check_geometry(means: np.ndarray, min_distance: float = 1e-6) -> None:
    """Reject class layouts where two class means coincide."""
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt(np.sum(diffs * diffs, axis=-1))
    np.fill_diagonal(dist, np.inf)
    if np.min(dist) <= min_distance:
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        raise ValueError(f"degenerate class geometry: classes {i} and {j} share a mean")


def balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffled labels with class counts differing by at most one."""
    return rng.permutation(np.arange(n) % n_classes)


def generate_si_corpus(spec: TaskSpec, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    if n_train < spec.n_classes or n_test < spec.n_classes:
        raise InsufficientDataError(
            f"n_train and n_test must be >= n_classes ({spec.n_classes}), got {n_train}, {n_test}"
        )
    out = []
    for part, n in (("train", n_train), ("test", n_test)):
        rng = make_rng(derive_seed(spec.seed, "si", part))
        labels = balanced_labels(n, spec.n_classes, rng)
        out.append(Dataset(spec.sample(labels, rng), labels, speaker_id="si"))
    return out[0], out[1]


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: str
    severity: Severity
    transform: np.ndarray     # A_s, (D, D)
    shift: np.ndarray         # b_s, (D,)
    noise_scale: float        # sigma_s
    seed: int
    magnitude: float = 0.0    # the severity draw the transform was built from

    @property
    def distortion(self) -> float:
        """||A_s - I||_F + ||b_s|| + sigma_s."""
        eye = np.eye(self.transform.shape[0])
        return float(
            np.linalg.norm(self.transform - eye) + np.linalg.norm(self.shift) + self.noise_scale
        )

    @property
    def is_identity(self) -> bool:
        return (
            np.array_equal(self.transform, np.eye(self.transform.shape[0]))
            and not np.any(self.shift)
            and self.noise_scale == 0.0
        )


@dataclass(frozen=True)
class DistortionScales:
    """Map a severity draw m to A = I + m*matrix*M, b = m*shift*u, sigma = m*noise."""
    matrix: float = 4.0
    shift: float = 3.0
    noise: float = 1.0


def make_profile(
    speaker_id: str,
    severity: Severity,
    magnitude: float,
    feature_dim: int,
    seed: int,
    scales: DistortionScales = DistortionScales(),
) -> SpeakerProfile:
    # M and u have unit norm, so the distortion measure is exactly
    # m * (scales.matrix + scales.shift + scales.noise).
    rng = make_rng(derive_seed(seed, "profile", speaker_id))
    m_dir = rng.normal(size=(feature_dim, feature_dim))
    m_dir /= np.linalg.norm(m_dir)
    u = rng.normal(size=feature_dim)
    u /= np.linalg.norm(u)
    if magnitude == 0.0:
        transform, shift = np.eye(feature_dim), np.zeros(feature_dim)
    else:
        transform = np.eye(feature_dim) + magnitude * scales.matrix * m_dir
        shift = magnitude * scales.shift * u
    return SpeakerProfile(
        speaker_id=speaker_id,
        severity=Severity(severity),
        transform=transform,
        shift=shift,
        noise_scale=magnitude * scales.noise,
        seed=derive_seed(seed, "noise", speaker_id),
        magnitude=magnitude,
    )


def _check_ranges(ranges: dict[Severity, tuple[float, float]]) -> None:
    prev_hi = None
    for sev in SEVERITY_ORDER:
        if sev not in ranges:
            continue
        lo, hi = ranges[sev]
        if lo < 0 or hi < lo:
            raise ValueError(f"severity range for {sev.value} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if prev_hi is not None and lo <= prev_hi:
            raise ValueError(f"severity ranges must be disjoint and increasing; {sev.value} starts at {lo}")
        prev_hi = hi


def make_speakers(
    spec: TaskSpec,
    n_per_severity: dict[Severity, int] | None = None,
    seed: int = 0,
    ranges: dict[Severity, tuple[float, float]] | None = None,
    scales: DistortionScales = DistortionScales(),
) -> list[SpeakerProfile]:
    """
    Roster of speakers with ids S01, S02, ... The severity-to-id assignment is
    a seeded shuffle, so groups are interleaved across ids.
    """
    counts = {Severity(k): int(v) for k, v in (n_per_severity or DEFAULT_ROSTER).items()}
    ranges = {Severity(k): tuple(v) for k, v in (ranges or DEFAULT_SEVERITY_RANGES).items()}
    for sev, n in counts.items():
        if n < 1:
            raise ValueError(f"need at least one {sev.value} speaker, got {n}")
        if sev not in ranges:
            raise ValueError(f"no severity range configured for {sev.value}")
    _check_ranges(ranges)

    rng = make_rng(derive_seed(seed, "roster"))
    severities = [sev for sev in SEVERITY_ORDER for _ in range(counts.get(sev, 0))]
    severities = [severities[i] for i in rng.permutation(len(severities))]
    roster = []
    for i, sev in enumerate(severities, start=1):
        lo, hi = ranges[sev]
        magnitude = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        roster.append(make_profile(f"S{i:02d}", sev, magnitude, spec.feature_dim, seed, scales))
    return roster


def apply_speaker(profile: SpeakerProfile, dataset: Dataset) -> Dataset:
    """x <- A_s x + b_s + eps with eps ~ N(0, sigma_s^2 I); labels unchanged."""
    if profile.transform.shape[0] != dataset.feature_dim:
        raise ValueError(
            f"profile dim {profile.transform.shape[0]} does not match features {dataset.feature_dim}"
        )
    x = dataset.features
    if not np.array_equal(profile.transform, np.eye(dataset.feature_dim)):
        x = x @ profile.transform.T
    if np.any(profile.shift):
        x = x + profile.shift
    if profile.noise_scale > 0:
        rng = make_rng(profile.seed)
        x = x + profile.noise_scale * rng.normal(size=x.shape)
    return Dataset(x, dataset.labels.copy(), profile.speaker_id, dataset.block_size)


@dataclass(frozen=True)
class SplitSizes:
    """Counts in blocks."""
    adapt_pool: int = 300
    cv: int = 50
    test: int = 100

    @property
    def total(self) -> int:
        return self.adapt_pool + self.cv + self.test


@dataclass(frozen=True, eq=False)
class SpeakerSplits:
    profile: SpeakerProfile
    adapt_pool: Dataset
    cv: Dataset
    test: Dataset

    def subset(self, k: int) -> Dataset:
        """The first k blocks of the shuffled pool; subset(k) is a prefix of subset(k + 1)."""
        return self.adapt_pool.take_blocks(k)


def split_speaker(
    profile: SpeakerProfile,
    spec: TaskSpec,
    sizes: SplitSizes = SplitSizes(),
    pool_blocks: int | None = None,
) -> SpeakerSplits:
    """
    Draw the speaker's clean blocks from the SI class geometry, distort them,
    shuffle block order once, then cut pool / cv / test.
    """
    available = sizes.total if pool_blocks is None else pool_blocks
    if available < sizes.total:
        raise InsufficientDataError(
            f"speaker {sanitize_log_message(profile.speaker_id)} has {available} blocks, "
            f"splits need {sizes.total}"
        )
    rng = make_rng(derive_seed(profile.seed, "clean"))
    n_frames = available * spec.block_size
    labels = balanced_labels(n_frames, spec.n_classes, rng)
    clean = Dataset(spec.sample(labels, rng), labels, profile.speaker_id, spec.block_size)
    shifted = apply_speaker(profile, clean)

    order = rng.permutation(available)
    b = spec.block_size

    def blocks(ids: np.ndarray) -> Dataset:
        rows = (ids[:, None] * b + np.arange(b)[None, :]).ravel()
        return Dataset(shifted.features[rows], shifted.labels[rows], profile.speaker_id, b)

    pool_ids = order[:sizes.adapt_pool]
    cv_ids = order[sizes.adapt_pool:sizes.adapt_pool + sizes.cv]
    test_ids = order[sizes.adapt_pool + sizes.cv:sizes.total]
    return SpeakerSplits(profile, blocks(pool_ids), blocks(cv_ids), blocks(test_ids))


# -- dataset files ---------------------------------------------------------------

def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Dataset payload: u16 id length, id (utf-8), u32 block size, u32 N, u32 D,
    N*D float64 features, N int64 labels."""
    w = PayloadWriter()
    encoded = dataset.speaker_id.encode("utf-8")
    w.pack("H", len(encoded))
    w.raw(encoded)
    w.pack("III", dataset.block_size, dataset.n, dataset.feature_dim)
    w.array(dataset.features)
    w.array(dataset.labels, dtype="<i8")
    write_container(path, Kind.DATASET, w.getvalue())


def load_dataset(path: str | Path) -> Dataset:
    r = PayloadReader(read_container(path, Kind.DATASET))
    (id_len,) = r.unpack("H")
    speaker_id = r.raw(id_len).decode("utf-8")
    block_size, n, d = r.unpack("III")
    features = r.array((n, d))
    labels = r.array((n,), dtype="<i8")
    if not r.exhausted:
        raise CheckpointError(f"{path}: unexpected bytes after the labels")
    return Dataset(features, labels, speaker_id, block_size)


def export_csv(dataset: Dataset, path: str | Path) -> None:
    """Header speaker_id,label,f0..f{D-1}; one row per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["speaker_id", "label", *(f"f{i}" for i in range(dataset.feature_dim))])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([dataset.speaker_id, int(y), *(repr(float(v)) for v in x)])
    logger.info("Wrote %d samples to %s", dataset.n, sanitize_log_message(path))
