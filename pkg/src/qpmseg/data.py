"""Sample handling: per-modality normalization, augmentation, patches, disk I/O.

A sample is four polarized intensity channels, one phase map and a binary
cell mask, all pixel-aligned. Angle channels are standardized by per-channel
training-set (mean, std); the phase map is clipped to its training-set
[0.5%, 99.5%] quantile range and rescaled to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qts import read_qts, write_qts
from .tensor import Tensor


class DataError(ValueError):
    """Invalid sample, statistics, or dataset layout."""


@dataclass
class Sample:
    """One ssQPM record: intensities at 0/45/90/135 degrees, phase, mask."""

    angles: Tensor  # (4, H, W) f32
    phase: Tensor   # (1, H, W) f32
    mask: Tensor    # (H, W) u8 in {0, 1}
    id: str

    def __post_init__(self):
        a, p, m = self.angles.data, self.phase.data, self.mask.data
        if a.ndim != 3 or a.shape[0] != 4:
            raise DataError(f"angles must be (4, H, W), got {a.shape}")
        if p.shape != (1,) + a.shape[1:]:
            raise DataError(f"phase {p.shape} not aligned with angles {a.shape}")
        if m.shape != a.shape[1:]:
            raise DataError(f"mask {m.shape} not aligned with angles {a.shape}")
        if m.dtype != np.uint8 or not np.isin(m, (0, 1)).all():
            raise DataError("mask must be u8 with values in {0, 1}")

    @property
    def height(self):
        return self.angles.data.shape[1]

    @property
    def width(self):
        return self.angles.data.shape[2]


def make_sample(angles, phase, mask, id):
    return Sample(
        angles=Tensor(np.asarray(angles, dtype=np.float32)),
        phase=Tensor(np.asarray(phase, dtype=np.float32).reshape(1, *np.asarray(mask).shape)),
        mask=Tensor(np.asarray(mask, dtype=np.uint8)),
        id=str(id),
    )


@dataclass
class NormStats:
    """Training-set normalization statistics (population std, nearest-rank quantiles)."""

    angle_mean: np.ndarray  # (4,) f64
    angle_std: np.ndarray   # (4,) f64
    phase_q_lo: float
    phase_q_hi: float

    def __post_init__(self):
        self.angle_mean = np.asarray(self.angle_mean, dtype=np.float64)
        self.angle_std = np.asarray(self.angle_std, dtype=np.float64)
        if self.angle_mean.shape != (4,) or self.angle_std.shape != (4,):
            raise DataError("angle stats must have 4 channels")
        if not np.all(self.angle_std > 0):
            raise DataError("angle_std must be positive for every channel")
        if not self.phase_q_lo < self.phase_q_hi:
            raise DataError(f"degenerate phase quantiles [{self.phase_q_lo}, {self.phase_q_hi}]")

    def save(self, path):
        lines = []
        for c in range(4):
            lines.append(f"angle_mean_{c} = {float(self.angle_mean[c])!r}")
            lines.append(f"angle_std_{c} = {float(self.angle_std[c])!r}")
        lines.append(f"phase_q_lo = {float(self.phase_q_lo)!r}")
        lines.append(f"phase_q_hi = {float(self.phase_q_hi)!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        kv = parse_kv_text(Path(path).read_text())
        return cls(
            angle_mean=[float(kv[f"angle_mean_{c}"]) for c in range(4)],
            angle_std=[float(kv[f"angle_std_{c}"]) for c in range(4)],
            phase_q_lo=float(kv["phase_q_lo"]),
            phase_q_hi=float(kv["phase_q_hi"]),
        )


def parse_kv_text(text):
    """`key = value` lines, '#' comments, blank lines ignored."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def nearest_rank_quantile(sorted_values, q):
    """Nearest-rank quantile on an ascending array: element ceil(q*N) (1-based)."""
    n = sorted_values.size
    if n == 0:
        raise DataError("quantile of empty array")
    rank = int(np.ceil(q * n))
    return float(sorted_values[min(max(rank, 1), n) - 1])


def fit_norm_stats(train_samples):
    """Pool every training pixel per channel; population moments + phase quantiles."""
    if not train_samples:
        raise DataError("cannot fit normalization statistics on an empty training set")
    angle_pool = np.concatenate(
        [s.angles.data.reshape(4, -1).astype(np.float64) for s in train_samples], axis=1
    )
    phase_pool = np.concatenate(
        [s.phase.data.reshape(-1).astype(np.float64) for s in train_samples]
    )
    mean = angle_pool.mean(axis=1)
    std = angle_pool.std(axis=1)  # population
    if np.any(std == 0):
        flat = [c for c in range(4) if std[c] == 0]
        raise DataError(f"constant angle channel(s) {flat}: std is zero")
    phase_sorted = np.sort(phase_pool)
    q_lo = nearest_rank_quantile(phase_sorted, 0.005)
    q_hi = nearest_rank_quantile(phase_sorted, 0.995)
    if q_lo == q_hi:
        raise DataError("phase quantiles coincide; phase channel is (nearly) constant")
    return NormStats(angle_mean=mean, angle_std=std, phase_q_lo=q_lo, phase_q_hi=q_hi)


def normalize_angles(angles, stats):
    """Per-channel (x - mean) / std; accepts (4, H, W) or (N, 4, H, W)."""
    a = angles.data if isinstance(angles, Tensor) else np.asarray(angles)
    mean = stats.angle_mean.astype(a.dtype)
    std = stats.angle_std.astype(a.dtype)
    if a.ndim == 3:
        out = (a - mean[:, None, None]) / std[:, None, None]
    elif a.ndim == 4:
        out = (a - mean[None, :, None, None]) / std[None, :, None, None]
    else:
        raise DataError(f"angles must be 3-d or 4-d, got {a.shape}")
    return Tensor(out)


def normalize_phase(phase, stats):
    """Clip to [q_lo, q_hi] then map affinely onto [0, 1]."""
    p = phase.data if isinstance(phase, Tensor) else np.asarray(phase)
    lo, hi = p.dtype.type(stats.phase_q_lo), p.dtype.type(stats.phase_q_hi)
    if not lo < hi:
        raise DataError("degenerate phase quantiles")
    out = (np.clip(p, lo, hi) - lo) / (hi - lo)
    return Tensor(out)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPlan:
    """A concrete draw of the augmentation pipeline; identity by default."""

    hflip: bool = False
    vflip: bool = False
    k90: int = 0
    noise_std: float = 0.0   # additive Gaussian on angle intensities
    gain: float = 1.0        # multiplicative scaling of angle intensities
    noise_seed: int = 0

    @property
    def is_identity(self):
        return (not self.hflip and not self.vflip and self.k90 == 0
                and self.noise_std == 0.0 and self.gain == 1.0)


def _apply_geometry(arr, plan):
    if plan.hflip:
        arr = arr[..., ::-1]
    if plan.vflip:
        arr = arr[..., ::-1, :]
    if plan.k90:
        arr = np.rot90(arr, k=plan.k90, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def apply_augment(sample, plan):
    """Deterministically apply one plan: geometry in lockstep, intensity on angles only."""
    if plan.is_identity:
        return sample
    angles = _apply_geometry(sample.angles.data, plan)
    phase = _apply_geometry(sample.phase.data, plan)
    mask = _apply_geometry(sample.mask.data, plan)
    if plan.gain != 1.0:
        angles = angles * np.float32(plan.gain)
    if plan.noise_std > 0.0:
        noise_rng = np.random.default_rng(np.random.SeedSequence(plan.noise_seed))
        angles = angles + noise_rng.normal(0.0, plan.noise_std, size=angles.shape).astype(np.float32)
    return Sample(angles=Tensor(angles.astype(np.float32, copy=False)),
                  phase=Tensor(phase), mask=Tensor(mask), id=sample.id)


def draw_augment_plan(rng):
    plan = AugmentPlan(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        k90=int(rng.integers(0, 4)),
    )
    if rng.random() < 0.3:
        plan.noise_std = float(rng.uniform(0.005, 0.05))
        plan.noise_seed = int(rng.integers(0, 2**63 - 1))
    if rng.random() < 0.3:
        plan.gain = float(rng.uniform(0.75, 1.25))
    return plan


def augment(sample, rng):
    return apply_augment(sample, draw_augment_plan(rng))


def random_patch(sample, size, rng):
    """Aligned random crop; with prob 1/3 the crop is forced onto foreground."""
    h, w = sample.height, sample.width
    size = int(size)
    if size > h or size > w:
        raise DataError(f"patch {size} exceeds image {h}x{w}")
    if size == h and size == w:
        return sample
    fg = np.argwhere(sample.mask.data > 0)
    if fg.size and rng.random() < (1.0 / 3.0):
        y, x = fg[rng.integers(0, len(fg))]
        oy = int(rng.integers(max(0, y - size + 1), min(h - size, y) + 1))
        ox = int(rng.integers(max(0, x - size + 1), min(w - size, x) + 1))
    else:
        oy = int(rng.integers(0, h - size + 1))
        ox = int(rng.integers(0, w - size + 1))
    return Sample(
        angles=Tensor(sample.angles.data[:, oy : oy + size, ox : ox + size].copy()),
        phase=Tensor(sample.phase.data[:, oy : oy + size, ox : ox + size].copy()),
        mask=Tensor(sample.mask.data[oy : oy + size, ox : ox + size].copy()),
        id=sample.id,
    )


def select_angles(angles, channel_mask):
    """Keep only enabled angle channels; (4,H,W) or (N,4,H,W) -> k channels."""
    idx = [i for i, on in enumerate(channel_mask) if on]
    if not idx:
        raise DataError("at least one angle channel must be enabled")
    a = angles.data if isinstance(angles, Tensor) else np.asarray(angles)
    out = a[idx] if a.ndim == 3 else a[:, idx]
    return Tensor(np.ascontiguousarray(out))


# ---------------------------------------------------------------------------
# disk layout: dataset/{train,test}/sample_<id>/{angles,phase,mask}.qts + id.txt


def save_sample(sample, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_qts(directory / "angles.qts", sample.angles.data.astype(np.float32, copy=False))
    write_qts(directory / "phase.qts", sample.phase.data.astype(np.float32, copy=False))
    write_qts(directory / "mask.qts", sample.mask.data)
    (directory / "id.txt").write_text(sample.id + "\n")
    return directory


def load_sample(directory):
    directory = Path(directory)
    angles = read_qts(directory / "angles.qts", expect_dtype=np.float32)
    phase = read_qts(directory / "phase.qts", expect_dtype=np.float32)
    mask = read_qts(directory / "mask.qts", expect_dtype=np.uint8)
    id_path = directory / "id.txt"
    if not id_path.is_file():
        raise FileNotFoundError(f"missing {id_path}")
    return Sample(angles=Tensor(angles), phase=Tensor(phase), mask=Tensor(mask),
                  id=id_path.read_text().strip())


def save_dataset(samples, root, split):
    root = Path(root) / split
    for s in samples:
        save_sample(s, root / f"sample_{s.id}")
    return root


def load_dataset(root, split):
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DataError(f"dataset split directory {split_dir} does not exist")
    dirs = sorted(d for d in split_dir.iterdir() if d.is_dir() and d.name.startswith("sample_"))
    if not dirs:
        raise DataError(f"no sample_* directories under {split_dir}")
    return [load_sample(d) for d in dirs]
