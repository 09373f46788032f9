"""Synthetic ellipsoid-organ volumes, normalization and the VVOL file format.

File layout (little-endian)::

    "VVOL" | u32 version=1 | u32 C, H, W, D | f32 image[C*H*W*D] | "VLAB" | u16 labels[H*W*D]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"VVOL"
LABEL_MAGIC = b"VLAB"
VOLUME_VERSION = 1
HEADER_SIZE = 24


class FormatError(ValueError):
    """Malformed volume or checkpoint file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SynthSpecError(ValueError):
    pass


@dataclass
class VolumeSample:
    image: np.ndarray  # [C, H, W, D] float32
    labels: np.ndarray  # [H, W, D] ints in [0, J)
    id: str = ""
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")


@dataclass
class SynthSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 4
    organs_per_class: tuple[int, int] = (1, 2)
    radius_range: tuple[float, float] = (3.0, 8.0)
    class_means: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    class_stds: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5)
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.num_classes < 2:
            raise SynthSpecError("need at least 2 classes")
        if len(self.class_means) != self.num_classes or len(self.class_stds) != self.num_classes:
            raise SynthSpecError(f"class_means/class_stds need {self.num_classes} entries")
        lo, hi = self.radius_range
        if lo <= 0 or hi < lo:
            raise SynthSpecError(f"bad radius range {self.radius_range}")
        if 2 * hi + 1 > min(self.dims):
            raise SynthSpecError(f"radius {hi} does not fit inside volume {self.dims}")
        if self.organs_per_class[0] < 1 or self.organs_per_class[1] < self.organs_per_class[0]:
            raise SynthSpecError(f"bad organs_per_class {self.organs_per_class}")

    @classmethod
    def for_classes(cls, dims=(32, 32, 32), num_classes: int = 4, seed: int = 0, **kw) -> "SynthSpec":
        """Evenly spaced class intensities 0, 1, ..., J-1 with std 0.5."""
        kw.setdefault("class_means", tuple(float(j) for j in range(num_classes)))
        kw.setdefault("class_stds", (0.5,) * num_classes)
        if "radius_range" not in kw:
            hi = min(8.0, (min(dims) - 1) / 2)
            kw["radius_range"] = (min(3.0, hi), hi)
        return cls(dims=tuple(dims), num_classes=num_classes, seed=seed, **kw)


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    """Voxels whose integer coordinates satisfy sum(((x - c) / r)^2) <= 1."""
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def _draw_sample(spec: SynthSpec, rng: np.random.Generator, sid: str) -> VolumeSample:
    organs = []
    lo_n, hi_n = spec.organs_per_class
    for j in range(1, spec.num_classes):
        for _ in range(int(rng.integers(lo_n, hi_n + 1))):
            radii = tuple(float(r) for r in rng.uniform(*spec.radius_range, size=3))
            center = tuple(float(rng.uniform(r, n - 1 - r)) for r, n in zip(radii, spec.dims))
            organs.append({"class": j, "center": center, "radii": radii})
    order = rng.permutation(len(organs))
    organs = [organs[i] for i in order]
    labels = np.zeros(spec.dims, dtype=np.int64)
    for o in organs:
        labels[ellipsoid_mask(spec.dims, o["center"], o["radii"])] = o["class"]
    means = np.asarray(spec.class_means)[labels]
    stds = np.asarray(spec.class_stds)[labels]
    noise = rng.standard_normal((spec.channels,) + spec.dims)
    image = (means[None] + stds[None] * noise).astype(np.float32)
    return VolumeSample(image, labels, sid, {"organs": organs})


def generate_dataset(spec: SynthSpec, n: int) -> list[VolumeSample]:
    """``n`` samples; sample ``i`` depends only on (spec.seed, i)."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        out.append(_draw_sample(spec, rng, f"sample_{i:03d}"))
    return out


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-volume z-score with a 1e-8 std floor."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    return ((x - x.mean()) / max(std, 1e-8)).astype(np.asarray(image).dtype)


def train_val_split(samples: list, train_fraction: float = 0.8) -> tuple[list, list]:
    """Split by index: the first round(fraction * n) samples train, the rest validate."""
    k = int(round(train_fraction * len(samples)))
    return samples[:k], samples[k:]


# -- file format ---------------------------------------------------------

def encode_volume(sample: VolumeSample) -> bytes:
    C, H, W, D = sample.image.shape
    if sample.labels.min(initial=0) < 0 or sample.labels.max(initial=0) > 0xFFFF:
        raise ValueError("labels must fit in u16")
    head = VOLUME_MAGIC + struct.pack("<5I", VOLUME_VERSION, C, H, W, D)
    img = np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
    lab = np.ascontiguousarray(sample.labels, dtype="<u2").tobytes()
    return head + img + LABEL_MAGIC + lab


def decode_volume(buf: bytes, sid: str = "") -> VolumeSample:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} bytes", len(buf))
    if buf[:4] != VOLUME_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {VOLUME_MAGIC!r}", 0)
    version, C, H, W, D = struct.unpack_from("<5I", buf, 4)
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(C, H, W, D) < 1:
        raise FormatError(f"empty dimension in {(C, H, W, D)}", 8)
    n_img = C * H * W * D
    off = HEADER_SIZE
    end_img = off + 4 * n_img
    if len(buf) < end_img + 4:
        raise FormatError("truncated image payload", len(buf))
    image = np.frombuffer(buf, dtype="<f4", count=n_img, offset=off).reshape(C, H, W, D)
    if buf[end_img:end_img + 4] != LABEL_MAGIC:
        raise FormatError(f"bad label magic {buf[end_img:end_img + 4]!r}", end_img)
    off = end_img + 4
    n_lab = H * W * D
    if len(buf) != off + 2 * n_lab:
        raise FormatError(f"label payload is {len(buf) - off} bytes, expected {2 * n_lab}", len(buf))
    labels = np.frombuffer(buf, dtype="<u2", count=n_lab, offset=off).reshape(H, W, D)
    return VolumeSample(image.astype(np.float32), labels.astype(np.int64), sid)


def write_volume(path, sample: VolumeSample) -> None:
    Path(path).write_bytes(encode_volume(sample))


def read_volume(path) -> VolumeSample:
    path = Path(path)
    return decode_volume(path.read_bytes(), path.stem)


def write_dataset(directory, samples: list[VolumeSample]) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in samples:
        p = d / f"{s.id}.vvol"
        write_volume(p, s)
        paths.append(p)
    return paths


def read_dataset(directory) -> list[VolumeSample]:
    files = sorted(Path(directory).glob("*.vvol"))
    if not files:
        raise FileNotFoundError(f"no .vvol files in {directory}")
    return [read_volume(p) for p in files]
