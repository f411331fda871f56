"""Feature datasets: the binary on-disk format and a deterministic toy set.

The artifact ingests precomputed time x frequency feature matrices; there
is no audio front end. Files are little-endian:

    magic "BFTR" | u32 version=1 | u32 count | u32 T | u32 F
    | u32 num_classes | count * (u32 label + T*F float32)
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

FEATURE_MAGIC = b"BFTR"
FEATURE_VERSION = 1


class FormatError(ValueError):
    """A file does not conform to one of the binary formats."""


@dataclass
class FeatureDataset:
    features: np.ndarray  # (count, T, F) float64
    labels: np.ndarray  # (count,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3 or len(self.labels) != len(self.features):
            raise ValueError("features must be (count, T, F) with matching labels")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def time_steps(self) -> int:
        return self.features.shape[1]

    @property
    def freq_bins(self) -> int:
        return self.features.shape[2]


_SPLIT_STREAMS = {"train": 0, "val": 1, "test": 2}


def gen_toy_dataset(
    seed: int,
    num_classes: int = 4,
    per_class: int = 200,
    time_steps: int = 32,
    freq_bins: int = 40,
    noise: float = 0.3,
    split: str = "train",
) -> FeatureDataset:
    """Deterministic band-pattern classification data.

    Class c is a Gaussian bump centered at frequency bin
    ``(c+1) * F / (num_classes+1)``, modulated by a smooth temporal
    envelope, plus Gaussian noise. Distinct splits draw from independent
    seeded streams, so train/test pairs never share noise.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    stream = _SPLIT_STREAMS.get(split, zlib.crc32(split.encode()))
    rng = np.random.default_rng([seed, stream])
    t = np.arange(time_steps)
    envelope = np.sin(np.pi * (t + 0.5) / time_steps)
    f = np.arange(freq_bins)
    sigma_f = freq_bins / 16.0
    feats, labels = [], []
    for c in range(num_classes):
        center = (c + 1) * freq_bins / (num_classes + 1)
        bump = np.exp(-((f - center) ** 2) / (2 * sigma_f**2))
        base = envelope[:, None] * bump[None, :]
        for _ in range(per_class):
            feats.append(base + noise * rng.standard_normal((time_steps, freq_bins)))
            labels.append(c)
    order = rng.permutation(len(labels))
    return FeatureDataset(
        features=np.asarray(feats)[order],
        labels=np.asarray(labels)[order],
        num_classes=num_classes,
        split=split,
    )


def save_features(path, ds: FeatureDataset) -> None:
    count, t, f = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIII", FEATURE_VERSION, count, t, f, ds.num_classes))
        for label, feat in zip(ds.labels, ds.features):
            fh.write(struct.pack("<I", int(label)))
            fh.write(feat.astype("<f4").tobytes())


def load_features(path, split: str = "train") -> FeatureDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature-file magic {blob[:4]!r}")
    if len(blob) < 24:
        raise FormatError("truncated feature-file header")
    version, count, t, f, num_classes = struct.unpack("<IIIII", blob[4:24])
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}")
    frame = t * f
    expected = 24 + count * (4 + 4 * frame)
    if len(blob) != expected:
        raise FormatError(
            f"feature payload length {len(blob)} does not match header ({expected})"
        )
    labels = np.empty(count, dtype=np.int64)
    feats = np.empty((count, t, f), dtype=np.float64)
    off = 24
    for i in range(count):
        (labels[i],) = struct.unpack_from("<I", blob, off)
        off += 4
        feats[i] = (
            np.frombuffer(blob, dtype="<f4", count=frame, offset=off)
            .astype(np.float64)
            .reshape(t, f)
        )
        off += 4 * frame
    if count and labels.max() >= num_classes:
        raise FormatError("label out of range for declared num_classes")
    return FeatureDataset(feats, labels, num_classes, split=split)
