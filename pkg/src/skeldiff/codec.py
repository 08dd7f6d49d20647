"""Lossless mapping between joint-coordinate sequences and square skeleton images.

A sequence of T frames x J joints x 3 coordinates becomes a J x T x 3 block
(rows = joints, columns = time), normalized per axis into [-1, 1] and placed
centered inside a zero-padded 32 x 32 x 3 grid.  The placement and the affine
normalization are stored in the image metadata so the inverse map is exact.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 32
SCALE_FLOOR = 1e-9


@dataclass
class JointSequence:
    """One action clip: frames of shape (T, J, 3) in meters, plus identity."""

    frames: np.ndarray
    label: int = 0
    subject_id: int = 0
    seq_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must have shape (T, J, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"need T >= 1 and J >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"sequence {self.seq_id!r} contains non-finite coordinates")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]


@dataclass
class NormParams:
    """Per-axis affine map: normalized = (coord - offset) / scale."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.offset)) and np.all(np.isfinite(self.scale))):
            raise ValueError("norm params must be finite")
        if np.any(self.scale <= 0):
            raise ValueError(f"scale must be strictly positive, got {self.scale}")

    def to_dict(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormParams":
        return cls(np.array(d["offset"]), np.array(d["scale"]))


@dataclass
class ImageMeta:
    """Placement + normalization metadata; everything decode needs."""

    row0: int
    num_joints: int
    col0: int
    num_cols: int
    norm: NormParams
    original_length: int

    def to_dict(self) -> dict:
        return {
            "content_rows": [self.row0, self.row0 + self.num_joints],
            "content_cols": [self.col0, self.col0 + self.num_cols],
            "norm": self.norm.to_dict(),
            "original_length": self.original_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageMeta":
        r0, r1 = d["content_rows"]
        c0, c1 = d["content_cols"]
        return cls(r0, r1 - r0, c0, c1 - c0, NormParams.from_dict(d["norm"]), d["original_length"])


@dataclass
class SkeletonImage:
    """H x W x 3 real grid; content block holds the encoded sequence, rest is zero."""

    pixels: np.ndarray
    meta: ImageMeta = field(repr=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must have shape (H, W, 3), got {self.pixels.shape}")


def fit_norm_params(dataset: list[JointSequence]) -> NormParams:
    """Per-axis midpoint/half-range over the whole dataset, so normalized coords lie in [-1, 1].

    A degenerate axis (zero range) gets the 1e-9 scale floor and a warning.
    """
    if not dataset:
        raise ValueError("cannot fit norm params on an empty dataset")
    coords = np.concatenate([seq.frames.reshape(-1, 3) for seq in dataset], axis=0)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    offset = (hi + lo) / 2.0
    scale = (hi - lo) / 2.0
    degenerate = scale < SCALE_FLOOR
    if np.any(degenerate):
        warnings.warn(
            f"degenerate axis range on axes {np.nonzero(degenerate)[0].tolist()}; "
            f"applying scale floor {SCALE_FLOOR}",
            stacklevel=2,
        )
        scale = np.where(degenerate, SCALE_FLOOR, scale)
    return NormParams(offset, scale)


def resample_time(seq: JointSequence, t_target: int) -> JointSequence:
    """Linearly resample to t_target frames at uniform times spanning [0, T-1].

    Endpoints are preserved exactly; a single-frame sequence is replicated.
    """
    if t_target < 2:
        raise ValueError(f"t_target must be >= 2, got {t_target}")
    t_seq = seq.num_frames
    if t_seq == 1:
        frames = np.repeat(seq.frames, t_target, axis=0)
        return JointSequence(frames, seq.label, seq.subject_id, seq.seq_id)
    positions = np.linspace(0.0, float(t_seq - 1), t_target)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, t_seq - 1)
    frac = (positions - lo)[:, None, None]
    frames = (1.0 - frac) * seq.frames[lo] + frac * seq.frames[hi]
    return JointSequence(frames, seq.label, seq.subject_id, seq.seq_id)


def encode(
    seq: JointSequence,
    params: NormParams,
    image_size: int = IMAGE_SIZE,
    original_length: int | None = None,
) -> SkeletonImage:
    """Normalize and place a J = T sequence centered in a zero image.

    Rows index joints, columns index time.  `original_length` records the
    pre-resampling frame count for callers that re-interpolate after decode.
    """
    t_seq, j = seq.num_frames, seq.num_joints
    if j > image_size:
        raise ValueError(f"J = {j} exceeds image size {image_size}; larger skeletons are not supported")
    if t_seq != j:
        raise ValueError(f"sequence must be resampled to T = J before encoding (T={t_seq}, J={j})")
    normalized = (seq.frames - params.offset) / params.scale  # (T, J, 3)
    pixels = np.zeros((image_size, image_size, 3), dtype=np.float64)
    row0 = (image_size - j) // 2
    col0 = (image_size - t_seq) // 2
    # transpose: image rows are joints, columns are time
    pixels[row0 : row0 + j, col0 : col0 + t_seq, :] = normalized.transpose(1, 0, 2)
    meta = ImageMeta(
        row0=row0,
        num_joints=j,
        col0=col0,
        num_cols=t_seq,
        norm=params,
        original_length=original_length if original_length is not None else t_seq,
    )
    return SkeletonImage(pixels, meta)


def decode(
    img: SkeletonImage,
    label: int = 0,
    subject_id: int = 0,
    seq_id: str = "",
) -> JointSequence:
    """Extract the content block and invert the normalization.

    The affine inverse is total: out-of-range pixels extrapolate, never clamp.
    """
    meta = img.meta
    h, w, _ = img.pixels.shape
    if meta.row0 < 0 or meta.col0 < 0 or meta.row0 + meta.num_joints > h or meta.col0 + meta.num_cols > w:
        raise ValueError(
            f"meta content block rows {meta.row0}:{meta.row0 + meta.num_joints} "
            f"cols {meta.col0}:{meta.col0 + meta.num_cols} does not fit pixel grid {h}x{w}"
        )
    block = img.pixels[meta.row0 : meta.row0 + meta.num_joints, meta.col0 : meta.col0 + meta.num_cols, :]
    frames = block.transpose(1, 0, 2) * meta.norm.scale + meta.norm.offset
    return JointSequence(frames, label=label, subject_id=subject_id, seq_id=seq_id)


def save_image(img: SkeletonImage, path) -> None:
    """Write one JSON header line with meta, then the raw little-endian float64 pixels."""
    header = dict(img.meta.to_dict())
    header["shape"] = list(img.pixels.shape)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(img.pixels, dtype="<f8").tobytes())


def load_image(path) -> SkeletonImage:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        shape = tuple(header["shape"])
        expected = int(np.prod(shape)) * 8
        buf = f.read()
    if len(buf) != expected:
        raise ValueError(f"{path}: pixel buffer has {len(buf)} bytes, expected {expected}")
    pixels = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return SkeletonImage(pixels, ImageMeta.from_dict(header))
