"""Dataset container, JSONL persistence, a procedural toy action corpus, and
the replacement / incremental augmentation mixers.

The toy generator stands in for motion-capture corpora at desk scale: a fixed
16-joint kinematic tree performing parametric sinusoidal actions (raise-arm,
kick, wave, squat) with per-sample random phase/amplitude and Gaussian jitter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .codec import JointSequence

# canonical 16-joint tree; parent index < child index so prefixes stay valid trees
#  0 pelvis, 1 spine, 2 chest, 3 head,
#  4/5/6 left shoulder/elbow/wrist, 7/8/9 right shoulder/elbow/wrist,
#  10/11/12 left hip/knee/ankle, 13/14/15 right hip/knee/ankle
TOPOLOGY_16 = [
    (0, 1), (1, 2), (2, 3),
    (2, 4), (4, 5), (5, 6),
    (2, 7), (7, 8), (8, 9),
    (0, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15),
]

_BASE_POSE_16 = np.array(
    [
        [0.00, 0.00, 0.90],   # pelvis
        [0.00, 0.00, 1.15],   # spine
        [0.00, 0.00, 1.40],   # chest
        [0.00, 0.00, 1.65],   # head
        [0.00, 0.20, 1.40],   # l shoulder
        [0.00, 0.45, 1.38],   # l elbow
        [0.00, 0.70, 1.36],   # l wrist
        [0.00, -0.20, 1.40],  # r shoulder
        [0.00, -0.45, 1.38],  # r elbow
        [0.00, -0.70, 1.36],  # r wrist
        [0.00, 0.10, 0.90],   # l hip
        [0.02, 0.10, 0.48],   # l knee
        [0.04, 0.10, 0.05],   # l ankle
        [0.00, -0.10, 0.90],  # r hip
        [0.02, -0.10, 0.48],  # r knee
        [0.04, -0.10, 0.05],  # r ankle
    ],
    dtype=np.float64,
)

ARM_CHAIN = [7, 8, 9]
LEG_CHAIN = [13, 14, 15]

# template: (name, moving joints, per-joint weights, direction, amplitude m, base frequency)
_TEMPLATES = [
    ("raise_arm", [7, 8, 9], [0.15, 0.55, 1.0], np.array([0.25, 0.0, 1.0]), 0.40, 1.0),
    ("kick", [13, 14, 15], [0.15, 0.55, 1.0], np.array([1.0, 0.0, 0.35]), 0.50, 1.0),
    ("wave", [5, 6], [0.45, 1.0], np.array([0.0, 1.0, 0.15]), 0.25, 3.0),
    ("squat", list(range(10)) + [11, 14], [1.0] * 10 + [0.6, 0.6], np.array([0.0, 0.0, -1.0]), 0.30, 1.0),
]

PROVENANCE_KINDS = ("real", "synthetic", "mixed")
NUM_TOY_SUBJECTS = 10

_DATASET_FORMAT = "skeldiff-dataset-v1"


@dataclass
class Dataset:
    items: list[JointSequence]
    num_classes: int
    topology: list[tuple[int, int]] = field(default_factory=lambda: list(TOPOLOGY_16))
    provenance: str = "real"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.provenance not in PROVENANCE_KINDS:
            raise ValueError(f"provenance must be one of {PROVENANCE_KINDS}, got {self.provenance!r}")
        self.topology = [(int(p), int(c)) for p, c in self.topology]
        joints = {seq.num_joints for seq in self.items}
        if len(joints) > 1:
            raise ValueError(f"all items must share J, found {sorted(joints)}")
        if self.items:
            j = self.items[0].num_joints
            for p, c in self.topology:
                if not (0 <= p < j and 0 <= c < j):
                    raise ValueError(f"topology edge ({p}, {c}) references joints outside 0..{j - 1}")
        for seq in self.items:
            if not 0 <= seq.label < self.num_classes:
                raise ValueError(f"label {seq.label} of {seq.seq_id!r} out of range for K={self.num_classes}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_joints(self) -> int:
        if not self.items:
            raise ValueError("empty dataset has no joint count")
        return self.items[0].num_joints

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=int)
        for seq in self.items:
            counts[seq.label] += 1
        return counts

    def by_class(self) -> dict[int, list[JointSequence]]:
        out: dict[int, list[JointSequence]] = {k: [] for k in range(self.num_classes)}
        for seq in self.items:
            out[seq.label].append(seq)
        return out


@dataclass
class ToyGenConfig:
    num_classes: int = 4
    samples_per_class: int = 10
    num_joints: int = 16
    seq_length: int = 16
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples_per_class < 1:
            raise ValueError("need at least 1 sample per class")
        if self.num_joints != self.seq_length:
            raise ValueError(
                f"codec needs J = T, got J={self.num_joints}, T={self.seq_length}"
            )
        if not 16 <= self.num_joints <= 32:
            raise ValueError(f"toy skeleton supports 16..32 joints, got {self.num_joints}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def _toy_skeleton(num_joints: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Base pose and topology, extending past 16 joints with small limb extensions."""
    pose = [row for row in _BASE_POSE_16]
    topology = list(TOPOLOGY_16)
    tips = [6, 9, 12, 15]  # wrists and ankles take the extra joints round-robin
    for j in range(16, num_joints):
        parent = tips[(j - 16) % len(tips)]
        offset = np.array([0.05, 0.0, -0.03]) * (1 + (j - 16) // len(tips))
        pose.append(pose[parent] + offset)
        topology.append((parent, j))
        tips[(j - 16) % len(tips)] = j
    return np.array(pose), topology


def gen_toy(cfg: ToyGenConfig) -> Dataset:
    """Deterministic procedural corpus: K sinusoidal action classes on the toy skeleton.

    Classes beyond the four base templates reuse them at higher frequencies.
    Subjects are assigned round-robin over 10 pseudo-performers, each with a
    slight global body-scale difference so cross-subject splits are meaningful.
    """
    base_pose, topology = _toy_skeleton(cfg.num_joints)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    tau = np.linspace(0.0, 1.0, cfg.seq_length)
    items: list[JointSequence] = []
    index = 0
    for label in range(cfg.num_classes):
        name, joints, weights, direction, amplitude, base_freq = _TEMPLATES[label % len(_TEMPLATES)]
        freq = base_freq * (1 + label // len(_TEMPLATES))
        for i in range(cfg.samples_per_class):
            subject = index % NUM_TOY_SUBJECTS
            body_scale = 1.0 + 0.03 * (subject - (NUM_TOY_SUBJECTS - 1) / 2.0) / (NUM_TOY_SUBJECTS - 1)
            amp = amplitude * rng.uniform(0.7, 1.3)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            f = freq * rng.uniform(0.9, 1.1)
            frames = np.tile(base_pose * body_scale, (cfg.seq_length, 1, 1))
            motion = amp * np.sin(2.0 * math.pi * f * tau + phase)  # (T,)
            for j, w in zip(joints, weights):
                frames[:, j, :] += np.outer(w * motion, direction)
            if cfg.noise_std > 0:
                frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
            items.append(
                JointSequence(
                    frames,
                    label=label,
                    subject_id=subject,
                    seq_id=f"toy-{name}-{label}-{i:04d}",
                )
            )
            index += 1
    return Dataset(items, num_classes=cfg.num_classes, topology=topology, provenance="real")


def save_jsonl(ds: Dataset, path) -> None:
    """One header line (format, K, topology, provenance), then one JSON object per item."""
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "format": _DATASET_FORMAT,
            "num_classes": ds.num_classes,
            "topology": [list(edge) for edge in ds.topology],
            "provenance": ds.provenance,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for seq in ds.items:
            record = {
                "seq_id": seq.seq_id,
                "label": seq.label,
                "subject_id": seq.subject_id,
                "num_frames": seq.num_frames,
                "num_joints": seq.num_joints,
                "coords": seq.frames.reshape(-1).tolist(),
            }
            f.write(json.dumps(record) + "\n")


def load_jsonl(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        header_line = f.readline()
        if not header_line.strip():
            raise ValueError(f"{path}: missing header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: malformed header line: {e}") from e
        if header.get("format") != _DATASET_FORMAT:
            raise ValueError(f"{path}: unknown format {header.get('format')!r}")
        items = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed record: {e}") from e
            t, j = rec["num_frames"], rec["num_joints"]
            coords = np.asarray(rec["coords"], dtype=np.float64)
            if coords.size != t * j * 3:
                raise ValueError(
                    f"{path}:{lineno}: coords length {coords.size} != num_frames*num_joints*3 = {t * j * 3}"
                )
            items.append(
                JointSequence(
                    coords.reshape(t, j, 3),
                    label=int(rec["label"]),
                    subject_id=int(rec["subject_id"]),
                    seq_id=str(rec["seq_id"]),
                )
            )
    return Dataset(
        items,
        num_classes=int(header["num_classes"]),
        topology=[tuple(e) for e in header["topology"]],
        provenance=header.get("provenance", "real"),
    )


def split_by_subject(ds: Dataset, eval_subjects: set[int]) -> tuple[Dataset, Dataset]:
    """Partition by subject_id: (train, eval).  Union is ds, intersection empty."""
    if not eval_subjects:
        raise ValueError("eval_subjects must be non-empty")
    eval_subjects = {int(s) for s in eval_subjects}
    train_items = [s for s in ds.items if s.subject_id not in eval_subjects]
    eval_items = [s for s in ds.items if s.subject_id in eval_subjects]
    if not train_items:
        raise ValueError("all subjects assigned to the eval set; training split would be empty")
    make = lambda items: Dataset(items, ds.num_classes, ds.topology, ds.provenance)
    return make(train_items), make(eval_items)


def _round_count(p: float, n: int) -> int:
    # nearest integer, half rounds up
    return int(math.floor(p * n + 0.5))


def _check_mixable(real: Dataset, synth: Dataset) -> None:
    if real.num_classes != synth.num_classes:
        raise ValueError(f"class count mismatch: real K={real.num_classes}, synth K={synth.num_classes}")
    if real.items and synth.items and real.num_joints != synth.num_joints:
        raise ValueError(f"joint count mismatch: real J={real.num_joints}, synth J={synth.num_joints}")


def mix_replace(real: Dataset, synth: Dataset, p: float, seed: int) -> Dataset:
    """Replace round(p * n_c) real items per class with synthetic ones, in place.

    Size and per-class counts are preserved; the choice of replaced real items
    and of the synthetic stand-ins is uniform under the seed.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"replacement proportion must be in [0, 1], got {p}")
    _check_mixable(real, synth)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA6)))
    items = list(real.items)
    by_class_positions = {k: [i for i, s in enumerate(items) if s.label == k] for k in range(real.num_classes)}
    synth_pool = synth.by_class()
    replaced = 0
    for k in range(real.num_classes):
        positions = by_class_positions[k]
        want = _round_count(p, len(positions))
        if want == 0:
            continue
        pool = synth_pool.get(k, [])
        if len(pool) < want:
            raise ValueError(
                f"synthetic pool for class {k} has {len(pool)} items, need {want} to replace"
            )
        chosen_pos = rng.choice(len(positions), size=want, replace=False)
        chosen_synth = rng.choice(len(pool), size=want, replace=False)
        for pos_idx, syn_idx in zip(chosen_pos, chosen_synth):
            items[positions[pos_idx]] = pool[syn_idx]
        replaced += want
    provenance = real.provenance if replaced == 0 else "mixed"
    return Dataset(items, real.num_classes, real.topology, provenance)


def mix_add(real: Dataset, synth: Dataset, p: float, seed: int) -> Dataset:
    """Append round(p * n_c) synthetic items per class; real items untouched."""
    if p < 0:
        raise ValueError(f"additive proportion must be >= 0, got {p}")
    _check_mixable(real, synth)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xAD)))
    counts = real.class_counts()
    synth_pool = synth.by_class()
    extra: list[JointSequence] = []
    for k in range(real.num_classes):
        want = _round_count(p, int(counts[k]))
        if want == 0:
            continue
        pool = synth_pool.get(k, [])
        if len(pool) < want:
            raise ValueError(f"synthetic pool for class {k} has {len(pool)} items, need {want} to add")
        chosen = rng.choice(len(pool), size=want, replace=False)
        extra.extend(pool[i] for i in chosen)
    provenance = real.provenance if not extra else "mixed"
    return Dataset(list(real.items) + extra, real.num_classes, real.topology, provenance)
