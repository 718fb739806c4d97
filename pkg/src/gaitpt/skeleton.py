"""Pose and gait-sequence data model, anatomy-driven merge hierarchy,
partitioning schemes, and sequence preprocessing.

Joint indices follow the 17-keypoint COCO convention (0 nose, 1/2 eyes,
3/4 ears, 5/6 shoulders, 7/8 elbows, 9/10 wrists, 11/12 hips, 13/14 knees,
15/16 ankles) plus index 17, a duplicated nose added at load time so the
head group and the four limbs tile all 18 joints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, DataFormatError, InputError

JOINTS = 18
RAW_JOINTS = 17
NOSE = 0
DUPLICATE_NOSE = 17


class Condition(str, Enum):
    """Walking condition: normal, carrying a bag, wearing a coat."""

    NM = "NM"
    BG = "BG"
    CL = "CL"
    OTHER = "OTHER"


@dataclass(frozen=True)
class AnatomyTable:
    """Joint-index membership of the head and the four limbs.

    Groups are disjoint and tile {0..17}; the head absorbs the duplicated
    nose so counts come out 6+3+3+3+3. Hips belong to the legs.
    """

    head: tuple[int, ...] = (0, 1, 2, 3, 4, 17)
    left_arm: tuple[int, ...] = (5, 7, 9)
    right_arm: tuple[int, ...] = (6, 8, 10)
    left_leg: tuple[int, ...] = (11, 13, 15)
    right_leg: tuple[int, ...] = (12, 14, 16)

    def __post_init__(self):
        members = [j for group in self.limb_groups() for j in group]
        if sorted(members) != list(range(JOINTS)):
            raise ConfigError("anatomy groups must be disjoint and tile all 18 joints")

    def limb_groups(self) -> tuple[tuple[int, ...], ...]:
        """Ordered joint groups producing the 5 limb tokens."""
        return (self.head, self.left_arm, self.right_arm, self.left_leg, self.right_leg)


ANATOMY = AnatomyTable()

# Limb-token indices used by the partitioning schemes.
HEAD_TOKEN, L_ARM_TOKEN, R_ARM_TOKEN, L_LEG_TOKEN, R_LEG_TOKEN = range(5)


class PartitionScheme(Enum):
    """How the 5 limb tokens are grouped going into the limb-group level.

    HUL      head / upper body (both arms) / lower body (both legs)
    HLR      head / left side / right side
    OPPOSITE head / left arm + right leg / right arm + left leg
    ALL      the union of the distinct groups above (head deduplicated),
             which is an overlapping cover of the limbs, not a partition
    """

    HUL = "HUL"
    HLR = "HLR"
    OPPOSITE = "OPPOSITE"
    ALL = "ALL"

    @property
    def stage3_groups(self) -> tuple[tuple[int, ...], ...]:
        return _SCHEME_GROUPS[self]


_SCHEME_GROUPS = {
    PartitionScheme.HUL: ((HEAD_TOKEN,), (L_ARM_TOKEN, R_ARM_TOKEN), (L_LEG_TOKEN, R_LEG_TOKEN)),
    PartitionScheme.HLR: ((HEAD_TOKEN,), (L_ARM_TOKEN, L_LEG_TOKEN), (R_ARM_TOKEN, R_LEG_TOKEN)),
    PartitionScheme.OPPOSITE: ((HEAD_TOKEN,), (L_ARM_TOKEN, R_LEG_TOKEN), (R_ARM_TOKEN, L_LEG_TOKEN)),
}
_SCHEME_GROUPS[PartitionScheme.ALL] = _SCHEME_GROUPS[PartitionScheme.HUL] + tuple(
    g
    for scheme in (PartitionScheme.HLR, PartitionScheme.OPPOSITE)
    for g in _SCHEME_GROUPS[scheme]
    if g != (HEAD_TOKEN,)
)


@dataclass(frozen=True)
class Pose:
    """One 18-joint 2D skeleton in normalized image units."""

    joints: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.joints, dtype=np.float64)
        if arr.shape != (JOINTS, 2):
            raise DataFormatError(f"a pose needs shape (18, 2), got {arr.shape}")
        object.__setattr__(self, "joints", arr)


@dataclass(frozen=True)
class GaitSequence:
    """A labeled time series of poses: frames has shape (n, 18, 2).

    `key` carries the on-disk record id when the sequence was loaded from a
    file; evaluation falls back to subject/condition/view/session otherwise.
    """

    subject_id: str
    condition: Condition
    view: int
    session: int
    frames: np.ndarray = field(repr=False)
    key: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1:] != (JOINTS, 2):
            raise DataFormatError(
                f"sequence frames need shape (n, 18, 2) with n >= 1, got {arr.shape}"
            )
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "condition", Condition(self.condition))

    def __len__(self) -> int:
        return self.frames.shape[0]


def duplicate_nose(raw17) -> Pose:
    """Extend a 17-joint COCO pose to 18 joints by copying the nose."""
    arr = np.asarray(raw17, dtype=np.float64)
    if arr.shape != (RAW_JOINTS, 2):
        raise DataFormatError(f"expected a 17-joint pose of shape (17, 2), got {arr.shape}")
    return Pose(np.concatenate([arr, arr[NOSE : NOSE + 1]], axis=0))


def normalize_sequence(seq: GaitSequence, frame_width: float) -> GaitSequence:
    """Divide both coordinates of every joint by the frame width."""
    if frame_width <= 0:
        raise InputError(f"frame_width must be > 0, got {frame_width}")
    return replace(seq, frames=seq.frames / float(frame_width))


def filter_min_length(seqs, min_frames: int):
    """Keep exactly the sequences with at least `min_frames` frames."""
    if min_frames < 1:
        raise InputError(f"min_frames must be >= 1, got {min_frames}")
    return [s for s in seqs if len(s) >= min_frames]


def sample_window(
    seq: GaitSequence,
    length: int,
    mode: str = "eval_head",
    rng: np.random.Generator | None = None,
) -> GaitSequence:
    """Cut a fixed-length contiguous window of frames.

    `eval_head` takes the first `length` frames; `train_random` draws a
    uniform random start from the supplied generator. Sequences shorter
    than `length` are an error; filter them out first.
    """
    n = len(seq)
    if n < length:
        raise InputError(f"sequence has {n} frames, shorter than window {length}")
    if mode == "eval_head":
        start = 0
    elif mode == "train_random":
        if rng is None:
            raise ConfigError("train_random windows need a seeded Generator")
        start = int(rng.integers(0, n - length + 1))
    else:
        raise ConfigError(f"unknown window mode {mode!r}")
    return replace(seq, frames=seq.frames[start : start + length])


def merge_plan(
    stage: int,
    scheme: PartitionScheme = PartitionScheme.HUL,
    anatomy: AnatomyTable = ANATOMY,
) -> tuple[tuple[int, ...], ...]:
    """Token groups merged when leaving `stage` (1, 2, or 3).

    Stage 1 merges the 18 joints into the 5 limb tokens, stage 2 merges
    limbs per `scheme`, stage 3 merges everything into one body token.
    """
    if stage == 1:
        return anatomy.limb_groups()
    if stage == 2:
        return scheme.stage3_groups
    if stage == 3:
        return (tuple(range(len(scheme.stage3_groups))),)
    raise ConfigError(f"no merge leaves stage {stage}; valid stages are 1-3")


def token_counts(scheme: PartitionScheme = PartitionScheme.HUL) -> tuple[int, int, int, int]:
    """Token count entering each of the four stages."""
    return (JOINTS, 5, len(scheme.stage3_groups), 1)
