"""On-disk formats: JSONL pose-sequence records, dataset manifests, binary
model checkpoints, and run configuration files.

Records store 17 joints (the pose-estimator-native count); the duplicated
nose and width normalization are applied at load. Checkpoints are a JSON
header line followed by a raw little-endian parameter payload in header
order, guarded by a length check and a CRC32.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, IntegrityError
from .model import GaitPTConfig, GaitPTModel
from .skeleton import RAW_JOINTS, Condition, GaitSequence, normalize_sequence
from .training import TrainConfig

CHECKPOINT_VERSION = 1

_RECORD_KEYS = ("key", "subject_id", "condition", "view", "session", "frame_width", "frames")
_OPTIONAL_RECORD_KEYS = ("session",)


@dataclass(frozen=True)
class SequenceRecord:
    """One stored walking sequence: raw 17-joint coordinates plus labels."""

    key: str
    subject_id: str
    condition: str
    view: int
    session: int
    frame_width: float
    frames: np.ndarray  # (n, 17, 2), unnormalized

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1:] != (RAW_JOINTS, 2):
            raise DataFormatError(
                f"record {self.key!r}: frames need shape (n, 17, 2) with n >= 1, got {arr.shape}"
            )
        if self.frame_width <= 0:
            raise DataFormatError(f"record {self.key!r}: frame_width must be > 0")
        object.__setattr__(self, "frames", arr)


def sequence_to_record(seq: GaitSequence, frame_width: float = 1.0) -> SequenceRecord:
    """Store a normalized in-memory sequence; joint 17 (the duplicated nose)
    is dropped and coordinates are scaled back out by `frame_width`."""
    frames = seq.frames[:, :RAW_JOINTS]
    if frame_width != 1.0:
        frames = frames * frame_width
    return SequenceRecord(
        key=seq.key or f"{seq.subject_id}-{seq.condition.value}-v{seq.view:03d}-{seq.session:02d}",
        subject_id=seq.subject_id,
        condition=seq.condition.value,
        view=seq.view,
        session=seq.session,
        frame_width=float(frame_width),
        frames=frames,
    )


def record_to_sequence(rec: SequenceRecord) -> GaitSequence:
    """Apply nose duplication and width normalization."""
    frames18 = np.concatenate([rec.frames, rec.frames[:, :1]], axis=1)
    seq = GaitSequence(
        subject_id=rec.subject_id,
        condition=Condition(rec.condition),
        view=rec.view,
        session=rec.session,
        frames=frames18,
        key=rec.key,
    )
    return normalize_sequence(seq, rec.frame_width)


def write_records(records, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for rec in records:
            obj = {
                "key": rec.key,
                "subject_id": rec.subject_id,
                "condition": rec.condition,
                "view": rec.view,
                "session": rec.session,
                "frame_width": rec.frame_width,
                "frames": rec.frames.tolist(),
            }
            fh.write(json.dumps(obj) + "\n")
    return path


def read_records(path) -> list[SequenceRecord]:
    """Parse a JSONL record file; every problem is reported with its line
    (or byte offset, for non-text files)."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataFormatError(f"{path}: not UTF-8 text (byte offset {e.start})") from e
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path} line {lineno}: invalid JSON ({e.msg})") from e
        if not isinstance(obj, dict):
            raise DataFormatError(f"{path} line {lineno}: expected a JSON object")
        unknown = set(obj) - set(_RECORD_KEYS)
        if unknown:
            raise DataFormatError(f"{path} line {lineno}: unknown keys {sorted(unknown)}")
        missing = set(_RECORD_KEYS) - set(_OPTIONAL_RECORD_KEYS) - set(obj)
        if missing:
            raise DataFormatError(f"{path} line {lineno}: missing keys {sorted(missing)}")
        try:
            frames = np.asarray(obj["frames"], dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise DataFormatError(f"{path} line {lineno}: frames are not numeric") from e
        if frames.ndim != 3 or frames.shape[1:] != (RAW_JOINTS, 2):
            raise DataFormatError(
                f"{path} line {lineno}: frames need shape (n, 17, 2), got {frames.shape}"
            )
        try:
            records.append(
                SequenceRecord(
                    key=str(obj["key"]),
                    subject_id=str(obj["subject_id"]),
                    condition=str(obj["condition"]),
                    view=int(obj["view"]),
                    session=int(obj.get("session", 1)),
                    frame_width=float(obj["frame_width"]),
                    frames=frames,
                )
            )
        except (DataFormatError, ValueError, TypeError) as e:
            raise DataFormatError(f"{path} line {lineno}: {e}") from e
    return records


def read_sequences(path) -> list[GaitSequence]:
    """Load validated, normalized 18-joint sequences."""
    out = []
    for rec in read_records(path):
        try:
            out.append(record_to_sequence(rec))
        except (DataFormatError, ValueError) as e:
            raise DataFormatError(f"{path}: record {rec.key!r}: {e}") from e
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Manifest:
    """Dataset manifest: split record files and their sequence keys."""

    dataset_name: str
    seed: int
    files: dict[str, str]          # split name -> record file, relative
    splits: dict[str, list[str]]   # split name -> sequence keys
    generator: dict | None = None

    def __post_init__(self):
        seen: dict[str, str] = {}
        for split, keys in self.splits.items():
            for k in keys:
                if k in seen:
                    raise DataFormatError(
                        f"manifest: key {k!r} appears in both {seen[k]!r} and {split!r}"
                    )
                seen[k] = split


@dataclass
class DatasetSplits:
    """Loaded train/gallery/probe sequences of one dataset."""

    train: list[GaitSequence] = field(default_factory=list)
    gallery: list[GaitSequence] = field(default_factory=list)
    probe: list[GaitSequence] = field(default_factory=list)


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    obj = {
        "dataset_name": manifest.dataset_name,
        "seed": manifest.seed,
        "files": manifest.files,
        "splits": manifest.splits,
    }
    if manifest.generator is not None:
        obj["generator"] = manifest.generator
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    for key in ("dataset_name", "seed", "files", "splits"):
        if key not in obj:
            raise DataFormatError(f"{path}: manifest is missing {key!r}")
    manifest = Manifest(
        dataset_name=obj["dataset_name"],
        seed=int(obj["seed"]),
        files=dict(obj["files"]),
        splits={k: list(v) for k, v in obj["splits"].items()},
        generator=obj.get("generator"),
    )
    for split, fname in manifest.files.items():
        if not (path.parent / fname).exists():
            raise DataFormatError(f"{path}: split {split!r} references missing file {fname!r}")
    return manifest


def load_split_sequences(manifest_path) -> DatasetSplits:
    """Load every split's sequences, checking keys against the manifest."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    splits = DatasetSplits()
    for split in ("train", "gallery", "probe"):
        if split not in manifest.files:
            continue
        seqs = read_sequences(manifest_path.parent / manifest.files[split])
        expected = set(manifest.splits.get(split, []))
        actual = {s.key for s in seqs}
        if expected != actual:
            raise DataFormatError(
                f"{manifest_path}: split {split!r} keys disagree with the record file "
                f"(missing {sorted(expected - actual)[:3]}, extra {sorted(actual - expected)[:3]})"
            )
        setattr(splits, split, seqs)
    return splits


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: GaitPTModel, path) -> Path:
    path = Path(path)
    names = list(model.params)
    payload = b"".join(
        model.params[n].value.data.astype("<f4" if model.config.dtype == "float32" else "<f8").tobytes()
        for n in names
    )
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": model.config.dtype,
        "model_config": model.config.to_dict(),
        "params": [[n, list(model.params[n].value.shape)] for n in names],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)
    return path


def load_checkpoint(path, expected_config: GaitPTConfig | None = None) -> GaitPTModel:
    """Rebuild a model bitwise from a checkpoint file.

    Rejects version mismatches, truncated or corrupted payloads, and (when
    `expected_config` is given) configs that disagree with the caller's.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: unreadable checkpoint header") from e
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: format version {version} != supported {CHECKPOINT_VERSION}")
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(
            f"{path}: payload is {len(payload)} bytes, header promises {header['payload_bytes']}"
        )
    if zlib.crc32(payload) != header["crc32"]:
        raise IntegrityError(f"{path}: payload CRC mismatch, file is corrupted")

    try:
        config = GaitPTConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ConfigError) as e:
        raise DataFormatError(f"{path}: invalid model config in header: {e}") from e
    if expected_config is not None and config != expected_config:
        raise ConfigError(
            f"{path}: checkpoint config {config.to_dict()} does not match requested {expected_config.to_dict()}"
        )

    model = GaitPTModel(config, seed=0)
    dtype = np.dtype("<f4" if header["dtype"] == "float32" else "<f8")
    header_names = [n for n, _ in header["params"]]
    if header_names != list(model.params):
        raise IntegrityError(f"{path}: parameter table does not match the config's parameters")
    offset = 0
    for name, shape in header["params"]:
        p = model.params[name]
        if tuple(shape) != p.value.shape:
            raise IntegrityError(f"{path}: parameter {name} has shape {shape}, expected {p.value.shape}")
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        chunk = payload[offset : offset + nbytes]
        arr = np.frombuffer(chunk, dtype=dtype).reshape(shape)
        p.value.data[...] = arr
        offset += nbytes
    return model


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def write_embeddings(embset, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for i in range(len(embset)):
            obj = {
                "key": embset.keys[i],
                "subject_id": embset.subject_ids[i],
                "condition": embset.conditions[i].value,
                "view": int(embset.views[i]),
                "session": int(embset.sessions[i]),
                "embedding": embset.embeddings[i].tolist(),
            }
            fh.write(json.dumps(obj) + "\n")
    return path


def read_embeddings(path):
    from .evaluation import EmbeddingSet

    path = Path(path)
    keys, subjects, conditions, views, sessions, vectors = [], [], [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path} line {lineno}: invalid JSON ({e.msg})") from e
            try:
                keys.append(str(obj["key"]))
                subjects.append(str(obj["subject_id"]))
                conditions.append(Condition(obj["condition"]))
                views.append(int(obj["view"]))
                sessions.append(int(obj.get("session", 1)))
                vectors.append(np.asarray(obj["embedding"], dtype=np.float64))
            except (KeyError, ValueError, TypeError) as e:
                raise DataFormatError(f"{path} line {lineno}: {e}") from e
    if not vectors:
        raise DataFormatError(f"{path}: no embedding rows")
    return EmbeddingSet(
        keys=tuple(keys),
        subject_ids=tuple(subjects),
        conditions=tuple(conditions),
        views=np.array(views),
        sessions=np.array(sessions),
        embeddings=np.stack(vectors),
    )


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """A validated {model, train} configuration pair."""

    model: GaitPTConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}


_MODEL_KEYS = {
    "dims", "blocks", "heads", "scheme", "sequence_length", "output_dim",
    "ffn_multiplier", "spatial_positional", "temporal_positional", "dtype",
    "active_stages",
}
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def config_from_dict(obj: dict) -> RunConfig:
    """Apply the reference defaults, then overlay `obj`; unknown keys and
    out-of-range values are rejected with their dotted path."""
    if not isinstance(obj, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(obj) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
    model_obj = obj.get("model", {})
    train_obj = obj.get("train", {})
    for section, allowed, got in (("model", _MODEL_KEYS, model_obj), ("train", _TRAIN_KEYS, train_obj)):
        if not isinstance(got, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key in set(got) - allowed:
            raise ConfigError(f"unknown config key: {section}.{key}")
    try:
        model_cfg = GaitPTConfig.build(**model_obj)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model config: {e}") from e
    try:
        train_cfg = TrainConfig(**train_obj)
    except TypeError as e:
        raise ConfigError(f"train config: {e}") from e
    return RunConfig(model=model_cfg, train=train_cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    return config_from_dict(obj)
