"""Clip records, train/val/test splits, and the on-disk dataset format.

A dataset directory holds:

    manifest.jsonl          one JSON record per clip
    split.json              train/val/test clip-id lists + identity count
    blobs/<clip_id>.<modality>.f32

Each blob is raw little-endian float32: all frame vectors back to back
(frame-major), followed by one quality float per frame. A manifest
record declares, per modality, the blob path, frame count, and vector
dimension, so raw dimensions may differ between modalities and between
datasets.

Identity labels are dense indices 0..C-1. Clips whose person is outside
the training vocabulary (distractors) carry the sentinel ``DISTRACTOR``
(-1); they may appear in val/test only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

MODALITIES = ("face", "head", "body", "audio")

DISTRACTOR = -1

MIN_DURATION_S = 1.0
MAX_DURATION_S = 30.0


class DatasetError(ValueError):
    """Malformed manifest, blob, or split."""


@dataclass
class FrameTrack:
    """Per-modality frame-embedding sequence with one quality per frame."""

    vectors: np.ndarray   # (frames, dim) float64
    qualities: np.ndarray  # (frames,) float64, >= 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.qualities = np.asarray(self.qualities, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DatasetError("track vectors must be 2-d (frames, dim)")
        if self.qualities.shape != (self.vectors.shape[0],):
            raise DatasetError("one quality score per frame required")
        if not np.all(np.isfinite(self.vectors)):
            raise DatasetError("track vectors contain non-finite entries")
        if not np.all(np.isfinite(self.qualities)) or np.any(self.qualities < 0):
            raise DatasetError("quality scores must be finite and >= 0")

    @property
    def n_frames(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass
class ClipRecord:
    """One video clip: label, duration, and up to one track per modality."""

    clip_id: str
    identity: int           # 0..C-1, or DISTRACTOR
    duration_s: float
    tracks: dict = field(default_factory=dict)  # modality -> FrameTrack

    def __post_init__(self):
        if not (MIN_DURATION_S <= self.duration_s <= MAX_DURATION_S):
            raise DatasetError(
                f"clip {self.clip_id!r}: duration {self.duration_s} s outside "
                f"[{MIN_DURATION_S}, {MAX_DURATION_S}] (sub-second and over-30 s "
                f"clips are excluded)")
        for mod in self.tracks:
            if mod not in MODALITIES:
                raise DatasetError(f"clip {self.clip_id!r}: unknown modality {mod!r}")

    def track(self, modality):
        """FrameTrack for `modality`, or None when absent."""
        return self.tracks.get(modality)


@dataclass
class DatasetSplit:
    """Disjoint train/val/test clip-id lists over a C-identity vocabulary."""

    num_identities: int
    train: list
    val: list
    test: list

    def validate(self, clips_by_id=None):
        parts = [set(self.train), set(self.val), set(self.test)]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise DatasetError("split lists are not disjoint")
        if clips_by_id is not None:
            for cid in self.train:
                clip = clips_by_id.get(cid)
                if clip is None:
                    raise DatasetError(f"split references unknown clip {cid!r}")
                if clip.identity == DISTRACTOR:
                    raise DatasetError(f"train split contains distractor clip {cid!r}")
            for cid in list(self.val) + list(self.test):
                if cid not in clips_by_id:
                    raise DatasetError(f"split references unknown clip {cid!r}")
        return self


def _blob_name(clip_id, modality):
    return f"{clip_id}.{modality}.f32"


def write_dataset(clips, split, out_dir):
    """Write clips + split to `out_dir` in the manifest/blob layout.

    Vectors and qualities are stored as little-endian float32; the writer
    is byte-deterministic for identical inputs.
    """
    os.makedirs(out_dir, exist_ok=True)
    blob_dir = os.path.join(out_dir, "blobs")
    os.makedirs(blob_dir, exist_ok=True)

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    try:
        with open(manifest_path, "w", encoding="utf-8") as mf:
            for clip in clips:
                mods = {}
                for mod in MODALITIES:
                    tr = clip.tracks.get(mod)
                    if tr is None or tr.n_frames == 0:
                        continue
                    name = _blob_name(clip.clip_id, mod)
                    flat = np.concatenate(
                        [tr.vectors.astype("<f4").ravel(),
                         tr.qualities.astype("<f4")])
                    with open(os.path.join(blob_dir, name), "wb") as bf:
                        bf.write(flat.tobytes())
                    mods[mod] = {"blob": f"blobs/{name}",
                                 "frames": int(tr.n_frames),
                                 "dim": int(tr.dim)}
                rec = {"clip_id": clip.clip_id,
                       "identity": int(clip.identity),
                       "duration_s": float(clip.duration_s),
                       "modalities": mods}
                mf.write(json.dumps(rec, sort_keys=True) + "\n")

        with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8") as sf:
            json.dump({"num_identities": int(split.num_identities),
                       "train": list(split.train),
                       "val": list(split.val),
                       "test": list(split.test)},
                      sf, sort_keys=True, indent=1)
            sf.write("\n")
    except OSError as exc:
        raise DatasetError(f"failed writing dataset under {out_dir}: {exc}") from exc


def read_dataset(in_dir):
    """Load (clips, split) from a dataset directory, validating invariants."""
    manifest_path = os.path.join(in_dir, "manifest.jsonl")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no manifest.jsonl under {in_dir}")

    clips = []
    with open(manifest_path, "r", encoding="utf-8") as mf:
        for lineno, line in enumerate(mf, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"manifest line {lineno}: invalid JSON ({exc})") from exc
            try:
                clip_id = rec["clip_id"]
                identity = int(rec["identity"])
                duration = float(rec["duration_s"])
                mods = rec["modalities"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"manifest line {lineno}: missing/bad field ({exc})") from exc

            tracks = {}
            for mod, info in mods.items():
                n, d = int(info["frames"]), int(info["dim"])
                blob_path = os.path.join(in_dir, info["blob"])
                try:
                    raw = np.fromfile(blob_path, dtype="<f4")
                except OSError as exc:
                    raise DatasetError(
                        f"clip {clip_id!r}: cannot read blob {blob_path} ({exc})") from exc
                if raw.size != n * d + n:
                    raise DatasetError(
                        f"clip {clip_id!r}: blob {info['blob']} holds {raw.size} floats, "
                        f"expected {n}*{d}+{n}")
                tracks[mod] = FrameTrack(
                    vectors=raw[:n * d].reshape(n, d).astype(np.float64),
                    qualities=raw[n * d:].astype(np.float64))
            try:
                clips.append(ClipRecord(clip_id=clip_id, identity=identity,
                                        duration_s=duration, tracks=tracks))
            except DatasetError as exc:
                raise DatasetError(f"manifest line {lineno}: {exc}") from exc

    split_path = os.path.join(in_dir, "split.json")
    if not os.path.exists(split_path):
        raise DatasetError(f"no split.json under {in_dir}")
    with open(split_path, "r", encoding="utf-8") as sf:
        sp = json.load(sf)
    split = DatasetSplit(num_identities=int(sp["num_identities"]),
                         train=list(sp["train"]), val=list(sp["val"]),
                         test=list(sp["test"]))
    split.validate({c.clip_id: c for c in clips})

    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate clip_id in manifest")
    for c in clips:
        if c.identity != DISTRACTOR and not (0 <= c.identity < split.num_identities):
            raise DatasetError(
                f"clip {c.clip_id!r}: identity {c.identity} outside vocabulary "
                f"0..{split.num_identities - 1}")
    return clips, split
