"""Dataset-curation rules over per-frame detection annotations.

Pure predicates used to keep or drop raw clips before any feature work:
a duration gate (1 to 30 seconds inclusive), a dominant-head rule per
frame, a valid-frame ratio per clip, and majority voting to label
clusters of clips from their recognized faces. Annotations come in as
newline-delimited JSON; decisions go out the same way with rule-level
reasons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import MAX_DURATION_S, MIN_DURATION_S

HEAD_DOMINANCE = 3.0     # biggest head at least 3x the runner-up by area
VALID_RATIO = 0.30       # valid clip: valid-frame ratio strictly above this


@dataclass
class DetectionFrame:
    """One annotated frame: head-box areas plus optional identity hints."""

    head_areas: list = field(default_factory=list)  # positive box areas
    face_id: object = None          # recognized identity, when any
    clothes_cluster: object = None  # clothes-cluster id, when any

    def __post_init__(self):
        if any(a <= 0 for a in self.head_areas):
            raise ValueError("head-box areas must be positive")


@dataclass
class RawClip:
    clip_id: str
    duration_s: float
    frames: list  # DetectionFrame, non-empty

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"clip {self.clip_id!r}: non-positive duration")
        if not self.frames:
            raise ValueError(f"clip {self.clip_id!r}: no frames")


def duration_gate(clip):
    """Keep iff duration lies in [1, 30] seconds (both ends inclusive)."""
    return MIN_DURATION_S <= clip.duration_s <= MAX_DURATION_S


def is_valid_frame(frame):
    """True iff exactly one head, or the biggest is 3x the second biggest."""
    areas = sorted(frame.head_areas, reverse=True)
    if not areas:
        return False
    if len(areas) == 1:
        return True
    return areas[0] >= HEAD_DOMINANCE * areas[1]


def is_valid_clip(clip):
    """True iff strictly more than 30% of the frames are valid."""
    valid = sum(1 for f in clip.frames if is_valid_frame(f))
    return valid / len(clip.frames) > VALID_RATIO


def majority_vote_cluster(members):
    """Most frequent non-absent face id, or None on a tie / no ids.

    members : iterable of optional face ids (one per cluster member).
    A returned label always has a strictly larger count than any other.
    """
    members = list(members)
    if not members:
        raise ValueError("cannot vote over an empty cluster")
    counts = {}
    for fid in members:
        if fid is None:
            continue
        counts[fid] = counts.get(fid, 0) + 1
    if not counts:
        return None
    best = sorted(counts.items(), key=lambda kv: -kv[1])
    if len(best) > 1 and best[0][1] == best[1][1]:
        return None
    return best[0][0]


def clip_decision(clip):
    """Keep/drop verdict with the rules that failed."""
    reasons = []
    if not duration_gate(clip):
        reasons.append("duration")
    if not is_valid_clip(clip):
        reasons.append("valid_ratio")
    return {"clip_id": clip.clip_id, "keep": not reasons, "reasons": reasons}


def load_annotations(path):
    """Read RawClips from newline-delimited JSON annotations."""
    clips = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                frames = [DetectionFrame(
                    head_areas=list(fr.get("head_areas", [])),
                    face_id=fr.get("face_id"),
                    clothes_cluster=fr.get("clothes_cluster"))
                    for fr in rec["frames"]]
                clips.append(RawClip(clip_id=rec["clip_id"],
                                     duration_s=float(rec["duration_s"]),
                                     frames=frames))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad annotation ({exc})") from exc
    return clips


def filter_annotations(clips):
    """Per-clip decisions plus majority-vote labels per clothes cluster.

    Voting pools the face ids of kept clips' frames, grouped by the
    frames' clothes_cluster; clips without cluster info do not vote.
    """
    decisions = [clip_decision(c) for c in clips]
    kept = {d["clip_id"] for d in decisions if d["keep"]}
    clusters = {}
    for clip in clips:
        if clip.clip_id not in kept:
            continue
        for fr in clip.frames:
            if fr.clothes_cluster is not None:
                clusters.setdefault(fr.clothes_cluster, []).append(fr.face_id)
    labels = {str(cid): majority_vote_cluster(m) for cid, m in
              sorted(clusters.items(), key=lambda kv: str(kv[0]))}
    return decisions, labels
