"""Deterministic synthetic multi-modal identification benchmarks.

Each identity gets one unit-norm prototype per modality; frame
embeddings are the prototype plus modality-specific Gaussian noise,
renormalized, with quality defined as the inverse realized noise
magnitude. Clip-level corruption reproduces the dominant failure modes
of in-the-wild footage: faces invisible for a whole clip, audio
belonging to another identity (dubbed voices, background speech), and
missing modality streams. Distractor clips use fresh identities that
never appear in training and land only in val/test.

Everything is derived from the config seed via labeled child seeds, so
equal configs produce byte-identical datasets regardless of generation
order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import ClipRecord, DatasetSplit, DISTRACTOR, FrameTrack, MODALITIES
from .numerics import derive_seed, make_rng

_QUALITY_EPS = 1e-9


@dataclass
class GenConfig:
    """Benchmark shape, noise levels, and corruption rates.

    Per-identity clip counts are uniform over [clips_min, clips_max]
    (desk-scale default averages 100 clips; production-scale corpora run
    to several hundred per identity). Durations are log-normal, clipped
    to [1, 30] seconds. Noise must satisfy
    sigma_face < sigma_head < sigma_audio < sigma_body, which induces
    the expected single-modality retrieval ordering.
    """

    num_identities: int = 50
    clips_min: int = 20
    clips_max: int = 180
    duration_mean_s: float = 4.72
    duration_log_sigma: float = 0.6
    frames_per_second: float = 8.0
    dims: dict = field(default_factory=lambda: {
        "face": 64, "head": 48, "body": 80, "audio": 64})
    sigma_face: float = 0.15
    sigma_head: float = 0.25
    sigma_audio: float = 0.3
    sigma_body: float = 6.0
    noise_spread: float = 0.75        # lognormal sigma of per-frame noise scale
    p_face_invisible: float = 0.2
    p_audio_wrong_speaker: float = 0.5
    p_modality_missing: float = 0.25  # i.i.d. per clip over head/body/audio
    # detector noise: face frames that are misdetections of one background
    # person; each clip draws its own rate in [0, p_face_impostor_frame].
    # Impostor frames carry normal quality scores, so selection cannot
    # filter them; only multi-frame structure can.
    p_face_impostor_frame: float = 0.0
    # appearance variation: each identity owns this many distinct looks
    # per visual modality (hairstyle / outfit / makeup changes between
    # shows); every clip samples one look. Voices do not change.
    styles_per_identity: int = 1
    distractor_fraction: float = 0.3  # distractor clips / identity clips
    seed: int = 20240501

    def validate(self):
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")
        if not (1 <= self.clips_min <= self.clips_max):
            raise ValueError(f"bad clips range [{self.clips_min}, {self.clips_max}]")
        for name in ("p_face_invisible", "p_audio_wrong_speaker",
                     "p_modality_missing", "p_face_impostor_frame"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.distractor_fraction < 0:
            raise ValueError("distractor_fraction must be >= 0")
        sigmas = [self.sigma_face, self.sigma_head, self.sigma_audio, self.sigma_body]
        if any(s <= 0 for s in sigmas):
            raise ValueError("noise levels must be positive")
        if self.noise_spread < 0:
            raise ValueError("noise_spread must be >= 0")
        if not (1.0 <= self.duration_mean_s <= 30.0):
            raise ValueError("mean duration must lie in [1, 30] s")
        if self.frames_per_second <= 0:
            raise ValueError("frames_per_second must be positive")
        if set(self.dims) != set(MODALITIES):
            raise ValueError(f"dims must cover exactly {MODALITIES}")
        if self.styles_per_identity < 1:
            raise ValueError("styles_per_identity must be >= 1")
        return self

    def sigma(self, modality):
        return getattr(self, f"sigma_{modality}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


def corrupted_config(**overrides):
    """Preset with heavier corruption, for module-increment comparisons.

    Identities own several distinct looks, faces go invisible more often,
    and almost half the clips lose a modality stream, so clip-level
    aggregation and fusion robustness carry more of the score than raw
    per-frame quality.
    """
    base = dict(styles_per_identity=4, sigma_face=0.12, sigma_head=0.55,
                sigma_audio=0.6, sigma_body=6.0, noise_spread=0.3,
                p_face_invisible=0.25, p_audio_wrong_speaker=0.5,
                p_modality_missing=0.4, seed=20240502)
    base.update(overrides)
    return GenConfig(**base)


def _prototypes(cfg, key, rng_label):
    """One audio voice plus `styles_per_identity` looks per visual modality."""
    rng = make_rng(derive_seed(cfg.seed, rng_label, key))
    protos = {}
    for mod in MODALITIES:
        n = 1 if mod == "audio" else cfg.styles_per_identity
        v = rng.normal(size=(n, cfg.dims[mod]))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        protos[mod] = v[0] if mod == "audio" else v
    return protos


def _noisy_track(rng, direction, sigma, spread, n_frames):
    # per-frame noise scale: some frames are sharp, some are badly blurred,
    # which is what makes quality ranking and top-K selection informative
    direction = np.atleast_2d(direction)      # (1, d) or one row per frame
    scale = sigma * np.exp(spread * rng.normal(size=(n_frames, 1)))
    noise = scale * rng.normal(size=(n_frames, direction.shape[1]))
    vecs = direction + noise
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    quality = 1.0 / (np.linalg.norm(noise, axis=1) + _QUALITY_EPS)
    return FrameTrack(vectors=vecs, qualities=quality)


def _make_clip(cfg, clip_id, identity, protos, pools, rng):
    mu = math.log(cfg.duration_mean_s) - 0.5 * cfg.duration_log_sigma ** 2
    duration = float(np.clip(math.exp(rng.normal(mu, cfg.duration_log_sigma)),
                             1.0, 30.0))
    n_frames = max(1, int(round(duration * cfg.frames_per_second)))

    face_invisible = rng.random() < cfg.p_face_invisible
    audio_wrong = rng.random() < cfg.p_audio_wrong_speaker
    missing = {m: rng.random() < cfg.p_modality_missing
               for m in ("head", "body", "audio")}
    # the clip's look (hairstyle, outfit, makeup) is shared by all visual
    # modalities: one show, one appearance
    style = rng.integers(cfg.styles_per_identity)

    if face_invisible:
        d = rng.normal(size=cfg.dims["face"])
        face_dir = d / np.linalg.norm(d)
    else:
        face_dir = protos["face"][style]
    audio_dir = protos["audio"]
    if audio_wrong and len(pools["audio"]) > 0:
        audio_dir = pools["audio"][rng.integers(len(pools["audio"]))]

    face_dirs = face_dir
    if cfg.p_face_impostor_frame > 0 and len(pools["face"]) > 0:
        # one background person per clip; the clip's own misdetection rate
        # is uniform in [0, p_face_impostor_frame]
        other = pools["face"][rng.integers(len(pools["face"]))]
        impostor = other[rng.integers(other.shape[0])]
        rate = rng.random() * cfg.p_face_impostor_frame
        hit = rng.random(n_frames) < rate
        face_dirs = np.where(hit[:, None], impostor[None, :], face_dir[None, :])

    sp = cfg.noise_spread
    tracks = {"face": _noisy_track(rng, face_dirs, cfg.sigma_face, sp, n_frames)}
    if not missing["head"]:
        tracks["head"] = _noisy_track(rng, protos["head"][style],
                                      cfg.sigma_head, sp, n_frames)
    if not missing["body"]:
        tracks["body"] = _noisy_track(rng, protos["body"][style],
                                      cfg.sigma_body, sp, n_frames)
    if not missing["audio"]:
        tracks["audio"] = _noisy_track(rng, audio_dir, cfg.sigma_audio, 0.0, 1)

    return ClipRecord(clip_id=clip_id, identity=identity,
                      duration_s=duration, tracks=tracks)


def _split_counts(n):
    """40/30/30 with at least one clip per part whenever n allows."""
    if n == 1:
        return 1, 0, 0
    if n == 2:
        return 1, 0, 1
    n_train = max(1, min(n - 2, int(round(0.4 * n))))
    n_val = max(1, min(n - 1 - n_train, int(round(0.3 * n))))
    return n_train, n_val, n - n_train - n_val


def generate_benchmark(cfg):
    """Build (clips, split) for a config. Same config => identical output."""
    cfg.validate()
    c = cfg.num_identities

    protos = [_prototypes(cfg, i, "proto") for i in range(c)]
    audio_by_identity = [p["audio"] for p in protos]
    face_by_identity = [p["face"] for p in protos]

    counts = make_rng(derive_seed(cfg.seed, "counts")).integers(
        cfg.clips_min, cfg.clips_max + 1, size=c)

    clips = []
    train, val, test = [], [], []
    for i in range(c):
        ids = []
        # corrupted clips borrow voices and background faces from others
        pools = {"audio": [audio_by_identity[j] for j in range(c) if j != i],
                 "face": [face_by_identity[j] for j in range(c) if j != i]}
        for j in range(int(counts[i])):
            clip_id = f"id{i:04d}_c{j:03d}"
            rng = make_rng(derive_seed(cfg.seed, "clip", i, j))
            clips.append(_make_clip(cfg, clip_id, i, protos[i], pools, rng))
            ids.append(clip_id)
        n_train, n_val, _ = _split_counts(len(ids))
        perm = make_rng(derive_seed(cfg.seed, "split", i)).permutation(len(ids))
        shuffled = [ids[k] for k in perm]
        train += shuffled[:n_train]
        val += shuffled[n_train:n_train + n_val]
        test += shuffled[n_train + n_val:]

    n_distractors = int(round(cfg.distractor_fraction * len(clips)))
    dpools = {"audio": audio_by_identity, "face": face_by_identity}
    for k in range(n_distractors):
        clip_id = f"dist{k:05d}"
        rng = make_rng(derive_seed(cfg.seed, "distractor-clip", k))
        dprotos = _prototypes(cfg, k, "distractor-proto")
        clips.append(_make_clip(cfg, clip_id, DISTRACTOR, dprotos, dpools, rng))
        (val if k % 2 == 0 else test).append(clip_id)

    split = DatasetSplit(num_identities=c, train=train, val=val, test=test)
    split.validate({cl.clip_id: cl for cl in clips})
    return clips, split


def prototype_scores(clips, split, modality):
    """Nearest-prototype oracle scores for one modality.

    Estimates each identity's prototype as the normalized mean of its
    train clips' average-pooled features, then scores every test clip by
    cosine similarity. Returns (clip_ids, scores) with scores of shape
    (n_test, num_identities). Used as a separability check independent
    of any trained model.
    """
    by_id = {cl.clip_id: cl for cl in clips}

    def clip_feature(clip):
        tr = clip.track(modality)
        if tr is None or tr.n_frames == 0:
            return None
        return tr.vectors.mean(axis=0)

    dim = next(cl.track(modality).dim for cl in clips
               if cl.track(modality) is not None)
    protos = np.zeros((split.num_identities, dim))
    counts = np.zeros(split.num_identities)
    for cid in split.train:
        clip = by_id[cid]
        feat = clip_feature(clip)
        if feat is None:
            continue
        protos[clip.identity] += feat
        counts[clip.identity] += 1
    counts[counts == 0] = 1.0
    protos /= counts[:, None]
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    protos /= norms

    clip_ids, rows = [], []
    for cid in split.test:
        feat = clip_feature(by_id[cid])
        if feat is None:
            rows.append(np.zeros(split.num_identities))
        else:
            feat = feat / max(np.linalg.norm(feat), 1e-12)
            rows.append(protos @ feat)
        clip_ids.append(cid)
    return clip_ids, np.asarray(rows)
