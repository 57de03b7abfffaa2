import hashlib
import warnings

import numpy as np
import pytest

from mmpid.data import DISTRACTOR, write_dataset
from mmpid.retrieval import evaluate_scores
from mmpid.synth import (GenConfig, _prototypes, corrupted_config,
                         generate_benchmark, prototype_scores)


def _dataset_digest(clips, split, tmp_path, name):
    out = tmp_path / name
    write_dataset(clips, split, str(out))
    h = hashlib.sha256()
    for f in sorted(p for p in out.rglob("*") if p.is_file()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_exact_counts_and_split_sizes():
    cfg = GenConfig(num_identities=10, clips_min=20, clips_max=20,
                    distractor_fraction=0.0, seed=5)
    clips, split = generate_benchmark(cfg)
    assert len(clips) == 200
    # per identity: 8 train / 6 val / 6 test
    assert (len(split.train), len(split.val), len(split.test)) == (80, 60, 60)


def test_same_seed_byte_identical(tmp_path):
    cfg = GenConfig(num_identities=4, clips_min=5, clips_max=8, seed=11)
    d1 = _dataset_digest(*generate_benchmark(cfg), tmp_path, "a")
    d2 = _dataset_digest(*generate_benchmark(cfg), tmp_path, "b")
    assert d1 == d2


def test_different_seed_differs(tmp_path):
    c1 = GenConfig(num_identities=4, clips_min=5, clips_max=8, seed=11)
    c2 = GenConfig(num_identities=4, clips_min=5, clips_max=8, seed=12)
    assert _dataset_digest(*generate_benchmark(c1), tmp_path, "a") != \
        _dataset_digest(*generate_benchmark(c2), tmp_path, "b")


def test_all_clips_satisfy_invariants():
    clips, split = generate_benchmark(GenConfig(
        num_identities=5, clips_min=5, clips_max=15, seed=3,
        styles_per_identity=2, p_face_impostor_frame=0.3))
    ids = {c.clip_id for c in clips}
    assert len(ids) == len(clips)
    for c in clips:
        assert 1.0 <= c.duration_s <= 30.0
        for tr in c.tracks.values():
            assert np.all(np.isfinite(tr.vectors))
            assert np.all(tr.qualities >= 0)
    split.validate({c.clip_id: c for c in clips})


def test_distractors_only_in_val_and_test():
    clips, split = generate_benchmark(GenConfig(
        num_identities=4, clips_min=10, clips_max=10,
        distractor_fraction=0.5, seed=9))
    by_id = {c.clip_id: c for c in clips}
    assert all(by_id[c].identity != DISTRACTOR for c in split.train)
    dist = [c.clip_id for c in clips if c.identity == DISTRACTOR]
    assert len(dist) == 20
    assert set(dist) <= set(split.val) | set(split.test)


def test_corrupted_face_fraction_matches_probability():
    # 10 identities x 100 clips, invisibility 0.3: empirical rate in 0.3 +/- 0.03
    cfg = GenConfig(num_identities=10, clips_min=100, clips_max=100,
                    distractor_fraction=0.0, p_face_invisible=0.3,
                    sigma_face=0.05, noise_spread=0.0, seed=17)
    clips, _ = generate_benchmark(cfg)
    protos = {i: _prototypes(cfg, i, "proto")["face"][0] for i in range(10)}
    hits = [float(c.track("face").vectors.mean(axis=0) @ protos[c.identity]) < 0.5
            for c in clips]
    assert abs(np.mean(hits) - 0.3) < 0.03


def test_missing_modality_fraction_matches_probability():
    cfg = GenConfig(num_identities=10, clips_min=100, clips_max=100,
                    distractor_fraction=0.0, p_modality_missing=0.25, seed=21)
    clips, _ = generate_benchmark(cfg)
    for mod in ("head", "body", "audio"):
        frac = np.mean([c.track(mod) is None for c in clips])
        assert abs(frac - 0.25) < 0.035
    assert all(c.track("face") is not None for c in clips)


def test_perfect_separability_oracle_map_is_one():
    cfg = GenConfig(num_identities=8, clips_min=10, clips_max=10,
                    sigma_face=1e-4, noise_spread=0.0,
                    p_face_invisible=0.0, p_audio_wrong_speaker=0.0,
                    p_modality_missing=0.0, distractor_fraction=0.1, seed=2)
    clips, split = generate_benchmark(cfg)
    by_id = {c.clip_id: c for c in clips}
    labels = np.array([by_id[c].identity for c in split.test])
    ids, scores = prototype_scores(clips, split, "face")
    run = evaluate_scores(ids, scores, labels, keep_ranked=False)
    assert run.map == 1.0


def test_noise_ordering_induces_retrieval_ordering():
    """Nearest-prototype MAP ordering face > head > audio > body (default config)."""
    clips, split = generate_benchmark(GenConfig())
    by_id = {c.clip_id: c for c in clips}
    labels = np.array([by_id[c].identity for c in split.test])
    maps = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for mod in ("face", "head", "audio", "body"):
            ids, scores = prototype_scores(clips, split, mod)
            maps[mod] = evaluate_scores(ids, scores, labels,
                                        keep_ranked=False).map
    assert maps["face"] > maps["head"] > maps["audio"] > maps["body"]


def test_duration_statistics_roughly_match_target():
    clips, _ = generate_benchmark(GenConfig(num_identities=20, clips_min=50,
                                            clips_max=50, seed=31))
    durations = np.array([c.duration_s for c in clips])
    assert durations.min() >= 1.0 and durations.max() <= 30.0
    assert abs(durations.mean() - 4.72) < 0.5


class TestConfigValidation:
    def test_bad_probability(self):
        with pytest.raises(ValueError):
            GenConfig(p_face_invisible=1.5).validate()

    def test_bad_clip_range(self):
        with pytest.raises(ValueError):
            GenConfig(clips_min=10, clips_max=5).validate()

    def test_too_few_identities(self):
        with pytest.raises(ValueError):
            GenConfig(num_identities=1).validate()

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            GenConfig.from_dict({"nope": 3})

    def test_round_trip_dict(self):
        cfg = corrupted_config()
        again = GenConfig.from_dict(cfg.to_dict())
        assert again == cfg
