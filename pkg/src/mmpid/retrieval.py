"""Ranked retrieval per identity and mean average precision.

For each query identity, every evaluation clip (distractors included)
is ranked by that identity's score, the list is truncated to the top
100, and average precision is computed over the positives found there.
The AP denominator stays the identity's total positive count, so
positives pushed below the cutoff are penalized. MAP is the unweighted
mean over identities with at least one positive; identities without
positives are skipped with a warning since their AP is undefined.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .fusion import (ModelConfig, TrainConfig, build_feature_table,
                     ensemble_predict, train)
from .numerics import derive_seed

TOP_K = 100


def rank_for_identity(clip_ids, scores, identity, k=TOP_K):
    """Clips sorted by descending score for `identity`, truncated to k.

    scores : (n_clips, num_identities); ties break by ascending clip_id.
    Returns a list of (clip_id, score) pairs.
    """
    scores = np.asarray(scores)
    if not (0 <= identity < scores.shape[1]):
        raise ValueError(f"identity {identity} outside vocabulary "
                         f"0..{scores.shape[1] - 1}")
    col = scores[:, identity]
    order = np.lexsort((np.asarray(clip_ids), -col))[:k]
    return [(clip_ids[i], float(col[i])) for i in order]


def average_precision(ranked_ids, positives, m):
    """AP of a truncated ranked list against `m` total positives.

    ranked_ids : clip ids in rank order (already truncated)
    positives : set of positive clip ids for the query identity
    m : total positive count in the evaluated pool (>= 1); stays the
        denominator even when some positives fall below the cutoff.
    """
    if m < 1:
        raise ValueError("average precision undefined without positives")
    found = 0
    total = 0.0
    for rank, cid in enumerate(ranked_ids, start=1):
        if cid in positives:
            found += 1
            total += found / rank
    return total / m


def mean_average_precision(aps):
    """Unweighted mean of per-identity APs."""
    aps = list(aps)
    if not aps:
        raise ValueError("no identities to average over")
    return float(np.mean(aps))


@dataclass
class RetrievalRun:
    """Per-identity rankings and APs plus the overall MAP."""

    map: float
    queries: list          # dicts: identity, ap, num_positives, ranked
    skipped: list = field(default_factory=list)  # identities without positives

    def to_dict(self):
        return {"map": self.map, "queries": self.queries,
                "skipped": self.skipped}


def evaluate_scores(clip_ids, scores, labels, k=TOP_K, keep_ranked=True):
    """Build a RetrievalRun from score vectors and ground-truth labels.

    labels : per-clip identity (DISTRACTOR marks universal negatives).
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n_ids = scores.shape[1]
    queries, aps, skipped = [], [], []
    for identity in range(n_ids):
        positives = {clip_ids[i] for i in np.flatnonzero(labels == identity)}
        m = len(positives)
        if m == 0:
            skipped.append(identity)
            continue
        ranked = rank_for_identity(clip_ids, scores, identity, k)
        ap = average_precision([cid for cid, _ in ranked], positives, m)
        aps.append(ap)
        queries.append({"identity": identity, "ap": ap, "num_positives": m,
                        "ranked": ranked if keep_ranked else None})
    if skipped:
        warnings.warn(f"{len(skipped)} identities have no positives and were "
                      f"skipped", stacklevel=2)
    return RetrievalRun(map=mean_average_precision(aps), queries=queries,
                        skipped=skipped)


def evaluate_model(models, table, split, k=TOP_K, keep_ranked=False,
                   part="test"):
    """Score a split with one model or an ensemble and compute MAP."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    clip_list = getattr(split, part)
    rows = table.rows_for(clip_list)
    scores = ensemble_predict(list(models), table, rows)
    return evaluate_scores(clip_list, scores, table.labels[rows], k,
                           keep_ranked=keep_ranked), scores


# --------------------------------------------------------------------------
# ablation grid
# --------------------------------------------------------------------------

FACE = ("face",)
ALL_MODALITIES = ("face", "head", "body", "audio")


def default_grid():
    """Feature-addition rows, then module increments, then the ensemble."""
    return [
        {"name": "face", "modalities": FACE},
        {"name": "head", "modalities": ("head",)},
        {"name": "audio", "modalities": ("audio",)},
        {"name": "body", "modalities": ("body",)},
        {"name": "face+head", "modalities": ("face", "head")},
        {"name": "face+head+audio", "modalities": ("face", "head", "audio")},
        {"name": "face+head+audio+body", "modalities": ALL_MODALITIES},
        {"name": "ensemble", "modalities": ALL_MODALITIES, "ensemble": 3},
        {"name": "+netvlad", "modalities": ALL_MODALITIES,
         "use_netvlad": True},
        {"name": "+netvlad+mma", "modalities": ALL_MODALITIES,
         "use_netvlad": True, "use_mma": True},
    ]


def train_ensemble(clips, split, model_cfg, train_cfg, n_members=3,
                   table=None, log_fn=None, partition="full"):
    """Train ensemble members, each from its own derived seed.

    partition="full" trains every member on the whole train split
    (bagging by initialization and batch order); "folds" drops a
    different fold per member, cross-validation style. Full-split
    members are the default: at desk scale, withholding a third of an
    already small train split starves the members more than the
    decorrelation helps.
    """
    train_ids = list(split.train)
    if partition not in ("full", "folds"):
        raise ValueError(f"unknown partition scheme {partition!r}")
    if partition == "folds":
        rng_order = np.random.Generator(np.random.PCG64(
            derive_seed(train_cfg.seed, "ensemble-folds")))
        perm = rng_order.permutation(len(train_ids))
        folds = [[train_ids[j] for j in perm[i::n_members]]
                 for i in range(n_members)]
    members = []
    for i in range(n_members):
        if partition == "folds":
            keep = [cid for f, fold in enumerate(folds) if f != i
                    for cid in fold]
        else:
            keep = train_ids
        member_split = replace(split, train=keep)
        member_cfg = replace(train_cfg,
                             seed=derive_seed(train_cfg.seed, "member", i))
        model, _ = train(clips, member_split, model_cfg, member_cfg,
                         table=table, log_fn=log_fn)
        members.append(model)
    return members


def run_ablation(clips, split, rows=None, model_cfg=None, train_cfg=None,
                 k=TOP_K, log_fn=None):
    """Train and evaluate every grid row; returns a JSON-ready report.

    Rows with "ensemble": n train n fold-partitioned members and rank by
    the summed member probabilities; their report entries also carry the
    individual member MAPs.
    """
    rows = rows if rows is not None else default_grid()
    base_model = model_cfg or ModelConfig()
    base_train = train_cfg or TrainConfig()
    table = build_feature_table(clips, base_model.frames_per_clip,
                                base_model.select_seed)
    results = []
    for row in rows:
        cfg = replace(base_model,
                      modalities=tuple(row.get("modalities", ALL_MODALITIES)),
                      use_netvlad=bool(row.get("use_netvlad", False)),
                      use_mma=bool(row.get("use_mma", False)))
        n_members = int(row.get("ensemble", 1))
        entry = {"name": row.get("name", "row"),
                 "modalities": list(cfg.modalities),
                 "use_netvlad": cfg.use_netvlad, "use_mma": cfg.use_mma,
                 "ensemble": n_members}
        if n_members == 1:
            model, _ = train(clips, split, cfg, base_train, table=table)
            run, _ = evaluate_model(model, table, split, k)
        else:
            members = train_ensemble(clips, split, cfg, base_train,
                                     n_members, table=table)
            run, _ = evaluate_model(members, table, split, k)
            member_maps = [evaluate_model(m, table, split, k)[0].map
                           for m in members]
            entry["member_maps"] = member_maps
        entry["map"] = run.map
        results.append(entry)
        if log_fn:
            log_fn(entry)
    return {"rows": results}


def format_report(report):
    """Human-readable table for an ablation report."""
    lines = [f"{'row':<24} {'MAP':>8}  details"]
    for row in report["rows"]:
        details = []
        if row.get("use_netvlad"):
            details.append("netvlad")
        if row.get("use_mma"):
            details.append("mma")
        if row.get("ensemble", 1) > 1:
            member = ", ".join(f"{m:.4f}" for m in row.get("member_maps", []))
            details.append(f"{row['ensemble']} members ({member})")
        lines.append(f"{row['name']:<24} {row['map']:>8.4f}  "
                     f"{'+'.join(row['modalities'])}"
                     f"{' [' + ', '.join(details) + ']' if details else ''}")
    return "\n".join(lines)


def top_predictions(clip_ids, scores, top_n=5):
    """Per-clip top identities with scores, for prediction dumps."""
    scores = np.asarray(scores)
    out = []
    for i, cid in enumerate(clip_ids):
        order = np.argsort(-scores[i])[:top_n]
        out.append({"clip_id": cid,
                    "top": [[int(j), float(scores[i, j])] for j in order]})
    return out
