"""Command-line surface: generate / train / evaluate / ablate / filter /
inspect. Logs go to stderr; data artifacts go to files only."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import curation
from .data import read_dataset, write_dataset
from .fusion import (ModelConfig, TrainConfig, average_attention,
                     build_feature_table, load_model, save_model, train)
from .retrieval import (default_grid, evaluate_model, format_report,
                        run_ablation, top_predictions)
from .synth import GenConfig, generate_benchmark

SLOT_NAMES = ("face_vlad", "face_avg", "face_qw", "head", "body", "audio")


def _log(msg):
    print(msg, file=sys.stderr)


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _configs(args):
    raw = _load_json(args.config) if args.config else {}
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    if getattr(args, "seed", None) is not None:
        train_cfg.seed = args.seed
    return model_cfg, train_cfg


def cmd_generate(args):
    raw = _load_json(args.config) if args.config else {}
    cfg = GenConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    clips, split = generate_benchmark(cfg)
    write_dataset(clips, split, args.out)
    _log(f"wrote {len(clips)} clips ({len(split.train)} train / "
         f"{len(split.val)} val / {len(split.test)} test) to {args.out}")
    return 0


def cmd_train(args):
    clips, split = read_dataset(args.data)
    model_cfg, train_cfg = _configs(args)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def log_fn(entry):
        if log_fh:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")

    try:
        model, history = train(clips, split, model_cfg, train_cfg,
                               log_fn=log_fn)
    finally:
        if log_fh:
            log_fh.close()
    save_model(model, args.ckpt)
    final = history[-1]
    _log(f"trained {train_cfg.epochs} epochs: final loss {final['loss']:.4f}, "
         f"accuracy {final['accuracy']:.4f}; checkpoint at {args.ckpt}")
    return 0


def cmd_evaluate(args):
    clips, split = read_dataset(args.data)
    models = [load_model(args.ckpt)]
    for extra in args.ensemble or []:
        models.append(load_model(extra))
    cfg = models[0].cfg
    table = build_feature_table(clips, cfg.frames_per_clip, cfg.select_seed)
    run, scores = evaluate_model(models, table, split, k=args.top_k,
                                 keep_ranked=True, part=args.split)
    _log(f"{args.split} MAP@{args.top_k} = {run.map:.4f} "
         f"({len(run.queries)} identities, {len(models)} model(s))")
    if args.out:
        _dump_json({"map": run.map, "split": args.split, "k": args.top_k,
                    "num_models": len(models), "queries": run.queries,
                    "skipped": run.skipped}, args.out)
        _log(f"report written to {args.out}")
    if args.predictions:
        clip_list = getattr(split, args.split)
        with open(args.predictions, "w", encoding="utf-8") as fh:
            for rec in top_predictions(clip_list, scores, top_n=args.top_n):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        _log(f"predictions written to {args.predictions}")
    return 0


def cmd_ablate(args):
    clips, split = read_dataset(args.data)
    raw = _load_json(args.grid) if args.grid else {}
    rows = raw.get("rows", default_grid())
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    if args.seed is not None:
        train_cfg.seed = args.seed

    def log_fn(entry):
        _log(f"  {entry['name']:<24} MAP {entry['map']:.4f}")

    report = run_ablation(clips, split, rows, model_cfg, train_cfg,
                          k=args.top_k, log_fn=log_fn)
    _log(format_report(report))
    if args.out:
        _dump_json(report, args.out)
        _log(f"report written to {args.out}")
    return 0


def cmd_filter(args):
    clips = curation.load_annotations(args.annotations)
    decisions, labels = curation.filter_annotations(clips)
    with open(args.out, "w", encoding="utf-8") as fh:
        for dec in decisions:
            fh.write(json.dumps(dec, sort_keys=True) + "\n")
    kept = sum(d["keep"] for d in decisions)
    _log(f"{kept}/{len(decisions)} clips kept; decisions at {args.out}")
    if args.clusters:
        _dump_json(labels, args.clusters)
        _log(f"{len(labels)} cluster labels at {args.clusters}")
    return 0


def cmd_inspect(args):
    model = load_model(args.ckpt)
    total = 0
    _log(f"model: D={model.cfg.feature_dim} attn={model.cfg.attn_dim} "
         f"gamma={float(model.params['gamma']):.4g} "
         f"classes={model.num_classes} modalities={model.cfg.modalities} "
         f"netvlad={model.uses_netvlad} mma={model.cfg.use_mma}")
    for name, arr in model.parameters():
        total += arr.size
        _log(f"  {name:<18} {str(np.atleast_1d(arr).shape):<14} {arr.size}")
    _log(f"total parameters: {total}")

    if args.data:
        clips, split = read_dataset(args.data)
        table = build_feature_table(clips, model.cfg.frames_per_clip,
                                    model.cfg.select_seed)
        rows = table.rows_for(getattr(split, args.split))
        y = average_attention(model, table, rows)
        _log(f"average attention over {args.split} "
             f"(columns sum to 1; column i = correlation of slot i to all):")
        header = " ".join(f"{s:>9}" for s in SLOT_NAMES)
        _log(f"{'':>9} {header}")
        for i, slot in enumerate(SLOT_NAMES):
            _log(f"{slot:>9} " + " ".join(f"{v:9.4f}" for v in y[i]))
        if args.out:
            _dump_json({"slots": list(SLOT_NAMES),
                        "attention": y.tolist(),
                        "column_sums": y.sum(axis=0).tolist()}, args.out)
            _log(f"attention matrix written to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="mmpid",
        description="Multi-modal person identification: synthetic benchmarks, "
                    "attention-fusion training, and MAP retrieval evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic benchmark dataset")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a fusion model")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help='JSON with "model" and "train" sections')
    t.add_argument("--ckpt", required=True, help="checkpoint output path")
    t.add_argument("--log", help="training log (newline-delimited JSON)")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="rank a split and compute MAP")
    e.add_argument("--ckpt", required=True, help="model checkpoint")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--ensemble", action="append",
                   help="additional member checkpoint (repeatable)")
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--top-k", type=int, default=100)
    e.add_argument("--top-n", type=int, default=5,
                   help="identities per clip in the prediction dump")
    e.add_argument("--out", help="JSON report path")
    e.add_argument("--predictions", help="per-clip prediction dump (ndjson)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run a feature/module ablation grid")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--grid", help='JSON with "rows", "model", "train"')
    a.add_argument("--top-k", type=int, default=100)
    a.add_argument("--seed", type=int, help="override the training seed")
    a.add_argument("--out", help="JSON report path")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("filter", help="apply curation rules to annotations")
    f.add_argument("--annotations", required=True,
                   help="per-clip detection annotations (ndjson)")
    f.add_argument("--out", required=True, help="decision output (ndjson)")
    f.add_argument("--clusters", help="majority-vote cluster labels (JSON)")
    f.set_defaults(func=cmd_filter)

    i = sub.add_parser("inspect", help="summarize a checkpoint and its attention")
    i.add_argument("--ckpt", required=True, help="model checkpoint")
    i.add_argument("--data", help="dataset for the average attention matrix")
    i.add_argument("--split", choices=("val", "test", "train"), default="test")
    i.add_argument("--out", help="JSON output for the attention matrix")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single surface for module errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
