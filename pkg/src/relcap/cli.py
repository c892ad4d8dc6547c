"""Command-line entry points for the full experimental workflow.

    relcap gen-data          synthesize a spatial-caption corpus
    relcap train             train one encoder variant
    relcap caption           decode captions for feature files
    relcap evaluate          score candidate captions, optionally paired
    relcap ablate            train all five variants over shared seeds
    relcap export-attention  dump per-layer/head attention for one scene

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numeric failure. All subcommands are deterministic for fixed
flags and seed. RELCAP_DATA_DIR provides the default --data-dir.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from .decoding import DecodeConfig, caption_scene
from .errors import ConfigError, DegenerateVarianceError, RelcapError, UsageError
from .experiments import (
    TOY_MODEL,
    TOY_TRAIN,
    VARIANTS,
    run_ablation,
)
from .geometry import embed_matrix
from .metrics import (
    PairedScores,
    bleu,
    bleu_image,
    cider_d,
    paired_t_test,
    rouge_l,
    spatial_accuracy,
)
from .model import CaptionModel, ModelConfig, config_from_dict, config_with_mode
from .training import TrainConfig, Trainer, write_run_log

ALPHA = 0.05


def _default_data_dir() -> str | None:
    return os.environ.get("RELCAP_DATA_DIR")


def _require_paths(*paths: str | None) -> None:
    for path in paths:
        if path and not os.path.exists(path):
            raise UsageError(f"path does not exist: {path}")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.categories < 2 or args.categories > len(D.CATEGORIES):
        raise ConfigError(f"--categories must be in [2, {len(D.CATEGORIES)}]")
    cfg = D.CorpusConfig(categories=D.CATEGORIES[:args.categories],
                         d_feature=args.feature_dim)
    corpus = D.generate_corpus(args.seed, args.scenes, cfg)
    D.write_corpus(corpus, args.out_dir)
    print(f"wrote {args.scenes} scenes to {args.out_dir} "
          f"(train/val/test = {'/'.join(str(len(corpus.splits[s])) for s in ('train', 'val', 'test'))})")
    return 0


def _model_overrides(args) -> dict:
    overrides = dict(TOY_MODEL) if args.toy else {}
    for flag, key in (("d_model", "d_model"), ("n_heads", "n_heads"),
                      ("n_layers", "n_layers"), ("d_ff", "d_ff"),
                      ("dropout", "dropout_rate"), ("max_caption_len", "max_caption_len")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return overrides


def _train_overrides(args) -> dict:
    overrides = dict(TOY_TRAIN) if args.toy else {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("warmup", "warmup_steps"), ("patience", "early_stop_patience")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return overrides


def cmd_train(args) -> int:
    data_dir = args.data_dir or _default_data_dir()
    if not data_dir:
        raise UsageError("--data-dir (or RELCAP_DATA_DIR) is required")
    _require_paths(data_dir)
    corpus = D.load_corpus(data_dir)
    vocab = D.load_vocab(data_dir)

    m_kwargs = {"d_model": 512, "n_heads": 8, "n_layers": 6, "d_ff": 2048,
                "max_caption_len": 20, "dropout_rate": 0.1}
    m_kwargs.update(_model_overrides(args))
    m_kwargs["d_feature"] = corpus.config.d_feature
    m_kwargs["vocab_size"] = len(vocab)
    cfg = config_with_mode(ModelConfig(**m_kwargs), args.mode)

    t_kwargs = {"epochs": 30, "batch_size": 10, "warmup_steps": 20000,
                "early_stop_patience": 5}
    t_kwargs.update(_train_overrides(args))
    train_cfg = TrainConfig(seed=args.seed, **t_kwargs)

    model = CaptionModel.init(cfg, seed=args.seed)
    trainer = Trainer(model, corpus, vocab, train_cfg)
    result = trainer.train()

    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.ckpt")
    D.save_checkpoint(ckpt, result.params, D.model_checkpoint_config(cfg))
    write_run_log(os.path.join(args.out_dir, "runlog.jsonl"), result.run_log)
    print(f"best val loss {result.best_val_loss:.6f} at epoch {result.best_epoch}; "
          f"checkpoint -> {ckpt}")
    return 0


def _feature_paths(features_arg: str) -> list[str]:
    if os.path.isdir(features_arg):
        names = sorted(os.listdir(features_arg))
        return [os.path.join(features_arg, n) for n in names if n.endswith(".orf")]
    return [features_arg]


def cmd_caption(args) -> int:
    data_dir = args.data_dir or _default_data_dir()
    _require_paths(args.checkpoint, args.features, data_dir)
    if not data_dir:
        raise UsageError("--data-dir (or RELCAP_DATA_DIR) is required for the vocabulary")
    vocab = D.load_vocab(data_dir)
    params, cfg_dict = D.load_checkpoint(args.checkpoint)
    cfg = config_from_dict(cfg_dict)
    model = CaptionModel(cfg, params)
    decode_cfg = DecodeConfig(beam_size=args.beam,
                              max_len=args.max_len or cfg.max_caption_len)
    records = []
    for path in _feature_paths(args.features):
        record = D.read_features(path)
        geo = None
        if cfg.attention_mode == "geometric":
            geo = embed_matrix(record.boxes, cfg.geometry)
        caption, score = caption_scene(model, vocab, record.features, record.boxes,
                                       decode_cfg, geo_embed=geo)
        records.append({"image_id": record.image_id, "caption": caption,
                        "score": score})
    with open(args.out, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(_dump(record) + "\n")
    print(f"wrote {len(records)} captions to {args.out}")
    return 0


def _read_candidates(path: str) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["image_id"]] = obj["caption"]
    return out


def _system_scores(candidates: dict[str, str], references: dict[str, list[str]],
                   scenes: dict[str, D.Scene]) -> dict:
    corpus_bleu = bleu(candidates, references)
    cider_corpus, cider_per_image = cider_d(candidates, references)
    rouge_per_image = {i: rouge_l(candidates[i], references[i]) for i in candidates}
    spatial = spatial_accuracy(candidates, scenes)
    return {
        "corpus": {
            "bleu": corpus_bleu["bleu"],
            "rouge_l": float(np.mean(list(rouge_per_image.values()))),
            "cider_d": cider_corpus,
            "relation_acc": spatial["relation_acc"],
            "count_acc": spatial["count_acc"],
        },
        "per_image": {
            i: {
                "bleu4": bleu_image(candidates[i], references[i]),
                "rouge_l": rouge_per_image[i],
                "cider_d": cider_per_image[i],
                "relation_ok": spatial["per_image"][i]["relation_ok"],
                "count_ok": spatial["per_image"][i]["count_ok"],
            }
            for i in sorted(candidates)
        },
    }


def cmd_evaluate(args) -> int:
    _require_paths(args.candidates, args.references, args.scenes, args.candidates_b)
    references = {r.image_id: r.captions for r in D.read_captions(args.references)}
    scenes = {s.image_id: s for s in D.read_scenes(args.scenes)}
    cand_a = _read_candidates(args.candidates)
    missing = sorted(set(cand_a) - set(references))
    if missing:
        raise UsageError(f"candidates without references: {missing[:5]}")
    report = {"system_a": _system_scores(cand_a, references, scenes)}

    if args.candidates_b:
        cand_b = _read_candidates(args.candidates_b)
        report["system_b"] = _system_scores(cand_b, references, scenes)
        shared = sorted(set(cand_a) & set(cand_b))
        paired = {}
        for metric in ("bleu4", "rouge_l", "cider_d", "relation_ok", "count_ok"):
            a_vals, b_vals = [], []
            for i in shared:
                va = report["system_a"]["per_image"][i][metric]
                vb = report["system_b"]["per_image"][i][metric]
                if va is None or vb is None:
                    continue
                a_vals.append(float(va))
                b_vals.append(float(vb))
            if len(a_vals) < 2:
                paired[metric] = {"skipped": "fewer than 2 paired scores"}
                continue
            try:
                test = paired_t_test(PairedScores([str(k) for k in range(len(a_vals))],
                                                  a_vals, b_vals), None)
                test[f"significant_at_{ALPHA}"] = test["p"] < ALPHA
                paired[metric] = test
            except DegenerateVarianceError:
                paired[metric] = {"degenerate_variance": True}
        report["paired_tests"] = paired

    json_path = args.out_prefix + ".json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    text_path = args.out_prefix + ".txt"
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(_render_eval_report(report))
    print(open(text_path, "r", encoding="utf-8").read())
    print(f"reports: {json_path} {text_path}")
    return 0


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _render_eval_report(report: dict) -> str:
    lines = []
    metrics = ("bleu", "rouge_l", "cider_d", "relation_acc", "count_acc")
    systems = [k for k in ("system_a", "system_b") if k in report]
    header = f"{'metric':<14}" + "".join(f"{s:>26}" for s in systems)
    if "paired_tests" in report:
        header += f"{'p-value':>14}"
    lines.append(header)
    lines.append("-" * len(header))
    paired = report.get("paired_tests", {})
    paired_key = {"bleu": "bleu4", "rouge_l": "rouge_l", "cider_d": "cider_d",
                  "relation_acc": "relation_ok", "count_acc": "count_ok"}
    for metric in metrics:
        row = f"{metric:<14}"
        for system in systems:
            value = report[system]["corpus"][metric]
            if metric == "bleu":
                row += f"{'/'.join(f'{b:.3f}' for b in value):>26}"
            else:
                row += f"{_fmt(value):>26}"
        if paired:
            test = paired.get(paired_key[metric], {})
            if "p" in test:
                mark = " *" if test[f"significant_at_{ALPHA}"] else ""
                row += f"{test['p']:>12.2e}{mark}"
            elif "degenerate_variance" in test:
                row += f"{'degenerate':>14}"
            else:
                row += f"{'n/a':>14}"
        lines.append(row)
    if paired:
        lines.append("")
        lines.append(f"* significant at alpha={ALPHA} (two-tailed paired t-test)")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    data_dir = args.data_dir or _default_data_dir()
    if not data_dir:
        raise UsageError("--data-dir (or RELCAP_DATA_DIR) is required")
    _require_paths(data_dir)
    variants = VARIANTS if args.variants == "all" else tuple(args.variants.split(","))
    seeds = list(range(args.seed, args.seed + args.seeds))
    report = run_ablation(
        data_dir, args.out_dir, seeds, variants=variants, jobs=args.jobs,
        model_overrides=_model_overrides(args) or None,
        train_overrides=_train_overrides(args) or None,
    )
    print(open(os.path.join(args.out_dir, "report.txt"), "r", encoding="utf-8").read())
    return 0


def cmd_export_attention(args) -> int:
    _require_paths(args.checkpoint, args.features)
    params, cfg_dict = D.load_checkpoint(args.checkpoint)
    cfg = config_from_dict(cfg_dict)
    model = CaptionModel(cfg, params)
    record = D.read_features(args.features)
    geo = None
    if cfg.attention_mode == "geometric":
        geo = embed_matrix(record.boxes, cfg.geometry)
    collect: dict = {}
    encoded = model.encoder_forward(record.features, record.boxes,
                                    collect=collect, geo_embed=geo)
    layers = []
    for i in range(cfg.n_layers):
        entry = collect[f"enc.{i}.attn"]
        scores = entry["scores"]
        shifted = scores - scores.max(axis=-1, keepdims=True)
        softmax = np.exp(shifted)
        softmax /= softmax.sum(axis=-1, keepdims=True)
        layer = {
            "layer": i,
            "combined": entry["weights"].tolist(),
            "softmax_appearance": softmax.tolist(),
        }
        if entry["gates"] is not None:
            layer["gates"] = entry["gates"].tolist()
        layers.append(layer)
    payload = {
        "image_id": record.image_id,
        "attention_mode": cfg.attention_mode,
        "n_heads": cfg.n_heads,
        "boxes": [[b.x_center, b.y_center, b.w, b.h] for b in encoded.boxes]
        if encoded.boxes else
        [[b.x_center, b.y_center, b.w, b.h] for b in record.boxes],
        "input_order": encoded.order.tolist(),
        "layers": layers,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    print(f"wrote attention export to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relcap",
        description="Geometry-gated transformer captioner: data, training, "
                    "decoding, evaluation, ablation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=2000)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    def add_model_flags(q):
        q.add_argument("--toy", action="store_true",
                       help="desk-scale profile bundle (model and schedule)")
        q.add_argument("--d-model", type=int, dest="d_model")
        q.add_argument("--n-heads", type=int, dest="n_heads")
        q.add_argument("--n-layers", type=int, dest="n_layers")
        q.add_argument("--d-ff", type=int, dest="d_ff")
        q.add_argument("--dropout", type=float)
        q.add_argument("--max-caption-len", type=int, dest="max_caption_len")
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch-size", type=int, dest="batch_size")
        q.add_argument("--warmup", type=int)
        q.add_argument("--patience", type=int)

    p = sub.add_parser("train", help="train one encoder variant")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", default="standard",
                   choices=["standard", "geometric", "ordered:size",
                            "ordered:ltr", "ordered:ttb"])
    p.add_argument("--seed", type=int, default=0)
    add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="decode captions for feature files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True,
                   help="a feature file or a directory of .orf files")
    p.add_argument("--data-dir", help="corpus dir providing vocab.json")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="score candidates against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--candidates-b", help="second system for paired tests")
    p.add_argument("--references", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train all encoder variants and compare")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=1, help="first seed")
    p.add_argument("--variants", default="all")
    p.add_argument("--jobs", type=int, default=1)
    add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attention", help="dump attention matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the documented code 1
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except RelcapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
