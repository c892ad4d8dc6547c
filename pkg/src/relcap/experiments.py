"""Experiment harness: train encoder variants, decode, score, compare.

The ablation trains five encoder variants over shared data and seeds:

    none          plain transformer encoder (no position information)
    ordered:size  sort by box area, add sinusoidal rank encodings
    ordered:ltr   sort left-to-right, add rank encodings
    ordered:ttb   sort top-to-bottom, add rank encodings
    geometric     gate attention with learned box-geometry weights

Each (variant, seed) run writes a checkpoint, a run log, decoded test
captions, and a metrics record; the report aggregates per-variant means
and standard deviations and runs paired per-image significance tests of
geometric against the plain baseline.
"""

from __future__ import annotations

import json
import math
import os
from multiprocessing import get_context

import numpy as np

from .data import (
    Corpus,
    build_vocab,
    load_corpus,
    model_checkpoint_config,
    save_checkpoint,
)
from .decoding import DecodeConfig, caption_scene
from .errors import ConfigError, DegenerateVarianceError
from .geometry import embed_matrix
from .metrics import bleu, cider_d, paired_t_test, rouge_l, spatial_accuracy
from .model import CaptionModel, ModelConfig, config_with_mode
from .training import TrainConfig, Trainer, write_run_log

VARIANTS = ("none", "ordered:size", "ordered:ltr", "ordered:ttb", "geometric")

# Desk-scale profile. Eight heads give the gate enough independent channels
# to pick up the geometry signal quickly; dropout off because the synthetic
# corpus never repeats exact scenes and the mask noise swamps the small
# attention-weight shifts that carry the spatial information.
TOY_MODEL = dict(d_model=64, n_heads=8, n_layers=2, d_ff=128, d_feature=32,
                 max_caption_len=16, dropout_rate=0.0)
TOY_TRAIN = dict(epochs=10, batch_size=10, warmup_steps=1600, early_stop_patience=3)


def variant_dir(out_dir: str, variant: str, seed: int) -> str:
    return os.path.join(out_dir, "runs", f"{variant.replace(':', '_')}_s{seed}")


def _decode_split(model: CaptionModel, corpus: Corpus, vocab, split: str,
                  beam_size: int = 1) -> dict[str, str]:
    cfg = DecodeConfig(beam_size=beam_size, max_len=model.cfg.max_caption_len)
    captions = {}
    for image_id in corpus.splits[split]:
        scene = corpus.scenes[image_id]
        geo = None
        if model.cfg.attention_mode == "geometric":
            geo = embed_matrix(scene.boxes(), model.cfg.geometry)
        caption, _ = caption_scene(model, vocab, corpus.features[image_id],
                                   scene.boxes(), cfg, geo_embed=geo)
        captions[image_id] = caption
    return captions


def run_variant(variant: str, seed: int, corpus: Corpus,
                model_overrides: dict | None = None,
                train_overrides: dict | None = None,
                out_dir: str | None = None,
                eval_split: str = "test") -> dict:
    """Train one variant on one seed; return its metrics record."""
    vocab = build_vocab([corpus.captions[i] for i in corpus.splits["train"]])
    m_kwargs = dict(TOY_MODEL)
    m_kwargs.update(model_overrides or {})
    m_kwargs["d_feature"] = corpus.config.d_feature
    m_kwargs["vocab_size"] = len(vocab)
    cfg = config_with_mode(ModelConfig(**m_kwargs), variant)

    t_kwargs = dict(TOY_TRAIN)
    t_kwargs.update(train_overrides or {})
    train_cfg = TrainConfig(seed=seed, **t_kwargs)

    model = CaptionModel.init(cfg, seed=seed)
    trainer = Trainer(model, corpus, vocab, train_cfg)
    result = trainer.train()

    best_model = CaptionModel(cfg, result.params)
    candidates = _decode_split(best_model, corpus, vocab, eval_split)
    references = {i: corpus.captions[i].captions for i in corpus.splits[eval_split]}
    scenes = {i: corpus.scenes[i] for i in corpus.splits[eval_split]}
    spatial = spatial_accuracy(candidates, scenes)
    corpus_bleu = bleu(candidates, references)
    cider_corpus, _ = cider_d(candidates, references)
    rouge_mean = float(np.mean([rouge_l(candidates[i], references[i])
                                for i in candidates]))
    record = {
        "variant": variant,
        "seed": seed,
        "val_loss": result.best_val_loss,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "relation_acc": spatial["relation_acc"],
        "count_acc": spatial["count_acc"],
        "n_relation": spatial["n_relation"],
        "n_count": spatial["n_count"],
        "bleu": corpus_bleu["bleu"],
        "rouge_l": rouge_mean,
        "cider_d": cider_corpus,
        "relation_flags": {
            i: entry["relation_ok"]
            for i, entry in spatial["per_image"].items()
            if entry["relation_ok"] is not None
        },
        "count_flags": {
            i: entry["count_ok"]
            for i, entry in spatial["per_image"].items()
            if entry["count_ok"] is not None
        },
    }
    if out_dir is not None:
        run_dir = variant_dir(out_dir, variant, seed)
        os.makedirs(run_dir, exist_ok=True)
        save_checkpoint(os.path.join(run_dir, "checkpoint.ckpt"),
                        result.params, model_checkpoint_config(cfg))
        write_run_log(os.path.join(run_dir, "runlog.jsonl"), result.run_log)
        with open(os.path.join(run_dir, "captions_test.jsonl"), "w",
                  encoding="utf-8") as fh:
            for image_id in sorted(candidates):
                fh.write(json.dumps(
                    {"image_id": image_id, "caption": candidates[image_id]},
                    sort_keys=True) + "\n")
        with open(os.path.join(run_dir, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(record, fh, sort_keys=True, indent=1)
    return record


_WORKER_CORPUS: dict[str, Corpus] = {}


def _pool_job(job: dict) -> dict:
    data_dir = job["data_dir"]
    if data_dir not in _WORKER_CORPUS:
        _WORKER_CORPUS[data_dir] = load_corpus(data_dir)
    return run_variant(job["variant"], job["seed"], _WORKER_CORPUS[data_dir],
                       job.get("model_overrides"), job.get("train_overrides"),
                       job.get("out_dir"))


def run_ablation(data_dir: str, out_dir: str, seeds: list[int],
                 variants: tuple[str, ...] = VARIANTS, jobs: int = 1,
                 model_overrides: dict | None = None,
                 train_overrides: dict | None = None) -> dict:
    """Train every (variant, seed) pair and aggregate the comparison report."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
    os.makedirs(out_dir, exist_ok=True)
    job_list = [
        {"variant": v, "seed": s, "data_dir": data_dir, "out_dir": out_dir,
         "model_overrides": model_overrides, "train_overrides": train_overrides}
        for v in variants for s in seeds
    ]
    if jobs > 1:
        with get_context("fork").Pool(processes=jobs) as pool:
            records = pool.map(_pool_job, job_list)
    else:
        records = [_pool_job(job) for job in job_list]
    return build_report(records, out_dir)


def _aggregate(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "values": [float(v) for v in arr],
        "mean": float(arr.mean()),
        "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
    }


def build_report(records: list[dict], out_dir: str | None = None) -> dict:
    by_variant: dict[str, list[dict]] = {}
    for record in records:
        by_variant.setdefault(record["variant"], []).append(record)
    for runs in by_variant.values():
        runs.sort(key=lambda r: r["seed"])

    variants_summary = {}
    for variant, runs in by_variant.items():
        variants_summary[variant] = {
            "seeds": [r["seed"] for r in runs],
            "val_loss": _aggregate([r["val_loss"] for r in runs]),
            "relation_acc": _aggregate([r["relation_acc"] for r in runs]),
            "count_acc": _aggregate([r["count_acc"] for r in runs]),
            "cider_d": _aggregate([r["cider_d"] for r in runs]),
            "bleu4": _aggregate([r["bleu"][3] for r in runs]),
            "rouge_l": _aggregate([r["rouge_l"] for r in runs]),
        }

    paired_tests = {}
    if "geometric" in by_variant and "none" in by_variant:
        base_by_seed = {r["seed"]: r for r in by_variant["none"]}
        for geo in by_variant["geometric"]:
            base = base_by_seed.get(geo["seed"])
            if base is None:
                continue
            ids = sorted(set(geo["relation_flags"]) & set(base["relation_flags"]))
            a = np.array([float(geo["relation_flags"][i]) for i in ids])
            b = np.array([float(base["relation_flags"][i]) for i in ids])
            try:
                test = paired_t_test(a, b)
                test["significant_at_0.05"] = test["p"] < 0.05
            except DegenerateVarianceError:
                test = {"degenerate_variance": True}
            paired_tests[str(geo["seed"])] = test

    ordering_check = {}
    if "none" in variants_summary:
        none_stats = variants_summary["none"]["val_loss"]
        for variant in ("ordered:size", "ordered:ltr", "ordered:ttb"):
            if variant not in variants_summary:
                continue
            ordered_stats = variants_summary[variant]["val_loss"]
            pooled_sd = math.sqrt((none_stats["sd"] ** 2 + ordered_stats["sd"] ** 2) / 2)
            ordering_check[variant] = {
                "mean_val_loss": ordered_stats["mean"],
                "none_mean_val_loss": none_stats["mean"],
                "pooled_sd": pooled_sd,
                "no_significant_gain": ordered_stats["mean"]
                >= none_stats["mean"] - pooled_sd,
            }

    report = {
        "variants": variants_summary,
        "paired_relation_tests": paired_tests,
        "ordering_check": ordering_check,
    }
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(render_report(report))
    return report


def render_report(report: dict) -> str:
    lines = []
    header = (f"{'variant':<14} {'val_loss':>18} {'relation_acc':>18} "
              f"{'count_acc':>18} {'CIDEr-D':>18}")
    lines.append(header)
    lines.append("-" * len(header))
    order = [v for v in VARIANTS if v in report["variants"]]
    for variant in order:
        stats = report["variants"][variant]

        def cell(key):
            return f"{stats[key]['mean']:.4f} +/- {stats[key]['sd']:.4f}"

        lines.append(f"{variant:<14} {cell('val_loss'):>18} {cell('relation_acc'):>18} "
                     f"{cell('count_acc'):>18} {cell('cider_d'):>18}")
    if report["paired_relation_tests"]:
        lines.append("")
        lines.append("paired per-image relation tests, geometric vs none "
                     "(significant at alpha=0.05 marked *):")
        for seed, test in sorted(report["paired_relation_tests"].items()):
            if test.get("degenerate_variance"):
                lines.append(f"  seed {seed}: degenerate variance (identical scores)")
            else:
                mark = " *" if test["significant_at_0.05"] else ""
                lines.append(f"  seed {seed}: t={test['t']:.3f} dof={test['dof']} "
                             f"p={test['p']:.2e}{mark}")
    if report["ordering_check"]:
        lines.append("")
        lines.append("artificial-ordering check (val loss vs no encoding):")
        for variant, check in sorted(report["ordering_check"].items()):
            verdict = ("no significant gain" if check["no_significant_gain"]
                       else "significant gain")
            lines.append(
                f"  {variant}: mean {check['mean_val_loss']:.4f} vs none "
                f"{check['none_mean_val_loss']:.4f} (pooled sd {check['pooled_sd']:.4f})"
                f" -> {verdict}")
    lines.append("")
    for variant in order:
        per_seed = report["variants"][variant]
        lines.append(f"{variant} per-seed val_loss: "
                     + ", ".join(f"{v:.4f}" for v in per_seed["val_loss"]["values"]))
    return "\n".join(lines) + "\n"
