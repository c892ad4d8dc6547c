"""Cross-entropy training with Adam and the warmup learning-rate schedule.

Every stochastic choice (shuffling, dropout masks) is drawn from a stream
addressed by (seed, epoch, step, sample), so a run is bit-reproducible and
can be resumed from any epoch boundary given the captured trainer state.
The trainer keeps the parameters of the best validation epoch and stops
early when validation loss has not improved for `early_stop_patience`
epochs.

Sequence-level (reward-based) fine-tuning is exposed only as a hook point:
`Trainer.sequence_loss_hook` may be set to a callable, but no such
objective ships here; cross entropy is the sole training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .data import PAD_ID, Corpus, Vocab
from .errors import ConfigError, NumericError, UsageError
from .geometry import embed_matrix
from .model import CaptionModel
from .rng import stream


def lr_at(step: int, d_model: int, warmup: int) -> float:
    """Warmup-then-inverse-sqrt schedule: d^-0.5 * min(s^-0.5, s * w^-1.5)."""
    if step < 1:
        raise UsageError(f"schedule is defined for step >= 1, got {step}")
    if warmup < 1:
        raise ConfigError("warmup must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def fresh(cls, params: dict[str, T.Tensor]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, T.Tensor], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place; grads of None count as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not math.isfinite(float(g.sum())):
            raise NumericError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 10
    warmup_steps: int = 20000
    early_stop_patience: int = 5
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class TrainResult:
    params: dict[str, T.Tensor]          # best-validation parameters
    last_params: dict[str, T.Tensor]
    run_log: list[dict]
    best_val_loss: float
    best_epoch: int
    epochs_run: int


def _clone_params(params: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
    return {k: T.param(p.data.copy()) for k, p in params.items()}


def _global_grad_norm(params: dict[str, T.Tensor]) -> float:
    total = 0.0
    for name, p in params.items():
        if p.grad is not None:
            s = float((p.grad.astype(np.float64) ** 2).sum())
            if not math.isfinite(s):
                raise NumericError(f"non-finite gradient in {name}")
            total += s
    return math.sqrt(total)


@dataclass
class TrainerState:
    """Everything needed to resume at an epoch boundary."""

    epoch: int
    global_step: int
    optimizer: OptimizerState
    best_val_loss: float
    best_epoch: int
    bad_epochs: int
    best_params: dict[str, T.Tensor]


class Trainer:
    def __init__(self, model: CaptionModel, corpus: Corpus, vocab: Vocab,
                 cfg: TrainConfig):
        if not corpus.splits.get("train") or not corpus.splits.get("val"):
            raise ConfigError("corpus must provide non-empty train and val splits")
        self.model = model
        self.corpus = corpus
        self.vocab = vocab
        self.cfg = cfg
        self.sequence_loss_hook = None   # reserved for sequence-level objectives
        self.pairs = {
            split: self._build_pairs(split) for split in ("train", "val")
        }
        self.geo_cache: dict[str, np.ndarray] = {}
        if model.cfg.attention_mode == "geometric":
            for image_id in corpus.scenes:
                self.geo_cache[image_id] = embed_matrix(
                    corpus.scenes[image_id].boxes(), model.cfg.geometry)

    def _build_pairs(self, split: str) -> list[tuple[str, np.ndarray]]:
        pairs = []
        for image_id in self.corpus.splits[split]:
            for caption in self.corpus.captions[image_id].captions:
                pairs.append((image_id, self.vocab.encode(caption)))
        return pairs

    def _pair_loss(self, image_id: str, ids: np.ndarray, train: bool,
                   rng=None, stats=None) -> T.Tensor:
        scene = self.corpus.scenes[image_id]
        return self.model.loss(
            self.corpus.features[image_id], scene.boxes(), ids, pad_id=PAD_ID,
            train=train, rng=rng, stats=stats,
            geo_embed=self.geo_cache.get(image_id))

    def validation_loss(self) -> float:
        losses = [float(self._pair_loss(image_id, ids, train=False).data)
                  for image_id, ids in self.pairs["val"]]
        return float(np.mean(losses))

    def train(self, state: TrainerState | None = None) -> TrainResult:
        cfg = self.cfg
        model = self.model
        if state is None:
            state = TrainerState(
                epoch=0, global_step=0,
                optimizer=OptimizerState.fresh(model.params),
                best_val_loss=math.inf, best_epoch=-1, bad_epochs=0,
                best_params=_clone_params(model.params),
            )
        run_log: list[dict] = []
        train_pairs = self.pairs["train"]
        n_steps = (len(train_pairs) + cfg.batch_size - 1) // cfg.batch_size

        for epoch in range(state.epoch, cfg.epochs):
            order = stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(len(train_pairs))
            epoch_loss_sum = 0.0
            epoch_pairs = 0
            for step_in_epoch in range(n_steps):
                lo = step_in_epoch * cfg.batch_size
                batch = [train_pairs[i] for i in order[lo:lo + cfg.batch_size]]
                for p in model.params.values():
                    p.zero_grad()
                stats: dict = {}
                batch_loss = 0.0
                for sample_idx, (image_id, ids) in enumerate(batch):
                    drop_rng = stream(cfg.seed, rngmod.DROPOUT,
                                      epoch, step_in_epoch, sample_idx)
                    with T.Tape() as tape:
                        loss = self._pair_loss(image_id, ids, train=True,
                                               rng=drop_rng, stats=stats)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NumericError(
                            f"non-finite loss at epoch {epoch} step {step_in_epoch}")
                    batch_loss += value
                    tape.backward(loss)
                scale = 1.0 / len(batch)
                norm = _global_grad_norm(model.params) * scale
                clip = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
                for p in model.params.values():
                    if p.grad is not None:
                        p.grad *= scale * clip
                state.global_step += 1
                lr = lr_at(state.global_step, model.cfg.d_model, cfg.warmup_steps)
                adam_step(model.params, state.optimizer, lr)
                epoch_loss_sum += batch_loss
                epoch_pairs += len(batch)
                run_log.append({
                    "kind": "step", "epoch": epoch, "step": state.global_step,
                    "loss": batch_loss / len(batch), "lr": lr,
                    "batch_pairs": len(batch),
                    "gate_fallback_rows": stats.get("gate_fallback_rows", 0),
                })
            val_loss = self.validation_loss()
            improved = val_loss < state.best_val_loss
            if improved:
                state.best_val_loss = val_loss
                state.best_epoch = epoch
                state.bad_epochs = 0
                state.best_params = _clone_params(model.params)
            else:
                state.bad_epochs += 1
            run_log.append({
                "kind": "epoch", "epoch": epoch,
                "train_loss": epoch_loss_sum / epoch_pairs, "val_loss": val_loss,
                "best": improved,
            })
            state.epoch = epoch + 1
            if state.bad_epochs > cfg.early_stop_patience:
                break
        self.state = state
        return TrainResult(
            params=state.best_params,
            last_params=model.params,
            run_log=run_log,
            best_val_loss=state.best_val_loss,
            best_epoch=state.best_epoch,
            epochs_run=state.epoch,
        )


def write_run_log(path: str, run_log: list[dict]) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for record in run_log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
