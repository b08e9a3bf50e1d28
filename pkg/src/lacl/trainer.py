"""Training loop with three ablation modes.

``lacl``          per-class queue, class-aware InfoNCE, QRS-filtered admission
``lacl-no-qrs``   per-class queue, class-aware InfoNCE, every key admitted
``moco-baseline`` single undifferentiated queue, plain InfoNCE

All randomness is derived statelessly from ``(seed, step, ...)`` so a run
resumed from a checkpoint replays exactly what an uninterrupted run does.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import qrs
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentationPolicy, SyntheticWsiDataset, augment_batch
from .errors import InvalidConfigError, NoNegativesError, TrainingDivergedError
from .loss import batch_loss
from .model import ModelDims, ModelParams, backward, ema_update, forward, sgd_step
from .queue import LesionQueue

log = logging.getLogger(__name__)

MODES = ("lacl", "lacl-no-qrs", "moco-baseline")
FINGERPRINTS = {
    "lacl": "queue=per-class;admission=qrs;loss=lesion-info-nce",
    "lacl-no-qrs": "queue=per-class;admission=all;loss=lesion-info-nce",
    "moco-baseline": "queue=single;admission=all;loss=info-nce",
}

# Stream tags mixed into seed sequences so the different consumers never share draws.
_INIT_STREAM, _QUEUE_STREAM, _SHUFFLE_STREAM = 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "lacl"
    temperature: float = 0.2
    m: float = 0.05
    batch_size: int = 64
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    queue_capacity: int = 1536
    include_positive: bool = True
    queue_init: str = "random-unit"
    warmup_steps: int | None = None  # None: one epoch for empty queues, else 0
    qrs_temperature: float | None = None
    checkpoint_every: int = 0
    seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.temperature <= 0 or self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise InvalidConfigError("temperature, batch_size must be positive; epochs, lr non-negative")
        if not 0.0 <= self.m < 1.0 or not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise InvalidConfigError("m and momentum must lie in [0, 1); weight_decay >= 0")
        if self.queue_init not in ("random-unit", "empty"):
            raise InvalidConfigError(f"unknown queue_init {self.queue_init!r}")
        if self.queue_capacity < 1:
            raise InvalidConfigError("queue_capacity must be positive")
        if self.qrs_temperature is not None and self.qrs_temperature <= 0:
            raise InvalidConfigError("qrs_temperature must be positive when set")

    def warmup_for(self, steps_per_epoch: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return steps_per_epoch if self.queue_init == "empty" else 0


@dataclass
class TrainState:
    params_q: ModelParams
    params_k: ModelParams
    velocity: ModelParams
    queue: LesionQueue
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(self.params_q, self.params_k, self.velocity, self.step, self.queue)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        velocity = ckpt.velocity if ckpt.velocity is not None else ModelParams.zeros(ckpt.dims)
        return cls(ckpt.params_q, ckpt.params_k, velocity, ckpt.queue, ckpt.step)


def init_state(config: TrainConfig, num_classes: int) -> TrainState:
    config.validate()
    params_q = ModelParams.init(config.dims, np.random.default_rng((config.seed, _INIT_STREAM)))
    K = 1 if config.mode == "moco-baseline" else num_classes
    queue = LesionQueue.create(
        K, config.queue_capacity, config.dims.contrast_dim, config.queue_init,
        seed=(config.seed, _QUEUE_STREAM),
    )
    return TrainState(params_q, params_q.copy(), ModelParams.zeros(config.dims), queue)


def train_step(
    state: TrainState,
    x,
    pseudo_labels,
    config: TrainConfig,
    patch_ids=None,
    warmup: bool = False,
) -> dict:
    """Run one optimization step in place on ``state`` and return its metrics."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(pseudo_labels, dtype=np.int64).reshape(-1)
    if len(x) == 0:
        raise InvalidConfigError("empty batch")
    ids = np.arange(len(x)) if patch_ids is None else np.asarray(patch_ids)
    t = state.step
    v_q = augment_batch(x, ids, config.augmentation, config.seed, t, 0)
    v_k = augment_batch(x, ids, config.augmentation, config.seed, t, 1)

    trace = forward(state.params_q, v_q, keep_trace=True)
    k_plus = forward(state.params_k, v_k).projection
    class_aware = config.mode != "moco-baseline"

    rows = np.arange(len(x))
    if warmup:
        rows = _rows_with_negatives(state.queue, labels, class_aware)
    loss = None
    grad_q = np.zeros_like(trace.projection)
    if len(rows):
        try:
            loss, g = batch_loss(
                trace.projection[rows], k_plus[rows], labels[rows], state.queue,
                config.temperature, config.include_positive, class_aware,
            )
        except NoNegativesError as exc:
            raise NoNegativesError(
                f"{exc}; use queue_init=random-unit or set warmup_steps so the queue fills first"
            ) from exc
        if not math.isfinite(loss):
            raise TrainingDivergedError("non-finite loss", step=t)
        grad_q[rows] = g
        grads = backward(trace, grad_q)
        try:
            state.params_q, state.velocity = sgd_step(
                state.params_q, grads, state.velocity, config.lr, config.momentum, config.weight_decay
            )
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(str(exc), step=t) from exc
    state.params_k = ema_update(state.params_q, state.params_k, config.m)

    K = state.queue.num_classes
    record = {"step": t + 1, "mode": config.mode, "fingerprint": FINGERPRINTS[config.mode],
              "loss": loss, "loss_rows": int(len(rows)), "warmup": bool(warmup)}
    if config.mode == "lacl" and not warmup:
        verdict = qrs.select_updates(k_plus, labels, state.queue.snapshot_all(), config.qrs_temperature)
        admit = verdict.selected
        record["mean_kl"] = verdict.batch_mean_kl
    else:
        admit = np.ones(len(x), dtype=bool)
        record["mean_kl"] = None
    record["selected_fraction"] = float(admit.mean())

    if config.mode == "moco-baseline":
        state.queue.enqueue(0, k_plus)
        record["enqueued_per_class"] = [int(len(x))]
        record["selected_per_class"] = [int(len(x))]
    else:
        enq = []
        for y in range(K):
            chosen = admit & (labels == y)
            state.queue.enqueue(y, k_plus[chosen])
            enq.append(int(chosen.sum()))
        record["enqueued_per_class"] = enq
        record["selected_per_class"] = [int((admit & (labels == y)).sum()) for y in range(K)]
        record["batch_per_class"] = [int((labels == y).sum()) for y in range(K)]
    record["queue_fill"] = state.queue.lengths.tolist()
    state.step = t + 1
    return record


def _rows_with_negatives(queue: LesionQueue, labels, class_aware: bool) -> np.ndarray:
    lengths = queue.lengths
    if not class_aware:
        return np.arange(len(labels)) if lengths.sum() else np.arange(0)
    others = lengths.sum() - lengths[labels]
    return np.flatnonzero(others > 0)


def batch_schedule(train_idx, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Patch indices for global step ``step`` (epoch-wise seeded shuffles)."""
    train_idx = np.asarray(train_idx)
    per_epoch = steps_per_epoch(len(train_idx), batch_size)
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng((seed, _SHUFFLE_STREAM, epoch)).permutation(train_idx)
    return perm[j * batch_size:(j + 1) * batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: Path | None
    log_path: Path | None


def train(
    dataset: SyntheticWsiDataset,
    train_slides,
    config: TrainConfig,
    out_dir=None,
    resume=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train on the patches of ``train_slides``.

    Writes ``final.ckpt``, ``metrics.jsonl`` and cadence checkpoints under
    ``out_dir`` when given. ``max_steps`` stops early (as if interrupted);
    ``resume`` continues from a checkpoint written by an earlier run.
    """
    if config.dims.input_dim != dataset.patches.shape[1]:
        config = replace(config, dims=replace(config.dims, input_dim=dataset.patches.shape[1]))
    config.validate()
    train_idx = dataset.patch_indices(train_slides)
    if len(train_idx) == 0:
        raise InvalidConfigError("training split is empty")
    labels = dataset.pseudo_labels
    per_epoch = steps_per_epoch(len(train_idx), config.batch_size)
    total = per_epoch * config.epochs
    warm = config.warmup_for(per_epoch)

    if resume is not None:
        state = TrainState.from_checkpoint(load_checkpoint(resume, expected_dims=config.dims))
    else:
        state = init_state(config, dataset.num_classes)

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config.checkpoint_every:
            (out / "checkpoints").mkdir(exist_ok=True)
        log_path = out / "metrics.jsonl"
        kept = []
        if resume is not None and log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["step"] <= state.step]
        log_fh = open(log_path, "w")
        for ln in kept:
            log_fh.write(ln + "\n")

    stop = total if max_steps is None else min(total, max_steps)
    try:
        while state.step < stop:
            t0 = time.perf_counter()
            idx = batch_schedule(train_idx, config.batch_size, config.seed, state.step)
            record = train_step(state, dataset.patches[idx], labels[idx], config, idx, warmup=state.step < warm)
            record["epoch"] = (record["step"] - 1) // per_epoch
            record["wall_time"] = time.perf_counter() - t0
            state.history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"step_{state.step:06d}.ckpt", state.to_checkpoint())
    finally:
        if log_fh is not None:
            log_fh.close()

    ckpt_path = None
    if out is not None:
        ckpt_path = out / ("final.ckpt" if state.step >= total else f"partial_{state.step:06d}.ckpt")
        save_checkpoint(ckpt_path, state.to_checkpoint())
    return TrainResult(state, ckpt_path, log_path)
