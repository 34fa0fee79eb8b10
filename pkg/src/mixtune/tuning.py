"""Two-stage progressive contrastive retraining, plus the pretraining loop.

Stage 1 trains the projection head on a frozen encoder; stage 2 unfreezes
the top half of the blocks under layer-wise learning-rate decay.  Both
stages mix each batch, use the mixed samples as anchors and the unmixed
originals as positives, score anchors against the batch positives through a
nearest-neighbor support queue, and push the positives' embeddings into the
queue after every update.

The optimizer is SGD with momentum 0.9, 5% linear warmup and cosine decay
to zero within each stage.  Everything is a pure function of (state,
dataset, config, seed): logs and final parameters are bit-reproducible.

Desk-scale defaults (epochs 10/40, batches 32/32, lr 5e-2/3e-2) are sized
for minutes on one CPU core; the full-scale reference configuration this
procedure mirrors uses 40/160 epochs, batches 512/128, lr 1e-4, decay 0.65.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .data import Dataset
from .errors import NumericalError, StateError
from .mixing import MixParams, label_matrix, mix_batch
from .objective import ContrastiveBatch, SupportQueue, mixed_loss, queue_push

__all__ = ["TuneConfig", "StepRecord", "RunLog", "llrd_rates", "run_pretrain", "run_stage1", "run_stage2"]

MOMENTUM = 0.9
WARMUP_FRAC = 0.05


@dataclass
class TuneConfig:
    """Hyperparameters for both tuning stages."""

    stage1_epochs: int = 10
    stage1_lr: float = 5e-2
    stage1_batch: int = 32
    stage2_epochs: int = 40
    stage2_lr: float = 3e-2
    stage2_batch: int = 32
    llrd_factor: float = 0.65
    tau: float = 0.15
    k: int = 1
    queue_capacity: int = 1024
    mix: MixParams = field(default_factory=MixParams)
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.mix, dict):
            self.mix = MixParams(**self.mix)
        if min(self.stage1_epochs, self.stage2_epochs, self.stage1_batch,
               self.stage2_batch, self.k, self.queue_capacity) < 1:
            raise ValueError("counts must be >= 1")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if not (0.0 < self.llrd_factor <= 1.0):
            raise ValueError("llrd_factor must lie in (0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass
class StepRecord:
    step: int
    stage: str
    loss: float
    lr_by_group: dict[str, float]


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)
    epoch_means: list[tuple[int, float]] = field(default_factory=list)

    def add(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("step index must increase")
        if not np.isfinite(rec.loss):
            raise NumericalError(f"non-finite loss at step {rec.step}")
        self.records.append(rec)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def write_csv(self, path, depth: int) -> None:
        """Per-step rows: step, stage, loss, lr_head, lr_block_0.."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["step", "stage", "loss", "lr_head"] + [f"lr_block_{i}" for i in range(depth)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow(
                    [r.step, r.stage, repr(r.loss), repr(r.lr_by_group.get("head", 0.0))]
                    + [repr(r.lr_by_group.get(f"block{i}", 0.0)) for i in range(depth)]
                )


def llrd_rates(base_lr: float, gamma: float, depth: int) -> list[float]:
    """Per-block learning rates, top block first: base_lr * gamma**t at
    depth-from-top t.  The head always uses base_lr."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return [base_lr * gamma**t for t in range(depth)]


def _group_rates(state: enc.EncoderState, base_lr: float, gamma: float) -> dict[str, float]:
    depth = state.config.depth
    top_down = llrd_rates(base_lr, gamma, depth)
    rates = {g: base_lr for g in state.trainable}
    for i in range(depth):
        rates[f"block{i}"] = top_down[depth - 1 - i]
    return rates


def _schedule(step: int, total: int) -> float:
    """Linear warmup over the first 5% of steps, then cosine to zero."""
    warm = max(1, int(round(WARMUP_FRAC * total)))
    if step < warm:
        return (step + 1) / warm
    if total == warm:
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * (step - warm) / (total - warm)))


class _Momentum:
    def __init__(self, state: enc.EncoderState):
        self.v = {n: np.zeros_like(a) for n, a in state.params.items()}

    def step(self, state, grads, rates: dict[str, float]) -> None:
        for name, g in grads.items():
            group = enc.group_of(name)
            if not state.trainable[group]:
                continue
            self.v[name] = MOMENTUM * self.v[name] + g
            state.params[name] -= rates[group] * self.v[name]


def _n_batches(n: int, batch: int) -> int:
    full, rem = divmod(n, batch)
    return full + (1 if rem >= 2 else 0)


def _batches(n: int, batch: int, rng: np.random.Generator):
    """Shuffled batches of indices; size-1 tails are dropped (mixing needs
    two items)."""
    order = rng.permutation(n)
    for lo in range(0, n, batch):
        idx = order[lo:lo + batch]
        if idx.size >= 2:
            yield idx


def _project_all(state: enc.EncoderState, values: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, values.shape[0], batch):
        _, _, proj = enc.forward(state, values[lo:lo + batch])
        out.append(proj)
    return np.concatenate(out, axis=0)


def _warm_queue(state, values, capacity: int, rng: np.random.Generator) -> SupportQueue:
    """One forward-only pass over the dataset in shuffled order."""
    q = SupportQueue(capacity)
    order = rng.permutation(values.shape[0])
    queue_push(q, _project_all(state, values[order]))
    return q


def _run_contrastive_stage(
    state: enc.EncoderState,
    ds: Dataset,
    cfg: TuneConfig,
    stage: str,
) -> RunLog:
    if stage == "stage1":
        enc.set_trainable(state, enc.TrainStage.HEAD_ONLY)
        epochs, lr, batch = cfg.stage1_epochs, cfg.stage1_lr, cfg.stage1_batch
        llrd = 1.0  # single trainable group; no ladder
    else:
        enc.set_trainable(state, enc.TrainStage.TOP_HALF)
        epochs, lr, batch = cfg.stage2_epochs, cfg.stage2_lr, cfg.stage2_batch
        llrd = cfg.llrd_factor

    rng = np.random.default_rng([cfg.seed, 1 if stage == "stage1" else 2])
    values = ds.values
    q = _warm_queue(state, values, cfg.queue_capacity, rng)
    opt = _Momentum(state)
    log = RunLog()
    total = epochs * _n_batches(values.shape[0], batch)

    step = 0
    for epoch in range(epochs):
        epoch_losses = []
        for idx in _batches(values.shape[0], batch, rng):
            anchors_raw = values[idx]
            pairs = mix_batch(anchors_raw, cfg.mix, rng)
            mixed = np.stack([p.m.values for p in pairs])
            y = label_matrix(pairs)

            _, _, z = enc.forward(state, mixed)
            _, _, z_pos = enc.forward(state, anchors_raw, record=True)
            cb = ContrastiveBatch(z=z, z_pos=z_pos, y=y, tau=cfg.tau)
            loss, _, d_z_pos = mixed_loss(cb, q, cfg.k)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite contrastive loss at step {step}")
            grads = enc.backward(state, d_projected=d_z_pos)
            # nominal per-group rates at this step; frozen groups' rates are
            # logged but their updates are zero regardless
            applied = _group_rates(state, _schedule(step, total) * lr, llrd)
            opt.step(state, grads, applied)
            queue_push(q, z_pos)

            log.add(StepRecord(step=step, stage=stage, loss=loss, lr_by_group=applied))
            epoch_losses.append(loss)
            step += 1
            state.step += 1
        log.epoch_means.append((epoch, float(np.mean(epoch_losses))))
    state.stage = stage
    return log


def run_stage1(state: enc.EncoderState, ds: Dataset, cfg: TuneConfig) -> RunLog:
    """Head-only contrastive tuning on a frozen encoder.

    The encoder must come out of masked-reconstruction pretraining (or a
    loaded checkpoint); every non-head parameter is bit-identical afterwards.
    """
    if ds.n < 2:
        raise ValueError("dataset must hold at least 2 items")
    return _run_contrastive_stage(state, ds, cfg, "stage1")


def run_stage2(state: enc.EncoderState, ds: Dataset, cfg: TuneConfig) -> RunLog:
    """Top-half retraining with layer-wise lr decay; requires stage-1 output."""
    if state.stage != "stage1":
        raise StateError(f"stage 2 requires a stage-1 state, got {state.stage!r}")
    if ds.n < 2:
        raise ValueError("dataset must hold at least 2 items")
    return _run_contrastive_stage(state, ds, cfg, "stage2")


def run_pretrain(
    state: enc.EncoderState,
    ds: Dataset,
    epochs: int = 20,
    batch: int = 32,
    mask_ratio: float = 0.75,
    lr: float = 1e-3,
    seed: int = 0,
) -> RunLog:
    """Masked-reconstruction pretraining loop over the dataset.

    Leaves the state tagged "mae"; resuming continues the step counter.
    """
    if epochs < 1 or batch < 1:
        raise ValueError("epochs and batch must be >= 1")
    enc.set_trainable(state, enc.TrainStage.ALL)
    rng = np.random.default_rng([seed, 0])
    log = RunLog()
    step = 0
    for epoch in range(epochs):
        epoch_losses = []
        order = rng.permutation(ds.n)
        for lo in range(0, ds.n, batch):
            idx = order[lo:lo + batch]
            loss = enc.mae_pretrain_step(state, ds.values[idx], mask_ratio, rng, lr=lr)
            log.add(StepRecord(step=step, stage="mae", loss=loss,
                               lr_by_group={g: lr for g in state.trainable}))
            epoch_losses.append(loss)
            step += 1
        log.epoch_means.append((epoch, float(np.mean(epoch_losses))))
    state.stage = "mae"
    return log
