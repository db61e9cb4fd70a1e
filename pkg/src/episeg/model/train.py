"""Training loop, training log and checkpoint format."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from ..augment import AugmentationConfig, augment
from ..errors import InputError, NonFiniteLoss
from ..sampler import PatchBatch, SamplerConfig
from .mini import ARCH_ID, MiniSegmenter, mini_backward, mini_forward
from .optim import AdamState, OptimizerConfig, PlateauScheduler, adam_step

log = logging.getLogger(__name__)

MAGIC = b"EPSG"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    epochs: int = 10
    steps_per_epoch: int = 50
    val_patches: int = 8
    batch_size: int = 1
    filters: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1 or self.val_patches < 0:
            raise InputError("epochs >= 0, steps_per_epoch >= 1, batch_size >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        kw = {k: v for k, v in d.items() if k in ("epochs", "steps_per_epoch", "val_patches",
                                                  "batch_size", "filters", "seed")}
        if "optimizer" in d:
            kw["optimizer"] = OptimizerConfig.from_dict(d["optimizer"])
        if "sampler" in d:
            kw["sampler"] = SamplerConfig.from_dict(d["sampler"])
        if "augmentation" in d:
            kw["augmentation"] = AugmentationConfig.from_dict(d["augmentation"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    diagnostic: Optional[dict] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])

    @staticmethod
    def read_csv(path) -> "TrainingLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return TrainingLog([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                                        float(r["lr"])) for r in rows])


def validation_loss(net: MiniSegmenter, batches: Sequence[PatchBatch]) -> float:
    if not batches:
        return float("nan")
    return float(np.mean([mini_forward(net, b)[1] for b in batches]))


def train(net: MiniSegmenter, stream: Iterable[PatchBatch], val: Sequence[PatchBatch],
          cfg: OptimizerConfig, epochs: int, steps_per_epoch: int,
          augmentation: Optional[AugmentationConfig] = None, seed: int = 0,
          batch_size: int = 1, progress=None):
    """Optimise ``net.params`` in place; returns ``(net, TrainingLog)``.

    Each step draws ``batch_size`` patches from ``stream``, augments them,
    runs forward/backward and one Adam update at the scheduler's current rate.
    After each epoch the mean loss over ``val`` (never augmented) feeds the
    plateau scheduler.
    """
    it: Iterator[PatchBatch] = iter(stream)
    rng = np.random.default_rng([seed, 7])
    state = AdamState.zeros(net.n_params)
    sched = PlateauScheduler(cfg.learning_rate, cfg.plateau_patience, cfg.lr_halving_factor)
    tlog = TrainingLog(initial_val_loss=validation_loss(net, val))
    step = 0
    for epoch in range(1, epochs + 1):
        lr = sched.lr
        losses = []
        for _ in range(steps_per_epoch):
            batch = [next(it) for _ in range(batch_size)]
            if augmentation is not None:
                batch = [augment(b, augmentation, rng) for b in batch]
            _, loss, grad = mini_backward(net, batch)
            step += 1
            if not np.isfinite(loss):
                tlog.diagnostic = {"epoch": epoch, "step": step, "loss": float(loss), "lr": lr,
                                   "sources": [list(b.source) for b in batch]}
                err = NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {step}")
                err.diagnostic = tlog.diagnostic
                err.log = tlog
                raise err
            net.params, state = adam_step(net.params, grad, state, cfg, lr=lr)
            losses.append(loss)
        vl = validation_loss(net, val)
        train_loss = float(np.mean(losses))
        if np.isfinite(vl):
            sched.step(vl)
        else:
            sched.step(train_loss)
        tlog.records.append(EpochRecord(epoch, train_loss, vl, lr))
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, train_loss, vl, lr)
        if progress is not None:
            progress(tlog.records[-1])
    return net, tlog


# checkpoint: magic, u32 header length, JSON header, float32 little-endian parameters

def save_checkpoint(net: MiniSegmenter, path) -> None:
    header = json.dumps({"architecture": ARCH_ID, "filters": net.filters,
                         "n_params": net.n_params}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(net.params.astype("<f4").tobytes())


def load_checkpoint(path) -> MiniSegmenter:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    if header.get("architecture") != ARCH_ID:
        raise InputError(f"{path}: unknown architecture {header.get('architecture')!r}")
    params = np.frombuffer(data[8 + n:], dtype="<f4").astype(float)
    return MiniSegmenter(header["filters"], params=params)
