"""Supervised fine-tuning on a labeled fraction, and test-set evaluation."""
from __future__ import annotations

import csv
import logging

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointBundle, load_groups_into
from .data import DatasetManifest, load_tile_image, load_tile_mask
from .metrics import ConfusionMatrix, MetricReport, compute_metrics
from .network import SegmentationModel, parameter_groups

logger = logging.getLogger(__name__)


class FinetuneError(ValueError):
    pass


@dataclass
class FinetuneSchedule:
    """Optimizer schedule: adaptive moments with per-epoch multiplicative decay."""

    epochs: int = 150
    batch_size: int = 16
    initial_lr: float = 0.001
    lr_decay: float = 0.98

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay**epoch


@dataclass
class TrainLogRow:
    epoch: int
    loss: float
    lr: float


def finetune(
    model: SegmentationModel,
    manifest: DatasetManifest,
    base_dir: Path,
    schedule: FinetuneSchedule,
    seed: int,
    bundle: CheckpointBundle | None = None,
    load_groups: tuple[str, ...] = (),
    out_dir: Path | None = None,
    config_hash: str = "",
) -> tuple[SegmentationModel, list[TrainLogRow]]:
    """Train the segmentation network on the labeled subset.

    ``model`` must be freshly initialized from the fine-tune seed; only the
    groups named in ``load_groups`` are then overwritten from the bundle,
    so an empty tuple is the train-from-scratch baseline. All parameters
    train regardless of where they were initialized from. Projection heads
    take no part in this stage.
    """
    if len(manifest) == 0:
        raise FinetuneError("finetune manifest is empty")
    entries = manifest.resolve(base_dir)
    if any(mask is None for _, mask in entries):
        raise FinetuneError("every finetune manifest entry needs a mask")
    if load_groups:
        if bundle is None:
            raise FinetuneError("load_groups given but no checkpoint bundle")
        load_groups_into(bundle, parameter_groups(model), set(load_groups))

    images = torch.from_numpy(np.stack([load_tile_image(p) for p, _ in entries])).to(
        memory_format=torch.channels_last
    )
    masks = torch.from_numpy(np.stack([load_tile_mask(m) for _, m in entries]))

    model.to(memory_format=torch.channels_last)
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.initial_lr)
    criterion = torch.nn.CrossEntropyLoss()
    rows: list[TrainLogRow] = []

    model.train()
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(
            len(entries)
        )
        losses = []
        for start in range(0, len(order), schedule.batch_size):
            ids = torch.from_numpy(order[start : start + schedule.batch_size].copy())
            logits = model(images[ids])
            loss = criterion(logits, masks[ids])
            if not torch.isfinite(loss):
                raise FinetuneError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        epoch_loss = float(np.mean(losses))
        rows.append(TrainLogRow(epoch, epoch_loss, lr))
        logger.info("finetune epoch %d: loss %.5f (lr %.5g)", epoch, epoch_loss, lr)

    if out_dir is not None:
        write_train_log(rows, Path(out_dir) / "train_log.csv", config_hash)
    return model, rows


def write_train_log(rows: list[TrainLogRow], path: Path, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "lr"])
        for r in rows:
            writer.writerow([r.epoch, f"{r.loss:.12g}", f"{r.lr:.12g}"])


def evaluate(
    model: SegmentationModel,
    manifest: DatasetManifest,
    base_dir: Path,
    batch_size: int = 32,
    ignore_classes: tuple[int, ...] = (),
) -> tuple[ConfusionMatrix, MetricReport]:
    """Accumulate a confusion matrix over all test pixels and derive metrics."""
    if len(manifest) == 0:
        raise FinetuneError("test manifest is empty")
    entries = manifest.resolve(base_dir)
    if any(mask is None for _, mask in entries):
        raise FinetuneError("every test manifest entry needs a mask")

    cm = ConfusionMatrix.zeros(model.config.num_classes)
    model.eval()
    model.to(memory_format=torch.channels_last)
    with torch.no_grad():
        for start in range(0, len(entries), batch_size):
            chunk = entries[start : start + batch_size]
            images = torch.from_numpy(np.stack([load_tile_image(p) for p, _ in chunk])).to(
                memory_format=torch.channels_last
            )
            masks = np.stack([load_tile_mask(m) for _, m in chunk])
            pred = model(images).argmax(dim=1).numpy()
            cm.update(masks, pred)
    return cm, compute_metrics(cm, ignore_classes)
