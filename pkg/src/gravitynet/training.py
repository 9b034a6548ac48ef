"""Training and inference engine.

One training run: split the dataset, materialize the flip-augmented fold,
precompute the hooking assignment per sample, then run seeded mini-batch Adam
on the gravity loss with a plateau learning-rate schedule. After every epoch
the validation partial AUFC is computed through the full decode/NMS/FROC path
and the best checkpoint is kept. Everything is a deterministic function of
(seed, config, dataset) under single-worker execution.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import anchors, data, evaluation, inference, losses, model as model_mod
from .errors import DataIOError, InvalidInputError, NumericError

CHECKPOINT_MAGIC = "GRAVITYNET-CKPT-1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_patience: int = 3
    lam: float = 10.0
    alpha: float = 0.25
    phi: float = 2.0
    step: int = 10
    hooking_distance: float = 10.0
    box_side: float = 7.0
    iou_threshold: float = 0.5
    prefilter_top_k: int = 5000
    fppi_limit: float = 10.0
    backbone_kind: str = "tiny-desk"
    head_channels: int = 256
    head_depth: int = 4
    downsample_factor: int = 32
    pretrained: bool = False
    validation_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not 0 < self.lr_decay_factor < 1:
            raise InvalidInputError(f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}")

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(lam=self.lam, alpha=self.alpha, phi=self.phi)

    def inference_config(self, score_threshold: float = 0.0) -> inference.InferenceConfig:
        return inference.InferenceConfig(
            box_side=self.box_side,
            iou_threshold=self.iou_threshold,
            score_threshold=score_threshold,
            prefilter_top_k=self.prefilter_top_k,
        )


class PlateauScheduler:
    """Multiply the learning rate by `factor` once the tracked metric has failed
    to improve for `patience` consecutive steps; then start counting afresh."""

    def __init__(self, optimizer, factor: float, patience: int):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_steps = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_steps = 0
        else:
            self.bad_steps += 1
            if self.bad_steps >= self.patience:
                for group in self.optimizer.param_groups:
                    group["lr"] *= self.factor
                self.bad_steps = 0
        return self.lr


def make_grid(image_height: int, image_width: int, config: TrainConfig) -> anchors.GridConfig:
    s = config.downsample_factor
    if image_height % s or image_width % s:
        raise InvalidInputError(
            f"image size {image_height}x{image_width} is not divisible by the "
            f"downsample factor {s}"
        )
    return anchors.GridConfig(
        image_height=image_height,
        image_width=image_width,
        fm_height=image_height // s,
        fm_width=image_width // s,
        step=config.step,
        hooking_distance=config.hooking_distance,
    )


def build_configured_model(grid: anchors.GridConfig, config: TrainConfig) -> model_mod.GravityNet:
    model_config = model_mod.ModelConfig(
        anchors_per_position=anchors.per_grid_count(grid.grid_size, config.step),
        backbone_kind=config.backbone_kind,
        downsample_factor=config.downsample_factor,
        head_channels=config.head_channels,
        head_depth=config.head_depth,
        pretrained=config.pretrained,
    )
    model_mod.validate_model_grid(model_config, grid)
    torch.manual_seed(config.seed)
    net = model_mod.build_model(model_config)
    model_mod.init_heads(net, config.seed)
    return net


def save_checkpoint(path: str, net: model_mod.GravityNet, optimizer, grid: anchors.GridConfig,
                    train_config: TrainConfig, epoch: int, best_metric: float) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "model_config": dataclasses.asdict(net.config),
        "grid_config": dataclasses.asdict(grid),
        "train_config": dataclasses.asdict(train_config),
        "model_state": net.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "best_metric": float(best_metric),
    }
    torch.save(payload, path)


@dataclass
class Checkpoint:
    net: model_mod.GravityNet
    grid: anchors.GridConfig
    train_config: TrainConfig
    optimizer_state: dict | None
    epoch: int
    best_metric: float


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataIOError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise DataIOError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    net = model_mod.build_model(model_mod.ModelConfig(**payload["model_config"]))
    net.load_state_dict(payload["model_state"])
    net.eval()
    return Checkpoint(
        net=net,
        grid=anchors.GridConfig(**payload["grid_config"]),
        train_config=TrainConfig(**payload["train_config"]),
        optimizer_state=payload["optimizer_state"],
        epoch=payload["epoch"],
        best_metric=payload["best_metric"],
    )


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_cls: float
    train_reg: float
    val_loss: float
    val_aufc: float
    lr: float
    train_seconds: float
    val_seconds: float


@dataclass
class RunReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_aufc: float = 0.0
    time_per_epoch_s: float = 0.0
    time_per_image_s: float = 0.0
    throughput_ips: float = 0.0

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_aufc": self.best_val_aufc,
            "timing": {
                "time_per_epoch_s": self.time_per_epoch_s,
                "time_per_image_s": self.time_per_image_s,
                "throughput_ips": self.throughput_ips,
            },
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
        }


def _sample_tensors(samples, points, hooking_distance):
    images = torch.stack([torch.from_numpy(np.ascontiguousarray(s.pixels)) for s in samples])
    labels, targets = [], []
    for s in samples:
        assignment = anchors.hook_gravity_points(points, list(s.lesions), hooking_distance)
        labels.append(torch.from_numpy(assignment.labels))
        targets.append(torch.from_numpy(assignment.target_offsets).float())
    return images.unsqueeze(1), torch.stack(labels), torch.stack(targets)


def _batch_loss(class_probs, offsets, labels, targets, loss_config):
    total = class_probs.new_zeros(())
    cls_total = class_probs.new_zeros(())
    reg_total = class_probs.new_zeros(())
    for k in range(class_probs.shape[0]):
        cls = losses.channel_classification_loss(class_probs[k], labels[k], loss_config)
        reg = losses.regression_loss(offsets[k], targets[k], labels[k])
        total = total + cls + loss_config.lam * reg
        cls_total = cls_total + cls
        reg_total = reg_total + reg
    n = class_probs.shape[0]
    return total / n, cls_total / n, reg_total / n


def detect_image(net, points, sample, infer_config: inference.InferenceConfig):
    """forward -> decode -> tissue mask -> NMS for one prepared sample."""
    preds = model_mod.predict(net, sample.pixels)[0]
    candidates = inference.decode(points, preds, top_k=infer_config.prefilter_top_k)
    candidates = inference.apply_tissue_mask(candidates, sample.mask)
    return inference.nms(candidates, infer_config)


def run_detection(net, grid, samples, infer_config: inference.InferenceConfig, device: str = "cpu"):
    """Detections for a list of samples plus (time-per-image, throughput)."""
    net = net.to(torch.device(device))
    points = anchors.generate_gravity_points(grid)
    out = {}
    t0 = time.perf_counter()
    for sample in samples:
        out[sample.image_id] = detect_image(net, points, sample, infer_config)
    elapsed = time.perf_counter() - t0
    tpi = elapsed / max(1, len(samples))
    return out, tpi, (1.0 / tpi if tpi > 0 else 0.0)


def _validation_aufc(net, points, val_samples, infer_config, fppi_limit):
    dets = {}
    for sample in val_samples:
        dets[sample.image_id] = detect_image(net, points, sample, infer_config)
    matched = evaluation.match_dataset(dets, {s.image_id: s.lesions for s in val_samples})
    return evaluation.partial_aufc(evaluation.froc_curve(matched), fppi_limit)


@dataclass
class TrainResult:
    checkpoint_path: str
    report: RunReport
    split: data.FoldSplit


def train_model(
    dataset: data.Dataset,
    fold: int,
    config: TrainConfig,
    checkpoint_dir: str,
    save_init: bool = False,
    log=lambda msg: None,
    device: str = "cpu",
) -> TrainResult:
    """Train one fold end to end and keep the checkpoint with the best
    validation partial AUFC."""
    os.makedirs(checkpoint_dir, exist_ok=True)
    dev = torch.device(device)
    first = dataset.samples[0]
    grid = make_grid(first.height, first.width, config)
    points = anchors.generate_gravity_points(grid)

    unhealthy = [s.image_id for s in dataset.samples if s.lesions]
    split = data.split_twofold(
        [s.image_id for s in dataset.samples], config.validation_fraction, config.seed, unhealthy
    )[fold]

    train_samples = []
    for image_id in split.train_ids:
        sample = dataset.by_id(image_id)
        train_samples.append(sample)
        train_samples.extend(data.augment_flips(sample))
    val_samples = [dataset.by_id(i) for i in split.val_ids]
    if not val_samples:
        raise InvalidInputError("validation split is empty; raise validation_fraction")

    net = build_configured_model(grid, config).to(dev)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.initial_lr)
    scheduler = PlateauScheduler(optimizer, config.lr_decay_factor, config.lr_patience)
    loss_config = config.loss_config()
    infer_config = config.inference_config()

    if save_init:
        save_checkpoint(os.path.join(checkpoint_dir, "init.pt"), net, None, grid, config, 0, 0.0)

    images, labels, targets = _sample_tensors(train_samples, points, config.hooking_distance)
    val_images, val_labels, val_targets = _sample_tensors(val_samples, points, config.hooking_distance)

    shuffle_gen = torch.Generator().manual_seed(config.seed)
    report = RunReport()
    best_path = os.path.join(checkpoint_dir, "best.pt")
    best_aufc = -math.inf

    for epoch in range(1, config.epochs + 1):
        net.train()
        t_train = time.perf_counter()
        perm = torch.randperm(len(train_samples), generator=shuffle_gen)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            class_probs, offsets = net(images[idx].to(dev))
            total, cls, reg = _batch_loss(
                class_probs, offsets, labels[idx].to(dev), targets[idx].to(dev), loss_config
            )
            if not torch.isfinite(total):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums += [float(total.detach()), float(cls.detach()), float(reg.detach())]
            n_batches += 1
        train_seconds = time.perf_counter() - t_train

        t_val = time.perf_counter()
        net.eval()
        with torch.no_grad():
            val_sum = 0.0
            for start in range(0, len(val_samples), config.batch_size):
                sl = slice(start, start + config.batch_size)
                class_probs, offsets = net(val_images[sl].to(dev))
                total, _, _ = _batch_loss(
                    class_probs, offsets, val_labels[sl].to(dev), val_targets[sl].to(dev), loss_config
                )
                val_sum += float(total) * class_probs.shape[0]
        val_loss = val_sum / len(val_samples)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        val_aufc = _validation_aufc(net, points, val_samples, infer_config, config.fppi_limit)
        val_seconds = time.perf_counter() - t_val

        lr_now = scheduler.lr
        scheduler.step(val_loss)

        stats = EpochStats(
            epoch=epoch,
            train_loss=sums[0] / n_batches,
            train_cls=sums[1] / n_batches,
            train_reg=sums[2] / n_batches,
            val_loss=val_loss,
            val_aufc=val_aufc,
            lr=lr_now,
            train_seconds=train_seconds,
            val_seconds=val_seconds,
        )
        report.epochs.append(stats)
        log(
            f"epoch {epoch:3d}/{config.epochs}  train {stats.train_loss:9.4f}  "
            f"val {val_loss:9.4f}  val_aufc {val_aufc:.4f}  lr {lr_now:.2e}  "
            f"({train_seconds:.1f}s+{val_seconds:.1f}s)"
        )
        if val_aufc > best_aufc:
            best_aufc = val_aufc
            report.best_epoch = epoch
            report.best_val_aufc = val_aufc
            save_checkpoint(best_path, net, optimizer, grid, config, epoch, val_aufc)

    report.time_per_epoch_s = float(np.mean([e.train_seconds for e in report.epochs]))
    mean_val = float(np.mean([e.val_seconds for e in report.epochs]))
    report.time_per_image_s = mean_val / max(1, len(val_samples))
    report.throughput_ips = 1.0 / report.time_per_image_s if report.time_per_image_s > 0 else 0.0
    return TrainResult(checkpoint_path=best_path, report=report, split=split)
