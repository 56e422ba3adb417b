"""Training loop, learning-rate schedule and checkpoint container."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .errors import EvaluationError, FormatError, NumericError, ParameterError
from .model import PromptMoEModel
from .numerics import AdamState, ParamGroup, adam_step

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr", "bce", "dice", "focal", "balance", "decouple", "total"]
MAGIC = b"ZSADCKPT"
FORMAT_VERSION = 1


class TrainingAborted(NumericError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Per-step linear warm-up to ``cfg.lr`` over ``warmup_epochs``, then constant."""
    if step < 0:
        raise ParameterError("step must be >= 0")
    warmup = cfg.warmup_epochs * steps_per_epoch
    if warmup <= 0 or step >= warmup:
        return cfg.lr
    return cfg.lr * (step + 1) / warmup


def encode_all(model: PromptMoEModel, images: np.ndarray, chunk: int = 64):
    """Run the frozen vision encoder once over every image."""
    from .encoders import VisionFeatures

    dtype = model.vision.patch_embed.weight.dtype
    parts = []
    for i in range(0, len(images), chunk):
        x = torch.as_tensor(images[i:i + chunk], dtype=dtype)
        parts.append(model.encode(x).stacked)
    cfg = model.cfg.encoder
    return VisionFeatures(torch.cat(parts), cfg.layers, cfg.grid)


@dataclass
class TrainResult:
    log: List[dict] = field(default_factory=list)
    steps: int = 0


def train(model: PromptMoEModel, images: np.ndarray, masks: np.ndarray, labels: np.ndarray, cfg: RunConfig,
          log_path=None, checkpoint_path=None, train_classes=(), callback: Optional[Callable] = None) -> TrainResult:
    """Optimize the trainable parameters of ``model`` in place.

    Mini-batches are drawn from a seeded permutation each epoch; the incomplete
    last batch is dropped. Raises :class:`TrainingAborted` on a non-finite loss,
    after writing the last good parameters to ``checkpoint_path`` (if given).
    """
    tc = cfg.train
    labels = np.asarray(labels)
    if len(images) != len(masks) or len(images) != len(labels):
        raise ParameterError("images, masks and labels must have equal length")
    if tc.epochs > 0 and not ((labels == 0).any() and (labels == 1).any()):
        raise ParameterError("training data must contain both normal and anomalous images")
    steps_per_epoch = len(images) // tc.batch_size
    if tc.epochs > 0 and steps_per_epoch == 0:
        raise ParameterError(f"batch_size {tc.batch_size} exceeds dataset size {len(images)}")

    features = encode_all(model, images)
    masks_t = torch.as_tensor(np.asarray(masks), dtype=features.stacked.dtype)
    labels_t = torch.as_tensor(labels, dtype=features.stacked.dtype)

    groups = [ParamGroup(n, p) for n, p in model.trainable_named_parameters()]
    states = {g.name: AdamState.for_param(g, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps) for g in groups}
    rng = np.random.default_rng(tc.seed)
    result = TrainResult()
    log_fh = writer = None
    if log_path is not None:
        log_fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    model.train()
    try:
        for epoch in range(tc.epochs):
            order = rng.permutation(len(images))
            for b in range(steps_per_epoch):
                idx = torch.as_tensor(order[b * tc.batch_size:(b + 1) * tc.batch_size])
                lr = lr_schedule(result.steps, steps_per_epoch, tc)
                try:
                    out = model(features[idx])
                    parts = model.loss(out, masks_t[idx], labels_t[idx], cfg.loss)
                except EvaluationError as exc:
                    if checkpoint_path is not None:
                        save_checkpoint(model, cfg, checkpoint_path, step=result.steps, train_classes=train_classes)
                    raise TrainingAborted(f"step {result.steps}: {exc}", checkpoint_path) from exc
                for g in groups:
                    g.value.grad = None
                parts.total.backward()
                for g in groups:
                    if g.value.grad is None:
                        g.value.grad = torch.zeros_like(g.value)
                    st = states[g.name]
                    st.lr = lr
                    adam_step(g, st)
                row = {"step": result.steps, "lr": lr, **parts.as_dict()}
                result.log.append(row)
                if writer:
                    writer.writerow({k: repr(float(v)) if k != "step" else v for k, v in row.items()})
                result.steps += 1
            logger.info("epoch %d/%d total=%.4f", epoch + 1, tc.epochs, result.log[-1]["total"] if result.log else float("nan"))
            if callback is not None:
                callback(epoch, model)
    finally:
        if log_fh:
            log_fh.close()
        model.eval()
    if checkpoint_path is not None:
        save_checkpoint(model, cfg, checkpoint_path, step=result.steps, train_classes=train_classes)
    return result


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    header: dict
    params: Dict[str, np.ndarray]

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_dict(self.header["config"])


def save_checkpoint(model: PromptMoEModel, cfg: RunConfig, path, step: int = 0, train_classes=()) -> None:
    """Magic, u32 version, u64 header length, JSON header, then little-endian
    float32 blobs for every trainable parameter in header order."""
    named = model.trainable_named_parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "step": int(step),
        "train_classes": sorted(train_classes),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for _, p in named:
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    head = len(MAGIC) + 12
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    if len(data) < head + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[head:head + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    if header.get("format_version") != version:
        raise FormatError(f"{path}: header/format version mismatch")
    offset = head + hlen
    params = {}
    for spec in header["params"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 4 * n
        if end > len(data):
            raise FormatError(f"{path}: blob for {spec['name']} truncated")
        params[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f4").reshape(spec["shape"]).copy()
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after last blob")
    return Checkpoint(header, params)


def load_into(model: PromptMoEModel, ckpt: Checkpoint) -> PromptMoEModel:
    named = dict(model.trainable_named_parameters())
    missing = sorted(set(named) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(named))
    if missing or extra:
        raise FormatError(f"checkpoint/model parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in ckpt.params.items():
        if tuple(arr.shape) != tuple(named[name].shape):
            raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {tuple(named[name].shape)}")
    with torch.no_grad():
        for name, arr in ckpt.params.items():
            named[name].copy_(torch.from_numpy(arr).to(named[name].dtype))
    return model


def load_checkpoint(path):
    """Rebuild the model described by a checkpoint and load its parameters."""
    ckpt = read_checkpoint(path)
    cfg = ckpt.config
    model = PromptMoEModel(cfg.model_config())
    load_into(model, ckpt)
    model.eval()
    return model, cfg, ckpt
