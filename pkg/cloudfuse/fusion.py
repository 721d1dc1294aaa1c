"""
Weakly-supervised multi-image fusion.

The quality network scores every pixel of every image in a stack, a softmax across the
stack turns the scores into relative weights, and the weighted average of the images is
the fused image. The fused image goes through the segmentation network and the whole
thing is trained end to end with cross-entropy against land-cover labels only; cloud
locations are never seen by this loop.
"""
import csv
import os
from collections import OrderedDict, namedtuple
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from . import netpbm
from .const import DEFAULT_N_CLASSES
from .data import prefetch, random_crop, sample_k
from .errors import ConfigError, DatasetError, ShapeError, TrainingDivergedError
from .nn import QualityNet, SegNet, save_checkpoint
from .optim import build_optimizer
from .tensor import Tensor, cross_entropy, no_grad, softmax
from .util import _getLogger, derive_rng


log = _getLogger("fusion")

FusionResult = namedtuple("FusionResult", ["fused", "qualities", "weights"])
FusionTrainResult = namedtuple("FusionTrainResult", ["quality_net", "seg_net", "losses"])

LOSS_LOG_NAME = "loss_log.csv"
LAST_CHECKPOINT = "last.ftz"
BEST_CHECKPOINT = "best.ftz"
PREDICTION_NAME = "prediction.pgm"


@dataclass
class TrainConfig:
    """
    Fusion training settings. The defaults are the desk-scale preset; `full()` returns
    the published-scale one.
    """

    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 20
    crop: int = 64
    k: int = 4
    seed: int = 42
    n_classes: int = DEFAULT_N_CLASSES
    quality_widths: List[int] = field(default_factory=lambda: [8, 16, 32])
    seg_widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    lookahead: bool = False
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    rectify: bool = False
    prefetch: int = 2

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides):
        settings = dict(
            lr=1e-4,
            batch_size=10,
            epochs=100,
            crop=416,
            quality_widths=[16, 32, 64, 128, 256],
            seg_widths=[64, 128, 256, 512],
            lookahead=True,
            rectify=True,
        )
        settings.update(overrides)
        return cls(**settings)

    def validate(self):
        reasons = {}
        if self.seed < 0:
            reasons["seed"] = "must be >= 0"
        if self.lr < 0:
            reasons["lr"] = "must be >= 0"
        for name in ("batch_size", "epochs", "crop", "k", "lookahead_k"):
            if getattr(self, name) < 1:
                reasons[name] = "must be >= 1"
        if self.n_classes < 2:
            reasons["n_classes"] = "must be >= 2"
        if len(self.quality_widths) < 2:
            reasons["quality_widths"] = "needs at least two levels"
        if len(self.seg_widths) < 2:
            reasons["seg_widths"] = "needs at least two levels"
        factor = 2 ** (max(len(self.quality_widths), len(self.seg_widths)) - 1)
        if self.crop % factor:
            reasons["crop"] = "must be divisible by %d" % factor
        if not 0.0 <= self.lookahead_alpha <= 1.0:
            reasons["lookahead_alpha"] = "must be in [0, 1]"
        if reasons:
            raise ConfigError(reasons)
        return self

    def to_dict(self):
        return asdict(self)


def fuse_batch(images, net):
    """
    Fuse a batch of stacks. `images` is a Tensor [B, K, 3, H, W]; returns the fused
    Tensor [B, 3, H, W], qualities and relative weights, both [B, K, 1, H, W].
    """
    if images.ndim != 5 or images.shape[2] != 3:
        raise ShapeError("fuse_batch expects [B, K, 3, H, W], got %s" % (images.shape,))
    b, k, c, h, w = images.shape
    qualities = net(images.reshape(b * k, c, h, w)).reshape(b, k, 1, h, w)
    weights = softmax(qualities, axis=1)
    fused = (weights * images).sum(axis=1)
    return FusionResult(fused, qualities, weights)


def _stack_array(stack):
    if hasattr(stack, "images"):
        return stack.images
    arrays = [np.asarray(image, dtype=np.float32) for image in stack]
    if not arrays:
        raise ShapeError("Can't fuse an empty stack")
    shapes = set(a.shape for a in arrays)
    if len(shapes) != 1:
        raise ShapeError("Stack images have mismatched shapes: %s" % sorted(shapes))
    return np.stack(arrays)


def fuse(stack, net):
    """
    Fuse one stack (an ImageStack or a sequence of [3, H, W] arrays). Returns numpy
    arrays: fused [3, H, W], qualities [K, H, W] and relative weights [K, H, W].
    """
    images = _stack_array(stack)
    with no_grad():
        result = fuse_batch(Tensor(images[None]), net)
    return FusionResult(
        result.fused.data[0],
        result.qualities.data[0, :, 0],
        result.weights.data[0, :, 0],
    )


def predict_quality(net, images, batch_size=16):
    """
    Quality masks [N, H, W] for images [N, 3, H, W], without recording gradients.
    """
    images = np.asarray(images)
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(net(Tensor(images[start:start + batch_size])).data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.float32)


def predict_labels(seg_net, fused):
    """
    Arg-max class map [H, W] for one fused image [3, H, W].
    """
    with no_grad():
        logits = seg_net(Tensor(np.asarray(fused)[None]))
    return logits.data[0].argmax(axis=0).astype(np.uint8)


def _collate(stacks):
    images = np.stack([s.images for s in stacks])
    labels = np.stack([s.labels for s in stacks])
    return images, labels


def epoch_batches(stacks, config, epoch):
    """
    Yield (images [B, K, 3, crop, crop], labels [B, crop, crop]) for one epoch. Location
    order, image sampling and crops derive from (seed, epoch, location index) only.
    """
    order = derive_rng(config.seed, epoch).permutation(len(stacks))
    batch = []
    for index in order:
        rng = derive_rng(config.seed, epoch, index)
        stack = random_crop(sample_k(stacks[index], config.k, rng), config.crop, rng)
        batch.append(stack)
        if len(batch) == config.batch_size:
            yield _collate(batch)
            batch = []
    if batch:
        yield _collate(batch)


def write_loss_log(path, losses):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in losses:
            writer.writerow([epoch, "%.8f" % loss])
    return path


def train_fusion(manifest, config, out_dir=None):
    """
    Train the quality and segmentation networks end to end on the labelled stacks of
    `manifest`. With `out_dir`, writes `last.ftz`, `best.ftz` and `loss_log.csv` after
    every epoch.
    """
    config.validate()
    stacks = manifest.stacks() if hasattr(manifest, "stacks") else list(manifest)
    if not stacks:
        raise DatasetError("No locations to train on")
    for stack in stacks:
        if stack.labels is None:
            raise DatasetError("%s has no label map" % stack.location_id)

    quality_net = QualityNet(config.quality_widths, seed=config.seed)
    seg_net = SegNet(config.n_classes, config.seg_widths, seed=config.seed + 1)
    params = OrderedDict(quality_net.named_parameters())
    params.update(seg_net.named_parameters())
    optimizer = build_optimizer(
        params,
        config.lr,
        rectify=config.rectify,
        lookahead=config.lookahead,
        lookahead_k=config.lookahead_k,
        lookahead_alpha=config.lookahead_alpha,
    )
    log.info("Training fusion on %d locations: %r, %r, %r", len(stacks), quality_net, seg_net,
             optimizer)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    losses = []
    best = np.inf
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        count = 0
        batches = prefetch(epoch_batches(stacks, config, epoch), config.prefetch)
        for batch_index, (images, labels) in enumerate(batches):
            optimizer.zero_grad()
            fused = fuse_batch(Tensor(images), quality_net).fused
            loss = cross_entropy(seg_net(fused), labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, batch_index, value)
            loss.backward()
            optimizer.step()
            total += value * len(labels)
            count += len(labels)
            log.debug("epoch %d batch %d loss %.5f", epoch, batch_index, value)
        mean_loss = total / count
        losses.append((epoch, mean_loss))
        log.info("epoch %d/%d mean loss %.5f", epoch, config.epochs, mean_loss)

        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, LAST_CHECKPOINT), quality_net, seg_net)
            if mean_loss < best:
                save_checkpoint(os.path.join(out_dir, BEST_CHECKPOINT), quality_net, seg_net)
            write_loss_log(os.path.join(out_dir, LOSS_LOG_NAME), losses)
        best = min(best, mean_loss)

    return FusionTrainResult(quality_net, seg_net, losses)


def export_quality(stack, net, out_dir, prefix="", seg_net=None):
    """
    Write one P5 quality mask per image (Q scaled to 0-255) and the fused P6 image. With
    `seg_net`, also write its arg-max label map of the fused image. Returns the written
    paths, masks first.
    """
    result = fuse(stack, net)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for j, quality in enumerate(result.qualities):
        path = os.path.join(out_dir, "%squality_%d.pgm" % (prefix, j))
        paths.append(netpbm.write(path, netpbm.to_bytes01(quality)))
    fused_path = os.path.join(out_dir, "%sfused.ppm" % prefix)
    paths.append(netpbm.write(fused_path, netpbm.to_bytes01(result.fused.transpose(1, 2, 0))))
    if seg_net is not None:
        prediction_path = os.path.join(out_dir, "%s%s" % (prefix, PREDICTION_NAME))
        paths.append(netpbm.write(prediction_path, predict_labels(seg_net, result.fused)))
    log.debug("Exported %d quality masks and fused image to %s", result.qualities.shape[0], out_dir)
    return paths
