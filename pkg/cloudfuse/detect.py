"""
Cloud detectors bootstrapped from a trained quality network.

- threshold: a pixel is cloud when its quality is below tau (0.5 by default).
- calibrated: a two-parameter logistic map, P(cloud | Q) = 1 / (1 + exp(beta0 Q + beta1)),
  fitted to a few labelled images by damped Newton iterations.
- fine-tuned: the quality network with everything but its last decoder block and 1x1 head
  frozen, trained on labelled images with BCE + (1 - dice). Its output is read as
  P(clear), so cloud probability is 1 - output, unless `output_is_cloud` is set.
"""
import json
import math
import os
from collections import namedtuple
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .const import PLATT_MAX_ITER, PLATT_MAX_POINTS, PLATT_TOL
from .errors import CalibrationError, ConfigError, DatasetError, MissingFileError, \
    TrainingDivergedError
from .fusion import predict_quality
from .nn import freeze_except_head3
from .optim import build_optimizer
from .tensor import Tensor, bce_loss, dice_coefficient
from .util import _getLogger, derive_rng


log = _getLogger("detect")

FineTuneResult = namedtuple("FineTuneResult", ["net", "losses", "partition"])


@dataclass
class CalibrationParams:
    beta0: float
    beta1: float

    def __post_init__(self):
        self.beta0 = float(self.beta0)
        self.beta1 = float(self.beta1)
        if not (math.isfinite(self.beta0) and math.isfinite(self.beta1)):
            raise CalibrationError("Calibration parameters must be finite: %r" % (self,))

    def probability(self, quality):
        """
        P(cloud | Q) = 1 / (1 + exp(beta0 Q + beta1)).
        """
        return expit(-(self.beta0 * np.asarray(quality, dtype=np.float64) + self.beta1))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise MissingFileError(path)
        with open(path) as f:
            doc = json.load(f)
        try:
            return cls(doc["beta0"], doc["beta1"])
        except (KeyError, TypeError) as exc:
            raise CalibrationError("%s: not a calibration file (%s)" % (path, exc))


def detect_threshold(quality, tau=0.5):
    """
    Cloud where Q < tau; Q == tau counts as clear.
    """
    return (np.asarray(quality) < tau).astype(np.uint8)


def detect_calibrated(quality, params, p_thresh=0.5):
    return (params.probability(quality) > p_thresh).astype(np.uint8)


def _log_likelihood(beta, q, y):
    z = beta[0] * q + beta[1]
    return float(-(y * np.logaddexp(0.0, z) + (1 - y) * np.logaddexp(0.0, -z)).sum())


class PlattFitter(object):
    """
    Maximum-likelihood fit of the two-parameter logistic map. Each iteration solves the
    Newton system with a Levenberg-style damping term that grows until the
    log-likelihood doesn't decrease, so `log_likelihoods` is non-decreasing.
    Converges when the norm of the mean-log-likelihood gradient drops below `tol`.
    """

    def __init__(self, max_iter=PLATT_MAX_ITER, tol=PLATT_TOL):
        self.max_iter = max_iter
        self.tol = tol
        self.log_likelihoods = []
        self.iterations = 0
        self.converged = False
        self._log = _getLogger("PlattFitter")

    def fit(self, qualities, labels):
        q = np.asarray(qualities, dtype=np.float64).ravel()
        y = np.asarray(labels, dtype=np.float64).ravel()
        if q.shape != y.shape:
            raise CalibrationError(
                "Got %d quality values but %d labels" % (q.size, y.size)
            )
        n1 = float(y.sum())
        n0 = y.size - n1
        if n1 == 0 or n0 == 0:
            raise CalibrationError(
                "Labels hold a single class (%d cloud, %d clear); the fit isn't identifiable"
                % (n1, n0)
            )
        n = float(y.size)
        beta = np.array([0.0, math.log((n0 + 1) / (n1 + 1))])
        ll = _log_likelihood(beta, q, y)
        self.log_likelihoods = [ll]
        damping = 1e-3
        for iteration in range(self.max_iter):
            p = expit(-(beta[0] * q + beta[1]))
            residual = p - y
            grad = np.array([(residual * q).sum(), residual.sum()]) / n
            if np.linalg.norm(grad) < self.tol:
                self.converged = True
                break
            w = p * (1 - p)
            hessian = np.array([
                [(w * q * q).sum(), (w * q).sum()],
                [(w * q).sum(), w.sum()],
            ]) / n
            while True:
                step = np.linalg.solve(hessian + damping * np.eye(2), grad)
                candidate = beta + step
                candidate_ll = _log_likelihood(candidate, q, y)
                if candidate_ll >= ll:
                    beta, ll = candidate, candidate_ll
                    damping = max(damping * 0.1, 1e-12)
                    break
                damping *= 10
                if damping > 1e12:
                    break
            self.log_likelihoods.append(ll)
            self.iterations = iteration + 1
            self._log.debug("iteration %d: beta=%s ll=%.6f", self.iterations, beta, ll)
            if damping > 1e12:
                self.converged = True
                break
        return CalibrationParams(beta[0], beta[1])


def fit_platt(qualities, labels, max_points=PLATT_MAX_POINTS, seed=0, max_iter=PLATT_MAX_ITER,
              tol=PLATT_TOL):
    """
    Fit calibration parameters to per-pixel qualities and 0/1 cloud labels, using at most
    `max_points` pixels drawn without replacement.
    """
    q = np.asarray(qualities, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if q.size > max_points:
        keep = np.sort(derive_rng(seed).choice(q.size, size=max_points, replace=False))
        q, y = q[keep], y[keep]
    return PlattFitter(max_iter=max_iter, tol=tol).fit(q, y)


def calibrate(net, samples, max_points=PLATT_MAX_POINTS, seed=0):
    """
    Fit calibration parameters for `net` on (image, cloud mask) pairs.
    """
    if not samples:
        raise DatasetError("No labelled images to calibrate on")
    images = np.stack([image for image, _ in samples])
    masks = np.stack([mask for _, mask in samples])
    qualities = predict_quality(net, images)
    params = fit_platt(qualities, masks, max_points=max_points, seed=seed)
    log.info("Calibrated on %d images: beta0=%.5f beta1=%.5f", len(samples), params.beta0,
             params.beta1)
    return params


@dataclass
class FineTuneConfig:
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 4
    seed: int = 42
    output_is_cloud: bool = False
    max_steps: Optional[int] = None
    lookahead: bool = False
    rectify: bool = False

    def validate(self):
        reasons = {}
        if self.seed < 0:
            reasons["seed"] = "must be >= 0"
        if self.epochs < 1:
            reasons["epochs"] = "must be >= 1"
        if self.lr < 0:
            reasons["lr"] = "must be >= 0"
        if self.batch_size < 1:
            reasons["batch_size"] = "must be >= 1"
        if self.max_steps is not None and self.max_steps < 1:
            reasons["max_steps"] = "must be >= 1"
        if reasons:
            raise ConfigError(reasons)
        return self

    def to_dict(self):
        return asdict(self)


def cloud_probability(output, output_is_cloud=False):
    return output if output_is_cloud else 1.0 - output


def finetune(net, samples, config=None):
    """
    Fine-tune a copy of `net` for cloud detection on (image, cloud mask) pairs, training
    only the head3 parameters with BCE + (1 - dice). `net` itself isn't modified.
    """
    config = (config or FineTuneConfig()).validate()
    if not samples:
        raise DatasetError("No labelled images to fine-tune on")
    net = net.clone()
    partition = freeze_except_head3(net)
    optimizer = build_optimizer(partition.trainable, config.lr, rectify=config.rectify,
                                lookahead=config.lookahead)
    images = np.stack([image for image, _ in samples]).astype(np.float32)
    masks = np.stack([mask for _, mask in samples]).astype(np.float32)[:, None]
    log.info("Fine-tuning %d of %d parameters on %d images", len(partition.trainable),
             len(partition.trainable) + len(partition.frozen), len(samples))

    losses = []
    steps = 0
    for epoch in range(1, config.epochs + 1):
        order = derive_rng(config.seed, epoch).permutation(len(images))
        total = 0.0
        batches = 0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            index = order[start:start + config.batch_size]
            optimizer.zero_grad()
            prob = cloud_probability(net(Tensor(images[index])), config.output_is_cloud)
            loss = bce_loss(prob, masks[index]) + (1.0 - dice_coefficient(prob, masks[index]))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, batch_index, value)
            loss.backward()
            optimizer.step()
            total += value
            batches += 1
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        losses.append((epoch, total / batches))
        log.debug("fine-tune epoch %d loss %.5f", epoch, total / batches)
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return FineTuneResult(net, losses, partition)


class ThresholdDetector(object):
    name = "threshold"

    def __init__(self, net, tau=0.5):
        self.net = net
        self.tau = tau

    def __repr__(self):
        return "<ThresholdDetector tau=%g>" % self.tau

    def predict(self, images):
        return detect_threshold(predict_quality(self.net, images), self.tau)


class CalibratedDetector(object):
    name = "calibrated"

    def __init__(self, net, params, p_thresh=0.5):
        self.net = net
        self.params = params
        self.p_thresh = p_thresh

    def __repr__(self):
        return "<CalibratedDetector beta0=%g beta1=%g>" % (self.params.beta0, self.params.beta1)

    def predict(self, images):
        return detect_calibrated(predict_quality(self.net, images), self.params, self.p_thresh)


class FineTunedDetector(object):
    name = "finetuned"

    def __init__(self, net, output_is_cloud=False, p_thresh=0.5):
        self.net = net
        self.output_is_cloud = output_is_cloud
        self.p_thresh = p_thresh

    def __repr__(self):
        return "<FineTunedDetector output_is_cloud=%s>" % self.output_is_cloud

    def probability(self, images):
        return cloud_probability(predict_quality(self.net, images), self.output_is_cloud)

    def predict(self, images):
        return (self.probability(images) > self.p_thresh).astype(np.uint8)
