"""
This package fuses stacks of co-registered, partly cloudy overhead images into one
clear image, learning a per-pixel image quality without ever being told where the clouds
are, and then bootstraps cloud detectors from that learned quality. It carries its own
small reverse-mode autodiff tensor library on top of numpy; Pillow reads and writes the
NetPBM images.

The usual flow is:

- Generate (or collect) a dataset.

  Each location is a label map of land-cover classes plus K images of it, each under
  its own cloud layer. generate_dataset() writes a synthetic one, with NetPBM images and
  a manifest.json; every location is addressed by a real XYZ map tile.

- Train the fusion pipeline.

  The quality network scores every pixel of every image, a softmax across the stack
  turns those scores into weights, and the weighted average goes through a segmentation
  network. train_fusion() trains both networks end to end with cross-entropy against the
  land-cover labels only. Clouds hurt segmentation, so cloudy pixels learn low quality.

- Bootstrap a cloud detector.

  The threshold detector calls a pixel cloud when its quality is below 0.5. The
  calibrated detector fits a two-parameter logistic map from quality to P(cloud) on a
  handful of labelled images (fit_platt()). The fine-tuned detector trains only the last
  three convolutions of a copy of the quality network on labelled images (finetune()).

- Evaluate.

  run_benchmark() scores detectors with TPR, TNR, mIoU and accuracy and writes a JSON
  report and a text table; size_sweep() traces accuracy against the number of labelled
  images used for fine-tuning.

Classes:

* Tensor: numpy array with gradient tracking; GradientGraph runs the backward pass.
* QualityNet, SegNet: the quality U-Net and the LinkNet-style segmentation network.
* Adam, Lookahead: optimizers.
* SceneRecipe, TrainConfig, FineTuneConfig: configuration dataclasses.
* ImageStack, Manifest: datasets on disk and in memory.
* ThresholdDetector, CalibratedDetector, FineTunedDetector: cloud detectors.

The following example trains on a small synthetic dataset and evaluates the detectors:

------------------------------------------------------------------------------
import cloudfuse

cloudfuse.generate_dataset(cloudfuse.SceneRecipe(seed=1), 64, "train-data")
cloudfuse.generate_dataset(cloudfuse.SceneRecipe(seed=2), 16, "test-data")

result = cloudfuse.train_fusion(cloudfuse.load_manifest("train-data/manifest.json"),
                                cloudfuse.TrainConfig(seed=42))
labelled = cloudfuse.cloud_samples(cloudfuse.load_manifest("test-data/manifest.json").stacks())
params = cloudfuse.calibrate(result.quality_net, labelled[:4])
print(cloudfuse.CalibratedDetector(result.quality_net, params))
------------------------------------------------------------------------------

The same steps are available from the command line, see `cloudfuse --help`.
"""
from cloudfuse import const, errors, marshal, tensor, util  # noqa: F401
from .data import ImageStack, Manifest, cloud_samples, load_manifest
from .detect import (
    CalibratedDetector,
    CalibrationParams,
    FineTuneConfig,
    FineTunedDetector,
    ThresholdDetector,
    calibrate,
    finetune,
    fit_platt,
)
from .errors import CloudFuseError
from .evaluate import accumulate, metrics, run_benchmark, size_sweep
from .fusion import TrainConfig, fuse, train_fusion
from .nn import QualityNet, SegNet, freeze_except_head3, load_checkpoint, save_checkpoint
from .optim import Adam, Lookahead
from .synth import SceneRecipe, generate_dataset
from .tensor import GradientGraph, Tensor, no_grad
from .tiles import TileCoord, lonlat_to_tile

__all__ = [
    "Tensor",
    "GradientGraph",
    "no_grad",
    "Adam",
    "Lookahead",
    "QualityNet",
    "SegNet",
    "freeze_except_head3",
    "save_checkpoint",
    "load_checkpoint",
    "TileCoord",
    "lonlat_to_tile",
    "SceneRecipe",
    "generate_dataset",
    "ImageStack",
    "Manifest",
    "load_manifest",
    "cloud_samples",
    "TrainConfig",
    "fuse",
    "train_fusion",
    "CalibrationParams",
    "FineTuneConfig",
    "fit_platt",
    "calibrate",
    "finetune",
    "ThresholdDetector",
    "CalibratedDetector",
    "FineTunedDetector",
    "accumulate",
    "metrics",
    "run_benchmark",
    "size_sweep",
    "CloudFuseError",
]
