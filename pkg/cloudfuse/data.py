import json
import os
import queue
import threading
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import netpbm
from .errors import DatasetError, MissingFileError, ShapeError
from .util import _getLogger


log = _getLogger("data")


@dataclass
class ImageStack:
    """
    K co-registered RGB images of one location.

    `images` is float32 [K, 3, H, W] in [0, 1]; `labels` is int64 [H, W];
    `cloud_masks` is uint8 [K, H, W] with 1 = cloud.
    """

    location_id: str
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    cloud_masks: Optional[np.ndarray] = None
    coverage: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3 or self.images.shape[0] < 1:
            raise ShapeError(
                "%s: images must be [K>=1, 3, H, W], got %s" % (self.location_id, self.images.shape)
            )
        hw = self.images.shape[2:]
        if self.labels is not None and self.labels.shape != hw:
            raise ShapeError(
                "%s: label map %s doesn't match images %s"
                % (self.location_id, self.labels.shape, hw)
            )
        if self.cloud_masks is not None and self.cloud_masks.shape != (self.k,) + hw:
            raise ShapeError(
                "%s: cloud masks %s don't match %d images of %s"
                % (self.location_id, self.cloud_masks.shape, self.k, hw)
            )

    def __repr__(self):
        return "<ImageStack %r k=%d %dx%d>" % (self.location_id, self.k, self.height, self.width)

    @property
    def k(self):
        return self.images.shape[0]

    @property
    def height(self):
        return self.images.shape[2]

    @property
    def width(self):
        return self.images.shape[3]

    def select(self, indices):
        indices = list(indices)
        return ImageStack(
            self.location_id,
            self.images[indices],
            self.labels,
            None if self.cloud_masks is None else self.cloud_masks[indices],
            None if self.coverage is None else tuple(self.coverage[i] for i in indices),
        )


class Manifest(object):
    """
    A dataset manifest plus the directory its relative paths resolve against.
    """

    def __init__(self, path):
        if not os.path.exists(path):
            raise MissingFileError(path)
        self.path = path
        self.root = os.path.dirname(os.path.abspath(path))
        with open(path) as f:
            try:
                self.document = json.load(f)
            except ValueError as exc:
                raise DatasetError("%s is not valid JSON (%s)" % (path, exc))
        if not isinstance(self.document, dict) or not isinstance(
            self.document.get("locations", []), list
        ):
            raise DatasetError("%s: expected an object with a list of locations" % path)
        self.locations = self.document.get("locations", [])
        self.recipe = self.document.get("recipe", {})
        log.debug("Loaded %s: %d locations", path, len(self.locations))

    def __repr__(self):
        return "<Manifest %r locations=%d>" % (self.path, len(self.locations))

    def __len__(self):
        return len(self.locations)

    @property
    def has_labels(self):
        return bool(self.locations) and all(loc.get("label") for loc in self.locations)

    def stacks(self):
        return [load_stack(entry, self.root) for entry in self.locations]


def load_manifest(path):
    return Manifest(path)


def load_stack(entry, root="."):
    try:
        return _load_stack(entry, root)
    except (KeyError, TypeError, AttributeError) as exc:
        location_id = entry.get("id") if isinstance(entry, dict) else None
        raise DatasetError("Malformed manifest entry for location %r: %s %s"
                           % (location_id, type(exc).__name__, exc))


def _load_stack(entry, root):
    def resolve(rel):
        return os.path.join(root, rel)

    images = []
    masks = []
    for image in entry["images"]:
        rgb = netpbm.read(resolve(image["path"]))
        images.append(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
        if image.get("mask"):
            masks.append((netpbm.read(resolve(image["mask"])) > 127).astype(np.uint8))
    if not images:
        raise DatasetError("Location %r lists no images" % entry.get("id"))
    labels = None
    if entry.get("label"):
        labels = netpbm.read(resolve(entry["label"])).astype(np.int64)
    if masks and len(masks) != len(images):
        raise DatasetError("Location %r has masks for only some images" % entry.get("id"))
    coverage = tuple(image.get("coverage") for image in entry["images"])
    return ImageStack(
        entry.get("id", "?"),
        np.stack(images),
        labels,
        np.stack(masks) if masks else None,
        coverage,
    )


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_crop(stack, size, seed=None):
    """
    Cut the same `size` x `size` window out of every image, mask and the label map.
    """
    if size > stack.height or size > stack.width:
        raise DatasetError(
            "Crop %d is larger than %s (%dx%d)"
            % (size, stack.location_id, stack.height, stack.width)
        )
    rng = _rng(seed)
    top = int(rng.integers(0, stack.height - size + 1))
    left = int(rng.integers(0, stack.width - size + 1))
    window = (slice(top, top + size), slice(left, left + size))
    return ImageStack(
        stack.location_id,
        stack.images[(Ellipsis,) + window],
        None if stack.labels is None else stack.labels[window],
        None if stack.cloud_masks is None else stack.cloud_masks[(Ellipsis,) + window],
        stack.coverage,
    )


def sample_k(stack, k, seed=None):
    """
    Draw `k` images without replacement, keeping their original order.
    """
    if not 1 <= k <= stack.k:
        raise DatasetError("Can't sample %d of %d images from %s" % (k, stack.k, stack.location_id))
    indices = np.sort(_rng(seed).choice(stack.k, size=k, replace=False))
    return stack.select(indices)


def cloud_samples(stacks):
    """
    Flatten stacks into (image [3, H, W], cloud mask [H, W]) pairs.
    """
    samples = []
    for stack in stacks:
        if stack.cloud_masks is None:
            raise DatasetError("%s has no cloud masks" % stack.location_id)
        for j in range(stack.k):
            samples.append((stack.images[j], stack.cloud_masks[j]))
    return samples


_DONE = object()


def prefetch(iterable, depth=2):
    """
    Produce the items of `iterable` on a background thread, at most `depth` ahead.
    Exceptions raised by the producer are re-raised in the consumer.
    """
    if depth < 1:
        for item in iterable:
            yield item
        return
    buffer = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                if stop.is_set():
                    return
                buffer.put(item)
        except BaseException as exc:
            buffer.put(exc)
            return
        buffer.put(_DONE)

    worker = threading.Thread(target=produce, name="cloudfuse-prefetch")
    worker.daemon = True
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                worker.join(0.01)
