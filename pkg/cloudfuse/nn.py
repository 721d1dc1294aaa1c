"""
Network definitions: the quality network (a small U-Net with a sigmoid head), the
segmentation network (a LinkNet-style residual encoder/decoder with additive skips), and
the helpers for freezing parameters and reading/writing checkpoints.

Parameter names are hierarchical, "quality.enc0.conv1.weight", and follow attribute
assignment order, which is also initialisation order. Two networks built with the same
seed are bitwise identical.
"""
import json
import os
from collections import OrderedDict, namedtuple

import numpy as np

from . import marshal
from .errors import CheckpointError, MissingFileError, ShapeError
from .tensor import (
    Tensor,
    concat,
    conv2d,
    max_pool2x,
    relu,
    sigmoid,
    upsample_nearest2x,
)
from .util import _getLogger


HEAD3 = ("dec0.conv1", "dec0.conv2", "head")

ParameterPartition = namedtuple("ParameterPartition", ["frozen", "trainable"])


class Module(object):
    scope = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=None):
        if prefix is None:
            prefix = self.scope + "." if self.scope else ""
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                for item in value.named_parameters(prefix + name + "."):
                    yield item

    def parameters(self):
        return OrderedDict(self.named_parameters())

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state, path="<state>"):
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise CheckpointError(path, "missing entries: %s" % ", ".join(missing))
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(
                    path, "%s has shape %s, expected %s" % (name, value.shape, p.shape)
                )
            p.data = value.astype(p.dtype, copy=True)

    def clone(self):
        other = type(self)(**self.config_kwargs())
        other.load_state_dict(self.state_dict())
        return other

    def config(self):
        return dict(type=type(self).__name__, **self.config_kwargs())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 rng=None, dtype=np.float32, zero_init=False):
        if padding is None:
            padding = kernel_size // 2
        self._stride = stride
        self._padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            weight = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
            weight = (rng.standard_normal(shape) * std).astype(dtype)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class ConvBlock(Module):
    """
    conv3x3 -> relu -> conv3x3 -> relu
    """

    def __init__(self, in_channels, out_channels, rng, dtype):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng, dtype=dtype)

    def forward(self, x):
        return relu(self.conv2(relu(self.conv1(x))))


class ResidualBlock(Module):
    def __init__(self, in_channels, out_channels, stride, rng, dtype):
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng, dtype=dtype)
        if in_channels != out_channels or stride != 1:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng,
                                   dtype=dtype)
        else:
            self.shortcut = None

    def forward(self, x):
        residual = x if self.shortcut is None else self.shortcut(x)
        return relu(self.conv2(relu(self.conv1(x))) + residual)


def _check_divisible(x, levels, net_name):
    if x.ndim != 4:
        raise ShapeError("%s expects [N,C,H,W] input, got %s" % (net_name, x.shape))
    factor = 2 ** levels
    _, _, height, width = x.shape
    if height % factor or width % factor:
        pad_h = -height % factor
        pad_w = -width % factor
        raise ShapeError(
            "%s needs H and W divisible by %d, got %dx%d; pad by %d rows and %d columns"
            % (net_name, factor, height, width, pad_h, pad_w)
        )


class QualityNet(Module):
    """
    Per-pixel image quality in [0, 1].

    Encoder levels are conv blocks followed by 2x max pooling, one per width except the
    last, which is the bottleneck. Decoder levels upsample 2x, concatenate the encoder
    skip and run a conv block. A 1x1 convolution and a sigmoid produce one channel.
    """

    scope = "quality"

    def __init__(self, widths=(8, 16, 32), seed=0, in_channels=3, dtype=np.float32):
        if len(widths) < 2:
            raise ValueError("QualityNet needs at least two widths, got %r" % (widths,))
        self._widths = tuple(int(w) for w in widths)
        self._seed = int(seed)
        self._in_channels = in_channels
        self._dtype = np.dtype(dtype)
        self._levels = len(widths) - 1
        self._log = _getLogger("QualityNet")

        rng = np.random.default_rng(seed)
        channels = in_channels
        for i, width in enumerate(widths[:-1]):
            setattr(self, "enc%d" % i, ConvBlock(channels, width, rng, dtype))
            channels = width
        self.bottleneck = ConvBlock(channels, widths[-1], rng, dtype)
        channels = widths[-1]
        for i in reversed(range(self._levels)):
            setattr(self, "dec%d" % i, ConvBlock(channels + widths[i], widths[i], rng, dtype))
            channels = widths[i]
        self.head = Conv2d(channels, 1, 1, rng=rng, dtype=dtype)

    def __repr__(self):
        return "<QualityNet widths=%s>" % (list(self._widths),)

    def config_kwargs(self):
        return dict(widths=list(self._widths), seed=self._seed,
                    in_channels=self._in_channels, dtype=self._dtype.name)

    def forward(self, image):
        _check_divisible(image, self._levels, "QualityNet")
        skips = []
        h = image
        for i in range(self._levels):
            h = getattr(self, "enc%d" % i)(h)
            skips.append(h)
            h = max_pool2x(h)
        h = self.bottleneck(h)
        for i in reversed(range(self._levels)):
            h = concat([upsample_nearest2x(h), skips[i]], axis=1)
            h = getattr(self, "dec%d" % i)(h)
        return sigmoid(self.head(h))

    def head3_names(self):
        prefixes = tuple("%s.%s." % (self.scope, block) for block in HEAD3)
        return [name for name, _ in self.named_parameters() if name.startswith(prefixes)]


class SegNet(Module):
    """
    Per-pixel class logits. A conv stem feeds residual stages (the first at full
    resolution, the rest downsampling 2x with strided convolutions); each decoder stage
    upsamples 2x, convolves down to the previous width and adds the encoder skip. The
    1x1 head starts at zero, so an untrained network predicts uniform posteriors.
    """

    scope = "seg"

    def __init__(self, n_classes=6, widths=(16, 32, 64), seed=0, in_channels=3,
                 dtype=np.float32, zero_head=True):
        self._n_classes = int(n_classes)
        self._widths = tuple(int(w) for w in widths)
        self._seed = int(seed)
        self._in_channels = in_channels
        self._dtype = np.dtype(dtype)
        self._zero_head = zero_head
        self._levels = len(widths) - 1

        rng = np.random.default_rng(seed)
        self.stem = Conv2d(in_channels, widths[0], 3, rng=rng, dtype=dtype)
        channels = widths[0]
        for i, width in enumerate(widths):
            stride = 1 if i == 0 else 2
            setattr(self, "enc%d" % i, ResidualBlock(channels, width, stride, rng, dtype))
            channels = width
        for i in reversed(range(1, len(widths))):
            setattr(self, "dec%d" % i, Conv2d(widths[i], widths[i - 1], 3, rng=rng, dtype=dtype))
        self.head = Conv2d(widths[0], n_classes, 1, rng=rng, dtype=dtype, zero_init=zero_head)

    def __repr__(self):
        return "<SegNet classes=%d widths=%s>" % (self._n_classes, list(self._widths))

    @property
    def n_classes(self):
        return self._n_classes

    def config_kwargs(self):
        return dict(n_classes=self._n_classes, widths=list(self._widths), seed=self._seed,
                    in_channels=self._in_channels, dtype=self._dtype.name,
                    zero_head=self._zero_head)

    def forward(self, image):
        _check_divisible(image, self._levels, "SegNet")
        h = relu(self.stem(image))
        skips = []
        for i in range(len(self._widths)):
            h = getattr(self, "enc%d" % i)(h)
            skips.append(h)
        for i in reversed(range(1, len(self._widths))):
            h = relu(getattr(self, "dec%d" % i)(upsample_nearest2x(h))) + skips[i - 1]
        return self.head(h)


NETWORK_TYPES = {
    "QualityNet": QualityNet,
    "SegNet": SegNet,
}


def freeze_except_head3(net):
    """
    Split the quality network's parameters into frozen and trainable sets. Only the last
    decoder block's two convolutions and the final 1x1 convolution stay trainable; the
    others stop requiring gradients, so optimizers never see a gradient for them.
    """
    head3 = set(net.head3_names())
    frozen = OrderedDict()
    trainable = OrderedDict()
    for name, p in net.named_parameters():
        if name in head3:
            p.requires_grad = True
            trainable[name] = p
        else:
            p.requires_grad = False
            p.zero_grad()
            frozen[name] = p
    return ParameterPartition(frozen, trainable)


def parameter_count(params):
    return int(sum(p.size for p in params.values()))


def manifest_path(path):
    return "%s.json" % path


def save_checkpoint(path, *nets):
    """
    Write the parameters of `nets` into one FTZ file, plus a JSON manifest beside it that
    records each network's constructor config and the head3 parameter names.
    """
    log = _getLogger("checkpoint")
    state = OrderedDict()
    networks = OrderedDict()
    head3 = []
    for net in nets:
        state.update(net.state_dict())
        networks[net.scope] = net.config()
        if isinstance(net, QualityNet):
            head3.extend(net.head3_names())
    marshal.dump(state, path)
    manifest = dict(format="FTZ", version=marshal.VERSION, entries=len(state),
                    networks=networks, head3=head3)
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    log.debug("Wrote %d tensors to %s", len(state), path)
    return path


def load_checkpoint(path):
    """
    Rebuild the networks stored in a checkpoint. Returns a dict of scope -> network.
    """
    if not os.path.exists(path):
        raise MissingFileError(path)
    if not os.path.exists(manifest_path(path)):
        raise MissingFileError(manifest_path(path))
    with open(manifest_path(path)) as f:
        manifest = json.load(f)
    state = marshal.load(path)
    nets = OrderedDict()
    for scope, config in manifest["networks"].items():
        config = dict(config)
        try:
            cls = NETWORK_TYPES[config.pop("type")]
        except KeyError:
            raise CheckpointError(path, "unknown network type in %s" % manifest_path(path))
        net = cls(**config)
        net.load_state_dict(state, path=path)
        nets[scope] = net
    return nets
