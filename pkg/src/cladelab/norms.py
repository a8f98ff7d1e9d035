"""The conditional-normalization family.

Every layer here decomposes into the same two steps: statistical
normalization (subtract mean, divide by standard deviation) followed by an
affine modulation ``gamma * xhat + beta``. The layers differ only in where
the modulation parameters come from:

* ``batch_norm`` / ``instance_norm``: learned per-channel constants (or none).
* ``conditional_in``: per-channel constants looked up for one class id.
* ``spade_forward``: dense modulation maps regressed from the one-hot mask
  by a two-conv network, so the modulation is spatially varying.
* ``clade_forward``: modulation filled per pixel from a per-class parameter
  bank ("guided sampling"), so it is class-aware but spatially flat.
* ``edge_modulate``: a single learned affine over an instance-boundary map,
  concatenated to features downstream.

Statistics are computed over (H, W) per sample for instance-style layers
and over (N, H, W) per channel for batch-style layers; class-adaptive and
spatially-adaptive layers normalize batch-style, which is what makes the
class-uniform parameter bank degenerate exactly to plain batch norm.
"""

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError, Tensor, _record, affine, conv2d, mul, relu,
    reshape, sqrt, tmean,
)

__all__ = [
    "SegmentationMask", "ParamBank", "NormStats", "SpadeBlockParams",
    "EdgeModParams", "xavier_init", "instance_norm", "batch_norm",
    "conditional_in", "guided_sample", "clade_forward", "spade_forward",
    "edge_map", "edge_modulate",
]


def xavier_init(seed):
    """Name-keyed Glorot-uniform initializer.

    Each parameter draws from an RNG seeded by (seed, crc32(name)), so a
    parameter's values depend only on the build seed and its own path, never
    on how many other parameters were created before it. Backbones shared
    between norm modes therefore initialize identically.
    """

    def init(name, shape):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
        if len(shape) > 1:
            fan_in = int(np.prod(shape[1:]))
            fan_out = shape[0] * (int(np.prod(shape[2:])) if len(shape) > 2 else 1)
        else:
            fan_in = fan_out = shape[0]
        limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
        return rng.uniform(-limit, limit, size=shape)

    return init


@dataclass
class SegmentationMask:
    """Integer label grid with labels in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            self.labels = self.labels.astype(np.int32)
        _check_labels(self.labels, self.num_classes)

    @property
    def shape(self):
        return self.labels.shape

    def downsample(self, h, w):
        """Nearest-neighbor downsample; labels are categorical, never blended."""
        fh, fw = self.labels.shape[0] // h, self.labels.shape[1] // w
        if fh * h != self.labels.shape[0] or fw * w != self.labels.shape[1]:
            raise ShapeError(
                f"cannot downsample {self.labels.shape} to ({h}, {w}) by an integer factor")
        return SegmentationMask(self.labels[::fh, ::fw], self.num_classes)

    def one_hot(self, dtype=np.float32):
        """(1, num_classes, H, W) one-hot tensor for the modulation network."""
        h, w = self.labels.shape
        onehot = np.zeros((1, self.num_classes, h, w), dtype=dtype)
        onehot[0, self.labels.reshape(-1), np.repeat(np.arange(h), w), np.tile(np.arange(w), h)] = 1
        return Tensor(onehot)


def _check_labels(labels, num_classes):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels.min() if labels.min() < 0 else labels.max()
        raise ValueError(f"label {bad} outside [0, {num_classes})")


@dataclass
class ParamBank:
    """Per-class, per-channel modulation scales and shifts.

    The entire learnable state of a class-adaptive norm site: a
    (num_classes, channels) table of scales initialized to 1 and shifts
    initialized to 0, so an untrained site behaves exactly like plain BN.
    """

    gamma: Tensor
    beta: Tensor
    num_classes: int
    channels: int

    @classmethod
    def create(cls, num_classes, channels, name="bank", dtype=np.float32):
        g = Tensor(np.ones((num_classes, channels), dtype=dtype),
                   requires_grad=True, name=f"{name}.gamma")
        b = Tensor(np.zeros((num_classes, channels), dtype=dtype),
                   requires_grad=True, name=f"{name}.beta")
        return cls(g, b, num_classes, channels)

    def parameters(self):
        return [self.gamma, self.beta]


@dataclass
class NormStats:
    """Normalization statistics state: epsilon, running moments, mode."""

    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    mean: np.ndarray = None   # last batch moments, for inspection
    std: np.ndarray = None
    _stepped: bool = field(default=False, repr=False)

    def ensure(self, channels, dtype=np.float32):
        if self.running_mean is None:
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)


def instance_norm(x, eps=1e-5):
    """Zero-mean unit-variance per (sample, channel) over the spatial extent.

    On a feature that is constant within a channel the output collapses to
    all zeros: the statistics absorb everything, which is exactly the
    wash-away failure mode the class-adaptive layers exist to repair.
    """
    mu = tmean(x, axis=(2, 3), keepdims=True)
    diff = x - mu
    var = tmean(mul(diff, diff), axis=(2, 3), keepdims=True)
    sigma = sqrt(var + Tensor(np.asarray(eps, x.dtype)))
    return diff / sigma


def _normalize_batch(x, stats):
    """Parameter-free batch normalization shared by BN, CLADE and SPADE sites.

    Train mode uses batch statistics over (N, H, W) per channel and updates
    the running moments; eval mode normalizes with the stored running
    moments as constants.
    """
    c = x.shape[1]
    stats.ensure(c, np.float32 if x.dtype == np.float32 else np.float64)
    if stats.training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        diff = x - mu
        var = tmean(mul(diff, diff), axis=(0, 2, 3), keepdims=True)
        sigma = sqrt(var + Tensor(np.asarray(stats.eps, x.dtype)))
        m = stats.momentum
        stats.running_mean = ((1 - m) * stats.running_mean
                              + m * mu.data.reshape(-1)).astype(stats.running_mean.dtype)
        stats.running_var = ((1 - m) * stats.running_var
                             + m * var.data.reshape(-1)).astype(stats.running_var.dtype)
        stats.mean = mu.data.reshape(-1).copy()
        stats.std = sigma.data.reshape(-1).copy()
        stats._stepped = True
        return diff / sigma
    if not stats._stepped:
        warnings.warn("batch norm evaluated before any training step; "
                      "using initialized running stats (mean 0, var 1)")
    mu = stats.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
    sig = np.sqrt(stats.running_var + stats.eps).reshape(1, c, 1, 1).astype(x.dtype)
    return (x - Tensor(mu)) / Tensor(sig)


def batch_norm(x, stats, scale, shift):
    """Channel-wise normalization followed by the per-channel affine."""
    xhat = _normalize_batch(x, stats)
    return affine(xhat, _per_channel(scale, x.shape[1]), _per_channel(shift, x.shape[1]))


def _per_channel(t, c):
    if t.data.ndim == 1:
        if t.data.shape[0] != c:
            raise ShapeError(f"per-channel parameter has {t.data.shape[0]} entries, feature has {c}")
        return reshape(t, (1, c, 1, 1))
    return t


def _take_row(table, index):
    """Differentiable row lookup into a (num_classes, C) parameter table."""
    out = Tensor(table.data[index].copy())

    def bwd(g):
        grad = np.zeros_like(table.data)
        grad[index] = g
        return (grad,)

    return _record(out, (table,), bwd)


def conditional_in(x, class_id, bank):
    """Instance norm modulated by one class's bank row across the whole sample."""
    if not 0 <= class_id < bank.num_classes:
        raise ValueError(f"class id {class_id} outside [0, {bank.num_classes})")
    xhat = instance_norm(x)
    c = x.shape[1]
    gamma = reshape(_take_row(bank.gamma, class_id), (1, c, 1, 1))
    beta = reshape(_take_row(bank.beta, class_id), (1, c, 1, 1))
    return affine(xhat, gamma, beta)


def _labels_array(mask, bank):
    if isinstance(mask, SegmentationMask):
        if mask.num_classes != bank.num_classes:
            raise ValueError(
                f"mask has {mask.num_classes} classes, bank {bank.num_classes}")
        labels = mask.labels
    else:
        labels = np.asarray(mask)
    _check_labels(labels, bank.num_classes)
    if labels.ndim == 2:
        labels = labels[None]
    return labels


def guided_sample(mask, bank):
    """Fill every pixel with its class's bank entry.

    Returns dense modulation tensors ``(gamma, beta)`` of shape
    (N, C, H, W) with ``gamma[n, k, i, j] = bank.gamma[mask[i, j], k]``.
    Differentiable w.r.t. the bank: the backward pass scatters each pixel's
    output gradient into its class's row, summing over pixels, so a class's
    gradient is the count-weighted sum over its region.
    """
    labels = _labels_array(mask, bank)
    n, h, w = labels.shape

    def make(table):
        gathered = table.data[labels]                 # (N, H, W, C)
        out = Tensor(np.ascontiguousarray(gathered.transpose(0, 3, 1, 2)))

        def bwd(g):
            grad = np.zeros_like(table.data)
            flat = g.transpose(0, 2, 3, 1).reshape(-1, table.data.shape[1])
            np.add.at(grad, labels.reshape(-1), flat)
            return (grad,)

        return _record(out, (table,), bwd)

    return make(bank.gamma), make(bank.beta)


def clade_forward(x, mask, bank, stats):
    """Class-adaptive denormalization.

    Batch-style normalization followed by modulation with guided-sampled
    per-class parameters. With a class-uniform bank this reduces exactly to
    plain batch norm; with the identity bank it returns the plain
    normalized feature.
    """
    labels = _labels_array(mask, bank)
    if labels.shape[-2:] != x.shape[-2:]:
        raise ShapeError(
            f"mask resolution {labels.shape[-2:]} != feature resolution {x.shape[-2:]}")
    xhat = _normalize_batch(x, stats)
    gamma, beta = guided_sample(labels, bank)
    return affine(xhat, gamma, beta)


@dataclass
class SpadeBlockParams:
    """The two-conv modulation network of a spatially-adaptive norm site.

    One shared k x k conv maps the one-hot mask (num_classes channels) to an
    intermediate width, then two parallel head convs regress the dense
    scale and shift maps at the feature's channel count.
    """

    shared_w: Tensor
    shared_b: Tensor
    gamma_w: Tensor
    gamma_b: Tensor
    beta_w: Tensor
    beta_b: Tensor
    num_classes: int
    hidden: int
    channels: int
    kernel: int = 3

    @classmethod
    def create(cls, num_classes, hidden, channels, kernel=3,
               init_fn=None, name="spade", dtype=np.float32, seed=0):
        if init_fn is None:
            init_fn = xavier_init(seed)

        def make(suffix, shape):
            if suffix.endswith("_b"):
                data = np.zeros(shape)
            else:
                data = init_fn(f"{name}.{suffix}", shape)
            return Tensor(np.asarray(data, dtype=dtype), requires_grad=True,
                          name=f"{name}.{suffix}")

        return cls(
            shared_w=make("shared_w", (hidden, num_classes, kernel, kernel)),
            shared_b=make("shared_b", (hidden,)),
            gamma_w=make("gamma_w", (channels, hidden, kernel, kernel)),
            gamma_b=make("gamma_b", (channels,)),
            beta_w=make("beta_w", (channels, hidden, kernel, kernel)),
            beta_b=make("beta_b", (channels,)),
            num_classes=num_classes, hidden=hidden, channels=channels, kernel=kernel)

    def parameters(self):
        return [self.shared_w, self.shared_b, self.gamma_w, self.gamma_b,
                self.beta_w, self.beta_b]

    def modulation_maps(self, mask_onehot):
        """Dense (gamma, beta) maps regressed from the one-hot mask."""
        if mask_onehot.shape[1] != self.num_classes:
            raise ShapeError(
                f"one-hot mask has {mask_onehot.shape[1]} channels, "
                f"expected {self.num_classes}")
        hidden = relu(conv2d(mask_onehot, self.shared_w, self.shared_b))
        gamma = conv2d(hidden, self.gamma_w, self.gamma_b)
        beta = conv2d(hidden, self.beta_w, self.beta_b)
        return gamma, beta


def spade_forward(x, mask_onehot, params, stats):
    """Spatially-adaptive denormalization.

    The modulation pair at a pixel is a function of the mask patch inside
    the modulation network's receptive field (5x5 for two 3x3 convs), so
    away from region boundaries it is constant within a semantic region.
    """
    if mask_onehot.shape[-2:] != x.shape[-2:]:
        raise ShapeError(
            f"mask resolution {mask_onehot.shape[-2:]} != feature resolution {x.shape[-2:]}")
    xhat = _normalize_batch(x, stats)
    gamma, beta = params.modulation_maps(mask_onehot)
    return affine(xhat, gamma, beta)


@dataclass
class EdgeModParams:
    """Two scalar constants modulating the instance-boundary map."""

    gamma_c: Tensor
    beta_c: Tensor

    @classmethod
    def create(cls, name="edge", dtype=np.float32):
        return cls(
            Tensor(np.ones((1,), dtype=dtype), requires_grad=True, name=f"{name}.gamma_c"),
            Tensor(np.zeros((1,), dtype=dtype), requires_grad=True, name=f"{name}.beta_c"))

    def parameters(self):
        return [self.gamma_c, self.beta_c]


def edge_map(instance_map):
    """Binary boundary map: 1 where any in-bounds 4-neighbor id differs.

    Border pixels compare only their in-bounds neighbors, so a uniform map
    has no edges anywhere.
    """
    ids = np.asarray(instance_map)
    single = ids.ndim == 2
    if single:
        ids = ids[None]
    e = np.zeros(ids.shape, dtype=bool)
    e[:, 1:, :] |= ids[:, 1:, :] != ids[:, :-1, :]
    e[:, :-1, :] |= ids[:, :-1, :] != ids[:, 1:, :]
    e[:, :, 1:] |= ids[:, :, 1:] != ids[:, :, :-1]
    e[:, :, :-1] |= ids[:, :, :-1] != ids[:, :, 1:]
    e = e.astype(np.float32)
    return e[0] if single else e


def edge_modulate(instance_map, params):
    """Extract the boundary map and apply the learned affine.

    Returns a 1-channel tensor (N, 1, H, W) ready for channel concatenation.
    """
    e = edge_map(instance_map)
    if e.ndim == 2:
        e = e[None]
    e_t = Tensor(e[:, None].astype(params.gamma_c.dtype))
    gamma = reshape(params.gamma_c, (1, 1, 1, 1))
    beta = reshape(params.beta_c, (1, 1, 1, 1))
    return affine(e_t, gamma, beta)
