"""Mask-conditioned generator backbone.

A generator is a linear entry from the noise vector into a low-resolution
feature map, a stack of residual blocks whose normalization sites are
conditioned on the (nearest-downsampled) segmentation mask, nearest 2x
upsampling between blocks, and a final conv to RGB squashed by tanh.

The same declarative :class:`GraphSpec` drives both this builder and the
static complexity analyzer, so the two can never disagree about what the
network contains.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .norms import (
    EdgeModParams, NormStats, ParamBank, SegmentationMask, SpadeBlockParams,
    batch_norm, clade_forward, edge_modulate, spade_forward, xavier_init,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "GraphError", "LayerSpec", "Entry", "GraphSpec", "graph_preset",
    "build_generator", "generate", "Model", "PRESETS",
]

NORM_KINDS = ("norm_spade", "norm_clade", "norm_bn")
LEAKY_SLOPE = 0.2


class GraphError(ValueError):
    """Raised for inconsistent generator graph specifications."""


@dataclass
class Entry:
    """One block of the graph-spec file: a coarse builder-level layer."""

    kind: str                 # linear | resblock | upsample | conv | activation
    cout: int = 0
    k: int = 3
    h: int = 0
    w: int = 0
    fn: str = ""              # activation name for kind == "activation"


@dataclass
class LayerSpec:
    """One expanded primitive layer, the unit the analyzer reports on."""

    index: int
    kind: str                 # conv | linear | norm_* | activation | upsample | concat_edge
    cin: int = 0
    cout: int = 0
    k: int = 0
    h: int = 0
    w: int = 0
    nc: int = 0               # class count at norm sites
    cm: int = 0               # modulation-network width at spade sites
    bias: bool = True
    in_resblock: bool = False
    precedent: int = None     # index of the conv/linear that produced this input


@dataclass
class GraphSpec:
    """Declarative description of one generator graph."""

    noise_dim: int
    num_classes: int
    norm_mode: str = "clade"
    cm: int = 128
    image_size: int = 256
    use_edge: bool = False
    entries: list = field(default_factory=list)

    def validate(self):
        if self.norm_mode not in ("spade", "clade", "bn"):
            raise GraphError(f"unknown norm_mode {self.norm_mode!r}")
        if not self.entries:
            raise GraphError("graph spec has no layers")
        c = None
        h = w = 0
        for i, e in enumerate(self.entries):
            if e.kind == "linear":
                if i != 0:
                    raise GraphError(f"layer {i}: linear entry must come first")
                c, h, w = e.cout, e.h, e.w
            elif e.kind == "upsample":
                h, w = 2 * h, 2 * w
            elif e.kind in ("resblock", "conv"):
                if c is None:
                    raise GraphError(f"layer {i}: no channels established before {e.kind}")
                c = e.cout
            elif e.kind == "activation":
                pass
            else:
                raise GraphError(f"layer {i}: unknown kind {e.kind!r}")
        if (h, w) != (self.image_size, self.image_size):
            raise GraphError(
                f"layers end at {h}x{w}, spec says image_size {self.image_size}")
        if self.entries[-1].kind != "activation" or self.entries[-1].fn != "tanh":
            raise GraphError("graph must end with a tanh activation")
        if c != 3:
            raise GraphError(f"final layer emits {c} channels, expected 3")
        return self

    def expand(self):
        """Flatten to primitive LayerSpec rows with precedent-conv links.

        A norm site's precedent is the conv (or, for the very first block,
        the entry linear) that produced the feature it normalizes; within a
        block the second norm's precedent is the block's first conv, and the
        output of a block is attributed to its main-path second conv.
        """
        self.validate()
        norm_kind = f"norm_{self.norm_mode}"
        rows = []
        c = h = w = 0
        producer = None       # row index of the layer that made the current feature

        def row(**kw):
            r = LayerSpec(index=len(rows), **kw)
            rows.append(r)
            return r.index

        for e in self.entries:
            if e.kind == "linear":
                c, h, w = e.cout, e.h, e.w
                producer = row(kind="linear", cin=self.noise_dim, cout=c, k=0, h=h, w=w)
            elif e.kind == "upsample":
                h, w = 2 * h, 2 * w
                row(kind="upsample", cin=c, cout=c, h=h, w=w)
            elif e.kind == "conv":
                row(kind="activation", cin=c, cout=c, h=h, w=w)
                producer = row(kind="conv", cin=c, cout=e.cout, k=e.k, h=h, w=w)
                c = e.cout
            elif e.kind == "activation":
                row(kind="activation", cin=c, cout=c, h=h, w=w, nc=0)
            elif e.kind == "resblock":
                fin, fout = c, e.cout
                fmid = min(fin, fout)
                block_in = producer
                row(kind=norm_kind, cin=fin, cout=fin, k=3, h=h, w=w,
                    nc=self.num_classes, cm=self.cm, in_resblock=True,
                    precedent=block_in)
                row(kind="activation", cin=fin, cout=fin, h=h, w=w)
                cin0 = fin
                if self.use_edge:
                    row(kind="concat_edge", cin=fin, cout=fin + 1, h=h, w=w)
                    cin0 = fin + 1
                conv0 = row(kind="conv", cin=cin0, cout=fmid, k=3, h=h, w=w,
                            in_resblock=True)
                row(kind=norm_kind, cin=fmid, cout=fmid, k=3, h=h, w=w,
                    nc=self.num_classes, cm=self.cm, in_resblock=True,
                    precedent=conv0)
                row(kind="activation", cin=fmid, cout=fmid, h=h, w=w)
                conv1 = row(kind="conv", cin=fmid, cout=fout, k=3, h=h, w=w,
                            in_resblock=True)
                if fin != fout:
                    row(kind=norm_kind, cin=fin, cout=fin, k=3, h=h, w=w,
                        nc=self.num_classes, cm=self.cm, in_resblock=True,
                        precedent=block_in)
                    row(kind="conv", cin=fin, cout=fout, k=1, h=h, w=w,
                        bias=False, in_resblock=True)
                producer = conv1
                c = fout
        return rows


def graph_preset(name, **overrides):
    """Build one of the named reference graphs.

    ``paper-256``: noise 256 -> 1024x4x4, seven residual blocks with channel
    chain 1024,1024,1024,512,256,128,64 and an upsample before each block
    after the first, ending in a 3x3 conv to RGB at 256x256. 151 classes,
    modulation width 128.

    ``toy-64``: noise 16 -> 64x4x4, four residual blocks (64, 64, 32, 16),
    upsample before every block, RGB at 64x64. 5 classes, width 32.
    """
    if name == "paper-256":
        chain = [1024, 1024, 1024, 512, 256, 128, 64]
        spec = GraphSpec(noise_dim=256, num_classes=151, norm_mode="spade",
                         cm=128, image_size=256)
        entries = [Entry("linear", cout=1024, h=4, w=4)]
        for i, cout in enumerate(chain):
            if i > 0:
                entries.append(Entry("upsample"))
            entries.append(Entry("resblock", cout=cout))
    elif name == "toy-64":
        chain = [64, 64, 32, 16]
        spec = GraphSpec(noise_dim=16, num_classes=5, norm_mode="clade",
                         cm=32, image_size=64)
        entries = [Entry("linear", cout=64, h=4, w=4)]
        for cout in chain:
            entries.append(Entry("upsample"))
            entries.append(Entry("resblock", cout=cout))
    else:
        raise GraphError(f"unknown preset {name!r}")
    entries.append(Entry("activation", fn="leaky_relu"))
    entries.append(Entry("conv", cout=3, k=3))
    entries.append(Entry("activation", fn="tanh"))
    spec.entries = entries
    spec = replace(spec, **overrides)
    return spec.validate()


PRESETS = ("paper-256", "toy-64")


class _NormSite:
    """One conditioned normalization site inside a block."""

    def __init__(self, mode, channels, num_classes, cm, name, init):
        self.mode = mode
        self.channels = channels
        self.stats = NormStats()
        self.name = name
        self.bank = None
        self.spade = None
        self.scale = self.shift = None
        if mode == "clade":
            self.bank = ParamBank.create(num_classes, channels, name=name)
        elif mode == "spade":
            self.spade = SpadeBlockParams.create(num_classes, cm, channels,
                                                 init_fn=init, name=name)
        else:
            self.scale = Tensor(np.ones(channels, np.float32), requires_grad=True,
                                name=f"{name}.scale")
            self.shift = Tensor(np.zeros(channels, np.float32), requires_grad=True,
                                name=f"{name}.shift")

    def __call__(self, x, cond):
        if self.mode == "clade":
            return clade_forward(x, cond.labels, self.bank, self.stats)
        if self.mode == "spade":
            return spade_forward(x, cond.onehot(), self.spade, self.stats)
        return batch_norm(x, self.stats, self.scale, self.shift)

    def parameters(self):
        if self.bank is not None:
            return self.bank.parameters()
        if self.spade is not None:
            return self.spade.parameters()
        return [self.scale, self.shift]


class _Cond:
    """Mask (and optional edge) conditioning at one resolution."""

    def __init__(self, labels, num_classes, edge_hat=None):
        self.labels = labels            # (N, h, w) int array
        self.num_classes = num_classes
        self.edge_hat = edge_hat        # (N, 1, h, w) Tensor or None
        self._onehot = None

    def onehot(self):
        if self._onehot is None:
            n, h, w = self.labels.shape
            oh = np.zeros((n, self.num_classes, h, w), np.float32)
            np.put_along_axis(oh, self.labels[:, None], 1.0, axis=1)
            self._onehot = Tensor(oh)
        return self._onehot


class _Conv:
    def __init__(self, cin, cout, k, name, init, bias=True):
        self.weight = Tensor(init(f"{name}.weight", (cout, cin, k, k)).astype(np.float32),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True,
                               name=f"{name}.bias")

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class _ResBlock:
    """norm -> act -> conv twice, plus a normalized 1x1 skip when widths change."""

    def __init__(self, fin, fout, spec, name, init):
        self.fin, self.fout = fin, fout
        fmid = min(fin, fout)
        mode, nc, cm = spec.norm_mode, spec.num_classes, spec.cm
        self.use_edge = spec.use_edge
        cin0 = fin + 1 if spec.use_edge else fin
        self.norm0 = _NormSite(mode, fin, nc, cm, f"{name}.norm0", init)
        self.conv0 = _Conv(cin0, fmid, 3, f"{name}.conv0", init)
        self.norm1 = _NormSite(mode, fmid, nc, cm, f"{name}.norm1", init)
        self.conv1 = _Conv(fmid, fout, 3, f"{name}.conv1", init)
        self.norm_s = self.conv_s = None
        if fin != fout:
            self.norm_s = _NormSite(mode, fin, nc, cm, f"{name}.norm_s", init)
            self.conv_s = _Conv(fin, fout, 1, f"{name}.conv_s", init, bias=False)

    def __call__(self, x, cond):
        h = T.leaky_relu(self.norm0(x, cond), LEAKY_SLOPE)
        if self.use_edge:
            n = x.shape[0]
            e = cond.edge_hat
            if e.shape[0] != n:
                e = Tensor(np.broadcast_to(e.data, (n,) + e.shape[1:]).copy())
            h = T.concat([h, e], axis=1)
        h = self.conv0(h)
        h = self.conv1(T.leaky_relu(self.norm1(h, cond), LEAKY_SLOPE))
        if self.conv_s is not None:
            s = self.conv_s(self.norm_s(x, cond))
        else:
            s = x
        return h + s

    def norm_sites(self):
        sites = [self.norm0, self.norm1]
        if self.norm_s is not None:
            sites.append(self.norm_s)
        return sites

    def parameters(self):
        params = []
        for site in self.norm_sites():
            params.extend(site.parameters())
        params.extend(self.conv0.parameters())
        params.extend(self.conv1.parameters())
        if self.conv_s is not None:
            params.extend(self.conv_s.parameters())
        return params


class Model:
    """A built generator: parameters, norm-site state and the forward pass."""

    def __init__(self, spec, seed):
        spec.validate()
        self.spec = spec
        self.seed = seed
        init = xavier_init(seed)
        self.blocks = []
        self.up_before = []            # parallel to blocks: upsample first?
        self.entry_w = self.entry_b = None
        self.rgb = None
        self.edge_params = EdgeModParams.create() if spec.use_edge else None
        c = h = w = 0
        pending_up = 0
        bi = 0
        for e in spec.entries:
            if e.kind == "linear":
                c, h, w = e.cout, e.h, e.w
                d_out = c * h * w
                self.entry_w = Tensor(
                    init("entry.weight", (d_out, spec.noise_dim)).astype(np.float32),
                    requires_grad=True, name="entry.weight")
                self.entry_b = Tensor(np.zeros(d_out, np.float32),
                                      requires_grad=True, name="entry.bias")
                self.entry_shape = (c, h, w)
            elif e.kind == "upsample":
                pending_up += 1
            elif e.kind == "resblock":
                self.blocks.append(_ResBlock(c, e.cout, spec, f"block{bi}", init))
                self.up_before.append(pending_up)
                pending_up = 0
                c = e.cout
                bi += 1
            elif e.kind == "conv":
                self.rgb = _Conv(c, e.cout, e.k, "rgb", init)
                c = e.cout
            elif e.kind == "activation":
                pass

    def parameters(self):
        """Ordered (name, tensor) pairs over all trainable state."""
        params = [self.entry_w, self.entry_b]
        for b in self.blocks:
            params.extend(b.parameters())
        params.extend(self.rgb.parameters())
        if self.edge_params is not None:
            params.extend(self.edge_params.parameters())
        return [(p.name, p) for p in params]

    def num_params(self):
        return sum(p.size for _, p in self.parameters())

    def set_training(self, flag):
        for b in self.blocks:
            for site in b.norm_sites():
                site.stats.training = flag

    def norm_sites(self):
        out = []
        for b in self.blocks:
            out.extend(b.norm_sites())
        return out

    def _conditions(self, labels, instance_maps):
        """Per-block conditioning at each operating resolution."""
        full = labels.shape[-1]
        conds = []
        c, h, w = self.entry_shape
        for ups, block in zip(self.up_before, self.blocks):
            for _ in range(ups):
                h, w = 2 * h, 2 * w
            f = full // h
            lab = labels[:, ::f, ::f]
            edge_hat = None
            if self.spec.use_edge:
                if instance_maps is None:
                    raise ShapeError("this model was built with use_edge; "
                                     "an instance map is required")
                ids = instance_maps[:, ::f, ::f]
                edge_hat = edge_modulate(ids, self.edge_params)
            conds.append(_Cond(lab, self.spec.num_classes, edge_hat))
        return conds

    def forward(self, noise, labels, instance_maps=None, training=False):
        """Run the generator on a batch.

        noise: (N, noise_dim); labels: (N, H, W) ints at the target
        resolution; instance_maps: (N, H, W) ints when built with use_edge.
        Output: (N, 3, H, W) tensor in (-1, 1).
        """
        noise = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise, np.float32))
        if noise.data.ndim == 1:
            noise = Tensor(noise.data[None])
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels[None]
        if instance_maps is not None:
            instance_maps = np.asarray(instance_maps)
            if instance_maps.ndim == 2:
                instance_maps = instance_maps[None]
        if noise.data.shape[1] != self.spec.noise_dim:
            raise ShapeError(f"noise length {noise.data.shape[1]} != "
                             f"spec noise_dim {self.spec.noise_dim}")
        if labels.shape[-2:] != (self.spec.image_size, self.spec.image_size):
            raise ShapeError(f"mask resolution {labels.shape[-2:]} != "
                             f"target {self.spec.image_size}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.spec.num_classes):
            raise ValueError(f"mask label outside [0, {self.spec.num_classes})")
        self.set_training(training)
        n = noise.data.shape[0]
        c, h, w = self.entry_shape
        x = T.reshape(T.linear(noise, self.entry_w, self.entry_b), (n, c, h, w))
        conds = self._conditions(labels, instance_maps)
        for ups, block, cond in zip(self.up_before, self.blocks, conds):
            for _ in range(ups):
                x = T.upsample_nearest2x(x)
            x = block(x, cond)
        x = self.rgb(T.leaky_relu(x, LEAKY_SLOPE))
        return T.tanh(x)


def build_generator(spec, seed):
    """Deterministically initialize a generator from its graph spec.

    The same seed always yields bitwise-identical parameters, and backbone
    parameters do not depend on the norm mode.
    """
    return Model(spec, seed)


def generate(model, mask, noise, instance_map=None):
    """Synthesize one image (3, H, W) in (-1, 1); deterministic, eval mode."""
    if isinstance(mask, SegmentationMask):
        labels = mask.labels[None]
    else:
        labels = np.asarray(mask)[None] if np.asarray(mask).ndim == 2 else np.asarray(mask)
    inst = None
    if instance_map is not None:
        inst = np.asarray(instance_map)
        inst = inst[None] if inst.ndim == 2 else inst
    out = model.forward(np.asarray(noise, np.float32), labels, inst, training=False)
    return Tensor(out.data[0])
