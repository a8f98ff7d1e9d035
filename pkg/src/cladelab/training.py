"""Desk-scale training harness.

Procedurally generated segmentation scenes stand in for real datasets: each
class gets a distinct base color, light texture and noise, so a trained
generator can be scored by a nearest-palette-color oracle segmenter instead
of a pretrained segmentation network. The default loss is plain L1; a small
hinge-GAN patch discriminator can be mixed in at low weight.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .norms import (
    NormStats, ParamBank, SegmentationMask, SpadeBlockParams, batch_norm,
    clade_forward, edge_map, instance_norm, spade_forward, xavier_init,
)
from .tensor import ShapeError, Tape, Tensor, backward
from .generator import build_generator

__all__ = [
    "SyntheticScene", "make_dataset", "make_instance_dataset", "palette_for",
    "l1_loss", "hinge_d_loss", "hinge_g_loss", "Adam", "AdamError",
    "DivergenceError", "TrainConfig", "TrainResult", "train",
    "oracle_segment", "pixel_accuracy", "miou", "boundary_f1",
    "PatchDiscriminator", "bench", "METRICS_HEADER", "metrics_csv",
]

METRICS_HEADER = "step,loss_l1,loss_g,loss_d,pixel_acc,miou"


class AdamError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synthetic scenes


def palette_for(num_classes, seed=1234):
    """Deterministic per-class base colors, pairwise L2 distance >= 0.5.

    Colors live in [-0.75, 0.75]^3 so targets stay inside tanh range even
    after texture and noise are added.
    """
    rng = np.random.default_rng(seed)
    colors = []
    while len(colors) < num_classes:
        cand = rng.uniform(-0.75, 0.75, size=3)
        if all(np.linalg.norm(cand - c) >= 0.5 for c in colors):
            colors.append(cand)
    return np.asarray(colors, dtype=np.float32)


@dataclass
class SyntheticScene:
    mask: SegmentationMask
    target: np.ndarray                      # (3, H, W) float32 in [-1, 1]
    instance_map: np.ndarray = None
    recipe: dict = field(default_factory=dict)


def _stripes_mask(res, num_classes, rng):
    band = res // num_classes
    labels = np.zeros((res, res), np.int32)
    order = rng.permutation(num_classes)
    for i in range(num_classes):
        hi = res if i == num_classes - 1 else (i + 1) * band
        labels[:, i * band:hi] = order[i]
    return labels


def _voronoi_mask(res, num_classes, rng):
    flat = rng.choice(res * res, size=num_classes, replace=False)
    sites = np.stack([flat // res, flat % res], axis=1)      # one site per class
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    d2 = ((ii[None] - sites[:, 0, None, None]) ** 2
          + (jj[None] - sites[:, 1, None, None]) ** 2)
    return np.argmin(d2, axis=0).astype(np.int32)            # ties -> lower class id


def _blobs_mask(res, num_classes, rng):
    labels = np.zeros((res, res), np.int32)
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    for cls in range(1, num_classes):
        for _ in range(int(rng.integers(1, 3))):
            ci, cj = rng.integers(0, res, size=2)
            r = int(rng.integers(res // 8, res // 3))
            labels[(ii - ci) ** 2 + (jj - cj) ** 2 <= r * r] = cls
    return labels


_LAYOUTS = {"stripes": _stripes_mask, "voronoi": _voronoi_mask, "blobs": _blobs_mask}

TEXTURE_AMPLITUDE = 0.06
NOISE_AMPLITUDE = 0.02


def _render_target(labels, colors, rng, tex_freq):
    res = labels.shape[0]
    img = colors[labels].transpose(2, 0, 1).astype(np.float32)
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    phase = labels.astype(np.float32) * 1.7
    tex = TEXTURE_AMPLITUDE * np.sin(2 * np.pi * tex_freq * (ii + jj) / res + phase)
    img = img + tex[None].astype(np.float32)
    img = img + rng.normal(0, NOISE_AMPLITUDE, size=img.shape).astype(np.float32)
    return np.clip(img, -1.0, 1.0)


def make_dataset(n, resolution, num_classes, layout, seed):
    """Deterministic list of scenes; the tail is a flat single-class subset.

    The flat subset (one full-image mask per class, as many as fit in the
    final quarter of the list, at least one) exists so normalization
    wash-away can be probed on piecewise-constant inputs. Masks across the
    set cover every class.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if resolution % 16 != 0:
        raise ValueError(f"resolution {resolution} is not a multiple of 16")
    if layout not in _LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; choose from {sorted(_LAYOUTS)}")
    rng = np.random.default_rng(seed)
    colors = palette_for(num_classes)
    flat_count = min(num_classes, max(1, n // 4)) if n > 1 else 0
    scenes = []
    for i in range(n):
        flat = i >= n - flat_count
        if flat:
            cls = (i - (n - flat_count)) % num_classes
            labels = np.full((resolution, resolution), cls, np.int32)
            kind = "flat"
        else:
            labels = _LAYOUTS[layout](resolution, num_classes, rng)
            kind = layout
        tex_freq = float(rng.uniform(2.0, 5.0))
        target = _render_target(labels, colors, rng, tex_freq)
        scenes.append(SyntheticScene(
            mask=SegmentationMask(labels, num_classes),
            target=target,
            recipe={"layout": kind, "tex_freq": tex_freq, "seed": seed, "index": i,
                    "palette": colors}))
    return scenes


EDGE_DARKEN = 0.25


def make_instance_dataset(n, resolution, seed):
    """Two same-class instances split at a random column; the seam is dark.

    Masks are single-class, so class-conditioned modulation alone cannot
    localize the seam: only the instance-edge channel carries it.
    """
    if resolution % 16 != 0:
        raise ValueError(f"resolution {resolution} is not a multiple of 16")
    rng = np.random.default_rng(seed)
    # one saturated base color so the darkened seam has detectable contrast
    colors = np.array([[0.55, 0.25, -0.45]], np.float32)
    scenes = []
    for i in range(n):
        labels = np.zeros((resolution, resolution), np.int32)
        split = int(rng.integers(resolution // 4, 3 * resolution // 4))
        inst = np.zeros((resolution, resolution), np.int32)
        inst[:, split:] = 1
        seam = edge_map(inst).astype(bool)
        target = np.broadcast_to(colors[0].reshape(3, 1, 1),
                                 (3, resolution, resolution)).copy()
        target[:, seam] *= EDGE_DARKEN
        target += rng.normal(0, NOISE_AMPLITUDE, size=target.shape).astype(np.float32)
        scenes.append(SyntheticScene(
            mask=SegmentationMask(labels, 1),
            target=np.clip(target, -1.0, 1.0).astype(np.float32),
            instance_map=inst,
            recipe={"layout": "instances", "split": split, "seed": seed, "index": i,
                    "palette": colors}))
    return scenes


# ---------------------------------------------------------------------------
# losses


def _abs(x):
    return T.relu(x) + T.relu(-x)


def l1_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    return T.tmean(_abs(pred - target))


def hinge_d_loss(real_logits, fake_logits):
    one_r = Tensor(np.ones(real_logits.shape, real_logits.data.dtype))
    one_f = Tensor(np.ones(fake_logits.shape, fake_logits.data.dtype))
    return T.tmean(T.relu(one_r - real_logits)) + T.tmean(T.relu(one_f + fake_logits))


def hinge_g_loss(fake_logits):
    return T.neg(T.tmean(fake_logits))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; the paper's setting is beta1=0, beta2=0.9.

    With beta1=0 the corrected first moment degenerates to the raw gradient.
    A non-finite gradient aborts the whole step and names the parameter.
    """

    def __init__(self, params, lr, beta1=0.0, beta2=0.9, eps=1e-8):
        self.params = list(params)          # (name, tensor) pairs
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise AdamError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t) if b1 > 0 else m
            v_hat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# metrics


def oracle_segment(image, palette):
    """Assign each pixel its nearest palette color (squared distance).

    Ties go to the lower class id. Perfect on freshly rendered targets by
    construction, which is what makes it usable as the judge.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    palette = np.asarray(palette, np.float32)
    if palette.size == 0:
        raise ValueError("empty palette")
    d2 = ((img[None] - palette[:, :, None, None]) ** 2).sum(axis=1)
    return np.argmin(d2, axis=0).astype(np.int32)


def pixel_accuracy(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pixel_accuracy: {pred.shape} vs {gt.shape}")
    return float((pred == gt).mean())


def miou(pred, gt, num_classes):
    """Mean IoU over the classes present in gt or pred. Symmetric."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"miou: {pred.shape} vs {gt.shape}")
    ious = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = (p | g).sum()
        if union:
            ious.append((p & g).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def boundary_f1(image, true_edges, base_color, contrast=1 - EDGE_DARKEN):
    """Seam-sharpness score: F1 of dark-seam pixels against the true edges.

    A pixel counts as a predicted edge when it is darker than the flat base
    color by more than half the rendered seam contrast.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    base = np.asarray(base_color, np.float32).reshape(3, 1, 1)
    drop = np.abs(img - base).mean(axis=0)
    pred = drop > 0.5 * contrast * float(np.abs(base).mean())
    true = np.asarray(true_edges).astype(bool)
    tp = (pred & true).sum()
    if tp == 0:
        return 0.0
    precision = tp / pred.sum()
    recall = tp / true.sum()
    return float(2 * precision * recall / (precision + recall))


# ---------------------------------------------------------------------------
# discriminator


class PatchDiscriminator:
    """4-layer patch discriminator on image + one-hot mask channels.

    Instance norm and leaky-relu 0.2 between stride-2 convs; emits a patch
    logit map.
    """

    def __init__(self, num_classes, seed=0, widths=(32, 64, 128)):
        init = xavier_init(seed ^ 0x5EED)
        self.num_classes = num_classes
        cin = 3 + num_classes
        self.convs = []
        for i, w in enumerate(widths):
            self.convs.append(self._conv(cin, w, f"d.conv{i}", init))
            cin = w
        self.final = self._conv(cin, 1, "d.final", init)

    @staticmethod
    def _conv(cin, cout, name, init):
        w = Tensor(init(f"{name}.weight", (cout, cin, 3, 3)).astype(np.float32),
                   requires_grad=True, name=f"{name}.weight")
        b = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")
        return (w, b)

    def forward(self, images, labels):
        n, _, h, w = images.shape
        onehot = np.zeros((n, self.num_classes, h, w), np.float32)
        np.put_along_axis(onehot, np.asarray(labels)[:, None], 1.0, axis=1)
        x = T.concat([images, Tensor(onehot)], axis=1)
        for i, (wt, bt) in enumerate(self.convs):
            x = T.conv2d(x, wt, bt, stride=2)
            x = T.leaky_relu(instance_norm(x), 0.2)
        wt, bt = self.final
        return T.conv2d(x, wt, bt, stride=1)

    def parameters(self):
        out = []
        for wt, bt in self.convs + [self.final]:
            out.append((wt.name, wt))
            out.append((bt.name, bt))
        return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int
    batch: int = 4
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    gan_weight: float = 0.0
    seed: int = 0
    eval_interval: int = 200


@dataclass
class TrainResult:
    model: object
    log: list
    best_acc: float
    diverged: bool = False


def _snapshot(model):
    state = {name: p.data.copy() for name, p in model.parameters()}
    stats = [(s.stats.running_mean.copy() if s.stats.running_mean is not None else None,
              s.stats.running_var.copy() if s.stats.running_var is not None else None,
              s.stats._stepped)
             for s in model.norm_sites()]
    return state, stats


def _restore(model, snap):
    state, stats = snap
    for name, p in model.parameters():
        p.data[...] = state[name]
    for site, (rm, rv, stepped) in zip(model.norm_sites(), stats):
        site.stats.running_mean = None if rm is None else rm.copy()
        site.stats.running_var = None if rv is None else rv.copy()
        site.stats._stepped = stepped


def _evaluate(model, scenes, noises):
    accs, mious = [], []
    for scene, z in zip(scenes, noises):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = model.forward(z[None], scene.mask.labels[None],
                                None if scene.instance_map is None
                                else scene.instance_map[None],
                                training=False)
        palette = scene.recipe["palette"]
        pred = oracle_segment(out.data[0], palette)
        accs.append(pixel_accuracy(pred, scene.mask.labels))
        mious.append(miou(pred, scene.mask.labels, scene.mask.num_classes))
    return float(np.mean(accs)), float(np.mean(mious))


def train(spec, dataset, config, eval_dataset=None):
    """Train a generator on synthetic scenes; deterministic under the seed.

    Logs loss and oracle metrics every ``eval_interval`` steps and keeps the
    parameters of the best pixel-accuracy evaluation; the returned model
    carries those best parameters. A non-finite loss aborts training with
    the last good snapshot restored.
    """
    if dataset and dataset[0].mask.shape[0] != spec.image_size:
        raise ShapeError(
            f"dataset resolution {dataset[0].mask.shape} != spec {spec.image_size}")
    model = build_generator(spec, config.seed)
    opt_g = Adam(model.parameters(), lr=config.lr_g)
    disc = opt_d = None
    if config.gan_weight > 0:
        disc = PatchDiscriminator(spec.num_classes, seed=config.seed)
        opt_d = Adam(disc.parameters(), lr=config.lr_d)
    rng = np.random.default_rng(config.seed)
    eval_scenes = eval_dataset if eval_dataset is not None else dataset[: min(16, len(dataset))]
    eval_noises = np.random.default_rng(config.seed + 77) \
        .standard_normal((len(eval_scenes), spec.noise_dim)).astype(np.float32)

    log = []
    best_acc = -1.0
    best = _snapshot(model)
    diverged = False

    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(dataset), size=config.batch)
        masks = np.stack([dataset[i].mask.labels for i in idx])
        targets = Tensor(np.stack([dataset[i].target for i in idx]))
        insts = None
        if spec.use_edge:
            insts = np.stack([dataset[i].instance_map for i in idx])
        noise = rng.standard_normal((config.batch, spec.noise_dim)).astype(np.float32)

        loss_g_val = loss_d_val = 0.0
        with Tape() as tape:
            fake = model.forward(noise, masks, insts, training=True)
            loss = l1_loss(fake, targets)
            loss_l1_val = float(loss.data)
            if disc is not None:
                g_logits = disc.forward(fake, masks)
                g_loss = hinge_g_loss(g_logits)
                loss_g_val = float(g_loss.data)
                loss = loss + Tensor(np.float32(config.gan_weight)) * g_loss
            if not np.isfinite(loss.data):
                diverged = True
            else:
                opt_g.zero_grad()
                backward(tape, loss)
        if diverged:
            break
        try:
            opt_g.step()
        except AdamError as e:
            warnings.warn(f"aborting training: {e}")
            diverged = True
            break

        if disc is not None:
            with Tape() as tape:
                real_logits = disc.forward(targets, masks)
                fake_logits = disc.forward(Tensor(fake.data.copy()), masks)
                d_loss = hinge_d_loss(real_logits, fake_logits)
                loss_d_val = float(d_loss.data)
                if not np.isfinite(d_loss.data):
                    diverged = True
                else:
                    opt_d.zero_grad()
                    backward(tape, d_loss)
            if diverged:
                break
            try:
                opt_d.step()
            except AdamError as e:
                warnings.warn(f"aborting training: {e}")
                diverged = True
                break

        if step % config.eval_interval == 0 or step == config.steps:
            acc, mi = _evaluate(model, eval_scenes, eval_noises)
            log.append({"step": step, "loss_l1": loss_l1_val, "loss_g": loss_g_val,
                        "loss_d": loss_d_val, "pixel_acc": acc, "miou": mi})
            if acc >= best_acc:   # ties keep the most-trained parameters
                best_acc = acc
                best = _snapshot(model)

    _restore(model, best)
    if best_acc < 0:
        best_acc = 0.0
    return TrainResult(model=model, log=log, best_acc=best_acc, diverged=diverged)


def metrics_csv(log):
    lines = [METRICS_HEADER]
    for row in log:
        lines.append(f"{row['step']},{row['loss_l1']:.6g},{row['loss_g']:.6g},"
                     f"{row['loss_d']:.6g},{row['pixel_acc']:.6g},{row['miou']:.6g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# microbenchmark


def bench(norm_mode, cfg, repeats, warmup=3, seed=0):
    """Median and IQR wall time of one norm-site forward pass.

    cfg keys: cin, cout, h, w, nc, cm. Warmup runs are excluded; with fewer
    than two repeats the IQR is reported as None.
    """
    rng = np.random.default_rng(seed)
    c, h, w = cfg["cout"], cfg["h"], cfg["w"]
    nc, cm = cfg.get("nc", 32), cfg.get("cm", 128)
    x = Tensor(rng.normal(size=(1, c, h, w)).astype(np.float32))
    labels = rng.integers(0, nc, size=(h, w)).astype(np.int32)
    stats = NormStats()

    if norm_mode == "clade":
        bank = ParamBank.create(nc, c)

        def run():
            return clade_forward(x, labels, bank, stats)
    elif norm_mode == "spade":
        params = SpadeBlockParams.create(nc, cm, c, init_fn=xavier_init(seed))
        onehot = SegmentationMask(labels, nc).one_hot()

        def run():
            return spade_forward(x, onehot, params, stats)
    elif norm_mode == "bn":
        scale = Tensor(np.ones(c, np.float32))
        shift = Tensor(np.zeros(c, np.float32))

        def run():
            return batch_norm(x, stats, scale, shift)
    else:
        raise ValueError(f"unknown norm mode {norm_mode!r}")

    for _ in range(warmup):
        run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    med = float(np.median(times))
    iqr = float(np.percentile(times, 75) - np.percentile(times, 25)) if repeats >= 2 else None
    return {"median": med, "iqr": iqr, "times": times}
