"""Static parameter/FLOPs analyzer and modulation-map inspection.

Cost model
----------
Counts follow the multiply-accumulate convention: a k x k convolution with
C_in inputs and C_out outputs costs ``k^2 * C_in * C_out`` parameters and
that times ``H * W`` operations at its output resolution. A
spatially-adaptive norm site costs its two-conv modulation network,
``k^2 * (N_c * C_m + 2 * C_m * C)``; a class-adaptive site costs its bank,
``2 * N_c * C`` parameters, and one value assignment per output element,
``C * H * W`` operations. Plain batch-norm sites are the N_c = 1
degeneration of the class-adaptive count.

Ratio conventions
-----------------
Each norm site is paired with the conv (or entry projection) that produced
the feature it normalizes. Two aggregate conventions are computed:

* ``totals``: sum of norm costs over all sites divided by the sum of
  backbone conv costs inside residual blocks, with every backbone conv
  priced at the uniform 3x3 kernel the closed-form ratio expressions
  assume (the 1x1 skip projections are physically cheaper, but the ratio
  identities cancel kernels only when k_c = k_m).
* ``mean``: the mean of per-site ratios over sites whose precedent is a
  conv layer.

The ``totals`` convention is the one that reproduces the published
aggregate overhead figures; reports state this explicitly. Bias terms and
the physical 1x1 skip kernels are counted in the totals columns (which
must match live parameter enumeration exactly) but never enter the ratio
formulas.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .generator import LayerSpec
from .norms import SegmentationMask

__all__ = [
    "AnalysisError", "ReportRow", "ComplexityReport",
    "count_conv", "count_spade", "count_clade",
    "analyze", "report_csv", "report_table", "dump_modulation_maps",
]

UNIFORM_K = 3   # the k_c = k_m assumption behind the closed-form ratios

CSV_HEADER = "layer,kind,cin,cout,h,w,params,flops,norm_params,norm_flops,ratio_params,ratio_flops"


class AnalysisError(ValueError):
    pass


def count_conv(layer):
    """(params, flops) of a conv layer per the closed-form cost model."""
    p = layer.k * layer.k * layer.cin * layer.cout
    return p, p * layer.h * layer.w


def count_spade(layer):
    """(params, flops) of a spatially-adaptive norm site's modulation network."""
    p = layer.k * layer.k * (layer.nc * layer.cm + 2 * layer.cm * layer.cout)
    return p, p * layer.h * layer.w


def count_clade(layer):
    """(params, flops) of a class-adaptive norm site: bank plus assignments."""
    return 2 * layer.nc * layer.cout, layer.cout * layer.h * layer.w


def _physical(layer, first_edge):
    """Trainable parameter count and MAC/assignment count actually built."""
    if layer.kind == "conv":
        p, f = count_conv(layer)
        return p + (layer.cout if layer.bias else 0), f
    if layer.kind == "linear":
        d_out = layer.cout * layer.h * layer.w
        return layer.cin * d_out + d_out, layer.cin * d_out
    if layer.kind == "norm_spade":
        p, f = count_spade(layer)
        return p + layer.cm + 2 * layer.cout, f
    if layer.kind == "norm_clade":
        return count_clade(layer)
    if layer.kind == "norm_bn":
        bn = LayerSpec(index=layer.index, kind=layer.kind, cout=layer.cout,
                       nc=1, h=layer.h, w=layer.w)
        return count_clade(bn)
    if layer.kind == "concat_edge":
        return (2 if first_edge else 0), layer.h * layer.w
    return 0, 0


def _norm_formula(layer, mac_factor):
    if layer.kind == "norm_spade":
        p, f = count_spade(layer)
        return p, f * mac_factor
    if layer.kind == "norm_clade":
        return count_clade(layer)
    if layer.kind == "norm_bn":
        bn = LayerSpec(index=layer.index, kind=layer.kind, cout=layer.cout,
                       nc=1, h=layer.h, w=layer.w)
        return count_clade(bn)
    return 0, 0


@dataclass
class ReportRow:
    layer: int
    kind: str
    cin: int
    cout: int
    h: int
    w: int
    params: int
    flops: int
    norm_params: int = 0
    norm_flops: int = 0
    ratio_params: float = None
    ratio_flops: float = None


@dataclass
class ComplexityReport:
    """Per-layer rows plus totals and both aggregate-ratio conventions."""

    mode: str
    rows: list = field(default_factory=list)
    total_params: int = 0
    total_flops: int = 0
    avg_param_ratio: float = 0.0     # totals convention
    avg_flops_ratio: float = 0.0
    mean_param_ratio: float = 0.0    # per-site mean convention
    mean_flops_ratio: float = 0.0
    convention: str = "totals"
    mac_factor: int = 1


def analyze(spec, mac_as_2flops=False):
    """Statically cost every layer of a generator graph.

    Totals count what a built model physically trains (biases included,
    skip projections at their real 1x1 kernels) and match live parameter
    enumeration exactly. Ratio aggregates follow the module docstring.
    ``mac_as_2flops`` doubles multiply-accumulate counts (conv, linear and
    modulation-network operations); per-element value assignments are not
    MACs and are unaffected.
    """
    rows_in = spec.expand()
    mac = 2 if mac_as_2flops else 1
    report = ComplexityReport(mode=spec.norm_mode, mac_factor=mac)
    num_p = num_f = den_p = den_f = 0
    site_ratios_p = []
    site_ratios_f = []
    seen_edge = False
    by_index = {r.index: r for r in rows_in}

    for layer in rows_in:
        first_edge = layer.kind == "concat_edge" and not seen_edge
        seen_edge = seen_edge or layer.kind == "concat_edge"
        p_phys, f_phys = _physical(layer, first_edge)
        if layer.kind in ("conv", "linear"):
            f_phys *= mac
        row = ReportRow(layer=layer.index, kind=layer.kind, cin=layer.cin,
                        cout=layer.cout, h=layer.h, w=layer.w,
                        params=p_phys, flops=f_phys)
        if layer.kind.startswith("norm_"):
            if layer.precedent is None:
                raise AnalysisError(
                    f"norm site at layer {layer.index} has no precedent conv")
            nf_p, nf_f = _norm_formula(layer, mac)
            row.norm_params, row.norm_flops = nf_p, nf_f
            row.flops = nf_f
            prec = by_index[layer.precedent]
            if prec.kind == "conv":
                cp, cf = count_conv(prec)
                row.ratio_params = nf_p / cp
                row.ratio_flops = nf_f / (cf * mac)
                site_ratios_p.append(row.ratio_params)
                site_ratios_f.append(row.ratio_flops)
            else:                       # entry projection precedent
                pp, pf = _physical(prec, False)
                row.ratio_params = nf_p / (pp - prec.cout * prec.h * prec.w)
                row.ratio_flops = nf_f / (pf * mac)
            num_p += nf_p
            num_f += nf_f
        if layer.kind == "conv" and layer.in_resblock:
            den_p += UNIFORM_K * UNIFORM_K * layer.cin * layer.cout
            den_f += UNIFORM_K * UNIFORM_K * layer.cin * layer.cout * layer.h * layer.w * mac
        report.rows.append(row)
        report.total_params += row.params
        report.total_flops += row.flops

    if den_p:
        report.avg_param_ratio = num_p / den_p
        report.avg_flops_ratio = num_f / den_f
    if site_ratios_p:
        report.mean_param_ratio = float(np.mean(site_ratios_p))
        report.mean_flops_ratio = float(np.mean(site_ratios_f))
    return report


def report_csv(report):
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for r in report.rows:
        rp = f"{r.ratio_params:.6f}" if r.ratio_params is not None else ""
        rf = f"{r.ratio_flops:.6f}" if r.ratio_flops is not None else ""
        out.write(f"{r.layer},{r.kind},{r.cin},{r.cout},{r.h},{r.w},"
                  f"{r.params},{r.flops},{r.norm_params},{r.norm_flops},{rp},{rf}\n")
    return out.getvalue()


def report_table(report):
    """Human-readable per-layer table plus the aggregate summary."""
    lines = [f"{'layer':>5} {'kind':<12} {'cin':>5} {'cout':>5} {'h':>4} {'w':>4} "
             f"{'params':>12} {'flops':>15} {'ratio_p':>9} {'ratio_f':>9}"]
    for r in report.rows:
        rp = f"{100 * r.ratio_params:8.2f}%" if r.ratio_params is not None else "        -"
        rf = f"{100 * r.ratio_flops:8.2f}%" if r.ratio_flops is not None else "        -"
        lines.append(f"{r.layer:>5} {r.kind:<12} {r.cin:>5} {r.cout:>5} {r.h:>4} {r.w:>4} "
                     f"{r.params:>12} {r.flops:>15} {rp} {rf}")
    lines.append("")
    lines.append(f"mode={report.mode} total_params={report.total_params} "
                 f"total_flops={report.total_flops}")
    lines.append(f"aggregate ratios ({report.convention} convention): "
                 f"params {100 * report.avg_param_ratio:.2f}%  "
                 f"flops {100 * report.avg_flops_ratio:.2f}%")
    lines.append(f"per-site mean convention: params {100 * report.mean_param_ratio:.2f}%  "
                 f"flops {100 * report.mean_flops_ratio:.2f}%")
    return "\n".join(lines)


def _interior_mask(labels, band=2):
    """Pixels whose (2*band+1)^2 window is in-bounds and single-class."""
    k = 2 * band + 1
    padded = np.pad(labels, band, constant_values=-1)
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return (win == labels[..., None, None]).all(axis=(-2, -1))


def dump_modulation_maps(model, mask, out_dir=None, band=2):
    """Channel-0 modulation maps and per-class uniformity per norm site.

    For every norm site, evaluates the dense gamma/beta maps at that site's
    resolution and measures, per class, the mean and spread (max - min) of
    the gamma map within the class region. Spatially-adaptive sites exclude
    a boundary band (default width 2, the modulation network's receptive
    radius); class-adaptive maps are constant per class, so their spread is
    exactly zero. With ``out_dir`` set, writes grayscale PGM maps and a
    ``spread.csv`` with columns site,class,mean,spread.
    """
    from .norms import guided_sample

    if isinstance(mask, SegmentationMask):
        labels_full = mask.labels
    else:
        labels_full = np.asarray(mask)
    results = []
    full = labels_full.shape[-1]
    c, h, w = model.entry_shape
    for ups, block in zip(model.up_before, model.blocks):
        for _ in range(ups):
            h, w = 2 * h, 2 * w
        f = full // h
        labels = labels_full[::f, ::f]
        for site in block.norm_sites():
            if site.mode == "clade":
                gamma, beta = guided_sample(labels, site.bank)
                gmap, bmap = gamma.data[0, 0], beta.data[0, 0]
                interior = np.ones_like(labels, dtype=bool)
            elif site.mode == "spade":
                onehot = SegmentationMask(labels, model.spec.num_classes).one_hot()
                gamma, beta = site.spade.modulation_maps(onehot)
                gmap, bmap = gamma.data[0, 0], beta.data[0, 0]
                interior = _interior_mask(labels, band)
            else:
                gmap = np.full(labels.shape, site.scale.data[0], np.float32)
                bmap = np.full(labels.shape, site.shift.data[0], np.float32)
                interior = np.ones_like(labels, dtype=bool)
            per_class = {}
            for cls in np.unique(labels):
                sel = (labels == cls) & interior
                if sel.any():
                    vals = gmap[sel]
                    per_class[int(cls)] = {
                        "mean": float(vals.mean()),
                        "min": float(vals.min()),
                        "max": float(vals.max()),
                        "spread": float(vals.max() - vals.min()),
                    }
            results.append({"site": site.name, "gamma": gmap, "beta": bmap,
                            "per_class": per_class})
    if out_dir is not None:
        from pathlib import Path
        from .formats import write_pgm
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["site,class,mean,spread"]
        for r in results:
            stem = r["site"].replace(".", "_")
            write_pgm(out / f"{stem}_gamma.pgm", r["gamma"])
            write_pgm(out / f"{stem}_beta.pgm", r["beta"])
            for cls, st in sorted(r["per_class"].items()):
                lines.append(f"{r['site']},{cls},{st['mean']:.6g},{st['spread']:.6g}")
        (out / "spread.csv").write_text("\n".join(lines) + "\n")
    return results
