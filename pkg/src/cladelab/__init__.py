"""cladelab: conditional normalization layers for semantic image synthesis.

The package bundles a small NCHW autodiff engine, the normalization family
(batch, instance, conditional instance, spatially-adaptive, class-adaptive
with guided sampling, and edge-map modulation), a conditioned generator
backbone, a static parameter/FLOPs analyzer, and a desk-scale training
harness with synthetic segmentation datasets.

Quick tour::

    import numpy as np
    from cladelab import (ParamBank, SegmentationMask, guided_sample,
                          graph_preset, build_generator, generate, analyze)

    bank = ParamBank.create(num_classes=5, channels=8)
    mask = SegmentationMask(np.zeros((16, 16), np.int32), 5)
    gamma, beta = guided_sample(mask, bank)      # dense per-class modulation

    spec = graph_preset("toy-64", norm_mode="clade")
    model = build_generator(spec, seed=0)
    image = generate(model, mask=..., noise=...)

    report = analyze(graph_preset("paper-256", norm_mode="clade"))
"""

from .tensor import (
    ShapeError, Tape, Tensor, backward, conv2d, finite_diff_check, linear,
    upsample_nearest2x,
)
from .norms import (
    EdgeModParams, NormStats, ParamBank, SegmentationMask, SpadeBlockParams,
    batch_norm, clade_forward, conditional_in, edge_map, edge_modulate,
    guided_sample, instance_norm, spade_forward,
)
from .generator import (
    Entry, GraphError, GraphSpec, LayerSpec, Model, build_generator, generate,
    graph_preset,
)
from .analysis import (
    ComplexityReport, analyze, count_clade, count_conv, count_spade,
    dump_modulation_maps, report_csv, report_table,
)
from .training import (
    Adam, TrainConfig, TrainResult, bench, boundary_f1, hinge_d_loss,
    hinge_g_loss, l1_loss, make_dataset, make_instance_dataset, miou,
    oracle_segment, pixel_accuracy, train,
)
from .formats import (
    CheckpointError, SpecParseError, load_checkpoint, parse_graph_spec,
    read_mask, read_ppm, save_checkpoint, serialize_graph_spec, write_mask,
    write_ppm,
)

__version__ = "0.1.0"
