"""Static cost analysis of the full-size generator.

The analyzer prices every layer of the declared 256x256 backbone (seven
residual blocks, 151 classes) and pairs each norm site with the conv that
produced its input. Swapping the norm mode shows the headline result: the
modulation networks of the spatially-adaptive variant cost a large fraction
of the backbone itself, while per-class banks are negligible.

Writes report_spade.csv / report_clade.csv; plots the per-site ratios to
ratios.png when matplotlib is available.
"""

from cladelab import analyze, graph_preset, report_csv, report_table

reports = {}
for mode in ("spade", "clade"):
    report = analyze(graph_preset("paper-256", norm_mode=mode))
    reports[mode] = report
    with open(f"report_{mode}.csv", "w") as f:
        f.write(report_csv(report))
    print(f"\n==== {mode} ====")
    print(report_table(report))

s, c = reports["spade"], reports["clade"]
print("\nsummary (totals convention):")
print(f"  spade extra cost: {100 * s.avg_param_ratio:.2f}% of backbone params, "
      f"{100 * s.avg_flops_ratio:.2f}% of backbone flops")
print(f"  clade extra cost: {100 * c.avg_param_ratio:.2f}% of backbone params, "
      f"{100 * c.avg_flops_ratio:.4f}% of backbone flops")
print(f"  whole-model totals: spade {s.total_params / 1e6:.1f}M params / "
      f"{s.total_flops / 1e9:.1f}G flops, clade {c.total_params / 1e6:.1f}M / "
      f"{c.total_flops / 1e9:.1f}G")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for mode, marker in (("spade", "o"), ("clade", "s")):
        rows = [r for r in reports[mode].rows if r.ratio_params is not None]
        ax.plot(range(len(rows)), [100 * r.ratio_params for r in rows],
                marker=marker, label=f"{mode} params ratio")
    ax.set_xlabel("norm site (shallow to deep)")
    ax.set_ylabel("extra params / precedent conv params [%]")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig("ratios.png", dpi=120)
    print("\nwrote ratios.png")
except ImportError:
    print("\nmatplotlib not installed; skipping the plot")
