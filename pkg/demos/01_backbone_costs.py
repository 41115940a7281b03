"""Compare the C2f and C3k2 backbones layer by layer.

Run with ``python demos/01_backbone_costs.py``.
"""

from backbone_lens.arch import build_graph, builtin_preset, describe_layers
from backbone_lens.cost import count_flops, diff_reports, format_delta_table, format_table

SHAPE = (1, 3, 640, 640)

base_spec = builtin_preset("yoloworld-c2f-n")
variant_spec = builtin_preset("yoloworld-c3k2-n")

# The two presets share every layer except the four CSP stages.
print("stages that differ:")
for a, b in zip(describe_layers(base_spec), describe_layers(variant_spec)):
    if a != b:
        print(f"  layer {a['index']}: {a['kind']} -> {b['kind']} (args {b['args']})")
print()

base = count_flops(build_graph(base_spec), SHAPE)
variant = count_flops(build_graph(variant_spec), SHAPE)
print(format_table(base))
print()

delta = diff_reports(base, variant)
print(format_delta_table(delta))
print()

# The deeper stages get cheaper because each C3k unit halves the width of its
# inner bottlenecks, which outweighs the extra 1x1 convolutions it adds.
for s in delta.stages:
    if s.d_params:
        print(f"layer {s.index}: {s.d_params:+d} params, {s.d_macs:+d} MACs")
