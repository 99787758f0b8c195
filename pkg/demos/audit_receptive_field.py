"""
Parameter and receptive-field audit
===================================

How big is the network, and how much of a line image does one output
frame see?  Both questions are answered from layer geometry alone.
"""

import dataclasses

from gfcn import audit
from gfcn.model import ArchitectureConfig, build_model

# The default configuration: 64 px lines, 79 symbols, six ending gates.
config = ArchitectureConfig()
model = build_model(config)
total, rows = audit.count_parameters(model)
print(f"{total:,} parameters in {len(rows)} layers")

# The field grows by (k - 1) * jump per layer; pools multiply the jump.
field, trace = audit.receptive_field(model)
print(audit.format_trace(trace[:8]))
print("...")
print("output frame sees", field, "pixels (v, h)")

# Each extra ending gate adds one 1x8 separable conv at horizontal jump 4.
for row in audit.ending_gate_sweep(config):
    print(row.gates, f"{row.params:>10,}", row.field)

# The per-gate increment pins the ending width: 2C^2 + 11C.
print("ending width from increment:", audit.solve_ending_channels(133_888))

# Searching the GateBlock widths for the published totals.
calibration = audit.calibrate_channels()
print(calibration.to_text())

# A narrower ending stack changes the count but not the field.
narrow = dataclasses.replace(config, ending_channels=128)
print(audit.analytic_parameter_count(narrow), audit.receptive_field(build_model(narrow))[0])
