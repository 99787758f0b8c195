import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfcn import audit
from gfcn.model import ArchitectureConfig, LayerSpec, build_model, pool_schedule

PUBLISHED_DELTA = 133_888


def field_oracle(n_gateblocks: int, ending_gates: int, kw: int = 8) -> tuple[int, int]:
    """Closed-form field: four 3x3 convs, then per GateBlock two 3x3 DSCs and a pool."""
    rv = rh = 1 + 4 * 2
    jv = jh = 1
    for ph, pw in pool_schedule(n_gateblocks):
        rv += 4 * jv + (ph - 1) * jv
        rh += 4 * jh + (pw - 1) * jh
        jv *= ph
        jh *= pw
    rv += jv  # 2x1 collapse
    rh += ending_gates * (kw - 1) * jh
    return rv, rh


def test_single_conv_count():
    cfg = ArchitectureConfig(convblock_filters=(32, 64))
    rows = audit.count_parameters(build_model(cfg))[1]
    conv1 = next(n for name, _, n in rows if name == "cb1.conv1")
    assert conv1 == 3 * 3 * 1 * 32 + 32 == 320


def test_counter_matches_arrays_and_closed_form():
    for cfg in (ArchitectureConfig(), ArchitectureConfig(charset_size=10, ending_gate_count=2),
                ArchitectureConfig.for_height(32, gateblock_filters=(8, 16, 8, 8), ending_channels=20)):
        model = build_model(cfg)
        total, _ = audit.count_parameters(model)
        assert total == sum(p.data.size for p in model.parameters().values())
        assert total == audit.analytic_parameter_count(cfg)


def test_per_gate_delta():
    sweep = audit.ending_gate_sweep()
    deltas = {b.params - a.params for a, b in zip(sweep, sweep[1:])}
    assert deltas == {PUBLISHED_DELTA}
    assert audit.ending_delta(256) == 2 * 256 ** 2 + 11 * 256 == PUBLISHED_DELTA
    assert audit.ending_delta(128) == 34_176


def test_published_totals_are_an_arithmetic_progression():
    totals = [audit.TABLE_V[k][0] for k in range(1, 7)]
    assert {b - a for a, b in zip(totals, totals[1:])} == {PUBLISHED_DELTA}


def test_solve_ending_channels():
    assert audit.solve_ending_channels(PUBLISHED_DELTA) == 256
    assert audit.solve_ending_channels(34_176) == 128
    assert audit.solve_ending_channels(PUBLISHED_DELTA + 1) is None


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 16))
def test_solve_inverts_delta(c, kw):
    assert audit.solve_ending_channels(audit.ending_delta(c, kw), kw) == c


def test_receptive_field_and_sweep():
    rf, trace = audit.receptive_field(build_model())
    assert rf == (196, 240) == field_oracle(5, 6)
    fields = [r.field for r in audit.ending_gate_sweep()]
    assert [h for _, h in fields] == list(range(100, 241, 28))
    assert all(v == 196 for v, _ in fields)
    for r in audit.ending_gate_sweep():
        assert r.field == r.target_field


@pytest.mark.parametrize("height, gates", [(32, 1), (64, 3), (128, 6)])
def test_receptive_field_oracle_other_heights(height, gates):
    cfg = ArchitectureConfig.for_height(height, ending_gate_count=gates, charset_size=4,
                                        convblock_filters=(2, 2), ending_channels=4)
    rf, _ = audit.receptive_field(build_model(cfg))
    assert rf == field_oracle(len(cfg.gateblock_filters), gates)


def test_trace_monotone():
    _, trace = audit.receptive_field(build_model())
    for a, b in zip(trace, trace[1:]):
        assert b.r_v >= a.r_v and b.r_h >= a.r_h and b.j_v >= a.j_v and b.j_h >= a.j_h


def test_single_3x3_field():
    spec = LayerSpec("c", "conv", kernel=(3, 3), in_channels=1, out_channels=1)
    step = audit.receptive_field_trace([spec])[-1]
    assert (step.r_v, step.r_h) == (3, 3)


def test_field_independent_of_widths():
    a = ArchitectureConfig(charset_size=7, ending_channels=64, gateblock_filters=(8,) * 5)
    assert audit.receptive_field(build_model(a))[0] == (196, 240)


def test_calibration_reports_residual():
    result = audit.calibrate_channels()
    assert result.config.gateblock_filters == (64, 64, 256, 128, 256)
    assert result.config.ending_channels == 256
    assert {r.diff for r in result.rows} == {-16}
    assert not result.exact
    assert (128, 34_176) in result.rejected_ending_channels
    text = result.to_text()
    assert "-16" in text and "34176" in text


def test_calibration_finds_planted_config():
    planted = ArchitectureConfig(gateblock_filters=(128, 64, 64, 256, 128), charset_size=79)
    targets = {k: audit.analytic_parameter_count(dataclasses.replace(planted, ending_gate_count=k))
               for k in range(1, 7)}
    result = audit.calibrate_channels(targets)
    assert result.exact
    assert any(c.gateblock_filters == planted.gateblock_filters for c in result.configs)


def test_calibration_rejects_non_progression():
    with pytest.raises(ValueError, match="arithmetic"):
        audit.calibrate_channels({1: 10, 2: 20, 3: 35})


def test_analyze_report_text_and_tsv():
    result = audit.analyze()
    assert result["conv_layers"] == 22
    assert result["receptive_field"] == (196, 240)
    text = audit.format_analysis(result)
    assert "(196, 240)" in text and "133888" in text
    tsv = audit.sweep_tsv(result["sweep"]).splitlines()
    assert len(tsv) == 7 and all(len(line.split("\t")) == 7 for line in tsv)
    rows = audit.trace_tsv(result["trace"]).splitlines()
    assert rows[-1].split("\t")[3:5] == ["196", "240"]
