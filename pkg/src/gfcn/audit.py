"""Parameter and receptive-field auditing against the published ending-gate sweep."""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .model import ArchitectureConfig, LayerSpec, Model, build_model, conv_layer_count, pool_schedule

# ending-gate count -> (parameters, (vertical, horizontal) receptive field), IAM charset of 79
TABLE_V = {
    6: (1_375_792, (196, 240)),
    5: (1_241_904, (196, 212)),
    4: (1_108_016, (196, 184)),
    3: (974_128, (196, 156)),
    2: (840_240, (196, 128)),
    1: (706_352, (196, 100)),
}
TABLE_V_CHARSET = 79


# -- parameters ----------------------------------------------------------------------------


def count_parameters(model: Model) -> tuple[int, list[tuple[str, str, int]]]:
    """Total trainable parameters and a (layer, kind, params) row per layer."""
    rows = [(layer.name, layer.kind, layer.n_params()) for layer in model.layers]
    return sum(r[2] for r in rows), rows


def _conv(cin: int, cout: int, k: int, bias: bool) -> int:
    return cin * cout * k + (cout if bias else 0)


def _dsc(cin: int, cout: int, k: int, bias: bool) -> int:
    return cin * k + cin * cout + ((cin + cout) if bias else 0)


def ending_delta(channels: int, kernel_width: int = 8) -> int:
    """Parameters of one (1 x kw DSC, channels -> 2*channels) + gate + dropout group."""
    return _dsc(channels, 2 * channels, kernel_width, True)


def analytic_parameter_count(cfg: ArchitectureConfig) -> int:
    """Closed-form parameter total; cross-checked against built models in the tests."""
    total, c = 0, 1
    for w in cfg.convblock_filters:
        total += _conv(c, w, 9, cfg.convblock_bias) + _conv(w, w, 9, cfg.convblock_bias)
        total += 2 * w if cfg.convblock_norm_affine else 0
        c = w
    for w in cfg.gateblock_filters:
        total += _dsc(c, w, 9, cfg.gateblock_bias) + _dsc(w, 2 * w, 9, cfg.gateblock_bias)
        total += 4 * w if cfg.gateblock_norm_affine else 0
        c = w
    e = cfg.ending_channels
    total += _dsc(c, e, 2, cfg.collapse_bias)
    total += cfg.ending_gate_count * ending_delta(e, cfg.ending_kernel_width)
    total += _conv(e, cfg.num_classes, 1, cfg.head_bias)
    return total


# -- receptive field -------------------------------------------------------------------------


@dataclass
class FieldStep:
    name: str
    kind: str
    params: int
    r_v: int
    r_h: int
    j_v: int
    j_h: int


def receptive_field_trace(specs: Sequence[LayerSpec], params: Sequence[int] | None = None) -> list[FieldStep]:
    """Per-layer receptive field and jump: r += (k - 1) * j, then j *= s, per axis."""
    r_v = r_h = j_v = j_h = 1
    params = params if params is not None else [0] * len(specs)
    trace = []
    for spec, n in zip(specs, params):
        kh, kw = spec.kernel
        sh, sw = spec.stride
        r_v += (kh - 1) * j_v
        r_h += (kw - 1) * j_h
        j_v *= sh
        j_h *= sw
        trace.append(FieldStep(spec.name, spec.kind, n, r_v, r_h, j_v, j_h))
    return trace


def receptive_field(model: Model) -> tuple[tuple[int, int], list[FieldStep]]:
    """(vertical, horizontal) receptive field of one output frame, plus the layer trace."""
    _, rows = count_parameters(model)
    trace = receptive_field_trace(model.specs(), [r[2] for r in rows])
    last = trace[-1]
    return (last.r_v, last.r_h), trace


# -- calibration ----------------------------------------------------------------------------


@dataclass
class CalibrationRow:
    gates: int
    target: int
    count: int

    @property
    def diff(self) -> int:
        return self.count - self.target


@dataclass
class CalibrationResult:
    configs: list[ArchitectureConfig]
    rows: list[CalibrationRow]
    exact: bool
    delta: int
    rejected_ending_channels: list[tuple[int, int]]
    candidates_searched: int

    @property
    def config(self) -> ArchitectureConfig:
        return self.configs[0]

    def to_text(self) -> str:
        cfg = self.config
        lines = [
            "calibration against ending-gate sweep "
            f"({'exact match' if self.exact else 'closest candidate, signed discrepancies'})",
            f"candidates searched: {self.candidates_searched}; matching configurations: {len(self.configs)}",
            f"ending stack: channels {cfg.ending_channels}, per-gate delta {self.delta}",
        ]
        for c, d in self.rejected_ending_channels:
            lines.append(f"rejected ending_channels={c}: delta {d} != {TABLE_V[6][0] - TABLE_V[5][0]}")
        lines.append(
            f"gateblock_filters={list(cfg.gateblock_filters)} "
            f"convblock_norm_affine={cfg.convblock_norm_affine} gateblock_norm_affine={cfg.gateblock_norm_affine} "
            f"bias(cb,gb,collapse,head)=({cfg.convblock_bias},{cfg.gateblock_bias},"
            f"{cfg.collapse_bias},{cfg.head_bias})"
        )
        lines.append(f"{'gates':>5} {'target':>10} {'count':>10} {'diff':>7}")
        for r in self.rows:
            lines.append(f"{r.gates:>5} {r.target:>10,} {r.count:>10,} {r.diff:>+7}")
        return "\n".join(lines) + "\n"


def calibrate_channels(
    targets: dict[int, int] | None = None,
    width_choices: Iterable[int] = (64, 128, 256),
    ending_channel_choices: Iterable[int] = (128, 256, 512),
    charset_size: int = TABLE_V_CHARSET,
    base: ArchitectureConfig | None = None,
) -> CalibrationResult:
    """Search GateBlock widths, norm affinity and per-stage biases for the published totals.

    ``targets`` maps ending-gate count to parameter total.  Ending-stack
    widths are first filtered by the constant per-gate increment; the
    remaining space is searched exhaustively.  Returns every exact match,
    or the closest candidates with per-row signed discrepancies.
    """
    targets = dict(targets or {k: v[0] for k, v in TABLE_V.items()})
    width_choices = tuple(width_choices)
    if not width_choices or not targets:
        raise ValueError("calibration needs a non-empty candidate space and targets")
    base = base or ArchitectureConfig(charset_size=charset_size)
    gates = sorted(targets)
    steps = {targets[b] - targets[a] for a, b in zip(gates, gates[1:]) if b == a + 1}
    if len(steps) > 1:
        raise ValueError(f"targets do not form an arithmetic progression: increments {sorted(steps)}")
    step = steps.pop() if steps else None

    rejected, ending = [], []
    for c in ending_channel_choices:
        d = ending_delta(c, base.ending_kernel_width)
        (ending if step is None or d == step else rejected).append((c, d))
    if not ending:
        raise ValueError(f"no ending width reproduces the per-gate increment {step}: {rejected}")

    n_blocks = len(base.gateblock_filters)
    best: list[tuple[int, ArchitectureConfig]] = []
    best_err = None
    searched = 0
    flags = ("convblock_norm_affine", "gateblock_norm_affine", "convblock_bias",
             "gateblock_bias", "collapse_bias", "head_bias")
    for (e, _), widths, bits in itertools.product(
        ending, itertools.product(width_choices, repeat=n_blocks), itertools.product((True, False), repeat=len(flags))
    ):
        searched += 1
        cfg = dataclasses.replace(
            base, ending_channels=e, gateblock_filters=widths, ending_gate_count=1,
            **dict(zip(flags, bits)),
        )
        one = analytic_parameter_count(cfg)
        per_gate = ending_delta(e, cfg.ending_kernel_width)
        err = sum(abs(one + (k - 1) * per_gate - targets[k]) for k in gates)
        if best_err is None or err < best_err:
            best_err, best = err, [(err, cfg)]
        elif err == best_err:
            best.append((err, cfg))
    configs = [dataclasses.replace(c, ending_gate_count=max(gates)) for _, c in best]
    rows = []
    for k in gates:
        cfg = dataclasses.replace(configs[0], ending_gate_count=k)
        rows.append(CalibrationRow(k, targets[k], analytic_parameter_count(cfg)))
    return CalibrationResult(
        configs=configs,
        rows=rows,
        exact=best_err == 0,
        delta=ending_delta(configs[0].ending_channels, configs[0].ending_kernel_width),
        rejected_ending_channels=rejected,
        candidates_searched=searched,
    )


def solve_ending_channels(delta: int, kernel_width: int = 8) -> int | None:
    """Positive integer C with 2C^2 + (kw + 3)C == delta, if any."""
    b = kernel_width + 3
    disc = b * b + 8 * delta
    root = math.isqrt(disc)
    if root * root != disc or (root - b) % 4:
        return None
    c = (root - b) // 4
    return c if c > 0 else None


# -- reports ---------------------------------------------------------------------------------


@dataclass
class SweepRow:
    gates: int
    params: int
    field: tuple[int, int]
    target_params: int | None
    target_field: tuple[int, int] | None


def ending_gate_sweep(base: ArchitectureConfig | None = None, counts: Iterable[int] = range(1, 7)) -> list[SweepRow]:
    base = base or ArchitectureConfig()
    rows = []
    for k in counts:
        cfg = dataclasses.replace(base, ending_gate_count=k)
        model = build_model(cfg)
        total, _ = count_parameters(model)
        rf, _ = receptive_field(model)
        published = TABLE_V.get(k) if cfg.charset_size == TABLE_V_CHARSET and cfg.input_height == 64 else None
        rows.append(SweepRow(k, total, rf, published[0] if published else None, published[1] if published else None))
    return rows


def analyze(config: ArchitectureConfig | None = None) -> dict:
    """Layer trace, totals and the ending-gate sweep for ``config``."""
    config = config or ArchitectureConfig()
    model = build_model(config)
    total, _ = count_parameters(model)
    rf, trace = receptive_field(model)
    specs = model.specs()
    sweep = ending_gate_sweep(config)
    deltas = [b.params - a.params for a, b in zip(sweep, sweep[1:])]
    h_steps = [b.field[1] - a.field[1] for a, b in zip(sweep, sweep[1:])]
    return {
        "config": config,
        "total_params": total,
        "receptive_field": rf,
        "trace": trace,
        "conv_layers": conv_layer_count(specs),
        "conv_layers_split": conv_layer_count(specs) + sum(1 for s in specs if s.kind == "dsc"),
        "sweep": sweep,
        "param_deltas": deltas,
        "field_steps": h_steps,
        "pools": pool_schedule(len(config.gateblock_filters)),
    }


def format_trace(trace: Sequence[FieldStep]) -> str:
    head = f"{'layer':<16}{'kind':<11}{'params':>10}{'r_v':>6}{'r_h':>6}{'j_v':>5}{'j_h':>5}"
    lines = [head]
    for s in trace:
        lines.append(f"{s.name:<16}{s.kind:<11}{s.params:>10,}{s.r_v:>6}{s.r_h:>6}{s.j_v:>5}{s.j_h:>5}")
    return "\n".join(lines) + "\n"


def trace_tsv(trace: Sequence[FieldStep]) -> str:
    lines = ["layer\tkind\tparams\tr_v\tr_h\tj_v\tj_h"]
    lines += [f"{s.name}\t{s.kind}\t{s.params}\t{s.r_v}\t{s.r_h}\t{s.j_v}\t{s.j_h}" for s in trace]
    return "\n".join(lines) + "\n"


def format_analysis(result: dict) -> str:
    rf = result["receptive_field"]
    out = [format_trace(result["trace"])]
    out.append(f"total parameters: {result['total_params']:,}")
    out.append(f"receptive field (v, h): ({rf[0]}, {rf[1]})")
    out.append(
        f"convolutional layers: {result['conv_layers']} (separable counted once; "
        f"{result['conv_layers_split']} counting depthwise and pointwise separately)"
    )
    out.append("")
    out.append(f"{'gates':>5}{'params':>12}{'published':>12}{'diff':>8}{'field':>12}{'published':>12}")
    for r in result["sweep"]:
        tp = f"{r.target_params:,}" if r.target_params else "-"
        diff = f"{r.params - r.target_params:+d}" if r.target_params else "-"
        tf = f"({r.target_field[0]}, {r.target_field[1]})" if r.target_field else "-"
        out.append(f"{r.gates:>5}{r.params:>12,}{tp:>12}{diff:>8}{f'({r.field[0]}, {r.field[1]})':>12}{tf:>12}")
    out.append(f"parameter delta per ending gate: {', '.join(str(d) for d in result['param_deltas'])}")
    out.append(f"horizontal field increment per ending gate: {', '.join(str(d) for d in result['field_steps'])}")
    return "\n".join(out) + "\n"


def sweep_tsv(rows: Sequence[SweepRow]) -> str:
    lines = ["gates\tparams\tpublished_params\tr_v\tr_h\tpublished_r_v\tpublished_r_h"]
    for r in rows:
        tp = r.target_params if r.target_params is not None else ""
        tv, th = r.target_field if r.target_field else ("", "")
        lines.append(f"{r.gates}\t{r.params}\t{tp}\t{r.field[0]}\t{r.field[1]}\t{tv}\t{th}")
    return "\n".join(lines) + "\n"
