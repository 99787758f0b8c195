"""Command-line entry points: train, eval, predict, analyze, compare-norms, synth.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
validation failure.  Every command validates all of its inputs before it
writes anything.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audit
from .data import (
    Charset,
    DataError,
    DatasetManifest,
    LineSample,
    check_sample,
    load_and_preprocess,
    load_dataset,
    synth_generate,
)
from .functional import NormKind
from .model import ArchitectureConfig, build_model
from .train import Checkpoint, CheckpointError, TrainConfig, evaluate, fit, predict, run_hash

logger = logging.getLogger("gfcn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMPARE_NORM_KINDS = ("batch", "layer", "instance", "group(32)")
COMPARE_CUTOFFS = (50, 100, 150, 200)


class UsageError(Exception):
    """Invalid input detected before any work started (exit code 2)."""


# -- run configuration -------------------------------------------------------------------------


@dataclass
class DataSection:
    charset: Path
    train: Path | None = None
    valid: Path | None = None
    runs_dir: Path = Path("runs")
    preserve_aspect: bool = False


@dataclass
class RunConfig:
    architecture: ArchitectureConfig
    training: TrainConfig
    data: DataSection
    source: Path | None = None

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        parser.read_string(self.architecture.to_text())
        parser["training"] = {k: str(v) for k, v in self.training.to_dict().items()}
        d = {"charset": str(self.data.charset), "runs_dir": str(self.data.runs_dir)}
        if self.data.train is not None:
            d["train"] = str(self.data.train)
        if self.data.valid is not None:
            d["valid"] = str(self.data.valid)
        d["preserve_aspect"] = str(self.data.preserve_aspect).lower()
        parser["data"] = d
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in parser[name].items()]
            lines.append("")
        return "\n".join(lines)


_SECTIONS = ("architecture", "training", "data")


def _training_from_section(section) -> TrainConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, raw in section.items():
        if key not in fields:
            raise UsageError(f"[training]: unknown key {key!r}")
        kind = type(fields[key].default)
        try:
            out[key] = kind(raw.strip())
        except ValueError:
            raise UsageError(f"[training] {key}: cannot parse {raw!r} as {kind.__name__}") from None
    return TrainConfig(**out)


def _data_from_section(section, base: Path) -> DataSection:
    allowed = {"charset", "train", "valid", "runs_dir", "preserve_aspect"}
    for key in section:
        if key not in allowed:
            raise UsageError(f"[data]: unknown key {key!r}")
    if "charset" not in section:
        raise UsageError("[data]: 'charset' is required")

    def path(key):
        return base / section[key].strip() if key in section else None

    flag = section.get("preserve_aspect", "false").strip().lower()
    if flag not in ("true", "false"):
        raise UsageError(f"[data] preserve_aspect: expected true or false, got {flag!r}")
    return DataSection(
        charset=path("charset"),
        train=path("train"),
        valid=path("valid"),
        runs_dir=path("runs_dir") or base / "runs",
        preserve_aspect=flag == "true",
    )


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and fully validate an INI run configuration.

    Relative paths in ``[data]`` are resolved against the config file's
    directory.  ``charset_size`` may be omitted and is then taken from the
    charset file; if given it must agree.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc.message.splitlines()[0]}") from None
    unknown = [s for s in parser.sections() if s not in _SECTIONS]
    if unknown:
        raise UsageError(f"{path}: unknown section(s) {', '.join(unknown)}")
    if "data" not in parser:
        raise UsageError(f"{path}: missing [data] section")
    data = _data_from_section(parser["data"], path.parent)
    charset = load_charset(data.charset)
    arch_section = dict(parser["architecture"]) if "architecture" in parser else {}
    try:
        arch = ArchitectureConfig.from_section(arch_section)
    except ValueError as exc:
        raise UsageError(f"[architecture]: {exc}") from None
    if "charset_size" not in arch_section:
        arch = dataclasses.replace(arch, charset_size=len(charset))
    elif arch.charset_size != len(charset):
        raise UsageError(
            f"[architecture] charset_size = {arch.charset_size} but {data.charset} has {len(charset)} symbols"
        )
    training = _training_from_section(parser["training"] if "training" in parser else {})
    try:
        arch.validate()
        training.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return RunConfig(arch, training, data, path)


def load_charset(path: Path) -> Charset:
    if not Path(path).is_file():
        raise UsageError(f"charset file {path} does not exist")
    try:
        return Charset.load(path)
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _load_split(manifest_path: Path | None, name: str, charset: Charset, cfg: RunConfig) -> list[LineSample]:
    if manifest_path is None:
        raise UsageError(f"[data]: '{name}' manifest is required for this command")
    try:
        manifest = DatasetManifest.load(manifest_path, split=name)
        return load_dataset(manifest, charset, cfg.architecture.input_height, cfg.data.preserve_aspect)
    except DataError as exc:
        raise UsageError(str(exc)) from None


# -- commands --------------------------------------------------------------------------------


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, seed=seed))


def _find_resumable(runs_dir: Path, config_hash: str) -> Path | None:
    if not runs_dir.is_dir():
        return None
    candidates = sorted(p for p in runs_dir.glob(f"{config_hash}-*") if (p / "last.ckpt").is_file())
    return candidates[-1] if candidates else None


def cmd_train(args) -> int:
    cfg = _with_seed(load_run_config(args.config), args.seed)
    charset = load_charset(cfg.data.charset)
    train_set = _load_split(cfg.data.train, "train", charset, cfg)
    valid_set = _load_split(cfg.data.valid, "valid", charset, cfg)
    if not train_set:
        raise UsageError(f"training manifest {cfg.data.train} is empty")
    if not valid_set:
        raise UsageError(f"validation manifest {cfg.data.valid} is empty")
    runs_dir = Path(args.out) if args.out else cfg.data.runs_dir
    config_hash = run_hash(cfg.architecture, charset, cfg.training)

    if args.resume:
        run_dir = Path(args.resume) if isinstance(args.resume, str) else _find_resumable(runs_dir, config_hash)
        if run_dir is None or not (run_dir / "last.ckpt").is_file():
            raise UsageError(f"nothing to resume in {run_dir if run_dir is not None else runs_dir}")
        if (run_dir / "summary.json").is_file():
            raise UsageError(f"run {run_dir} is complete; completed runs are not modified")
        try:
            last = Checkpoint.load(run_dir / "last.ckpt")
        except CheckpointError as exc:
            raise UsageError(str(exc)) from None
        if last.config_hash != config_hash:
            raise UsageError(f"{run_dir} was written by a different configuration ({last.config_hash})")
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = runs_dir / f"{config_hash}-{stamp}"
        n = 1
        while run_dir.exists():
            n += 1
            run_dir = runs_dir / f"{config_hash}-{stamp}-{n}"
        run_dir.mkdir(parents=True)
        (run_dir / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
        charset.save(run_dir / "charset.txt")

    model = build_model(cfg.architecture, seed=cfg.training.seed)
    print(f"run directory: {run_dir}", flush=True)

    def report(record):
        print(
            f"epoch {record['epoch']:4d}  train_loss {record['train_loss']:10.4f}  "
            f"valid_loss {record['valid_loss']:10.4f}  valid_cer {record['valid_cer']:7.2f}%",
            flush=True,
        )

    result = fit(model, train_set, valid_set, charset, cfg.training, run_dir, resume=bool(args.resume), on_epoch=report)
    summary = {
        "config_hash": config_hash,
        "epochs": result.last.state.epoch,
        "best_epoch": result.best.state.best_epoch,
        "best_metric": result.best.state.best_metric,
        "eval_metric": cfg.training.eval_metric,
        "stopped_early": result.stopped_early,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"best {cfg.training.eval_metric} {summary['best_metric']:.4f} at epoch {summary['best_epoch']}")
    return EXIT_OK


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    manifest_path = Path(args.manifest)
    charset_path = Path(args.charset) if args.charset else manifest_path.parent / "charset.txt"
    if args.charset or charset_path.is_file():
        charset = load_charset(charset_path)
        if charset.digest() != ckpt.charset.digest():
            raise UsageError(
                f"charset {charset_path} (hash {charset.digest()}) does not match the checkpoint "
                f"charset (hash {ckpt.charset.digest()})"
            )
    try:
        manifest = DatasetManifest.load(manifest_path)
        samples = load_dataset(manifest, ckpt.charset, ckpt.arch.input_height)
    except DataError as exc:
        raise UsageError(str(exc)) from None
    if not samples:
        raise UsageError(f"manifest {manifest_path} is empty")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval-{manifest_path.stem}.txt")
    model = ckpt.build_model()
    report = evaluate(model, samples, ckpt.charset, ckpt.train_config.batch_size)
    text = report.to_text()
    sys.stdout.write(text)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    out.with_suffix(".tsv").write_text(report.to_tsv(), encoding="utf-8")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    samples = []
    for p in args.images:
        if not Path(p).is_file():
            raise UsageError(f"image {p} does not exist")
        try:
            image = load_and_preprocess(p, ckpt.arch.input_height)
        except (DataError, ValueError, OSError) as exc:
            raise UsageError(f"{p}: {exc}") from None
        sample = LineSample(image, "", str(p))
        try:
            check_sample(sample, ckpt.charset)
        except DataError as exc:
            raise UsageError(str(exc)) from None
        if sample.frame_count < 1:
            raise UsageError(f"{p}: too narrow after resizing ({sample.width_px} px) to yield a frame")
        samples.append(sample)
    model = ckpt.build_model()
    hyps, _ = predict(model, samples, ckpt.charset, batch_size=1)
    for h in hyps:
        print(h)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.config:
        arch = load_run_config(args.config).architecture
    else:
        arch = ArchitectureConfig()
    result = audit.analyze(arch)
    calibration = audit.calibrate_channels()
    if args.format == "tsv":
        sys.stdout.write(audit.sweep_tsv(result["sweep"]))
    else:
        sys.stdout.write(audit.format_analysis(result))
        sys.stdout.write("\n" + calibration.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "analysis.txt").write_text(audit.format_analysis(result), encoding="utf-8")
        (out / "trace.tsv").write_text(audit.trace_tsv(result["trace"]), encoding="utf-8")
        (out / "sweep.tsv").write_text(audit.sweep_tsv(result["sweep"]), encoding="utf-8")
        (out / "calibration.txt").write_text(calibration.to_text(), encoding="utf-8")
    return EXIT_OK


def _cutoffs(max_epochs: int, raw: str | None) -> list[int]:
    if raw:
        try:
            values = sorted({int(x) for x in raw.split(",") if x.strip()})
        except ValueError:
            raise UsageError(f"--cutoffs: expected comma-separated integers, got {raw!r}") from None
        if not values or values[0] < 1:
            raise UsageError("--cutoffs must be positive")
        return values
    values = [c for c in COMPARE_CUTOFFS if c <= max_epochs]
    return values or [max_epochs]


def compare_norms(cfg: RunConfig, train_set, valid_set, charset, cutoffs, out_dir: Path | None = None):
    """Train once per normalization kind; best validation CER within each epoch cutoff.

    Group normalization falls back to gcd(channels, 32) groups when a width
    is not divisible by 32.
    """
    horizon = max(cutoffs)
    training = dataclasses.replace(cfg.training, max_epochs=horizon, early_stop_patience=horizon + 1)
    grid = {}
    for kind in COMPARE_NORM_KINDS:
        arch = dataclasses.replace(cfg.architecture, norm_kind=NormKind.parse(kind), group_fallback=True)
        model = build_model(arch, seed=training.seed)
        run_dir = out_dir / kind.replace("(", "").replace(")", "") if out_dir is not None else None
        result = fit(model, train_set, valid_set, charset, training, run_dir)
        cers = [r["valid_cer"] for r in result.history]
        grid[kind] = [min(cers[:c]) for c in cutoffs]
        logger.info("%s: %s", kind, grid[kind])
    return grid


def format_norm_grid(grid: dict, cutoffs) -> tuple[str, str]:
    header = f"{'normalization':<14}" + "".join(f"{'<=' + str(c) + ' ep':>12}" for c in cutoffs)
    lines = ["# best validation CER (%) within the first N epochs", header]
    tsv = ["norm\t" + "\t".join(f"cer_le_{c}" for c in cutoffs)]
    for kind, row in grid.items():
        lines.append(f"{kind:<14}" + "".join(f"{v:>12.2f}" for v in row))
        tsv.append(kind + "\t" + "\t".join(f"{v:.4f}" for v in row))
    final = {k: v[-1] for k, v in grid.items()}
    worst = max(final, key=final.get)
    if worst == "batch":
        lines.append("# batch normalization has the worst CER at the last cutoff, as expected")
    else:
        lines.append(f"# FLAG: batch normalization is not the worst at the last cutoff (worst: {worst})")
    return "\n".join(lines) + "\n", "\n".join(tsv) + "\n"


def cmd_compare_norms(args) -> int:
    cfg = _with_seed(load_run_config(args.config), args.seed)
    charset = load_charset(cfg.data.charset)
    train_set = _load_split(cfg.data.train, "train", charset, cfg)
    valid_set = _load_split(cfg.data.valid, "valid", charset, cfg)
    if not train_set or not valid_set:
        raise UsageError("compare-norms needs non-empty train and valid manifests")
    cutoffs = _cutoffs(cfg.training.max_epochs, args.cutoffs)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    grid = compare_norms(cfg, train_set, valid_set, charset, cutoffs, out)
    text, tsv = format_norm_grid(grid, cutoffs)
    sys.stdout.write(text)
    if out is not None:
        (out / "norms.txt").write_text(text, encoding="utf-8")
        (out / "norms.tsv").write_text(tsv, encoding="utf-8")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.charset and args.symbols:
        raise UsageError("give either --charset or --symbols, not both")
    if args.charset:
        charset = load_charset(Path(args.charset))
    elif args.symbols:
        try:
            charset = Charset.from_text(args.symbols)
        except DataError as exc:
            raise UsageError(str(exc)) from None
    else:
        raise UsageError("one of --charset or --symbols is required")
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    try:
        synth_generate(charset, 0, args.seed, (args.min_length, args.max_length))
    except DataError as exc:
        raise UsageError(str(exc)) from None
    manifest, _ = synth_generate(
        charset, args.count, args.seed, (args.min_length, args.max_length), args.out, args.split
    )
    print(f"wrote {len(manifest.records)} lines to {Path(args.out) / (args.split + '.tsv')}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfcn", description="Gated fully convolutional text-line recognizer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", nargs="?", const=True, default=False, metavar="RUN_DIR",
                   help="continue the latest run of this configuration, or RUN_DIR")
    p.add_argument("--out", help="parent directory for run directories (overrides [data] runs_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CER/WER of a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--charset", help="charset file to check against the checkpoint")
    p.add_argument("--out", help="report path (a .tsv twin is written next to it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="transcribe line images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("analyze", help="parameter and receptive-field audit")
    p.add_argument("--config")
    p.add_argument("--format", choices=("text", "tsv"), default="text")
    p.add_argument("--out", help="directory for analysis.txt, trace.tsv, sweep.tsv, calibration.txt")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare-norms", help="train once per normalization kind and tabulate CER")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--cutoffs", help="comma-separated epoch cutoffs (default 50,100,150,200)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare_norms)

    p = sub.add_parser("synth", help="render a synthetic line dataset")
    p.add_argument("--charset", help="charset file")
    p.add_argument("--symbols", help="charset given inline, e.g. 0123456789abcdef")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-length", type=int, default=3)
    p.add_argument("--max-length", type=int, default=10)
    p.add_argument("--split", default="synth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gfcn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print(f"gfcn {args.command}: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - reported as a one-line runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"gfcn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
