"""Adam + CTC training loop, evaluation, checkpoints and early stopping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ctc import InfeasibleAlignmentError, ctc_batch_loss, ctc_loss, greedy_decode
from .data import Charset, LineSample, collate_batch
from .metrics import EvalReport, cer_wer
from .model import ArchitectureConfig, Model, build_model
from .tensor import no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GFCNCKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    early_stop_patience: int = 50
    max_epochs: int = 1000
    seed: int = 0
    eval_metric: str = "cer"

    def validate(self) -> None:
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.eval_metric not in ("cer", "ctc_loss"):
            raise ValueError(f"eval_metric must be 'cer' or 'ctc_loss', got {self.eval_metric!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- Adam ----------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params[name].data``.

    The whole step is rejected (nothing updated) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            logger.warning("non-finite gradient in %s; Adam step %d rejected", name, state.step + 1)
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# -- training state and checkpoints ------------------------------------------------------------


@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_metric: float = math.inf
    best_epoch: int = 0
    since_improvement: int = 0


def run_hash(arch: ArchitectureConfig, charset: Charset, train: TrainConfig) -> str:
    """Identity of a training run; resuming requires it to match."""
    ident = {
        "arch": arch.to_dict(),
        "charset": list(charset.symbols),
        "lr": train.learning_rate,
        "batch_size": train.batch_size,
        "seed": train.seed,
        "eval_metric": train.eval_metric,
    }
    return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    arch: ArchitectureConfig
    charset: Charset
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    state: TrainState
    rng_state: dict
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = run_hash(self.arch, self.charset, self.train_config)

    @classmethod
    def capture(cls, model: Model, charset: Charset, config: TrainConfig, state: TrainState) -> "Checkpoint":
        return cls(
            arch=model.config,
            charset=charset,
            train_config=config,
            params={k: p.data.copy() for k, p in model.named_parameters()},
            buffers={k: b.copy() for k, b in model.buffers().items()},
            state=TrainState(
                AdamState(
                    {k: a.copy() for k, a in state.adam.m.items()},
                    {k: a.copy() for k, a in state.adam.v.items()},
                    state.adam.step, state.adam.beta1, state.adam.beta2, state.adam.eps,
                ),
                state.epoch, state.best_metric, state.best_epoch, state.since_improvement,
            ),
            rng_state=model.rng.bit_generator.state,
        )

    def restore(self, model: Model) -> None:
        params = model.parameters()
        if set(params) != set(self.params):
            raise CheckpointError("checkpoint parameters do not match the model")
        for k, p in params.items():
            if p.shape != self.params[k].shape:
                raise CheckpointError(f"parameter {k}: checkpoint shape {self.params[k].shape} != {p.shape}")
            p.data[...] = self.params[k]
        for k, b in model.buffers().items():
            b[...] = self.buffers[k]
        model.rng.bit_generator.state = self.rng_state

    def build_model(self) -> Model:
        model = build_model(self.arch, seed=self.train_config.seed)
        self.restore(model)
        return model

    def save(self, path: str | Path) -> None:
        arrays: list[tuple[str, np.ndarray]] = []
        arrays += [(f"param/{k}", v) for k, v in self.params.items()]
        arrays += [(f"buffer/{k}", v) for k, v in self.buffers.items()]
        arrays += [(f"adam_m/{k}", v) for k, v in self.state.adam.m.items()]
        arrays += [(f"adam_v/{k}", v) for k, v in self.state.adam.v.items()]
        directory, offset = [], 0
        for name, a in arrays:
            a = np.ascontiguousarray(a)
            directory.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
        s = self.state
        header = {
            "config_hash": self.config_hash,
            "architecture": self.arch.to_dict(),
            "charset": list(self.charset.symbols),
            "train": self.train_config.to_dict(),
            "epoch": s.epoch,
            "best_metric": None if math.isinf(s.best_metric) else s.best_metric,
            "best_epoch": s.best_epoch,
            "since_improvement": s.since_improvement,
            "adam": {"step": s.adam.step, "beta1": s.adam.beta1, "beta2": s.adam.beta2, "eps": s.adam.eps},
            "rng_state": self.rng_state,
            "tensors": directory,
        }
        blob = json.dumps(header).encode("utf-8")
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            for _, a in arrays:
                fh.write(np.ascontiguousarray(a).tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        try:
            version, n = struct.unpack("<IQ", raw[8:20])
        except struct.error:
            raise CheckpointError(f"{path}: truncated checkpoint header") from None
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[20 : 20 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError(f"{path}: corrupt checkpoint header") from None
        body = memoryview(raw)[20 + n :]
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            end = entry["offset"] + count * dtype.itemsize
            if end > len(body):
                raise CheckpointError(f"{path}: tensor {entry['name']} truncated")
            arr = np.frombuffer(body[entry["offset"] : end], dtype=dtype).reshape(entry["shape"]).copy()
            kind, name = entry["name"].split("/", 1)
            groups[kind][name] = arr
        a = header["adam"]
        state = TrainState(
            AdamState(groups["adam_m"], groups["adam_v"], a["step"], a["beta1"], a["beta2"], a["eps"]),
            header["epoch"],
            math.inf if header["best_metric"] is None else header["best_metric"],
            header["best_epoch"],
            header["since_improvement"],
        )
        ckpt = cls(
            arch=ArchitectureConfig.from_dict(header["architecture"]),
            charset=Charset(tuple(header["charset"])),
            train_config=TrainConfig(**header["train"]),
            params=groups["param"],
            buffers=groups["buffer"],
            state=state,
            rng_state=header["rng_state"],
            config_hash=header["config_hash"],
        )
        if ckpt.config_hash != run_hash(ckpt.arch, ckpt.charset, ckpt.train_config):
            raise CheckpointError(f"{path}: config hash does not match stored configuration")
        return ckpt


# -- loops -------------------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    samples_per_sec: float
    losses: list[float]


def batches(samples: Sequence[LineSample], batch_size: int, order: Sequence[int] | None = None):
    order = range(len(samples)) if order is None else order
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield [samples[j] for j in order[i : i + batch_size]]


def train_step(model: Model, batch, lr: float, adam: AdamState) -> float:
    model.zero_grad()
    log_probs = model(batch.images)
    loss = ctc_batch_loss(log_probs, batch.labels, batch.frame_counts, model.blank_index)
    value = loss.item()
    if not math.isfinite(value):
        return value
    loss.backward()
    params = model.parameters()
    adam_step(params, {k: p.grad for k, p in params.items()}, adam, lr)
    return value


def train_epoch(
    model: Model, samples: Sequence[LineSample], charset: Charset, config: TrainConfig, state: TrainState
) -> EpochStats:
    """One shuffled pass; the shuffle is seeded by (seed, epoch)."""
    if not samples:
        raise TrainingError("training set is empty")
    model.train()
    epoch = state.epoch + 1
    order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
    losses, bad = [], 0
    start = time.perf_counter()
    for group in batches(samples, config.batch_size, order):
        batch = collate_batch(group, charset, model.dtype)
        value = train_step(model, batch, config.learning_rate, state.adam)
        if math.isfinite(value):
            bad = 0
            losses.append(value)
        else:
            bad += 1
            logger.warning("non-finite loss at epoch %d (%d consecutive)", epoch, bad)
            if bad > 3:
                raise TrainingError(f"epoch {epoch} aborted after {bad} consecutive non-finite losses")
    elapsed = time.perf_counter() - start
    state.epoch = epoch
    return EpochStats(epoch, float(np.mean(losses)) if losses else math.nan, len(samples) / max(elapsed, 1e-9), losses)


def predict(model: Model, samples: Sequence[LineSample], charset: Charset, batch_size: int = 2):
    """Greedy transcripts and per-sample CTC losses (None when no transcript is given)."""
    was_training = model.training
    model.eval()
    hyps, losses = [], []
    try:
        with no_grad():
            for group in batches(samples, batch_size):
                batch = collate_batch(group, charset, model.dtype)
                lp = model(batch.images).data
                for i, (n, labels) in enumerate(zip(batch.frame_counts, batch.labels)):
                    lattice = lp[i, :, 0, :n].T.astype(np.float64)
                    hyps.append(greedy_decode(lattice, charset.symbols, model.blank_index))
                    try:
                        losses.append(ctc_loss(lattice, labels, model.blank_index))
                    except InfeasibleAlignmentError:
                        losses.append(math.inf)
    finally:
        if was_training:
            model.train()
    return hyps, losses


def evaluate(model: Model, samples: Sequence[LineSample], charset: Charset, batch_size: int = 2) -> EvalReport:
    """Greedy decoding in eval mode; corpus CER/WER plus mean CTC loss."""
    hyps, losses = predict(model, samples, charset, batch_size)
    report = cer_wer([s.transcript for s in samples], hyps)
    report.loss = float(np.mean(losses))
    report.hypotheses = hyps
    return report


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]
    stopped_early: bool


def fit(
    model: Model,
    train_set: Sequence[LineSample],
    valid_set: Sequence[LineSample],
    charset: Charset,
    config: TrainConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
    on_epoch: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train until ``max_epochs`` or ``early_stop_patience`` epochs without strict improvement.

    With ``run_dir``, ``best.ckpt``/``last.ckpt`` are rewritten each epoch and
    ``history.jsonl`` is appended; ``resume`` continues from ``last.ckpt``.
    """
    config.validate()
    run_dir = Path(run_dir) if run_dir is not None else None
    state = TrainState()
    history: list[dict] = []
    best: Checkpoint | None = None
    if resume:
        if run_dir is None or not (run_dir / "last.ckpt").is_file():
            raise TrainingError(f"nothing to resume in {run_dir}")
        last = Checkpoint.load(run_dir / "last.ckpt")
        if last.config_hash != run_hash(model.config, charset, config):
            raise CheckpointError("checkpoint was written by a different configuration")
        last.restore(model)
        state = last.state
        if (run_dir / "best.ckpt").is_file():
            best = Checkpoint.load(run_dir / "best.ckpt")
        history = read_history(run_dir / "history.jsonl")[: state.epoch]
        (run_dir / "history.jsonl").write_text("".join(json.dumps(r) + "\n" for r in history))
    elif run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "history.jsonl").write_text("")

    stopped = state.since_improvement >= config.early_stop_patience
    last = Checkpoint.capture(model, charset, config, state)
    while not stopped and state.epoch < config.max_epochs:
        t0 = time.perf_counter()
        stats = train_epoch(model, train_set, charset, config, state)
        report = evaluate(model, valid_set, charset, config.batch_size)
        metric = report.cer if config.eval_metric == "cer" else report.loss
        improved = metric < state.best_metric
        if improved:
            state.best_metric, state.best_epoch, state.since_improvement = metric, state.epoch, 0
        else:
            state.since_improvement += 1
        record = {
            "epoch": state.epoch,
            "train_loss": stats.mean_loss,
            "valid_loss": report.loss,
            "valid_cer": report.cer,
            "valid_wer": report.wer,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(record)
        last = Checkpoint.capture(model, charset, config, state)
        if improved:
            best = last
        if run_dir is not None:
            with open(run_dir / "history.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
            if improved:
                best.save(run_dir / "best.ckpt")
            last.save(run_dir / "last.ckpt")
        logger.info("epoch %d loss %.4f valid CER %.2f%%", state.epoch, stats.mean_loss, report.cer)
        if on_epoch is not None:
            on_epoch(record)
        stopped = state.since_improvement >= config.early_stop_patience
    return FitResult(best if best is not None else last, last, history, stopped)


def read_history(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
