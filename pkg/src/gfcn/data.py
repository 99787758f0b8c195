"""Line-image ingestion, transcript encoding, batching and synthetic lines.

File formats
------------
Manifest: UTF-8, first line ``# gfcn-manifest v1``, then one
``relative/image/path<TAB>transcript`` record per line (paths relative to
the manifest's directory).

Charset: UTF-8, first line ``# gfcn-charset v1``, then one symbol per line
in index order.  The CTC blank is not listed; it takes index ``len(charset)``.

Images: portable graymap (P2 ASCII or P5 binary, maxval <= 65535).  Other
raster formats are read through Pillow when it is installed.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import font
from .ctc import required_frames
from .model import frames_for_width
from .tensor import Tensor

MANIFEST_HEADER = "# gfcn-manifest v1"
CHARSET_HEADER = "# gfcn-charset v1"
STD_EPS = 1e-8


class DataError(ValueError):
    pass


# -- charset ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class Charset:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            dupes = sorted({s for s in self.symbols if self.symbols.count(s) > 1})
            raise DataError(f"charset symbols must be unique; duplicated: {dupes}")
        for s in self.symbols:
            if len(s) != 1:
                raise DataError(f"charset symbols must be single characters, got {s!r}")

    @classmethod
    def from_text(cls, text: str) -> "Charset":
        return cls(tuple(dict.fromkeys(text)))

    @property
    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __getitem__(self, i: int) -> str:
        return self.symbols[i]

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        return encode_transcript(text, self)

    def decode(self, labels: Iterable[int]) -> str:
        return "".join(self.symbols[k] for k in labels)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CHARSET_HEADER + "\n")
            for s in self.symbols:
                fh.write(s + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Charset":
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                lines = fh.read().split("\n")
        except OSError as exc:
            raise DataError(f"cannot read charset file {path}: {exc.strerror}") from None
        if not lines or lines[0].rstrip("\r") != CHARSET_HEADER:
            raise DataError(f"{path}: missing charset header {CHARSET_HEADER!r}")
        if lines[-1] == "":
            lines = lines[:-1]
        return cls(tuple(line.rstrip("\r") for line in lines[1:]))


def encode_transcript(text: str, charset: Charset) -> list[int]:
    index = charset.index
    out = []
    for pos, ch in enumerate(text):
        if ch not in index:
            raise DataError(f"symbol {ch!r} at position {pos} of {text!r} is not in the charset")
        out.append(index[ch])
    return out


def decode_transcript(labels: Iterable[int], charset: Charset) -> str:
    return charset.decode(labels)


# -- images ------------------------------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a P2/P5 graymap as a 2-D integer array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    pos, tokens = 0, []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if not m:
            raise DataError(f"{path}: truncated graymap header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise DataError(f"{path}: not a portable graymap (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed graymap header") from None
    if width < 1 or height < 1:
        raise DataError(f"{path}: zero-dimension image ({width}x{height})")
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid maxval {maxval}")
    n = width * height
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        body = raw[pos + 1 : pos + 1 + n * dtype.itemsize]
        if len(body) < n * dtype.itemsize:
            raise DataError(f"{path}: truncated pixel data")
        pixels = np.frombuffer(body, dtype=dtype)
    else:
        values = raw[pos:].split()
        if len(values) < n:
            raise DataError(f"{path}: truncated pixel data")
        pixels = np.array([int(v) for v in values[:n]])
    return pixels.reshape(height, width).astype(np.int64)


def write_pgm(path: str | os.PathLike, image: np.ndarray, binary: bool = True) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"graymap must be a non-empty 2-D array, got shape {img.shape}")
    maxval = 255 if img.max() <= 255 else 65535
    h, w = img.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n{maxval}\n".encode("ascii")
    if binary:
        body = img.astype(">u2" if maxval > 255 else "u1").tobytes()
    else:
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in img).encode("ascii") + b"\n"
    Path(path).write_bytes(header + body)


def read_image(path: str | os.PathLike) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".pnm", ""):
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - optional dependency
        raise DataError(f"{path}: only portable graymaps are supported without Pillow") from None
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.int64)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def resize_linear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resampling with pixel-centre alignment."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape == (height, width):
        return img.copy()

    def _axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    lo, hi, f = _axis(img.shape[0], height)
    img = img[lo] * (1 - f)[:, None] + img[hi] * f[:, None]
    lo, hi, f = _axis(img.shape[1], width)
    return img[:, lo] * (1 - f)[None, :] + img[:, hi] * f[None, :]


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; constant images map to all zeros."""
    img = np.asarray(image, dtype=np.float64)
    std = img.std()
    if std < STD_EPS:
        return np.zeros_like(img)
    return (img - img.mean()) / std


def preprocess(image: np.ndarray, target_height: int, preserve_aspect: bool = False) -> np.ndarray:
    h, w = image.shape
    if h < 1 or w < 1:
        raise DataError(f"zero-dimension image {image.shape}")
    new_w = max(1, round(w * target_height / h)) if preserve_aspect else w
    return standardize(resize_linear(image, target_height, new_w))


def load_and_preprocess(path: str | os.PathLike, target_height: int, preserve_aspect: bool = False) -> np.ndarray:
    """Read a line image, rescale its height to ``target_height`` and standardise it.

    Only the height is rescaled unless ``preserve_aspect`` is set.
    """
    image = read_image(path)
    if image.size == 0:
        raise DataError(f"{path}: zero-dimension image")
    return preprocess(image, target_height, preserve_aspect)


# -- samples and manifests ---------------------------------------------------------------------


@dataclass
class LineSample:
    image: np.ndarray
    transcript: str
    source: str = ""

    @property
    def width_px(self) -> int:
        return self.image.shape[1]

    @property
    def frame_count(self) -> int:
        return frames_for_width(self.width_px)


def check_sample(sample: LineSample, charset: Charset, height: int | None = None) -> None:
    where = f" ({sample.source})" if sample.source else ""
    if height is not None and sample.image.shape[0] != height:
        raise DataError(f"sample{where}: height {sample.image.shape[0]} != configured {height}")
    labels = encode_transcript(sample.transcript, charset)
    need = required_frames(labels)
    if sample.frame_count < need:
        raise DataError(
            f"sample{where}: {sample.frame_count} frames for width {sample.width_px} "
            f"but transcript {sample.transcript!r} needs {need} (CTC-infeasible)"
        )


@dataclass
class DatasetManifest:
    records: list[tuple[str, str]] = field(default_factory=list)
    root: Path = Path(".")
    split: str = ""

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(MANIFEST_HEADER + "\n")
            for rel, text in self.records:
                if "\t" in rel or "\n" in text or "\t" in text:
                    raise DataError(f"record {rel!r} contains a tab or newline")
                fh.write(f"{rel}\t{text}\n")

    @classmethod
    def load(cls, path: str | os.PathLike, split: str = "") -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
        lines = text.split("\n")
        if lines[0].rstrip("\r") != MANIFEST_HEADER:
            raise DataError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
        records = []
        for n, line in enumerate(lines[1:], start=2):
            line = line.rstrip("\r")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{n}: expected '<path>\\t<transcript>'")
            rel, transcript = line.split("\t", 1)
            records.append((rel, transcript))
        return cls(records, path.parent, split or path.stem)

    def paths(self) -> list[Path]:
        return [self.root / rel for rel, _ in self.records]

    def validate(self, charset: Charset) -> None:
        for (rel, text), p in zip(self.records, self.paths()):
            if not p.is_file():
                raise DataError(f"manifest {self.split!r}: image {p} does not exist")
            encode_transcript(text, charset)


def load_dataset(
    manifest: DatasetManifest, charset: Charset, target_height: int, preserve_aspect: bool = False
) -> list[LineSample]:
    """Load every record; fails at ingestion on a missing file, unknown symbol or infeasible line."""
    manifest.validate(charset)
    samples = []
    for (rel, text), p in zip(manifest.records, manifest.paths()):
        sample = LineSample(load_and_preprocess(p, target_height, preserve_aspect), text, rel)
        check_sample(sample, charset, target_height)
        samples.append(sample)
    return samples


@dataclass
class Batch:
    images: Tensor
    frame_counts: list[int]
    labels: list[list[int]]
    transcripts: list[str]


def collate_batch(samples: Sequence[LineSample], charset: Charset, dtype=np.float32) -> Batch:
    """Pad to the widest sample rounded up to a multiple of 4 by edge replication.

    Frame counts come from each sample's own width, so CTC never scores
    frames that exist only because of padding.
    """
    if not samples:
        raise DataError("cannot collate an empty batch")
    heights = {s.image.shape[0] for s in samples}
    if len(heights) != 1:
        raise DataError(f"batch mixes image heights {sorted(heights)}")
    width = max(s.width_px for s in samples)
    width = max(4, -(-width // 4) * 4)
    rows = [np.pad(s.image, ((0, 0), (0, width - s.width_px)), mode="edge") for s in samples]
    images = Tensor(np.stack(rows)[:, None].astype(dtype))
    return Batch(
        images,
        [s.frame_count for s in samples],
        [encode_transcript(s.transcript, charset) for s in samples],
        [s.transcript for s in samples],
    )


# -- synthetic lines -----------------------------------------------------------------------

SYNTH_HEIGHT = 32
SYNTH_SCALE = 2
SYNTH_PITCH = (font.GLYPH_WIDTH + 1) * SYNTH_SCALE
SYNTH_MARGIN = 4
SYNTH_JITTER = 2


def render_line(text: str, rng: np.random.Generator, noise_std: float = 8.0) -> np.ndarray:
    """Dark glyphs on a light background, one ``SYNTH_PITCH``-wide cell per symbol.

    Each glyph is shifted horizontally by up to +-2 px and scaled vertically
    by a factor in [0.9, 1.1].
    """
    width = 2 * SYNTH_MARGIN + SYNTH_PITCH * len(text)
    canvas = np.full((SYNTH_HEIGHT, width), 235.0)
    for i, ch in enumerate(text):
        mask = font.glyph(ch)
        mask = np.kron(mask, np.ones((SYNTH_SCALE, SYNTH_SCALE), dtype=bool))
        scale = rng.uniform(0.9, 1.1)
        dx = int(rng.integers(-SYNTH_JITTER, SYNTH_JITTER + 1))
        h = max(1, int(round(mask.shape[0] * scale)))
        rows = np.minimum((np.arange(h) / scale).astype(int), mask.shape[0] - 1)
        mask = mask[rows]
        top = (SYNTH_HEIGHT - h) // 2
        left = SYNTH_MARGIN + i * SYNTH_PITCH + dx
        region = canvas[top : top + h, left : left + mask.shape[1]]
        region[mask[: region.shape[0], : region.shape[1]]] = 25.0
    canvas += rng.normal(0.0, noise_std, size=canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def synth_generate(
    charset: Charset,
    count: int,
    seed: int,
    length_range: tuple[int, int] = (3, 10),
    out_dir: str | os.PathLike | None = None,
    split: str = "synth",
) -> tuple[DatasetManifest, list[np.ndarray]]:
    """Render ``count`` random lines over ``charset``; deterministic in ``seed``.

    With ``out_dir`` the images, ``<split>.tsv`` manifest and ``charset.txt``
    are written there.
    """
    missing = [s for s in charset.symbols if s not in font.SUPPORTED]
    if missing:
        raise DataError(f"no bitmap glyph for charset symbols {missing}")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise DataError(f"invalid length range {length_range}")
    rng = np.random.default_rng(seed)
    symbols = np.array(charset.symbols)
    records, images = [], []
    for i in range(count):
        n = int(rng.integers(lo, hi + 1))
        text = "".join(symbols[rng.integers(0, len(symbols), n)])
        # lines neither start nor end with a space so transcripts survive whitespace splitting
        text = text.strip() or next(s for s in charset.symbols if s != " ") * n
        images.append(render_line(text, rng))
        records.append((f"{split}/{i:05d}.pgm", text))
    root = Path(out_dir) if out_dir is not None else Path(".")
    manifest = DatasetManifest(records, root, split)
    if out_dir is not None:
        (root / split).mkdir(parents=True, exist_ok=True)
        for (rel, _), img in zip(records, images):
            write_pgm(root / rel, img)
        manifest.save(root / f"{split}.tsv")
        charset.save(root / "charset.txt")
    return manifest, images


def synth_samples(
    charset: Charset, count: int, seed: int, target_height: int, length_range: tuple[int, int] = (3, 10)
) -> list[LineSample]:
    """In-memory synthetic samples, preprocessed exactly as files would be."""
    manifest, images = synth_generate(charset, count, seed, length_range)
    return [
        LineSample(preprocess(img, target_height), text, rel)
        for (rel, text), img in zip(manifest.records, images)
    ]
