"""Dataset ingestion: class directories, image decoding, resizing and splits.

Expected layout is ``root/<class name>/<image files>``.  Class ids follow the
sorted directory names.  Binary PPM (P6) is decoded here; PNG, JPEG and the
other raster formats go through Pillow.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Rng

log = logging.getLogger(__name__)

# canonical label vocabulary, in the order of the dataset description table
CLASS_NAMES = (
    "Brassica Napus Var Annua",
    "Brassica Napus Var Oleifera",
    "Brassica Nigra",
    "Brassica Oleracea Gongyloides",
    "Brassica Oleracea LCAV rubra",
    "Brassica Oleracea Rapa Brassica",
    "Brassica Oleracea Var Gongyloides",
    "Brassica Rapa",
    "Brassica Rapa Oleifera",
    "Brassica rapa subsp. rapa",
)
CLASS_COUNTS = (610, 475, 653, 667, 650, 612, 562, 562, 494, 640)

IMAGE_SIZE = 128
PPM_SUFFIXES = {".ppm", ".pnm"}
PILLOW_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}
SUPPORTED_SUFFIXES = PPM_SUFFIXES | PILLOW_SUFFIXES

DEFAULT_RATIOS = (0.5, 0.2, 0.3)  # train, val, test
SPLIT_NAMES = ("train", "val", "test")


class IngestionError(RuntimeError):
    pass


class DecodeError(IngestionError):
    def __init__(self, msg: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{msg}{where}")
        self.offset = offset


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[tuple[Path, int]]
    skipped: int = 0

    @property
    def labels(self) -> list[ClassLabel]:
        return [ClassLabel(i, n) for i, n in enumerate(self.classes)]

    @property
    def counts(self) -> list[int]:
        out = [0] * len(self.classes)
        for _, cid in self.entries:
            out[cid] += 1
        return out

    @property
    def total(self) -> int:
        return len(self.entries)


# --------------------------------------------------------------------------- #
# Decoding
# --------------------------------------------------------------------------- #
@dataclass
class RawImage:
    pixels: np.ndarray  # (height, width, 3) uint8

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


_WS = b" \t\n\r\x0b\x0c"


def decode_ppm(data: bytes, path=None) -> RawImage:
    if data[:2] != b"P6":
        raise DecodeError("missing P6 magic", 0, path)
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(data):
            raise DecodeError("header ends early", pos, path)
        ch = data[pos:pos + 1]
        if ch in (b"",) or ch not in _WS and ch != b"#" and not ch.isdigit():
            raise DecodeError(f"unexpected byte {ch!r} in header", pos, path)
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise DecodeError("unterminated header comment", pos, path)
            pos = end + 1
        elif ch in _WS:
            pos += 1
        else:
            m = re.compile(rb"\d+").match(data, pos)
            values.append(int(m.group()))
            pos = m.end()
            if pos < len(data) and data[pos:pos + 1] not in _WS and data[pos:pos + 1] != b"#":
                raise DecodeError("malformed number in header", pos, path)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise DecodeError(f"bad dimensions {width}x{height}", pos, path)
    if not 0 < maxval < 256:
        raise DecodeError(f"unsupported maxval {maxval}", pos, path)
    if pos >= len(data) or data[pos:pos + 1] not in _WS:
        raise DecodeError("missing whitespace before raster", pos, path)
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise DecodeError(f"raster truncated: need {need} bytes, have {len(data) - pos}", len(data), path)
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    if maxval != 255:
        pix = np.round(pix.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return RawImage(pix.copy())


def encode_ppm(img: RawImage) -> bytes:
    pix = np.ascontiguousarray(img.pixels, dtype=np.uint8)
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + pix.tobytes()


def _decode_pillow(path: Path) -> RawImage:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")  # drops alpha
            return RawImage(np.asarray(rgb, dtype=np.uint8).copy())
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        size = path.stat().st_size if path.exists() else None
        # Pillow does not expose where parsing stopped; report the file length
        raise DecodeError(f"cannot decode image ({exc})", size, path) from None


def decode(path) -> RawImage:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in PPM_SUFFIXES:
        return decode_ppm(path.read_bytes(), path)
    if suffix in PILLOW_SUFFIXES:
        return _decode_pillow(path)
    raise DecodeError(f"unsupported image type {suffix!r}", None, path)


def _axis_taps(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * in / out - 0.5, clamped to the edge
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: RawImage, size: int | tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    """Plain (aspect-ignoring) bilinear resize to a ``(1, 3, h, w)`` tensor in [0, 1]."""
    out_h, out_w = (size, size) if isinstance(size, int) else size
    src = img.pixels.astype(np.float64)
    y0, y1, ty = _axis_taps(img.height, out_h)
    x0, x1, tx = _axis_taps(img.width, out_w)
    rows = src[y0] * (1.0 - ty)[:, None, None] + src[y1] * ty[:, None, None]
    out = rows[:, x0] * (1.0 - tx)[None, :, None] + rows[:, x1] * tx[None, :, None]
    out = out / 255.0
    return out.transpose(2, 0, 1)[None].astype(DTYPE)


def load_image(path, size: int | tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    return resize_bilinear(decode(path), size)


def load_arrays(entries, size: int | tuple[int, int] = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    entries = list(entries)
    out_h, out_w = (size, size) if isinstance(size, int) else size
    x = np.empty((len(entries), 3, out_h, out_w), dtype=DTYPE)
    y = np.empty(len(entries), dtype=np.int64)
    for i, (path, cid) in enumerate(entries):
        x[i] = load_image(path, (out_h, out_w))[0]
        y[i] = cid
    return x, y


# --------------------------------------------------------------------------- #
# Scanning
# --------------------------------------------------------------------------- #
def _probe(path: Path) -> None:
    if path.suffix.lower() in PPM_SUFFIXES:
        decode_ppm(path.read_bytes(), path)
        return
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # Pillow raises a zoo of types here
        raise DecodeError(f"cannot decode image ({exc})", None, path) from None


def scan(root, verify: bool = True) -> DatasetManifest:
    """Walk ``root/<class>/*`` in sorted order.

    Files with unsupported suffixes are skipped and counted.  With ``verify``
    each kept file is decoded once so a broken image fails here rather than
    mid-training.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"data root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class directories under {root}")
    entries, skipped = [], 0
    for cid, d in enumerate(class_dirs):
        kept = 0
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            if f.suffix.lower() not in SUPPORTED_SUFFIXES:
                skipped += 1
                continue
            if verify:
                _probe(f)
            entries.append((f, cid))
            kept += 1
        if kept == 0:
            raise IngestionError(f"class directory {d} holds no images")
    if skipped:
        log.warning("skipped %d unsupported file(s) under %s", skipped, root)
    return DatasetManifest([d.name for d in class_dirs], entries, skipped)


# --------------------------------------------------------------------------- #
# Splitting
# --------------------------------------------------------------------------- #
@dataclass
class Split:
    train: list[tuple[Path, int]]
    val: list[tuple[Path, int]]
    test: list[tuple[Path, int]]
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    classes: list[str] = field(default_factory=list)

    def part(self, name: str) -> list[tuple[Path, int]]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def largest_remainder(n: int, ratios) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    left = n - sum(counts)
    # largest fractional part first; earlier split wins ties
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def split(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> Split:
    """Stratified split: each class is shuffled and cut by the same ratios."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    rng = Rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    by_class: dict[int, list] = {}
    for entry in manifest.entries:
        by_class.setdefault(entry[1], []).append(entry)
    for cid in sorted(by_class):
        items = by_class[cid]
        counts = largest_remainder(len(items), ratios)
        for c, name in zip(counts, SPLIT_NAMES):
            if c == 0:
                raise SplitError(f"class {cid} has {len(items)} samples, too few for a non-empty {name} split")
        perm = rng.permutation(len(items))
        start = 0
        for part, c in zip(parts, counts):
            part.extend(items[i] for i in perm[start:start + c])
            start += c
    return Split(parts[0], parts[1], parts[2], ratios, seed, list(manifest.classes))


def write_split(s: Split, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={s.seed} ratios={','.join(repr(r) for r in s.ratios)} "
                 f"classes={'|'.join(s.classes)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "class_id", "split"])
        for name in SPLIT_NAMES:
            for p, cid in s.part(name):
                writer.writerow([str(p), cid, name])


def read_split(path) -> Split:
    with open(path, newline="") as fh:
        header = fh.readline()
        m = re.match(r"# seed=(\d+) ratios=([^ ]+) classes=(.*)$", header.rstrip("\n"))
        if not m:
            raise IngestionError(f"{path}: malformed split header")
        parts: dict[str, list] = {n: [] for n in SPLIT_NAMES}
        for row in csv.DictReader(fh):
            parts[row["split"]].append((Path(row["path"]), int(row["class_id"])))
    ratios = tuple(float(v) for v in m.group(2).split(","))
    classes = m.group(3).split("|") if m.group(3) else []
    return Split(parts["train"], parts["val"], parts["test"], ratios, int(m.group(1)), classes)
