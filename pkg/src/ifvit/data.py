"""Procedural captioned-shapes data: renderer, tokenizer, binary dataset files."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import NULL_ID, PAD_ID
from .errors import ArgumentError, DataError, FormatError
from .numerics import RngState

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COUNT_WORDS = ("one", "two", "three", "four", "five")
PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
BACKGROUND = (-1.0, -1.0, -1.0)
PLURAL = {s: s + "s" for s in SHAPES}

VOCAB = ("<null>", "<pad>") + COUNT_WORDS + COLORS + tuple(w for s in SHAPES for w in (s, PLURAL[s]))
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
assert WORD_TO_ID["<null>"] == NULL_ID and WORD_TO_ID["<pad>"] == PAD_ID


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 32
    shapes: tuple = SHAPES
    colors: tuple = COLORS
    min_count: int = 1
    max_count: int = 5
    min_size: int = 5
    max_size: int = 7
    margin: int = 1
    text_len: int = 8

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "colors", tuple(self.colors))
        if not 1 <= self.min_count <= self.max_count <= len(COUNT_WORDS):
            raise ArgumentError(f"count range [{self.min_count}, {self.max_count}] outside [1, {len(COUNT_WORDS)}]")
        if self.min_size < 3 or self.max_size < self.min_size:
            raise ArgumentError(f"object size range [{self.min_size}, {self.max_size}] invalid (min 3)")
        if self.max_size + 2 * self.margin > self.canvas:
            raise ArgumentError(f"objects of size {self.max_size} do not fit a {self.canvas}px canvas")
        if self.text_len < 3:
            raise ArgumentError("text_len must hold a three-word caption")
        for s in self.shapes:
            if s not in SHAPES:
                raise ArgumentError(f"unknown shape {s!r}")
        for c in self.colors:
            if c not in COLORS:
                raise ArgumentError(f"unknown color {c!r}")

    def to_dict(self):
        d = asdict(self)
        d["shapes"], d["colors"] = list(self.shapes), list(self.colors)
        return d


@dataclass(frozen=True)
class PlacedObject:
    shape: str
    color: str
    row: int
    col: int
    size: int


@dataclass
class GroundTruth:
    objects: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.objects)

    @property
    def target(self):
        return (self.objects[0].shape, self.objects[0].color) if self.objects else None


@dataclass(eq=False)
class CaptionedImage:
    pixels: np.ndarray
    token_ids: np.ndarray
    ground_truth: GroundTruth

    @property
    def caption(self):
        return detokenize(self.token_ids)

    def __eq__(self, other):
        if not isinstance(other, CaptionedImage):
            return NotImplemented
        return (self.pixels.dtype == other.pixels.dtype and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.token_ids, other.token_ids)
                and self.ground_truth.objects == other.ground_truth.objects)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def tokenize(caption, text_len=8):
    """Word-level ids, right-padded with PAD; the empty caption is all NULL."""
    words = caption.split()
    if not words:
        return np.full(text_len, NULL_ID, dtype=np.int64)
    if len(words) > text_len:
        raise DataError(f"caption has {len(words)} words, more than text_len={text_len}")
    ids = []
    for w in words:
        if w not in WORD_TO_ID or WORD_TO_ID[w] in (NULL_ID, PAD_ID):
            raise DataError(f"unknown word {w!r}")
        ids.append(WORD_TO_ID[w])
    ids += [PAD_ID] * (text_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids):
    words = []
    for i in np.asarray(ids).tolist():
        if i in (NULL_ID, PAD_ID):
            continue
        if not 0 <= i < len(VOCAB):
            raise DataError(f"token id {i} outside vocabulary of size {len(VOCAB)}")
        words.append(VOCAB[i])
    return " ".join(words)


def make_caption(count, color, shape):
    return f"{COUNT_WORDS[count - 1]} {color} {shape if count == 1 else PLURAL[shape]}"


def parse_caption(caption):
    """``"three red circles"`` -> ``(3, "red", "circle")``."""
    words = caption.split()
    if len(words) != 3 or words[0] not in COUNT_WORDS or words[1] not in COLORS:
        raise DataError(f"caption {caption!r} does not follow '<count> <color> <shape>'")
    count = COUNT_WORDS.index(words[0]) + 1
    noun = words[2]
    for s in SHAPES:
        if noun == (s if count == 1 else PLURAL[s]):
            return count, words[1], s
    raise DataError(f"caption {caption!r}: {noun!r} is not a valid noun for count {count}")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def shape_mask(shape, size):
    """Boolean ``size x size`` mask, no anti-aliasing."""
    r = np.arange(size)[:, None]
    c = np.arange(size)[None, :]
    mid = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (r - mid) ** 2 + (c - mid) ** 2 <= (size / 2.0) ** 2
    if shape == "triangle":
        return np.abs(c - mid) <= (r + 1) / 2.0
    raise ArgumentError(f"unknown shape {shape!r}")


def render(objects, canvas, channels=3):
    img = np.empty((channels, canvas, canvas), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND[:channels], dtype=np.float32)[:, None, None]
    for o in objects:
        m = shape_mask(o.shape, o.size)
        color = np.asarray(PALETTE[o.color][:channels], dtype=np.float32)
        view = img[:, o.row:o.row + o.size, o.col:o.col + o.size]
        view[:, m] = color[:, None]
    return img


def _separated(a, b, gap):
    return (a.row + a.size + gap <= b.row or b.row + b.size + gap <= a.row
            or a.col + a.size + gap <= b.col or b.col + b.size + gap <= a.col)


def place_objects(spec, count, shape, color, rng, attempts=100):
    """Rejection-sample non-overlapping boxes at least ``margin`` px apart and
    from the border; ``None`` if no layout is found within ``attempts``."""
    lo, hi = spec.margin, spec.canvas - spec.margin
    for _ in range(attempts):
        placed = []
        for _ in range(count):
            size = int(rng.integers(spec.min_size, spec.max_size, 1)[0])
            for _ in range(attempts):
                row, col = (int(v) for v in rng.integers(lo, hi - size, 2))
                cand = PlacedObject(shape, color, row, col, size)
                if all(_separated(cand, p, spec.margin) for p in placed):
                    placed.append(cand)
                    break
            else:
                break
        if len(placed) == count:
            return placed
    return None


def generate_record(spec, rng, channels=3):
    count = int(rng.integers(spec.min_count, spec.max_count, 1)[0])
    shape = spec.shapes[int(rng.integers(0, len(spec.shapes) - 1, 1)[0])]
    color = spec.colors[int(rng.integers(0, len(spec.colors) - 1, 1)[0])]
    objects = place_objects(spec, count, shape, color, rng)
    while objects is None:
        logger.warning("could not place %d %s after 100 attempts; retrying with %d", count, shape, count - 1)
        count -= 1
        if count < 1:
            raise DataError("canvas cannot hold a single object")
        objects = place_objects(spec, count, shape, color, rng)
    ids = tokenize(make_caption(count, color, shape), spec.text_len)
    return CaptionedImage(render(objects, spec.canvas, channels), ids, GroundTruth(objects))


def generate_dataset(spec, n, seed, channels=3):
    """``n`` records; record ``i`` is drawn from ``RngState(seed).spawn(i)``."""
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    root = RngState(seed)
    return [generate_record(spec, root.spawn(i), channels) for i in range(n)]


def to_arrays(data):
    """Stack records into ``(images [N, C, S, S], token_ids [N, L])``."""
    if not data:
        return np.zeros((0, 3, 1, 1), np.float32), np.zeros((0, 1), np.int64)
    return np.stack([d.pixels for d in data]), np.stack([d.token_ids for d in data])


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

MAGIC = b"IFVDATA\x00"
VERSION = 1
_NO_OBJECT = 0xFF


def _record_stride(channels, canvas, text_len, max_count):
    return 4 * channels * canvas * canvas + 2 * text_len + 1 + 5 * max_count


def save_dataset(path, data, spec, channels=3):
    """Header (magic, version, JSON spec block, record count) then fixed-stride records."""
    block = json.dumps({"spec": spec.to_dict(), "channels": channels}, sort_keys=True).encode()
    stride = _record_stride(channels, spec.canvas, spec.text_len, spec.max_count)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(block)))
        f.write(block)
        f.write(struct.pack("<Q", len(data)))
        for rec in data:
            buf = bytearray()
            buf += np.ascontiguousarray(rec.pixels, dtype="<f4").tobytes()
            buf += np.asarray(rec.token_ids, dtype="<u2").tobytes()
            objs = rec.ground_truth.objects
            buf += struct.pack("<B", len(objs))
            for k in range(spec.max_count):
                if k < len(objs):
                    o = objs[k]
                    buf += struct.pack("<5B", SHAPES.index(o.shape), COLORS.index(o.color), o.row, o.col, o.size)
                else:
                    buf += bytes([_NO_OBJECT] * 5)
            assert len(buf) == stride
            f.write(buf)


def load_dataset(path):
    """Inverse of :func:`save_dataset`; returns ``(records, spec, channels)``."""
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(raw) - pos} left", offset=pos)
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a dataset file (bad magic)", offset=0)
    version, block_len = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version} (expected {VERSION})", offset=len(MAGIC))
    block = take(block_len, "spec block")
    try:
        meta = json.loads(block.decode())
        d = meta["spec"]
        spec = SceneSpec(**d)
        channels = int(meta["channels"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"malformed spec block: {e}", offset=len(MAGIC) + 8) from None
    (n,) = struct.unpack("<Q", take(8, "record count"))
    npx = channels * spec.canvas * spec.canvas
    stride = _record_stride(channels, spec.canvas, spec.text_len, spec.max_count)
    if len(raw) - pos < n * stride:
        raise FormatError(f"truncated records: expected {n} x {stride} bytes, found {len(raw) - pos}",
                          offset=pos + ((len(raw) - pos) // stride) * stride)
    records = []
    for _ in range(n):
        start = pos
        pixels = np.frombuffer(take(4 * npx, "pixels"), dtype="<f4").astype(np.float32)
        pixels = pixels.reshape(channels, spec.canvas, spec.canvas)
        ids = np.frombuffer(take(2 * spec.text_len, "token ids"), dtype="<u2").astype(np.int64)
        (count,) = struct.unpack("<B", take(1, "object count"))
        if count > spec.max_count:
            raise FormatError(f"object count {count} exceeds max_count {spec.max_count}", offset=start)
        objs = []
        for k in range(spec.max_count):
            fields = struct.unpack("<5B", take(5, "object"))
            if k < count:
                objs.append(PlacedObject(SHAPES[fields[0]], COLORS[fields[1]], *fields[2:]))
        records.append(CaptionedImage(pixels, ids, GroundTruth(objs)))
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last record", offset=pos)
    return records, spec, channels


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------

def to_uint8(pixels):
    """``[C, S, S]`` in [-1, 1] -> ``[S, S, C]`` uint8."""
    x = np.clip((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, pixels):
    rgb = to_uint8(pixels)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb[:, :, :3].tobytes())


def write_png(path, pixels):
    from PIL import Image

    rgb = to_uint8(pixels)
    mode = "L" if rgb.shape[2] == 1 else "RGB"
    Image.fromarray(rgb[:, :, 0] if mode == "L" else np.ascontiguousarray(rgb[:, :, :3])).save(path, format="PNG")
