"""FLOP/parameter accounting and attention-map rank analysis."""
from __future__ import annotations

import csv
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import CONCAT, CROSSATTN, AttentionRecord, forward
from .diffusion import sample
from .errors import ArgumentError, DataError
from .numerics import svd_singular_values

OP_CLASSES = ("qkvo-projection", "attention-matmul", "mlp", "patch-embed", "skip-merge",
              "text-projection", "output-head", "time-mlp")


@dataclass(frozen=True)
class FlopsEntry:
    site: str
    block: int
    op_class: str
    flops: int
    branch: str


@dataclass
class FlopsReport:
    entries: list = field(default_factory=list)

    @property
    def by_branch(self):
        out = {"image": 0, "text": 0}
        for e in self.entries:
            out[e.branch] = out.get(e.branch, 0) + e.flops
        return out

    @property
    def by_class(self):
        out = OrderedDict((c, 0) for c in OP_CLASSES)
        for e in self.entries:
            out[e.op_class] += e.flops
        return out

    @property
    def total(self):
        return sum(e.flops for e in self.entries)

    @property
    def gflops(self):
        return self.total / 1e9


def count_flops(config, attention_matmuls=False):
    """Closed-form FLOPs of one forward pass for a single sample at one timestep.

    Two FLOPs per multiply-accumulate. Linear layers cost ``2 * L * d_in * d_out``.
    Norms, activations, softmax and embedding lookups are not counted. The two
    attention matmuls (``2 * Lq * Lkv * d`` each) are included only when
    ``attention_matmuls`` is set; the default counts weight layers only, the
    same accounting a per-module profiler reports.
    """
    c = config
    d, r = c.embed_dim, c.mlp_ratio
    N, L = c.n_patches, c.text_len
    Li = N + 1
    entries = []

    def add(site, block, op, macs, branch="image"):
        entries.append(FlopsEntry(site, block, op, int(2 * macs), branch))

    def block_entries(prefix, block, tokens, branch, kv_text=0, cross_q=0):
        add(f"{prefix}.qkvo", block, "qkvo-projection", 4 * tokens * d * d, branch)
        if kv_text:
            add(f"{prefix}.cross_kv", block, "qkvo-projection", 2 * kv_text * d * d, branch)
        if attention_matmuls:
            add(f"{prefix}.attn", block, "attention-matmul", 2 * tokens * tokens * d, branch)
            if kv_text:
                add(f"{prefix}.cross_attn", block, "attention-matmul", 2 * cross_q * kv_text * d, branch)
        add(f"{prefix}.mlp", block, "mlp", 2 * tokens * d * r * d, branch)

    add("patch_embed", 0, "patch-embed", N * c.patch_dim * d)
    add("time_mlp", 0, "time-mlp", 2 * d * d)
    add("text_proj", 0, "text-projection", L * c.text_in_dim * d, "text")
    for j in range(1, c.n_text + 1):
        block_entries(f"text_blocks.{j}", j, L, "text")
    for i in range(1, c.depth + 1):
        src = c.depth + 1 - i
        if src < i:
            add(f"skip.{src}", i, "skip-merge", Li * 2 * d * d)
        joint = c.is_joint(i)
        if joint and c.conditioning == CONCAT:
            block_entries(f"blocks.{i}", i, Li + L, "image")
        elif joint and c.conditioning == CROSSATTN:
            block_entries(f"blocks.{i}", i, Li, "image", kv_text=L, cross_q=Li)
        else:
            block_entries(f"blocks.{i}", i, Li, "image")
    add("head", c.depth + 1, "output-head", N * d * c.patch_dim)
    return FlopsReport(entries)


# ---------------------------------------------------------------------------
# attention post-processing
# ---------------------------------------------------------------------------

def average_attention(records):
    """Mean over batch, heads and timesteps, one 2-D record per ``(layer, kind)``."""
    groups = OrderedDict()
    for rec in records:
        groups.setdefault((rec.layer_index, rec.kind), []).append(rec)
    out = []
    for (layer, kind), recs in sorted(groups.items()):
        ref = recs[0]
        shape = ref.matrix.shape[-2:]
        acc = np.zeros(shape, dtype=np.float64)
        steps = 0
        seen = []
        for rec in recs:
            if rec.matrix.shape[-2:] != shape:
                raise DataError(f"layer {layer} {kind}: map shape {rec.matrix.shape[-2:]} != {shape}")
            if rec.query_partition != ref.query_partition or rec.key_partition != ref.key_partition:
                raise DataError(f"layer {layer} {kind}: token partitions differ between records")
            m = np.asarray(rec.matrix, dtype=np.float64).reshape((-1,) + shape).mean(axis=0)
            acc += m * rec.n_timesteps
            steps += rec.n_timesteps
            seen.extend(rec.timesteps)
        out.append(AttentionRecord(layer, kind, acc / steps, dict(ref.query_partition),
                                   dict(ref.key_partition), ref.grid, steps, tuple(seen)))
    return out


def collect_attention(model, schedule, captions, n_steps=50, rng=None):
    """Attention maps captured at every step of a conditional sampling run.

    Returns ``(images, records)``; average the records with ``average_attention``.
    """
    records = []

    def capturing(m, x, t, text):
        eps, recs = forward(m, x, t, text, capture=True)
        records.extend(recs)
        return eps

    images = sample(model, schedule, captions, omega=None, n_steps=n_steps, rng=rng, forward_fn=capturing)
    return images, records


def _interior_positions(grid):
    idx = np.arange(grid * grid).reshape(grid, grid)
    return idx[1:-1, 1:-1].ravel()


def _trim_axis(partition, grid):
    """Kept indices along one axis and the shifted partition."""
    keep, new_part, cursor = [], {}, 0
    for name, (start, stop) in sorted(partition.items(), key=lambda kv: kv[1][0]):
        if name == "image":
            kept = start + _interior_positions(grid)
        else:
            kept = np.arange(start, stop)
        keep.append(kept)
        new_part[name] = (cursor, cursor + len(kept))
        cursor += len(kept)
    return np.concatenate(keep), new_part


def trim_border(record):
    """Drop image tokens on the outer ring of the patch grid, then renormalize rows."""
    g = record.grid
    if g < 3:
        raise ArgumentError(f"grid side {g} has no interior to keep")
    m = np.asarray(record.matrix)
    if m.ndim != 2:
        raise ArgumentError("trim_border expects an averaged 2-D record")
    rows, qpart = _trim_axis(record.query_partition, g) if "image" in record.query_partition \
        else (np.arange(m.shape[0]), dict(record.query_partition))
    cols, kpart = _trim_axis(record.key_partition, g) if "image" in record.key_partition \
        else (np.arange(m.shape[1]), dict(record.key_partition))
    out = m[np.ix_(rows, cols)].astype(np.float64)
    sums = out.sum(axis=1, keepdims=True)
    out = np.divide(out, sums, out=np.zeros_like(out), where=sums > 0)
    return replace(record, matrix=out, query_partition=qpart, key_partition=kpart, grid=g - 2)


def text_to_image_block(record):
    """Rows of image queries, columns of text keys."""
    if "text" not in record.key_partition:
        raise ArgumentError(f"layer {record.layer_index} ({record.kind}) has no text keys")
    if "image" not in record.query_partition:
        raise ArgumentError(f"layer {record.layer_index} ({record.kind}) has no image queries")
    m = np.asarray(record.matrix)
    if m.ndim != 2:
        raise ArgumentError("text_to_image_block expects an averaged 2-D record")
    q0, q1 = record.query_partition["image"]
    k0, k1 = record.key_partition["text"]
    return m[q0:q1, k0:k1]


def singular_spectrum(matrix, k=10):
    return svd_singular_values(matrix, k)


@dataclass
class SpectrumReport:
    layers: list
    kinds: list
    values: list
    trim_width: int = 1
    k: int = 10


def spectrum_report(records, k=10, trim=True):
    """Top singular values of the (trimmed) text-to-image block for every
    averaged record that has text keys. ``k`` is capped at the block's rank bound."""
    layers, kinds, values = [], [], []
    for rec in records:
        if "text" not in rec.key_partition:
            continue
        r = trim_border(rec) if trim else rec
        block = text_to_image_block(r)
        layers.append(rec.layer_index)
        kinds.append(rec.kind)
        values.append(singular_spectrum(block, min(k, *block.shape)))
    return SpectrumReport(layers, kinds, values, 1 if trim else 0, k)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _open_for_write(path):
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def write_flops_csv(report, path):
    with _open_for_write(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["site", "block", "op_class", "flops"])
        for e in report.entries:
            w.writerow([e.site, e.block, e.op_class, e.flops])


def write_spectrum_csv(report, path):
    with _open_for_write(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "order", "sigma"])
        for layer, vals in zip(report.layers, report.values):
            for order, s in enumerate(vals, start=1):
                w.writerow([layer, order, repr(float(s))])


def write_pgm(path, matrix):
    """Binary P5 grayscale, scaled so the matrix maximum maps to 255."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ArgumentError(f"PGM export needs a 2-D matrix, got shape {m.shape}")
    top = m.max() if m.size else 0.0
    scaled = np.zeros_like(m) if top <= 0 else np.clip(m / top, 0.0, 1.0) * 255.0
    h, w = m.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(np.rint(scaled).astype(np.uint8).tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def emit_reports(out_dir, flops=None, spectrum=None, averaged=None):
    """Write whichever reports are given; returns the list of written paths."""
    written = []
    if flops is not None:
        p = os.path.join(out_dir, "flops.csv")
        write_flops_csv(flops, p)
        written.append(p)
    if spectrum is not None:
        p = os.path.join(out_dir, "spectrum.csv")
        write_spectrum_csv(spectrum, p)
        written.append(p)
    for rec in averaged or ():
        p = os.path.join(out_dir, f"attn_layer{rec.layer_index:02d}_{rec.kind}.pgm")
        os.makedirs(out_dir, exist_ok=True)
        write_pgm(p, rec.matrix)
        written.append(p)
    return written
