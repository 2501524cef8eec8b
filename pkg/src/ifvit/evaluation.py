"""Automated count alignment, a pixel-space Frechet proxy, and the guidance sweep."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import BACKGROUND, COLORS, PALETTE, SHAPES, make_caption, tokenize
from .diffusion import sample
from .errors import ArgumentError
from .numerics import RngState

logger = logging.getLogger(__name__)

MIN_AREA = 4
COLOR_CUTOFF = 1.0  # half the smallest distance between palette colors
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def color_labels(image, cutoff=COLOR_CUTOFF):
    """Per-pixel index into ``COLORS`` (nearest palette entry), -1 for
    background or pixels farther than ``cutoff`` from every entry."""
    img = np.asarray(image, dtype=np.float64)
    C = img.shape[0]
    refs = np.array([BACKGROUND[:C]] + [PALETTE[c][:C] for c in COLORS])
    dist = np.sqrt(((img[None] - refs[:, :, None, None]) ** 2).sum(axis=1))
    nearest = dist.argmin(axis=0)
    ok = dist.min(axis=0) <= cutoff
    return np.where(ok & (nearest > 0), nearest - 1, -1)


def count_shapes(image, target, min_area=MIN_AREA, cutoff=COLOR_CUTOFF):
    """Number of 4-connected components of the target color with at least
    ``min_area`` pixels. ``target`` is ``(shape, color)``; only the color is
    used for segmentation."""
    _, color = target
    mask = color_labels(image, cutoff) == COLORS.index(color)
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return 0
    areas = np.bincount(labels.ravel())[1:]
    return int((areas >= min_area).sum())


def _pairs(pairs):
    arr = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ArgumentError("need at least one (prompted, detected) pair")
    return arr


def avg_error(pairs):
    """Mean absolute difference between detected and prompted counts."""
    a = _pairs(pairs)
    return float(np.abs(a[:, 1] - a[:, 0]).mean())


def match_ratio(pairs):
    """Fraction of samples whose detected count equals the prompt."""
    a = _pairs(pairs)
    return float((a[:, 1] == a[:, 0]).mean())


@dataclass
class CountResult:
    samples: list = field(default_factory=list)  # (shape, color, prompted, detected)

    @property
    def pairs(self):
        return [(p, d) for _, _, p, d in self.samples]

    @property
    def avg_error(self):
        return avg_error(self.pairs)

    @property
    def match_ratio(self):
        return match_ratio(self.pairs)

    def groups(self):
        """``{(shape, color, count): (avg_error, match_ratio, n)}``."""
        buckets = {}
        for s, c, p, d in self.samples:
            buckets.setdefault((s, c, p), []).append((p, d))
        return {k: (avg_error(v), match_ratio(v), len(v)) for k, v in sorted(buckets.items())}

    def restricted(self, counts):
        return CountResult([x for x in self.samples if x[2] in counts])

    def write_csv(self, path):
        """Per (object, count) table, plus an ``all`` summary row."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["object", "count", "n", "avg_error", "match_ratio"])
            for (s, c, p), (err, ratio, n) in self.groups().items():
                w.writerow([f"{c} {s}", p, n, f"{err:.6f}", f"{ratio:.6f}"])
            w.writerow(["all", "", len(self.samples), f"{self.avg_error:.6f}", f"{self.match_ratio:.6f}"])


def prompt_set(counts=(1, 2, 3, 4, 5), shapes=SHAPES, colors=COLORS):
    """Every ``(count, color, shape)`` combination in a fixed order."""
    return [(n, c, s) for s in shapes for c in colors for n in counts]


def evaluate_counts(model, schedule, prompts, n_per_prompt, omega, seed, n_steps=50, batch=64):
    """Sample ``n_per_prompt`` images per prompt and count the target objects."""
    items = [(n, c, s) for (n, c, s) in prompts for _ in range(n_per_prompt)]
    images = generate_for_prompts(model, schedule, items, omega, seed, n_steps, batch)
    res = CountResult()
    for (n, c, s), img in zip(items, images):
        res.samples.append((s, c, n, count_shapes(img, (s, c))))
    return res


def generate_for_prompts(model, schedule, items, omega, seed, n_steps=50, batch=64):
    L = model.config.text_len
    ids = np.stack([tokenize(make_caption(n, c, s), L) for (n, c, s) in items]) if items else None
    out = []
    root = RngState(seed)
    for start in range(0, len(items), batch):
        rng = root.spawn(start // batch)
        out.append(sample(model, schedule, ids[start:start + batch], omega, n_steps, rng))
    return np.concatenate(out) if out else np.zeros((0,))


# ---------------------------------------------------------------------------
# Frechet distance on pooled pixels
# ---------------------------------------------------------------------------

def pooled_features(images, grid=8):
    """Average-pool ``[N, C, S, S]`` images onto a ``grid x grid`` lattice and flatten."""
    x = np.asarray(images, dtype=np.float64)
    N, C, S, _ = x.shape
    if S % grid:
        raise ArgumentError(f"image side {S} not divisible by pooling grid {grid}")
    k = S // grid
    return x.reshape(N, C, grid, k, grid, k).mean(axis=(3, 5)).reshape(N, -1)


def _psd_sqrt(a):
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(s1, s2):
    h = _psd_sqrt(s1)
    w = np.linalg.eigvalsh(h @ s2 @ h)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(mu1, sigma1, mu2, sigma2):
    """Frechet distance between two Gaussians; returns ``(value, regularized)``.

    A 1e-6 ridge is added to both covariances when either is singular.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    regularized = False
    for s in (s1, s2):
        w = np.linalg.eigvalsh((s + s.T) / 2.0)
        if w.min() <= 1e-12 * max(w.max(), 1e-300):
            regularized = True
    if regularized:
        ridge = 1e-6 * np.eye(s1.shape[0])
        s1, s2 = s1 + ridge, s2 + ridge
    tr = 0.5 * (_trace_sqrt_product(s1, s2) + _trace_sqrt_product(s2, s1))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr)
    return max(value, 0.0), regularized


def pixel_frechet(real_set, gen_set, grid=8):
    """Frechet distance between Gaussian fits of 8x8 pooled pixel features."""
    if len(real_set) < 2 or len(gen_set) < 2:
        raise ArgumentError("pixel_frechet needs at least 2 images per set")
    f1, f2 = pooled_features(real_set, grid), pooled_features(gen_set, grid)
    value, reg = frechet_distance(f1.mean(0), np.cov(f1, rowvar=False), f2.mean(0), np.cov(f2, rowvar=False))
    if reg:
        logger.warning("degenerate feature covariance; added 1e-6 diagonal regularizer")
    return value


# ---------------------------------------------------------------------------
# guidance sweep
# ---------------------------------------------------------------------------

def cfg_sweep(model, schedule, omegas, n_per_omega, seed, real_images, prompts=None, n_steps=50):
    """One row per guidance scale: ``omega, frechet, match_ratio, avg_error``.

    Every scale uses the same prompts and the same seed. ``frechet`` is NaN
    when fewer than two images are generated.
    """
    omegas = list(omegas)
    if not omegas:
        raise ArgumentError("need at least one guidance scale")
    prompts = prompts or prompt_set()
    items = [prompts[i % len(prompts)] for i in range(n_per_omega)]
    rows = []
    for omega in omegas:
        images = generate_for_prompts(model, schedule, items, omega, seed, n_steps)
        res = CountResult([(s, c, n, count_shapes(img, (s, c))) for (n, c, s), img in zip(items, images)])
        fd = pixel_frechet(real_images, images) if len(images) >= 2 else float("nan")
        rows.append({"omega": float(omega), "frechet": fd, "match_ratio": res.match_ratio,
                     "avg_error": res.avg_error})
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["omega", "frechet", "match_ratio", "avg_error"])
        for r in rows:
            w.writerow([repr(r["omega"]), f"{r['frechet']:.6f}", f"{r['match_ratio']:.6f}", f"{r['avg_error']:.6f}"])

