"""U-shaped ViT denoiser with early or intermediate text fusion.

Token layout in the image stream is ``[time, image patches]``. Text enters
either as extra tokens in the self-attention sequence (``concat``) or as
extra keys/values attended by the image-stream queries (``crossattn``).
With early fusion every block sees the text; with intermediate fusion the
first and last ``n_image`` blocks are image-only, the text first passes
through ``n_text`` text-only blocks, and only the middle blocks are joint.

Long skips join block ``i``'s output with block ``D + 1 - i``'s input
(image stream only) through a ``2d -> d`` linear merge.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DataError, DimensionError

EARLY, INTERMEDIATE = "early", "intermediate"
CONCAT, CROSSATTN = "concat", "crossattn"

NULL_ID = 0
PAD_ID = 1

_BLOCK_KEYS = ("norm1.g", "norm1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "norm2.g", "norm2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")


@dataclass(frozen=True)
class ModelConfig:
    fusion: str = EARLY
    conditioning: str = CONCAT
    depth: int = 13
    n_image: int = 0
    n_text: int = 0
    embed_dim: int = 512
    heads: int = 8
    mlp_ratio: int = 4
    patch_size: int = 2
    img_channels: int = 4
    img_size: int = 32
    text_len: int = 77
    text_in_dim: int = 768
    vocab_size: int = 0  # 0: text features are supplied directly, no token embedder

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.fusion not in (EARLY, INTERMEDIATE):
            raise ConfigurationError(f"fusion must be 'early' or 'intermediate', got {self.fusion!r}")
        if self.conditioning not in (CONCAT, CROSSATTN):
            raise ConfigurationError(f"conditioning must be 'concat' or 'crossattn', got {self.conditioning!r}")
        for name in ("depth", "embed_dim", "heads", "mlp_ratio", "patch_size", "img_channels",
                     "img_size", "text_len", "text_in_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.depth % 2 == 0:
            raise ConfigurationError(f"depth must be odd, got {self.depth}")
        if self.n_image < 0 or self.n_text < 0 or self.vocab_size < 0:
            raise ConfigurationError("n_image, n_text and vocab_size must be non-negative")
        if self.fusion == EARLY and (self.n_image or self.n_text):
            raise ConfigurationError(
                f"early fusion requires n_image=0 and n_text=0, got n_image={self.n_image}, n_text={self.n_text}")
        if self.depth - 2 * self.n_image < 1:
            raise ConfigurationError(
                f"depth - 2*n_image must be >= 1 (joint blocks), got {self.depth} - 2*{self.n_image}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.img_size % self.patch_size:
            raise ConfigurationError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % 2:
            raise ConfigurationError(f"embed_dim must be even for the sinusoidal time embedding, got {self.embed_dim}")
        if 0 < self.vocab_size <= PAD_ID:
            raise ConfigurationError(f"vocab_size must exceed the reserved ids, got {self.vocab_size}")

    @property
    def grid(self):
        return self.img_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.patch_size ** 2 * self.img_channels

    @property
    def n_joint(self):
        return self.depth - 2 * self.n_image

    @property
    def n_skips(self):
        return self.depth // 2

    def is_joint(self, block):
        """Whether 1-based image-branch block ``block`` sees the text."""
        return self.n_image < block <= self.depth - self.n_image

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttentionRecord:
    """One captured attention map with its token partition.

    ``matrix`` has shape ``[..., Lq, Lkv]``; raw captures keep batch and head
    axes, averaged records are 2-D. Partitions map a token group name to a
    ``(start, stop)`` index range along the query or key axis.
    """

    layer_index: int
    kind: str
    matrix: np.ndarray
    query_partition: dict
    key_partition: dict
    grid: int
    n_timesteps: int = 1
    timesteps: tuple = ()


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    branches: dict = field(default_factory=dict)

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise DataError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        """Copy of the model with every parameter cast to ``dtype``."""
        params = {k: nx.Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Model(self.config, params, dict(self.branches))

    def count(self):
        out = {"image": 0, "text": 0, "shared": 0}
        for k, p in self.params.items():
            out[self.branches[k]] += int(p.data.size)
        out["total"] = sum(out.values())
        return out

    def encode_text(self, token_ids):
        return encode_text_tokens(token_ids, self.params["embed.tokens"], self.params["embed.pos"])

    def null_ids(self, batch):
        return np.full((batch, self.config.text_len), NULL_ID, dtype=np.int64)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _block_shapes(d, r):
    h = d * r
    return {"norm1.g": (d,), "norm1.b": (d,), "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,), "norm2.g": (d,), "norm2.b": (d,),
            "fc1.w": (d, h), "fc1.b": (h,), "fc2.w": (h, d), "fc2.b": (d,)}


def parameter_layout(config):
    """Ordered ``(name, branch, shape)`` triples for every parameter."""
    c = config
    d = c.embed_dim
    out = [("patch.w", "image", (c.patch_dim, d)), ("patch.b", "image", (d,)),
           ("pos_image", "image", (c.n_patches + 1, d)),
           ("time.w1", "image", (d, d)), ("time.b1", "image", (d,)),
           ("time.w2", "image", (d, d)), ("time.b2", "image", (d,))]
    for i in range(1, c.depth + 1):
        out += [(f"blocks.{i}.{k}", "image", s) for k, s in _block_shapes(d, c.mlp_ratio).items()]
    for i in range(1, c.n_skips + 1):
        out += [(f"skip.{i}.w", "image", (2 * d, d)), (f"skip.{i}.b", "image", (d,))]
    out += [("norm_out.g", "image", (d,)), ("norm_out.b", "image", (d,)),
            ("head.w", "image", (d, c.patch_dim)), ("head.b", "image", (c.patch_dim,))]
    out += [("text_proj.w", "text", (c.text_in_dim, d)), ("text_proj.b", "text", (d,))]
    for j in range(1, c.n_text + 1):
        out += [(f"text_blocks.{j}.{k}", "text", s) for k, s in _block_shapes(d, c.mlp_ratio).items()]
    if c.vocab_size:
        out += [("embed.tokens", "shared", (c.vocab_size, c.text_in_dim)),
                ("embed.pos", "shared", (c.text_len, c.text_in_dim))]
    return out


def param_count(config):
    """Closed-form parameter counts per branch; no model is built."""
    c = config
    d, r = c.embed_dim, c.mlp_ratio
    block = 4 * (d * d + d) + 2 * d * r * d + d * r + d + 4 * d
    image = (c.patch_dim * d + d + (c.n_patches + 1) * d + 2 * (d * d + d)
             + c.depth * block + c.n_skips * (2 * d * d + d) + 2 * d + d * c.patch_dim + c.patch_dim)
    text = c.text_in_dim * d + d + c.n_text * block
    shared = (c.vocab_size + c.text_len) * c.text_in_dim if c.vocab_size else 0
    return {"image": image, "text": text, "shared": shared, "total": image + text + shared}


def build_model(config, rng, dtype=np.float32):
    """Initialize every parameter: truncated normal (std 0.02) weights, zero
    biases, unit norm gains, and a zero output head."""
    config.validate()
    params, branches = {}, {}
    for name, branch, shape in parameter_layout(config):
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head.") or (leaf.startswith("b") and len(shape) == 1):
            arr = np.zeros(shape, dtype=dtype)
        elif leaf == "g":
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = rng.truncated_normal(shape, 0.02, dtype=dtype)
        params[name] = nx.Tensor(arr, requires_grad=True)
        branches[name] = branch
    return Model(config, params, branches)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def encode_text_tokens(token_ids, table, pos):
    """Token lookup plus learned positions; NULL ids get the bare null row."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be [B, L], got shape {ids.shape}")
    V, L = table.shape[0], pos.shape[0]
    if ids.shape[1] != L:
        raise DimensionError(f"token ids length {ids.shape[1]} != text_len {L}")
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise DataError(f"token id out of range [0, {V}): min {ids.min()}, max {ids.max()}")
    mask = (ids != NULL_ID).astype(table.dtype)[..., None]
    return nx.add(nx.embedding(table, ids), nx.mul(pos, mask))


def patchify(x, p):
    B, C, S, _ = x.shape
    g = S // p
    return x.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * p * p)


def unpatchify(tokens, p, C):
    B, N, _ = tokens.shape
    g = int(round(math.sqrt(N)))
    x = nx.reshape(tokens, (B, g, g, C, p, p))
    x = nx.transpose(x, (0, 3, 1, 4, 2, 5))
    return nx.reshape(x, (B, C, g * p, g * p))


def timestep_embedding(t, dim, dtype):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(dtype)


def _block_params(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in _BLOCK_KEYS}


def transformer_block(x, prm, heads, text=None):
    """Pre-norm block. With ``text``, image-stream queries also attend to the
    text (same projections, separate softmax) and the two contexts are summed
    before the output projection.

    Returns ``(x, self_weights, cross_weights_or_None)``.
    """
    y = nx.layer_norm(x, prm["norm1.g"], prm["norm1.b"])
    q = nx.linear(y, prm["wq"], prm["bq"])
    k = nx.linear(y, prm["wk"], prm["bk"])
    v = nx.linear(y, prm["wv"], prm["bv"])
    ctx, a_self = nx.scaled_dot_product_attention(q, k, v, heads)
    a_cross = None
    if text is not None:
        ty = nx.layer_norm(text, prm["norm1.g"], prm["norm1.b"])
        kt = nx.linear(ty, prm["wk"], prm["bk"])
        vt = nx.linear(ty, prm["wv"], prm["bv"])
        ctx_t, a_cross = nx.scaled_dot_product_attention(q, kt, vt, heads)
        ctx = nx.add(ctx, ctx_t)
    x = nx.add(x, nx.linear(ctx, prm["wo"], prm["bo"]))
    y = nx.layer_norm(x, prm["norm2.g"], prm["norm2.b"])
    y = nx.linear(nx.gelu(nx.linear(y, prm["fc1.w"], prm["fc1.b"])), prm["fc2.w"], prm["fc2.b"])
    return nx.add(x, y), a_self, a_cross


def forward(model, x_t, t, text, capture=False):
    """Predict the injected noise for a batch of noised images.

    ``x_t``: ``[B, C, S, S]`` array; ``t``: ``[B]`` integer timesteps;
    ``text``: ``[B, L_txt, d_txt]`` features (a Tensor or array). Returns the
    prediction, or ``(prediction, records)`` when ``capture`` is set.
    """
    c = model.config
    P = model.params
    dtype = model.dtype
    x_t = np.asarray(x_t.data if isinstance(x_t, nx.Tensor) else x_t, dtype=dtype)
    t = np.asarray(t).reshape(-1)
    B = x_t.shape[0]
    if x_t.shape[1:] != (c.img_channels, c.img_size, c.img_size):
        raise DimensionError(f"image batch {x_t.shape} does not match config "
                             f"({c.img_channels}, {c.img_size}, {c.img_size})")
    if t.shape != (B,):
        raise DimensionError(f"timesteps {t.shape} do not match batch {B}")
    text = nx.as_tensor(text)
    if text.shape != (B, c.text_len, c.text_in_dim):
        raise DimensionError(f"text {text.shape} != ({B}, {c.text_len}, {c.text_in_dim})")

    img = nx.linear(nx.Tensor(patchify(x_t, c.patch_size)), P["patch.w"], P["patch.b"])
    temb = nx.Tensor(timestep_embedding(t, c.embed_dim, dtype)[:, None, :])
    temb = nx.linear(nx.gelu(nx.linear(temb, P["time.w1"], P["time.b1"])), P["time.w2"], P["time.b2"])
    h = nx.add(nx.concat([temb, img], axis=1), P["pos_image"])

    txt = nx.linear(text, P["text_proj.w"], P["text_proj.b"])
    for j in range(1, c.n_text + 1):
        txt, _, _ = transformer_block(txt, _block_params(P, f"text_blocks.{j}"), c.heads)

    L, N = c.text_len, c.n_patches
    stream_part = {"time": (0, 1), "image": (1, 1 + N)}
    concat_part = {"time": (0, 1), "text": (1, 1 + L), "image": (1 + L, 1 + L + N)}
    records = []
    skips = {}
    D = c.depth
    for i in range(1, D + 1):
        src = D + 1 - i
        if src < i and src in skips:
            h = nx.linear(nx.concat([h, skips.pop(src)], axis=-1), P[f"skip.{src}.w"], P[f"skip.{src}.b"])
        prm = _block_params(P, f"blocks.{i}")
        joint = c.is_joint(i)
        a_cross = None
        if joint and c.conditioning == CONCAT:
            seq = nx.concat([nx.slice_axis(h, 1, 0, 1), txt, nx.slice_axis(h, 1, 1, 1 + N)], axis=1)
            seq, a_self, _ = transformer_block(seq, prm, c.heads)
            txt = nx.slice_axis(seq, 1, 1, 1 + L)
            h = nx.concat([nx.slice_axis(seq, 1, 0, 1), nx.slice_axis(seq, 1, 1 + L, 1 + L + N)], axis=1)
            part = concat_part
        elif joint:
            h, a_self, a_cross = transformer_block(h, prm, c.heads, text=txt)
            part = stream_part
        else:
            h, a_self, _ = transformer_block(h, prm, c.heads)
            part = stream_part
        if capture:
            records.append(AttentionRecord(i, "self", a_self, dict(part), dict(part), c.grid,
                                           timesteps=tuple(int(v) for v in t)))
            if a_cross is not None:
                records.append(AttentionRecord(i, "cross", a_cross, dict(stream_part), {"text": (0, L)},
                                               c.grid, timesteps=tuple(int(v) for v in t)))
        if i <= c.n_skips:
            skips[i] = h

    h = nx.layer_norm(h, P["norm_out.g"], P["norm_out.b"])
    out = nx.linear(nx.slice_axis(h, 1, 1, 1 + N), P["head.w"], P["head.b"])
    eps = unpatchify(out, c.patch_size, c.img_channels)
    return (eps, records) if capture else eps
