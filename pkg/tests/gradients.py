"""End-to-end gradient checks shared by the backbone and acceptance tests."""
import numpy as np

from conftest import tiny_config
from ifvit import numerics as nx
from ifvit.backbone import build_model, forward
from ifvit.numerics import RngState


def inputs(model, batch=2, seed=0):
    c = model.config
    g = np.random.default_rng(seed)
    x = g.standard_normal((batch, c.img_channels, c.img_size, c.img_size)).astype(model.dtype)
    t = g.integers(1, 1001, batch)
    text = g.standard_normal((batch, c.text_len, c.text_in_dim)).astype(model.dtype)
    return x, t, text


def e2e_loss_fn(model, seed):
    g = np.random.default_rng(seed)
    x, t, _ = inputs(model, batch=2, seed=seed)
    ids = g.integers(0, model.config.vocab_size, (2, model.config.text_len))
    eps = g.standard_normal(x.shape)

    def loss():
        return nx.mse(forward(model, x, t, model.encode_text(ids)), eps)

    return loss


def e2e_gradient_error(model, seed, n_tensors=4, n_entries=12, eps=1e-6):
    """Worst relative error over ``n_entries`` sampled entries of each of
    ``n_tensors`` random parameter tensors, and over one random direction
    through all parameters. Errors are norm-relative per tensor, as in
    :func:`ifvit.numerics.gradcheck`, so an individual entry whose gradient is
    near zero does not turn finite-difference rounding into a large error.

    Attention key biases shift every score in a row equally, so their exact
    gradient is zero; they are asserted to be zero instead of being sampled.
    """
    loss = e2e_loss_fn(model, seed)
    model.zero_grad()
    loss().backward()
    g = np.random.default_rng(seed + 1000)
    names = [k for k in model.params if not k.endswith(".bk")]
    for k in model.params:
        if k.endswith(".bk"):
            assert np.abs(model.params[k].grad).max() < 1e-12, k

    def value():
        with nx.no_grad():
            return float(loss().data)

    worst = 0.0
    for k in g.choice(names, size=n_tensors, replace=False):
        p = model.params[k]
        flat = g.choice(p.data.size, size=min(n_entries, p.data.size), replace=False)
        analytic, numeric = [], []
        for i in flat:
            idx = np.unravel_index(i, p.shape)
            old = p.data[idx]
            p.data[idx] = old + eps
            fp = value()
            p.data[idx] = old - eps
            fm = value()
            p.data[idx] = old
            analytic.append(p.grad[idx])
            numeric.append((fp - fm) / (2 * eps))
        worst = max(worst, nx.relative_error(np.array(analytic), np.array(numeric)))
    direction = {k: g.standard_normal(p.shape) for k, p in model.params.items()}
    analytic = sum(float((p.grad * direction[k]).sum()) for k, p in model.params.items())
    base = {k: p.data.copy() for k, p in model.params.items()}
    vals = []
    for sign in (1, -1):
        for k, p in model.params.items():
            p.data = base[k] + sign * eps * direction[k]
        vals.append(value())
    for k, p in model.params.items():
        p.data = base[k]
    numeric = (vals[0] - vals[1]) / (2 * eps)
    return max(worst, nx.relative_error(np.array([analytic]), np.array([numeric])))


def random_float64_model(setting, seed):
    model = build_model(tiny_config(*setting), RngState(seed)).astype(np.float64)
    g = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = 0.2 * g.standard_normal(p.shape)
    return model
