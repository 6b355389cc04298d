"""Score networks: a small MLP with sinusoidal time embedding, an optional
linear encoder for conditioning inputs, Adam, and JSON checkpointing.

The forward pass is written against a tiny set of operations shared by
numpy arrays and autodiff Tensors, so the same code serves fast sampling
and differentiable training.
"""

import json
import os
import tempfile

import numpy as np

from . import autodiff as ad


def _is_tensor(x):
    return isinstance(x, ad.Tensor)


def _cat(parts, axis=-1):
    if any(_is_tensor(p) for p in parts):
        return ad.concat([ad.astensor(p) for p in parts], axis=axis)
    return np.concatenate(parts, axis=axis)


def _silu(x):
    if _is_tensor(x):
        return ad.silu(x)
    return x / (1.0 + np.exp(-x))


def _tanh(x):
    return ad.tanh(x) if _is_tensor(x) else np.tanh(x)


ACTIVATIONS = {"silu": _silu, "tanh": _tanh}


def sinusoidal_embedding(t, dim, max_period=1e4):
    """Sin/cos features of time on a geometric frequency ladder.

    Returns an array of shape (len(t), dim); dim must be even.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    # ascending ladder 1 .. max_period suits times of order one
    freqs = np.exp(np.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ScoreNet:
    """MLP architecture description; parameters live in a separate dict."""

    def __init__(self, in_dim, out_dim, hidden=(64, 64), time_embed_dim=32,
                 cond_dim=0, cond_embed_dim=0, cond_hidden=(), activation="silu"):
        if time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if (cond_dim == 0) != (cond_embed_dim == 0):
            raise ValueError("cond_dim and cond_embed_dim must be both zero or both set")
        if cond_hidden and not cond_dim:
            raise ValueError("cond_hidden needs a conditioning input")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(hidden)
        self.time_embed_dim = time_embed_dim
        self.cond_dim = cond_dim
        self.cond_embed_dim = cond_embed_dim
        self.cond_hidden = tuple(cond_hidden)
        self.activation = activation

    def arch(self):
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "time_embed_dim": self.time_embed_dim,
            "cond_dim": self.cond_dim,
            "cond_embed_dim": self.cond_embed_dim,
            "cond_hidden": list(self.cond_hidden),
            "activation": self.activation,
        }

    def cond_layer_dims(self):
        dims = [self.cond_dim, *self.cond_hidden, self.cond_embed_dim]
        return list(zip(dims[:-1], dims[1:]))

    def layer_dims(self):
        d0 = self.in_dim + self.time_embed_dim + self.cond_embed_dim
        dims = [d0, *self.hidden, self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def init_params(self, rng):
        """Symmetric uniform fan-in initialization."""
        gen = rng.generator if hasattr(rng, "generator") else rng
        params = {}
        if self.cond_dim:
            for i, (fan_in, fan_out) in enumerate(self.cond_layer_dims()):
                bound = 1.0 / np.sqrt(fan_in)
                suffix = "" if (i == 0 and not self.cond_hidden) else str(i)
                params["cond_w" + suffix] = gen.uniform(-bound, bound, size=(fan_in, fan_out))
                params["cond_b" + suffix] = gen.uniform(-bound, bound, size=fan_out)
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"w{i}"] = gen.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"b{i}"] = gen.uniform(-bound, bound, size=fan_out)
        return params

    def apply(self, params, x, t, cond=None):
        """Forward pass; works on numpy arrays or autodiff Tensors.

        x: (batch, in_dim); t: scalar or (batch,); cond: (batch, cond_dim).
        """
        squeeze = False
        if not _is_tensor(x):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 1:
                x, squeeze = x[None, :], True
        if (x.shape[-1] if not _is_tensor(x) else x.shape[-1]) != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        batch = x.shape[0]

        parts = [x]
        if self.time_embed_dim:
            emb = sinusoidal_embedding(t, self.time_embed_dim)
            if emb.shape[0] == 1 and batch > 1:
                emb = np.broadcast_to(emb, (batch, self.time_embed_dim))
            parts.append(emb)
        if self.cond_dim:
            if cond is None:
                raise ValueError("conditional network called without cond input")
            if not _is_tensor(cond):
                cond = np.asarray(cond, dtype=np.float64)
                if cond.ndim == 1:
                    cond = np.broadcast_to(cond[None, :], (batch, self.cond_dim))
                first_w = "cond_w" if not self.cond_hidden else "cond_w0"
                if _is_tensor(params[first_w]):
                    cond = ad.Tensor(np.ascontiguousarray(cond))
            if not self.cond_hidden:
                cond = cond @ params["cond_w"] + params["cond_b"]
            else:
                cact = ACTIVATIONS[self.activation]
                n_cond = len(self.cond_layer_dims())
                for i in range(n_cond):
                    cond = cond @ params[f"cond_w{i}"] + params[f"cond_b{i}"]
                    if i < n_cond - 1:
                        cond = cact(cond)
            parts.append(cond)
        h = _cat(parts, axis=-1) if len(parts) > 1 else parts[0]

        act = ACTIVATIONS[self.activation]
        n_layers = len(self.layer_dims())
        for i in range(n_layers):
            h = h @ params[f"w{i}"] + params[f"b{i}"]
            if i < n_layers - 1:
                h = act(h)
        if squeeze and not _is_tensor(h):
            h = h[0]
        return h


def forward(net, params, x, t, cond=None):
    return net.apply(params, x, t, cond)


def loss_gradient(net, params, loss_fn, batch):
    """Reverse-mode gradient of a scalar loss over a batch.

    loss_fn(params_as_tensors, batch) must return a scalar Tensor.
    Returns (loss value, dict of numpy gradients).
    """
    names = sorted(params)
    tensors = {k: ad.Tensor(params[k]) for k in names}
    loss = loss_fn(tensors, batch)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    grads = ad.grad(loss, [tensors[k] for k in names])
    out = {}
    for k, g in zip(names, grads):
        if not np.all(np.isfinite(g.data)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        out[k] = g.data
    return float(loss.data), out


class AdamState:
    """Bias-corrected Adam accumulators."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        self.second_moment = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(state, params, grads, learning_rate=None):
    """One Adam update; mutates and returns (params, state)."""
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for k in params:
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        params[k] -= lr * mhat / (np.sqrt(vhat) + state.epsilon)
    return params, state


CHECKPOINT_VERSION = 1


def save_checkpoint(path, net, params, adam=None, rng=None, extra=None):
    """Atomically write a versioned JSON checkpoint (bit-exact round trip)."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in params.items()},
    }
    if adam is not None:
        doc["adam"] = {
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
            "step_count": adam.step_count,
            "first_moment": {k: v.ravel().tolist() for k, v in adam.first_moment.items()},
            "second_moment": {k: v.ravel().tolist() for k, v in adam.second_moment.items()},
        }
    if rng is not None:
        doc["rng"] = {"seed": rng.seed, "stream_id": rng.stream_id}
    if extra is not None:
        doc["extra"] = extra
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Returns (net, params, adam_state_or_None, doc)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    a = doc["arch"]
    net = ScoreNet(a["in_dim"], a["out_dim"], hidden=tuple(a["hidden"]),
                   time_embed_dim=a["time_embed_dim"], cond_dim=a["cond_dim"],
                   cond_embed_dim=a["cond_embed_dim"],
                   cond_hidden=tuple(a.get("cond_hidden", ())),
                   activation=a["activation"])
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    adam = None
    if "adam" in doc:
        ad_doc = doc["adam"]
        adam = AdamState(params, learning_rate=ad_doc["learning_rate"],
                         beta1=ad_doc["beta1"], beta2=ad_doc["beta2"],
                         epsilon=ad_doc["epsilon"])
        adam.step_count = ad_doc["step_count"]
        adam.first_moment = {k: np.array(v, dtype=np.float64).reshape(params[k].shape)
                             for k, v in ad_doc["first_moment"].items()}
        adam.second_moment = {k: np.array(v, dtype=np.float64).reshape(params[k].shape)
                              for k, v in ad_doc["second_moment"].items()}
    return net, params, adam, doc


def cosine_lr(base_lr, iteration, total_iterations):
    """Cosine annealing from base_lr to 0 over the run."""
    frac = min(max(iteration / max(total_iterations, 1), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
