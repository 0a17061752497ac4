"""Per-domain trainable state: ID embedding tables plus an MLP scorer.

Gradients are written by hand (see :mod:`fedxrec.losses`); this module only
knows the MLP's own forward/backward and the optimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_DIM = 256
DEFAULT_HIDDEN = (256, 128, 64)
CHECKPOINT_VERSION = 1

EMBEDDING_TABLES = ("user_emb", "item_emb")


@dataclass(eq=False)
class ModelParams:
    user_emb: np.ndarray
    item_emb: np.ndarray
    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def d(self) -> int:
        return self.user_emb.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        """Name -> array view, in a fixed order. Layer ``k`` is ``W{k}``/``b{k}``."""
        out = {"user_emb": self.user_emb, "item_emb": self.item_emb}
        for k, (w, b) in enumerate(self.layers):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.user_emb.copy(), self.item_emb.copy(), [(w.copy(), b.copy()) for w, b in self.layers]
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.named().items()}


@dataclass(eq=False)
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        state.m = params.zeros_like()
        state.v = params.zeros_like()
        return state


def init_params(
    n_users: int,
    n_items: int,
    d: int = DEFAULT_DIM,
    seed: int = 0,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    emb_std: float = 0.01,
) -> ModelParams:
    """Embeddings ~ N(0, emb_std^2); MLP weights Glorot-uniform; biases zero."""
    rng = np.random.default_rng([seed, 0x1417])
    user_emb = emb_std * rng.standard_normal((n_users, d))
    item_emb = emb_std * rng.standard_normal((n_items, d))
    dims = (2 * d, *hidden, 1)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ModelParams(user_emb, item_emb, layers)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mlp_forward(layers, x: np.ndarray):
    """Return (logits, cache). ReLU on hidden layers, identity on the last."""
    acts = [x]
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h[:, 0], acts


def mlp_backward(layers, acts, dlogits: np.ndarray):
    """Backprop ``dlogits`` (n,) through the MLP; return (dx, [(dW, db), ...])."""
    grads = [None] * len(layers)
    g = dlogits[:, None]
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        if k < len(layers) - 1:
            g = g * (acts[k + 1] > 0)
        grads[k] = (acts[k].T @ g, g.sum(axis=0))
        g = g @ w.T
    return g, grads


def predict(params: ModelParams, user_vec: np.ndarray, item_vec: np.ndarray) -> np.ndarray:
    """Probability of a positive interaction for [user ; item] input rows.

    Accepts single d-vectors or (n, d) batches; scalars come back for single rows.
    """
    u = np.atleast_2d(np.asarray(user_vec, dtype=np.float64))
    v = np.atleast_2d(np.asarray(item_vec, dtype=np.float64))
    d_in = params.layers[0][0].shape[0]
    if u.shape[1] + v.shape[1] != d_in or u.shape[1] != v.shape[1]:
        raise ValueError(f"expected two {d_in // 2}-vectors, got widths {u.shape[1]} and {v.shape[1]}")
    logits, _ = mlp_forward(params.layers, np.concatenate([u, v], axis=1))
    p = sigmoid(logits)
    return p[0] if np.ndim(user_vec) == 1 and np.ndim(item_vec) == 1 else p


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    touched: dict[str, np.ndarray] | None = None,
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update, in place.

    For embedding tables listed in ``touched`` only those rows (and their
    moments) are updated, so users absent from the batch keep their values.
    Returns the same (mutated) objects for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    if not state.m:
        state.m, state.v = params.zeros_like(), params.zeros_like()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    named = params.named()
    for name, g in grads.items():
        p, m, v = named[name], state.m[name], state.v[name]
        rows = touched.get(name) if touched else None
        if rows is not None:
            g = g[rows]
            if state.weight_decay:
                g = g + state.weight_decay * p[rows]
            m[rows] = b1 * m[rows] + (1 - b1) * g
            v[rows] = b2 * v[rows] + (1 - b2) * g * g
            p[rows] -= lr_t * m[rows] / (np.sqrt(v[rows]) + state.eps * np.sqrt(1.0 - b2**t))
        else:
            if state.weight_decay:
                g = g + state.weight_decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr_t * m / (np.sqrt(v) + state.eps * np.sqrt(1.0 - b2**t))
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + one raw little-endian blob
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, directory: str | Path, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "params.bin", "wb") as fh:
        for name, arr in params.named().items():
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            blob = np.ascontiguousarray(le).tobytes()
            fh.write(blob)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                            "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    manifest = {"version": CHECKPOINT_VERSION, "d": params.d, "arrays": entries, "extra": extra or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> ModelParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    raw = (directory / "params.bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        buf = raw[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    n_layers = sum(1 for k in arrays if k.startswith("W"))
    layers = [(arrays[f"W{k}"], arrays[f"b{k}"]) for k in range(n_layers)]
    return ModelParams(arrays["user_emb"], arrays["item_emb"], layers)
