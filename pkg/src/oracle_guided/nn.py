"""Small numpy function approximators with exact gradients.

Parameters live in one flat float64 vector so optimizers and checkpoints
treat every network the same way.
"""

from dataclasses import dataclass, replace
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .exceptions import ChecksumMismatch, DimensionMismatch, IoFailure, LengthMismatch

ACTIVATIONS = ("tanh", "identity")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass(frozen=True)
class MlpParams:
    sizes: tuple
    activations: tuple
    flat: np.ndarray

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        acts = tuple(self.activations)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("an MLP needs at least input and output sizes >= 1")
        if len(acts) != len(sizes) - 1 or any(a not in ACTIVATIONS for a in acts):
            raise ValueError(f"need {len(sizes) - 1} activations from {ACTIVATIONS}")
        flat = np.asarray(self.flat, dtype=float)
        if flat.shape != (mlp_size(sizes),):
            raise LengthMismatch(f"flat vector has {flat.size} entries, expected {mlp_size(sizes)}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "flat", flat)

    def layers(self, flat=None):
        """(W, b) views per layer; W has shape (in, out)."""
        flat = self.flat if flat is None else flat
        out = []
        i = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = flat[i : i + n_in * n_out].reshape(n_in, n_out)
            i += n_in * n_out
            out.append((W, flat[i : i + n_out]))
            i += n_out
        return out

    def with_flat(self, flat):
        return replace(self, flat=np.asarray(flat, dtype=float))


def mlp_size(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_mlp(sizes, rng, hidden="tanh", final_scale=1.0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = tuple(int(s) for s in sizes)
    flat = np.zeros(mlp_size(sizes))
    p = MlpParams(sizes, (hidden,) * (len(sizes) - 2) + ("identity",), flat)
    layers = p.layers(flat)
    for j, (W, _) in enumerate(layers):
        bound = 1.0 / math.sqrt(W.shape[0])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        if j == len(layers) - 1:
            W *= final_scale
    return p


def _check_input(p, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.sizes[0]:
        raise DimensionMismatch(f"input has {x.shape[-1]} features, network expects {p.sizes[0]}")
    return x


def forward_cache(p, x):
    x = _check_input(p, x)
    acts = [x]
    h = x
    for (W, b), act in zip(p.layers(), p.activations):
        h = h @ W + b
        if act == "tanh":
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def forward(p, x):
    return forward_cache(p, x)[0]


def backward(p, x, upstream, cache=None):
    """Gradients of sum(output * upstream) w.r.t. the flat parameters and
    the input. Batched inputs sum the parameter gradient over the batch."""
    if cache is None:
        _, cache = forward_cache(p, x)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != cache[-1].shape:
        raise DimensionMismatch(f"upstream shape {upstream.shape} != output shape {cache[-1].shape}")
    grads = np.zeros_like(p.flat)
    layers = p.layers()
    g_layers = p.layers(grads)
    g = upstream
    for j in range(len(g_layers) - 1, -1, -1):
        if p.activations[j] == "tanh":
            g = g * (1.0 - cache[j + 1] ** 2)
        a_in = cache[j]
        gW, gb = g_layers[j]
        if a_in.ndim == 1:
            gW += np.outer(a_in, g)
            gb += g
        else:
            gW += a_in.reshape(-1, a_in.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            gb += g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = g @ layers[j][0].T
    return grads, g


@dataclass(frozen=True)
class GaussianPolicy:
    mean: MlpParams
    log_std: np.ndarray

    def __post_init__(self):
        log_std = np.clip(np.asarray(self.log_std, dtype=float), LOG_STD_MIN, LOG_STD_MAX)
        if log_std.shape != (self.mean.sizes[-1],):
            raise DimensionMismatch("log_std must have one entry per action dimension")
        object.__setattr__(self, "log_std", log_std)

    @property
    def act_dim(self):
        return self.mean.sizes[-1]

    @property
    def obs_dim(self):
        return self.mean.sizes[0]

    def flat(self):
        return np.concatenate([self.mean.flat, self.log_std])

    def with_flat(self, flat):
        n = self.mean.flat.size
        return GaussianPolicy(self.mean.with_flat(flat[:n]), flat[n:])


def init_policy(obs_dim, act_dim, rng, hidden=(64, 64), log_std=-0.5):
    mean = init_mlp((obs_dim, *hidden, act_dim), rng, final_scale=0.01)
    return GaussianPolicy(mean, np.full(act_dim, float(log_std)))


def gaussian_logp(policy, obs, action, mu=None):
    action = np.asarray(action, dtype=float)
    if action.shape[-1] != policy.act_dim:
        raise DimensionMismatch(f"action has {action.shape[-1]} entries, policy has {policy.act_dim}")
    mu = forward(policy.mean, obs) if mu is None else mu
    z = (action - mu) * np.exp(-policy.log_std)
    return np.sum(-0.5 * z**2 - policy.log_std - 0.5 * math.log(2 * math.pi), axis=-1)


def gaussian_logp_grad(policy, obs, action, upstream):
    """Gradient of sum(upstream * logp) w.r.t. the flat policy vector."""
    mu, cache = forward_cache(policy.mean, obs)
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = action - mu
    upstream = np.asarray(upstream, dtype=float)[..., None]
    g_mu = upstream * diff * inv_var
    g_mean, _ = backward(policy.mean, obs, g_mu, cache)
    g_log_std = np.sum(upstream * (diff**2 * inv_var - 1.0), axis=tuple(range(diff.ndim - 1)))
    return np.concatenate([g_mean, g_log_std])


def gaussian_entropy(policy):
    return float(np.sum(policy.log_std + 0.5 * math.log(2 * math.pi * math.e)))


def sample(policy, obs, rng):
    mu = forward(policy.mean, obs)
    action = mu + np.exp(policy.log_std) * rng.standard_normal(mu.shape)
    return action, gaussian_logp(policy, obs, action, mu)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def adam_update(state, params, grads):
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if not (params.shape == grads.shape == state.m.shape):
        raise LengthMismatch(
            f"params {params.shape}, grads {grads.shape} and moments {state.m.shape} differ"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=t)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"OGMPCKPT"
FORMAT_VERSION = 1


def _encode(arrays):
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for arr in arrays.values():
        out.append(np.asarray(arr, dtype="<f8").tobytes(order="C"))
    return b"".join(out)


def _decode(blob):
    if blob[: len(MAGIC)] != MAGIC:
        raise ChecksumMismatch("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ChecksumMismatch(f"unsupported checkpoint version {version}")
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
    if pos != len(blob):
        raise ChecksumMismatch("checkpoint has trailing or missing bytes")
    return arrays


def save_checkpoint(path, arrays, meta=None):
    """Write ``path`` (binary) and ``path.json`` (manifest with sha256)."""
    path = Path(path)
    blob = _encode(arrays)
    manifest = {
        "format": "ogmp-checkpoint",
        "version": FORMAT_VERSION,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": {k: list(np.shape(v)) for k, v in arrays.items()},
        "meta": meta or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return manifest


def load_checkpoint(path):
    """Return (arrays, meta); the blob must match the manifest hash."""
    path = Path(path)
    try:
        blob = path.read_bytes()
        manifest = json.loads(Path(str(path) + ".json").read_text())
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise ChecksumMismatch(f"checkpoint {path} does not match its manifest hash")
    return _decode(blob), manifest.get("meta", {})


def mlp_arrays(prefix, p):
    return {f"{prefix}.flat": p.flat, f"{prefix}.sizes": np.array(p.sizes, dtype=float)}


def mlp_from_arrays(prefix, arrays, activations=None):
    sizes = tuple(int(s) for s in arrays[f"{prefix}.sizes"])
    if activations is None:
        activations = ("tanh",) * (len(sizes) - 2) + ("identity",)
    return MlpParams(sizes, activations, arrays[f"{prefix}.flat"])
