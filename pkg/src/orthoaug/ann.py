"""Fully connected tanh network with a zero-initialized final layer.

The network is a plain feedforward stack
    out = W_last @ tanh(... tanh(W_0 @ z + b_0) ...) + b_last
evaluated batch-wise on float64 arrays. Parameters map bijectively to a flat
vector in a fixed canonical order (layer by layer, weights before biases),
which is what the optimizer and the model artifact operate on.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .linalg import make_rng


@dataclass(frozen=True)
class MlpArchitecture:
    n_in: int
    hidden: tuple
    n_out: int
    activation: str = "tanh"

    def __post_init__(self):
        dims = (self.n_in, *self.hidden, self.n_out)
        if any(int(d) < 1 for d in dims):
            raise InvalidInputError(f"all layer dims must be >= 1, got {dims}")
        if self.activation != "tanh":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_dims(self):
        return (self.n_in, *self.hidden, self.n_out)

    @property
    def n_params(self):
        dims = self.layer_dims
        return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))


class MlpParams:
    """Weight matrices (out x in) and bias vectors for each linear layer."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases):
            raise InvalidInputError("weights and biases must pair up")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise InvalidInputError(f"layer {i} has inconsistent shapes")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidInputError(f"layer {i} does not chain onto layer {i - 1}")

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __eq__(self, other):
        return (
            isinstance(other, MlpParams)
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


def init_mlp(arch, seed):
    """Xavier-uniform hidden layers, exactly-zero final layer.

    The zero last layer makes the whole network output identically zero at
    initialization, so an augmented model starts out behaving exactly like its
    physics-only part. Weight entries are drawn uniformly from
    +-sqrt(6/(fan_in+fan_out)); biases start at zero. Deterministic per seed.
    """
    rng = make_rng(seed)
    dims = arch.layer_dims
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == len(dims) - 2:
            w = np.zeros((fan_out, fan_in))
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_forward(params, z):
    """Evaluate the network. Accepts (B, n_in) batches or a single vector."""
    out, _ = mlp_forward_cached(params, z)
    return out


def mlp_forward_cached(params, z):
    """Forward pass that also returns the per-layer activations for the VJP."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != params.n_in:
        raise InvalidInputError(
            f"input dim {z.shape[-1] if z.ndim else '?'} does not match network input {params.n_in}"
        )
    acts = [z]
    h = z
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
            acts.append(h)
    out = h[0] if single else h
    return out, acts


def mlp_vjp(params, acts, grad_out):
    """Vector-Jacobian products with respect to parameters and input.

    acts is the cache from mlp_forward_cached; grad_out is (B, n_out).
    Returns (grad_params: MlpParams-shaped, grad_in: (B, n_in)).
    """
    grad_out = np.asarray(grad_out, dtype=float)
    if grad_out.ndim == 1:
        grad_out = grad_out[None, :]
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    g = grad_out
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = g * (1.0 - acts[i] * acts[i])  # tanh'
    return MlpParams(gw, gb), g


def flatten(params):
    """Canonical flat parameter vector: layer-major, weights before biases."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(arch, eta):
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (arch.n_params,):
        raise InvalidInputError(
            f"flat vector has length {eta.size}, architecture needs {arch.n_params}"
        )
    dims = arch.layer_dims
    weights, biases = [], []
    pos = 0
    for i in range(len(dims) - 1):
        n_out, n_in = dims[i + 1], dims[i]
        weights.append(eta[pos : pos + n_out * n_in].reshape(n_out, n_in).copy())
        pos += n_out * n_in
        biases.append(eta[pos : pos + n_out].copy())
        pos += n_out
    return MlpParams(weights, biases)
