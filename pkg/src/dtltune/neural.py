"""Small tanh MLPs with hand-written backprop and a diagonal Gaussian head.

Parameters live in one flat float64 vector so optimizers and checkpoints
can treat a network as a single tensor; per-layer weight and bias arrays
are views into it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from .controls import InvalidArgument, ProtocolError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_MAGIC = "dtltune-checkpoint"
CHECKPOINT_VERSION = 1

PRESET_HIDDEN = {3: (10,), 5: (40, 20)}


@dataclass(frozen=True)
class NetworkSpec:
    """Topology of one MLP.

    The output vector is ``[mu_raw (policy_dim), sigma_raw (policy_dim), value]``
    with absent heads omitted.  A network with both heads is the combined
    actor-critic trunk.
    """

    input_dim: int
    hidden: tuple = (10,)
    policy_dim: int = 0
    value_head: bool = False
    dropout: float = 0.1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise InvalidArgument("layer widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgument("dropout rate must be in [0, 1)")
        if self.activation != "tanh":
            raise InvalidArgument("only tanh activation is supported")
        if self.policy_dim < 0 or (self.policy_dim == 0 and not self.value_head):
            raise InvalidArgument("network needs a policy head, a value head, or both")

    @property
    def shared(self) -> bool:
        return self.policy_dim > 0 and self.value_head

    @property
    def output_dim(self) -> int:
        return 2 * self.policy_dim + int(self.value_head)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = (self.input_dim, *self.hidden, self.output_dim)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def header(self) -> str:
        return (
            f"input={self.input_dim} hidden={','.join(map(str, self.hidden))} "
            f"policy={self.policy_dim} value={int(self.value_head)} "
            f"dropout={self.dropout!r} activation={self.activation}"
        )

    @classmethod
    def from_header(cls, text: str) -> "NetworkSpec":
        kv = dict(tok.split("=", 1) for tok in text.split())
        return cls(
            input_dim=int(kv["input"]),
            hidden=tuple(int(h) for h in kv["hidden"].split(",") if h),
            policy_dim=int(kv["policy"]),
            value_head=bool(int(kv["value"])),
            dropout=float(kv["dropout"]),
            activation=kv["activation"],
        )


class NetworkParams:
    """Flat parameter vector plus per-layer ``(W, b)`` views.

    ``version`` increases on every in-place update so stale forward traces
    can be detected.
    """

    def __init__(self, spec: NetworkSpec, flat: np.ndarray | None = None):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.n_params)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise InvalidArgument(f"expected {spec.n_params} parameters, got {flat.shape}")
        self.flat = flat
        self.version = 0
        self.layers = []
        pos = 0
        for fan_in, fan_out in spec.layer_shapes:
            w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = flat[pos:pos + fan_out]
            pos += fan_out
            self.layers.append((w, b))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, self.flat.copy())

    def assign(self, values: np.ndarray) -> None:
        self.flat[:] = values
        self.version += 1

    def __len__(self):
        return len(self.flat)


def init_params(spec: NetworkSpec, seed) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = NetworkParams(spec)
    for w, _ in params.layers:
        limit = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[:] = rng.uniform(-limit, limit, size=w.shape)
    return params


@dataclass
class ForwardTrace:
    spec: NetworkSpec
    params_id: int
    version: int
    inputs: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    squeeze: bool = False


def make_dropout_masks(spec: NetworkSpec, n_rows: int, rng: np.random.Generator) -> list:
    keep = 1.0 - spec.dropout
    return [(rng.random((n_rows, h)) < keep) / keep for h in spec.hidden]


def forward(params: NetworkParams, x, train: bool = False, dropout_seed=None,
            masks: list | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Dense forward pass over a single input or a batch of rows.

    In training mode hidden activations are multiplied by inverted-dropout
    masks (drawn from ``dropout_seed`` unless given explicitly); evaluation
    mode needs no rescaling.
    """
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise InvalidArgument(f"input has {x.shape[1]} features, network expects {spec.input_dim}")
    if train and spec.dropout > 0 and masks is None:
        masks = make_dropout_masks(spec, x.shape[0], np.random.default_rng(dropout_seed))
    if not (train and spec.dropout > 0):
        masks = None
    trace = ForwardTrace(spec, id(params.flat), params.version, squeeze=squeeze)
    h = x
    n_layers = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        trace.inputs.append(h)
        z = h @ w + b
        if i == n_layers - 1:
            h = z
            break
        a = np.tanh(z)
        trace.activations.append(a)
        if masks is not None:
            trace.masks.append(masks[i])
            a = a * masks[i]
        h = a
    return (h[0] if squeeze else h), trace


def backward(trace: ForwardTrace, params: NetworkParams, grad_out) -> np.ndarray:
    """Gradient of ``sum(outputs * grad_out)`` with respect to the flat parameters."""
    if trace.spec != params.spec or trace.params_id != id(params.flat) or trace.version != params.version:
        raise ProtocolError("forward trace does not belong to these parameters (stale or mismatched)")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if g.shape != (trace.inputs[0].shape[0], params.spec.output_dim):
        raise InvalidArgument("output gradient shape does not match the forward pass")
    grads = []
    n_layers = len(params.layers)
    for i in range(n_layers - 1, -1, -1):
        w, _ = params.layers[i]
        grads.append((g.sum(axis=0), trace.inputs[i].T @ g))
        if i == 0:
            break
        g = g @ w.T
        if trace.masks:
            g = g * trace.masks[i - 1]
        g = g * (1.0 - trace.activations[i - 1] ** 2)
    flat = np.empty(params.spec.n_params)
    pos = 0
    for gb, gw in reversed(grads):
        flat[pos:pos + gw.size] = gw.ravel()
        pos += gw.size
        flat[pos:pos + gb.size] = gb
        pos += gb.size
    return flat


# --- Gaussian policy head -----------------------------------------------

@dataclass
class PolicyOutput:
    mu: np.ndarray
    sigma: np.ndarray


class GaussianHead:
    """Maps raw outputs to bounded means and standard deviations.

    ``mu = max_step * tanh(raw)`` keeps the mean a feasible step size and
    ``sigma`` moves smoothly between ``sigma_min`` and ``sigma_max`` through a
    logistic squash, so it never collapses nor blows up.
    """

    def __init__(self, max_step, sigma_min_frac: float = 0.01, sigma_max_frac: float = 1.0):
        self.max_step = np.asarray(max_step, dtype=np.float64)
        self.sigma_min = sigma_min_frac * self.max_step
        self.sigma_max = sigma_max_frac * self.max_step
        self.dim = len(self.max_step)

    def __call__(self, raw) -> PolicyOutput:
        raw = np.asarray(raw)
        t = np.tanh(raw[..., :self.dim])
        s = expit(raw[..., self.dim:2 * self.dim])
        return PolicyOutput(self.max_step * t, self.sigma_min + (self.sigma_max - self.sigma_min) * s)

    def backward(self, raw, dmu, dsigma) -> np.ndarray:
        """Gradient with respect to the ``2 * dim`` raw policy outputs."""
        raw = np.asarray(raw)
        t = np.tanh(raw[..., :self.dim])
        s = expit(raw[..., self.dim:2 * self.dim])
        d_raw_mu = dmu * self.max_step * (1.0 - t * t)
        d_raw_sigma = dsigma * (self.sigma_max - self.sigma_min) * s * (1.0 - s)
        return np.concatenate([d_raw_mu, d_raw_sigma], axis=-1)


def _check_sigma(sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidArgument("sigma must be positive")


def gaussian_log_density(a, mu, sigma) -> np.ndarray:
    _check_sigma(sigma)
    z = (np.asarray(a) - mu) / sigma
    return -np.sum(0.5 * z * z + np.log(sigma) + LOG_SQRT_2PI, axis=-1)


def gaussian_log_density_grad(a, mu, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of the log density with respect to ``mu`` and ``sigma``."""
    _check_sigma(sigma)
    diff = np.asarray(a) - mu
    return diff / sigma ** 2, diff ** 2 / sigma ** 3 - 1.0 / sigma


def gaussian_density(a, mu, sigma) -> np.ndarray:
    return np.exp(gaussian_log_density(a, mu, sigma))


def gaussian_density_grad(a, mu, sigma) -> tuple[np.ndarray, np.ndarray]:
    p = gaussian_density(a, mu, sigma)[..., None]
    dmu, dsigma = gaussian_log_density_grad(a, mu, sigma)
    return p * dmu, p * dsigma


def tail_mass_outside(lo, hi, mu, sigma) -> np.ndarray:
    """Per-dimension probability mass of N(mu, sigma) below ``lo`` or above ``hi``."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InvalidArgument("lower bound exceeds upper bound")
    _check_sigma(sigma)
    return ndtr((lo - mu) / sigma) + ndtr((mu - hi) / sigma)


def _phi(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def tail_mass_outside_grad(lo, hi, mu, sigma) -> tuple[np.ndarray, np.ndarray]:
    zl = (np.asarray(lo) - mu) / sigma
    zh = (mu - np.asarray(hi)) / sigma
    dmu = (_phi(zh) - _phi(zl)) / sigma
    dsigma = -(_phi(zl) * zl + _phi(zh) * zh) / sigma
    return dmu, dsigma


def gaussian_entropy(sigma) -> np.ndarray:
    return np.sum(0.5 + LOG_SQRT_2PI + np.log(sigma), axis=-1)


def sample_action(policy: PolicyOutput, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``mu + sigma * z``; returns the raw (unclamped) sample and ``z``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    z = rng.standard_normal(np.shape(policy.mu))
    return policy.mu + policy.sigma * z, z


# --- checkpoints --------------------------------------------------------

def save_checkpoint(path, networks: dict, extras: dict | None = None) -> None:
    """Write networks (and optional named arrays) as versioned plain text.

    Values use ``repr`` so every float64 round-trips bit-exactly.
    """
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    for name, params in networks.items():
        lines.append(f"network {name} {params.spec.header()}")
        for i, (w, b) in enumerate(params.layers):
            lines.append(f"tensor {name}.W{i} {w.shape[0]}x{w.shape[1]} " + " ".join(repr(float(v)) for v in w.ravel()))
            lines.append(f"tensor {name}.b{i} {b.shape[0]} " + " ".join(repr(float(v)) for v in b))
    for name, arr in (extras or {}).items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = "x".join(map(str, arr.shape)) or "0"
        lines.append(f"array {name} {shape} " + " ".join(repr(float(v)) for v in arr.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise InvalidArgument(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1].lstrip("v"))
    if version != CHECKPOINT_VERSION:
        raise InvalidArgument(f"{path}: unsupported checkpoint version {version}")
    networks, extras, tensors = {}, {}, {}
    specs = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "network":
            name, header = rest.split(" ", 1)
            specs[name] = NetworkSpec.from_header(header)
            tensors[name] = []
        elif kind == "tensor":
            name, shape, *vals = rest.split(" ")
            tensors[name.split(".")[0]].append(np.array([float(v) for v in vals]))
        elif kind == "array":
            name, shape, *vals = rest.split(" ")
            dims = tuple(int(s) for s in shape.split("x")) if shape != "0" else ()
            extras[name] = np.array([float(v) for v in vals]).reshape(dims)
        else:
            raise InvalidArgument(f"{path}: unknown record '{kind}'")
    for name, spec in specs.items():
        flat = np.concatenate(tensors[name]) if tensors[name] else np.zeros(0)
        networks[name] = NetworkParams(spec, flat)
    return networks, extras
