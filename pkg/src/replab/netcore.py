"""Minimal dense network engine: MLPs with manual reverse-mode gradients.

Everything is float64 numpy. A Network is a flat parameter container; the
forward pass caches whatever the hand-written backward pass needs, so a
training step is forward_cache -> loss grad -> backward -> Adam. There is
deliberately no autodiff graph: objectives that couple several networks
(encoder + head) chain backward() calls by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import binio

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-6
_NORM_EPS = 1e-12

CHECKPOINT_MAGIC = b"IMPN"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# activations
#
# gelu is the tanh approximation (the flax/jax default), which also keeps
# the backward pass free of erf evaluations.

def _tanh(x: Array) -> Array:
    return np.tanh(x)


def _tanh_grad(x: Array, y: Array) -> Array:
    return 1.0 - y * y


def _gelu(x: Array) -> Array:
    inner = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + inner)


def _gelu_grad(x: Array, y: Array) -> Array:
    inner = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    sech2 = 1.0 - inner * inner
    return 0.5 * (1.0 + inner) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


_ACTIVATIONS = {"tanh": (_tanh, _tanh_grad), "gelu": (_gelu, _gelu_grad)}


# ---------------------------------------------------------------------------
# network

@dataclass(frozen=True)
class NetworkSpec:
    """Shape and behaviour of one MLP.

    layer_widths includes the input width, e.g. (32, 256, 256, 64) is two
    hidden layers. output_normalize appends layer-norm + tanh to the final
    affine output (the embedding tail). Dropout acts on hidden activations
    in train mode only.
    """

    layer_widths: tuple[int, ...]
    activation: str = "gelu"
    output_normalize: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least one affine layer (two widths)")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]


class Network:
    """Parameter container for one MLP described by a NetworkSpec.

    params() returns live references in a fixed order (W0, b0, W1, b1, ...,
    [gamma, beta]); optimizers update them in place.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        widths = spec.layer_widths
        self.weights: list[Array] = []
        self.biases: list[Array] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        if spec.output_normalize:
            self.gamma = np.ones(widths[-1])
            self.beta = np.zeros(widths[-1])
        else:
            self.gamma = None
            self.beta = None

    def params(self) -> list[Array]:
        out: list[Array] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        if self.gamma is not None:
            out.append(self.gamma)
            out.append(self.beta)
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def set_params(self, values: list[Array]) -> None:
        own = self.params()
        if len(own) != len(values):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(own, values):
            if dst.shape != src.shape:
                raise ValueError("parameter shape mismatch")
            dst[...] = src

    def copy(self) -> "Network":
        dup = Network(self.spec, np.random.default_rng(0))
        dup.set_params([p.copy() for p in self.params()])
        return dup


def zero_grads(net: Network) -> list[Array]:
    return [np.zeros_like(p) for p in net.params()]


def accumulate(into: list[Array], grads: list[Array]) -> list[Array]:
    for dst, src in zip(into, grads):
        dst += src
    return into


# ---------------------------------------------------------------------------
# forward / backward

def forward(net: Network, x: Array, train: bool = False,
            rng: np.random.Generator | None = None) -> Array:
    """Run the network; dropout is active only when train=True."""
    out, _ = forward_cache(net, x, train=train, rng=rng)
    return out


def forward_cache(net: Network, x: Array, train: bool = False,
                  rng: np.random.Generator | None = None):
    """Forward pass that also returns the cache backward() needs."""
    spec = net.spec
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"input shape {x.shape} incompatible with width {spec.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    act, _ = _ACTIVATIONS[spec.activation]
    p_drop = spec.dropout_rate if train else 0.0
    if p_drop > 0.0 and rng is None:
        raise ValueError("dropout in train mode needs an rng")

    h = x
    layers = []
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i < n_layers - 1:
            a_pre = act(z)
            if p_drop > 0.0:
                mask = (rng.random(a_pre.shape) >= p_drop) / (1.0 - p_drop)
                a = a_pre * mask
            else:
                mask = None
                a = a_pre
            layers.append((h, z, a_pre, mask))
            h = a
        else:
            layers.append((h, z, None, None))
            h = z

    norm_cache = None
    if spec.output_normalize:
        mu = h.mean(axis=1, keepdims=True)
        var = h.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + _LN_EPS)
        x_hat = (h - mu) * inv_std
        y = x_hat * net.gamma + net.beta
        out = np.tanh(y)
        norm_cache = (x_hat, inv_std, out)
        h = out
    return h, (layers, norm_cache)


def backward(net: Network, cache, dout: Array):
    """Gradient of a scalar loss wrt inputs and parameters.

    cache must come from forward_cache on this net; dout is dLoss/dOutput.
    Returns (dx, grads) with grads aligned with net.params().
    """
    spec = net.spec
    layers, norm_cache = cache
    _, act_grad = _ACTIVATIONS[spec.activation]

    d_gamma = d_beta = None
    g = dout
    if spec.output_normalize:
        x_hat, inv_std, out = norm_cache
        g = g * (1.0 - out * out)               # through tanh
        d_gamma = (g * x_hat).sum(axis=0)
        d_beta = g.sum(axis=0)
        g = g * net.gamma                        # through layer norm
        m1 = g.mean(axis=1, keepdims=True)
        m2 = (g * x_hat).mean(axis=1, keepdims=True)
        g = inv_std * (g - m1 - x_hat * m2)

    grads_rev = []
    n_layers = len(net.weights)
    for i in range(n_layers - 1, -1, -1):
        h_in, z, a_pre, mask = layers[i]
        if i < n_layers - 1:
            if mask is not None:
                g = g * mask
            g = g * act_grad(z, a_pre)
        dw = h_in.T @ g
        db = g.sum(axis=0)
        grads_rev.append(db)
        grads_rev.append(dw)
        g = g @ net.weights[i].T

    grads = list(reversed(grads_rev))
    if spec.output_normalize:
        grads.append(d_gamma)
        grads.append(d_beta)
    return g, grads


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred: Array, target: Array) -> float:
    """Mean over batch and coordinates of squared differences."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_grad(pred: Array, target: Array) -> Array:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return 2.0 * (pred - target) / pred.size


def l2_normalize(x: Array) -> Array:
    """Row-normalize to unit L2 norm (smoothed at zero)."""
    sq = np.sum(x * x, axis=1, keepdims=True) + _NORM_EPS
    return x / np.sqrt(sq)


def infonce_loss(anchor: Array, positive: Array) -> float:
    """InfoNCE with in-batch negatives over raw (unnormalized) embeddings.

    Rows are L2-normalized internally; the energy is exp of the inner
    product of normalized rows, negatives for row i are the positives of
    every other row, and the negative expectation is the uniform in-batch
    average (including the positive itself):

        loss = mean_i [ -s_ii + log( (1/n) sum_j exp(s_ij) ) ]
    """
    loss, _, _ = infonce_grads(anchor, positive)
    return loss


def infonce_grads(anchor: Array, positive: Array):
    anchor = np.asarray(anchor, dtype=float)
    positive = np.asarray(positive, dtype=float)
    if anchor.shape != positive.shape:
        raise ValueError("anchor/positive shape mismatch")
    n = anchor.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 rows")

    a_hat = l2_normalize(anchor)
    p_hat = l2_normalize(positive)
    sims = a_hat @ p_hat.T
    row_max = sims.max(axis=1, keepdims=True)
    exp_s = np.exp(sims - row_max)
    lse = np.log(exp_s.sum(axis=1, keepdims=True)) + row_max
    loss = float(np.mean(-np.diag(sims) + lse.ravel() - math.log(n)))

    d_sims = (exp_s / exp_s.sum(axis=1, keepdims=True) - np.eye(n)) / n
    d_a_hat = d_sims @ p_hat
    d_p_hat = d_sims.T @ a_hat
    d_anchor = _l2_normalize_backward(anchor, a_hat, d_a_hat)
    d_positive = _l2_normalize_backward(positive, p_hat, d_p_hat)
    return loss, d_anchor, d_positive


def _l2_normalize_backward(raw: Array, normed: Array, g: Array) -> Array:
    inv = 1.0 / np.sqrt(np.sum(raw * raw, axis=1, keepdims=True) + _NORM_EPS)
    return inv * (g - normed * np.sum(normed * g, axis=1, keepdims=True))


def gradients(net: Network, loss_fn, batch, rng: np.random.Generator):
    """One-net convenience: loss_fn(pred, batch) -> (loss, dpred).

    batch[0] is the network input. The dropout mask is drawn once from rng
    so the returned gradients match the masked forward exactly.
    """
    x = batch[0]
    train = net.spec.dropout_rate > 0.0
    pred, cache = forward_cache(net, x, train=train, rng=rng)
    loss, dpred = loss_fn(pred, batch)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss!r}")
    _, grads = backward(net, cache, dpred)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    total_steps: int = 1


class Adam:
    """AdamW with cosine learning-rate decay to zero over total_steps."""

    def __init__(self, params: list[Array], cfg: AdamConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def effective_lr(self, step: int) -> float:
        t = min(step, self.cfg.total_steps)
        frac = t / self.cfg.total_steps
        return self.cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self, params: list[Array], grads: list[Array]) -> None:
        if len(params) != len(self.m):
            raise ValueError("optimizer was built for a different parameter set")
        lr = self.effective_lr(self.step_count)
        self.step_count += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError("gradient shape mismatch")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.cfg.eps)
            p -= lr * (update + self.cfg.weight_decay * p)


# ---------------------------------------------------------------------------
# finite differences

def finite_difference_check(nets: list[Network], loss_closure,
                            analytic: list[Array], h: float = 1e-5,
                            max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic grads and central differences.

    loss_closure() must be deterministic under parameter perturbation (fix
    any dropout rng inside it). analytic is the concatenation of per-net
    gradient lists in the same order as the nets' params. When max_coords
    is set, that many coordinates per tensor are checked (chosen by rng),
    otherwise every coordinate is checked.
    """
    params: list[Array] = []
    for net in nets:
        params.extend(net.params())
    if len(params) != len(analytic):
        raise ValueError("analytic gradient list does not match parameters")
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        if max_coords is not None and flat_p.size > max_coords:
            if rng is None:
                raise ValueError("coordinate subsampling needs an rng")
            idx = rng.choice(flat_p.size, size=max_coords, replace=False)
        else:
            idx = np.arange(flat_p.size)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_closure()
            flat_p[i] = orig - h
            down = loss_closure()
            flat_p[i] = orig
            fd = (up - down) / (2.0 * h)
            denom = max(abs(fd), abs(flat_g[i]), 1e-6)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

def save_network(path, net: Network, tag: str = "", train_step: int = 0) -> None:
    w = binio.Writer(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    w.json_({
        "layer_widths": list(net.spec.layer_widths),
        "activation": net.spec.activation,
        "output_normalize": net.spec.output_normalize,
        "dropout_rate": net.spec.dropout_rate,
        "tag": tag,
        "train_step": int(train_step),
    })
    for p in net.params():
        w.array(p)
    w.write(path)


def load_network(path):
    """Returns (net, tag, train_step)."""
    r = binio.read_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    header = r.json_()
    spec = NetworkSpec(
        layer_widths=tuple(header["layer_widths"]),
        activation=header["activation"],
        output_normalize=header["output_normalize"],
        dropout_rate=header["dropout_rate"],
    )
    net = Network(spec, np.random.default_rng(0))
    net.set_params([r.array() for _ in range(len(net.params()))])
    return net, header["tag"], header["train_step"]
