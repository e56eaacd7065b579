"""Time-embedded MLP with hand-written reverse- and forward-mode derivatives.

The network maps ``[x, emb(t)] -> R^d``. Reverse mode is closed-form
backpropagation for this fixed topology; forward mode propagates a tangent
alongside the activations (dual numbers), and backpropagating through the
tangent gives exact gradients of Jacobian-vector functionals, which the
spectral-norm regularizer needs.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .core import Denoiser, DimensionError, as_time, tcol, velocity_from_denoiser

CKPT_FORMAT = "fmdt-ckpt-1"
CLASSES = ("C_NN", "C_IplusNN")
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    def __init__(self, msg: str, index: int | None = None):
        super().__init__(msg)
        self.index = index


def _act(name: str, z: np.ndarray):
    """Return activation value, first and second derivative."""
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(z / _SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        return z * cdf, cdf + z * pdf, pdf * (2.0 - z * z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class TimeEmbedding:
    frequencies: tuple[float, ...] = tuple(2.0**k for k in range(8))
    includes_raw_t: bool = True

    @property
    def width(self) -> int:
        return int(self.includes_raw_t) + 2 * len(self.frequencies)

    def __call__(self, t, batch: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))[:, None]
        cols = [t] if self.includes_raw_t else []
        if self.frequencies:
            ang = 2.0 * np.pi * t * np.asarray(self.frequencies)[None, :]
            cols += [np.sin(ang), np.cos(ang)]
        return np.concatenate(cols, axis=1) if cols else np.zeros((batch, 0))


def n_weights(layer_dims) -> int:
    return sum((a + 1) * b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass
class NetModel:
    layer_dims: list[int]
    weights: np.ndarray
    activation: str = "tanh"
    time_embed: TimeEmbedding = field(default_factory=TimeEmbedding)
    seed: int | None = None

    def __post_init__(self):
        self.layer_dims = [int(v) for v in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"bad layer dims {self.layer_dims}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (n_weights(self.layer_dims),):
            raise ValueError(f"expected {n_weights(self.layer_dims)} weights, "
                             f"got {self.weights.shape}")
        if self.layer_dims[0] != self.layer_dims[-1] + self.time_embed.width:
            raise ValueError("input width must be output dimension plus embedding width")
        _act(self.activation, np.zeros(1))

    @classmethod
    def init(cls, d: int, hidden=(64, 64), activation: str = "tanh",
             time_embed: TimeEmbedding | None = None, seed: int = 0) -> "NetModel":
        """Glorot-uniform weights, zero biases, drawn from ``seed``."""
        emb = time_embed or TimeEmbedding()
        dims = [d + emb.width, *hidden, d]
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-lim, lim, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return cls(dims, np.concatenate(chunks), activation, emb, seed)

    @property
    def d(self) -> int:
        return self.layer_dims[-1]

    def with_weights(self, weights: np.ndarray) -> "NetModel":
        return NetModel(self.layer_dims, np.array(weights, dtype=np.float64),
                        self.activation, self.time_embed, self.seed)

    def layers(self, weights: np.ndarray | None = None):
        """``(W, b)`` views into the flat vector; ``W`` is ``(fan_out, fan_in)``."""
        w = self.weights if weights is None else weights
        out, off = [], 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = w[off:off + fan_in * fan_out].reshape(fan_out, fan_in)
            off += fan_in * fan_out
            out.append((W, w[off:off + fan_out]))
            off += fan_out
        return out

    def _inputs(self, x: np.ndarray, t):
        if x.shape[-1] != self.d:
            raise DimensionError(f"net expects dimension {self.d}, got {x.shape[-1]}")
        if not np.all(np.isfinite(self.weights)):
            raise NonFiniteError("network weights are not finite")
        xb = np.atleast_2d(x)
        t = as_time(t)
        tcol(t, xb)
        return np.concatenate([xb, self.time_embed(t, xb.shape[0])], axis=1)

    def forward(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        h = self._inputs(x, t)
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            h = h @ W.T + b
            if i < len(layers) - 1:
                h = _act(self.activation, h)[0]
        return h[0] if x.ndim == 1 else h

    __call__ = forward

    def trace(self, x, t, u=None):
        """Forward pass keeping what the backward pass needs.

        With a tangent ``u`` (same shape as ``x``) the pass also carries
        ``d/de N(x + e u, t)``.
        """
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = self._inputs(xb, t)
        hd = None
        if u is not None:
            hd = np.zeros_like(h)
            hd[:, :self.d] = np.atleast_2d(u)
        layers = self.layers()
        cache = []
        for i, (W, b) in enumerate(layers):
            z = h @ W.T + b
            zd = None if hd is None else hd @ W.T
            last = i == len(layers) - 1
            if last:
                cache.append((h, hd, None, None, None, None))
                h, hd = z, zd
            else:
                a, a1, a2 = _act(self.activation, z)
                cache.append((h, hd, a1, a2, zd, None))
                h, hd = a, (None if zd is None else a1 * zd)
        return h, hd, cache

    def backward(self, cache, gy, gyd=None):
        """Adjoint pass. Returns ``(grad_weights, grad_x)``.

        ``gy`` is the adjoint of the output, ``gyd`` of the output tangent.
        """
        layers = self.layers()
        grads = []
        gz = np.atleast_2d(gy)
        gzd = None if gyd is None else np.atleast_2d(gyd)
        gh = None
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h, hd = cache[i][0], cache[i][1]
            gW = gz.T @ h
            if gzd is not None:
                gW = gW + gzd.T @ hd
            grads.append((gW, gz.sum(axis=0)))
            gh = gz @ W
            ghd = None if gzd is None else gzd @ W
            if i > 0:
                _, _, a1, a2, zd, _ = cache[i - 1]
                gz = gh * a1
                if ghd is not None:
                    gz = gz + ghd * a2 * zd
                    gzd = ghd * a1
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return flat, gh[:, :self.d]

    def jvp(self, x, t, u) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _, yd, _ = self.trace(x, t, u)
        return yd[0] if x.ndim == 1 else yd

    def vjp(self, x, t, w) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _, _, cache = self.trace(x, t)
        _, gx = self.backward(cache, np.atleast_2d(w))
        return gx[0] if x.ndim == 1 else gx


def _s(t, x):
    """``1 - t`` shaped to scale rows of ``x``."""
    s = 1.0 - np.asarray(as_time(t), dtype=np.float64)
    if s.ndim == 0:
        return float(s)
    return s if np.ndim(x) == 1 else s[:, None]


@dataclass
class ParametrizedDenoiser:
    """A network wrapped by a parametrization class.

    ``C_NN``: ``D = N(x, t)``; ``C_IplusNN``: ``D = x + (1 - t) N(x, t)``.
    """

    net: NetModel
    klass: str = "C_IplusNN"
    ema_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.klass not in CLASSES:
            raise ValueError(f"unknown parametrization class {self.klass!r}")

    @property
    def d(self) -> int:
        return self.net.d

    @property
    def residual(self) -> bool:
        return self.klass == "C_IplusNN"

    def __call__(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n = self.net(x, t)
        return x + _s(t, x) * n if self.residual else n

    def jvp(self, x, t, u) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        jn = self.net.jvp(x, t, u)
        return np.asarray(u) + _s(t, x) * jn if self.residual else jn

    def vjp(self, x, t, w) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        jn = self.net.vjp(x, t, w)
        return np.asarray(w) + _s(t, x) * jn if self.residual else jn

    def with_weights(self, weights) -> "ParametrizedDenoiser":
        return ParametrizedDenoiser(self.net.with_weights(weights), self.klass)

    def ema(self) -> "ParametrizedDenoiser":
        """The model evaluated at its EMA weights (itself when none are stored)."""
        if self.ema_weights is None:
            return self
        return self.with_weights(self.ema_weights)

    def as_denoiser(self, name: str | None = None) -> Denoiser:
        return Denoiser(self.__call__, self.jvp, self.vjp,
                        name=name or f"{self.klass}[{self.net.activation}]")

    def as_velocity(self, name: str | None = None):
        return velocity_from_denoiser(self.as_denoiser(name))

    def loss_and_grad(self, x_t, x1, t, w_t) -> tuple[float, np.ndarray]:
        """Weighted MSE ``(1/B) sum_b w_b ||D(x_b, t_b) - x1_b||^2`` and its weight gradient."""
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
        B = x_t.shape[0]
        w_t = np.broadcast_to(np.asarray(w_t, dtype=np.float64), (B,))
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        n, _, cache = self.net.trace(x_t, t_arr)
        s = (1.0 - t_arr)[:, None]
        D = x_t + s * n if self.residual else n
        per = w_t * np.sum((D - x1) ** 2, axis=1)
        bad = np.flatnonzero(~np.isfinite(per))
        if bad.size:
            raise NonFiniteError(f"non-finite loss at sample {int(bad[0])}", int(bad[0]))
        gD = (2.0 / B) * w_t[:, None] * (D - x1)
        gN = s * gD if self.residual else gD
        grad, _ = self.net.backward(cache, gN)
        return float(per.mean()), grad

    def velocity_jacobian_functional_grad(self, x, t, u, w, coef) -> np.ndarray:
        """Gradient in weights of ``sum_b coef_b * w_b^T J_v(x_b, t_b) u_b``.

        ``J_v`` is the Jacobian in ``x`` of the induced velocity; ``u`` and ``w``
        are held fixed.
        """
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        _, _, cache = self.net.trace(xb, t_arr, u)
        scale = np.asarray(coef, dtype=np.float64)
        if not self.residual:
            scale = scale / (1.0 - t_arr)
        gyd = scale[:, None] * np.atleast_2d(w)
        grad, _ = self.net.backward(cache, np.zeros_like(gyd), gyd)
        return grad

    def velocity_jvp(self, x, t, u) -> np.ndarray:
        """``J_v u`` for the induced velocity ``v = (D - x) / (1 - t)``."""
        jn = self.net.jvp(x, t, u)
        return jn if self.residual else (jn - np.asarray(u)) / _s(t, x)

    def velocity_vjp(self, x, t, w) -> np.ndarray:
        jn = self.net.vjp(x, t, w)
        return jn if self.residual else (jn - np.asarray(w)) / _s(t, x)


def _b64(a: np.ndarray | None):
    if a is None:
        return None
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str | None):
    if s is None:
        return None
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def save_checkpoint(path, pd: ParametrizedDenoiser) -> None:
    net = pd.net
    doc = {
        "format": CKPT_FORMAT,
        "layer_dims": net.layer_dims,
        "activation": net.activation,
        "time_embed": {"frequencies": list(net.time_embed.frequencies),
                       "includes_raw_t": net.time_embed.includes_raw_t},
        "class": pd.klass,
        "seed": net.seed,
        "weights": _b64(net.weights),
        "ema_weights": _b64(pd.ema_weights),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> ParametrizedDenoiser:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a {CKPT_FORMAT} checkpoint")
    emb = TimeEmbedding(tuple(float(f) for f in doc["time_embed"]["frequencies"]),
                        bool(doc["time_embed"]["includes_raw_t"]))
    net = NetModel(doc["layer_dims"], _unb64(doc["weights"]), doc["activation"], emb,
                   doc.get("seed"))
    return ParametrizedDenoiser(net, doc["class"], _unb64(doc.get("ema_weights")))
