"""Risk models as flat parameter vectors with hand-written backpropagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from ..errors import ConfigError


@dataclass(frozen=True)
class Architecture:
    """``logistic`` or ``mlp`` with ``hidden`` layer sizes.

    Dropout (inverted, rate ``dropout``) applies to hidden activations in
    training mode only.
    """

    kind: str = "logistic"
    hidden: tuple = ()
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("logistic", "mlp"):
            raise ConfigError(f"unknown architecture {self.kind!r}")
        if self.kind == "mlp" and not self.hidden:
            raise ConfigError("mlp needs at least one hidden layer")
        if self.kind == "logistic" and self.hidden:
            raise ConfigError("logistic model takes no hidden layers")
        if self.activation not in _ACT:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    def layer_sizes(self, n_features):
        return [n_features, *self.hidden, 1]

    def n_params(self, n_features):
        sizes = self.layer_sizes(n_features)
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x, out):
    return (x > 0).astype(float)


def _tanh_grad(x, out):
    return 1.0 - out ** 2


_ACT = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


def unpack(arch, n_features, theta):
    sizes = arch.layer_sizes(n_features)
    layers, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        layers.append((W, theta[pos:pos + b]))
        pos += b
    return layers


def init_params(arch, n_features, rng):
    """Zeros for logistic regression, He-scaled normals for the MLP."""
    theta = np.zeros(arch.n_params(n_features))
    if arch.kind == "logistic":
        return theta
    sizes = arch.layer_sizes(n_features)
    pos = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        theta[pos:pos + a * b] = rng.standard_normal(a * b) * np.sqrt(2.0 / max(a, 1))
        pos += a * b + b
    return theta


def forward(arch, n_features, theta, X, rng=None, train=False):
    """Logits and a cache for :func:`backward`.

    Dropout masks are drawn from ``rng`` only when ``train`` is true and the
    dropout rate is positive.
    """
    act, _ = _ACT[arch.activation]
    layers = unpack(arch, n_features, theta)
    h = X
    cache = []
    for i, (W, b) in enumerate(layers):
        pre = h @ W + b
        if i == len(layers) - 1:
            cache.append((h, None, None, None))
            return pre[:, 0], cache
        out = act(pre)
        mask = None
        if train and arch.dropout > 0:
            keep = 1.0 - arch.dropout
            mask = (rng.random(out.shape) < keep) / keep
            out_d = out * mask
        else:
            out_d = out
        cache.append((h, pre, out, mask))
        h = out_d


def backward(arch, n_features, theta, cache, dz):
    """Gradient of a scalar loss w.r.t. ``theta`` given ``d loss / d logits``."""
    _, act_grad = _ACT[arch.activation]
    layers = unpack(arch, n_features, theta)
    grads = []
    delta = dz[:, None]
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = cache[i][0]
        grads.append((h_in.T @ delta, delta.sum(axis=0)))
        if i == 0:
            break
        dh = delta @ W.T
        _, pre, out, mask = cache[i - 1]
        if mask is not None:
            dh = dh * mask
        delta = dh * act_grad(pre, out)
    grads.reverse()
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


class RiskModel:
    """A trained score function ``x -> sigmoid(f_theta(x))``; immutable."""

    def __init__(self, arch: Architecture, n_features: int, params):
        self.arch = arch
        self.n_features = int(n_features)
        p = np.array(params, dtype=float)
        if p.size != arch.n_params(n_features):
            raise ConfigError("parameter vector does not match architecture")
        p.flags.writeable = False
        self.params = p

    def logits(self, X):
        return forward(self.arch, self.n_features, self.params, np.asarray(X, float))[0]

    def predict(self, X, groups=None):
        return special.expit(self.logits(X))

    def to_text(self):
        a = self.arch
        return (
            "# risk model\n"
            f"kind = {a.kind}\n"
            f"hidden = {' '.join(str(h) for h in a.hidden)}\n"
            f"activation = {a.activation}\n"
            f"dropout = {a.dropout!r}\n"
            f"n_features = {self.n_features}\n"
            f"params = {' '.join(repr(float(v)) for v in self.params)}\n"
        )

    @classmethod
    def from_text(cls, text):
        vals = _parse_flat(text)
        arch = Architecture(kind=vals["kind"], hidden=tuple(int(h) for h in vals["hidden"].split()),
                            activation=vals["activation"], dropout=float(vals["dropout"]))
        return cls(arch, int(vals["n_features"]), [float(v) for v in vals["params"].split()])


class StratifiedModel:
    """One :class:`RiskModel` per group; samples are routed by group label."""

    def __init__(self, models: dict):
        self.models = dict(models)

    def predict(self, X, groups):
        X = np.asarray(X, float)
        groups = np.asarray(groups, dtype=object)
        out = np.full(len(X), np.nan)
        for g, model in self.models.items():
            mask = groups == g
            if mask.any():
                out[mask] = model.predict(X[mask])
        if np.isnan(out).any():
            missing = sorted(set(groups[np.isnan(out)].tolist()))
            raise KeyError(f"no stratified model for groups {missing}")
        return out

    def to_text(self):
        parts = ["# stratified risk model\n"]
        for g in sorted(self.models):
            parts.append(f"[group {g}]\n")
            parts.append(self.models[g].to_text())
        return "".join(parts)


def _parse_flat(text):
    vals = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition("=")
        vals[key.strip()] = rest.strip()
    return vals


def load_model(text):
    """Parse the text written by ``RiskModel.to_text`` or ``StratifiedModel.to_text``."""
    if text.startswith("# stratified"):
        models, current, buf = {}, None, []
        for line in text.splitlines(keepends=True)[1:]:
            if line.startswith("[group "):
                if current is not None:
                    models[current] = RiskModel.from_text("".join(buf))
                current, buf = line.strip()[len("[group "):-1], []
            else:
                buf.append(line)
        if current is not None:
            models[current] = RiskModel.from_text("".join(buf))
        return StratifiedModel(models)
    return RiskModel.from_text(text)
