"""Training objectives and their gradients with respect to logits.

Each ``*_grad`` function returns ``(value, d value / d logits)`` so that the
model backward pass can be shared. Penalties defined on scores convert
through ``ds/dz = s (1 - s)``. Sample weights are renormalised within
whatever set a term is computed on (a minibatch, a group, a class).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

LOG2 = math.log(2.0)
SURROGATES = ("step", "hinge", "softplus", "sigmoid")


def surrogate(kind, z):
    """Step indicator ``1[z > 0]`` or one of its relaxations."""
    z = np.asarray(z, dtype=float)
    if kind == "step":
        out = (z > 0).astype(float)
    elif kind == "hinge":
        out = np.maximum(0.0, 1.0 + z)
    elif kind == "softplus":
        out = np.logaddexp(0.0, z) / LOG2
    elif kind == "sigmoid":
        out = special.expit(z)
    else:
        raise ValueError(f"unknown surrogate {kind!r}")
    return float(out) if out.ndim == 0 else out


def surrogate_grad(kind, z):
    z = np.asarray(z, dtype=float)
    if kind == "step":
        return np.zeros_like(z)
    if kind == "hinge":
        return (z > -1.0).astype(float)
    if kind == "softplus":
        return special.expit(z) / LOG2
    if kind == "sigmoid":
        e = special.expit(z)
        return e * (1 - e)
    raise ValueError(f"unknown surrogate {kind!r}")


def _norm(w):
    total = w.sum()
    return w / total if total > 0 else None


def log_loss_grad(z, y, w):
    """Weighted mean of ``softplus(z) - y z`` (the log-loss in logit form)."""
    wn = _norm(w)
    if wn is None:
        return 0.0, np.zeros_like(z)
    val = float(np.sum(wn * (np.logaddexp(0.0, z) - y * z)))
    return val, wn * (special.expit(z) - y)


# --- MMD ---------------------------------------------------------------------

def _laplace_sums(x, y, b, gamma):
    """For each ``x_i``: ``sum_j b_j k(x_i, y_j)`` and ``sum_j b_j k(x_i, y_j) sign(x_i - y_j)``.

    Uses sorted prefix sums of ``b_j exp(+-gamma y_j)``, so the cost is
    O((n + m) log m) instead of O(nm).
    """
    order = np.argsort(y, kind="stable")
    ys, bs = y[order], b[order]
    mid = 0.5 * (ys[0] + ys[-1]) if ys.size else 0.0
    ep = bs * np.exp(gamma * (ys - mid))
    em = bs * np.exp(-gamma * (ys - mid))
    pre_ep = np.concatenate([[0.0], np.cumsum(ep)])
    pre_b = np.concatenate([[0.0], np.cumsum(bs)])
    suf_em = np.concatenate([np.cumsum(em[::-1])[::-1], [0.0]])
    lo = np.searchsorted(ys, x, side="left")
    hi = np.searchsorted(ys, x, side="right")
    less = np.exp(-gamma * (x - mid)) * pre_ep[lo]
    greater = np.exp(gamma * (x - mid)) * suf_em[hi]
    equal = pre_b[hi] - pre_b[lo]
    return less + equal + greater, less - greater


def weighted_mmd_grad(sa, wa, sb, wb, gamma=1.0):
    """Weighted V-statistic MMD between two score samples, kernel ``exp(-gamma |z - z'|)``.

    ``E_aa + E_bb - 2 E_ab`` with normalised product weights, all pairs
    included, so identical samples give exactly 0. Returns
    ``(value, grad_a, grad_b)``; ``sign(0) = 0`` at ties.
    """
    a = wa / wa.sum()
    b = wb / wb.sum()
    S_aa, T_aa = _laplace_sums(sa, sa, a, gamma)
    S_bb, T_bb = _laplace_sums(sb, sb, b, gamma)
    S_ab, T_ab = _laplace_sums(sa, sb, b, gamma)
    S_ba, T_ba = _laplace_sums(sb, sa, a, gamma)
    e_aa, e_bb, e_ab = a @ S_aa, b @ S_bb, a @ S_ab
    value = max(float(e_aa + e_bb - 2.0 * e_ab), 0.0)
    grad_a = -2.0 * gamma * a * (T_aa - T_ab)
    grad_b = -2.0 * gamma * b * (T_bb - T_ba)
    return value, grad_a, grad_b


def weighted_mmd(sa, wa, sb, wb, gamma=1.0):
    return weighted_mmd_grad(np.asarray(sa, float), np.asarray(wa, float),
                             np.asarray(sb, float), np.asarray(wb, float), gamma)[0]


def mmd_penalty_grad(z, y, group, w, n_groups, gamma=1.0, normalization="K"):
    """Sum over outcome values and groups of MMD(group cell || outcome cell), scaled.

    The sum is divided by ``K`` (``normalization="K"``) or ``2K``. Cells
    with no weight are skipped and the result rescaled by
    ``(2K) / live cells``. Returns ``(value, d/dz, n_skipped)``.
    """
    s = special.expit(z)
    grad_s = np.zeros_like(s)
    total, live, skipped = 0.0, 0, 0
    for yv in (0, 1):
        pop = (y == yv) & (w > 0)
        if not pop.any():
            skipped += n_groups
            continue
        pop_idx = np.flatnonzero(pop)
        for k in range(n_groups):
            cell_idx = np.flatnonzero(pop & (group == k))
            if cell_idx.size == 0:
                skipped += 1
                continue
            val, ga, gb = weighted_mmd_grad(s[cell_idx], w[cell_idx], s[pop_idx], w[pop_idx], gamma)
            total += val
            np.add.at(grad_s, cell_idx, ga)
            np.add.at(grad_s, pop_idx, gb)
            live += 1
    if live == 0:
        return 0.0, np.zeros_like(z), skipped
    denom = n_groups if normalization == "K" else 2 * n_groups
    scale = (2 * n_groups / live) / denom
    return total * scale, grad_s * scale * s * (1 - s), skipped


def mmd_penalty(scores, y, group, weights, gamma=1.0, normalization="K"):
    """Equalized-odds MMD penalty evaluated directly on scores.

    ``group`` holds labels of any type; the vocabulary is the sorted set.
    """
    s = np.asarray(scores, float)
    labels = np.asarray(group, dtype=object)
    vocab = sorted(set(labels.tolist()), key=str)
    codes = np.array([vocab.index(g) for g in labels])
    z = special.logit(np.clip(s, 1e-15, 1 - 1e-15))
    return mmd_penalty_grad(z, np.asarray(y).astype(int), codes, np.asarray(weights, float),
                            len(vocab), gamma, normalization)[0]


# --- relaxed metrics and parity ------------------------------------------------

def relaxed_rate_grad(s, y, w, tau, kind, surr):
    """``sum_i w'_i h(s_i - tau)`` with class-restricted weights; grad w.r.t. scores."""
    cls = (y == 1) if kind == "tpr" else (y == 0)
    cw = w * cls
    total = cw.sum()
    if total <= 0:
        return None
    wn = cw / total
    val = float(np.sum(wn * surrogate(surr, s - tau)))
    return val, wn * surrogate_grad(surr, s - tau)


def relaxed_auc_grad(s, y, w, surr):
    """``sum_ij w_ij h(s_i - s_j)`` over positive ``i`` and negative ``j``."""
    pos = np.flatnonzero((y == 1) & (w > 0))
    neg = np.flatnonzero((y == 0) & (w > 0))
    if pos.size == 0 or neg.size == 0:
        return None
    a = w[pos] / w[pos].sum()
    b = w[neg] / w[neg].sum()
    d = s[pos][:, None] - s[neg][None, :]
    W = a[:, None] * b[None, :]
    val = float(np.sum(W * surrogate(surr, d)))
    G = W * surrogate_grad(surr, d)
    grad = np.zeros_like(s)
    grad[pos] += G.sum(axis=1)
    grad[neg] -= G.sum(axis=0)
    return val, grad


def parse_metric(spec):
    """``"tpr@0.075"`` -> ``("tpr", 0.075)``; ``"auc"`` -> ``("auc", None)``."""
    name, _, thr = spec.partition("@")
    name = name.strip().lower()
    if name not in ("tpr", "fpr", "auc", "logloss"):
        raise ValueError(f"unknown parity metric {spec!r}")
    if name in ("tpr", "fpr"):
        if not thr:
            raise ValueError(f"{name} needs a threshold, e.g. '{name}@0.075'")
        return name, float(thr)
    return name, None


def _metric_grad(name, thr, z, s, y, w, surr):
    """Relaxed metric value and its gradient w.r.t. logits, or None if undefined."""
    if name == "logloss":
        if w.sum() <= 0:
            return None
        return log_loss_grad(z, y, w)
    if name == "auc":
        out = relaxed_auc_grad(s, y, w, surr)
    else:
        out = relaxed_rate_grad(s, y, w, thr, name, surr)
    if out is None:
        return None
    val, gs = out
    return val, gs * s * (1 - s)


def relaxed_metric(name, scores, y, weights, threshold=None, surrogate_kind="softplus"):
    s = np.asarray(scores, float)
    z = special.logit(np.clip(s, 1e-15, 1 - 1e-15))
    out = _metric_grad(name, threshold, z, s, np.asarray(y).astype(int),
                       np.asarray(weights, float), surrogate_kind)
    return None if out is None else out[0]


def parity_penalty_grad(z, y, group, w, n_groups, metrics, surr="softplus"):
    """``sum_j sum_k (g_j(group k) - g_j(all))^2`` with relaxed metrics.

    ``metrics`` is a sequence of ``(name, threshold)`` pairs. Group terms whose
    metric is undefined (missing class) are skipped and counted.
    """
    s = special.expit(z)
    value, grad, skipped = 0.0, np.zeros_like(z), 0
    for name, thr in metrics:
        overall = _metric_grad(name, thr, z, s, y, w, surr)
        if overall is None:
            skipped += n_groups
            continue
        g_all, d_all = overall
        for k in range(n_groups):
            mask = group == k
            wk = w * mask
            out = _metric_grad(name, thr, z, s, y, wk, surr)
            if out is None:
                skipped += 1
                continue
            g_k, d_k = out
            diff = g_k - g_all
            value += diff * diff
            grad += 2.0 * diff * (d_k - d_all)
    return value, grad, skipped


def parity_penalty(scores, y, group, weights, metrics=("tpr@0.075", "fpr@0.075"),
                   surrogate_kind="softplus"):
    s = np.asarray(scores, float)
    labels = np.asarray(group, dtype=object)
    vocab = sorted(set(labels.tolist()), key=str)
    codes = np.array([vocab.index(g) for g in labels])
    z = special.logit(np.clip(s, 1e-15, 1 - 1e-15))
    parsed = [parse_metric(m) if isinstance(m, str) else m for m in metrics]
    return parity_penalty_grad(z, np.asarray(y).astype(int), codes, np.asarray(weights, float),
                               len(vocab), parsed, surrogate_kind)[0]


# --- group DRO ------------------------------------------------------------------

def dro_update(state, g, eta, present=None):
    """Exponentiated-gradient step on the group simplex.

    ``lambda_k <- lambda_k exp(eta g_k) / sum_j lambda_j exp(eta g_j)``,
    computed with max-subtraction. Groups not in ``present`` keep their
    weight; the present groups share their previous total mass.
    """
    lam = np.asarray(state, dtype=float)
    g = np.asarray(g, dtype=float)
    present = np.ones(lam.shape, dtype=bool) if present is None else np.asarray(present, bool)
    if not present.any():
        return lam.copy()
    expo = np.where(present, eta * np.where(present, g, 0.0), -np.inf)
    expo = expo - expo[present].max()
    unnorm = np.where(present, lam * np.exp(expo), 0.0)
    mass = lam[present].sum()
    denom = unnorm.sum()
    out = lam.copy()
    if denom > 0:
        out[present] = unnorm[present] / denom * mass
    return out


def group_log_losses_grad(z, y, group, w, n_groups):
    """Per-group weighted mean log-loss and per-group gradients (None if empty)."""
    out = []
    for k in range(n_groups):
        wk = w * (group == k)
        if wk.sum() <= 0:
            out.append(None)
        else:
            out.append(log_loss_grad(z, y, wk))
    return out


def dro_loss_grad(z, y, group, w, n_groups, lam):
    """``sum_k lambda_k L_k`` with ``L_k`` the group's weighted mean log-loss."""
    value, grad = 0.0, np.zeros_like(z)
    for k, out in enumerate(group_log_losses_grad(z, y, group, w, n_groups)):
        if out is None:
            continue
        value += lam[k] * out[0]
        grad += lam[k] * out[1]
    return value, grad
