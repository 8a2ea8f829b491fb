"""Independent reference implementations used as test oracles.

Nothing here calls into the code paths it checks: layer arithmetic is redone
instance by instance with scipy correlation, metrics by brute-force counting.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.signal import correlate

EPS = 1e-12


def _layer_names(tensors, prefix):
    names = sorted({k.split(".")[0] for k in tensors if k.startswith(prefix) and not k.startswith("fc_out")})
    return sorted(names, key=lambda s: int(s[len(prefix):]))


def reference_instance(tensors, arch, x):
    """Return (logits, embedding, activation pattern) for one instance."""
    pattern = []
    x = np.asarray(x, dtype=np.float64)
    if arch == "cnn":
        h = x[None] if x.ndim == 2 else x
        for conv in _layer_names(tensors, "conv"):
            w, b = tensors[f"{conv}.weight"], tensors[f"{conv}.bias"]
            z = np.stack([
                sum(correlate(h[c], w[o, c], mode="valid") for c in range(w.shape[1])) + b[o]
                for o in range(w.shape[0])
            ])
            pattern.append(z > 0)
            a = np.maximum(z, 0)
            c_, hh, ww = a.shape
            a = a[:, : hh // 2 * 2, : ww // 2 * 2].reshape(c_, hh // 2, 2, ww // 2, 2)
            pooled = a.max(axis=(2, 4))
            pattern.append(a == pooled[:, :, None, :, None])
            h = pooled
        h = h.reshape(-1)
    else:
        h = x.reshape(-1)
    for fc in _layer_names(tensors, "fc"):
        z = tensors[f"{fc}.weight"] @ h + tensors[f"{fc}.bias"]
        pattern.append(z > 0)
        h = np.maximum(z, 0)
    logits = tensors["fc_out.weight"] @ h + tensors["fc_out.bias"]
    return logits, h, pattern


def _softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def reference_bag(tensors, arch, bag, mode):
    """Bag distribution, mean embedding and the concatenated activation pattern."""
    outs = [reference_instance(tensors, arch, x) for x in bag]
    logits = np.array([o[0] for o in outs])
    emb = np.mean([o[1] for o in outs], axis=0)
    if mode == "mean_then_softmax":
        probs = _softmax(logits.mean(axis=0))
    elif mode == "softmax_then_mean":
        probs = np.mean([_softmax(row) for row in logits], axis=0)
    else:
        m = np.max([_softmax(row) for row in logits], axis=0)
        probs = m / m.sum()
    pattern = [p for o in outs for p in o[2]]
    return probs, emb, pattern


def reference_loss(tensors, arch, bags, targets, mode):
    losses, patterns = [], []
    for bag, t in zip(bags, targets):
        p, _, pat = reference_bag(tensors, arch, bag, mode)
        losses.append(-np.sum(t * np.log(p + EPS)))
        patterns.extend(pat)
    return float(np.mean(losses)), patterns


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(params, bags, targets, mode, analytic, coords=None, h=1e-4):
    """Central differences of the reference loss at the given coordinates.

    Returns (max relative error, checked, skipped). A coordinate is skipped when
    the +h and -h evaluations see a different ReLU/max-pool activation pattern
    than the unperturbed point: the difference quotient then straddles a kink
    and does not estimate the derivative.
    """
    tensors = params.tensors
    _, base = reference_loss(tensors, params.arch, bags, targets, mode)
    worst, checked, skipped = 0.0, 0, 0
    for name, t in tensors.items():
        idxs = coords[name] if coords is not None else list(np.ndindex(t.shape))
        for idx in idxs:
            orig = t[idx]
            t[idx] = orig + h
            lp, pp = reference_loss(tensors, params.arch, bags, targets, mode)
            t[idx] = orig - h
            lm, pm = reference_loss(tensors, params.arch, bags, targets, mode)
            t[idx] = orig
            if not (_same_pattern(pp, base) and _same_pattern(pm, base)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            a = analytic[name][idx]
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-6))
            checked += 1
    return worst, checked, skipped


# --- metrics -------------------------------------------------------------------

def brute_ap(ids, scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    precisions, hits = [], 0
    for rank, i in enumerate(order, 1):
        if labels[i] == 1:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# --- selection -----------------------------------------------------------------

def exhaustive_top_k(ids, scores, k):
    """The unique k-subset whose every member strictly precedes every non-member by (score, id)."""
    keys = {i: (s, i) for i, s in zip(ids, scores)}
    found = []
    for subset in itertools.combinations(ids, k):
        rest = [i for i in ids if i not in subset]
        if not rest or max(keys[i] for i in subset) < min(keys[i] for i in rest):
            found.append(set(subset))
    assert len(found) == 1
    return found[0]
