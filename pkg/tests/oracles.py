"""Loop-based scalar reference implementations of the loss terms.

Plain Python floats and lists only; nothing from the package's tensor path.
"""
import math

EPS = 1e-24  # same squared-norm guard as the tensor path


def norm(v):
    return math.sqrt(sum(x * x for x in v) + EPS)


def mse(pairs):
    """pairs: list of (preds, targets, valid) flat lists."""
    total = 0.0
    for preds, targets, valid in pairs:
        errs = [(t - p) ** 2 for p, t, ok in zip(preds, targets, valid) if ok]
        total += sum(errs) / len(errs)
    return total / len(pairs)


def tokens(embeddings, ids, valid, normalize):
    out = []
    for e, p, ok in zip(embeddings, ids, valid):
        if not ok:
            continue
        e = list(e)
        if normalize:
            n = norm(e)
            e = [x / n for x in e]
        out.append((p, e))
    return out


def centers(toks):
    acc = {}
    for p, e in toks:
        if p not in acc:
            acc[p] = [[0.0] * len(e), 0]
        for k, x in enumerate(e):
            acc[p][0][k] += x
        acc[p][1] += 1
    return {p: [x / n for x in s] for p, (s, n) in acc.items()}


def phonemic_distinction(cents, margin=1.0):
    keys = sorted(cents)
    m = len(keys)
    if m < 2:
        return 0.0
    total = 0.0
    for i in keys:
        for j in keys:
            if i != j:
                total += norm([a - b for a, b in zip(cents[i], cents[j])]) * margin
    return -total / (m * (m - 1))


def ordinal_tightness(toks, scores, cents):
    total = 0.0
    for (p, e), y in zip(toks, scores):
        total += norm([a - b for a, b in zip(e, cents[p])]) * y
    return total / len(toks)
