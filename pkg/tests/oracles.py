"""Straight-line reference computations used as test oracles.

Pure Python loops and the math module only, so they share no code path
with the numpy implementation under test.
"""

import math


def mlp_logits(layers, x, activation="tanh"):
    act = math.tanh if activation == "tanh" else (lambda z: max(z, 0.0))
    h = [float(v) for v in x]
    for k, (w, b) in enumerate(layers):
        out = []
        for i in range(len(b)):
            z = float(b[i])
            for j in range(len(h)):
                z += float(w[i][j]) * h[j]
            out.append(z)
        h = out if k == len(layers) - 1 else [act(z) for z in out]
    return h


def softmax(v, tau=1.0):
    m = max(v)
    e = [math.exp((x - m) / tau) for x in v]
    s = sum(e)
    return [x / s for x in e]


def class_mean_relation(values, classes, n_classes, tau, keep=None):
    """Rows: softmax(mean of values over members of class c / tau); None for empty classes."""
    rows = []
    for c in range(n_classes):
        members = [i for i in range(len(values)) if classes[i] == c and (keep is None or keep[i])]
        if not members:
            rows.append(None)
            continue
        mean = [sum(values[i][j] for i in members) / len(members) for j in range(n_classes)]
        rows.append(softmax(mean, tau))
    return rows


def argmax_lowest(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def entropy(q):
    return -sum(v * math.log(max(v, 1e-8)) for v in q)


def symmetric_kl_loss(a_rows, b_rows):
    total, n = 0.0, 0
    for a, b in zip(a_rows, b_rows):
        if a is None or b is None:
            continue
        n += 1
        for x, y in zip(a, b):
            lx, ly = math.log(max(x, 1e-8)), math.log(max(y, 1e-8))
            total += x * (lx - ly) + y * (ly - lx)
    return total / n if n else 0.0


def pairwise_auc(scores, labels, n_classes):
    """Macro OVR AUC by comparing every positive/negative pair; ties count 1/2."""
    per_class = []
    for c in range(n_classes):
        pos = [scores[i][c] for i in range(len(labels)) if labels[i] == c]
        neg = [scores[i][c] for i in range(len(labels)) if labels[i] != c]
        if not pos or not neg:
            per_class.append(None)
            continue
        wins = 0.0
        for p in pos:
            for q in neg:
                wins += 1.0 if p > q else 0.5 if p == q else 0.0
        per_class.append(wins / (len(pos) * len(neg)))
    defined = [v for v in per_class if v is not None]
    return (sum(defined) / len(defined) if defined else None), per_class


def weighted_mean(values, weights):
    total = sum(weights)
    return sum(v * w for v, w in zip(values, weights)) / total
