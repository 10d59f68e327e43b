"""Independent brute-force reference implementations used by the tests.

These deliberately use plain Python loops and no code from ``ordigrade``.
"""

import math


def confusion_loop(t, p, k):
    m = [[0] * k for _ in range(k)]
    for a, b in zip(t, p):
        m[a][b] += 1
    return m


def qwk_loop(t, p, k):
    n = len(t)
    o = confusion_loop(t, p, k)
    rows = [t.count(i) for i in range(k)]
    cols = [p.count(j) for j in range(k)]
    num = den = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            num += w * o[i][j]
            den += w * rows[i] * cols[j] / n
    if den == 0:
        return 1.0
    return 1.0 - num / den


def f1_macro_loop(t, p, k):
    scores = []
    for c in range(k):
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(t, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(t, p) if a == c and b != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(scores) / k


def sens_spec_ovr_loop(t, p, k):
    sens, spec = [], []
    for c in range(k):
        pos = [b for a, b in zip(t, p) if a == c]
        if not pos:
            continue
        neg = [b for a, b in zip(t, p) if a != c]
        sens.append(sum(1 for b in pos if b == c) / len(pos))
        spec.append(sum(1 for b in neg if b != c) / len(neg) if neg else 0.0)
    return sum(sens) / len(sens), sum(spec) / len(spec)


def sens_spec_binary_loop(t, p):
    tp = sum(1 for a, b in zip(t, p) if a > 0 and b > 0)
    fn = sum(1 for a, b in zip(t, p) if a > 0 and b == 0)
    tn = sum(1 for a, b in zip(t, p) if a == 0 and b == 0)
    fp = sum(1 for a, b in zip(t, p) if a == 0 and b > 0)
    return (tp / (tp + fn) if tp + fn else 0.0), (tn / (tn + fp) if tn + fp else 0.0)


def trimmed_mean_sorted(values, q):
    v = sorted(values)
    cut = int(math.floor(q * len(v)))
    kept = v[cut:len(v) - cut]
    return sum(kept) / len(kept)


def radam_reference(grads_seq, p0, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    """Scalar RAdam following the published algorithm, threshold rho_t > 4."""
    p, m, v = p0, 0.0, 0.0
    rho_inf = 2 / (1 - beta2) - 1
    traj = []
    for t, g in enumerate(grads_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        rho = rho_inf - 2 * t * beta2 ** t / (1 - beta2 ** t)
        if rho > 4:
            l = math.sqrt(v / (1 - beta2 ** t))
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            p = p - lr * r * m_hat / (l + eps)
        else:
            p = p - lr * m_hat
        p = p * (1 - lr * wd)
        traj.append(p)
    return traj


def sgd_reference(grads_seq, p0, lr, mu, wd=0.0):
    p, vel = p0, 0.0
    traj = []
    for g in grads_seq:
        vel = mu * vel + g
        p = p - lr * vel
        p = p * (1 - lr * wd)
        traj.append(p)
    return traj


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` w.r.t. every entry of the numpy array ``x`` (in place)."""
    import numpy as np

    grad = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        up = f()
        x.flat[i] = old - h
        down = f()
        x.flat[i] = old
        grad.flat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    import numpy as np

    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))
