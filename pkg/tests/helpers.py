"""Independent reference implementations used as test oracles."""
import numpy as np

from dcwp import autodiff as ad


def softmax_ce(logits, y):
    logits = np.asarray(logits, dtype=float)
    out = []
    for row, label in zip(logits, y):
        e = np.exp(row - row.max())
        out.append(-np.log(e[label] / e.sum()))
    return float(np.mean(out))


def supcon_loop(z, y, anchors, positives, tau, pool=None):
    """Double loop over anchors and positives; returns (loss, skipped)."""
    pool = sorted(set(anchors) | set(positives)) if pool is None else list(pool)
    total, skipped = 0.0, 0
    for i in sorted(set(anchors)):
        pos = [j for j in sorted(set(positives)) if j != i and y[j] == y[i]]
        if not pos:
            skipped += 1
            continue
        denom = sum(np.exp(z[i] @ z[a] / tau) for a in pool if a != i)
        total += np.mean([-np.log(np.exp(z[i] @ z[j] / tau) / denom) for j in pos])
    return total, skipped


def alignment_loop(h, y, conflicting, tau):
    z = h / np.linalg.norm(h, axis=1, keepdims=True)
    n = len(y)
    bc = [i for i in range(n) if conflicting[i]]
    ba = [i for i in range(n) if not conflicting[i]]
    a, s1 = supcon_loop(z, y, bc, range(n), tau)
    b, s2 = supcon_loop(z, y, ba, bc, tau)
    return a + b, s1 + s2


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def grad_error(fn, *arrays, h=1e-5):
    """Max relative error between reverse-mode and central-difference gradients
    of ``fn`` over every argument."""
    _, grads = ad.value_and_grad(fn, *arrays)
    worst = 0.0
    for k, x in enumerate(arrays):
        def f(a, k=k):
            args = [ad.Tensor(v) for v in arrays]
            args[k] = ad.Tensor(a)
            return fn(*args).item()
        fd = ad.finite_difference_grad(f, x, h)
        worst = max(worst, rel_err(grads[k], fd))
    return worst


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)
