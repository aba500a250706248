import numpy as np

# central-difference stencils: (offsets, weights), derivative = sum(w * f(x + o*h)) / h
_STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def central_diff(f, arrays, h=1e-5, order=2):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array, perturbed in place.

    ``order=4`` uses the five-point stencil, which tolerates a larger ``h`` and
    so suffers less from rounding in ``f``.
    """
    offsets, weights = _STENCILS[order]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            acc = 0.0
            for o, w in zip(offsets, weights):
                a[i] = old + o * h
                acc += w * f()
            a[i] = old
            g[i] = acc / h
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return worst
