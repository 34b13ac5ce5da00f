import numpy as np

from kd3a.nn import ModelParams


def finite_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def params_fd(model, loss_of_model, h: float = 1e-4) -> ModelParams:
    """Finite-difference gradient over every trainable array of a float64 model."""
    arrays = {n: np.array(a) for n, a in model.params.items()}
    grads = {}
    for name, arr in arrays.items():
        if name.endswith(("running_mean", "running_var")):
            grads[name] = np.zeros_like(arr)
            continue

        def f(name=name, arr=arr):
            model.params = model.params.replace({name: arr})
            return loss_of_model(model)

        grads[name] = finite_difference(f, arr, h)
        model.params = model.params.replace({name: arr})
    return ModelParams.from_items((n, grads[n]) for n in model.params.names)


def random_simplex(rng, c, size=None, concentration=1.0):
    return rng.dirichlet(np.full(c, concentration), size=size)


def brute_vote(rows, g):
    """Plain-Python reference: gate, vote by summed scores, average the agreeing survivors."""
    rows = [list(map(float, r)) for r in rows]
    c = len(rows[0])

    def top(r):
        best = 0
        for j in range(1, c):
            if r[j] > r[best]:
                best = j
        return best

    survivors = [r for r in rows if max(r) >= g]
    if survivors:
        sums = [sum(r[j] for r in survivors) for j in range(c)]
        cls = top(sums)
        agree = [r for r in survivors if top(r) == cls]
        if agree:
            return [sum(r[j] for r in agree) / len(agree) for j in range(c)], float(len(agree))
    return [sum(r[j] for r in rows) / len(rows) for j in range(c)], 0.001


def brute_quality(coalition, g):
    """Sum over samples of n_p * max p, coalition given as a list of (N, C) teacher outputs."""
    if not coalition:
        return 0.0
    total = 0.0
    for i in range(len(coalition[0])):
        p, n_p = brute_vote([t[i] for t in coalition], g)
        total += n_p * max(p)
    return total


def brute_cf_alpha(preds, g, sizes, target_size):
    """Leave-one-out contributions and the resulting K+1 weights, written out directly."""
    teachers = list(preds)
    full = brute_quality(teachers, g)
    cf = [full - brute_quality(teachers[:k] + teachers[k + 1:], g) for k in range(len(teachers))]
    a_ext = target_size / (sum(sizes) + target_size)
    score = [n * max(v, 0.0) for n, v in zip(sizes, cf)]
    if sum(score) == 0:
        score = list(sizes)
    return cf, [(1 - a_ext) * s / sum(score) for s in score] + [a_ext]
