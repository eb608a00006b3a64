"""Central finite differences for tape-built scalar functions."""
from __future__ import annotations

import numpy as np

from ingrain import autodiff as ad

STEP = 1e-5


def rel_err(a, b, floor: float = 1e-7) -> float:
    """||a - b|| / max(||a||, ||b||, floor), Frobenius norms."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps an array like ``x`` to a float."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f(x)
        x[i] = old - step
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def check_op(build, inputs: list[np.ndarray], seed: int = 0):
    """Compare analytic and numeric gradients of sum(build(*xs) * R) for a fixed random R.

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = build(*leaves)
    R = rng.normal(size=out.shape)
    loss = ad.sum_all(ad.mul(out, ad.const(R)))
    grads = tape.backward(loss)
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(v, k=k):
            args = [ad.const(v) if j == k else ad.const(inputs[j]) for j in range(len(inputs))]
            return float(np.sum(build(*args).value * R))
        worst = max(worst, rel_err(grads.of(leaves[k]), numeric_grad(f, x)))
    return worst


def params_gradcheck(loss_fn, params, names=None, step: float = STEP) -> dict[str, float]:
    """Relative error per parameter of ``loss_fn(P) -> 1x1 DiffArray`` over a ModelParams.

    ``loss_fn`` receives a dict of lifted parameters (on a tape) or of constants.
    """
    tape = ad.Tape()
    loss = loss_fn(params.lift(tape))
    analytic = tape.backward(loss).as_dict()
    out = {}
    for name in names or list(params):
        base = params[name]

        def f(v, name=name):
            saved = params[name].copy()
            params[name] = v
            val = float(loss_fn(params.constants()).value[0, 0])
            params[name] = saved
            return val

        out[name] = rel_err(analytic[name], numeric_grad(f, base.copy(), step))
    return out
