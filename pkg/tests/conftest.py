import numpy as np
import pytest

from mgpc.autograd import DiffTensor, Tape


def central_diff_check(fn, arrays, n_probe=5, h=1e-5, rtol=1e-4, seed=0):
    """Compare tape gradients of fn(leaves)->scalar against central
    differences at randomly probed coordinates of every input array.

    The relative-error denominator is floored at the finite-difference noise
    level for the loss magnitude, so coordinates whose true derivative is
    numerically invisible to central differences cannot dominate.
    """
    rng = np.random.default_rng(seed)
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = fn(leaves)
    lval = float(loss.data)
    grads = tape.backward(loss)
    atol = 1e-6 * (1.0 + abs(lval))
    worst = 0.0
    for ai, arr in enumerate(arrays):
        g = grads.get(leaves[ai].node_id)
        assert g is not None, f"argument {ai} received no gradient"
        flat = arr.reshape(-1)
        probes = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for j in probes:
            orig = flat[j]
            flat[j] = orig + h
            lp = float(fn([DiffTensor(a) for a in arrays]).data)
            flat[j] = orig - h
            lm = float(fn([DiffTensor(a) for a in arrays]).data)
            flat[j] = orig
            fd = (lp - lm) / (2.0 * h)
            an = float(g.reshape(-1)[j])
            rel = abs(fd - an) / max(abs(fd), abs(an), atol)
            worst = max(worst, rel)
            assert rel < rtol, (
                f"arg {ai} coord {j}: finite-diff {fd:.6e} vs tape {an:.6e} (rel {rel:.2e})")
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
