import numpy as np

from seunet import autodiff as ad


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(loss_fn, tensors):
    for t in tensors:
        t.zero_grad()
    with ad.Graph() as g:
        loss = loss_fn()
        g.backward(loss)
    return [t.grad.copy() for t in tensors]


def check_grads(loss_fn, tensors, h=1e-6, rtol=1e-4, atol=1e-8):
    got = analytic_grads(loss_fn, tensors)
    for t, a in zip(tensors, got):
        n = numeric_grad(lambda: float(loss_fn().data), t.data, h)
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol, err_msg=str(t))
