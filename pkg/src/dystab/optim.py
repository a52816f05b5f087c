import numpy as np

from .tensor import DTYPE


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every parameter, then zero grads."""
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        st = params.state.get(name)
        if st is None:
            st = params.state[name] = {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data), "step": 0}
        st["step"] += 1
        st["m"] = (beta1 * st["m"] + (1 - beta1) * g).astype(DTYPE)
        st["v"] = (beta2 * st["v"] + (1 - beta2) * g * g).astype(DTYPE)
        mhat = st["m"] / (1 - beta1 ** st["step"])
        vhat = st["v"] / (1 - beta2 ** st["step"])
        t.data = (t.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(DTYPE)
        t.grad = np.zeros_like(t.data)
