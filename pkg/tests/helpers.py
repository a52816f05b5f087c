"""Shared test utilities: finite-difference gradient checks and tiny fixtures."""
import numpy as np

from dystab.config import TrainConfig
from dystab.tensor import Tensor, precision


def gradcheck(fn, arrays, n_dirs=4, h=1e-5, seed=0):
    """Largest relative error between analytic and central-difference
    directional derivatives of scalar ``fn(*tensors)``, evaluated in float64."""
    with precision(np.float64):
        return _gradcheck(fn, arrays, n_dirs, h, seed)


def _gradcheck(fn, arrays, n_dirs, h, seed):
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward()
    grads = [t.grad.astype(np.float64) for t in ts]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        norm = np.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum((g * d).sum() for g, d in zip(grads, dirs))
        plus = fn(*[Tensor(a + h * d) for a, d in zip(arrays, dirs)]).item()
        minus = fn(*[Tensor(a - h * d) for a, d in zip(arrays, dirs)]).item()
        numeric = (plus - minus) / (2 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-2)
        worst = max(worst, err)
    return worst


def tiny_cfg(size=16, **flat):
    base = {"data.height": size, "data.width": size, "dynamic.widths": [4, 8, 8, 8],
            "static.widths": [4, 8, 8, 8], "dynamic.batch_size": 4, "static.batch_size": 4}
    base.update(flat)
    return TrainConfig().updated(**base)


def two_motion_flow(h=16, w=16, inside=(2.0, -1.0), outside=(-0.5, 0.5), box=(4, 12, 5, 11)):
    """Piecewise-constant flow with a rectangular object and its mask."""
    y0, y1, x0, x1 = box
    mask = np.zeros((h, w), dtype=np.float32)
    mask[y0:y1, x0:x1] = 1
    flow = np.empty((h, w, 2), dtype=np.float32)
    flow[:] = outside
    flow[mask > 0] = inside
    return mask, flow


class StubInpainter:
    """psi replacement returning a fixed flow field, or ``scale`` times the
    true field, independent of its inputs."""

    def __init__(self, flow, scale=1.0):
        f = np.asarray(flow, dtype=np.float32)
        self.field = f[None] if f.ndim == 3 else f
        self.scale = scale

    def __call__(self, mask, context, image):
        return Tensor(self.field.transpose(0, 3, 1, 2) * self.scale)


def param_fn(net, name, loss):
    """Wrap ``loss()`` as a function of one network parameter, for gradcheck."""
    def fn(t):
        old = net.params._params[name]
        net.params._params[name] = t
        try:
            return loss()
        finally:
            net.params._params[name] = old
    return fn
