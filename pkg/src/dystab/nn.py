"""Parameter storage, checkpoint I/O and the encoder-decoder networks."""
from __future__ import annotations

import struct
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor, concat, div, relu, softmax

MAGIC = b"DYSTAB01"


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered name -> Tensor map plus per-parameter Adam state."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.state: dict[str, dict] = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def num_parameters(self):
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    @contextmanager
    def frozen(self):
        """Temporarily stop tracking gradients for these parameters."""
        for t in self._params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for t in self._params.values():
                t.requires_grad = True
                t.grad = np.zeros_like(t.data)

    def copy(self):
        """Deep copy of values; optimizer state is reset."""
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, t.data.copy())
        return out

    def load_from(self, other):
        if other.names() != self.names():
            raise CheckpointError("parameter names differ")
        for k, t in self._params.items():
            if other[k].shape != t.shape:
                raise CheckpointError(f"shape mismatch for {k}: {other[k].shape} vs {t.shape}")
            t.data = other[k].data.copy()
            t.zero_grad()
        self.state = {}

    def equals(self, other):
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self.names())

    # -- serialization ------------------------------------------------------
    def to_bytes(self):
        chunks = [MAGIC]
        for name, t in self._params.items():
            nb = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(nb)))
            chunks.append(nb)
            chunks.append(struct.pack("<I", t.ndim))
            chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
            chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf):
        if buf[:8] != MAGIC:
            raise CheckpointError("bad checkpoint magic")
        out, pos = cls(), 8
        while pos < len(buf):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            out.add(name, arr.astype(DTYPE))
        return out

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class EncoderDecoder:
    """U-shaped conv net: 4 stride-2 encoder blocks, 4 transposed-conv decoder
    blocks with skip connections, and a 1x1 output head.

    Spatial size must be divisible by 16.
    """

    def __init__(self, in_ch, out_ch, widths=(16, 32, 64, 64), seed=0, head_scale=1.0):
        rng = np.random.default_rng(seed)
        self.in_ch, self.out_ch, self.widths = in_ch, out_ch, tuple(widths)
        p = self.params = ParamStore()
        prev = in_ch
        for i, ch in enumerate(widths):
            p.add(f"enc{i}.w", _he(rng, (ch, prev, 3, 3), prev * 9))
            p.add(f"enc{i}.b", np.zeros(ch))
            prev = ch
        skips = [in_ch] + list(widths[:-1])
        outs = list(reversed(skips))
        outs[-1] = widths[0]
        for i, (skip, ch) in enumerate(zip(reversed(skips), outs)):
            p.add(f"up{i}.w", _he(rng, (prev, ch, 2, 2), prev))
            p.add(f"up{i}.b", np.zeros(ch))
            p.add(f"dec{i}.w", _he(rng, (ch, ch + skip, 3, 3), (ch + skip) * 9))
            p.add(f"dec{i}.b", np.zeros(ch))
            prev = ch
        p.add("head.w", _he(rng, (out_ch, prev, 1, 1), prev) * head_scale)
        p.add("head.b", np.zeros(out_ch))

    def logits(self, x):
        p = self.params
        feats = [x]
        h = x
        for i in range(len(self.widths)):
            h = relu(ops.conv2d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1))
            feats.append(h)
        for i in range(len(self.widths)):
            h = relu(ops.conv_transpose2d(h, p[f"up{i}.w"], p[f"up{i}.b"], stride=2))
            h = concat([h, feats[-2 - i]], axis=1)
            h = relu(ops.conv2d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=1, padding=1))
        return ops.conv2d(h, p["head.w"], p["head.b"])


class SegNet(EncoderDecoder):
    """Two-channel softmax segmenter; channel 1 is the foreground score."""

    def __init__(self, in_ch, widths=(16, 32, 64, 64), seed=0, input_scale=1.0, center=False,
                 standardize=False):
        super().__init__(in_ch, 2, widths, seed)
        self.input_scale = float(input_scale)
        self.center = center
        self.standardize = standardize

    def __call__(self, x):
        if self.center:
            # remove the dominant (median) value per channel, e.g. camera motion
            x = x - np.median(x.data, axis=(2, 3), keepdims=True).astype(DTYPE)
        if self.standardize:
            # per-image, per-channel zero mean and unit spread; inputs are constants
            d = x.data
            mu = d.mean(axis=(2, 3), keepdims=True)
            sd = d.std(axis=(2, 3), keepdims=True) + 0.05
            x = Tensor(((d - mu) / sd).astype(DTYPE))
        if self.input_scale != 1.0:
            x = x * self.input_scale
        return softmax(self.logits(x), axis=1)

    def foreground(self, x):
        return self(x)[:, 1]


class InpaintNet(EncoderDecoder):
    """Predicts a flow field from (mask, masked context flow, image).

    The output is a learned residual on top of a fixed normalized-convolution
    fill: Gaussian-weighted averages of the context flow at a few scales,
    divided by the same averages of the context indicator. The fill alone
    already extends neighbouring motion into the hole, so the network only
    has to learn corrections.
    """

    FILL_SIGMAS = (2.0, 6.0, 18.0)

    def __init__(self, widths=(16, 32, 64, 64), seed=0, flow_scale=4.0):
        super().__init__(6, 2, widths, seed, head_scale=0.1)
        self.flow_scale = float(flow_scale)
        self._blur = {}

    def _blurs(self, h, w):
        if (h, w) not in self._blur:
            self._blur[h, w] = [(ops.gaussian_matrix(h, s), ops.gaussian_matrix(w, s)) for s in self.FILL_SIGMAS]
        return self._blur[h, w]

    def fill(self, mask, context):
        h, w = mask.shape[2:]
        num = den = 0.0
        for ah, aw in self._blurs(h, w):
            num = num + ops.separable(context, ah, aw)
            den = den + ops.separable(1.0 - mask, ah, aw)
        return div(num, den, eps=1e-4)

    def __call__(self, mask, context, image):
        # mask (N,1,H,W), context (N,2,H,W) in pixels, image (N,3,H,W)
        x = concat([mask, context * (1.0 / self.flow_scale), image], axis=1)
        return self.fill(mask, context) + self.logits(x) * self.flow_scale
