"""Frame-pair sampling and flow lookup shared by the training loops."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import covisible, estimate_flow
from .tensor import Tensor


def to_nchw(arr):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


class FlowProvider:
    """Flow between any two frames of a corpus, exact or estimated (cached)."""

    def __init__(self, corpus, source="gt", flow_cfg=None):
        if source not in ("gt", "estimated"):
            raise ValueError(f"unknown flow source {source!r}")
        self.corpus = corpus
        self.source = source
        self.flow_cfg = flow_cfg
        self._cache = {}
        self._covis = {}

    def __call__(self, s, t0, t1):
        key = (s, t0, t1)
        if key not in self._cache:
            seq = self.corpus[s]
            if self.source == "gt":
                f = seq.pair_flow(t0, t1)
            else:
                fc = self.flow_cfg
                kw = {} if fc is None else dict(levels=fc.levels, iters=fc.iters, alpha=fc.alpha)
                f = estimate_flow(seq.frames[t0], seq.frames[t1], **kw)
            self._cache[key] = np.asarray(f, dtype=np.float32)
        return self._cache[key]

    def covisible(self, s, t0, t1):
        key = (s, t0, t1)
        if key not in self._covis:
            kw = {} if self.flow_cfg is None else dict(a=self.flow_cfg.occ_a, b=self.flow_cfg.occ_b)
            self._covis[key] = covisible(self(s, t0, t1), self(s, t1, t0), **kw)
        return self._covis[key]


@dataclass
class Pair:
    seq: int
    t0: int
    t1: int
    extra: tuple  # further partner frames supplying flow samples for t0


def _partners(t, n_frames, max_interval):
    return [k for k in range(max(0, t - max_interval), min(n_frames, t + max_interval + 1)) if k != t]


def nearest_partners(t, n_frames, count):
    """The ``count`` closest other frames, nearest first (ties: forward first)."""
    order = sorted((k for k in range(n_frames) if k != t), key=lambda k: (abs(k - t), k < t))
    return order[:count]


def sample_pairs(corpus, rng, max_interval=3, flow_samples=1):
    """One epoch of anchor frames, each with a random partner within the window.

    Every frame of every sequence serves as anchor once; order is shuffled.
    """
    pairs = []
    for s, seq in enumerate(corpus):
        n = seq.n_frames
        for t in range(n):
            cand = _partners(t, n, max_interval)
            t1 = int(cand[rng.integers(len(cand))])
            rest = [k for k in nearest_partners(t, n, flow_samples) if k != t1][: max(0, flow_samples - 1)]
            pairs.append(Pair(s, t, t1, tuple(rest)))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


@dataclass
class PairBatch:
    image: np.ndarray  # (N, 3, H, W) anchor frames
    image2: np.ndarray  # (N, 3, H, W) partner frames
    u12: np.ndarray  # (N, H, W, 2)
    u21: np.ndarray
    extra: list  # list over samples of (N, H, W, 2)
    covis: np.ndarray  # (N, H, W) bool
    gt: np.ndarray  # (N, H, W) bool masks of anchors

    def flow_tensor(self, which="u12"):
        return Tensor(to_nchw(getattr(self, which)))

    def flows(self):
        return [self.u12] + self.extra


def assemble(pairs, corpus, flows):
    u12 = np.stack([flows(p.seq, p.t0, p.t1) for p in pairs])
    u21 = np.stack([flows(p.seq, p.t1, p.t0) for p in pairs])
    n_extra = min(len(p.extra) for p in pairs)
    extra = [np.stack([flows(p.seq, p.t0, p.extra[k]) for p in pairs]) for k in range(n_extra)]
    return PairBatch(
        image=to_nchw(np.stack([corpus[p.seq].frames[p.t0] for p in pairs])),
        image2=to_nchw(np.stack([corpus[p.seq].frames[p.t1] for p in pairs])),
        u12=u12, u21=u21, extra=extra,
        covis=np.stack([flows.covisible(p.seq, p.t0, p.t1) for p in pairs]),
        gt=np.stack([corpus[p.seq].masks[p.t0] for p in pairs]),
    )
