"""Procedural video generator: one textured sprite translating over a panning
textured background, with exact masks and flows.

Positions are tracked in image coordinates. The camera pan ``p`` shifts the
background by ``-p`` per frame; a sprite with world velocity ``v`` moves by
``v - p`` in the image.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .flow import read_flo, write_flo

SHAPES = ("disk", "square", "blob")
MOTION_MODES = ("moving", "static-after-k", "always-static")
N_FAMILIES = 8
KINDS = ("camouflage", "plain", "static_after_k", "always_static")
MAX_SPEED = 8.0
MARGIN = 2


class SpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_frames: int = 8
    shape: str = "disk"
    radius: float = 12.0
    sprite_texture: int = 1
    background_texture: int = 2
    start: tuple = (32.0, 32.0)
    velocities: list = field(default_factory=list)  # per transition (vx, vy)
    pan: tuple = (0.0, 0.0)
    camouflage: bool = False
    motion_mode: str = "moving"
    static_after: int = 0
    seed: int = 0

    def effective_velocities(self):
        v = np.zeros((self.n_frames - 1, 2))
        if self.velocities:
            v[:] = np.asarray(self.velocities, dtype=float).reshape(-1, 2)[: self.n_frames - 1]
        if self.motion_mode == "always-static":
            v[:] = 0
        elif self.motion_mode == "static-after-k":
            v[self.static_after:] = 0
        return v

    def extent(self):
        return self.radius * (1.4 if self.shape == "blob" else 1.0) * (np.sqrt(2) if self.shape == "square" else 1.0)

    def trajectory(self):
        """Image-space sprite centers (T, 2) and cumulative pan offsets (T, 2)."""
        v = self.effective_velocities()
        pan = np.asarray(self.pan, dtype=float)
        steps = v - pan
        centers = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)]) + np.asarray(self.start, dtype=float)
        offsets = np.arange(self.n_frames)[:, None] * pan[None]
        return centers, offsets

    def validate(self):
        if not (1 <= self.height <= 128 and 1 <= self.width <= 128):
            raise SpecError(f"image size {self.height}x{self.width} outside 1..128")
        if self.n_frames < 2:
            raise SpecError("need at least 2 frames")
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}")
        if self.motion_mode not in MOTION_MODES:
            raise SpecError(f"unknown motion mode {self.motion_mode!r}")
        for tex in (self.sprite_texture, self.background_texture):
            if not 1 <= tex <= N_FAMILIES:
                raise SpecError(f"texture family {tex} outside 1..{N_FAMILIES}")
        if self.velocities and len(self.velocities) < self.n_frames - 1:
            raise SpecError("fewer velocities than frame transitions")
        v = self.effective_velocities()
        if np.any(np.hypot(v[:, 0], v[:, 1]) > MAX_SPEED) or np.hypot(*self.pan) > MAX_SPEED:
            raise SpecError(f"velocity above {MAX_SPEED} px/frame")
        centers, _ = self.trajectory()
        r = self.extent()
        lo_x, hi_x = centers[:, 0].min() - r, centers[:, 0].max() + r
        lo_y, hi_y = centers[:, 1].min() - r, centers[:, 1].max() + r
        if lo_x < MARGIN or lo_y < MARGIN or hi_x > self.width - 1 - MARGIN or hi_y > self.height - 1 - MARGIN:
            raise SpecError("sprite trajectory leaves the image domain")

    def to_json(self):
        d = dataclasses.asdict(self)
        d["start"] = list(self.start)
        d["pan"] = list(self.pan)
        d["velocities"] = [list(map(float, v)) for v in self.velocities]
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["start"] = tuple(d["start"])
        d["pan"] = tuple(d["pan"])
        d["velocities"] = [tuple(v) for v in d.get("velocities", [])]
        return cls(**d)


# -- textures -----------------------------------------------------------------
class Texture:
    """Procedural RGB texture of one family, evaluated at continuous coords."""

    def __init__(self, family, rng, palette=None):
        self.family = family
        self.table = rng.random((64, 64))
        self.scale = rng.uniform(4.0, 7.0)
        self.freq = rng.uniform(0.35, 0.6)
        self.angle = rng.uniform(0, np.pi)
        self.phase = rng.uniform(0, 2 * np.pi, size=2)
        if palette is None:
            palette = rng.random((2, 3))
        self.palette = np.asarray(palette)

    def _noise(self, x, y, scale):
        gx, gy = x / scale, y / scale
        x0, y0 = np.floor(gx).astype(int), np.floor(gy).astype(int)
        fx, fy = gx - x0, gy - y0
        sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
        t = self.table
        n = t.shape[0]

        def at(i, j):
            return t[j % n, i % n]

        top = at(x0, y0) * (1 - sx) + at(x0 + 1, y0) * sx
        bot = at(x0, y0 + 1) * (1 - sx) + at(x0 + 1, y0 + 1) * sx
        return top * (1 - sy) + bot * sy

    def intensity(self, x, y):
        f, a = self.freq, self.angle
        xr = x * np.cos(a) + y * np.sin(a)
        yr = -x * np.sin(a) + y * np.cos(a)
        fam = self.family
        if fam == 1:
            v = self._noise(x, y, self.scale)
        elif fam == 2:
            v = self._noise(x, y, self.scale * 0.45)
        elif fam == 3:
            v = 0.5 + 0.5 * np.sin(f * yr + self.phase[0])
        elif fam == 4:
            v = 0.5 + 0.5 * np.sin(f * (x + y) / np.sqrt(2) + self.phase[0])
        elif fam == 5:
            v = 0.5 + 0.5 * np.tanh(3 * np.sin(f * xr + self.phase[0]) * np.sin(f * yr + self.phase[1]))
        elif fam == 6:
            s = np.sin(f * 1.3 * xr + self.phase[0]) * np.sin(f * 1.3 * yr + self.phase[1])
            v = 1.0 / (1.0 + np.exp(-8 * (s - 0.4)))
        elif fam == 7:
            v = 0.5 + 0.25 * (np.sin(f * xr + self.phase[0]) + np.sin(0.7 * f * yr + self.phase[1]))
        else:
            v = 0.5 + 0.5 * np.sin(f * xr + 4.0 * self._noise(x, y, self.scale * 1.5) + self.phase[0])
        return np.clip(v, 0.0, 1.0)

    def rgb(self, x, y):
        v = self.intensity(x, y)[..., None]
        return self.palette[0] + v * (self.palette[1] - self.palette[0])


def _shape_mask(spec, cx, cy, xx, yy, blob_phase):
    dx, dy = xx - cx, yy - cy
    r = spec.radius
    if spec.shape == "disk":
        return dx * dx + dy * dy <= r * r
    if spec.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    theta = np.arctan2(dy, dx)
    rr = r * (1 + 0.25 * np.sin(3 * theta + blob_phase[0]) + 0.15 * np.sin(5 * theta + blob_phase[1]))
    return dx * dx + dy * dy <= rr * rr


@dataclass
class VideoSequence:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    masks: np.ndarray  # (T, H, W) bool
    flows_fw: np.ndarray  # (T-1, H, W, 2): t -> t+1 on frame t
    flows_bw: np.ndarray  # (T-1, H, W, 2): t+1 -> t on frame t+1
    spec: SceneSpec
    seq_id: str = "seq"

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def pair_flow(self, t0, t1):
        """Exact flow from frame ``t0`` to frame ``t1`` (rigid construction)."""
        if t1 == t0 + 1:
            return self.flows_fw[t0]
        if t1 == t0 - 1:
            return self.flows_bw[t1]
        centers, offsets = self.spec.trajectory()
        out = np.empty(self.masks.shape[1:] + (2,), dtype=np.float32)
        out[:] = -(offsets[t1] - offsets[t0])
        out[self.masks[t0]] = centers[t1] - centers[t0]
        return out

    def informative(self, t0, t1):
        """True when the sprite moves relative to the background between frames."""
        v = self.spec.effective_velocities()
        lo, hi = min(t0, t1), max(t0, t1)
        return bool(np.hypot(*v[lo:hi].sum(axis=0)) > 0.5)


def generate_sequence(spec, seq_id="seq"):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    bg = Texture(spec.background_texture, rng)
    if spec.camouflage:
        sprite = Texture(spec.background_texture, rng, palette=bg.palette)
    else:
        sprite = Texture(spec.sprite_texture, rng)
    blob_phase = rng.uniform(0, 2 * np.pi, size=2)
    h, w, t = spec.height, spec.width, spec.n_frames
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    centers, offsets = spec.trajectory()
    frames = np.empty((t, h, w, 3), dtype=np.float32)
    masks = np.empty((t, h, w), dtype=bool)
    for i in range(t):
        cx, cy = centers[i]
        m = _shape_mask(spec, cx, cy, xx, yy, blob_phase)
        img = bg.rgb(xx + offsets[i, 0], yy + offsets[i, 1])
        img[m] = sprite.rgb(xx[m] - cx, yy[m] - cy)
        frames[i] = img
        masks[i] = m
    pan = np.asarray(spec.pan, dtype=np.float32)
    fw = np.empty((t - 1, h, w, 2), dtype=np.float32)
    bw = np.empty((t - 1, h, w, 2), dtype=np.float32)
    for i in range(t - 1):
        step = (centers[i + 1] - centers[i]).astype(np.float32)
        fw[i] = -pan
        fw[i][masks[i]] = step
        bw[i] = pan
        bw[i][masks[i + 1]] = -step
    return VideoSequence(np.clip(frames, 0, 1), masks, fw, bw, spec, seq_id)


# -- corpora ------------------------------------------------------------------
def _bounce(start, steps, lo, hi):
    """Image-space path from ``start`` applying ``steps``; components that would
    leave [lo, hi] are reflected. Returns the (possibly reflected) steps."""
    pos = np.array(start, dtype=float)
    out = np.array(steps, dtype=float)
    sign = np.ones(2)
    for t in range(len(out)):
        step = out[t] * sign
        nxt = pos + step
        for a in range(2):
            if nxt[a] < lo[a] or nxt[a] > hi[a]:
                sign[a] *= -1
                step[a] = -step[a]
        out[t] = step
        pos = pos + step
    return out


def random_spec(rng, kind, height=64, width=64, n_frames=8, families=None, seed=None):
    """Sample a valid SceneSpec of the given kind.

    Sprites start uniformly inside the frame and bounce off its edges, so the
    position in a frame says little about the direction of motion.
    """
    if kind not in KINDS:
        raise SpecError(f"unknown sequence kind {kind!r}")
    families = list(families or range(1, N_FAMILIES + 1))
    bg_tex = int(rng.choice(families))
    sp_tex = int(rng.choice(families))
    shape = str(rng.choice(SHAPES))
    size = min(height, width)
    scale = size / 64
    mode, static_after = "moving", 0
    if kind == "static_after_k":
        mode, static_after = "static-after-k", int(rng.integers(1, max(2, n_frames // 3) + 1))
    elif kind == "always_static":
        mode = "always-static"
    spec = SceneSpec(height=height, width=width, n_frames=n_frames, shape=shape,
                     radius=float(rng.uniform(0.14, 0.2) * size),
                     sprite_texture=sp_tex, background_texture=bg_tex,
                     camouflage=(kind == "camouflage"), motion_mode=mode, static_after=static_after,
                     seed=int(rng.integers(2 ** 31)) if seed is None else seed)
    speed = rng.uniform(1.5, 2.5) * scale
    ang = rng.uniform(0, 2 * np.pi)
    base = speed * np.array([np.cos(ang), np.sin(ang)])
    image_steps = base + rng.normal(0, 0.15, size=(n_frames - 1, 2)) * scale
    pan_mag = rng.uniform(0.5, 1.5) * scale
    pan_ang = rng.uniform(0, 2 * np.pi)
    pan = pan_mag * np.array([np.cos(pan_ang), np.sin(pan_ang)])
    for _ in range(50):
        r = spec.extent() + MARGIN + 0.5
        lo = np.array([r, r])
        hi = np.array([width - 1 - r, height - 1 - r])
        start = lo + rng.random(2) * np.maximum(hi - lo, 0)
        moving = np.ones(n_frames - 1, dtype=bool)
        if mode == "always-static":
            moving[:] = False
        elif mode == "static-after-k":
            moving[static_after:] = False
        steps = np.where(moving[:, None], image_steps, -pan[None])
        steps = _bounce(start, steps, lo, hi)
        # world velocity = image step + pan; static frames keep v = 0
        velocities = np.where(moving[:, None], steps + pan, 0.0)
        spec.start = tuple(map(float, start))
        spec.pan = tuple(map(float, pan))
        spec.velocities = [tuple(map(float, v)) for v in velocities]
        try:
            spec.validate()
            return spec
        except SpecError:
            # only static drift under pan can fail: shrink pan and sprite
            pan = pan * 0.8
            spec.radius *= 0.97
    spec.validate()
    return spec


def _counts(n, mix):
    props = np.array([float(mix.get(k, 0.0)) for k in KINDS])
    if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-6:
        raise SpecError(f"mix proportions must be non-negative and sum to 1, got {mix}")
    raw = props * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def generate_corpus(n_sequences, mix=None, seed=0, height=64, width=64, n_frames=8, families=None):
    """Deterministic list of sequences with kinds allotted by ``mix``.

    Kinds are interleaved in a seeded order, so any prefix or suffix (a
    train/val split, a growing subset) carries a mix of kinds.
    """
    mix = mix or {"camouflage": 1.0}
    counts = _counts(n_sequences, mix)
    kinds = [k for k, c in zip(KINDS, counts) for _ in range(c)]
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_sequences)
    kinds = [kinds[i] for i in np.random.default_rng(root.spawn(1)[0]).permutation(len(kinds))]
    corpus = []
    for i, (kind, ss) in enumerate(zip(kinds, children)):
        rng = np.random.default_rng(ss)
        spec = random_spec(rng, kind, height, width, n_frames, families, seed=int(ss.generate_state(1)[0] >> 1))
        corpus.append(generate_sequence(spec, seq_id=f"seq{i:03d}_{kind}"))
    return corpus


def split_corpus(corpus, train_fraction=0.8):
    n_train = int(round(len(corpus) * train_fraction))
    return corpus[:n_train], corpus[n_train:]


# -- dataset directories ------------------------------------------------------
def _write_png(path, arr):
    Image.fromarray(arr).save(path)


def save_sequence(seq, root):
    d = os.path.join(root, seq.seq_id)
    os.makedirs(d, exist_ok=True)
    for t in range(seq.n_frames):
        _write_png(os.path.join(d, f"frame_{t:04d}.png"), np.round(seq.frames[t] * 255).astype(np.uint8))
        _write_png(os.path.join(d, f"mask_{t:04d}.png"), seq.masks[t].astype(np.uint8) * 255)
    for t in range(seq.n_frames - 1):
        write_flo(seq.flows_fw[t], os.path.join(d, f"flow_fw_{t:04d}.flo"))
        write_flo(seq.flows_bw[t], os.path.join(d, f"flow_bw_{t:04d}.flo"))
    with open(os.path.join(d, "spec.json"), "w") as f:
        json.dump(seq.spec.to_json(), f, indent=2, sort_keys=True)


def save_corpus(corpus, root):
    os.makedirs(root, exist_ok=True)
    for seq in corpus:
        save_sequence(seq, root)


def load_sequence(path):
    with open(os.path.join(path, "spec.json")) as f:
        spec = SceneSpec.from_json(json.load(f))
    t = spec.n_frames
    frames = np.stack([np.asarray(Image.open(os.path.join(path, f"frame_{i:04d}.png")), dtype=np.float32) / 255
                       for i in range(t)])
    masks = np.stack([np.asarray(Image.open(os.path.join(path, f"mask_{i:04d}.png"))) > 127 for i in range(t)])
    fw = np.stack([read_flo(os.path.join(path, f"flow_fw_{i:04d}.flo")) for i in range(t - 1)])
    bw = np.stack([read_flo(os.path.join(path, f"flow_bw_{i:04d}.flo")) for i in range(t - 1)])
    return VideoSequence(frames, masks, fw, bw, spec, os.path.basename(os.path.normpath(path)))


def load_corpus(root):
    names = sorted(n for n in os.listdir(root) if os.path.isfile(os.path.join(root, n, "spec.json")))
    return [load_sequence(os.path.join(root, n)) for n in names]
