"""
Which motion masks to trust
===========================

When the object stops, its flow looks like the background and phi's mask is
meaningless. The inpainting loss of a mask tells the two cases apart: it is
high only when inside and outside really move differently. A static,
single-image model chi is then distilled from the trusted masks.
"""
import numpy as np

from dystab.batching import FlowProvider
from dystab.config import TrainConfig
from dystab.dynamic import make_phi, make_psi, train_dynamic
from dystab.experiments import confidence_histograms, static_eval_set, static_metrics
from dystab.static import make_chi, pseudo_labels, train_static
from dystab.synthdata import generate_corpus

cfg = TrainConfig().updated(**{"data.height": 32, "data.width": 32, "dynamic.lr": 1e-3,
                               "static.lr": 1e-4})
mix = {"plain": 0.5, "static_after_k": 0.3, "always_static": 0.2}
corpus = generate_corpus(24, mix, seed=2, height=32, width=32, n_frames=8)
train, val = corpus[:20], corpus[20:]
flows = FlowProvider(train)

phi, psi = make_phi(cfg, 0), make_psi(cfg, 1)
train_dynamic(train, phi, psi, cfg, epochs=12, flows=flows)

# %%
# Confidence of every frame's mask, split by whether the sprite moved.
labels = pseudo_labels(phi, psi, train, cfg, flows)
h = confidence_histograms(labels, train, bins=10)
for name in ("informative", "uninformative"):
    print(f"{name:14s} n={h[name]['count']:3d} mean {h[name]['mean']:.2f}  {h[name]['hist']}")
print(f"gap {h['gap']:.2f}")

# %%
# Distill chi. Frames whose confidence is below delta get zero weight.
chi = make_chi(cfg, 2)
_, rows = train_static(train, phi, psi, chi, 1, cfg, epochs=8, flows=flows)
print("frames switched off per epoch:", rows[-1]["gated_off"], "of", len(labels))
images, gts = static_eval_set(val)
print("chi on held-out frames:", {k: round(v, 3) for k, v in static_metrics(chi, images, gts).items()
                                  if not np.isnan(v)})
