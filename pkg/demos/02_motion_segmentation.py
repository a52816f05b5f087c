"""
Motion segmentation without labels
==================================

A segmenter phi splits the flow field in two; an inpainter psi tries to
predict the flow inside each region from the flow outside it. phi wins when
the two regions move independently, which is exactly an object boundary.
"""
import os
import time

import numpy as np
from PIL import Image

from dystab.batching import FlowProvider
from dystab.config import TrainConfig
from dystab.dynamic import evaluate_dynamic, loss_A, make_phi, make_psi, predict_sequence, train_dynamic
from dystab.metrics import canonical_foreground
from dystab.synthdata import generate_corpus

OUT = os.environ.get("DEMO_OUT", "demo_out")
os.makedirs(OUT, exist_ok=True)

cfg = TrainConfig().updated(**{"data.height": 32, "data.width": 32, "dynamic.lr": 1e-3})
corpus = generate_corpus(12, {"camouflage": 1.0}, seed=1, height=32, width=32, n_frames=8)
train, val = corpus[:8], corpus[8:]

# %%
# Before training, psi's learned residual is noise and does worse than
# predicting zero, so both ratios sit at the cap of 1 used in training.
# Uncapped, the true mask is already the harder one to inpaint.
psi = make_psi(cfg, 2)
seq = train[0]
m = seq.masks[0].astype(np.float32)
u = [seq.flows_fw[0]]
for name, mask in (("true mask   ", m), ("shifted mask", np.roll(m, 4, axis=1))):
    capped = loss_A(mask, u, seq.frames[0], psi).terms["L_A"]
    raw = loss_A(mask, u, seq.frames[0], psi, bounded=False).terms["L_A"]
    print(f"L_A {name}  capped {capped:.3f}  uncapped {raw:.3f}")

# %%
# The adversarial game. Each epoch runs three phi ascent steps per psi step.
phi = make_phi(cfg, 1)
t0 = time.time()
rows = train_dynamic(train, phi, psi, cfg, epochs=15, val=val)
for r in rows[::3] + rows[-1:]:
    print(f"epoch {r['epoch']:2d}  L_A {r['L_A']:.3f}  L_TC {r['L_TC']:.3f}  val mIoU {r['val_miou']:.3f}")
print(f"{time.time() - t0:.0f}s")

# %%
# Camouflaged sprites are found from motion alone.
flows = FlowProvider(val)
print(evaluate_dynamic(phi, val, flows))
panels = []
for s, seq in enumerate(val):
    pred = canonical_foreground(predict_sequence(phi, seq, flows, s))
    panels.append(np.concatenate([seq.frames[0], np.repeat(seq.masks[0][..., None], 3, 2),
                                  np.repeat(pred[0][..., None], 3, 2)], axis=1))
img = (np.concatenate(panels, axis=0) * 255).astype(np.uint8)
Image.fromarray(img).resize((img.shape[1] * 4, img.shape[0] * 4), Image.NEAREST).save(
    os.path.join(OUT, "motion_masks.png"))
