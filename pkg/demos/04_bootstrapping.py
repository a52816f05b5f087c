"""
Bootstrapping the two models
============================

Motion-only training, then rounds of: distill chi from phi's trusted masks,
and train phi again with an extra reward for agreeing with chi. The fused
prediction follows phi where the flow moves and chi where nothing does.
"""
import os

from dystab.bootstrap import restore, run_bootstrap
from dystab.config import TrainConfig
from dystab.experiments import static_eval_set, static_metrics
from dystab.synthdata import generate_corpus

OUT = os.environ.get("DEMO_OUT", "demo_out")

cfg = TrainConfig().updated(**{
    "data.height": 32, "data.width": 32, "dynamic.lr": 1e-3, "dynamic.epochs": 10,
    "static.lr": 1e-4, "static.epochs": 10, "bootstrap.dynamic_epochs": 3, "bootstrap.rounds": 2,
    "bootstrap.dynamic_lr": 1e-4,
})
mix = {"plain": 0.5, "camouflage": 0.1, "static_after_k": 0.3, "always_static": 0.1}
# chi needs a few dozen scenes; with fewer its masks are poor and the
# reward for agreeing with them drags phi down.
corpus = generate_corpus(64, mix, seed=1, height=32, width=32, n_frames=8)
train, val = corpus[:48], corpus[48:]

state = run_bootstrap(train, cfg, val=val, out_dir=os.path.join(OUT, "bootstrap"))
print("round  dynamic  static  fused")
for m in state.metrics:
    print(f"{m['round']:5d}  {m['dynamic_miou']:.3f}    {m.get('static_miou', float('nan')):.3f}   "
          f"{m.get('fused_miou', float('nan')):.3f}")

# %%
# chi needs no motion at all: it segments objects that never move.
_, _, chi = restore(state, cfg)
still = [s for s in val if s.spec.motion_mode == "always-static"] or val
images, gts = static_eval_set(still)
if images:
    print("chi on frames of static sequences:", round(static_metrics(chi, images, gts)["miou"], 3))
