"""How the mask-and-replace schedule moves probability mass, and what sampling undoes.

    python3 demos/01_schedule_and_posterior.py
"""
import numpy as np

from pianodiff import diffusion as D
from pianodiff.schedule import absorbing_view, build_schedule, cumulative_apply

STATES = ["off", "offset", "onset", "sustain", "reonset", "mask"]

s = build_schedule(100, gamma_bar_final=0.9)
print("step  keep   replace  mask")
for tau in (0, 10, 25, 50, 75, 100):
    print(f"{tau:4d}  {s.alpha_bar[tau]:.3f}  {s.beta_bar[tau]:.4f}   {s.gamma_bar[tau]:.3f}")

# an onset pixel after 50 steps of corruption
dist = cumulative_apply(s, 50, 2)
print("\nonset pixel at step 50:", ", ".join(f"{n}={p:.3f}" for n, p in zip(STATES, dist)))

# training posterior: a masked pixel may come back as anything it could have been replaced with
q = D.posterior(s, 50, 5, 2)
print("q(y49 | y50=mask, y0=onset):", np.round(q, 4))

# the absorbing view used at sampling time drops replacement, so a masked pixel either
# reveals its clean value or stays masked
a = absorbing_view(s)
q = D.posterior(a, 50, 5, 2)
print("absorbing view:             ", np.round(q, 4))
print(f"P(reveal) = {q[2]:.2f}, P(stay mask) = {q[5]:.2f}")
