"""
The brush engine
================

An action tensor holds, per cell, a symmetric 2x2 matrix, a start logit,
a direction, a colour and a radius.  The medium turns the matrices into
projections, follows them from sampled starts, and composites hard-edged
strokes.  Here we hand-build a swirl and paint it.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from brushwork.medium import ACTION_CHANNELS, apply_medium, dump_plans, projection_field

OUT = Path(__file__).with_name("output")
OUT.mkdir(exist_ok=True)
n = 48

# %%
# A tangential field: at each cell the matrix t t^T has its top eigenvector
# along t, the direction perpendicular to the radius.
y, x = np.mgrid[:n, :n] - (n - 1) / 2
t = np.stack([-y, x], axis=-1)
t /= np.linalg.norm(t, axis=-1, keepdims=True) + 1e-9
action = np.zeros((n, n, ACTION_CHANNELS))
action[..., 0] = t[..., 0] ** 2
action[..., 1] = t[..., 0] * t[..., 1]
action[..., 2] = t[..., 1] ** 2
action[..., 4:6] = t

# %%
# Colour by angle, radius 1.5 px (softplus of 1.2), uniform start logits.
angle = np.arctan2(y, x)
action[..., 6] = 2 * np.cos(angle)
action[..., 7] = 2 * np.sin(angle)
action[..., 8] = -1.0
action[..., 9] = 1.2

p = projection_field(action[..., :3]).values
print("trace of P, min/max:", (p[..., 0] + p[..., 2]).min(), (p[..., 0] + p[..., 2]).max())

# %%
# Paint 60 strokes on a white canvas and look at a few stroke plans.
plans = []
canvas = apply_medium(action, np.ones((n, n, 3)), 60, np.random.default_rng(0), max_steps=24,
                      step_length=1.5, plans=plans).values
print(dump_plans(plans[:3]))

fig, ax = plt.subplots(1, 2, figsize=(8, 4))
ax[0].quiver(x[::4, ::4], -y[::4, ::4], t[::4, ::4, 0], -t[::4, ::4, 1])
ax[0].set_title("stroke direction field")
ax[1].imshow(canvas)
ax[1].set_title("60 strokes")
for a in ax:
    a.set_axis_off()
fig.savefig(OUT / "brush_engine.png", dpi=100)
