"""
Comparing stroke directions
===========================

The direction distance compares the smoothed structure fields of two
images, built from gradients rotated by 90 degrees.  It ignores contrast
and sign, so it only cares about where edges run.
"""
import numpy as np

from brushwork.perception import dirdist, structure_field

n = 64
y, x = np.mgrid[:n, :n].astype(float)
vertical = np.cos(0.5 * x)[..., None]
horizontal = np.cos(0.5 * y)[..., None]

# %%
# Scale and sign do not matter.
for c in (0.5, 2.0, -1.0):
    print(f"dirdist(f, {c:+.1f} f) = {float(dirdist(vertical, c * vertical).values):.2e}")

# %%
# Orthogonal ripples sit at the far end of the range.
print("vertical vs horizontal:", float(dirdist(vertical, horizontal).values))

# %%
# Rotating the ripples moves the distance smoothly between the two.
for deg in (0, 15, 30, 45, 60, 90):
    th = np.deg2rad(deg)
    rotated = np.cos(0.5 * (np.cos(th) * x + np.sin(th) * y))[..., None]
    print(f"{deg:3d} deg: {float(dirdist(vertical, rotated).values):.3f}")

# %%
# For vertical ripples the structure field points along y, the way the stripes run.
r = structure_field(vertical).values
print("mean (r11, r12, r22):", r.reshape(-1, 3).mean(axis=0).round(4))
