"""The median scaler and the three-channel manifold the refiner sees."""
import math

import numpy as np

from vdpp import geometry
from vdpp.geometry import ScalerParams

frame = np.broadcast_to(np.linspace(1.0, 3.0, 32), (32, 32)).copy()
m = geometry.median(frame)
for a, b in [(0.0, 0.0), (1.0, 0.0), (0.5, 0.2)]:
    s = geometry.scale_factor(m, ScalerParams.create(a, b)).item()
    print(f"a={a:+.1f} b={b:+.1f}  median {m:.3f} -> factor {s:.6f}")
print("the factor always stays inside", (round(math.exp(-1), 4), round(math.e, 4)))

man = geometry.build_manifold(frame, ratio=0.5)
print("manifold shape", man.shape)
# the ramp rises 2/31 per full-res pixel, so 4/31 per half-res pixel
print("gx interior:", man[1, 4, 2:6], "expected", 4.0 / 31)
print("gy is flat:", np.abs(man[2]).max())
