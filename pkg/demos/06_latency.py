"""Depth-to-video latency of a fresh refiner at two resolutions."""
import numpy as np

from vdpp import metrics, refiner
from vdpp.geometry import ScalerParams

model = refiner.init_model()
scaler = ScalerParams.create(requires_grad=False)
for size in (64, 128):
    r = metrics.bench_d2v(model, scaler, np.ones((16, size, size)), warmup=1, reps=5)
    print(f"{size}x{size}: {r.ms_per_frame:7.2f} ms/frame  {r.fps:8.1f} FPS  (k={r.window})")
