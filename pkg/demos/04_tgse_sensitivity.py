"""How TGSE and AbsRel respond to frame-wise multiplicative flicker of strength lambda."""
import numpy as np

from vdpp import synth

gt = np.ones((64, 64, 64))
rows = synth.sweep(gt, synth.DEFAULT_GRID, seeds_per_point=20)
print(f"{'lambda':>6} {'TGSE':>10} {'2l^2/3':>10} {'AbsRel':>8} {'l/2':>6}")
for r in rows:
    lam = r["lambda"]
    print(f"{lam:6.2f} {r['tgse_mean']:10.5f} {2 * lam**2 / 3:10.5f} {r['absrel_mean']:8.4f} {lam / 2:6.3f}")

tg = [r["tgse_mean"] for r in rows]
print("strictly increasing:", all(b > a for a, b in zip(tg, tg[1:])))
