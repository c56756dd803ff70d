"""Train a small refiner on flickering synthetic scenes and measure the gain."""
import sys

from vdpp import metrics, refiner, synth, trainer
from vdpp.geometry import ScalerParams

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150

corpus = []
for i in range(4):
    gt = synth.gen_scene(synth.SceneSpec(seed=i, H=64, W=64, T=32))
    corpus.append((synth.perturb_scale(gt, synth.PerturbSpec(lam=0.3, seed=100 + i)), gt))

model = refiner.init_model(refiner.RefinerConfig())
scaler = ScalerParams.create()
cfg = trainer.TrainConfig(steps=steps)


def show(row):
    if row["step"] % 25 == 0:
        print(f"step {row['step']:4d}  lr {row['lr']:.2e}  loss {row['loss_total']:.4f}")


trainer.train(model, scaler, corpus, cfg, progress=show)

held_gt = synth.gen_scene(synth.SceneSpec(seed=77, H=64, W=64, T=32))
held = synth.perturb_scale(held_gt, synth.PerturbSpec(lam=0.3, seed=7))
before = metrics.evaluate(held.frames, held_gt.frames)
after = metrics.evaluate(refiner.refine_sequence(held, scaler, model).frames, held_gt.frames)
print(f"held-out TGSE x100: {before.tgse_x100:.3f} -> {after.tgse_x100:.3f}")
print(f"held-out AbsRel:    {before.abs_rel:.4f} -> {after.abs_rel:.4f}")
a, b = scaler.values()
print(f"scaler a={a:.4f} b={b:.4f}")
