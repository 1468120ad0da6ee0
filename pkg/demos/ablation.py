"""Train every ablation arm on the default synthetic scene and print a results table.

    python demos/ablation.py [iterations] [arm,arm,...]

Each arm takes about three minutes at 2000 iterations on one core.
"""
import sys
import time

from headsplat import trainer as tr
from headsplat.evaluation import evaluate
from headsplat.synth import SceneSpec, generate_scene, render_dataset

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
arms = sys.argv[2].split(",") if len(sys.argv) > 2 else ["freeze", "single-view", "multi-view-o",
                                                         "multi-view-m", "multi-view-t", "full"]
ds = render_dataset(generate_scene(SceneSpec()))
print(f"{'arm':>14} {'novel PSNR':>11} {'SSIM':>7} {'reenact PSNR':>13} {'min':>5}")
for arm in arms:
    t0 = time.perf_counter()
    av, _ = tr.train(tr.TrainConfig(iterations=iterations).with_ablation(arm), ds)
    nv = evaluate(av, ds, "novel_view")
    sr = evaluate(av, ds, "self_reenact")
    print(f"{arm:>14} {nv.psnr:11.3f} {nv.ssim:7.4f} {sr.psnr:13.3f} {(time.perf_counter() - t0) / 60:5.1f}",
          flush=True)
