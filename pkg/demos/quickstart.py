"""Generate a small scene, train the full pipeline briefly, render and evaluate.

    python demos/quickstart.py [out_dir]

Takes well under a minute on one core.
"""
import sys
from pathlib import Path

from headsplat import trainer as tr
from headsplat.evaluation import evaluate
from headsplat.io import write_png
from headsplat.synth import SceneSpec, generate_scene, render_dataset, write_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_out")
spec = SceneSpec(n_lat=10, n_lon=20, timestamps=10, image_size=48, focal=60.0)
ds = render_dataset(generate_scene(spec))
write_dataset(ds, out / "data")

cfg = tr.TrainConfig(iterations=300).with_ablation("full")
av, rows = tr.train(cfg, ds, log_path=out / "train.csv")
tr.save_checkpoint(av, out / "avatar.ckpt")
print(f"rgb loss {rows[0]['rgb']:.4f} -> {rows[-1]['rgb']:.4f}")

hv = ds.split["heldout_view"]
write_png(out / "heldout_t000.png", tr.render_novel_view(av, 0, ds.cameras[hv], view=hv))
for protocol in ("novel_view", "self_reenact"):
    rep = evaluate(av, ds, protocol)
    rep.write(out / f"{protocol}.json")
    print(f"{protocol:>14}: PSNR {rep.psnr:.2f} dB  SSIM {rep.ssim:.4f}")
