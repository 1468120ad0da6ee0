"""Image metrics and the three evaluation protocols."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .trainer import Avatar, reenact, render_novel_view

PSNR_CAP = 99.0
PROTOCOLS = ("novel_view", "self_reenact", "self_reenact_novel_view")


class EvalError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise EvalError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; zero error reports the cap."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    a, b = _pair(a, b)
    return losses.ssim(a, b)


@dataclass
class EvalReport:
    protocol: str
    frames: list  # dicts: t, view, psnr, ssim
    config: dict = field(default_factory=dict)

    @property
    def psnr(self) -> float:
        return float(np.mean([f["psnr"] for f in self.frames])) if self.frames else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([f["ssim"] for f in self.frames])) if self.frames else float("nan")

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "psnr": self.psnr, "ssim": self.ssim, "lpips": "unsupported",
                "frame_count": len(self.frames), "frames": self.frames, "config": self.config}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["t", "view", "psnr", "ssim"], lineterminator="\n")
        w.writeheader()
        for f in self.frames:
            w.writerow({"t": f["t"], "view": f["view"], "psnr": repr(f["psnr"]), "ssim": repr(f["ssim"])})
        return buf.getvalue()

    def write(self, json_path, csv_path=None):
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        csv_path = json_path.with_suffix(".csv") if csv_path is None else Path(csv_path)
        csv_path.write_text(self.to_csv())
        return json_path, csv_path


def protocol_pairs(av: Avatar, dataset, protocol: str):
    """(timestamp, view) pairs evaluated by ``protocol``."""
    if protocol not in PROTOCOLS:
        raise EvalError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")
    split = dataset.split
    hv = split.get("heldout_view")
    train_views = [v for v in range(len(dataset.cameras)) if v != hv]
    if protocol == "novel_view":
        if hv is None:
            raise EvalError("dataset has no held-out view for novel_view")
        return [(t, hv) for t in split["train_t"]]
    if not split["heldout_t"]:
        raise EvalError("dataset has no held-out timestamps for self-reenactment")
    if protocol == "self_reenact":
        return [(t, v) for t in split["heldout_t"] for v in train_views]
    if hv is None:
        raise EvalError("dataset has no held-out view for self_reenact_novel_view")
    return [(t, hv) for t in split["heldout_t"]]


def _check_compatible(av: Avatar, dataset):
    if len(dataset.cameras) != len(av.cameras) or dataset.frames.shape[0] != av.timestamps:
        raise EvalError("checkpoint and dataset disagree on camera or timestamp count")
    if dataset.model.n_expr != av.model.n_expr or dataset.model.n_vertices != av.model.n_vertices:
        raise EvalError("checkpoint and dataset use different head models")


def evaluate(av: Avatar, dataset, protocol: str) -> EvalReport:
    """Deterministic PSNR/SSIM report for one protocol.

    Training timestamps render with the stored corrections; held-out
    timestamps are driven by the dataset's tracked (initial) parameters,
    with corrections regressed from their training-view frames.
    """
    pairs = protocol_pairs(av, dataset, protocol)
    _check_compatible(av, dataset)
    rows = []
    if protocol == "novel_view":
        for t, v in pairs:
            img = render_novel_view(av, t, dataset.cameras[v], view=v)
            rows.append(_row(t, v, img, dataset.frames[t, v]))
    else:
        by_t: dict = {}
        for t, v in pairs:
            by_t.setdefault(t, []).append(v)
        for t, views in by_t.items():
            imgs = reenact(av, [dataset.params_init[t]], [dataset.cameras[v] for v in views],
                           driving_frames=[dataset.frames[t]])[0]
            for img, v in zip(imgs, views):
                rows.append(_row(t, v, img, dataset.frames[t, v]))
    return EvalReport(protocol, rows, av.config.to_dict())


def _row(t, v, img, target):
    return {"t": int(t), "view": int(v), "psnr": psnr(img, target), "ssim": ssim(img, target)}
