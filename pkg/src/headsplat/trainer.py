"""Joint optimization of bound Gaussians, head parameters and the
correction / texture networks, plus rendering and reenactment drivers.

All trainable state is kept at float32 precision (stored in float64
arrays) so that checkpoints written as f32 reload to bit-identical state.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import binding as gb
from . import checkpoint as ck
from .correction import CorrectionNet, ExpressionBank, momentum_schedule
from .headmodel import HeadModel, HeadParams, evaluate, evaluate_backward, triangle_frames, triangle_frames_backward
from .losses import total_loss
from .nn import ParamStore
from .rasterizer import Camera, RenderOutput, render, render_backward, visible_set
from .texture import TextureField


class TrainingError(RuntimeError):
    """Raised when optimization hits a non-finite loss."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class ConfigError(ValueError):
    pass


def r32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


ABLATIONS = {
    "freeze": dict(freeze=True, single_view=False, multi_view=False, bank_on=False, texture_on=False),
    "single-view": dict(freeze=False, single_view=True, multi_view=False, bank_on=False, texture_on=False),
    "multi-view-o": dict(freeze=False, single_view=False, multi_view=True, bank_on=False, texture_on=False),
    "multi-view-m": dict(freeze=False, single_view=False, multi_view=True, bank_on=True, texture_on=False),
    "multi-view-t": dict(freeze=False, single_view=False, multi_view=True, bank_on=False, texture_on=True),
    "full": dict(freeze=False, single_view=False, multi_view=True, bank_on=True, texture_on=True),
}
ABLATIONS["multi-view"] = ABLATIONS["multi-view-o"]


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr_position: float = 5e-3
    lr_scale: float = 1.7e-2
    lr_translation: float = 1e-6
    lr_joints: float = 1e-5
    lr_expression: float = 1e-3
    lr_network: float = 1e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.05
    lr_sh: float = 1e-2
    lr_shape: float = 1e-6
    position_lr_final_ratio: float = 0.01
    opacity_reset_interval: int | None = 500
    opacity_reset_value: float = 0.01
    reanchor_start: int = 30
    reanchor_interval: int | None = 10
    reanchor_eps: float = 1.0
    momentum_start: float = 0.9
    momentum_end: float = 0.1
    seed: int = 0
    sh_degree: int = 0
    per_triangle: int = 1
    d_feat: int = 64
    hidden: int = 128
    triplane_resolution: int = 32
    triplane_channels: int = 8
    d_attn: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze: bool = False
    single_view: bool = False
    multi_view: bool = True
    bank_on: bool = False
    texture_on: bool = False

    def validate(self) -> "TrainConfig":
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be > 0")
        for name in ("opacity_reset_interval", "reanchor_interval"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1 (or null to disable)")
        if self.reanchor_start < 0:
            raise ConfigError("reanchor_start must be >= 0")
        if not 0 < self.position_lr_final_ratio <= 1:
            raise ConfigError("position_lr_final_ratio must be in (0, 1]")
        if sum([self.freeze, self.single_view, self.multi_view]) != 1:
            raise ConfigError("exactly one of freeze / single_view / multi_view must be set")
        if self.freeze and (self.bank_on or self.texture_on):
            raise ConfigError("the freeze arm has no correction path, so bank and texture must be off")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in 0..3")
        for name in ("momentum_start", "momentum_end"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")
        return self

    @property
    def corrects(self) -> bool:
        return not self.freeze

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return replace(self, **ABLATIONS[name]).validate()

    @property
    def position_gamma(self) -> float:
        return self.position_lr_final_ratio ** (1.0 / max(self.iterations, 1))

    def position_lr(self, iteration: int) -> float:
        return self.lr_position * self.position_gamma ** iteration

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


class Adam:
    """Adam with a separate step count per parameter key."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, key, param, grad, lr):
        g = np.asarray(grad, float)
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(g)
            self.v[key] = np.zeros_like(g)
            self.t[key] = 0
        self.t[key] += 1
        k = self.t[key]
        m = r32(self.beta1 * m + (1 - self.beta1) * g)
        v = r32(self.beta2 * self.v[key] + (1 - self.beta2) * g * g)
        self.m[key], self.v[key] = m, v
        mhat = m / (1 - self.beta1 ** k)
        vhat = v / (1 - self.beta2 ** k)
        return r32(param - lr * mhat / (np.sqrt(vhat) + self.eps))

    def reset_rows(self, key, rows):
        if key in self.m:
            self.m[key][rows] = 0.0
            self.v[key][rows] = 0.0


# ---------------------------------------------------------------------------
# model state


@dataclass
class Avatar:
    """Everything needed to render: the trained state plus its context."""

    config: TrainConfig
    model: HeadModel
    params: list  # HeadParams per timestamp (shape shared)
    cloud: gb.BoundGaussianCloud
    cameras: list
    split: dict
    background: np.ndarray
    corr: CorrectionNet | None = None
    tex: TextureField | None = None
    bank: ExpressionBank | None = None
    adam: Adam = field(default_factory=Adam)
    iteration: int = 0
    # per (timestamp, training view) corrections and fused features cached at the end of training
    cached_delta: np.ndarray | None = None
    cached_feature: np.ndarray | None = None

    @property
    def train_views(self):
        hv = self.split.get("heldout_view")
        return [i for i in range(len(self.cameras)) if i != hv]

    @property
    def timestamps(self):
        return len(self.params)

    def neutral_mesh(self):
        p = HeadParams.zeros(self.model)
        return evaluate(self.model, p)

    def canonical_points(self):
        """Gaussian means on the zero-parameter mesh (no gradient)."""
        mesh = self.neutral_mesh()
        return gb.to_world(self.cloud, triangle_frames(mesh), mesh).mean


def _round_model(model: HeadModel) -> HeadModel:
    kw = {}
    for f in fields(model):
        v = getattr(model, f.name)
        kw[f.name] = v if f.name in ("faces", "joint_parents") else r32(v)
    return HeadModel(**kw)


def init_avatar(config: TrainConfig, dataset) -> Avatar:
    config.validate()
    model = _round_model(dataset.model)
    params = [HeadParams(r32(p.rigid), r32(p.joint_rotations), r32(p.shape), r32(p.expression))
              for p in dataset.params_init]
    for p in params:
        p.check(model)
    shape0 = params[0].shape.copy()
    for p in params:
        p.shape = shape0
    mesh = evaluate(model, params[0])
    cloud = gb.init_bindings(mesh, config.per_triangle, config.seed, config.sh_degree)
    cloud = _round_cloud(cloud)
    av = Avatar(config, model, params, cloud, list(dataset.cameras), dict(dataset.split),
                r32(dataset.background),
                adam=Adam(config.adam_beta1, config.adam_beta2, config.adam_eps))
    n_views = len(av.train_views)
    if config.corrects:
        av.corr = CorrectionNet(model.n_expr, seed=config.seed + 1, d_feat=config.d_feat, hidden=config.hidden)
        _round_store(av.corr.store)
    if config.texture_on:
        canon = av.canonical_points()
        av.tex = TextureField(canon, d_feat=config.d_feat, resolution=config.triplane_resolution,
                              channels=config.triplane_channels, d_attn=config.d_attn,
                              hidden=config.hidden, seed=config.seed + 2)
        av.tex.bbox = (r32(av.tex.bbox[0]), r32(av.tex.bbox[1]))
        _round_store(av.tex.store)
    if config.bank_on:
        av.bank = ExpressionBank(n_views, model.n_expr, momentum=config.momentum_start)
    return av


def _round_cloud(c: gb.BoundGaussianCloud) -> gb.BoundGaussianCloud:
    return gb.BoundGaussianCloud(c.triangle_id.copy(), r32(c.barycentric), r32(c.local_offset), r32(c.log_scale),
                                 r32(c.rotation), r32(c.opacity_logit), r32(c.sh_coeffs))


def _round_store(store: ParamStore):
    for name in store.names():
        store[name] = r32(store[name])


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Step:
    """Caches of one forward pass, consumed by :func:`backward`."""

    t: int
    view: int
    psi: np.ndarray
    mesh: object
    frames: object
    world: object
    final: object
    output: RenderOutput
    tex_cache: dict | None = None


def expression_for(av: Avatar, t: int, correction) -> np.ndarray:
    psi = av.params[t].expression
    if correction is None:
        return psi.copy()
    return psi + correction


def forward(av: Avatar, t: int, cam: Camera, correction=None, feature=None, params: HeadParams | None = None,
            view: int = -1) -> Step:
    """Render timestamp ``t`` through ``cam`` with an optional expression
    correction and (texture arm) fused image feature."""
    p = av.params[t] if params is None else params
    psi = p.expression.copy() if correction is None else p.expression + correction
    q = HeadParams(p.rigid, p.joint_rotations, av.params[0].shape if params is None else p.shape, psi)
    mesh = evaluate(av.model, q)
    frames = triangle_frames(mesh)
    world = gb.to_world(av.cloud, frames, mesh)
    final = world
    tex_cache = None
    if av.tex is not None and feature is not None:
        tri_scale = frames.scale[av.cloud.triangle_id]
        res, tex_cache = av.tex.forward(feature, av.canonical_points(), tri_scale)
        final = gb.apply_residuals(world, *res)
    out = render(final, cam, av.background)
    return Step(t, view, psi, mesh, frames, world, final, out, tex_cache)


def backward(av: Avatar, step: Step, grad_image):
    """Propagate an image gradient; returns ``(CloudGrads, HeadParamGrads, d_feature)``."""
    wg = render_backward(step.output, grad_image)
    d_feature = None
    d_tri_scale = None
    if step.tex_cache is not None:
        wg, d_res = gb.apply_residuals_backward(step.final, wg)
        d_feature, d_tri_scale = av.tex.backward(step.tex_cache, d_res)
    cg, d_rot, d_scale, dV = gb.to_world_backward(step.world, wg)
    if d_tri_scale is not None:
        d_scale = d_scale + np.bincount(av.cloud.triangle_id, weights=d_tri_scale, minlength=d_scale.shape[0])
    dV = dV + triangle_frames_backward(step.frames, d_rot, d_scale)
    hg = evaluate_backward(av.model, step.mesh, dV)
    return cg, hg, d_feature


# ---------------------------------------------------------------------------
# training


def _regress_inputs(av: Avatar, frames_t, view: int):
    """Images fed to the correction network and the query index."""
    tv = av.train_views
    if av.config.single_view:
        return [frames_t[view]], 0
    return [frames_t[v] for v in tv], tv.index(view)


def regress(av: Avatar, frames_t, view: int):
    """``(delta, feature, cache)`` for one (timestamp, view).

    The correction uses ``view`` as the attention query.  The texture
    feature is timestamp-level: the mean fused feature over every query view.
    """
    images, qv = _regress_inputs(av, frames_t, view)
    if av.tex is None:
        delta, fused, cache = av.corr.regress(images, qv)
        return r32(delta), r32(fused), cache
    deltas, fused, cache = av.corr.regress_views(images)
    cache["qv"] = qv
    return r32(deltas[qv]), r32(fused.mean(axis=0)), cache


def regress_backward(av: Avatar, cache, d_delta, d_feature):
    if "qv" not in cache:
        av.corr.backward(cache, d_delta=d_delta, d_fused=d_feature)
        return
    Qn = len(cache["queries"])
    dd = np.zeros((Qn, av.model.n_expr))
    dd[cache["qv"]] = d_delta
    df = None if d_feature is None else np.tile(np.asarray(d_feature) / Qn, (Qn, 1))
    av.corr.backward(cache, d_delta=dd, d_fused=df)


LOG_FIELDS = ["iteration", "t", "view", "l1", "dssim", "rgb", "position", "scaling", "total", "visible_count"]


def train(config: TrainConfig, dataset, log_path=None, progress=None, avatar: Avatar | None = None):
    """Optimize an avatar on ``dataset``.  Returns ``(avatar, log_rows)``."""
    config.validate()
    av = init_avatar(config, dataset) if avatar is None else avatar
    train_t = list(av.split["train_t"])
    views = av.train_views
    if not train_t or not views:
        raise ConfigError("dataset split has no training timestamps or views")
    frames = dataset.frames
    rows = []
    total = config.iterations
    start = av.iteration
    for k in range(start, total):
        t = train_t[k % len(train_t)]
        view = views[k % len(views)]
        cam = av.cameras[view]
        target = frames[t, view]
        corr_cache = None
        correction = feature = None
        if config.corrects:
            delta, feature, corr_cache = regress(av, frames[t], view)
            if av.bank is not None:
                m = momentum_schedule(k, total, config.momentum_start, config.momentum_end)
                av.bank.update(t, views.index(view), delta, momentum=m)
                av.bank.entries[t] = r32(av.bank.entries[t])
                correction = r32(av.bank.correction(t))
            else:
                correction = delta
            if av.tex is None:
                feature = None
        step = forward(av, t, cam, correction, feature, view=view)
        vis = visible_set(step.output)
        report, lg = total_loss(step.output.image, target, av.cloud.local_offset, av.cloud.log_scale, vis)
        if not math.isfinite(report.total):
            diag = {"iteration": k, "t": t, "view": view, "report": asdict(report),
                    "psi": step.psi.tolist(), "nonfinite_image": int((~np.isfinite(step.output.image)).sum())}
            raise TrainingError(f"non-finite loss at iteration {k} (t={t}, view={view})", diag)
        row = report.as_row(k)
        row = {"iteration": k, "t": t, "view": view, **{f: row[f] for f in LOG_FIELDS[3:]}}
        rows.append(row)
        if progress is not None:
            progress(row)

        if av.corr is not None:
            av.corr.store.zero_grad()
        if av.tex is not None:
            av.tex.store.zero_grad()
        cg, hg, d_feature = backward(av, step, lg.image)
        if corr_cache is not None:
            # straight-through: the applied value may be the bank mean, the gradient reaches this view's regression
            regress_backward(av, corr_cache, hg.expression, d_feature)
        _apply_updates(av, k, t, cg, lg, hg)
        _maintenance(av, k, step.mesh, step.frames)
        av.iteration = k + 1
    if config.corrects:
        cache_corrections(av, frames)
    if log_path is not None:
        write_log(log_path, rows)
    return av, rows


def _apply_updates(av: Avatar, k, t, cg, lg, hg):
    c = av.config
    ad = av.adam
    cl = av.cloud
    cl.local_offset = ad.step("cloud.local_offset", cl.local_offset, cg.local_offset + lg.local_offset,
                              c.position_lr(k))
    cl.log_scale = ad.step("cloud.log_scale", cl.log_scale, cg.log_scale + lg.log_scale, c.lr_scale)
    rot = ad.step("cloud.rotation", cl.rotation, cg.rotation, c.lr_rotation)
    cl.rotation = r32(rot / np.linalg.norm(rot, axis=1, keepdims=True))
    cl.opacity_logit = ad.step("cloud.opacity_logit", cl.opacity_logit, cg.opacity_logit, c.lr_opacity)
    cl.sh_coeffs = ad.step("cloud.sh_coeffs", cl.sh_coeffs, cg.sh_coeffs, c.lr_sh)
    p = av.params[t]
    key = f"head.t{t:03d}"
    rigid = p.rigid.copy()
    rigid[:3] = ad.step(key + ".rotation", p.rigid[:3], hg.rigid[:3], c.lr_joints)
    rigid[3:] = ad.step(key + ".translation", p.rigid[3:], hg.rigid[3:], c.lr_translation)
    p.rigid = rigid
    p.joint_rotations = ad.step(key + ".joints", p.joint_rotations, hg.joint_rotations, c.lr_joints)
    if not c.freeze:
        p.expression = ad.step(key + ".expression", p.expression, hg.expression, c.lr_expression)
    shape = ad.step("head.shape", av.params[0].shape, hg.shape, c.lr_shape)
    for q in av.params:
        q.shape = shape
    for net in (av.corr, av.tex):
        if net is None:
            continue
        for name in net.store.names():
            net.store[name] = ad.step(name, net.store[name], net.store.grads[name], c.lr_network)


def _maintenance(av: Avatar, k, mesh, frames):
    c = av.config
    it = k + 1
    if c.reanchor_interval is not None and it >= c.reanchor_start and (it - c.reanchor_start) % c.reanchor_interval == 0:
        drift = np.linalg.norm(av.cloud.local_offset, axis=1) > c.reanchor_eps
        if drift.any():
            av.cloud = _round_cloud(gb.reanchor(av.cloud, mesh, c.reanchor_eps, frames))
            for key in ("cloud.local_offset", "cloud.rotation"):
                av.adam.reset_rows(key, drift)
    if c.opacity_reset_interval is not None and it % c.opacity_reset_interval == 0 and it < c.iterations:
        av.cloud = _round_cloud(gb.reset_opacity(av.cloud, c.opacity_reset_value))
        av.adam.reset_rows("cloud.opacity_logit", slice(None))


def cache_corrections(av: Avatar, frames):
    """Store per (training timestamp, training view) regressions for rendering without images."""
    views = av.train_views
    T = av.timestamps
    av.cached_delta = np.zeros((T, len(views), av.model.n_expr))
    av.cached_feature = np.zeros((T, len(views), av.config.d_feat))
    for t in av.split["train_t"]:
        for i, v in enumerate(views):
            d, f, _ = regress(av, frames[t], v)
            av.cached_delta[t, i] = d
            av.cached_feature[t, i] = f


def write_log(path, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# rendering drivers


def view_correction(av: Avatar, t: int, view: int):
    """Expression correction and fused feature used to render (t, view) after training."""
    if not av.config.corrects:
        return None, None
    if t not in av.split["train_t"]:
        raise ValueError(f"timestamp {t} has no stored correction; use reenact for unseen timestamps")
    if av.cached_delta is None:
        raise ValueError("avatar has no cached corrections")
    views = av.train_views
    if view in views:
        i = views.index(view)
        delta = av.cached_delta[t, i]
    else:
        delta = r32(av.cached_delta[t].mean(axis=0))
    if av.config.single_view:
        feat = av.cached_feature[t, i] if view in views else r32(av.cached_feature[t].mean(axis=0))
    else:
        feat = av.cached_feature[t, 0]  # timestamp-level, identical across views
    if av.bank is not None:
        delta = r32(av.bank.correction(t))
    return delta, (feat if av.tex is not None else None)


def _check_camera(cam):
    if not isinstance(cam, Camera):
        cam = Camera.from_dict(cam)
    return cam


def render_novel_view(av: Avatar, t: int, camera, view: int | None = None) -> np.ndarray:
    """Render training timestamp ``t`` through ``camera``.

    ``view`` selects whose stored correction to use; by default the
    camera is matched against the rig, and unknown cameras use the
    held-out rule (mean over training views).
    """
    if not 0 <= t < av.timestamps:
        raise ValueError(f"unknown timestamp {t}")
    cam = _check_camera(camera)
    if view is None:
        view = _match_camera(av, cam)
    delta, feat = view_correction(av, t, view)
    return forward(av, t, cam, delta, feat, view=view).output.image


def _match_camera(av, cam):
    for i, c in enumerate(av.cameras):
        if c.to_dict() == cam.to_dict():
            return i
    return -1


def mesh_for_view(av: Avatar, t: int, view: int) -> np.ndarray:
    """Vertices of the mesh used to render (t, view)."""
    delta, _ = view_correction(av, t, view)
    p = av.params[t]
    psi = p.expression if delta is None else p.expression + delta
    return evaluate(av.model, HeadParams(p.rigid, p.joint_rotations, p.shape, psi)).vertices


def reenact(av: Avatar, driving: list, cameras: list, driving_frames=None):
    """Render each driving parameter set through every camera.

    ``driving_frames[k]`` (optional) holds images of the driving frame k
    taken by the avatar's training cameras; when present the correction is
    regressed from them (averaged over query views), otherwise no
    correction is applied.  The avatar's own shape is always used.
    Returns an array (K, n_cameras, H, W, 3).
    """
    cams = [_check_camera(c) for c in cameras]
    out = []
    mean_feature = None
    if av.tex is not None and av.cached_feature is not None:
        tt = av.split["train_t"]
        mean_feature = r32(av.cached_feature[tt].reshape(-1, av.config.d_feat).mean(axis=0))
    for k, p in enumerate(driving):
        if not isinstance(p, HeadParams):
            p = HeadParams.from_dict(p)
        p = HeadParams(r32(p.rigid), r32(p.joint_rotations), av.params[0].shape.copy(), r32(p.expression))
        p.check(av.model)
        delta = feat = None
        if av.config.corrects and driving_frames is not None and driving_frames[k] is not None:
            delta, feat = regress_from_frames(av, driving_frames[k])
        elif av.tex is not None:
            feat = mean_feature
        if av.tex is None:
            feat = None
        row = [forward(av, 0, cam, delta, feat, params=p).output.image for cam in cams]
        out.append(np.stack(row))
    return np.stack(out) if out else np.zeros((0, len(cams), 0, 0, 3))


def regress_from_frames(av: Avatar, frames_t):
    """Correction and feature for an unseen timestamp, averaged over training-view queries."""
    ds, fs = [], []
    for v in av.train_views:
        d, f, _ = regress(av, frames_t, v)
        ds.append(d)
        fs.append(f)
    return r32(np.mean(ds, axis=0)), r32(np.mean(fs, axis=0))


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(av: Avatar, path) -> None:
    b = {}
    meta = {
        "config": av.config.to_dict(),
        "split": av.split,
        "cameras": [c.to_dict() for c in av.cameras],
        "iteration": av.iteration,
        "timestamps": av.timestamps,
        "adam_steps": av.adam.t,
        "bank_times": sorted(av.bank.entries) if av.bank is not None else [],
        "has_cache": av.cached_delta is not None,
        "model_dims": av.model.dims(),
    }
    b["meta"] = ck.json_block(meta)
    for f in fields(av.model):
        b[f"model.{f.name}"] = getattr(av.model, f.name)
    b["background"] = av.background
    for t, p in enumerate(av.params):
        for name in ("rigid", "joint_rotations", "expression"):
            b[f"params.t{t:03d}.{name}"] = getattr(p, name)
    b["params.shape"] = av.params[0].shape
    for f in fields(av.cloud):
        b[f"cloud.{f.name}"] = getattr(av.cloud, f.name)
    for net in (av.corr, av.tex):
        if net is not None:
            for name in net.store.names():
                b[f"net.{name}"] = net.store[name]
    if av.tex is not None:
        b["tex.bbox"] = np.stack(av.tex.bbox)
    if av.bank is not None:
        for t in sorted(av.bank.entries):
            b[f"bank.t{t:03d}"] = av.bank.entries[t]
    for key in sorted(av.adam.m):
        b[f"adam.m.{key}"] = av.adam.m[key]
        b[f"adam.v.{key}"] = av.adam.v[key]
    if av.cached_delta is not None:
        b["cache.delta"] = av.cached_delta
        b["cache.feature"] = av.cached_feature
    for name, arr in b.items():
        if name != "meta" and not np.array_equal(r32(arr), np.asarray(arr, float)):
            raise ck.CheckpointError(f"block {name} is not representable in f32")
    ck.write_blocks(path, b)


def load_checkpoint(path) -> Avatar:
    b = ck.read_blocks(path)
    if "meta" not in b:
        raise ck.CheckpointError("checkpoint has no metadata block")
    meta = ck.read_json_block(b["meta"])
    config = TrainConfig.from_dict(meta["config"])
    kw = {}
    for f in fields(HeadModel):
        arr = b[f"model.{f.name}"]
        kw[f.name] = arr.astype(np.int64) if f.name in ("faces", "joint_parents") else arr
    model = HeadModel(**kw).validate()
    shape = b["params.shape"]
    params = [HeadParams(b[f"params.t{t:03d}.rigid"], b[f"params.t{t:03d}.joint_rotations"], shape,
                         b[f"params.t{t:03d}.expression"]) for t in range(meta["timestamps"])]
    cf = {f.name: b[f"cloud.{f.name}"] for f in fields(gb.BoundGaussianCloud)}
    cf["triangle_id"] = cf["triangle_id"].astype(np.int64)
    cloud = gb.BoundGaussianCloud(**cf)
    cams = [Camera.from_dict(d) for d in meta["cameras"]]
    split = meta["split"]
    av = Avatar(config, model, params, cloud, cams, split, b["background"],
                adam=Adam(config.adam_beta1, config.adam_beta2, config.adam_eps), iteration=meta["iteration"])
    if config.corrects:
        store = ParamStore()
        for name in [k[4:] for k in b if k.startswith("net.corr.")]:  # file order = original order
            store.add(name, b["net." + name])
        av.corr = CorrectionNet(model.n_expr, d_feat=config.d_feat, hidden=config.hidden, store=store)
    if config.texture_on:
        store = ParamStore()
        for name in [k[4:] for k in b if k.startswith("net.tex.")]:  # file order = original order
            store.add(name, b["net." + name])
        bbox = b["tex.bbox"]
        av.tex = TextureField(None, d_feat=config.d_feat, d_attn=config.d_attn, hidden=config.hidden,
                              store=store, bbox=(bbox[0], bbox[1]))
    if config.bank_on:
        av.bank = ExpressionBank(len(av.train_views), model.n_expr, momentum=config.momentum_start)
        for t in meta["bank_times"]:
            av.bank.entries[int(t)] = b[f"bank.t{int(t):03d}"]
    for key, steps in meta["adam_steps"].items():
        av.adam.m[key] = b[f"adam.m.{key}"]
        av.adam.v[key] = b[f"adam.v.{key}"]
        av.adam.t[key] = int(steps)
    if meta["has_cache"]:
        av.cached_delta = b["cache.delta"]
        av.cached_feature = b["cache.feature"]
    return av


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
