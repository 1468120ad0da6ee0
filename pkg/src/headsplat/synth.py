"""Synthetic multi-view head sequences with exact ground truth.

Ground-truth images come from a z-buffered triangle rasterizer with
perspective-correct vertex-color interpolation.  Only the camera type is
shared with the splatting renderer; no Gaussian code is used here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .headmodel import HeadModel, HeadParams, evaluate, load_head_model, save_head_model
from .io import read_json, read_png, write_json, write_png
from .rasterizer import Camera


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class SceneSpec:
    seed: int = 0
    n_lat: int = 14
    n_lon: int = 28
    n_shape: int = 4
    n_expr: int = 10
    joints: int = 5
    n_cameras: int = 4
    ring_radius: float = 4.0
    ring_heights: tuple = (0.0, 0.35)
    azimuth_span: float = 90.0
    focal: float = 80.0
    timestamps: int = 20
    image_size: int = 64
    smoothness: float = 4.0
    expression_amplitude: float = 0.8
    corruption_sigma: float = 0.3
    heldout_view: int | None = -1
    heldout_fraction: float = 0.2
    background: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        if self.n_cameras < 1 or self.timestamps < 1:
            raise ValueError("need at least one camera and one timestamp")
        if self.corruption_sigma < 0:
            raise ValueError("corruption sigma must be non-negative")
        return self


@dataclass
class Scene:
    model: HeadModel
    params_true: list
    params_init: list
    cameras: list
    split: dict
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


# ---------------------------------------------------------------------------
# procedural head


def _uv_sphere(n_lat, n_lon):
    verts = [(0.0, 1.0, 0.0)]
    for i in range(1, n_lat + 1):
        th = np.pi * i / (n_lat + 1)
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append((np.sin(th) * np.sin(ph), np.cos(th), np.sin(th) * np.cos(ph)))
    verts.append((0.0, -1.0, 0.0))
    verts = np.array(verts)
    faces = []
    ring = lambda i, j: 1 + i * n_lon + (j % n_lon)
    for j in range(n_lon):
        faces.append((0, ring(0, j + 1), ring(0, j)))
    for i in range(n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, b, c))
            faces.append((b, d, c))
    last = len(verts) - 1
    for j in range(n_lon):
        faces.append((ring(n_lat - 1, j), ring(n_lat - 1, j + 1), last))
    return verts, np.array(faces)


def _bump(verts, center, width):
    return np.exp(-np.sum((verts - center) ** 2, axis=1) / (2 * width ** 2))


def _head_colors(unit):
    """Skin with hair, eyes, brows and mouth painted by canonical direction."""
    x, y, z = unit[:, 0], unit[:, 1], unit[:, 2]
    col = np.tile([0.85, 0.62, 0.5], (unit.shape[0], 1))
    col += 0.08 * np.stack([np.sin(3 * x), np.cos(2 * y), np.sin(2 * z)], 1)
    hair = (y > 0.62) | ((z < -0.2) & (y > -0.3))
    col[hair] = [0.25, 0.15, 0.08]
    for sx in (-0.33, 0.33):
        eye = _bump(unit, np.array([sx, 0.22, 0.92]), 0.12)
        col = col * (1 - eye[:, None]) + eye[:, None] * np.array([0.05, 0.05, 0.1])
        brow = _bump(unit, np.array([sx, 0.47, 0.84]), 0.08)
        col = col * (1 - brow[:, None]) + brow[:, None] * np.array([0.2, 0.1, 0.05])
    mouth = _bump(unit, np.array([0.0, -0.45, 0.89]), 0.15)
    col = col * (1 - mouth[:, None]) + mouth[:, None] * np.array([0.75, 0.1, 0.15])
    nose = _bump(unit, np.array([0.0, 0.0, 1.0]), 0.12)
    col = col * (1 - 0.3 * nose[:, None]) + 0.3 * nose[:, None] * np.array([0.95, 0.5, 0.45])
    return np.clip(col, 0.0, 1.0)


def _smooth_bases(rng, unit, verts, count, size, front_only):
    """Localized low-frequency displacement fields, zero column mean."""
    V = verts.shape[0]
    B = np.zeros((V, 3, count))
    for k in range(count):
        field_ = np.zeros((V, 3))
        for _ in range(2):
            c = rng.normal(size=3)
            if front_only:
                c[2] = abs(c[2]) + 1.0
            c /= np.linalg.norm(c)
            w = _bump(unit, c, rng.uniform(0.25, 0.45))
            direction = rng.normal(size=3)
            field_ += w[:, None] * direction[None, :]
        field_ -= field_.mean(axis=0, keepdims=True)
        field_ *= size / np.abs(field_).max()
        B[:, :, k] = field_
    return B


def generate_head(spec: SceneSpec, rng) -> HeadModel:
    unit, faces = _uv_sphere(spec.n_lat, spec.n_lon)
    radii = np.array([0.75, 0.95, 0.85])
    verts = unit * radii
    verts += (0.12 * _bump(unit, np.array([0.0, 0.0, 1.0]), 0.15))[:, None] * unit
    verts[:, 2] += 0.05 * _bump(unit, np.array([0.0, -0.7, 0.7]), 0.3)
    head_size = float(np.ptp(verts, axis=0).max())
    shape_basis = _smooth_bases(rng, unit, verts, spec.n_shape, 0.05 * head_size, False)
    expr_basis = _smooth_bases(rng, unit, verts, spec.n_expr, 0.08 * head_size, True)
    J = spec.joints
    rest = np.array([[0.0, -0.9, 0.0], [0.0, -0.35, 0.15], [0.0, 0.0, 0.0],
                     [-0.33, 0.22, 0.7], [0.33, 0.22, 0.7]])
    parents = np.array([-1, 0, 0, 2, 2])
    if J != 5:
        rest = np.stack([np.array([0.0, -0.9 + 1.8 * j / max(J - 1, 1), 0.0]) for j in range(J)])
        parents = np.arange(J) - 1
    falloff = np.full(J, 0.45)
    d2 = np.sum((verts[:, None, :] - rest[None, :, :]) ** 2, axis=2)
    logits = -d2 / (2 * falloff ** 2)
    W = np.exp(logits - logits.max(axis=1, keepdims=True))
    W /= W.sum(axis=1, keepdims=True)
    W = _f32(W)
    W /= W.sum(axis=1, keepdims=True)
    model = HeadModel(
        template_vertices=_f32(verts),
        faces=faces,
        shape_basis=_f32(shape_basis),
        expression_basis=_f32(expr_basis),
        vertex_offsets=np.zeros_like(verts),
        skinning_weights=_f32(W),
        joint_parents=parents,
        joint_rest_positions=_f32(rest),
        vertex_colors=_f32(_head_colors(unit)),
    )
    return model.validate()


def _smooth_track(rng, T, dims, smoothness, amplitude):
    """Random smooth trajectories: a few low-frequency sinusoids per dimension."""
    t = np.arange(T)[:, None]
    out = np.zeros((T, dims))
    for h in range(1, 4):
        freq = h / (smoothness * max(T, 2) / 4.0)
        out += rng.normal(size=dims) / h * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi, dims))
    return amplitude * out / 1.2


def corrupt_expressions(trajectory, sigma, seed):
    """Add i.i.d. N(0, sigma^2) noise to every expression coefficient.

    Returns ``(corrupted_params, rms)`` where ``rms`` is the root mean
    squared norm of the per-timestamp expression error.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    errs = []
    for p in trajectory:
        q = p.copy()
        if sigma > 0:
            q.expression = _f32(p.expression + sigma * rng.normal(size=p.expression.shape))
        out.append(q)
        errs.append(np.sum((q.expression - p.expression) ** 2))
    return out, float(np.sqrt(np.mean(errs)))


def ring_cameras(spec: SceneSpec, target):
    n = spec.n_cameras
    cams = []
    if n == 1:
        az = np.array([0.0])
    else:
        az = np.linspace(-spec.azimuth_span / 2, spec.azimuth_span / 2, n)
    heldout = None if spec.heldout_view is None else spec.heldout_view % n
    if heldout is not None and n > 2:
        # training cameras span the arc; the held-out one sits between the first two
        train_az = np.linspace(-spec.azimuth_span / 2, spec.azimuth_span / 2, n - 1)
        az = np.insert(train_az, heldout, 0.5 * (train_az[0] + train_az[1]))
    for i, a in enumerate(np.deg2rad(az)):
        h = spec.ring_heights[i % len(spec.ring_heights)]
        eye = target + np.array([spec.ring_radius * np.sin(a), h, spec.ring_radius * np.cos(a)])
        c = Camera.look_at(eye, target, [0.0, 1.0, 0.0], spec.focal, spec.focal,
                           spec.image_size, spec.image_size)
        cams.append(Camera(float(np.float32(c.fx)), float(np.float32(c.fy)), float(np.float32(c.cx)),
                           float(np.float32(c.cy)), c.R.astype(np.float32).astype(float),
                           _f32(c.t), c.width, c.height))
    return cams


def generate_scene(spec: SceneSpec) -> Scene:
    """Head model, true and corrupted parameter tracks, cameras and split."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    model = generate_head(spec, rng)
    T = spec.timestamps
    beta = _f32(rng.normal(size=spec.n_shape))
    psi = _smooth_track(rng, T, spec.n_expr, spec.smoothness, spec.expression_amplitude)
    rot = _smooth_track(rng, T, 3, spec.smoothness, 0.05)
    trans = _smooth_track(rng, T, 3, spec.smoothness, 0.03)
    jaw = np.abs(_smooth_track(rng, T, 1, spec.smoothness, 0.12))
    neck = _smooth_track(rng, T, 3, spec.smoothness, 0.05)
    truth = []
    for t in range(T):
        joints = np.zeros((spec.joints, 3))
        joints[0] = neck[t]
        if spec.joints > 1:
            joints[1, 0] = jaw[t, 0]
        truth.append(HeadParams(_f32(np.concatenate([rot[t], trans[t]])), _f32(joints), beta.copy(), _f32(psi[t])))
    init, _ = corrupt_expressions(truth, spec.corruption_sigma, spec.seed + 1)
    target = model.template_vertices.mean(axis=0)
    cams = ring_cameras(spec, target)
    n_held = int(round(T * spec.heldout_fraction)) if T > 1 else 0
    split = {
        "train_t": list(range(T - n_held)),
        "heldout_t": list(range(T - n_held, T)),
        "heldout_view": None if spec.heldout_view is None or spec.n_cameras < 2 else spec.heldout_view % spec.n_cameras,
    }
    return Scene(model, truth, init, cams, split, np.asarray(spec.background, float))


# ---------------------------------------------------------------------------
# independent mesh rasterizer


def render_ground_truth(model: HeadModel, params: HeadParams, cam: Camera, background=(0, 0, 0), mesh_vertices=None):
    """Z-buffered flat-lit mesh render with per-vertex colors."""
    verts = evaluate(model, params).vertices if mesh_vertices is None else mesh_vertices
    return rasterize_mesh(verts, model.faces, model.vertex_colors, cam, background)


def rasterize_mesh(verts, faces, colors, cam: Camera, background=(0, 0, 0)):
    H, W = cam.height, cam.width
    pc = verts @ cam.R.T + cam.t
    image = np.empty((H, W, 3))
    image[:] = np.asarray(background, float)
    zbuf = np.full((H, W), np.inf)
    Z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / Z + cam.cx
        v = cam.fy * pc[:, 1] / Z + cam.cy
    for f in faces:
        if np.any(Z[f] <= cam.near):
            continue
        x = u[f]
        y = v[f]
        xmin, xmax = int(np.ceil(x.min())), int(np.floor(x.max()))
        ymin, ymax = int(np.ceil(y.min())), int(np.floor(y.max()))
        xmin, ymin = max(xmin, 0), max(ymin, 0)
        xmax, ymax = min(xmax, W - 1), min(ymax, H - 1)
        if xmin > xmax or ymin > ymax:
            continue
        area = (x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])
        if abs(area) < 1e-12:
            continue
        yy, xx = np.mgrid[ymin:ymax + 1, xmin:xmax + 1]
        px, py = xx.ravel().astype(float), yy.ravel().astype(float)
        w0 = ((x[1] - px) * (y[2] - py) - (x[2] - px) * (y[1] - py)) / area
        w1 = ((x[2] - px) * (y[0] - py) - (x[0] - px) * (y[2] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        px, py = px[inside].astype(int), py[inside].astype(int)
        b = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
        inv_z = b @ (1.0 / Z[f])
        depth = 1.0 / inv_z
        closer = depth < zbuf[py, px]
        if not closer.any():
            continue
        px, py, b, depth = px[closer], py[closer], b[closer], depth[closer]
        persp = b / Z[f][None, :]
        persp /= persp.sum(axis=1, keepdims=True)
        zbuf[py, px] = depth
        image[py, px] = persp @ colors[f]
    return image


# ---------------------------------------------------------------------------
# dataset IO


@dataclass
class Dataset:
    model: HeadModel
    cameras: list
    params_true: list
    params_init: list
    frames: np.ndarray  # (T, N, H, W, 3)
    split: dict
    background: np.ndarray

    @property
    def timestamps(self):
        return self.frames.shape[0]

    @property
    def train_views(self):
        hv = self.split.get("heldout_view")
        return [i for i in range(len(self.cameras)) if i != hv]


def render_dataset(scene: Scene) -> Dataset:
    T, N = len(scene.params_true), len(scene.cameras)
    cam0 = scene.cameras[0]
    frames = np.empty((T, N, cam0.height, cam0.width, 3))
    for t, p in enumerate(scene.params_true):
        verts = evaluate(scene.model, p).vertices
        for i, cam in enumerate(scene.cameras):
            img = rasterize_mesh(verts, scene.model.faces, scene.model.vertex_colors, cam, scene.background)
            frames[t, i] = np.floor(np.clip(img, 0, 1) * 255 + 0.5) / 255.0
    return Dataset(scene.model, scene.cameras, scene.params_true, scene.params_init, frames,
                   scene.split, scene.background)


def write_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_head_model(ds.model, out / "head.ghm")
    write_json(out / "cams.json", [c.to_dict() for c in ds.cameras])
    write_json(out / "params_true.json", [p.to_dict() for p in ds.params_true])
    write_json(out / "params_init.json", [p.to_dict() for p in ds.params_init])
    write_json(out / "split.json", {**ds.split, "background": list(map(float, ds.background))})
    for t in range(ds.frames.shape[0]):
        for v in range(ds.frames.shape[1]):
            write_png(out / "frames" / f"t{t:03d}" / f"v{v:02d}.png", ds.frames[t, v])


def read_dataset(path) -> Dataset:
    root = Path(path)
    model = load_head_model(root / "head.ghm")
    cams = [Camera.from_dict(d) for d in read_json(root / "cams.json")]
    truth = [HeadParams.from_dict(d) for d in read_json(root / "params_true.json")]
    init = [HeadParams.from_dict(d) for d in read_json(root / "params_init.json")]
    split = read_json(root / "split.json")
    bg = np.asarray(split.pop("background", [0, 0, 0]), float)
    T, N = len(init), len(cams)
    frames = np.stack([np.stack([read_png(root / "frames" / f"t{t:03d}" / f"v{v:02d}.png") for v in range(N)])
                       for t in range(T)])
    return Dataset(model, cams, truth, init, frames, split, bg)


def spec_from_json(d: dict) -> SceneSpec:
    known = {k: v for k, v in d.items() if k in SceneSpec.__dataclass_fields__}
    if "ring_heights" in known:
        known["ring_heights"] = tuple(known["ring_heights"])
    if "background" in known:
        known["background"] = tuple(known["background"])
    return SceneSpec(**known)


def spec_to_json(spec: SceneSpec) -> dict:
    return asdict(spec)
