"""Randomized analytic-vs-central-difference checks for every differentiable stage.

Each ``check_*`` builds one seeded random configuration that stays away
from the pipeline's non-differentiable points (culling, alpha clamp,
transmittance cut-off, ReLU / floor kinks) and returns a dict mapping a
gradient name to its relative error.
"""
from __future__ import annotations

import numpy as np

from . import binding as gb
from . import losses, nn
from .correction import CorrectionNet
from .geometry import quat_to_rotmat, quat_to_rotmat_backward
from .headmodel import HeadParams, Mesh, evaluate, evaluate_backward, triangle_frames, triangle_frames_backward
from .rasterizer import Camera, render, render_backward
from .testing import random_head_model, rel_err
from .texture import TextureField, Triplane, sample_triplane, sample_triplane_backward

H_STEP = 1e-5


def fd(f, x, idx=None, h=H_STEP):
    """Central differences of ``f()`` w.r.t. the flat entries ``idx`` of ``x`` (all by default)."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if idx is None else np.asarray(idx)
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def _pick(rng, size, k):
    return np.arange(size) if size <= k else np.sort(rng.choice(size, k, replace=False))


# ---------------------------------------------------------------------------


def check_rasterizer(seed: int) -> dict:
    """Render gradients for means, rotations (quaternion), scales, opacity and SH."""
    rng = np.random.default_rng(seed)
    G = int(rng.integers(1, 6))
    degree = int(rng.choice([0, 1, 2, 3]))
    K = (degree + 1) ** 2
    W = H = 12
    cam = Camera.look_at(np.array([0.3, -0.2, -6.0]) * rng.uniform(0.9, 1.1), np.zeros(3), [0, -1, 0],
                         30.0, 30.0, W, H)
    # depths well separated so the sort order never flips under perturbation
    mean = rng.normal(scale=0.15, size=(G, 3))
    mean[:, 2] = np.linspace(-1.0, 1.0, G) + rng.uniform(-0.1, 0.1, G) if G > 1 else 0.0
    quat = rng.normal(size=(G, 4))
    log_scale = np.log(rng.uniform(1.6, 2.4, size=(G, 3)))
    opacity_logit = rng.uniform(-1.5, 1.0, G)  # sigmoid <= 0.73 keeps alpha below the clamp
    sh = 0.1 * rng.normal(size=(G, K, 3))
    sh[:, 0, :] = rng.uniform(0.5, 1.5, (G, 3))
    bg = rng.random(3)
    Wimg = rng.normal(size=(H, W, 3))

    def build():
        return gb.WorldGaussians(mean, quat_to_rotmat(quat), np.exp(log_scale), opacity_logit, sh, np.arange(G))

    def loss():
        out = render(build(), cam, bg)
        return float(np.sum(out.image * Wimg))

    world = build()
    out = render(world, cam, bg)
    if len(out.state["splats"]) != G or np.any(out.max_contribution <= 0):
        raise AssertionError("rasterizer check scene culled a splat")
    g = render_backward(out, Wimg)
    d_quat = quat_to_rotmat_backward(quat, g.rotation)
    d_log_scale = g.scale * np.exp(log_scale)
    res = {}
    for name, x, a in (("mean", mean, g.mean), ("rotation", quat, d_quat), ("log_scale", log_scale, d_log_scale),
                       ("opacity_logit", opacity_logit, g.opacity_logit), ("sh", sh, g.sh_coeffs)):
        res[f"raster.{name}"] = rel_err(a.ravel(), fd(loss, x))
    return res


def check_headmodel(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    J = int(rng.integers(1, 6))
    model = random_head_model(rng, V=int(rng.integers(6, 16)), F=8, n_shape=3, n_expr=4, J=J)
    p = HeadParams(rng.normal(scale=0.5, size=6), rng.normal(scale=0.4, size=(J, 3)),
                   rng.normal(size=3), rng.normal(size=4))
    Wv = rng.normal(size=(model.n_vertices, 3))

    def loss():
        return float(np.sum(evaluate(model, p).vertices * Wv))

    mesh = evaluate(model, p)
    g = evaluate_backward(model, mesh, Wv)
    return {f"head.{n}": rel_err(getattr(g, a).ravel(), fd(loss, getattr(p, a)))
            for n, a in (("rigid", "rigid"), ("joints", "joint_rotations"), ("shape", "shape"),
                         ("expression", "expression"))}


def _random_mesh(rng, F=6):
    V = F + 2
    verts = rng.normal(size=(V, 3))
    faces = np.array([rng.choice(V, 3, replace=False) for _ in range(F)])
    return verts, faces


def check_binding(seed: int) -> dict:
    """Frames -> world composition and the texture residual composition."""
    rng = np.random.default_rng(seed)
    verts, faces = _random_mesh(rng)
    G = 8
    cloud = gb.BoundGaussianCloud(
        triangle_id=rng.integers(0, faces.shape[0], G), barycentric=rng.dirichlet(np.ones(3), G),
        local_offset=rng.normal(scale=0.3, size=(G, 3)), log_scale=rng.normal(scale=0.3, size=(G, 3)),
        rotation=rng.normal(size=(G, 4)), opacity_logit=rng.normal(size=G), sh_coeffs=rng.normal(size=(G, 1, 3)))
    d_mean = 0.1 * rng.normal(size=(G, 3))
    d_scale = 0.1 * rng.normal(size=(G, 3))
    d_rot = 0.1 * rng.normal(size=(G, 4))
    d_op = 0.1 * rng.normal(size=G)
    wm, wr, ws, wo = (rng.normal(size=s) for s in ((G, 3), (G, 3, 3), (G, 3), (G,)))

    def world_all():
        mesh = Mesh(verts, faces)
        fr = triangle_frames(mesh)
        w = gb.to_world(cloud, fr, mesh)
        out = gb.apply_residuals(w, d_mean, d_scale, d_rot, d_op)
        return mesh, fr, w, out

    def loss():
        out = world_all()[3]
        return float(np.sum(out.mean * wm) + np.sum(out.rotation * wr) + np.sum(out.scale * ws)
                     + np.sum(out.opacity_logit * wo))

    mesh, fr, w, out = world_all()
    grads = gb.WorldGrads(wm, wr, ws, wo, np.zeros_like(out.sh_coeffs))
    g_in, (gdm, gds, gdr, gdo) = gb.apply_residuals_backward(out, grads)
    cg, d_frot, d_fscale, dV = gb.to_world_backward(w, g_in)
    dV = dV + triangle_frames_backward(fr, d_frot, d_fscale)
    return {
        "binding.vertices": rel_err(dV.ravel(), fd(loss, verts)),
        "binding.local_offset": rel_err(cg.local_offset.ravel(), fd(loss, cloud.local_offset)),
        "binding.log_scale": rel_err(cg.log_scale.ravel(), fd(loss, cloud.log_scale)),
        "binding.rotation": rel_err(cg.rotation.ravel(), fd(loss, cloud.rotation)),
        "binding.opacity_logit": rel_err(cg.opacity_logit.ravel(), fd(loss, cloud.opacity_logit)),
        "residual.mean": rel_err(gdm.ravel(), fd(loss, d_mean)),
        "residual.scale": rel_err(gds.ravel(), fd(loss, d_scale)),
        "residual.rotation": rel_err(gdr.ravel(), fd(loss, d_rot)),
        "residual.opacity": rel_err(np.asarray(gdo).ravel(), fd(loss, d_op)),
    }


def check_triplane(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    n_f, C = int(rng.integers(3, 9)), int(rng.integers(1, 5))
    tri = Triplane(rng.normal(size=(3, n_f, n_f, C)), -np.ones(3), np.ones(3))
    pts = rng.uniform(-1.2, 1.2, size=(10, 3))
    Wf = rng.normal(size=(10, 3 * C))

    def loss():
        return float(np.sum(sample_triplane(tri, pts) * Wf))

    g = sample_triplane_backward(tri, pts, Wf)
    idx = _pick(rng, tri.planes.size, 60)
    return {"triplane.planes": rel_err(g.ravel()[idx], fd(loss, tri.planes, idx))}


def check_networks(seed: int) -> dict:
    """Attention, MLP, conv encoder, correction net and the texture fusion/decoder."""
    rng = np.random.default_rng(seed)
    res = {}
    d, n = int(rng.integers(2, 7)), int(rng.integers(1, 5))
    q, K, V = rng.normal(size=d), rng.normal(size=(n, d)), rng.normal(size=(n, d))
    wa = rng.normal(size=d)

    def att():
        return float(nn.softmax_attention(q, K, V)[0] @ wa)

    _, c = nn.softmax_attention(q, K, V)
    dq, dK, dV = nn.softmax_attention_backward(c, wa)
    res["attention.query"] = rel_err(dq, fd(att, q))
    res["attention.keys"] = rel_err(dK.ravel(), fd(att, K))
    res["attention.values"] = rel_err(dV.ravel(), fd(att, V))

    store = nn.ParamStore()
    nn.add_mlp(store, "m", [5, 7, 6, 3], rng, zero_last=False)
    x = rng.normal(size=(4, 5))
    wo = rng.normal(size=(4, 3))

    def mlp_loss():
        return float(np.sum(nn.mlp(store, "m", x)[0] * wo))

    store.zero_grad()
    out, c = nn.mlp(store, "m", x)
    dx = nn.mlp_backward(store, c, wo)
    res["mlp.input"] = rel_err(dx.ravel(), fd(mlp_loss, x))
    for name in store.names():
        res[f"mlp.{name}"] = rel_err(store.grads[name].ravel(), fd(mlp_loss, store.values[name]))

    # correction network end to end on tiny images, both outputs
    n_expr = 3
    net = CorrectionNet(n_expr, seed=seed, d_feat=8, hidden=6)
    for name in net.store.names("corr.mlp"):
        if net.store[name].any() == 0:
            net.store[name] = rng.normal(scale=0.3, size=net.store[name].shape)
    imgs = [rng.random((8, 8, 3)) for _ in range(int(rng.integers(1, 4)))]
    qv = int(rng.integers(0, len(imgs)))
    wd, wf = rng.normal(size=n_expr), rng.normal(size=8)

    def corr_loss():
        delta, fused, _ = net.regress(imgs, qv)
        return float(delta @ wd + fused @ wf)

    net.store.zero_grad()
    _, _, cache = net.regress(imgs, qv)
    d_imgs = net.backward(cache, wd, wf)
    for name in net.store.names():
        idx = _pick(rng, net.store[name].size, 12)
        res[f"correction.{name}"] = rel_err(net.store.grads[name].ravel()[idx],
                                            fd(corr_loss, net.store.values[name], idx))
    res["correction.image"] = rel_err(d_imgs[qv].ravel(), fd(corr_loss, imgs[qv]))

    # texture attention + decoder with non-zero heads
    pts = rng.uniform(-1, 1, size=(6, 3))
    field = TextureField(pts, d_feat=5, resolution=4, channels=2, d_attn=4, hidden=6, seed=seed)
    for name in field.store.names():
        if not field.store[name].any():
            field.store[name] = rng.normal(scale=0.5, size=field.store[name].shape)
    F = rng.normal(size=5)
    tri_scale = rng.uniform(0.5, 2.0, 6)
    ws = [rng.normal(size=s) for s in ((6, 3), (6, 3), (6, 4), (6,))]

    def tex_loss():
        r, _ = field.forward(F, pts, tri_scale)
        return float(sum(np.sum(a * b) for a, b in zip(r, ws)))

    field.store.zero_grad()
    _, c = field.forward(F, pts, tri_scale)
    dF, dts = field.backward(c, ws)
    res["texture.feature"] = rel_err(dF, fd(tex_loss, F))
    res["texture.tri_scale"] = rel_err(dts, fd(tex_loss, tri_scale))
    for name in field.store.names():
        idx = _pick(rng, field.store[name].size, 12)
        res[f"texture.{name}"] = rel_err(field.store.grads[name].ravel()[idx],
                                         fd(tex_loss, field.store.values[name], idx))
    return res


def check_losses(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    Hh, Ww = int(rng.integers(12, 20)), int(rng.integers(12, 20))
    a, b = rng.random((Hh, Ww, 3)), rng.random((Hh, Ww, 3))

    def f_rgb():
        return losses.rgb_loss(a, b)[0]

    _, _, _, g = losses.rgb_loss(a, b, with_grad=True)
    idx = _pick(rng, a.size, 60)
    res = {"loss.rgb": rel_err(g.ravel()[idx], fd(f_rgb, a, idx))}

    def f_ssim():
        return losses.ssim(a, b)

    res["loss.ssim"] = rel_err(losses.ssim_grad(a, b)[1].ravel()[idx], fd(f_ssim, a, idx))
    # offsets and scales kept away from the eps floors where the loss has kinks
    off = rng.choice([-1, 1], size=(9, 3)) * rng.uniform(1.2, 2.0, (9, 3))
    off[::3] *= 0.4
    _, gp = losses.position_loss(off)
    res["loss.position"] = rel_err(gp.ravel(), fd(lambda: losses.position_loss(off)[0], off))
    sc = rng.uniform(0.7, 1.5, (9, 3))
    sc[::2] *= 0.5
    _, gs = losses.scaling_loss(sc)
    res["loss.scaling"] = rel_err(gs.ravel(), fd(lambda: losses.scaling_loss(sc)[0], sc))
    return res


FAMILIES = {
    "rasterizer": check_rasterizer,
    "headmodel": check_headmodel,
    "binding": check_binding,
    "triplane": check_triplane,
    "networks": check_networks,
    "losses": check_losses,
}


def run_suite(seeds_per_family: int = 17):
    """Run every family over ``seeds_per_family`` seeds; returns a list of (family, seed, name, err)."""
    rows = []
    for fam, fn in FAMILIES.items():
        for seed in range(seeds_per_family):
            for name, err in fn(seed).items():
                rows.append((fam, seed, name, err))
    return rows
