import csv
import copy

import numpy as np
import pytest

from headsplat import trainer as tr
from headsplat.binding import sigmoid
from headsplat.checkpoint import read_blocks


def small(**kw):
    base = dict(iterations=20, d_feat=16, hidden=16, triplane_resolution=8, triplane_channels=4, d_attn=8,
                reanchor_start=5, reanchor_interval=5, opacity_reset_interval=None)
    base.update(kw)
    return tr.TrainConfig(**base).validate()


def test_config_validation():
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig(iterations=-1).validate()
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig(lr_position=0).validate()
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig(freeze=True, multi_view=True).validate()
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig(freeze=True, multi_view=False, bank_on=True).validate()
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig().with_ablation("nonsense")


def test_config_dict_roundtrip():
    c = small().with_ablation("full")
    assert tr.TrainConfig.from_dict(c.to_dict()) == c
    assert c.bank_on and c.texture_on and c.multi_view


def test_position_lr_schedule():
    c = tr.TrainConfig(iterations=1000)
    assert c.position_lr(0) == c.lr_position
    assert c.position_lr(1000) == pytest.approx(0.01 * c.lr_position, rel=1e-9)
    assert c.position_lr(500) == pytest.approx(0.1 * c.lr_position, rel=1e-9)


def test_adam_first_step_and_per_key_counts():
    ad = tr.Adam()
    p = np.array([1.0, -1.0, 0.5])
    g = np.array([3.0, -0.01, 0.0])
    out = ad.step("a", p, g, 0.1)
    # bias-corrected first step moves by lr * sign(g)
    assert np.allclose(out, tr.r32(p - 0.1 * np.array([1.0, -1.0, 0.0])), atol=1e-6)
    ad.step("a", out, g, 0.1)
    ad.step("b", p, g, 0.1)
    assert ad.t == {"a": 2, "b": 1}
    ad.reset_rows("a", [0])
    assert ad.m["a"][0] == 0 and ad.v["a"][0] == 0 and ad.m["a"][1] != 0


@pytest.mark.parametrize("arm", ["multi-view-o", "single-view", "multi-view-m", "multi-view-t", "full"])
def test_fresh_correction_arms_reduce_to_freeze(tiny_dataset, arm):
    base = tr.init_avatar(small().with_ablation("freeze"), tiny_dataset)
    av = tr.init_avatar(small().with_ablation(arm), tiny_dataset)
    t, v = 1, av.train_views[0]
    delta, feat, _ = tr.regress(av, tiny_dataset.frames[t], v)
    assert np.all(delta == 0)
    a = tr.forward(base, t, base.cameras[v]).output.image
    b = tr.forward(av, t, av.cameras[v], delta, feat if av.tex is not None else None).output.image
    assert np.array_equal(a, b)


def test_freeze_never_moves_expression(tiny_dataset):
    av, _ = tr.train(small(iterations=8).with_ablation("freeze"), tiny_dataset)
    for p, q in zip(av.params, tiny_dataset.params_init):
        assert np.array_equal(p.expression, tr.r32(q.expression))
    assert av.corr is None and av.cached_delta is None


def test_non_finite_loss_aborts_with_diagnostic(tiny_dataset):
    ds = copy.copy(tiny_dataset)
    ds.frames = tiny_dataset.frames.copy()
    ds.frames[0, 0, 3, 3, 0] = np.nan
    with pytest.raises(tr.TrainingError) as info:
        tr.train(small(iterations=3).with_ablation("freeze"), ds)
    assert info.value.diagnostic["iteration"] == 0
    assert info.value.diagnostic["t"] == 0


def test_log_csv(tmp_path, tiny_dataset):
    path = tmp_path / "log.csv"
    _, rows = tr.train(small(iterations=4).with_ablation("freeze"), tiny_dataset, log_path=path)
    with open(path) as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0]) == tr.LOG_FIELDS
    assert [int(r["iteration"]) for r in read] == [0, 1, 2, 3]
    assert float(read[2]["total"]) == rows[2]["total"]
    # round-robin over timestamps and views
    assert [r["t"] for r in rows] == [0, 1, 2, 3]
    assert [r["view"] for r in rows] == [0, 1, 0, 1]


def test_opacity_reset_happens_on_schedule(tiny_dataset):
    def run(n):
        cfg = small(iterations=n, opacity_reset_interval=5, opacity_reset_value=0.01).with_ablation("freeze")
        return tr.train(cfg, tiny_dataset)[0], cfg

    # the reset fires after step 5; one further step with fresh moments moves each logit by about lr
    av, cfg = run(6)
    moved = np.abs(av.cloud.opacity_logit - np.log(0.01 / 0.99))
    assert moved.max() <= cfg.lr_opacity * 1.01
    # no reset on the final iteration
    av, _ = run(10)
    assert not np.allclose(sigmoid(av.cloud.opacity_logit), 0.01, atol=1e-4)


def test_reanchor_resets_drifted_rows(tiny_dataset):
    cfg = small(iterations=5, reanchor_start=5, reanchor_interval=5, reanchor_eps=1.0).with_ablation("freeze")
    av = tr.init_avatar(cfg, tiny_dataset)
    av.cloud.local_offset[0] = [0.0, 0.0, 5.0]  # far outside the margin, along the normal
    av.cloud.local_offset[1] = [4.0, 0.0, 0.0]
    av, _ = tr.train(cfg, tiny_dataset, avatar=av)
    assert av.adam.m["cloud.local_offset"][1].tolist() == [0.0, 0.0, 0.0]
    assert av.adam.m["cloud.rotation"][1].tolist() == [0.0, 0.0, 0.0, 0.0]
    assert np.any(av.adam.m["cloud.local_offset"][2] != 0)


def test_smoothed_loss_decreases(tiny_dataset):
    _, rows = tr.train(small(iterations=200, reanchor_interval=10, reanchor_start=30).with_ablation("freeze"),
                       tiny_dataset)
    rgb = np.array([r["rgb"] for r in rows])
    windows = rgb.reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


@pytest.fixture(scope="module")
def trained_full(tiny_dataset):
    av, _ = tr.train(small(iterations=12).with_ablation("full"), tiny_dataset)
    return av


def test_checkpoint_roundtrip_is_exact(tmp_path, tiny_dataset, trained_full):
    av = trained_full
    path = tmp_path / "a.ckpt"
    tr.save_checkpoint(av, path)
    back = tr.load_checkpoint(path)
    for t in av.split["train_t"]:
        for v in range(len(av.cameras)):
            assert np.array_equal(tr.render_novel_view(av, t, av.cameras[v], view=v),
                                  tr.render_novel_view(back, t, back.cameras[v], view=v))
    assert back.iteration == av.iteration and back.adam.t == av.adam.t
    tr.save_checkpoint(back, tmp_path / "b.ckpt")
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    a, b = read_blocks(path), read_blocks(tmp_path / "b.ckpt")
    assert list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_from_checkpoint_matches_in_memory(tmp_path, tiny_dataset):
    cfg = small(iterations=6).with_ablation("multi-view-m")
    av, _ = tr.train(cfg, tiny_dataset)
    tr.save_checkpoint(av, tmp_path / "c.ckpt")
    back = tr.load_checkpoint(tmp_path / "c.ckpt")
    more = small(iterations=10).with_ablation("multi-view-m")
    av.config = more
    back.config = more
    a, ra = tr.train(more, tiny_dataset, avatar=av)
    b, rb = tr.train(more, tiny_dataset, avatar=back)
    assert [r["total"] for r in ra] == [r["total"] for r in rb]
    assert np.array_equal(a.cloud.local_offset, b.cloud.local_offset)


def test_truncated_checkpoint_rejected(tmp_path, trained_full):
    path = tmp_path / "x.ckpt"
    tr.save_checkpoint(trained_full, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(Exception):
        tr.load_checkpoint(path)


def test_bank_mean_is_applied_everywhere(trained_full):
    av = trained_full
    t = av.split["train_t"][0]
    for v in range(len(av.cameras)):
        delta, _ = tr.view_correction(av, t, v)
        assert np.array_equal(delta, tr.r32(av.bank.correction(t)))


def test_heldout_view_uses_mean_correction(tiny_dataset):
    av, _ = tr.train(small(iterations=6).with_ablation("multi-view-o"), tiny_dataset)
    hv = av.split["heldout_view"]
    d, _ = tr.view_correction(av, 0, hv)
    assert np.array_equal(d, tr.r32(av.cached_delta[0].mean(axis=0)))
    with pytest.raises(ValueError):
        tr.view_correction(av, av.split["heldout_t"][0], 0)


def test_reenact_output_shape_and_shape_override(trained_full, tiny_dataset):
    p = tiny_dataset.params_true[4].copy()
    p.shape = p.shape + 5.0  # ignored: the avatar keeps its own identity
    out = tr.reenact(trained_full, [p, tiny_dataset.params_true[3]], trained_full.cameras[:2])
    assert out.shape == (2, 2, 32, 32, 3)
    q = tiny_dataset.params_true[4].copy()
    ref = tr.reenact(trained_full, [q], trained_full.cameras[:1])
    assert np.array_equal(out[0, 0], ref[0, 0])


def test_reenact_own_params_reproduces_freeze_render(tiny_dataset):
    av, _ = tr.train(small(iterations=6).with_ablation("freeze"), tiny_dataset)
    t, v = 2, 1
    ref = tr.render_novel_view(av, t, av.cameras[v], view=v)
    out = tr.reenact(av, [av.params[t]], [av.cameras[v]])
    assert np.array_equal(out[0, 0], ref)


def test_training_view_render_matches_training_path(trained_full):
    av = trained_full
    t, v = 1, 0
    delta, feat = tr.view_correction(av, t, v)
    step = tr.forward(av, t, av.cameras[v], delta, feat, view=v)
    assert np.array_equal(step.output.image, tr.render_novel_view(av, t, av.cameras[v]))
