import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caduf.cascade import Cascade, CascadeConfig, caduf_loss
from caduf.optim import Adam
from caduf.trainer import (
    DESK_PHASES,
    LOG_HEADER,
    PAPER_BATCH,
    PAPER_BATCHES_PER_EPOCH,
    PAPER_PHASES,
    Phase,
    Pool,
    TrainConfig,
    TrainingAborted,
    augment,
    crop,
    describe_schedule,
    desk_profile,
    draw_scale,
    flip,
    format_log,
    make_batch,
    paper_profile,
    prepare,
    stack,
    train,
    train_step,
)

from conftest import natural_images

TINY = CascadeConfig(scale=2, width=8, nb_d=1, nb_u=1, nb_f=1, e_widths=(8, 4, 4))


def tiny_cfg(**kw):
    base = dict(model=TINY, phases=(Phase("A", 1, 1e-3, 0.6, 0.3), Phase("B", 1, 1e-3, 0.1, 0.1)),
                batch_size=2, batches_per_epoch=5, patch=16, flips=True, rotations=True, n_val=0)
    base.update(kw)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def corpus():
    return [im[:, :96, :96] for im in natural_images()]


@pytest.fixture(scope="module")
def pool(corpus):
    from caduf.degradation import sample_spec, synthesize

    rng = np.random.default_rng(0)
    samples = [prepare(synthesize(crop(corpus[i % 3], rng, 32), sample_spec(rng, "GaussianSM", 2)))
               for i in range(4)]
    return Pool(samples, 2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), axis=st.sampled_from([-1, -2]), k=st.integers(0, 3))
def test_flip_and_rotation_group_laws(seed, axis, k):
    x = np.random.default_rng(seed).random((3, 5, 7))
    assert np.array_equal(flip(flip(x, axis), axis), x)
    r = x
    for _ in range(4):
        r = np.rot90(r, 1, axes=(-2, -1))
    assert np.array_equal(r, x)


def test_draw_scale_range():
    rng = np.random.default_rng(0)
    f = np.array([draw_scale(rng) for _ in range(10_000)])
    assert f.min() >= 0.5 and f.max() <= 1.25
    assert f.min() < 0.51 and f.max() > 1.24


def test_augment_keeps_patch_size():
    rng = np.random.default_rng(1)
    x = rng.random((3, 40, 50))
    for _ in range(50):
        out = augment(x, rng, patch=36)
        assert min(out.shape[1:]) >= 36 and 0 <= out.min() and out.max() <= 1


def test_augment_all_off_is_identity():
    x = np.random.default_rng(2).random((3, 8, 8))
    assert np.array_equal(augment(x, np.random.default_rng(0), None, False, False, False), x)


def test_crop_errors():
    with pytest.raises(ValueError):
        crop(np.zeros((3, 10, 10)), np.random.default_rng(0), 11)


def test_paper_patch_rule():
    cfg = paper_profile(4, batch_size=1, rescale=False)
    assert cfg.hr_patch == 192
    b = make_batch([im[:, :256, :256] for im in natural_images()], cfg, 0)
    assert b.x.shape == (1, 3, 192, 192) and b.y.shape == (1, 3, 48, 48)
    assert b.y_w.shape == b.y_anchor.shape == b.x_down.shape == b.y.shape


def test_batch_identical_across_worker_counts(corpus):
    cfg = desk_profile(2, batch_size=4)
    a = make_batch(corpus, cfg, 3, workers=1)
    b = make_batch(corpus, cfg, 3, workers=4)
    for key in ("x", "y", "y_w", "y_anchor", "x_down"):
        assert np.array_equal(getattr(a, key), getattr(b, key))
    assert a.specs == b.specs


def test_empty_corpus():
    with pytest.raises(ValueError):
        make_batch([], desk_profile(2), 0)


def test_pool_crops_aligned(pool):
    b = pool.draw(np.random.default_rng(3), 3, 16, flips=False, rotations=False)
    assert b.x.shape == (3, 3, 16, 16) and b.y.shape == (3, 3, 8, 8)
    # HR and LR crops come from the same place
    from caduf.degradation import bicubic_downsample

    for i in range(3):
        inner = bicubic_downsample(b.x[i], 2)[:, 3:-3, 3:-3]
        assert np.abs(inner - b.x_down[i][:, 3:-3, 3:-3]).max() < 1e-12


def test_step0_loss_is_identity_model_on_anchor(pool):
    cfg = tiny_cfg(max_steps=1)
    res = train(cfg=cfg, pool=pool)
    rng = np.random.default_rng([cfg.seed, 2 ** 32 - 1])
    batch = pool.draw(rng, cfg.batch_size, cfg.hr_patch, cfg.flips, cfg.rotations)
    model = Cascade(cfg.model, np.random.default_rng(cfg.seed))
    out = model(batch.y, batch.y_w)
    assert np.array_equal(out.y_D.data, batch.y_w)
    loss, _ = caduf_loss(out, batch.y_anchor, batch.x, 0.6, 0.3, cfg.model)
    assert res.log[0]["total"] == loss.item()


def test_ten_steps_bit_reproducible(pool):
    cfg = tiny_cfg(max_steps=10)
    a, b = train(cfg=cfg, pool=pool), train(cfg=cfg, pool=pool)
    ta = np.array([r["total"] for r in a.log])
    tb = np.array([r["total"] for r in b.log])
    assert len(ta) == 10 and np.abs(ta - tb).max() <= 1e-12


def test_phase_switch_keeps_moments(pool):
    """Training across a phase boundary equals one Adam run whose lr/alpha/beta change."""
    phases = (Phase("A", 1, 1e-3, 0.6, 0.3), Phase("B", 1, 5e-4, 0.1, 0.1))
    cfg = tiny_cfg(phases=phases, batches_per_epoch=2)
    res = train(cfg=cfg, pool=pool)
    assert [r["phase"] for r in res.log] == ["A", "A", "B", "B"]
    assert [r["lr"] for r in res.log] == [1e-3, 1e-3, 5e-4, 5e-4]

    rng = np.random.default_rng([cfg.seed, 2 ** 32 - 1])
    model = Cascade(cfg.model, np.random.default_rng(cfg.seed))
    opt = Adam(model.parameters(), lr=1e-3, weight_decay=cfg.weight_decay)
    totals = []
    for ph in (phases[0], phases[0], phases[1], phases[1]):
        opt.lr = ph.lr
        batch = pool.draw(rng, cfg.batch_size, cfg.hr_patch, cfg.flips, cfg.rotations)
        totals.append(train_step(model, opt, batch, ph)[0])
    assert totals == [r["total"] for r in res.log]


def test_nan_aborts(pool):
    model = Cascade(TINY, np.random.default_rng(0))
    model.U_head.r2.weight.data[:] = np.nan
    with pytest.raises(TrainingAborted):
        train(cfg=tiny_cfg(max_steps=1), pool=pool, model=model)


def test_validation_logged_each_epoch(pool):
    val = pool.draw(np.random.default_rng(9), 2, 16, False, False)
    res = train(cfg=tiny_cfg(batches_per_epoch=2), pool=pool, val=val)
    assert len(res.val) == 2 and all(np.isfinite(v["psnr"]) for v in res.val)


def test_schedules():
    assert [(p.epochs, p.lr, p.alpha, p.beta) for p in PAPER_PHASES] == [(20, 1e-4, 0.6, 0.3), (120, 1e-4, 0.1, 0.1)]
    b = PAPER_PHASES[1]
    assert b.lr_at(89) == 1e-4 and b.lr_at(90) == 1e-5
    assert (PAPER_BATCH, PAPER_BATCHES_PER_EPOCH) == (64, 3000)
    text = describe_schedule(paper_profile(4))
    assert "20 epochs" in text and "120 epochs" in text and "at epoch 90" in text
    assert sum(p.epochs for p in DESK_PHASES) * 100 == 2000


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(patch=15)
    with pytest.raises(ValueError):
        tiny_cfg(phases=(Phase("A", 1, 1e-3, 0.6, 0.4),))


def test_log_format():
    rows = [dict(step=1, phase="A", lr=1e-4, L_D=0.1, L_U=0.2, L_F=0.3, total=1.5, grad_norm=2.0)]
    lines = format_log(rows).splitlines()
    assert lines[0] == ",".join(LOG_HEADER)
    assert lines[1] == "1,A,0.0001,0.1,0.2,0.3,1.5,2.0"
