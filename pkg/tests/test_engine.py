import json

import numpy as np
import pytest
import torch

from vista import backbone, engine
from vista.backbone import ParameterSnapshot, build_model
from vista.config import ModelConfig, VistaConfig
from vista.errors import CheckpointMismatch, ConfigError, ShapeError, UnknownVariant

FAST = VistaConfig(steps=2, dilation=3, lr=1e-3)


def _vols(cases):
    return [c.volume for c in cases]


def _non_affine(model):
    groups = backbone.parameter_groups(model)
    return ParameterSnapshot.of(model, include_buffers=False).subset(groups["other"])


# -- EMA ----------------------------------------------------------------------


def test_ema_hand_value(tiny_cfg):
    teacher, student = build_model(tiny_cfg), build_model(tiny_cfg)
    with torch.no_grad():
        for p in teacher.parameters():
            p.fill_(1.0)
        for p in student.parameters():
            p.fill_(0.0)
    engine.ema_update(teacher, student, 0.99)
    for p in teacher.parameters():
        assert torch.all(p == torch.tensor(0.99, dtype=p.dtype))


def test_ema_fixed_point_and_full_copy(tiny_cfg):
    teacher, student = build_model(tiny_cfg), build_model(tiny_cfg)
    snap = ParameterSnapshot.of(teacher, include_buffers=False)
    engine.ema_update(teacher, student, 0.99)
    assert ParameterSnapshot.of(teacher, include_buffers=False) == snap

    other = build_model(ModelConfig(base_channels=4, depth=2, seed=5))
    engine.ema_update(teacher, other, 0.0)
    assert ParameterSnapshot.of(teacher, include_buffers=False) == ParameterSnapshot.of(other, include_buffers=False)


def test_ema_step_bound(tiny_cfg):
    teacher = build_model(tiny_cfg)
    student = build_model(ModelConfig(base_channels=4, depth=2, seed=3))
    before = {n: p.detach().clone() for n, p in teacher.named_parameters()}
    engine.ema_update(teacher, student, 0.9)
    s = dict(student.named_parameters())
    for n, p in teacher.named_parameters():
        step = (p - before[n]).abs()
        assert torch.all(step <= 0.1 * (before[n] - s[n]).abs() + 1e-7)


def test_ema_mismatch(tiny_cfg):
    with pytest.raises(ShapeError):
        engine.ema_update(build_model(tiny_cfg), build_model(ModelConfig(base_channels=8, depth=2)), 0.99)


# -- init ---------------------------------------------------------------------


def test_init_copies_source(trained_tiny):
    state = engine.init_state(trained_tiny, FAST)
    assert ParameterSnapshot.of(state.teacher) == ParameterSnapshot.of(state.student)
    assert ParameterSnapshot.of(state.teacher) == ParameterSnapshot.of(trained_tiny)
    assert state.step == 0
    assert {id(p) for p in state.params} == {id(p) for _, p in backbone.trainable_parameters(state.student)}
    assert not any(p.requires_grad for p in state.teacher.parameters())


def test_init_from_checkpoint_mismatch(tmp_path, trained_tiny):
    path = tmp_path / "m.ckpt"
    backbone.save_checkpoint(trained_tiny, path)
    state = engine.init_state(path, FAST, model_cfg=trained_tiny.cfg)
    assert ParameterSnapshot.of(state.student) == ParameterSnapshot.of(trained_tiny)
    with pytest.raises(CheckpointMismatch):
        engine.init_state(path, FAST, model_cfg=ModelConfig(base_channels=8, depth=2))


def test_pathological_config_rejected():
    with pytest.raises(ConfigError):
        VistaConfig(lam=0.0, tau_var=float("inf"), tau_pos=0.5, tau_neg=0.5)


# -- adaptation contracts ---------------------------------------------------------


def test_adapt_records_k_steps(trained_tiny, shifted_cohort):
    state = engine.init_state(trained_tiny, FAST.replace(steps=3))
    state, res = engine.adapt_volume(state, shifted_cohort[0].volume, "c0")
    assert len(res.steps) == 3 and not res.skipped
    assert state.step == 3
    assert res.prediction.data.shape == (3, 16, 16, 16)
    for rec in res.steps:
        assert np.isfinite(rec.loss_total)
        assert rec.loss_total == pytest.approx(rec.loss_pl + state.cfg.lam * rec.loss_cons, rel=1e-5)


@pytest.mark.parametrize("cfg", [FAST, FAST.replace(student_norm="batch"), FAST.replace(ema_per_step=False)])
def test_non_affine_parameters_frozen(trained_tiny, shifted_cohort, cfg):
    state = engine.init_state(trained_tiny, cfg)
    source = _non_affine(trained_tiny)
    engine.run_stream(state, _vols(shifted_cohort))
    assert _non_affine(state.student) == source
    assert _non_affine(state.student).max_abs_diff(source) == 0
    # teacher is a convex mix of identical frozen tensors
    assert _non_affine(state.teacher) == source
    groups = backbone.parameter_groups(trained_tiny)
    affine0 = ParameterSnapshot.of(trained_tiny, include_buffers=False).subset(groups["norm_affine"])
    assert ParameterSnapshot.of(state.student, include_buffers=False).subset(groups["norm_affine"]).max_abs_diff(affine0) > 0


def test_running_stats_frozen_by_default(trained_tiny, shifted_cohort):
    state = engine.init_state(trained_tiny, FAST.replace(student_norm="batch"))
    bufs = ParameterSnapshot(trained_tiny.named_buffers())
    engine.run_stream(state, _vols(shifted_cohort[:1]))
    assert ParameterSnapshot(state.student.named_buffers()).subset(
        [n for n in bufs.names() if "running" in n]
    ) == bufs.subset([n for n in bufs.names() if "running" in n])


def test_closed_gates_no_consistency_is_no_tta(trained_tiny, shifted_cohort):
    # tau_var tiny, confidence band that nothing satisfies, no consistency term
    cfg = FAST.replace(lam=0.0, tau_var=1e-30, tau_neg=1e-30, tau_pos=1 - 1e-12, steps=1)
    state = engine.init_state(trained_tiny, cfg)
    snap = ParameterSnapshot.of(state.student)
    results = engine.run_stream(state, _vols(shifted_cohort))
    assert ParameterSnapshot.of(state.student) == snap
    for res, ref in zip(results, engine.run_no_tta(trained_tiny, _vols(shifted_cohort))):
        assert np.array_equal(res.prediction.data, ref.data)
        assert all(r.loss_total == 0 for r in res.steps)


def test_zero_step_adapt_equals_no_tta(trained_tiny, shifted_cohort):
    state = engine.init_state(trained_tiny, FAST.replace(steps=1))
    ref = engine.run_no_tta(trained_tiny, _vols(shifted_cohort))
    # the anchor of the first step is the source prediction
    p0 = engine._teacher_probs(state.teacher, engine._as_tensor(shifted_cohort[0].volume)[None])[0]
    assert np.array_equal(p0.numpy(), ref[0].data)


def test_no_tta_pure(trained_tiny, shifted_cohort):
    snap = ParameterSnapshot.of(trained_tiny)
    a = engine.run_no_tta(trained_tiny, _vols(shifted_cohort))
    b = engine.run_no_tta(trained_tiny, _vols(shifted_cohort))
    assert ParameterSnapshot.of(trained_tiny) == snap
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_determinism(trained_tiny, shifted_cohort):
    def run():
        state = engine.init_state(trained_tiny, FAST.replace(seed=5))
        return engine.run_stream(state, _vols(shifted_cohort))

    a, b = run(), run()
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.prediction.data, rb.prediction.data)
        assert ra.log_records() == rb.log_records()


def test_same_seed_same_first_views(trained_tiny):
    s1 = engine.init_state(trained_tiny, FAST.replace(seed=9))
    s2 = engine.init_state(trained_tiny, FAST.replace(seed=9))
    assert np.array_equal(s1.rng.integers(0, 1 << 30, 8), s2.rng.integers(0, 1 << 30, 8))


def test_single_volume_stream_matches_adapt_volume(trained_tiny, shifted_cohort):
    vol = shifted_cohort[0].volume
    _, res = engine.adapt_volume(engine.init_state(trained_tiny, FAST), vol, "case000")
    (res2,) = engine.run_stream(engine.init_state(trained_tiny, FAST), [vol])
    assert np.array_equal(res.prediction.data, res2.prediction.data)
    assert res.log_records() == res2.log_records()


def test_identical_volume_stream_bookkeeping(trained_tiny, shifted_cohort):
    state = engine.init_state(trained_tiny, FAST)
    results = engine.run_stream(state, [shifted_cohort[0].volume] * 3)
    assert sum(len(r.steps) for r in results) == 3 * FAST.steps
    assert state.step == 3 * FAST.steps and state.cases_seen == 3


def test_empty_stream_and_channel_mismatch(trained_tiny):
    state = engine.init_state(trained_tiny, FAST)
    with pytest.raises(ValueError):
        engine.run_stream(state, [])
    from vista.volume import MultiSequenceVolume

    with pytest.raises(ShapeError):
        engine.adapt_volume(state, MultiSequenceVolume(np.zeros((2, 16, 16, 16))))


def test_non_finite_loss_restores_state(trained_tiny, shifted_cohort, monkeypatch):
    state = engine.init_state(trained_tiny, FAST)
    engine.run_stream(state, _vols(shifted_cohort[:1]))
    snap_s, snap_t, step = ParameterSnapshot.of(state.student), ParameterSnapshot.of(state.teacher), state.step

    calls = {"n": 0}
    real = engine.total_loss

    def poisoned(l_pl, l_cons, lam):
        calls["n"] += 1
        out = real(l_pl, l_cons, lam)
        return out * float("nan") if calls["n"] == 2 else out

    monkeypatch.setattr(engine, "total_loss", poisoned)
    state, res = engine.adapt_volume(state, shifted_cohort[1].volume, "bad")
    assert res.skipped and len(res.steps) == 1
    assert ParameterSnapshot.of(state.student) == snap_s
    assert ParameterSnapshot.of(state.teacher) == snap_t
    assert state.step == step
    monkeypatch.undo()
    # the stream continues afterwards
    _, res = engine.adapt_volume(state, shifted_cohort[2].volume, "next")
    assert not res.skipped


# -- variants -----------------------------------------------------------------


def test_ablation_variants():
    base = VistaConfig()
    assert engine.ablation_variant(base, "full") == base
    pl = engine.ablation_variant(base, "pl_only")
    assert pl.lam == 0 and not pl.use_var_gate and pl.use_pl
    assert not engine.ablation_variant(base, "cons_only").use_pl
    ng = engine.ablation_variant(base, "no_gate")
    assert not ng.use_var_gate and ng.tau_pos == base.tau_pos and ng.lam == base.lam
    assert not engine.ablation_variant(base, "no_ugps").use_ugps
    assert not engine.ablation_variant(base, "no_lfccs").use_lfccs
    with pytest.raises(UnknownVariant):
        engine.ablation_variant(base, "bogus")


@pytest.mark.parametrize("variant", ["pl_only", "cons_only", "no_gate", "no_ugps", "no_lfccs"])
def test_variants_run(trained_tiny, shifted_cohort, variant):
    cfg = engine.ablation_variant(FAST, variant)
    results = engine.run_stream(engine.init_state(trained_tiny, cfg), _vols(shifted_cohort[:1]))
    recs = results[0].steps
    assert all(np.isfinite(r.loss_total) for r in recs)
    if variant in ("no_gate", "pl_only"):
        assert all(r.gate.variance_open_fraction == 1.0 for r in recs)
    if variant == "pl_only":
        assert all(r.loss_cons == 0 for r in recs)
    if variant == "cons_only":
        assert all(r.loss_pl == 0 for r in recs)


# -- Tent baseline ------------------------------------------------------------------


def test_tent_saturated_prediction_barely_moves(tiny_cfg, shifted_cohort):
    model = build_model(tiny_cfg)
    with torch.no_grad():
        model.head.bias.fill_(40.0)
    state = engine.init_state(model, FAST)
    before = ParameterSnapshot.of(state.student, include_buffers=False)
    engine.run_tent_baseline(state, _vols(shifted_cohort[:1]))
    assert ParameterSnapshot.of(state.student, include_buffers=False).max_abs_diff(before) <= 1e-6


def test_tent_loss_mostly_non_increasing(trained_tiny, shifted_cohort):
    good = 0
    trials = 5
    for seed in range(trials):
        state = engine.init_state(trained_tiny, VistaConfig(steps=5, lr=1e-3, seed=seed))
        vol = shifted_cohort[seed % len(shifted_cohort)].volume
        (res,) = engine.run_tent_baseline(state, [vol])
        losses = [r.loss_total for r in res.steps]
        good += losses[-1] <= losses[0]
    assert good >= 0.8 * trials


def test_tent_keeps_non_affine(trained_tiny, shifted_cohort):
    state = engine.init_state(trained_tiny, FAST)
    engine.run_tent_baseline(state, _vols(shifted_cohort))
    assert _non_affine(state.student) == _non_affine(trained_tiny)


# -- persistence ----------------------------------------------------------------


def test_state_roundtrip_continues_identically(tmp_path, trained_tiny, shifted_cohort):
    vols = _vols(shifted_cohort)
    ref = engine.init_state(trained_tiny, FAST)
    engine.run_stream(ref, vols[:1])
    engine.save_state(ref, tmp_path / "s.msvol")
    loaded = engine.load_state(tmp_path / "s.msvol")
    assert loaded.step == ref.step and loaded.cases_seen == 1
    a = engine.run_stream(ref, vols[1:2])
    b = engine.run_stream(loaded, vols[1:2])
    np.testing.assert_allclose(a[0].prediction.data, b[0].prediction.data, atol=1e-6)


def test_step_log_jsonl(tmp_path, trained_tiny, shifted_cohort):
    results = engine.run_stream(engine.init_state(trained_tiny, FAST), _vols(shifted_cohort[:2]), ["a", "b"])
    path = tmp_path / "steps.jsonl"
    engine.write_step_log(results, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 2 * FAST.steps
    assert [r["case"] for r in rows] == ["a"] * FAST.steps + ["b"] * FAST.steps
    assert set(rows[0]) == {"case", "step", "loss_pl", "loss_cons", "loss_total", "var_open", "conf_open", "joint_open"}
    assert engine.mean_step_loss(results) == pytest.approx(np.mean([r["loss_total"] for r in rows]))
