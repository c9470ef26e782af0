import numpy as np
import pytest

from gnnlab.arch import NetworkSpec, assemble_network, forward, pack_batch, precompute_inputs
from gnnlab.molgraph import GeneratorConfig, generate_synthetic_mix
from gnnlab.optim import (AdamState, LrSchedule, OptimError, Param, ParamSpec,
                          adam_step, lr_at, mup_scale)
from gnnlab.pse import PSEConfig
from gnnlab.train import heads_for_mix

from oracles import adam_reference


def one_param(value, grad, mult=1.0):
    p = Param(name="x", value=np.asarray(value, dtype=np.float64),
              lr_multiplier=mult)
    p.grad = np.asarray(grad, dtype=np.float64)
    return {"x": p}, {"x": AdamState.for_param(p)}


def test_first_step_magnitude_is_lr():
    params, states = one_param([0.0], [13.7])
    adam_step(params, states, lr=0.05)
    assert params["x"].value[0] == pytest.approx(-0.05, rel=1e-6)


def test_zero_grad_leaves_value_and_advances_time():
    params, states = one_param([2.5], [0.0])
    adam_step(params, states, lr=0.1)
    assert params["x"].value[0] == 2.5
    assert states["x"].t == 1


def test_two_steps_match_scalar_oracle():
    rng = np.random.default_rng(4)
    value = rng.normal(size=6)
    g1, g2 = rng.normal(size=6), rng.normal(size=6)
    params, states = one_param(value.copy(), g1)  # Param aliases its input
    adam_step(params, states, lr=0.01)
    params["x"].grad = g2
    adam_step(params, states, lr=0.01)
    expected = adam_reference(value, [g1, g2], lr=0.01)
    assert np.allclose(params["x"].value, expected, rtol=0, atol=1e-16)


def test_lr_multiplier_scales_the_step():
    slow, sl_states = one_param([0.0], [3.0], mult=0.25)
    fast, fa_states = one_param([0.0], [3.0], mult=1.0)
    adam_step(slow, sl_states, lr=0.1)
    adam_step(fast, fa_states, lr=0.1)
    assert slow["x"].value[0] == pytest.approx(0.25 * fast["x"].value[0], rel=1e-12)


def test_adam_aborts_without_touching_anything():
    good = Param(name="a", value=np.zeros(2))
    good.grad = np.ones(2)
    bad = Param(name="b", value=np.zeros(2))
    bad.grad = np.array([1.0, np.inf])
    params = {"a": good, "b": bad}
    states = {k: AdamState.for_param(p) for k, p in params.items()}
    with pytest.raises(OptimError, match="'b'"):
        adam_step(params, states, lr=0.1)
    assert (good.value == 0.0).all()
    assert states["a"].t == 0


def test_adam_missing_grad_and_shape_mismatch():
    p = Param(name="a", value=np.zeros(2))
    with pytest.raises(OptimError, match="no gradient"):
        adam_step({"a": p}, {"a": AdamState.for_param(p)}, lr=0.1)
    p.grad = np.ones(3)
    with pytest.raises(OptimError, match="shape"):
        adam_step({"a": p}, {"a": AdamState.for_param(p)}, lr=0.1)


def test_adam_trajectory_is_deterministic():
    rng = np.random.default_rng(8)
    grads = [rng.normal(size=4) for _ in range(5)]

    def run():
        params, states = one_param(np.zeros(4), grads[0])
        for g in grads:
            params["x"].grad = g
            adam_step(params, states, lr=0.003)
        return params["x"].value.copy()

    assert (run() == run()).all()


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


def test_lr_warmup_values():
    s = LrSchedule(base_lr=0.003, warmup_epochs=5, total_epochs=30)
    assert lr_at(s, 0) == 0.003 * 1 / 5
    assert lr_at(s, 4) == 0.003
    assert lr_at(s, 29) == pytest.approx(0.003 / 30, rel=1e-15)


def test_lr_decay_midpoint_is_mean_of_endpoints():
    s = LrSchedule(base_lr=0.003, warmup_epochs=5, total_epochs=31)
    final = 0.003 / 31
    mid = 4 + (31 - 5) // 2  # halfway through the decay leg
    assert lr_at(s, mid) == pytest.approx((0.003 + final) / 2, rel=1e-12)


def test_lr_schedule_shape():
    s = LrSchedule(base_lr=1e-3, warmup_epochs=4, total_epochs=20)
    trace = [lr_at(s, e) for e in range(20)]
    assert all(v > 0 for v in trace)
    assert trace[:4] == sorted(trace[:4])  # ramp up
    assert trace[3:] == sorted(trace[3:], reverse=True)  # then decay
    # continuity at the junction: one decay-slope step, no jump
    slope = (trace[-1] - trace[3]) / (20 - 4)
    assert trace[4] - trace[3] == pytest.approx(slope, rel=1e-12)


def test_lr_out_of_range_and_bad_construction():
    s = LrSchedule(base_lr=1e-3, warmup_epochs=2, total_epochs=5)
    with pytest.raises(ValueError):
        lr_at(s, 5)
    with pytest.raises(ValueError):
        lr_at(s, -1)
    with pytest.raises(ValueError):
        LrSchedule(base_lr=1e-3, warmup_epochs=5, total_epochs=5)
    with pytest.raises(ValueError):
        LrSchedule(base_lr=0.0, warmup_epochs=1, total_epochs=5)


# ---------------------------------------------------------------------------
# Width-scaling rules
# ---------------------------------------------------------------------------


def demo_specs():
    return [
        ParamSpec(path="enc.w", shape=(16, 8), role="input", fan_in=16),
        ParamSpec(path="core.w", shape=(8, 8), role="hidden", fan_in=8),
        ParamSpec(path="core.res", shape=(8, 8), role="hidden", fan_in=8,
                  residual_out=True),
        ParamSpec(path="head.w", shape=(8, 2), role="head_out", fan_in=8),
        ParamSpec(path="core.b", shape=(8,), role="bias"),
    ]


def test_mup_identity_at_m1():
    table = mup_scale(demo_specs(), width_multiplier=1.0)
    assert all(mult == 1.0 for _, mult in table.values())
    assert table["core.w"][0] == 1.0 / np.sqrt(8)
    assert table["core.b"] == (0.0, 1.0)


def test_mup_hidden_lr_quarter_at_m4():
    table = mup_scale(demo_specs(), width_multiplier=4.0)
    assert table["core.w"][1] == 0.25
    assert table["enc.w"][1] == 1.0
    assert table["core.b"][1] == 1.0
    assert table["head.w"][1] == 0.25
    assert table["head.w"][0] == pytest.approx(1.0 / np.sqrt(8) / 2.0)


def test_mup_depth_shrinks_residual_outputs():
    table = mup_scale(demo_specs(), width_multiplier=1.0, depth_multiplier=4.0)
    assert table["core.res"][0] == pytest.approx(table["core.w"][0] / 2.0)


def test_mup_validation():
    with pytest.raises(ValueError):
        mup_scale(demo_specs(), width_multiplier=0.0)
    with pytest.raises(ValueError):
        ParamSpec(path="x", shape=(2, 2), role="conv", fan_in=2)
    with pytest.raises(ValueError):
        ParamSpec(path="x", shape=(2, 2), role="hidden")  # weight needs fan_in


def test_mup_coordinate_check():
    """Activation RMS at init stays within 2x across widths m in {1, 2, 4}."""
    mix = generate_synthetic_mix(GeneratorConfig(n_molecules=12, seed=2))
    inputs = precompute_inputs(mix, PSEConfig())
    batch = pack_batch(inputs, mix.splits["train"][:4])
    rms = []
    for m in (1, 2, 4):
        spec = NetworkSpec(arch_kind="mpnn", width=8 * m, depth=2, n_heads=2,
                           task_heads=heads_for_mix(mix), width_multiplier=float(m))
        model = assemble_network(spec, seed=6)
        result = forward(model, batch, taps=["core.1"])
        act = result.taps["core.1"].data
        rms.append(float(np.sqrt(np.mean(act * act))))
    for i in range(3):
        for j in range(3):
            assert 0.5 <= rms[i] / rms[j] <= 2.0, rms
