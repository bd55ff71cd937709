import math

import numpy as np
import pytest

from casreg import _kernels
from casreg.deform import max_norm, warp_scalar, zero_field
from casreg.phantom import make_phantom, phantom_pair
from casreg.registration import (
    Adam,
    RegistrationConfig,
    RigidTransform,
    apply_rigid,
    cascade_register,
    default_scales,
    rigid_register,
)
from casreg.similarity import global_ncc, local_ncc

FAST = dict(iters_per_stage=20)


@pytest.fixture(scope="module")
def phantom32():
    return make_phantom(0, (32, 32, 32))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def test_default_scales_truncation():
    assert default_scales(5) == [8, 4, 2, 1, 1]
    assert default_scales(3) == [8, 4, 1]
    assert default_scales(1) == [1]
    assert RegistrationConfig(n_cascades=2).scales == (8, 1)


@pytest.mark.parametrize("kw", [
    dict(n_cascades=0),
    dict(n_cascades=2, scales=(4, 2)),
    dict(n_cascades=2, scales=(1, 2)),
    dict(n_cascades=1, scales=(4, 2)),
    dict(iters_per_stage=0),
    dict(window=4),
    dict(lam=-1.0),
    dict(strategy="compose"),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RegistrationConfig(**kw)


def test_adam_matches_reference(rng):
    # textbook Adam on a quadratic, written out with numpy
    target = rng.standard_normal(50)
    x = np.zeros(50)
    ref = np.zeros(50)
    m = np.zeros(50)
    v = np.zeros(50)
    opt = Adam(x.shape, 0.1)
    for t in range(1, 31):
        opt.step(x, 2 * (x - target))
        g = 2 * (ref - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(x, ref, rtol=1e-12, atol=1e-14)


# --------------------------------------------------------------------------
# cascade registration
# --------------------------------------------------------------------------

def test_identity_registration(phantom32):
    v = phantom32[0]
    res = cascade_register(v, v, RegistrationConfig(**FAST))
    assert max_norm(res.total_field) < 0.25
    assert local_ncc(res.warped, v) >= 0.999
    # the similarity gradient vanishes exactly at alignment, so nothing moves
    np.testing.assert_array_equal(res.total_field, 0.0)
    assert res.jacobian.folding_fraction == 0.0


def test_recovers_phantom_deformation():
    p = phantom_pair(0, (32, 32, 32), amplitude=3.0, smoothness=4.0)
    before = local_ncc(p.moving, p.fixed)
    res = cascade_register(p.moving, p.fixed, RegistrationConfig(n_cascades=3, **FAST))
    assert local_ncc(res.warped, p.fixed) > before + 0.1
    assert res.jacobian.folding_fraction < 0.02


def test_accumulate_total_is_sum_of_stages(phantom32):
    p = phantom_pair(1, (32, 32, 32), amplitude=3.0, smoothness=4.0)
    res = cascade_register(p.moving, p.fixed, RegistrationConfig(n_cascades=3, **FAST))
    np.testing.assert_allclose(res.total_field, np.sum(res.stage_fields, axis=0), atol=1e-6)
    np.testing.assert_array_equal(res.warped, warp_scalar(p.moving, res.total_field))
    assert len(res.loss_trace) == 3 and all(len(t) == FAST["iters_per_stage"] + 1
                                            for t in res.loss_trace)


def test_loss_trace_envelope_and_stage_progress():
    p = phantom_pair(2, (32, 32, 32), amplitude=3.0, smoothness=4.0)
    res = cascade_register(p.moving, p.fixed, RegistrationConfig(n_cascades=3, **FAST))
    for trace in res.loss_trace:
        envelope = np.minimum.accumulate(trace)
        assert np.all(np.diff(envelope) <= 0)
    # the 4^3 coarsest level of a 32^3 volume can overshoot; full resolution must not
    last = res.loss_trace[-1]
    assert last.min() < last[0]


def test_successive_differs_and_chains_labels():
    p = phantom_pair(3, (32, 32, 32), amplitude=3.0, smoothness=4.0)
    acc = cascade_register(p.moving, p.fixed, RegistrationConfig(n_cascades=3, **FAST))
    suc = cascade_register(p.moving, p.fixed,
                           RegistrationConfig(n_cascades=3, strategy="successive", **FAST))
    assert not np.array_equal(acc.total_field, suc.total_field)
    expected = p.moving
    for f in suc.stage_fields:
        expected = warp_scalar(expected, f)
    np.testing.assert_array_equal(suc.warped, expected)
    assert set(np.unique(suc.warp_labels(p.moving_labels))) <= set(np.unique(p.moving_labels))


def test_constant_input_short_circuits():
    c = np.full((16, 16, 16), 0.5)
    v = make_phantom(0, (16, 16, 16))[0]
    res = cascade_register(c, v, RegistrationConfig(n_cascades=2, **FAST))
    assert res.status == "constant-input"
    np.testing.assert_array_equal(res.total_field, 0.0)


def test_rejects_bad_inputs(phantom32):
    v = phantom32[0]
    with pytest.raises(ValueError, match="normalized"):
        cascade_register(v * 2, v)
    with pytest.raises(ValueError, match="dims mismatch"):
        cascade_register(v, v[:-1])


def test_thread_count_does_not_change_result():
    p = phantom_pair(4, (24, 24, 24), amplitude=3.0, smoothness=4.0)
    cfg = RegistrationConfig(n_cascades=2, iters_per_stage=10)
    _kernels.set_threads(1)
    a = cascade_register(p.moving, p.fixed, cfg)
    _kernels.set_threads(8)
    b = cascade_register(p.moving, p.fixed, cfg)
    _kernels.set_threads(1)
    np.testing.assert_array_equal(a.total_field, b.total_field)
    assert [t.tolist() for t in a.loss_trace] == [t.tolist() for t in b.loss_trace]


# --------------------------------------------------------------------------
# rigid
# --------------------------------------------------------------------------

def test_rigid_angles_wrapped():
    t = RigidTransform((4.0, -4.0, math.pi), (0, 0, 0))
    assert all(-math.pi < a <= math.pi for a in t.rotation)
    assert t.rotation[2] == pytest.approx(math.pi)


def test_apply_rigid_identity_is_exact(phantom32):
    v, labels = phantom32
    np.testing.assert_array_equal(apply_rigid(v, RigidTransform()), v)
    np.testing.assert_array_equal(apply_rigid(labels, RigidTransform()), labels)


def test_apply_rigid_integer_translation(phantom32):
    v, labels = phantom32
    t = RigidTransform((0, 0, 0), (2, -1, 3))
    out = apply_rigid(v, t)
    np.testing.assert_allclose(out[2:-4, 3:-3, 1:-5], v[4:-2, 2:-4, 4:-2], atol=1e-12)
    lab = apply_rigid(labels, t)
    np.testing.assert_array_equal(lab[2:-4, 3:-3, 1:-5], labels[4:-2, 2:-4, 4:-2])


def test_apply_rigid_then_inverse(phantom32):
    v = phantom32[0]
    t = RigidTransform((0.1, -0.05, 0.2), (1.5, -2.0, 0.7))
    back = apply_rigid(apply_rigid(v, t), t.inverse())
    assert global_ncc(back, v) > 0.98


def test_rigid_inverse_matrix():
    t = RigidTransform((0.3, -0.2, 0.5), (1, 2, 3))
    np.testing.assert_allclose(t.inverse().matrix() @ t.matrix(), np.eye(3), atol=1e-12)


def test_rigid_register_identity(phantom32):
    v = phantom32[0]
    t = rigid_register(v, v)
    assert max(abs(a) for a in t.rotation) < 0.01
    assert max(abs(x) for x in t.translation) < 0.1


def test_rigid_register_translation(phantom32):
    fx = phantom32[0]
    f = zero_field(fx.shape)
    f[0] = -3.0  # mv(p) = fx(p - 3 e_x)
    mv = warp_scalar(fx, f)
    t = rigid_register(mv, fx)
    # pull-back: the output samples mv at p + t, so t recovers +3
    assert abs(t.translation[0] - 3.0) < 0.5
    assert abs(t.translation[1]) < 0.5 and abs(t.translation[2]) < 0.5


def test_rigid_register_rotation():
    fx = make_phantom(5, (40, 40, 40))[0]
    angle = math.radians(10)
    mv = apply_rigid(fx, RigidTransform((0, 0, angle), (0, 0, 0)))
    t = rigid_register(mv, fx)
    # undoing the rotation needs the opposite angle about z
    assert abs(math.degrees(t.rotation[2]) + 10.0) < 1.0


def test_rigid_never_worse_than_identity(rng):
    a, b = rng.random((2, 16, 16, 16))
    t = rigid_register(a, b, iters=5, n_starts=2)
    assert global_ncc(b, apply_rigid(a, t)) >= global_ncc(b, a)
