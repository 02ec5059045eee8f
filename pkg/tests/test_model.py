"""Tests for model construction, evaluation, augmentation and serialization."""

import json
import math

import numpy as np
import pytest

from estnet.errors import ConfigError, DimensionError, ParameterError
from estnet.model import (
    CouplingSpec,
    InterconnectedModel,
    SubsystemSpec,
    TimeVaryingMatrix,
    TvEntry,
    augment,
    compute_bounds,
    emit_model,
    evaluate,
    example_system,
    load_model,
    model_to_json,
)
from estnet.numerics import spectral_norm


def scalar_subsystem(name, a=0.5, c=1.0, qw=0.1, qv=0.1):
    return SubsystemSpec(
        name=name,
        A=TimeVaryingMatrix.constant([[a]]),
        Gamma=TimeVaryingMatrix.constant([[1.0]]),
        C=TimeVaryingMatrix.constant([[c]]),
        D=TimeVaryingMatrix.constant([[1.0]]),
        Qw=np.array([[qw]]),
        Qv=np.array([[qv]]),
    )


def sv2x2(a, b, c, d):
    """Closed-form largest singular value of [[a,b],[c,d]]."""
    s = a * a + b * b + c * c + d * d
    det = a * d - b * c
    disc = math.sqrt(max(s * s - 4.0 * det * det, 0.0))
    return math.sqrt((s + disc) / 2.0)


class TestTimeVaryingMatrix:
    def test_constant_evaluation(self):
        tv = TimeVaryingMatrix.constant([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(tv.value(0), tv.value(7))
        assert tv.is_constant()

    def test_sinusoid_evaluation(self):
        tv = TimeVaryingMatrix(
            1, 1, entries=[TvEntry(c0=0.2, cos_terms=((0.2, 1.0, 0.0),))]
        )
        assert tv.value(0)[0, 0] == pytest.approx(0.4)
        assert tv.value(3)[0, 0] == pytest.approx(0.2 + 0.2 * math.cos(3.0))
        assert tv.bound_matrix()[0, 0] == pytest.approx(0.4)

    def test_table_clamps_last_step(self):
        tv = TimeVaryingMatrix(1, 1, table=[[[1.0]], [[2.0]]])
        assert tv.value(1)[0, 0] == 2.0
        assert tv.value(9)[0, 0] == 2.0

    def test_negative_step_rejected(self):
        with pytest.raises(ParameterError):
            TimeVaryingMatrix.constant([[1.0]]).value(-1)

    def test_entry_count_checked(self):
        with pytest.raises(DimensionError):
            TimeVaryingMatrix(2, 2, entries=[TvEntry()])

    def test_json_roundtrip_sinusoid(self):
        tv = TimeVaryingMatrix(
            1, 2,
            entries=[
                TvEntry(c0=0.1, sin_terms=((0.3, 1.0, 0.5),)),
                TvEntry(c0=-0.2),
            ],
        )
        assert TimeVaryingMatrix.from_json(tv.to_json()) == tv

    def test_json_constant_shorthand(self):
        tv = TimeVaryingMatrix.from_json([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(tv.value(5), np.eye(2))


class TestValidation:
    def test_duplicate_names(self):
        with pytest.raises(ConfigError):
            InterconnectedModel([scalar_subsystem("a"), scalar_subsystem("a")], [])

    def test_qv_must_be_pd(self):
        with pytest.raises(ConfigError, match="bad"):
            InterconnectedModel([scalar_subsystem("bad", qv=-0.1)], [])

    def test_self_coupling_rejected(self):
        with pytest.raises(ConfigError):
            InterconnectedModel(
                [scalar_subsystem("a")],
                [CouplingSpec("a", "a", TimeVaryingMatrix.constant([[0.1]]))],
            )

    def test_duplicate_coupling_rejected(self):
        blk = TimeVaryingMatrix.constant([[0.1]])
        with pytest.raises(ConfigError):
            InterconnectedModel(
                [scalar_subsystem("a"), scalar_subsystem("b")],
                [CouplingSpec("a", "b", blk), CouplingSpec("a", "b", blk)],
            )

    def test_coupling_shape_checked(self):
        with pytest.raises(ConfigError):
            InterconnectedModel(
                [scalar_subsystem("a"), scalar_subsystem("b")],
                [CouplingSpec("a", "b", TimeVaryingMatrix.constant(np.eye(2)))],
            )


class TestExampleSystem:
    def test_decoupled_at_zero(self):
        m = example_system(0.0)
        assert m.l == 3
        assert all(not s for s in m.omega)

    def test_neighbor_sets_g4(self):
        m = example_system(4.0)
        assert m.omega[0] == {1, 2}
        assert m.omega[1] == {0, 2}
        assert m.omega[2] == {0, 1}
        assert m.sigma[0] == {1, 2}
        assert m.sigma[1] == {2}
        assert m.sigma[2] == set()
        assert m.neighbor_pairs() == [(0, 1), (0, 2), (1, 2)]

    def test_measurement_dims(self):
        m = example_system(1.0)
        assert [s.m for s in m.subsystems] == [1, 2, 2]

    def test_matrices_at_zero(self):
        snap = evaluate(example_system(1.0), 0)
        np.testing.assert_allclose(snap.A[0], [[0.2, 0.4], [0.2, 0.2]])
        np.testing.assert_allclose(snap.C[0], [[0.6, 0.4]])
        np.testing.assert_allclose(snap.coupling[(0, 2)], 0.1 * np.eye(2))
        np.testing.assert_allclose(snap.coupling[(2, 0)], np.zeros((2, 2)))

    def test_coupling_scales_with_g(self):
        snap = evaluate(example_system(4.0), 0)
        np.testing.assert_allclose(snap.coupling[(0, 2)], 0.4 * np.eye(2))


class TestAugment:
    def test_single_subsystem(self):
        m = InterconnectedModel([scalar_subsystem("a", a=0.7)], [])
        A, Gamma, C, D, Qw, Qv = augment(m, 0)
        assert A[0, 0] == pytest.approx(0.7)
        assert Gamma.shape == C.shape == D.shape == (1, 1)
        assert Qw[0, 0] == pytest.approx(0.1)

    def test_decoupled_norm_is_max(self):
        m = InterconnectedModel(
            [scalar_subsystem("a", a=0.3), scalar_subsystem("b", a=0.8)], []
        )
        A = augment(m, 0)[0]
        assert spectral_norm(A) == pytest.approx(0.8)

    def test_offdiagonal_block_positions(self):
        m = example_system(1.0)
        A = augment(m, 0)[0]
        snap = evaluate(m, 0)
        np.testing.assert_allclose(A[0:2, 4:6], 0.1 * np.eye(2))  # 1 <- 3
        np.testing.assert_allclose(A[2:4, 0:2], 0.1 * np.eye(2))  # 2 <- 1
        np.testing.assert_allclose(A[4:6, 2:4], 0.1 * np.eye(2))  # 3 <- 2
        np.testing.assert_allclose(A[0:2, 2:4], 0.0)
        for i in range(3):
            np.testing.assert_allclose(A[2 * i : 2 * i + 2, 2 * i : 2 * i + 2], snap.A[i])


class TestBounds:
    def test_constant_matrix_exact(self):
        m = InterconnectedModel([scalar_subsystem("a", a=-0.6)], [])
        b = compute_bounds(m)
        assert b.alpha[0] == pytest.approx(0.6)

    def test_example_alpha1_closed_form(self):
        b = compute_bounds(example_system(4.0))
        assert b.alpha[0] == pytest.approx(sv2x2(0.2, 0.4, 0.3, 0.2), abs=1e-12)
        assert b.alpha[0] == pytest.approx(0.5562, abs=1e-4)
        assert b.alpha_pair[(0, 2)] == pytest.approx(0.4)
        assert b.alpha_pair[(2, 0)] == 0.0

    def test_sampled_never_exceeds_bound(self):
        b = compute_bounds(example_system(2.0), sample_horizon=128)
        for i in range(3):
            assert b.sampled_alpha[i] <= b.alpha[i] + 1e-9
        for key, v in b.sampled_alpha_pair.items():
            assert v <= b.alpha_pair[key] + 1e-9

    def test_augmented_bounds_dominate_samples(self):
        m = example_system(3.0)
        b = compute_bounds(m)
        for k in range(32):
            A = augment(m, k)[0]
            assert spectral_norm(A) <= b.delta_a + 1e-9


class TestSerialization:
    def test_roundtrip_identity(self):
        m = example_system(1.0)
        m2 = load_model(emit_model(m))
        assert model_to_json(m2) == model_to_json(m)
        for k in (0, 3, 11):
            np.testing.assert_allclose(augment(m, k)[0], augment(m2, k)[0])

    def test_bad_json_rejected(self):
        with pytest.raises(ConfigError):
            load_model("{not json")

    def test_missing_subsystems_rejected(self):
        with pytest.raises(ConfigError):
            load_model(json.dumps({"couplings": []}))

    def test_bad_covariance_names_subsystem(self):
        doc = model_to_json(example_system(1.0))
        doc["subsystems"][1]["Qv"] = [[-0.1, 0.0], [0.0, 0.1]]
        with pytest.raises(ConfigError, match="S2"):
            load_model(doc)

    def test_unknown_coupling_name_rejected(self):
        doc = model_to_json(example_system(1.0))
        doc["couplings"][0]["source"] = "nope"
        with pytest.raises(ConfigError):
            load_model(doc)
