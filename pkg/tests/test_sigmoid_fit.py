import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lampe import sigmoid_fit
from lampe.errors import DomainError, InsufficientDataError, RankError
from lampe.sigmoid_fit import (
    ObservationPoint,
    SigmoidParams,
    config_for_length,
    default_ceiling,
    fit_sigmoid,
    mapping_length,
)

PLANTED = SigmoidParams(L=6144.0, a=2e-5, b=-1.0)
LENGTHS = [4096, 8192, 16384, 32768]


def planted_points(params, lengths):
    # generator written out by hand, independent of SigmoidParams.__call__
    return [
        ObservationPoint(l, params.L / (1.0 + math.exp(-(params.a * l + params.b))))
        for l in lengths
    ]


class TestMappingLength:
    def test_midpoint(self):
        p = SigmoidParams(L=100.0, a=0.01, b=-5.0)
        assert mapping_length(500, p) == 50

    def test_worked_value(self):
        p = SigmoidParams(L=6144.0, a=0.0002, b=-2.0)
        assert mapping_length(10000, p) == 3072

    def test_saturates_towards_ceiling(self):
        p = SigmoidParams(L=6144.0, a=0.0002, b=-2.0)
        assert mapping_length(10**7, p) == 6144

    def test_clamped_to_input_length(self):
        assert mapping_length(10, SigmoidParams(L=6144.0, a=0.0, b=5.0)) == 10
        assert mapping_length(50, SigmoidParams(L=10.0, a=0.0, b=-50.0)) == 1

    def test_round_half_away_from_zero(self):
        # L * sigmoid(0) = 5 / 2 exactly
        assert mapping_length(100, SigmoidParams(L=5.0, a=0.0, b=0.0)) == 3

    @given(st.floats(1e-6, 1e-2), st.floats(-10, 10), st.integers(1, 200_000))
    def test_bounded(self, a, b, l):
        p = SigmoidParams(L=3072.0, a=a, b=b)
        m = mapping_length(l, p)
        assert 1 <= m <= min(l, 3072)

    @given(st.floats(1e-6, 1e-2), st.floats(-10, 10), st.integers(1, 100_000))
    def test_monotone_in_length(self, a, b, l):
        p = SigmoidParams(L=3072.0, a=a, b=b)
        assert mapping_length(l, p) <= mapping_length(l + 1, p)


class TestDefaultCeiling:
    @pytest.mark.parametrize("n,expected", [(4096, 3072), (8192, 6144), (4, 3)])
    def test_values(self, n, expected):
        assert default_ceiling(n) == expected

    def test_too_small(self):
        with pytest.raises(DomainError):
            default_ceiling(3)


class TestFit:
    def test_planted_recovery(self):
        fit = fit_sigmoid(planted_points(PLANTED, LENGTHS), PLANTED.L)
        assert fit.a == pytest.approx(PLANTED.a, rel=1e-6)
        assert fit.b == pytest.approx(PLANTED.b, rel=1e-6)
        assert fit.residual < 1e-6
        assert fit.points_used == 4

    def test_two_points_interpolate(self):
        pts = [ObservationPoint(1000, 30.0), ObservationPoint(3000, 70.0)]
        fit = fit_sigmoid(pts, 100.0)
        assert fit(1000) == pytest.approx(30.0, abs=1e-9)
        assert fit(3000) == pytest.approx(70.0, abs=1e-9)
        assert fit.residual < 1e-9

    def test_order_invariant(self, rng):
        pts = planted_points(PLANTED, LENGTHS + [6000, 24000])
        noisy = [ObservationPoint(p.input_length, p.optimal_mapping_length + rng.normal(0, 20)) for p in pts]
        base = fit_sigmoid(noisy, PLANTED.L)
        for _ in range(5):
            perm = [noisy[i] for i in rng.permutation(len(noisy))]
            shuffled = fit_sigmoid(perm, PLANTED.L)
            assert shuffled.a == pytest.approx(base.a, rel=1e-12)
            assert shuffled.b == pytest.approx(base.b, rel=1e-12, abs=1e-12)
        assert base.residual > 0

    def test_errors(self):
        with pytest.raises(InsufficientDataError):
            fit_sigmoid([ObservationPoint(100, 10)], 50.0)
        with pytest.raises(DomainError):
            fit_sigmoid([ObservationPoint(100, 10), ObservationPoint(200, 50)], 50.0)
        with pytest.raises(RankError):
            fit_sigmoid([ObservationPoint(100, 10), ObservationPoint(100, 20)], 50.0)

    @given(st.floats(5e-6, 1e-4), st.floats(-3, 0))
    def test_round_trip_within_one_token(self, a, b):
        planted = SigmoidParams(L=3072.0, a=a, b=b)
        n = 4096
        probe = np.linspace(n, 16 * n, 25).astype(int)
        vals = planted(probe)
        if vals.min() < 0.05 * planted.L or vals.max() > 0.95 * planted.L:
            return
        fit = fit_sigmoid(planted_points(planted, [n, 2 * n, 4 * n, 16 * n]), planted.L)
        for l, v in zip(probe, vals):
            assert abs(mapping_length(int(l), fit) - v) <= 1


class TestIO:
    def test_points_csv_round_trip(self, tmp_path):
        pts = planted_points(PLANTED, LENGTHS)
        path = tmp_path / "points.csv"
        sigmoid_fit.write_points_csv(pts, path)
        assert sigmoid_fit.read_points_csv(path) == pts

    def test_params_json(self, tmp_path):
        fit = fit_sigmoid(planted_points(PLANTED, LENGTHS), PLANTED.L)
        path = tmp_path / "params.json"
        sigmoid_fit.save_params(fit, path)
        import json

        assert set(json.loads(path.read_text())) == {"L", "a", "b", "residual", "points_used"}
        assert sigmoid_fit.load_params(path) == fit


def test_config_for_length_identity_inside_window():
    cfg = config_for_length(4000, 4096, PLANTED, 256, 256)
    assert cfg.is_identity
    cfg = config_for_length(40000, 4096, SigmoidParams(3072.0, 1e-4, 0.0), 256, 256)
    assert cfg.m == mapping_length(40000, SigmoidParams(3072.0, 1e-4, 0.0)) and not cfg.is_identity
