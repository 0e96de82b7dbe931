from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lampe import pe_map
from lampe.errors import ConfigError, DomainError, MatrixFormatError, PreconditionError
from lampe.pe_map import (
    HEAD,
    MIDDLE,
    TAIL,
    MappingConfig,
    RelPositionMatrix,
    SelfExtendConfig,
    adaptive_group_pe,
    build_index_pe_matrix,
    build_pe_matrix,
    key_position,
    lampe_pe,
    query_position,
    region_partition,
    self_extend_pe,
    standard_causal_matrix,
    verify_monotonicity,
)

from conftest import all_configs, mapping_configs


def oracle_formula(i, j, l, m, s1, s2):
    """Closed-form offset map evaluated with Python Fractions, pair by pair."""
    d = i - j
    if d <= s1:
        return d
    if d < l - s2:
        return math.floor(Fraction(m - s1 - s2, l - s1 - s2) * (d - s1) + s1)
    return m - l + d


def oracle_index(i, j, l, m, s1, s2):
    d = i - j
    k = Fraction(m - s1 - s2, l - s1 - s2)
    b = Fraction((l - m) * s1, l - s1 - s2)
    if d <= s1:
        return i - j
    if d < l - s2:
        return math.floor(k * i + b) - math.floor(k * j)
    return (m - l + i) - j


class TestMappingConfig:
    def test_accepts_ten_token_config(self, ten_token):
        assert ten_token.transform.slope == Fraction(1, 4)
        assert ten_token.transform.offset == Fraction(9, 4)

    @pytest.mark.parametrize(
        "l,m,s1,s2",
        [
            (0, 0, 0, 0),
            (10, 11, 0, 0),
            (10, 0, 0, 0),
            (10, 7, -1, 0),
            (10, 7, 5, 5),  # s1 + s2 >= l
            (10, 7, 4, 5),  # empty middle
            (10, 6, 3, 3),  # m <= s1 + s2
        ],
    )
    def test_rejects_invalid(self, l, m, s1, s2):
        with pytest.raises(ConfigError):
            MappingConfig(l, m, s1, s2)

    def test_identity_allows_degenerate_regions(self):
        cfg = MappingConfig(10, 10, 4, 5)
        assert cfg.is_identity
        assert build_pe_matrix(cfg) == standard_causal_matrix(10)

    def test_rejects_non_integers(self):
        with pytest.raises(ConfigError):
            MappingConfig(10.0, 7, 3, 3)

    def test_dict_round_trip(self, ten_token, tmp_path):
        path = tmp_path / "cfg.json"
        pe_map.save_config(MappingConfig(10, 7, 3, 3, n=7), path)
        assert pe_map.load_config(path) == MappingConfig(10, 7, 3, 3, n=7)
        with pytest.raises(ConfigError, match="missing"):
            MappingConfig.from_dict({"l": 3})


class TestScalarMappings:
    @pytest.mark.parametrize("d,expected", [(2, 2), (5, 3), (9, 6)])
    def test_lampe_pe_examples(self, ten_token, d, expected):
        assert lampe_pe(9, 9 - d, ten_token) == expected

    def test_lampe_pe_identity(self):
        cfg = MappingConfig(12, 12, 2, 3)
        assert all(lampe_pe(i, j, cfg) == i - j for i in range(12) for j in range(i + 1))

    def test_lampe_pe_out_of_range(self, ten_token):
        with pytest.raises(PreconditionError):
            lampe_pe(3, 4, ten_token)
        with pytest.raises(PreconditionError):
            lampe_pe(10, 0, ten_token)

    def test_adaptive_group(self):
        assert adaptive_group_pe(9, 0, 10, 7) == 6
        assert adaptive_group_pe(5, 5, 10, 7) == 0
        assert all(adaptive_group_pe(i, 0, 8, 8) == i for i in range(8))
        with pytest.raises(PreconditionError):
            adaptive_group_pe(3, 0, 10, 11)

    def test_query_positions(self, ten_token):
        assert query_position(5, HEAD, ten_token) == 5
        assert query_position(9, MIDDLE, ten_token) == 4
        assert query_position(9, TAIL, ten_token) == 6
        with pytest.raises(DomainError):
            query_position(6, TAIL, ten_token)

    def test_key_positions(self, ten_token):
        assert key_position(0, MIDDLE, ten_token) == 0
        assert key_position(6, MIDDLE, ten_token) == 1
        assert key_position(2, TAIL, ten_token) == 2
        with pytest.raises(PreconditionError):
            key_position(10, HEAD, ten_token)

    def test_vector_positions_match_scalar(self, ten_token):
        for region in (HEAD, MIDDLE):
            q = pe_map.query_positions(region, ten_token)
            k = pe_map.key_positions(region, ten_token)
            assert q.tolist() == [query_position(i, region, ten_token) for i in range(10)]
            assert k.tolist() == [key_position(j, region, ten_token) for j in range(10)]

    def test_self_extend(self):
        cfg = SelfExtendConfig(w=4, G=2, n=8)
        assert self_extend_pe(3, 0, cfg) == 3
        assert self_extend_pe(6, 0, cfg) == 5
        assert cfg.extended_window == 12
        with pytest.raises(ConfigError):
            SelfExtendConfig(w=8, G=2, n=8)


class TestMatrices:
    def test_ten_token_row(self, ten_token):
        pe = build_pe_matrix(ten_token)
        assert pe.entries[9, ::-1].tolist() == [0, 1, 2, 3, 3, 3, 3, 4, 5, 6]

    def test_index_example(self, ten_token):
        assert build_index_pe_matrix(ten_token)[9, 4] == 3

    def test_identity_small(self):
        assert build_pe_matrix(MappingConfig(4, 4, 1, 1)) == standard_causal_matrix(4)

    def test_two_token(self):
        pe = build_pe_matrix(MappingConfig(2, 1, 0, 0))
        assert pe.lower_triangle().tolist() == [0, 0, 0]

    @pytest.mark.parametrize("l", [2, 3, 5, 8, 13])
    def test_against_fraction_oracle(self, l):
        for cfg in all_configs(l):
            f = build_pe_matrix(cfg)
            x = build_index_pe_matrix(cfg)
            args = (cfg.l, cfg.m, cfg.s1, cfg.s2)
            for i in range(l):
                for j in range(i + 1):
                    assert f[i, j] == oracle_formula(i, j, *args)
                    assert x[i, j] == oracle_index(i, j, *args)

    def test_upper_triangle_zero(self, ten_token):
        assert not np.triu(build_index_pe_matrix(ten_token).entries, 1).any()


class TestMonotonicity:
    def test_counterexample(self):
        e = np.zeros((4, 4), dtype=np.int64)
        e[3, :4] = [1, 2, 1, 0]
        e[2, :3] = [2, 1, 0]
        e[1, :2] = [1, 0]
        report = verify_monotonicity(RelPositionMatrix(e, m=3))
        assert not report.ok
        assert report.violation == (3, 0, 1)

    def test_standard_matrix_passes(self):
        assert verify_monotonicity(standard_causal_matrix(20)).ok

    @pytest.mark.parametrize("l", range(2, 25))
    def test_index_matrix_exhaustive_small(self, l):
        for cfg in all_configs(l):
            assert verify_monotonicity(build_index_pe_matrix(cfg)).ok, cfg

    @given(mapping_configs(max_l=200))
    def test_streaming_matches_materialized(self, cfg):
        assert pe_map.verify_config_monotonicity(cfg) == verify_monotonicity(
            build_index_pe_matrix(cfg)
        )


class TestPartition:
    def test_ten_token_offsets(self, ten_token):
        part = region_partition(ten_token)
        assert part.offsets(HEAD) == [0, 1, 2, 3]
        assert part.offsets(MIDDLE) == [4, 5, 6]
        assert part.offsets(TAIL) == [7, 8, 9]
        assert part.counts() == {HEAD: 34, MIDDLE: 15, TAIL: 6}

    def test_no_head_or_tail_width(self):
        part = region_partition(MappingConfig(8, 5, 0, 0))
        assert part.offsets(HEAD) == [0]
        assert part.counts()[TAIL] == 0
        assert part.offsets(MIDDLE) == list(range(1, 8))

    @given(mapping_configs())
    def test_disjoint_and_exhaustive(self, cfg):
        part = region_partition(cfg)
        cover = part.mask(HEAD).astype(int) + part.mask(MIDDLE) + part.mask(TAIL)
        tri = np.tri(cfg.l, dtype=bool)
        assert np.all(cover[tri] == 1) and np.all(cover[~tri] == 0)
        assert sum(part.counts().values()) == cfg.l * (cfg.l + 1) // 2
        rows, cols = part.middle
        assert all(cfg.region(i, j) == MIDDLE for i, j in zip(rows.tolist(), cols.tolist()))


class TestProperties:
    @given(mapping_configs(max_l=96))
    def test_range_and_corner(self, cfg):
        for pe in (build_pe_matrix(cfg), build_index_pe_matrix(cfg)):
            tri = pe.lower_triangle()
            assert tri.min() >= 0 and tri.max() <= cfg.m - 1
            assert not np.diag(pe.entries).any()
            if cfg.s2 >= 1:
                assert pe[cfg.l - 1, 0] == cfg.m - 1

    @given(mapping_configs(max_l=96))
    def test_boundary_chains(self, cfg):
        e = build_index_pe_matrix(cfg).entries
        for i in range(cfg.s1 + 1, cfg.l):
            assert e[i, i - cfg.s1 - 1] >= e[i, i - cfg.s1]
        if cfg.s2:
            start = cfg.l - cfg.s2
            for i in range(start, cfg.l):
                assert e[i, i - start] >= e[i, i - start + 1]

    @given(mapping_configs(max_l=96))
    def test_floor_discrepancy(self, cfg):
        gap = build_pe_matrix(cfg).entries - build_index_pe_matrix(cfg).entries
        assert np.abs(gap).max() <= 1
        assert not (gap.astype(bool) & ~region_partition(cfg).mask(MIDDLE)).any()

    @given(mapping_configs(max_l=2000))
    def test_transform_identities(self, cfg):
        t = cfg.transform
        assert 0 < t.slope <= 1
        assert t.slope * cfg.s1 + t.offset == cfg.s1
        assert t.slope * (cfg.l - cfg.s2) + t.offset == cfg.m - cfg.s2

    @given(st.integers(2, 64), st.integers(0, 30))
    def test_identity_when_m_equals_l(self, l, s):
        s1 = min(s, l - 1)
        cfg = MappingConfig(l, l, s1, 0)
        causal = standard_causal_matrix(l)
        assert build_pe_matrix(cfg) == causal and build_index_pe_matrix(cfg) == causal

    @given(st.integers(2, 64), st.integers(1, 8), st.integers(0, 63))
    def test_self_extend_bound(self, n, G, w):
        w = w % n
        cfg = SelfExtendConfig(w, G, n)
        values = [self_extend_pe(d, 0, cfg) for d in range(cfg.extended_window)]
        assert values == sorted(values)
        assert max(values) < n

    def test_audit_all_checks_pass(self, ten_token):
        report = pe_map.audit_config(ten_token)
        assert report["ok"], report
        assert set(report["checks"]) >= {
            "monotonicity",
            "range",
            "boundary",
            "partition",
            "floor_discrepancy",
            "transform_identities",
        }


class TestFileFormats:
    def test_csv_round_trip(self, ten_token, tmp_path):
        pe = build_pe_matrix(ten_token)
        path = tmp_path / "pe.csv"
        pe_map.write_csv(pe, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "i,j,value"
        assert len(lines) == 1 + 55
        assert pe_map.read_csv(path) == pe

    def test_binary_layout(self, ten_token):
        pe = build_pe_matrix(ten_token)
        blob = pe_map.to_bytes(pe)
        assert blob[:4] == b"LPE1"
        assert np.frombuffer(blob[4:20], dtype="<u4").tolist() == [10, 7, 3, 3]
        payload = np.frombuffer(blob[20:], dtype="<i8")
        assert payload.tolist() == pe.lower_triangle().tolist()
        # row-major lower triangle: (0,0), (1,0), (1,1), (2,0), ...
        assert payload[:4].tolist() == [pe[0, 0], pe[1, 0], pe[1, 1], pe[2, 0]]

    def test_binary_round_trip(self, ten_token, tmp_path):
        pe = build_index_pe_matrix(ten_token)
        path = tmp_path / "pe.lpe"
        pe_map.write_binary(pe, path)
        back = pe_map.read_matrix(path)
        assert back == pe and (back.m, back.s1, back.s2) == (7, 3, 3)

    def test_bad_binary(self):
        with pytest.raises(MatrixFormatError):
            pe_map.from_bytes(b"XXXX" + bytes(16))
        with pytest.raises(MatrixFormatError):
            pe_map.from_bytes(pe_map.to_bytes(standard_causal_matrix(3))[:-8])

    def test_bad_csv(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("i,j,value\n0,0,0\n1,0,1\n")
        with pytest.raises(MatrixFormatError):
            pe_map.read_csv(path)
