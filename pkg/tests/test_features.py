import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advflow.features import (
    ChunkType,
    Field,
    FeatureSpec,
    Kind,
    Normalizer,
    Scope,
    SolverClass,
    active_idle_periods_us,
    extract,
    extract_exact,
    extract_matrix,
    load_profile,
    microburst_count,
    profile,
    profile_names,
)
from advflow.flows import ClassSpec, Direction, Flow, Packet, SyntheticSpec, synthesize


def flow_from_gaps(gaps, lengths=None, dirs=None, fid="f", label="a"):
    lengths = lengths or [100] * len(gaps)
    dirs = dirs or [Direction.FWD] * len(gaps)
    return Flow(fid, label, tuple(Packet(g, l, d) for g, l, d in zip(gaps, lengths, dirs)))


# Four packets alternating fwd/bwd, hand-checked numbers used throughout.
HAND = flow_from_gaps(
    gaps=[0, 2000, 3000, 5000],
    lengths=[100, 200, 1500, 40],
    dirs=[Direction.FWD, Direction.BWD, Direction.FWD, Direction.BWD],
)


def test_profile_widths():
    assert profile_names() == ["app", "qoe", "vpn"]
    assert len(profile("app")) == 22
    assert len(profile("vpn")) == 22
    assert len(profile("qoe")) == 14


def test_unknown_profile():
    with pytest.raises(ValueError, match="unknown profile"):
        profile("nope")


@pytest.mark.parametrize(
    "kind,field,expected",
    [
        (Kind.MEAN, Field.IAT, SolverClass.LINEAR_EQ),
        (Kind.SUM, Field.LENGTH, SolverClass.LINEAR_EQ),
        (Kind.COUNT, Field.PACKETS, SolverClass.LINEAR_EQ),
        (Kind.RATE, Field.BYTES, SolverClass.LINEAR_EQ),
        (Kind.MIN, Field.IAT, SolverClass.DISJUNCTIVE_EXTREMUM),
        (Kind.MAX, Field.LENGTH, SolverClass.DISJUNCTIVE_EXTREMUM),
        (Kind.STD, Field.IAT, SolverClass.RECOMPUTE_ONLY),
        (Kind.MEDIAN, Field.LENGTH, SolverClass.RECOMPUTE_ONLY),
        (Kind.UNIQUE, Field.LENGTH, SolverClass.RECOMPUTE_ONLY),
        (Kind.BURSTS, Field.IAT, SolverClass.RECOMPUTE_ONLY),
        (Kind.MIN, Field.ACTIVE, SolverClass.RECOMPUTE_ONLY),
        (Kind.MAX, Field.IDLE, SolverClass.RECOMPUTE_ONLY),
    ],
)
def test_solver_class(kind, field, expected):
    assert FeatureSpec("x", kind, field).solver_class is expected


@pytest.mark.parametrize(
    "kind,field,expected",
    [
        (Kind.SUM, Field.IAT, ChunkType.ADDITIVE),
        (Kind.COUNT, Field.PACKETS, ChunkType.ADDITIVE),
        (Kind.MEAN, Field.IAT, ChunkType.PER_CHUNK),
        (Kind.MAX, Field.LENGTH, ChunkType.PER_CHUNK),
        (Kind.RATE, Field.BYTES, ChunkType.PER_CHUNK),
        (Kind.MEAN, Field.ACTIVE, ChunkType.IGNORED),
        (Kind.BURSTS, Field.IAT, ChunkType.IGNORED),
        (Kind.UNIQUE, Field.LENGTH, ChunkType.IGNORED),
    ],
)
def test_chunk_type(kind, field, expected):
    assert FeatureSpec("x", kind, field).chunk_type is expected


def test_app_features_hand_checked():
    vals = dict(zip([fs.name for fs in profile("app")], extract(HAND, profile("app"))))
    # fwd packets at t=0 and t=5000us; bwd at t=2000us and t=10000us
    assert vals["fwd_iat_sum"] == pytest.approx(0.005)
    assert vals["fwd_iat_min"] == vals["fwd_iat_max"] == vals["fwd_iat_mean"] == pytest.approx(0.005)
    assert vals["fwd_iat_std"] == 0.0
    assert vals["bwd_iat_mean"] == pytest.approx(0.008)
    assert vals["fwd_len_sum"] == 1600.0
    assert vals["fwd_len_min"] == 100.0
    assert vals["fwd_len_max"] == 1500.0
    assert vals["fwd_len_mean"] == 800.0
    assert vals["fwd_len_std"] == pytest.approx(700.0)
    assert vals["bwd_len_mean"] == 120.0
    assert vals["bwd_len_std"] == pytest.approx(80.0)
    assert vals["fwd_pkt_count"] == 2.0
    assert vals["bwd_pkt_count"] == 2.0


def test_qoe_features_hand_checked():
    vals = dict(zip([fs.name for fs in profile("qoe")], extract(HAND, profile("qoe"))))
    assert vals["len_min"] == 40.0
    assert vals["len_max"] == 1500.0
    assert vals["len_mean"] == 460.0
    assert vals["len_median"] == 150.0
    assert vals["len_std"] == pytest.approx(math.sqrt(363800.0))
    assert vals["iat_min"] == pytest.approx(0.002)
    assert vals["iat_max"] == pytest.approx(0.005)
    assert vals["iat_mean"] == pytest.approx(0.01 / 3)
    assert vals["iat_median"] == pytest.approx(0.003)
    assert vals["total_bytes"] == 1840.0
    assert vals["total_packets"] == 4.0
    assert vals["unique_lengths"] == 4.0
    assert vals["microbursts"] == 0.0


def test_vpn_rates_and_idle_defaults():
    vals = dict(zip([fs.name for fs in profile("vpn")], extract(HAND, profile("vpn"))))
    assert vals["packets_per_s"] == pytest.approx(400.0)
    assert vals["bytes_per_s"] == pytest.approx(184000.0)
    # no gap exceeds 0.1s, so one active span covers the flow and idle is empty
    assert vals["active_mean"] == pytest.approx(0.01)
    assert vals["active_std"] == 0.0
    assert vals["idle_min"] == vals["idle_max"] == vals["idle_mean"] == 0.0


def test_active_idle_periods():
    f = flow_from_gaps([0, 50_000, 200_000, 50_000])
    active, idle = active_idle_periods_us(f)
    assert active == [50_000, 50_000]
    assert idle == [200_000]


def test_active_idle_lone_trailing_packet():
    f = flow_from_gaps([0, 200_000])
    active, idle = active_idle_periods_us(f)
    assert active == [0, 0]
    assert idle == [200_000]


def test_microburst_count_docstring_case():
    f = flow_from_gaps([0, 500, 500, 200_000, 500])
    assert microburst_count(f) == 2
    assert microburst_count(flow_from_gaps([0, 5_000, 5_000])) == 0
    assert microburst_count(flow_from_gaps([0, 500, 500, 500])) == 1


flows = st.sampled_from(
    synthesize(
        SyntheticSpec(
            classes={"a": ClassSpec(-4.0, 1.2), "b": ClassSpec(-1.5, 0.8)}, seed=99
        ),
        12,
    ).flows
)


@settings(max_examples=60, deadline=None)
@given(flows, st.sampled_from(profile_names()))
def test_exact_matches_float_extraction(flow, pname):
    prof = profile(pname)
    vals = dict(zip([fs.name for fs in prof], extract(flow, prof)))
    exact = extract_exact(flow, prof)
    for name, fr in exact.items():
        assert vals[name] == pytest.approx(float(fr), rel=1e-9, abs=1e-12)
    # only the square-root features lack an exact form
    missing = {fs.name for fs in prof} - set(exact)
    assert all(n.endswith("std") for n in missing)


def test_normalizer_round_trip():
    prof = profile("app")
    ds = synthesize(
        SyntheticSpec(classes={"a": ClassSpec(-3.0, 0.6), "b": ClassSpec(-2.0, 0.6)}, seed=4),
        8,
    )
    mat = extract_matrix(ds.flows, prof)
    norm = Normalizer.fit(mat, prof)
    z = norm.transform(mat)
    assert z.min() >= 0.0 and z.max() <= 1.0
    span = norm.hi - norm.lo
    live = span > 0
    back = norm.inverse(z)
    assert np.allclose(back[:, live], mat[:, live])
    again = Normalizer.from_json(json.loads(json.dumps(norm.to_json())))
    assert np.array_equal(again.lo, norm.lo) and np.array_equal(again.hi, norm.hi)
    assert again.names == norm.names


def test_normalizer_degenerate_column_maps_to_zero():
    norm = Normalizer(np.array([5.0, 0.0]), np.array([5.0, 10.0]), ["c0", "c1"])
    z = norm.transform(np.array([5.0, 5.0]))
    assert z[0] == 0.0
    assert z[1] == 0.5


def test_normalizer_save_load(tmp_path):
    norm = Normalizer(np.array([0.0]), np.array([2.0]), ["only"])
    p = tmp_path / "norm.json"
    norm.save(p)
    back = Normalizer.load(p)
    assert back.names == ["only"]
    assert back.transform(np.array([1.0]))[0] == 0.5


def test_load_profile_rejects_duplicates(tmp_path):
    p = tmp_path / "prof.json"
    p.write_text(
        json.dumps(
            [
                {"name": "x", "kind": "mean", "field": "iat"},
                {"name": "x", "kind": "sum", "field": "iat"},
            ]
        )
    )
    with pytest.raises(ValueError, match="duplicate feature name"):
        load_profile(p)


def test_load_profile_round_trip(tmp_path):
    p = tmp_path / "prof.json"
    p.write_text(
        json.dumps(
            [
                {"name": "m", "kind": "mean", "field": "iat", "scope": "fwd"},
                {"name": "s", "kind": "sum", "field": "length"},
            ]
        )
    )
    prof = load_profile(p)
    assert [fs.name for fs in prof] == ["m", "s"]
    assert prof[0].scope is Scope.FWD
    assert prof[1].scope is Scope.BI
