import json

import pytest
from hypothesis import given, strategies as st

from advflow.flows import (
    ClassSpec,
    Dataset,
    Direction,
    Flow,
    Packet,
    SyntheticSpec,
    US,
    flow_from_record,
    flow_to_record,
    load_flows,
    micros_from_text,
    micros_to_text,
    save_flows,
    split,
    synthesize,
)


def make_flow(fid="f1", label="a", gaps=(0, 1000, 2000), lengths=None, dirs=None):
    n = len(gaps)
    lengths = lengths or [100] * n
    dirs = dirs or [Direction.FWD] * n
    packets = tuple(Packet(g, l, d) for g, l, d in zip(gaps, lengths, dirs))
    return Flow(fid, label, packets)


def test_micros_from_text_basic():
    assert micros_from_text("0.000001") == 1
    assert micros_from_text("1.5") == 1_500_000
    assert micros_from_text("0") == 0
    assert micros_from_text("2") == 2 * US
    assert micros_from_text(".25") == 250_000


def test_micros_from_text_rejects_submicro_and_negative():
    with pytest.raises(ValueError):
        micros_from_text("0.0000001")
    with pytest.raises(ValueError):
        micros_from_text("-1.0")


@given(st.integers(min_value=0, max_value=10**13))
def test_micros_text_round_trip(us):
    assert micros_from_text(micros_to_text(us)) == us


def test_packet_validation():
    with pytest.raises(ValueError):
        Packet(-1, 100, Direction.FWD)
    with pytest.raises(ValueError):
        Packet(0, 0, Direction.FWD)
    with pytest.raises(ValueError):
        Packet(0, 1501, Direction.FWD)


def test_flow_validation():
    with pytest.raises(ValueError):
        make_flow(gaps=(5, 1000))  # first iat must be zero
    with pytest.raises(ValueError):
        Flow("f", "a", (Packet(0, 100, Direction.FWD),))
    with pytest.raises(ValueError):
        make_flow(gaps=(0, 0))  # zero duration


def test_times_us_cumulative():
    f = make_flow(gaps=(0, 10, 20, 5))
    assert f.times_us() == [0, 10, 30, 35]
    assert f.duration_us == 35


def test_subflow_indices():
    f = make_flow(
        gaps=(0, 1, 1, 1),
        dirs=[Direction.FWD, Direction.BWD, Direction.FWD, Direction.BWD],
    )
    assert f.subflow(Direction.FWD) == [0, 2]
    assert f.subflow(Direction.BWD) == [1, 3]


def test_flow_record_round_trip():
    f = make_flow(
        gaps=(0, 1500, 2),
        lengths=[40, 1500, 777],
        dirs=[Direction.FWD, Direction.BWD, Direction.FWD],
    )
    assert flow_from_record(flow_to_record(f)) == f


def test_save_load_round_trip(tmp_path):
    ds = synthesize(
        SyntheticSpec(
            classes={"a": ClassSpec(-3.0, 0.5), "b": ClassSpec(-2.0, 0.5)}, seed=3
        ),
        4,
    )
    path = tmp_path / "flows.jsonl"
    save_flows(ds, path)
    back = load_flows(path)
    assert back.flows == ds.flows
    assert back.classes == ds.classes


def test_save_preserves_iat_text_exactly(tmp_path):
    f = make_flow(gaps=(0, 123456, 1))
    path = tmp_path / "one.jsonl"
    save_flows(Dataset((f,), ("a",)), path)
    raw = path.read_text()
    assert "0.123456" in raw and "0.000001" in raw


def test_load_drops_single_packet_flows(tmp_path, caplog):
    path = tmp_path / "flows.jsonl"
    rows = [
        {"id": "solo", "label": "a", "packets": [["0.000000", 100, 1]]},
        {
            "id": "pair",
            "label": "a",
            "packets": [["0.000000", 100, 1], ["0.001000", 200, -1]],
        },
    ]
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    ds = load_flows(path)
    assert [f.id for f in ds.flows] == ["pair"]


def test_dataset_rejects_duplicates_and_unknown_labels():
    f = make_flow()
    with pytest.raises(ValueError):
        Dataset((f, f), ("a",))
    with pytest.raises(ValueError):
        Dataset((f,), ("b",))


def test_synthesize_is_deterministic():
    spec = SyntheticSpec(
        classes={"a": ClassSpec(-3.0, 0.5), "b": ClassSpec(-2.0, 0.5)}, seed=7
    )
    assert synthesize(spec, 5) == synthesize(spec, 5)


def test_synthesize_bidirectional_floor():
    spec = SyntheticSpec(
        classes={"a": ClassSpec(-3.0, 0.5), "b": ClassSpec(-2.0, 0.5)}, seed=1
    )
    for f in synthesize(spec, 10).flows:
        assert len(f.subflow(Direction.FWD)) >= 2
        assert len(f.subflow(Direction.BWD)) >= 2


def test_split_is_stratified_and_deterministic():
    spec = SyntheticSpec(
        classes={"a": ClassSpec(-3.0, 0.5), "b": ClassSpec(-2.0, 0.5)}, seed=2
    )
    ds = synthesize(spec, 20)
    train, test = split(ds, 0.75, seed=0)
    again, _ = split(ds, 0.75, seed=0)
    assert train.flows == again.flows
    assert len(train) + len(test) == len(ds)
    for part in (train, test):
        labels = [f.label for f in part.flows]
        assert labels.count("a") == labels.count("b")
    assert {f.id for f in train.flows}.isdisjoint(f.id for f in test.flows)


def test_class_spec_validation():
    with pytest.raises(ValueError):
        ClassSpec(0.0, 0.0)
    with pytest.raises(ValueError):
        ClassSpec(0.0, 1.0, n_packets=(2, 3))
    with pytest.raises(ValueError):
        SyntheticSpec(classes={"only": ClassSpec(0.0, 1.0)})
