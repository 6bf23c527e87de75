import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advflow.attacks import (
    AmlConfig,
    Mask,
    _lower_max,
    _project,
    _raise_min,
    attack_vector,
    derive_mask,
    fd_gradient,
    pgd_attack,
    reachable_box,
    zoo_attack,
)
from advflow.features import extract, profile, profile_names
from advflow.flows import ClassSpec, Direction, Flow, Packet, SyntheticSpec, synthesize
from advflow.models import ForestClassifier, MlpClassifier
from advflow.search import random_plan
from advflow.smt.plan import reconstruct, validate
from advflow.threat import ThreatModel


def make_flow():
    return Flow(
        "t0",
        "a",
        (
            Packet(0, 100, Direction.FWD),
            Packet(2000, 200, Direction.BWD),
            Packet(3000, 1500, Direction.FWD),
            Packet(5000, 40, Direction.BWD),
        ),
    )


def test_aml_config_validation():
    with pytest.raises(ValueError):
        AmlConfig(method="fgsm")
    with pytest.raises(ValueError):
        AmlConfig(alpha=0.0)
    with pytest.raises(ValueError):
        AmlConfig(steps=0)
    with pytest.raises(ValueError):
        AmlConfig(zoo_h=-1.0)


def test_aml_config_from_dict_ignores_junk():
    cfg = AmlConfig.from_dict({"alpha": 0.1, "method": "zoo", "bogus": 1})
    assert cfg.alpha == 0.1
    assert cfg.method == "zoo"
    assert cfg.steps == 100


END_HOST_MASKS = {
    "fwd_iat_sum": Mask.FREE,
    "fwd_iat_min": Mask.FREE,
    "fwd_iat_max": Mask.FREE,
    "fwd_iat_mean": Mask.FREE,
    "fwd_iat_std": Mask.FREE,
    "bwd_iat_sum": Mask.FREE,
    "bwd_iat_min": Mask.FREE,
    "bwd_iat_max": Mask.FREE,
    "bwd_iat_mean": Mask.FREE,
    "bwd_iat_std": Mask.FREE,
    "fwd_len_sum": Mask.INCREASE_ONLY,
    "fwd_len_min": Mask.FREE,
    "fwd_len_max": Mask.INCREASE_ONLY,
    "fwd_len_mean": Mask.INCREASE_ONLY,
    "fwd_len_std": Mask.FREE,
    "bwd_len_sum": Mask.FROZEN,
    "bwd_len_min": Mask.FROZEN,
    "bwd_len_max": Mask.FROZEN,
    "bwd_len_mean": Mask.FROZEN,
    "bwd_len_std": Mask.FROZEN,
    "fwd_pkt_count": Mask.INCREASE_ONLY,
    "bwd_pkt_count": Mask.FROZEN,
}

IN_PATH_MASKS = {
    "fwd_iat_sum": Mask.INCREASE_ONLY,
    "fwd_iat_min": Mask.INCREASE_ONLY,
    "fwd_iat_max": Mask.INCREASE_ONLY,
    "fwd_iat_mean": Mask.INCREASE_ONLY,
    "fwd_iat_std": Mask.FREE,
    "bwd_iat_sum": Mask.FROZEN,
    "bwd_iat_min": Mask.FROZEN,
    "bwd_iat_max": Mask.FROZEN,
    "bwd_iat_mean": Mask.FROZEN,
    "bwd_iat_std": Mask.FROZEN,
    "fwd_len_sum": Mask.FROZEN,
    "fwd_len_min": Mask.FROZEN,
    "fwd_len_max": Mask.FROZEN,
    "fwd_len_mean": Mask.FROZEN,
    "fwd_len_std": Mask.FROZEN,
    "bwd_len_sum": Mask.FROZEN,
    "bwd_len_min": Mask.FROZEN,
    "bwd_len_max": Mask.FROZEN,
    "bwd_len_mean": Mask.FROZEN,
    "bwd_len_std": Mask.FROZEN,
    "fwd_pkt_count": Mask.FROZEN,
    "bwd_pkt_count": Mask.FROZEN,
}


def test_derive_mask_end_host_app():
    prof = profile("app")
    masks = derive_mask(prof, ThreatModel.end_host())
    got = {fs.name: Mask(m) for fs, m in zip(prof, masks)}
    assert got == END_HOST_MASKS


def test_derive_mask_in_path_app():
    prof = profile("app")
    masks = derive_mask(prof, ThreatModel.in_path())
    got = {fs.name: Mask(m) for fs, m in zip(prof, masks)}
    assert got == IN_PATH_MASKS


def test_raise_min_waterfill():
    assert _raise_min([1.0, 2.0, 4.0], 2.0) == pytest.approx(2.5)
    assert _raise_min([1.0, 2.0, 4.0], 100.0) == pytest.approx(107 / 3)
    assert _raise_min([3.0], 0.0) == 3.0


def test_lower_max_split_search():
    assert _lower_max([10.0, 3.0], 1) == pytest.approx(5.0, rel=1e-5)
    assert _lower_max([10.0, 3.0], 4) == pytest.approx(2.5, rel=1e-5)
    assert _lower_max([5.0], 0) == 5.0


def test_project_respects_masks_and_box():
    x0 = np.array([0.5, 0.5, 0.5, 0.5])
    masks = np.array([Mask.FREE, Mask.FROZEN, Mask.INCREASE_ONLY, Mask.FREE])
    box = (np.array([-np.inf, -np.inf, -np.inf, 0.45]), np.array([np.inf, np.inf, np.inf, 0.55]))
    x = _project(np.array([2.0, 2.0, 0.1, 2.0]), x0, masks, box)
    assert x[0] == 1.0  # clipped to the unit box
    assert x[1] == 0.5  # frozen
    assert x[2] == 0.5  # cannot decrease
    assert x[3] == 0.55  # reachability cap


def test_reachable_box_end_host_oracle():
    prof = profile("app")
    tm = ThreatModel.end_host()
    lo, hi = reachable_box(make_flow(), prof, tm)
    b = {fs.name: (lo[i], hi[i]) for i, fs in enumerate(prof)}
    # forward gap series is [0.005]; budget is 20% of 0.01s
    assert b["fwd_iat_sum"][0] == pytest.approx(0.005) and b["fwd_iat_sum"][1] == np.inf
    assert b["fwd_iat_mean"][0] == pytest.approx(0.005 / 21)
    assert b["fwd_iat_min"] == (pytest.approx(1e-6), pytest.approx(0.007))
    assert b["fwd_iat_max"][0] == pytest.approx(0.005 / 21, rel=1e-4)
    # injected bursts between the two backward packets stretch their gap
    # without any budget metering, so backward gaps keep a floor only
    assert b["bwd_iat_sum"][0] == pytest.approx(0.008) and b["bwd_iat_sum"][1] == np.inf
    assert b["bwd_iat_mean"][0] == pytest.approx(0.008) and b["bwd_iat_mean"][1] == np.inf
    assert b["bwd_iat_min"][0] == pytest.approx(0.008)
    assert b["bwd_iat_std"][0] == 0.0 and b["bwd_iat_std"][1] == np.inf
    # no padding slots (q = floor(0.2 * 4) = 0), injects up to 20 full packets
    assert b["fwd_len_mean"] == (pytest.approx(40.0), pytest.approx(31600 / 22))
    assert b["fwd_len_min"] == (pytest.approx(40.0), pytest.approx(1500.0))
    assert b["fwd_len_max"] == (pytest.approx(1500.0), pytest.approx(1500.0))
    assert b["fwd_pkt_count"] == (2.0, 22.0)
    assert b["bwd_pkt_count"] == (2.0, 2.0)
    assert np.isinf(b["bwd_len_mean"][0]) and np.isinf(b["bwd_len_mean"][1])


def test_reachable_box_in_path_oracle():
    prof = profile("app")
    tm = ThreatModel.in_path()
    lo, hi = reachable_box(make_flow(), prof, tm)
    b = {fs.name: (lo[i], hi[i]) for i, fs in enumerate(prof)}
    assert b["fwd_iat_sum"] == (pytest.approx(0.005), pytest.approx(0.007))
    assert b["fwd_iat_mean"] == (pytest.approx(0.005), pytest.approx(0.007))
    assert b["fwd_iat_std"] == (0.0, pytest.approx(0.002))
    assert b["fwd_len_sum"] == (1600.0, 1600.0)
    assert b["fwd_pkt_count"] == (2.0, 2.0)


FLOW_POOL = synthesize(
    SyntheticSpec(
        classes={"a": ClassSpec(-3.5, 1.0), "b": ClassSpec(-1.8, 0.9)}, seed=23
    ),
    15,
).flows


@settings(max_examples=120, deadline=None)
@given(
    flow=st.sampled_from(FLOW_POOL),
    kind=st.sampled_from(["end_host", "in_path"]),
    pname=st.sampled_from(profile_names()),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_reachable_box_contains_random_perturbations(flow, kind, pname, seed):
    """No realizable perturbation may fall outside the advertised box."""
    tm = ThreatModel.end_host() if kind == "end_host" else ThreatModel.in_path()
    prof = profile(pname)
    lo, hi = reachable_box(flow, prof, tm)
    plan = random_plan(flow, tm, np.random.default_rng(seed))
    perturbed = reconstruct(flow, plan)
    assert validate(flow, perturbed, tm).ok
    x = extract(perturbed, prof)
    slack_lo = 1e-9 * np.maximum(1.0, np.abs(lo))
    slack_hi = 1e-9 * np.maximum(1.0, np.abs(hi))
    with np.errstate(invalid="ignore"):
        assert (x >= lo - slack_lo).all(), f"below lo: {np.flatnonzero(x < lo - slack_lo)}"
        assert (x <= hi + slack_hi).all(), f"above hi: {np.flatnonzero(x > hi + slack_hi)}"


def trained_mlp():
    rng = np.random.default_rng(0)
    X = np.vstack(
        [rng.normal(0.3, 0.08, size=(40, 5)), rng.normal(0.7, 0.08, size=(40, 5))]
    )
    y = np.array([0] * 40 + [1] * 40)
    m = MlpClassifier(5, 2, seed=0)
    m.fit(X, y, epochs=30, seed=0)
    return m, X, y


def test_pgd_respects_masks_and_box():
    m, X, y = trained_mlp()
    x0 = X[0]
    masks = np.array([Mask.FREE, Mask.FROZEN, Mask.INCREASE_ONLY, Mask.FREE, Mask.FREE])
    box = (
        np.array([-np.inf] * 5),
        np.array([np.inf, np.inf, np.inf, x0[3] + 0.05, np.inf]),
    )
    res = pgd_attack(m, x0, int(y[0]), masks, steps=40, restarts=3, seed=1, box=box)
    assert res.x_adv[1] == x0[1]
    assert res.x_adv[2] >= x0[2] - 1e-12
    assert res.x_adv[3] <= x0[3] + 0.05 + 1e-12
    assert res.queries > 0


def test_zoo_respects_masks():
    m, X, y = trained_mlp()
    x0 = X[3]
    masks = np.array([Mask.FROZEN] * 5)
    res = zoo_attack(m, x0, int(y[3]), masks, steps=10, seed=0)
    assert np.array_equal(res.x_adv, x0)
    masks[0] = Mask.FREE
    res = zoo_attack(m, x0, int(y[3]), masks, steps=25, seed=0)
    assert np.array_equal(res.x_adv[1:], x0[1:])


def test_zoo_moves_loss_uphill():
    m, X, y = trained_mlp()
    x0 = X[10]
    masks = np.full(5, Mask.FREE)
    res = zoo_attack(m, x0, int(y[10]), masks, steps=60, seed=2)
    base = float(m.loss(x0, np.array([int(y[10])]))[0])
    assert res.loss >= base


def test_fd_gradient_matches_analytic():
    m, X, y = trained_mlp()
    for i in range(5):
        g = m.input_gradient(X[i][None, :], y[i : i + 1])[0]
        ghat = fd_gradient(m, X[i], int(y[i]), h=1e-5)
        assert np.allclose(g, ghat, rtol=1e-3, atol=1e-6)


class _CountingMlp(MlpClassifier):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.grad_calls = 0

    def input_gradient(self, X, y):
        self.grad_calls += 1
        return super().input_gradient(X, y)


def test_attack_vector_auto_dispatch():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(0.3, 0.1, size=(20, 4)), rng.normal(0.7, 0.1, size=(20, 4))])
    y = np.array([0] * 20 + [1] * 20)
    mlp = _CountingMlp(4, 2, seed=0)
    mlp.fit(X, y, epochs=10, seed=0)
    mlp.grad_calls = 0
    masks = np.full(4, Mask.FREE)
    attack_vector(mlp, X[0], 0, masks, AmlConfig(steps=5, restarts=1))
    assert mlp.grad_calls > 0

    forest = ForestClassifier(4, 2)
    forest.fit(X, y, n_trees=5, seed=0)
    res = attack_vector(forest, X[0], 0, masks, AmlConfig(steps=5))
    assert res.queries > 0  # the gradient-free path must have been taken
