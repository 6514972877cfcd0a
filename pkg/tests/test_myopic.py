import json

import pytest

from gdwols.simulation import TwoStageEnv, myopic_vs_dynamic_check

from .conftest import fixture_path
from .oracles import brute_force_two_stage


def load(name):
    return json.loads(fixture_path(name).read_text())


@pytest.mark.parametrize("name,identical", [("immediate_effects.json", True), ("delayed_effect.json", False),
                                            ("single_stage.json", True)])
def test_fixtures(name, identical):
    env = load(name)
    res = myopic_vs_dynamic_check(env)
    assert res.identical is identical
    brute = brute_force_two_stage(env)
    for s1, (_, best) in brute.items():
        assert res.dynamic_policy[s1] in env["reward1"][s1]
    # dynamic value per state equals the brute-force optimum
    w = {w.state: w for w in res.witnesses}
    for s1, (arg, best) in brute.items():
        if s1 in w:
            assert w[s1].dynamic_value == pytest.approx(best, abs=1e-12)
            assert w[s1].myopic_value < best
    if not identical:
        assert res.witnesses
        assert res.myopic_value < res.dynamic_value


def test_witness_details_delayed_effect():
    res = myopic_vs_dynamic_check(load("delayed_effect.json"))
    low = next(w for w in res.witnesses if w.state == "low")
    assert (low.myopic_action, low.dynamic_action) == ("0", "1")
    assert low.myopic_value == pytest.approx(1.5)
    assert low.dynamic_value == pytest.approx(5.0)


def test_history_dependent_rewards():
    # synergy: a2 = "1" pays off only after a1 = "1"
    env = {
        "actions": ["0", "1"],
        "initial": ["s"],
        "reward1": {"s": {"0": 1.0, "1": 0.0}},
        "reward2": {"s": {"0": {"s": {"0": 0.0, "1": 0.0}}, "1": {"s": {"0": 0.0, "1": 3.0}}}},
    }
    res = myopic_vs_dynamic_check(env)
    assert not res.identical
    assert brute_force_two_stage(env)["s"] == ("1", 3.0)


def test_invalid_environments():
    with pytest.raises(ValueError, match="missing"):
        myopic_vs_dynamic_check({"actions": ["0"]})
    with pytest.raises(ValueError, match="non-finite"):
        myopic_vs_dynamic_check({"actions": ["0"], "initial": ["s"], "reward1": {"s": {"0": float("inf")}}})
    with pytest.raises(ValueError, match="probability"):
        TwoStageEnv.from_dict({"actions": ["0"], "initial": ["s"], "reward1": {"s": {"0": 0}},
                               "transition": {"s": {"0": {"s": 0.5}}}, "reward2": {"s": {"0": 0}}})
    with pytest.raises(ValueError, match="reward2"):
        TwoStageEnv.from_dict({"actions": ["0", "1"], "initial": ["s"], "reward1": {"s": {"0": 0, "1": 0}},
                               "reward2": {"s": {"0": 0}}})
