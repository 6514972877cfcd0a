"""Brute-force comparison of myopic and dynamic rules in a two-stage world.

An environment is a JSON-like mapping::

    {
      "actions": ["0", "1"],                     # or {"stage1": [...], "stage2": [...]}
      "initial": {"lo": 0.5, "hi": 0.5},         # or a plain list of states
      "reward1": {"lo": {"0": 0, "1": 1}, ...},
      "transition": {"lo": {"0": {"lo": 1.0}, ...}, ...},   # optional
      "reward2": {"lo": {"0": 0, "1": 1}, ...}
    }

Without ``transition`` the stage-2 state equals the stage-1 state.
``reward2`` is either keyed by the stage-2 state alone or by the full
history ``{s1: {a1: {s2: {a2: r}}}}``. Omitting it gives a single-stage
problem. The final outcome is ``Y1 + Y2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

__all__ = ["TwoStageEnv", "Witness", "MyopicCheck", "myopic_vs_dynamic_check"]

_TOL = 1e-12


def _finite(x, where: str) -> float:
    try:
        v = float(x)
    except (TypeError, ValueError):
        raise ValueError(f"{where}: expected a number, got {x!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"{where}: non-finite value {x!r}")
    return v


@dataclass(frozen=True)
class TwoStageEnv:
    actions1: tuple[str, ...]
    actions2: tuple[str, ...]
    initial: Mapping[str, float]
    reward1: Mapping[str, Mapping[str, float]]
    transition: Mapping[str, Mapping[str, Mapping[str, float]]] | None
    reward2: Mapping | None
    history_rewards: bool = False

    @classmethod
    def from_dict(cls, d: Mapping) -> "TwoStageEnv":
        for key in ("actions", "initial", "reward1"):
            if key not in d:
                raise ValueError(f"environment is missing {key!r}")
        acts = d["actions"]
        if isinstance(acts, Mapping):
            a1 = tuple(str(a) for a in acts["stage1"])
            a2 = tuple(str(a) for a in acts.get("stage2", acts["stage1"]))
        else:
            a1 = a2 = tuple(str(a) for a in acts)
        if not a1 or not a2:
            raise ValueError("action sets must be non-empty")
        init = d["initial"]
        if isinstance(init, Mapping):
            initial = {str(s): _finite(p, f"initial[{s}]") for s, p in init.items()}
        else:
            initial = {str(s): 1.0 / len(init) for s in init}
        if not initial or any(p < 0 for p in initial.values()):
            raise ValueError("initial distribution must be non-empty and non-negative")
        reward1 = {}
        for s in initial:
            row = d["reward1"].get(s)
            if row is None:
                raise ValueError(f"reward1 has no entry for state {s!r}")
            reward1[s] = {a: _finite(row.get(a), f"reward1[{s}][{a}]") for a in a1}
        transition = None
        if d.get("transition") is not None:
            transition = {}
            for s in initial:
                transition[s] = {}
                for a in a1:
                    dist = d["transition"].get(s, {}).get(a)
                    if dist is None:
                        raise ValueError(f"transition has no entry for ({s!r}, {a!r})")
                    probs = {str(t): _finite(p, f"transition[{s}][{a}][{t}]") for t, p in dist.items()}
                    if any(p < 0 for p in probs.values()) or abs(sum(probs.values()) - 1.0) > 1e-9:
                        raise ValueError(f"transition[{s}][{a}] is not a probability distribution")
                    transition[s][a] = probs
        reward2 = d.get("reward2")
        history = False
        if reward2 is not None:
            first = next(iter(reward2.values()))
            history = isinstance(next(iter(first.values())), Mapping)
        env = cls(a1, a2, initial, reward1, transition, reward2, history)
        if reward2 is not None:
            for s1 in initial:
                for a1_ in a1:
                    for s2 in env.next_states(s1, a1_):
                        for a in a2:
                            env.r2(s1, a1_, s2, a)
        return env

    @property
    def single_stage(self) -> bool:
        return self.reward2 is None

    def next_states(self, s1: str, a1: str) -> dict[str, float]:
        if self.transition is None:
            return {s1: 1.0}
        return self.transition[s1][a1]

    def r2(self, s1: str, a1: str, s2: str, a2: str) -> float:
        where = f"({s1}, {a1}, {s2}, {a2})" if self.history_rewards else f"({s2}, {a2})"
        try:
            v = self.reward2[s1][a1][s2][a2] if self.history_rewards else self.reward2[s2][a2]
        except (KeyError, TypeError):
            raise ValueError(f"reward2 has no entry for {where}") from None
        return _finite(v, f"reward2{where}")


@dataclass(frozen=True)
class Witness:
    """A reachable state where the myopic action is strictly suboptimal."""

    stage: int
    state: str
    myopic_action: str
    myopic_value: float
    dynamic_action: str
    dynamic_value: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class MyopicCheck:
    identical: bool
    witnesses: tuple[Witness, ...] = ()
    myopic_policy: Mapping[str, str] = field(default_factory=dict)
    dynamic_policy: Mapping[str, str] = field(default_factory=dict)
    myopic_value: float = 0.0
    dynamic_value: float = 0.0

    def to_dict(self) -> dict:
        return {
            "identical": self.identical,
            "witnesses": [w.to_dict() for w in self.witnesses],
            "myopic_policy": dict(self.myopic_policy),
            "dynamic_policy": dict(self.dynamic_policy),
            "myopic_value": self.myopic_value,
            "dynamic_value": self.dynamic_value,
        }


def _argmax(values: Mapping[str, float], order: Sequence[str]) -> str:
    # first action in declared order wins ties
    best = order[0]
    for a in order[1:]:
        if values[a] > values[best]:
            best = a
    return best


def myopic_vs_dynamic_check(env: TwoStageEnv | Mapping) -> MyopicCheck:
    """Compare per-stage maximization with backward induction.

    At stage 2 both rules maximize the stage-2 reward given the history, so
    they can only differ at stage 1. A stage-1 state is a witness when the
    myopic action's total expected value ``Y1 + E[max Y2]`` falls short of
    the dynamic optimum.
    """
    if not isinstance(env, TwoStageEnv):
        env = TwoStageEnv.from_dict(env)
    reachable = [s for s, p in env.initial.items() if p > 0]
    myopic, dynamic, witnesses = {}, {}, []
    v_myo = v_dyn = 0.0
    total = sum(env.initial[s] for s in reachable)
    for s1 in reachable:
        q = {}
        for a1 in env.actions1:
            cont = 0.0
            if not env.single_stage:
                for s2, p in env.next_states(s1, a1).items():
                    cont += p * max(env.r2(s1, a1, s2, a2) for a2 in env.actions2)
            q[a1] = env.reward1[s1][a1] + cont
        a_myo = _argmax(env.reward1[s1], env.actions1)
        a_dyn = _argmax(q, env.actions1)
        myopic[s1], dynamic[s1] = a_myo, a_dyn
        if q[a_myo] < q[a_dyn] - _TOL * max(1.0, abs(q[a_dyn])):
            witnesses.append(Witness(1, s1, a_myo, q[a_myo], a_dyn, q[a_dyn]))
        w = env.initial[s1] / total
        v_myo += w * q[a_myo]
        v_dyn += w * q[a_dyn]
    return MyopicCheck(not witnesses, tuple(witnesses), myopic, dynamic, v_myo, v_dyn)
