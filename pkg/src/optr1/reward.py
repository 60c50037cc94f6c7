"""Verifiable reward and group-relative advantages.

    reward = perf + tools
    perf   = -2                          if incorrect (incl. build failure)
             -1                          if correct but slower than baseline
             min(10, t_base / t - 1)     otherwise
    tools  = 0.5 * |unique available tools used| / |available tools|
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tools import BenchmarkOutcome
from .trace import Trace, unique_tools_used

LAMBDA_TOOLS = 0.5
PERF_CAP = 10.0
INCORRECT_PENALTY = -2.0
SLOWER_PENALTY = -1.0
ADVANTAGE_EPSILON = 1e-8


@dataclass(frozen=True)
class RewardBreakdown:
    perf: float
    tools: float
    total: float
    lambda_tools: float = LAMBDA_TOOLS

    def to_dict(self) -> dict:
        return {"perf": self.perf, "tools": self.tools, "total": self.total, "lambda_tools": self.lambda_tools}


@dataclass(frozen=True)
class GroupAdvantages:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    epsilon: float = ADVANTAGE_EPSILON


def perf_reward(outcome: BenchmarkOutcome, t_base: float) -> float:
    if not t_base > 0:
        raise ValueError("t_base must be positive")
    # a correct run without a time line violates the protocol and counts as incorrect
    if not (outcome.compiled and outcome.correct) or outcome.time_ms is None:
        return INCORRECT_PENALTY
    t = outcome.time_ms
    if t > t_base:
        return SLOWER_PENALTY
    return min(PERF_CAP, t_base / t - 1.0)


def tool_reward(trace: Trace) -> float:
    available = set(trace.tools_available)
    if not available:
        raise ValueError("trace has no available tools")
    used = unique_tools_used(trace) & available
    return LAMBDA_TOOLS * len(used) / len(available)


def total_reward(trace: Trace, outcome: BenchmarkOutcome, t_base: float) -> RewardBreakdown:
    perf = perf_reward(outcome, t_base)
    tools = tool_reward(trace)
    return RewardBreakdown(perf, tools, perf + tools)


def group_advantages(rewards, epsilon: float = ADVANTAGE_EPSILON) -> GroupAdvantages:
    """Z-score rewards within a group using the sample (n-1) standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if np.all(r == r[0]):
        adv = np.zeros_like(r)
    else:
        centered = r - r.mean()
        # re-centre to cancel the rounding left by the first mean
        centered -= centered.mean()
        adv = centered / (r.std(ddof=1) + epsilon)
    return GroupAdvantages(tuple(float(x) for x in r), tuple(float(x) for x in adv), epsilon)
