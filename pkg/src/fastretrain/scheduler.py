"""Activation-rate schedules and per-epoch conv-layer freeze plans."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# rng stream tag so freeze draws never collide with data shuffling or dropout
_PLAN_STREAM = 0x46524545


@dataclass(frozen=True)
class RateSchedule:
    """Step function of ``(epoch_fraction, rate)`` milestones."""

    milestones: tuple[tuple[float, float], ...]
    total_epochs: int

    def __post_init__(self):
        ms = tuple((float(f), float(r)) for f, r in self.milestones)
        object.__setattr__(self, "milestones", ms)
        if not ms:
            raise ConfigError("schedule needs at least one milestone")
        if ms[0][0] != 0.0:
            raise ConfigError("first schedule milestone must be at fraction 0")
        for (f0, _), (f1, _) in zip(ms, ms[1:]):
            if not f1 > f0:
                raise ConfigError("schedule fractions must be strictly increasing")
        for f, r in ms:
            if not 0.0 <= f <= 1.0:
                raise ConfigError(f"schedule fraction {f} outside [0, 1]")
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"schedule rate {r} outside [0, 1]")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")

    @classmethod
    def parse(cls, text: str, total_epochs: int) -> RateSchedule:
        """Parse ``"0:1.0,0.25:0.8,0.5:0.6"``."""
        return cls(parse_pairs(text), total_epochs)

    def format(self) -> str:
        return ",".join(f"{f:g}:{r:g}" for f, r in self.milestones)


def parse_pairs(text: str) -> tuple[tuple[float, float], ...]:
    pairs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition(":")
        if not sep:
            raise ConfigError(f"expected 'key:value' pair, got {item!r}")
        try:
            pairs.append((float(key), float(value)))
        except ValueError:
            raise ConfigError(f"non-numeric pair {item!r}") from None
    return tuple(pairs)


def rate_at(schedule: RateSchedule, epoch: int) -> float:
    """Rate of the last milestone whose ``fraction * total_epochs <= epoch``."""
    if not 0 <= epoch < schedule.total_epochs:
        raise IndexError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    rate = schedule.milestones[0][1]
    for frac, r in schedule.milestones:
        # tolerance guards products such as 0.3 * 10 = 3.0000000000000004
        if frac * schedule.total_epochs <= epoch + 1e-9:
            rate = r
    return rate


@dataclass(frozen=True)
class FreezePlan:
    epoch: int
    active_layers: frozenset[int]
    l_a: int
    l_i: int

    @property
    def l_c(self) -> int:
        return self.l_a + self.l_i


def active_count(rate: float, l_c: int) -> int:
    """``round(rate * l_c)`` with halves rounded up."""
    return int(math.floor(rate * l_c + 0.5 + 1e-9))


def plan_epoch(l_c: int, rate: float, rng_seed: int, epoch: int) -> FreezePlan:
    """Pick ``round(rate * l_c)`` conv layers to train this epoch, uniformly at random."""
    if l_c < 1:
        raise ValueError("l_c must be >= 1")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate {rate} outside [0, 1]")
    l_a = active_count(rate, l_c)
    rng = np.random.default_rng([int(rng_seed), int(epoch), _PLAN_STREAM])
    chosen = rng.choice(l_c, size=l_a, replace=False)
    return FreezePlan(epoch=epoch, active_layers=frozenset(int(i) for i in chosen), l_a=l_a, l_i=l_c - l_a)


def no_conv_plan(epoch: int) -> FreezePlan:
    """Plan for networks without conv layers."""
    return FreezePlan(epoch=epoch, active_layers=frozenset(), l_a=0, l_i=0)
