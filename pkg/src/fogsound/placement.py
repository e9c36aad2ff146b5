"""Pipeline stages, tiers, and the three process-placement presets."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

from .audio import SAMPLE_RATE, wav_size
from .errors import InvalidConfig, UnknownPreset
from .features import FEATURE_BYTES

RESULT_BYTES = 4


class Stage(enum.IntEnum):
    RECORD = 0
    EXTRACT = 1
    CLASSIFY = 2
    STORE = 3


class Tier(enum.IntEnum):
    DEVICE = 0
    FOG = 1
    CLOUD = 2


@dataclass(frozen=True)
class PlacementConfig:
    name: str
    assignment: Mapping[Stage, Tier]

    def __post_init__(self):
        object.__setattr__(self, "assignment", MappingProxyType(dict(self.assignment)))

    def __getitem__(self, stage: Stage) -> Tier:
        return self.assignment[stage]

    def __hash__(self):
        return hash((self.name, tuple(sorted(self.assignment.items()))))

    def __eq__(self, other):
        if not isinstance(other, PlacementConfig):
            return NotImplemented
        return self.name == other.name and dict(self.assignment) == dict(other.assignment)


def _config(name, extract, classify):
    return PlacementConfig(name, {Stage.RECORD: Tier.DEVICE, Stage.EXTRACT: extract,
                                  Stage.CLASSIFY: classify, Stage.STORE: Tier.CLOUD})


PRESETS = {
    "config1": _config("config1", Tier.DEVICE, Tier.DEVICE),
    "config2": _config("config2", Tier.CLOUD, Tier.CLOUD),
    "proposed": _config("proposed", Tier.DEVICE, Tier.CLOUD),
}


def preset(name: str) -> PlacementConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def validate(config: PlacementConfig) -> list[str]:
    """Return the list of violated placement rules (empty when valid)."""
    a = config.assignment
    missing = [s.name for s in Stage if s not in a]
    if missing:
        return [f"no tier assigned for {', '.join(missing)}"]
    problems = []
    if a[Stage.RECORD] != Tier.DEVICE:
        problems.append("Record must be on Device")
    if a[Stage.STORE] != Tier.CLOUD:
        problems.append("Store must be on Cloud")
    if a[Stage.EXTRACT] > a[Stage.CLASSIFY]:
        problems.append("Extract must not sit on a higher tier than Classify")
    return problems


def _require_valid(config):
    problems = validate(config)
    if problems:
        raise InvalidConfig(f"{config.name}: {'; '.join(problems)}")


def device_stage_set(config: PlacementConfig) -> list[Stage]:
    _require_valid(config)
    return [s for s in Stage if config[s] == Tier.DEVICE]


def uplink_payload(config: PlacementConfig, clip_seconds: float = 4.0,
                   rate: int = SAMPLE_RATE) -> int:
    """Bytes the device sends per clip (message payload, without wire framing)."""
    _require_valid(config)
    if config[Stage.CLASSIFY] == Tier.DEVICE:
        return RESULT_BYTES
    if config[Stage.EXTRACT] == Tier.DEVICE:
        return FEATURE_BYTES
    return wav_size(int(round(rate * clip_seconds)))
