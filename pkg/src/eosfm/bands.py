"""Band layouts and the channel-gather rules that map one layout onto another."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

S2_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12")
S1_BANDS = ("VV", "VH")


@dataclass(frozen=True)
class BandSpec:
    """Ordered band identifiers, each a ``family/band`` token such as ``S2/B04``."""

    bands: tuple[str, ...]

    def __post_init__(self):
        bands = tuple(self.bands)
        object.__setattr__(self, "bands", bands)
        if not bands:
            raise ValueError("a band spec needs at least one band")
        if len(set(bands)) != len(bands):
            raise ValueError(f"duplicate band identifiers in {bands}")
        for b in bands:
            if b.count("/") != 1 or not all(b.split("/")):
                raise ValueError(f"band identifier {b!r} is not of the form family/band")

    @property
    def count(self) -> int:
        return len(self.bands)

    @classmethod
    def parse(cls, text: str) -> "BandSpec":
        return cls(tuple(tok.strip() for tok in text.split(",") if tok.strip()))

    def __str__(self):
        return ",".join(self.bands)

    def __add__(self, other: "BandSpec") -> "BandSpec":
        return BandSpec(self.bands + other.bands)


RGB = BandSpec(("RGB/R", "RGB/G", "RGB/B"))
IRRG = BandSpec(("IRRG/IR", "IRRG/R", "IRRG/G"))
S2 = BandSpec(tuple(f"S2/{b}" for b in S2_BANDS))
S1 = BandSpec(tuple(f"S1/{b}" for b in S1_BANDS))
S2S1 = S2 + S1

MODALITY_SPECS = {"rgb": RGB, "irrg": IRRG, "ms": S2, "sar": S1, "ms+sar": S2S1}


def spec_for_modality(modality: str) -> BandSpec:
    try:
        return MODALITY_SPECS[modality]
    except KeyError:
        raise ValueError(f"unknown modality {modality!r}; expected one of {sorted(MODALITY_SPECS)}") from None


@dataclass(frozen=True)
class AdaptationRule:
    rule_id: str
    available: BandSpec
    required: BandSpec
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.rule_id or "|" in self.rule_id:
            raise ValueError(f"invalid rule id {self.rule_id!r}")
        if len(self.indices) != self.required.count:
            raise ValueError(
                f"rule {self.rule_id}: {len(self.indices)} indices for {self.required.count} required bands"
            )
        for i in self.indices:
            if not 0 <= i < self.available.count:
                raise IndexError(
                    f"rule {self.rule_id}: index {i} out of range for {self.available.count} available bands"
                )

    def to_line(self) -> str:
        return " | ".join(
            [self.rule_id, str(self.available), str(self.required), ",".join(map(str, self.indices))]
        )

    @classmethod
    def from_line(cls, line: str) -> "AdaptationRule":
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 4:
            raise ValueError(f"malformed rule line: {line!r}")
        rule_id, avail, req, idx = parts
        return cls(rule_id, BandSpec.parse(avail), BandSpec.parse(req), tuple(int(i) for i in idx.split(",")))


def identity_rule(spec: BandSpec) -> AdaptationRule:
    return AdaptationRule("identity", spec, spec, tuple(range(spec.count)))


@dataclass(frozen=True)
class Branch:
    encoder_id: str
    rule_id: str

    @property
    def key(self) -> str:
        return f"{self.encoder_id}::{self.rule_id}"


@dataclass
class RuleRegistry:
    """Write-once registry of adaptation rules; iteration follows registration order."""

    _rules: dict[str, AdaptationRule] = field(default_factory=dict)

    def register_rule(self, rule: AdaptationRule) -> str:
        if rule.rule_id in self._rules or rule.rule_id == "identity":
            raise KeyError(f"rule id {rule.rule_id!r} already registered")
        self._rules[rule.rule_id] = rule
        return rule.rule_id

    def __iter__(self):
        return iter(self._rules.values())

    def __len__(self):
        return len(self._rules)

    def __contains__(self, rule_id):
        return rule_id in self._rules or rule_id == "identity"

    def get(self, rule_id: str, spec: BandSpec | None = None) -> AdaptationRule:
        if rule_id == "identity":
            if spec is None:
                raise KeyError("the identity rule needs the band spec it applies to")
            return identity_rule(spec)
        return self._rules[rule_id]

    def applicable_rules(self, input_spec: BandSpec, required_spec: BandSpec) -> list[AdaptationRule]:
        found = [identity_rule(input_spec)] if input_spec == required_spec else []
        found += [r for r in self._rules.values() if r.available == input_spec and r.required == required_spec]
        return found

    def enumerate_branches(self, input_spec: BandSpec, encoders: Iterable) -> list[Branch]:
        """One branch per (encoder, applicable rule), encoders first, then rules, both in registration order.

        Encoders with no applicable rule are left out; an empty list is a valid answer.
        """
        branches = []
        for enc in encoders:
            for rule in self.applicable_rules(input_spec, enc.required_spec):
                branches.append(Branch(enc.encoder_id, rule.rule_id))
        return branches

    def to_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self._rules.values())

    @classmethod
    def from_text(cls, text: str) -> "RuleRegistry":
        reg = cls()
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                reg.register_rule(AdaptationRule.from_line(line))
        return reg

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "RuleRegistry":
        return cls.from_text(Path(path).read_text())


def apply_rule(image, rule: AdaptationRule):
    """Gather channels ``rule.indices`` from a ``C x H x W`` (or ``B x C x H x W``) array or tensor."""
    axis = image.ndim - 3
    if image.ndim not in (3, 4) or image.shape[axis] != rule.available.count:
        raise ValueError(
            f"rule {rule.rule_id} expects {rule.available.count} channels, got shape {tuple(image.shape)}"
        )
    if isinstance(image, np.ndarray):
        return np.take(image, list(rule.indices), axis=axis)
    import torch

    return torch.index_select(image, axis, torch.as_tensor(rule.indices, device=image.device))


def default_rules() -> RuleRegistry:
    """The rule set shipped with the package (``data/rules.txt``)."""
    return RuleRegistry.load(Path(__file__).parent / "data" / "rules.txt")
