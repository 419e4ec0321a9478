"""Trust policies: thresholds, open/closed modes and social-pattern presets."""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass

__all__ = [
    "Mode",
    "Pattern",
    "Role",
    "Verdict",
    "Decision",
    "PolicyConfig",
    "PolicyError",
    "preset",
    "required_common",
    "decide",
    "altruist_mode",
    "provider_decisions",
    "market_service_tag",
]


class PolicyError(ValueError):
    pass


class Mode(enum.Enum):
    CLOSED = "closed"
    OPEN = "open"


class Pattern(enum.Enum):
    FAMILY = "family"
    NETWORK = "network"
    MARKET = "market"
    ORGANIZATION = "organization"
    CUSTOM = "custom"


class Role(enum.Enum):
    RECEIVER = "receiver"
    PROVIDER = "provider"


class Verdict(enum.Enum):
    ALLOW = "allow"
    DENY = "deny"
    REQUIRE_FORCED_PAIRING = "require-forced-pairing"


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: str = ""

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW


@dataclass(frozen=True)
class PolicyConfig:
    mode: Mode = Mode.OPEN
    p_receiver: int = 3
    p_provider: int = 3
    p_interdomain_extra: int = 1
    blacklist_threshold: int = 3
    element_max_age: int | None = None  # seconds; None keeps elements forever
    min_score: float = -5.0
    pattern: Pattern = Pattern.CUSTOM
    hierarchy_multiplier: float = 1.0
    require_certified_station: bool = False
    altruist: bool = False
    history_size: int = 22

    def __post_init__(self):
        if self.p_receiver < 0 or self.p_provider < 0 or self.p_interdomain_extra < 0:
            raise PolicyError("thresholds must be non-negative")
        if self.blacklist_threshold < 1:
            raise PolicyError("blacklist threshold must be at least 1")
        if self.hierarchy_multiplier < 1.0:
            raise PolicyError("hierarchy multiplier must be >= 1")
        if self.history_size < 1:
            raise PolicyError("history size must be positive")
        if self.element_max_age is not None and self.element_max_age <= 0:
            raise PolicyError("element max age must be positive")

    def replace(self, **changes) -> PolicyConfig:
        return dataclasses.replace(self, **changes)

    # -- key=value text form --------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif value is None:
                value = "none"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: PolicyConfig | None = None) -> PolicyConfig:
        values = parse_key_values(text)
        return (base or cls()).with_overrides(values)

    def with_overrides(self, values: dict[str, str]) -> PolicyConfig:
        kinds = {f.name: f for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in kinds:
                raise PolicyError(f"unknown policy key {key!r}")
            changes[key] = _coerce(key, raw, getattr(self, key))
        return self.replace(**changes)


def parse_key_values(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise PolicyError(f"line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, raw: str, current):
    try:
        if key == "mode":
            return Mode(raw)
        if key == "pattern":
            return Pattern(raw)
        if key == "element_max_age":
            return None if raw.lower() in ("none", "0", "") else int(raw)
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise PolicyError(f"invalid value for {key}: {raw!r}") from None
    return raw


def preset(pattern: Pattern | str, **overrides) -> PolicyConfig:
    pattern = Pattern(pattern)
    if pattern is Pattern.FAMILY:
        # trust pre-exists inside the family: no cryptographic common-history check
        cfg = PolicyConfig(mode=Mode.CLOSED, p_receiver=0, p_provider=0, pattern=pattern)
    elif pattern is Pattern.NETWORK:
        cfg = PolicyConfig(mode=Mode.OPEN, p_receiver=3, p_provider=3, pattern=pattern)
    elif pattern is Pattern.MARKET:
        cfg = PolicyConfig(mode=Mode.OPEN, p_receiver=2, p_provider=3, pattern=pattern)
    elif pattern is Pattern.ORGANIZATION:
        cfg = PolicyConfig(mode=Mode.CLOSED, p_receiver=3, p_provider=3, pattern=pattern,
                           hierarchy_multiplier=2.0, require_certified_station=True)
    else:
        cfg = PolicyConfig()
    return cfg.replace(**overrides) if overrides else cfg


def required_common(cfg: PolicyConfig, role: Role, same_domain: bool, rank_gap: int = 0) -> int:
    """Effective number of verified common acquaintances ``p*`` for a role.

    ``rank_gap`` > 0 means the target outranks the requester; each level
    multiplies the threshold by ``hierarchy_multiplier``.
    """
    base = cfg.p_receiver if role is Role.RECEIVER else cfg.p_provider
    if not same_domain:
        base += cfg.p_interdomain_extra
    if rank_gap > 0 and cfg.hierarchy_multiplier > 1.0:
        base = math.ceil(base * cfg.hierarchy_multiplier ** rank_gap)
    return base


def decide(cfg: PolicyConfig, role: Role, verified_common: int, same_domain: bool,
           rep_score: float, peer_blacklisted: bool, history_size: int | None = None,
           rank_gap: int = 0) -> Decision:
    """Accept, deny, or ask for a manual pairing.

    ``history_size`` is the local history length; when it cannot reach the
    threshold the node still needs a bootstrap pairing.  ``None`` disables
    that path.
    """
    if verified_common < 0:
        raise ValueError("verified_common must be non-negative")
    if peer_blacklisted:
        return Decision(Verdict.DENY, "blacklisted")
    if cfg.mode is Mode.CLOSED:
        if same_domain:
            return Decision(Verdict.ALLOW)
        return Decision(Verdict.DENY, "outside-domain")
    needed = required_common(cfg, role, same_domain, rank_gap)
    if verified_common < needed:
        if history_size is not None and history_size < needed:
            return Decision(Verdict.REQUIRE_FORCED_PAIRING, "bootstrap")
        return Decision(Verdict.DENY, "threshold-not-met")
    if rep_score < cfg.min_score:
        return Decision(Verdict.DENY, "low-reputation")
    return Decision(Verdict.ALLOW)


def altruist_mode(cfg: PolicyConfig) -> PolicyConfig:
    """Always serve outsiders but never hand them a reciprocal proof."""
    return cfg.replace(altruist=True)


def provider_decisions(cfg: PolicyConfig, same_domain: bool) -> tuple[bool, bool]:
    """Default (provide, reciprocal) choices of a provider under ``cfg``."""
    if cfg.altruist and not same_domain:
        return True, False
    return True, True


def market_service_tag(service: str, value: int | float) -> str:
    """Service tag carrying a transaction value, so both proofs record it."""
    if not service or "|" in service or ";" in service:
        raise ValueError("service name must be non-empty and free of '|' and ';'")
    return f"{service};value={value}"
