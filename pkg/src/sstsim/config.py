"""Scenario configuration: schema, validation, presets, and the flat
key=value file format used for both configs and run manifests.

A manifest written by a finished run is itself a valid config file, so any
run can be reproduced by pointing the CLI back at its manifest.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError

MI_MODEL_TOKENS = ("mi1", "mi2", "mi3", "mi4", "off")
GRAPH_MODEL_TOKENS = ("ba", "to")
WAIT_DISTRIBUTION_TOKENS = ("exponential", "fixed", "uniform")

# Feature flags per scenario letter: buddy_help, prefetch, prefetch_cap,
# broadcast, locality_only. Scenario "a" additionally disables credits
# entirely (plain piece-for-piece exchange only).
PRESETS: dict[str, dict] = {
    "a": dict(),
    "b": dict(buddy_help=True),
    "c": dict(buddy_help=True, prefetch=True),
    "d": dict(buddy_help=True, prefetch=True, prefetch_cap=10),
    "e": dict(buddy_help=True, prefetch=True, prefetch_cap=10, broadcast=True),
    "f": dict(buddy_help=True, prefetch=True, broadcast=True),
    "g": dict(buddy_help=True, broadcast=True),
    "h": dict(prefetch=True, broadcast=True, locality_only=True),
    "i": dict(broadcast=True),
}


@dataclass
class ScenarioConfig:
    """Everything a run needs; defaults mirror the reference scenario
    (2,000 peers, 100 MB files, 8/1 Mbit links, 30% sat-enabled, 2 h mean
    wait between downloads)."""

    # social graph
    graph_model: str = "ba"
    node_count: int = 2000
    ba_m0: int = 10
    ba_m: int = 5
    to_r_choices: dict[int, float] = field(default_factory=lambda: {1: 0.75, 2: 0.25})
    to_p_mean: float = 3.3
    sat_ratio: float = 0.3

    # preference dynamics
    mi_model: str = "mi1"
    p_mi: float = 0.05
    negative_feedback_prob: float = 0.1
    feedback_strength: float = 0.5
    demand_w_self: float = 0.7
    demand_w_buddy: float = 0.3

    # protocol features
    buddy_help: bool = False
    prefetch: bool = False
    prefetch_cap: int = 0  # 0 = no cap on concurrent prefetchers
    broadcast: bool = False
    locality_only: bool = False
    credits_enabled: bool = True
    credit_limit: int = 50
    cache_capacity: int = 20
    max_helpers: int = 4
    max_sources: int = 8
    upload_slots: int = 8
    tracker_sample: int = 50

    # content and links
    catalog_size: int = 200
    categories: int = 100
    item_size_bytes: int = 100 * 2**20
    piece_size_bytes: int = 2**20
    download_bps: int = 8_000_000
    upload_bps: int = 1_000_000
    transponder_bps: int = 36_000_000
    demand_threshold: int = 5
    broadcast_cooldown_s: float = 6 * 3600.0

    # timing
    wait_mean_s: float = 7200.0
    wait_distribution: str = "exponential"
    sim_duration_s: int = 48 * 3600
    step_s: int = 60
    seeders: int = 10
    bucket_s: int = 3600

    # run bookkeeping
    seed: int = 1
    reps: int = 1
    preset: str = ""
    out_dir: str = ""

    def validate(self) -> list[str]:
        """Return warnings; raise ConfigError listing every hard violation."""
        problems: list[str] = []
        warnings: list[str] = []
        if self.graph_model not in GRAPH_MODEL_TOKENS:
            problems.append(f"graph_model must be one of {GRAPH_MODEL_TOKENS}, got {self.graph_model!r}")
        if self.mi_model not in MI_MODEL_TOKENS:
            problems.append(f"mi_model must be one of {MI_MODEL_TOKENS}, got {self.mi_model!r}")
        if self.wait_distribution not in WAIT_DISTRIBUTION_TOKENS:
            problems.append(
                f"wait_distribution must be one of {WAIT_DISTRIBUTION_TOKENS}, got {self.wait_distribution!r}"
            )
        if not 0.0 <= self.sat_ratio <= 1.0:
            problems.append(f"sat_ratio must be in [0, 1], got {self.sat_ratio}")
        if not 0.0 <= self.p_mi <= 1.0:
            problems.append(f"p_mi must be in [0, 1], got {self.p_mi}")
        if not 0.0 <= self.negative_feedback_prob <= 1.0:
            problems.append(f"negative_feedback_prob must be in [0, 1], got {self.negative_feedback_prob}")
        if self.node_count < 1:
            problems.append(f"node_count must be >= 1, got {self.node_count}")
        if self.seeders < 0 or self.seeders > self.node_count:
            problems.append(f"seeders must be in [0, node_count], got {self.seeders}")
        if self.prefetch_cap < 0:
            problems.append(f"prefetch_cap must be >= 0, got {self.prefetch_cap}")
        if self.prefetch_cap > 0 and not self.prefetch:
            problems.append("prefetch_cap requires prefetch to be enabled")
        if self.locality_only and self.buddy_help:
            problems.append("locality_only excludes buddy_help (paid local service replaces free help)")
        for name in (
            "catalog_size", "categories", "item_size_bytes", "piece_size_bytes",
            "download_bps", "upload_bps", "transponder_bps", "step_s", "bucket_s",
            "credit_limit", "cache_capacity", "max_helpers", "max_sources",
            "upload_slots", "tracker_sample", "demand_threshold", "reps",
        ):
            if getattr(self, name) <= 0 and not (name == "credit_limit" and getattr(self, name) == 0):
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.wait_mean_s <= 0:
            problems.append(f"wait_mean_s must be positive, got {self.wait_mean_s}")
        if self.sim_duration_s < 0:
            problems.append(f"sim_duration_s must be >= 0, got {self.sim_duration_s}")
        if self.broadcast_cooldown_s < 0:
            problems.append(f"broadcast_cooldown_s must be >= 0, got {self.broadcast_cooldown_s}")
        if self.feedback_strength < 0:
            problems.append(f"feedback_strength must be >= 0, got {self.feedback_strength}")
        if self.demand_w_self < 0 or self.demand_w_buddy < 0:
            problems.append("demand weights must be non-negative")
        if self.preset and self.preset not in PRESETS:
            problems.append(f"unknown preset {self.preset!r} (valid: {''.join(sorted(PRESETS))})")
        if not problems and self.upload_bps > self.download_bps:
            warnings.append(
                f"upload_bps ({self.upload_bps}) exceeds download_bps ({self.download_bps}); "
                "the reference scenario is asymmetric the other way"
            )
        if problems:
            raise ConfigError(problems)
        return warnings


def expand_preset(preset_id: str, base: ScenarioConfig) -> ScenarioConfig:
    """Overlay one lettered scenario onto a base config.

    Every preset first resets all five feature flags, then applies its own;
    scenario "a" also turns the credit economy off.
    """
    if preset_id not in PRESETS:
        raise ConfigError(
            f"unknown preset {preset_id!r}: expected one of {', '.join(sorted(PRESETS))}"
        )
    overlay = dict(
        buddy_help=False, prefetch=False, prefetch_cap=0,
        broadcast=False, locality_only=False,
        credits_enabled=preset_id != "a",
        preset=preset_id,
    )
    overlay.update(PRESETS[preset_id])
    return dataclasses.replace(base, **overlay)


# ---------------------------------------------------------------------------
# flat key=value config files / manifests
# ---------------------------------------------------------------------------

_BOOL_TOKENS = {
    "true": True, "yes": True, "on": True, "1": True,
    "false": False, "no": False, "off": False, "0": False,
}


def _parse_r_choices(text: str) -> dict[int, float]:
    choices: dict[int, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        r_text, _, p_text = part.partition(":")
        choices[int(r_text)] = float(p_text)
    if not choices:
        raise ValueError("empty r-choice list")
    return choices


def _format_r_choices(choices: dict[int, float]) -> str:
    return ",".join(f"{r}:{choices[r]:g}" for r in sorted(choices))


def parse_config(source, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Read a flat `key = value` file (``#`` comments, blank lines ignored)
    into a ScenarioConfig on top of `base` (or defaults). Unknown keys and
    unparsable values are all collected into one ConfigError."""
    own = isinstance(source, (str, bytes)) or hasattr(source, "__fspath__")
    fh = open(source, "r") if own else source
    try:
        lines = fh.read().splitlines()
    finally:
        if own:
            fh.close()

    fields = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    config = dataclasses.replace(base) if base is not None else ScenarioConfig()
    problems: list[str] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            problems.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        if key not in fields:
            problems.append(f"line {lineno}: unknown setting {key!r}")
            continue
        try:
            setattr(config, key, _coerce(key, value, fields[key].type))
        except ValueError as exc:
            problems.append(f"line {lineno}: bad value for {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return config


def _coerce(key: str, value: str, type_name: str):
    if key == "to_r_choices":
        return _parse_r_choices(value)
    if type_name == "bool":
        token = value.lower()
        if token not in _BOOL_TOKENS:
            raise ValueError(f"expected a boolean, got {value!r}")
        return _BOOL_TOKENS[token]
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value


def format_config(config: ScenarioConfig) -> str:
    """Serialize a config in the same flat format parse_config reads."""
    lines = []
    for f in sorted(dataclasses.fields(ScenarioConfig), key=lambda f: f.name):
        value = getattr(config, f.name)
        if f.name == "to_r_choices":
            value = _format_r_choices(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
