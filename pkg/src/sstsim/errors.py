"""Exception types shared across the simulator."""

from __future__ import annotations


class ConfigError(Exception):
    """Invalid configuration. Collects every violation found, not just the first."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class EdgeListParseError(Exception):
    """Malformed edge-list file. Carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class SimulationInvariantError(Exception):
    """An engine invariant (credit floor, bandwidth cap, piece conservation) was violated."""
