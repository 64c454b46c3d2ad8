"""Privacy budgets and the expenditure ledger.

Every randomized release in this package charges its (epsilon, delta) cost to
a ledger.  The ledger is append-only and single-writer: each pipeline run
creates its own instance, so entries can be summed at the end and compared
against the configured budget.  Charges record the composition rule that
justifies summing them (basic, parallel, or advanced), so an audit can replay
the accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair. delta may be zero for pure-DP mechanisms."""

    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not (0.0 <= self.delta < 1.0):
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")

    def split(self, parts: int) -> "PrivacyBudget":
        """Equal split under basic composition: parts copies sum back to self."""
        if parts < 1:
            raise ValueError("parts must be >= 1")
        return PrivacyBudget(self.epsilon / parts, self.delta / parts)

    def fraction(self, frac: float) -> "PrivacyBudget":
        if not (0.0 < frac <= 1.0):
            raise ValueError("fraction must be in (0, 1]")
        return PrivacyBudget(self.epsilon * frac, self.delta * frac)


@dataclass(frozen=True)
class LedgerEntry:
    label: str
    epsilon: float
    delta: float = 0.0
    rule: str = "basic"
    detail: str = ""


class BudgetLedger:
    """Append-only record of (epsilon, delta) expenditures.

    Entries are top-level charges: a release that internally runs many
    disjoint sub-mechanisms (parallel composition) records one entry for the
    whole release, tagged rule="parallel".  A release justified by advanced
    composition records one entry tagged rule="advanced" whose detail string
    carries the per-step epsilon and the step count.  Under this convention
    the plain sum of entries is the consumed budget.
    """

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def charge(self, label: str, epsilon: float, delta: float = 0.0,
               rule: str = "basic", detail: str = "") -> LedgerEntry:
        if epsilon < 0 or delta < 0:
            raise ValueError("charges must be nonnegative")
        entry = LedgerEntry(label, float(epsilon), float(delta), rule, detail)
        self.entries.append(entry)
        return entry

    @property
    def epsilon_spent(self) -> float:
        return math.fsum(e.epsilon for e in self.entries)

    @property
    def delta_spent(self) -> float:
        return math.fsum(e.delta for e in self.entries)

    def total(self) -> tuple[float, float]:
        return (self.epsilon_spent, self.delta_spent)

    def matches(self, budget: PrivacyBudget, rel_tol: float = 1e-9) -> bool:
        """True if the summed charges equal the budget up to float error."""
        eps_ok = math.isclose(self.epsilon_spent, budget.epsilon, rel_tol=rel_tol, abs_tol=1e-12)
        del_ok = math.isclose(self.delta_spent, budget.delta, rel_tol=rel_tol, abs_tol=1e-15)
        return eps_ok and del_ok

    def as_records(self) -> list[dict]:
        return [
            {"label": e.label, "epsilon": e.epsilon, "delta": e.delta,
             "rule": e.rule, "detail": e.detail}
            for e in self.entries
        ]

    def __len__(self) -> int:
        return len(self.entries)
