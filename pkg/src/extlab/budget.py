"""Memory budget guard.

Grid and quadrature allocations are checked against a global byte budget,
configurable through the ``LAB_MEM_BUDGET_BYTES`` environment variable.
Exceeding the budget raises :class:`~extlab.errors.BudgetError` with the
required byte count, so callers can fall back to sampled estimators.
"""

import os

from .errors import BudgetError

DEFAULT_BUDGET = 2 << 30  # 2 GiB


def mem_budget():
    raw = os.environ.get("LAB_MEM_BUDGET_BYTES", "")
    if raw:
        try:
            return max(1 << 20, int(raw))
        except ValueError:
            pass
    return DEFAULT_BUDGET


def check_alloc(nbytes, what="allocation"):
    """Raise BudgetError if `nbytes` exceeds the configured budget."""
    budget = mem_budget()
    if nbytes > budget:
        raise BudgetError(
            f"{what} needs {int(nbytes)} bytes, budget is {budget} "
            f"(set LAB_MEM_BUDGET_BYTES to raise it)",
            required_bytes=int(nbytes),
            budget_bytes=budget,
        )
    return int(nbytes)


def fits(nbytes):
    return nbytes <= mem_budget()
