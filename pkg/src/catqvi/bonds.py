"""Bond-book state machine: slots, issuance, settlement, payoff.

A book holds a fixed number ``kappa`` of slots; an empty slot marks the
absence of a bond.  Books are immutable values kept in a canonical
order, so permuted books compare and hash equal.

The ``layers`` argument of the settlement operations is any object with
``attachment(k, t)`` and ``capacity(k, t)`` methods returning
insurer-scale thresholds for layer ``k`` at issue time ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional


@dataclass(frozen=True)
class BondSlot:
    """One running bond: chosen layer, coupon rate, elapsed time,
    optionally the state at issue when a payoff profile needs it."""

    layer: int
    coupon: float
    elapsed: float = 0.0
    issue_state: Optional[tuple] = None

    def sort_key(self):
        return (self.layer, self.elapsed, self.coupon)


@dataclass(frozen=True)
class BondBook:
    """Canonical fixed-size collection of bond slots (``None`` = empty)."""

    slots: tuple[Optional[BondSlot], ...]

    @classmethod
    def empty(cls, kappa: int) -> "BondBook":
        return cls(slots=(None,) * kappa)

    @property
    def kappa(self) -> int:
        return len(self.slots)

    @property
    def running(self) -> tuple[BondSlot, ...]:
        return tuple(s for s in self.slots if s is not None)

    @property
    def n_running(self) -> int:
        return sum(1 for s in self.slots if s is not None)

    @property
    def is_full(self) -> bool:
        return self.n_running == self.kappa

    def coupon_total(self) -> float:
        return sum(s.coupon for s in self.running)


def canonicalize(book: BondBook) -> BondBook:
    """Sort running slots by (layer, elapsed, coupon), empties last."""
    running = sorted(book.running, key=BondSlot.sort_key)
    slots = tuple(running) + (None,) * (book.kappa - len(running))
    return BondBook(slots=slots)


def issue(book: BondBook, slot: BondSlot) -> BondBook:
    """Place a new bond in the first empty slot with elapsed zero."""
    if book.is_full:
        raise ValueError(f"{book.kappa} bonds already running")
    slot = replace(slot, elapsed=0.0)
    slots = list(book.slots)
    slots[slots.index(None)] = slot
    return canonicalize(BondBook(slots=tuple(slots)))


def settle_event(book: BondBook, u: float, t: float, layers) -> tuple[BondBook, frozenset]:
    """Empty every slot whose layer attachment at its issue time is
    reached by the insurer-scale loss ``u``; returns the new book and the
    set of triggered slot indices."""
    if u <= 0.0:
        raise ValueError("claim size must be positive")
    triggered = frozenset(
        i
        for i, s in enumerate(book.slots)
        if s is not None and u >= layers.attachment(s.layer, t - s.elapsed)
    )
    slots = tuple(None if i in triggered else s for i, s in enumerate(book.slots))
    return canonicalize(BondBook(slots=slots)), triggered


def settle_maturity(book: BondBook, ell: float) -> BondBook:
    """Empty slots whose elapsed time has reached the maturity."""
    slots = tuple(
        None if (s is not None and s.elapsed >= ell - 1e-12) else s for s in book.slots
    )
    return canonicalize(BondBook(slots=slots))


def advance_elapsed(book: BondBook, dt: float) -> BondBook:
    """Age every running bond by ``dt``; settlement is the caller's job."""
    if dt < 0.0:
        raise ValueError("dt must be nonnegative")
    slots = tuple(
        replace(s, elapsed=s.elapsed + dt) if s is not None else None for s in book.slots
    )
    return BondBook(slots=slots)


def total_payoff(book: BondBook, u: float, t: float, layers) -> float:
    """Sum of layer payoffs of the slots triggered by the loss ``u``,
    with attachment and capacity frozen at each bond's issue time."""
    if u <= 0.0:
        raise ValueError("claim size must be positive")
    total = 0.0
    for s in book.running:
        t_issue = t - s.elapsed
        attach = layers.attachment(s.layer, t_issue)
        if u >= attach:
            total += min(max(u - attach, 0.0), layers.capacity(s.layer, t_issue))
    return total


def _slot_norm_sq(s: BondSlot) -> float:
    n = float(s.layer) ** 2 + s.coupon**2 + s.elapsed**2
    if s.issue_state is not None:
        n += sum(float(v) ** 2 for v in s.issue_state)
    return n


def _slot_diff_sq(a: BondSlot, b: BondSlot) -> float:
    d = (float(a.layer) - float(b.layer)) ** 2 + (a.coupon - b.coupon) ** 2 + (a.elapsed - b.elapsed) ** 2
    xa = a.issue_state or ()
    xb = b.issue_state or ()
    for va, vb in zip(xa, xb):
        d += (float(va) - float(vb)) ** 2
    return d


def distance(a: BondBook, b: BondBook) -> float:
    """Metric between two books of the same size.

    Square root of: squared slot differences on common running indices,
    squared slot norms on one-sided indices, plus the cardinality of the
    symmetric difference of the running index sets.  (The plain sum is
    not a metric; its square root is, by embedding each running slot at
    unit height above the empty point.)
    """
    if a.kappa != b.kappa:
        raise ValueError("books must have the same number of slots")
    total = 0.0
    for sa, sb in zip(a.slots, b.slots):
        if sa is not None and sb is not None:
            total += _slot_diff_sq(sa, sb)
        elif sa is not None:
            total += _slot_norm_sq(sa) + 1.0
        elif sb is not None:
            total += _slot_norm_sq(sb) + 1.0
    return math.sqrt(total)
