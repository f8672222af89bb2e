"""Exact state-vector simulation of HMP4 registers.

A register holds two qubits in the state

    |alpha(x)> = 1/2 * sum_i (-1)**x_i |(i-1) in binary>

for a classical string x of four bits.  Every state and basis vector that
occurs here has real coefficients, so amplitudes are stored as plain floats
and no complex arithmetic is needed.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

__all__ = [
    "BitString4",
    "Outcome",
    "RegisterState",
    "StateError",
    "TOLERANCE",
    "basis_vectors",
    "decode",
    "encode",
    "hmp4_condition",
    "measure",
    "outcome_probabilities",
    "valid_outcomes",
]

TOLERANCE = 1e-12
_H = 1.0 / math.sqrt(2.0)


class StateError(ValueError):
    """Raised when a register state violates its invariants."""


def _check_bit(name: str, value: int) -> int:
    if not isinstance(value, int) or value not in (0, 1):
        raise ValueError(f"{name} must be 0 or 1, got {value!r}")
    return int(value)


@dataclass(frozen=True, slots=True)
class BitString4:
    """Four classical bits ``x1 x2 x3 x4``; ``x1`` is the most significant."""

    x1: int
    x2: int
    x3: int
    x4: int

    def __post_init__(self) -> None:
        for name in ("x1", "x2", "x3", "x4"):
            _check_bit(name, getattr(self, name))

    @classmethod
    def from_int(cls, value: int) -> "BitString4":
        if not 0 <= value < 16:
            raise ValueError(f"4-bit value out of range: {value!r}")
        return cls((value >> 3) & 1, (value >> 2) & 1, (value >> 1) & 1, value & 1)

    @classmethod
    def from_str(cls, text: str) -> "BitString4":
        if len(text) != 4 or set(text) - {"0", "1"}:
            raise ValueError(f"expected four binary digits, got {text!r}")
        return cls(*(int(c) for c in text))

    def to_int(self) -> int:
        return (self.x1 << 3) | (self.x2 << 2) | (self.x3 << 1) | self.x4

    @property
    def bits(self) -> Tuple[int, int, int, int]:
        return (self.x1, self.x2, self.x3, self.x4)

    def bit(self, i: int) -> int:
        """Return ``x_i`` using 1-based indexing."""
        if not 1 <= i <= 4:
            raise IndexError(i)
        return self.bits[i - 1]

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)


class Outcome(NamedTuple):
    """Reply bits for one measured register; ``(a, b)`` labels v1..v4."""

    a: int
    b: int

    @classmethod
    def from_index(cls, j: int) -> "Outcome":
        """Outcome for basis vector ``v_{j+1}`` (``j`` in 0..3)."""
        return cls(j >> 1, j & 1)

    @property
    def index(self) -> int:
        return (self.a << 1) | self.b

    @classmethod
    def checked(cls, a: int, b: int) -> "Outcome":
        return cls(_check_bit("a", a), _check_bit("b", b))


ALL_OUTCOMES = tuple(Outcome.from_index(j) for j in range(4))

# Rows are v1..v4 in the order that maps to (0,0), (0,1), (1,0), (1,1).
_BASES = (
    np.array(
        [
            [_H, _H, 0.0, 0.0],
            [_H, -_H, 0.0, 0.0],
            [0.0, 0.0, _H, _H],
            [0.0, 0.0, _H, -_H],
        ]
    ),
    np.array(
        [
            [_H, 0.0, _H, 0.0],
            [_H, 0.0, -_H, 0.0],
            [0.0, _H, 0.0, _H],
            [0.0, _H, 0.0, -_H],
        ]
    ),
)
for _b in _BASES:
    _b.setflags(write=False)


@dataclass(frozen=True, slots=True)
class RegisterState:
    """Real amplitudes over |00>, |01>, |10>, |11> plus collapse bookkeeping.

    ``basis`` and ``outcome`` are both ``None`` for a fresh register and both
    set once the register has been measured.
    """

    amplitudes: Tuple[float, float, float, float]
    basis: Optional[int] = None
    outcome: Optional[Outcome] = None

    def __post_init__(self) -> None:
        if len(self.amplitudes) != 4:
            raise StateError("a register has exactly four amplitudes")
        if (self.basis is None) != (self.outcome is None):
            raise StateError("basis and outcome must be set together")
        if self.basis is not None:
            _check_bit("basis", self.basis)

    @property
    def is_fresh(self) -> bool:
        return self.basis is None

    @property
    def is_collapsed(self) -> bool:
        return self.basis is not None

    def vector(self) -> np.ndarray:
        return np.asarray(self.amplitudes, dtype=float)

    def norm_error(self) -> float:
        return abs(sum(a * a for a in self.amplitudes) - 1.0)


def encode(x: BitString4) -> RegisterState:
    """Prepare the fresh register for ``x``."""
    return RegisterState(tuple(-0.5 if bit else 0.5 for bit in x.bits))


def decode(state: RegisterState) -> BitString4:
    """Recover ``x`` from the amplitude signs of a fresh register."""
    if not state.is_fresh:
        raise StateError("only fresh registers carry the full string")
    return BitString4(*(1 if a < 0 else 0 for a in state.amplitudes))


def basis_vectors(m: int) -> np.ndarray:
    """Return the 4x4 read-only matrix whose rows are v1..v4 for basis ``m``."""
    return _BASES[_check_bit("m", m)]


def outcome_probabilities(state: RegisterState, m: int) -> Tuple[float, float, float, float]:
    if state.norm_error() > TOLERANCE:
        raise StateError(f"state is not normalized (error {state.norm_error():.3g})")
    overlaps = basis_vectors(m) @ state.vector()
    probs = np.clip(overlaps * overlaps, 0.0, 1.0)
    return tuple(float(p) for p in probs)


def measure(
    state: RegisterState, m: int, rng: random.Random
) -> Tuple[Outcome, RegisterState]:
    """Projectively measure ``state`` in basis ``m``.

    Sampling inverts the cumulative distribution over v1..v4 with a single
    draw from ``rng``.  The returned state is the selected basis vector.
    """
    probs = outcome_probabilities(state, m)
    u = rng.random()
    acc = 0.0
    chosen = 3
    for j, p in enumerate(probs):
        acc += p
        if u < acc:
            chosen = j
            break
    # rounding can leave the tail of the cdf just below u; never land on a zero
    while probs[chosen] == 0.0:
        chosen -= 1
    outcome = Outcome.from_index(chosen)
    row = basis_vectors(m)[chosen]
    return outcome, RegisterState(tuple(float(v) for v in row), m, outcome)


def hmp4_condition(x: BitString4, m: int, out: Outcome) -> bool:
    """True when ``(x, m, a, b)`` satisfies the HMP4 relation."""
    if out.a == 0:
        expected = x.x1 ^ (x.x3 if m else x.x2)
    else:
        expected = (x.x2 if m else x.x3) ^ x.x4
    return out.b == expected


def valid_outcomes(x: BitString4, m: int) -> frozenset:
    return frozenset(o for o in ALL_OUTCOMES if hmp4_condition(x, m, o))
