"""Client-side quantum token: an identifier plus ``k`` single-use registers."""
from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Union

from ._io import atomic_write
from .hmp4 import Outcome, RegisterState, measure

__all__ = [
    "QuantumToken",
    "RegisterSlot",
    "TOKEN_FORMAT_VERSION",
    "TokenError",
    "TokenFormatError",
    "build_token",
    "check_token_id",
    "load_token",
    "save_token",
]

TOKEN_FORMAT_VERSION = 1
_TOKEN_ID_RE = re.compile(r"[A-Za-z0-9_-]{1,64}")


class TokenError(Exception):
    """Misuse of a token: bad index, or a register measured twice."""


class TokenFormatError(ValueError):
    pass


def check_token_id(token_id: str) -> str:
    if not isinstance(token_id, str) or not _TOKEN_ID_RE.fullmatch(token_id):
        raise ValueError(f"invalid token id {token_id!r}")
    return token_id


@dataclass
class RegisterSlot:
    index: int
    state: RegisterState

    @property
    def used(self) -> bool:
        return self.state.is_collapsed


@dataclass
class QuantumToken:
    token_id: str
    slots: List[RegisterSlot] = field(default_factory=list)

    def __post_init__(self) -> None:
        check_token_id(self.token_id)
        if not self.slots:
            raise TokenError("a token needs at least one register")
        if [s.index for s in self.slots] != list(range(1, len(self.slots) + 1)):
            raise TokenError("slot indices must be exactly 1..k")

    @property
    def k(self) -> int:
        return len(self.slots)

    @property
    def used_count(self) -> int:
        return sum(1 for s in self.slots if s.used)

    def unused_indices(self) -> List[int]:
        return [s.index for s in self.slots if not s.used]

    def measure_slot(self, index: int, m: int, rng: random.Random) -> Outcome:
        """Measure register ``index`` in basis ``m`` and mark it used."""
        if not 1 <= index <= self.k:
            raise TokenError(f"register index {index} out of range 1..{self.k}")
        slot = self.slots[index - 1]
        if slot.used:
            raise TokenError(f"register {index} already used")
        outcome, slot.state = measure(slot.state, m, rng)
        return outcome

    def renewal_due(self) -> bool:
        """Advisory: at least a quarter of the registers are spent."""
        return self.used_count >= math.ceil(self.k / 4)


def build_token(token_id: str, states: Sequence[RegisterState]) -> QuantumToken:
    if not states:
        raise TokenError("cannot build a token from an empty state list")
    for i, s in enumerate(states, start=1):
        if not s.is_fresh:
            raise TokenError(f"state {i} is not fresh")
    return QuantumToken(token_id, [RegisterSlot(i, s) for i, s in enumerate(states, start=1)])


def unused_indices(token: QuantumToken) -> List[int]:
    return token.unused_indices()


def measure_slot(token: QuantumToken, index: int, m: int, rng: random.Random) -> Outcome:
    return token.measure_slot(index, m, rng)


def renewal_due(token: QuantumToken) -> bool:
    return token.renewal_due()


# Token file, one field per line:
#
#   qmfa-token 1
#   token_id <id>
#   k <k>
#   slot <i> fresh <a00> <a01> <a10> <a11>
#   slot <i> used <m> <a> <b> <a00> <a01> <a10> <a11>
#
# Amplitudes use repr() so a load/save cycle reproduces the bytes exactly.
# Persisting amplitudes only makes sense for a simulated token.


def dumps_token(token: QuantumToken) -> str:
    lines = [f"qmfa-token {TOKEN_FORMAT_VERSION}", f"token_id {token.token_id}", f"k {token.k}"]
    for slot in token.slots:
        amps = " ".join(repr(float(a)) for a in slot.state.amplitudes)
        st = slot.state
        if st.is_fresh:
            lines.append(f"slot {slot.index} fresh {amps}")
        else:
            lines.append(f"slot {slot.index} used {st.basis} {st.outcome.a} {st.outcome.b} {amps}")
    return "\n".join(lines) + "\n"


def loads_token(text: str) -> QuantumToken:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 3:
        raise TokenFormatError("token file truncated")
    head = lines[0].split(" ")
    if len(head) != 2 or head[0] != "qmfa-token":
        raise TokenFormatError("not a token file")
    if head[1] != str(TOKEN_FORMAT_VERSION):
        raise TokenFormatError(f"unsupported token format version {head[1]!r}")
    key, _, token_id = lines[1].partition(" ")
    if key != "token_id":
        raise TokenFormatError("line 2: expected token_id")
    key, _, k_text = lines[2].partition(" ")
    if key != "k" or not k_text.isdigit():
        raise TokenFormatError("line 3: expected k")
    k = int(k_text)
    if len(lines) - 3 != k:
        raise TokenFormatError(f"expected {k} slot lines, found {len(lines) - 3}")
    slots = []
    for lineno, line in enumerate(lines[3:], start=4):
        parts = line.split(" ")
        try:
            if parts[0] != "slot" or int(parts[1]) != lineno - 3:
                raise ValueError("bad slot header")
            if parts[2] == "fresh" and len(parts) == 7:
                state = RegisterState(tuple(float(v) for v in parts[3:7]))
            elif parts[2] == "used" and len(parts) == 10:
                m, a, b = (int(v) for v in parts[3:6])
                state = RegisterState(tuple(float(v) for v in parts[6:10]), m, Outcome.checked(a, b))
            else:
                raise ValueError("bad slot status")
        except (ValueError, IndexError) as exc:
            raise TokenFormatError(f"line {lineno}: {exc}") from None
        slots.append(RegisterSlot(lineno - 3, state))
    try:
        return QuantumToken(token_id, slots)
    except (ValueError, TokenError) as exc:
        raise TokenFormatError(str(exc)) from None


def save_token(token: QuantumToken, path: Union[str, Path]) -> None:
    atomic_write(path, dumps_token(token))


def load_token(path: Union[str, Path]) -> QuantumToken:
    return loads_token(Path(path).read_text(encoding="utf-8"))
