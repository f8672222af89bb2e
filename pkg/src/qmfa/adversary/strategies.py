"""Impersonation strategies.

Every attacker here is a client state machine that sees nothing but wire
lines: the challenge it is sent and whatever transcripts it tapped earlier.
None of them has access to a token or to the issuer's database.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from ..hmp4 import Outcome
from ..protocol import (
    PENDING,
    SUCCESS,
    Abort,
    Auth,
    Bases,
    Challenge,
    FailureReason,
    ProtocolError,
    Response,
    Result,
    Subset,
    Transcript,
    Verdict,
    failure,
    parse_message,
)

__all__ = [
    "BlindGuess",
    "ExhaustionAttacker",
    "FullObservation",
    "Knowledge",
    "ReplayEavesdropper",
    "VerbatimReplay",
]


class Knowledge:
    """Observed ``(index, basis) -> outcome`` triples harvested from transcripts."""

    def __init__(self) -> None:
        self.seen: Dict[Tuple[int, int], Outcome] = {}

    @classmethod
    def from_transcripts(cls, transcripts: Iterable[Transcript]) -> "Knowledge":
        kb = cls()
        for transcript in transcripts:
            kb.absorb(transcript)
        return kb

    def absorb(self, transcript: Transcript) -> None:
        bases: Optional[Dict[int, int]] = None
        for entry in transcript:
            try:
                msg = parse_message(entry.line)
            except ProtocolError:
                continue
            if isinstance(msg, Bases):
                bases = msg.as_dict()
            elif isinstance(msg, Response) and bases is not None:
                for i, outcome in msg.replies:
                    if i in bases:
                        self.seen.setdefault((i, bases[i]), outcome)
                bases = None

    @property
    def indices(self) -> set:
        return {i for i, _ in self.seen}

    def lookup(self, index: int, m: int) -> Optional[Outcome]:
        return self.seen.get((index, m))

    def __len__(self) -> int:
        return len(self.seen)


def _guess(rng: random.Random) -> Outcome:
    return Outcome(rng.getrandbits(1), rng.getrandbits(1))


class AttackClient:
    """Skeleton impersonator; subclasses decide the subset and the replies."""

    def __init__(self, identity: str, token_id: str, rng: random.Random) -> None:
        self.identity = identity
        self.token_id = token_id
        self.rng = rng
        self.state = "start"
        self.challenge: Tuple[int, ...] = ()
        self.subset: Tuple[int, ...] = ()
        self.bases: Dict[int, int] = {}
        self.verdict: Verdict = PENDING

    @property
    def done(self) -> bool:
        return self.state == "done"

    def start(self) -> str:
        self.state = "challenge"
        return Auth(self.identity, self.token_id).encode()

    def channel_closed(self) -> None:
        if not self.done:
            self._finish(failure(FailureReason.CHANNEL_CLOSED))

    def _finish(self, verdict: Verdict) -> None:
        self.verdict = verdict
        self.state = "done"

    def handle(self, line: str) -> Optional[str]:
        if self.done:
            return None
        msg = parse_message(line)
        if isinstance(msg, Result):
            self._finish(SUCCESS if msg.ok else failure(FailureReason.REJECTED))
            return None
        if isinstance(msg, Abort):
            self._finish(failure(FailureReason.from_code(msg.reason)))
            return None
        if self.state == "challenge" and isinstance(msg, Challenge):
            self.challenge = msg.indices
            self.subset = tuple(sorted(self.choose_subset(msg.indices)))
            self.state = "bases"
            return Subset(self.subset).encode()
        if self.state == "bases" and isinstance(msg, Bases):
            self.bases = msg.as_dict()
            self.state = "result"
            return self.respond(self.bases)
        self._finish(failure(FailureReason.PROTOCOL_ERROR))
        return Abort(FailureReason.PROTOCOL_ERROR.code).encode()

    def choose_subset(self, challenge: Sequence[int]) -> List[int]:
        return self.rng.sample(sorted(challenge), 2 * len(challenge) // 3)

    def respond(self, bases: Dict[int, int]) -> str:
        raise NotImplementedError


class BlindGuessClient(AttackClient):
    def respond(self, bases: Dict[int, int]) -> str:
        return Response(tuple((i, _guess(self.rng)) for i in sorted(bases))).encode()


class ReplayClient(AttackClient):
    """Nominate observed registers where possible; replay matching-basis outcomes, guess the rest."""

    def __init__(self, identity: str, token_id: str, rng: random.Random, knowledge: Knowledge) -> None:
        super().__init__(identity, token_id, rng)
        self.knowledge = knowledge

    def choose_subset(self, challenge: Sequence[int]) -> List[int]:
        need = 2 * len(challenge) // 3
        known = self.knowledge.indices
        seen = [i for i in sorted(challenge) if i in known]
        if len(seen) >= need:
            return self.rng.sample(seen, need)
        rest = [i for i in sorted(challenge) if i not in known]
        return seen + self.rng.sample(rest, need - len(seen))

    def respond(self, bases: Dict[int, int]) -> str:
        replies = []
        for i in sorted(bases):
            outcome = self.knowledge.lookup(i, bases[i])
            replies.append((i, outcome if outcome is not None else _guess(self.rng)))
        return Response(tuple(replies)).encode()


class VerbatimReplayClient(AttackClient):
    """Resend a recorded SUBSET (when it fits the new challenge) and the recorded RESPONSE line as-is."""

    def __init__(self, identity: str, token_id: str, rng: random.Random, transcript: Transcript) -> None:
        super().__init__(identity, token_id, rng)
        subset = transcript.first(Subset)
        response = [e.line for e in transcript if e.line.startswith("RESPONSE ")]
        if subset is None or not response:
            raise ValueError("transcript has no SUBSET/RESPONSE to replay")
        self.recorded_subset = tuple(sorted(subset.indices))
        self.recorded_response = response[0]
        bases = transcript.first(Bases)
        self.recorded_bases = bases.as_dict() if bases is not None else {}

    def choose_subset(self, challenge: Sequence[int]) -> List[int]:
        if set(self.recorded_subset) <= set(challenge):
            return list(self.recorded_subset)
        return super().choose_subset(challenge)

    def respond(self, bases: Dict[int, int]) -> str:
        return self.recorded_response


# ------------------------------------------------------------ strategy types


@dataclass(frozen=True)
class BlindGuess:
    name = "blind-guess"

    def client(self, identity: str, token_id: str, rng: random.Random) -> AttackClient:
        return BlindGuessClient(identity, token_id, rng)


@dataclass
class ReplayEavesdropper:
    observed: List[Transcript] = field(default_factory=list)
    name = "replay"

    def __post_init__(self) -> None:
        self.knowledge = Knowledge.from_transcripts(self.observed)

    def client(self, identity: str, token_id: str, rng: random.Random) -> AttackClient:
        return ReplayClient(identity, token_id, rng, self.knowledge)


@dataclass
class FullObservation(ReplayEavesdropper):
    """Replay attacker holding one observed measurement for every register of a k-register token."""

    k: int = 0
    name = "full-observation"

    def __post_init__(self) -> None:
        super().__post_init__()
        missing = set(range(1, self.k + 1)) - self.knowledge.indices
        if missing:
            raise ValueError(f"transcripts leave {len(missing)} registers unobserved")


@dataclass(frozen=True)
class VerbatimReplay:
    transcript: Transcript
    name = "verbatim-replay"

    def client(self, identity: str, token_id: str, rng: random.Random) -> VerbatimReplayClient:
        return VerbatimReplayClient(identity, token_id, rng, self.transcript)


@dataclass(frozen=True)
class ExhaustionAttacker:
    """Lures the legitimate holder into ``sessions_to_force`` pointless authentications."""

    sessions_to_force: int
    name = "exhaustion"

    def __post_init__(self) -> None:
        if self.sessions_to_force < 1:
            raise ValueError("sessions_to_force must be positive")
