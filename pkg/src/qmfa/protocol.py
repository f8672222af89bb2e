"""The challenge-response exchange as two line-oriented state machines.

Conversation (client first, one message per line)::

    C: AUTH <identity> <tokenID>
    S: CHALLENGE <i1,...,it>
    C: SUBSET <j1,...>            | ABORT token-exhausted
    S: BASES <j1:m1,...>
    C: RESPONSE <j1:a1:b1,...>
    S: RESULT OK                  | RESULT FAIL

Either side answers an out-of-order or malformed line with
``ABORT protocol-error``.  Index lists and maps are written sorted.
"""
from __future__ import annotations

import enum
import logging
import random
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .authdb import (
    AuthDatabase,
    RevokedTokenError,
    TokenRecord,
    UnknownTokenError,
    check_identity,
)
from .hmp4 import Outcome, hmp4_condition
from .token import QuantumToken, TokenError, check_token_id

log = logging.getLogger(__name__)

MAX_LINE_BYTES = 64 * 1024
DEFAULT_TIMEOUT = 30.0


class ProtocolError(ValueError):
    """A message that is malformed or arrives out of order."""


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ProtocolParams:
    t: int
    k: int

    def __post_init__(self) -> None:
        if self.t < 3 or self.t % 3:
            raise ValueError(f"challenge size t must be a positive multiple of 3, got {self.t}")
        if self.t > self.k:
            raise ValueError(f"challenge size t={self.t} exceeds register count k={self.k}")

    @property
    def subset_size(self) -> int:
        return 2 * self.t // 3


# ------------------------------------------------------------------ messages


@dataclass(frozen=True)
class Auth:
    identity: str
    token_id: str

    def encode(self) -> str:
        return f"AUTH {self.identity} {self.token_id}"


@dataclass(frozen=True)
class Challenge:
    indices: Tuple[int, ...]

    def encode(self) -> str:
        return "CHALLENGE " + ",".join(map(str, sorted(self.indices)))


@dataclass(frozen=True)
class Subset:
    indices: Tuple[int, ...]

    def encode(self) -> str:
        return "SUBSET " + ",".join(map(str, sorted(self.indices)))


@dataclass(frozen=True)
class Bases:
    bits: Tuple[Tuple[int, int], ...]

    def encode(self) -> str:
        return "BASES " + ",".join(f"{i}:{m}" for i, m in sorted(self.bits))

    def as_dict(self) -> Dict[int, int]:
        return dict(self.bits)


@dataclass(frozen=True)
class Response:
    replies: Tuple[Tuple[int, Outcome], ...]

    def encode(self) -> str:
        return "RESPONSE " + ",".join(f"{i}:{o.a}:{o.b}" for i, o in sorted(self.replies))

    def as_dict(self) -> Dict[int, Outcome]:
        return dict(self.replies)


@dataclass(frozen=True)
class Result:
    ok: bool

    def encode(self) -> str:
        return "RESULT OK" if self.ok else "RESULT FAIL"


@dataclass(frozen=True)
class Abort:
    reason: str

    def encode(self) -> str:
        return f"ABORT {self.reason}"


Message = Union[Auth, Challenge, Subset, Bases, Response, Result, Abort]

_NUM = re.compile(r"0|[1-9][0-9]*")
_REASON = re.compile(r"[a-z][a-z0-9-]{0,63}")


def _num(text: str) -> int:
    if not _NUM.fullmatch(text):
        raise ProtocolError(f"not a decimal integer: {text!r}")
    return int(text)


def _bit(text: str) -> int:
    if text not in ("0", "1"):
        raise ProtocolError(f"not a bit: {text!r}")
    return int(text)


def _items(text: str) -> List[str]:
    items = text.split(",")
    if "" in items:
        raise ProtocolError("empty list element")
    return items


def _no_dupes(keys: Sequence[int]) -> None:
    if len(set(keys)) != len(keys):
        raise ProtocolError("duplicate index")


def parse_message(line: str) -> Message:
    """Parse one wire line (without its newline)."""
    if len(line.encode("utf-8")) > MAX_LINE_BYTES:
        raise ProtocolError("line too long")
    parts = line.split(" ")
    kind, args = parts[0], parts[1:]
    if kind == "AUTH" and len(args) == 2:
        try:
            return Auth(check_identity(args[0]), check_token_id(args[1]))
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
    if kind in ("CHALLENGE", "SUBSET") and len(args) == 1:
        idx = tuple(_num(s) for s in _items(args[0]))
        _no_dupes(idx)
        return Challenge(idx) if kind == "CHALLENGE" else Subset(idx)
    if kind == "BASES" and len(args) == 1:
        bits = []
        for item in _items(args[0]):
            pair = item.split(":")
            if len(pair) != 2:
                raise ProtocolError(f"bad basis entry {item!r}")
            bits.append((_num(pair[0]), _bit(pair[1])))
        _no_dupes([i for i, _ in bits])
        return Bases(tuple(bits))
    if kind == "RESPONSE" and len(args) == 1:
        replies = []
        for item in _items(args[0]):
            triple = item.split(":")
            if len(triple) != 3:
                raise ProtocolError(f"bad reply entry {item!r}")
            replies.append((_num(triple[0]), Outcome(_bit(triple[1]), _bit(triple[2]))))
        _no_dupes([i for i, _ in replies])
        return Response(tuple(replies))
    if kind == "RESULT" and len(args) == 1 and args[0] in ("OK", "FAIL"):
        return Result(args[0] == "OK")
    if kind == "ABORT" and len(args) == 1 and _REASON.fullmatch(args[0]):
        return Abort(args[0])
    raise ProtocolError(f"unrecognised message {line[:80]!r}")


# ------------------------------------------------------------------ verdicts


class FailureReason(enum.Enum):
    """Why a session failed.  ``condition`` is the acceptance rule (1-5) it breaks."""

    UNKNOWN_TOKEN = ("unknown-token", 1)
    REVOKED = ("revoked", 1)
    IDENTITY = ("identity-not-permitted", 2)
    SUBSET_INVALID = ("subset-invalid", 3)
    INDEX_REUSED = ("index-reused", 3)
    REPLY_KEYS = ("reply-keys", 4)
    HMP4 = ("hmp4-condition", 5)
    BAD_PARAMS = ("bad-params", None)
    TOKEN_EXHAUSTED = ("token-exhausted", None)
    PROTOCOL_ERROR = ("protocol-error", None)
    TIMEOUT = ("timeout", None)
    CHANNEL_CLOSED = ("channel-closed", None)
    REJECTED = ("rejected", None)

    def __init__(self, code: str, condition: Optional[int]) -> None:
        self.code = code
        self.condition = condition

    @classmethod
    def from_code(cls, code: str) -> "FailureReason":
        for r in cls:
            if r.code == code:
                return r
        return cls.PROTOCOL_ERROR


@dataclass(frozen=True)
class Verdict:
    status: str
    reason: Optional[FailureReason] = None

    @property
    def success(self) -> bool:
        return self.status == "success"

    @property
    def pending(self) -> bool:
        return self.status == "pending"

    def __str__(self) -> str:
        if self.reason is None:
            return self.status
        return f"{self.status}({self.reason.code})"


PENDING = Verdict("pending")
SUCCESS = Verdict("success")


def failure(reason: FailureReason) -> Verdict:
    return Verdict("failure", reason)


@dataclass
class ChallengeSession:
    """Server-side state of one authentication attempt."""

    token_id: str
    identity: str
    params: ProtocolParams
    challenge: Tuple[int, ...]
    subset: Optional[Tuple[int, ...]] = None
    bases: Optional[Dict[int, int]] = None
    replies: Optional[Dict[int, Outcome]] = None
    verdict: Verdict = PENDING


# ------------------------------------------------------------- protocol steps


def server_begin(
    record: TokenRecord,
    params: ProtocolParams,
    rng: random.Random,
    identity: Optional[str] = None,
    policy: str = "uniform",
) -> Tuple[ChallengeSession, Challenge]:
    """Draw the challenge set of ``t`` distinct register indices.

    ``policy="uniform"`` samples uniformly among all t-subsets of 1..k.
    ``policy="fresh-first"`` samples from indices the server has not yet seen
    spent, topping up with spent ones only when fewer than ``t`` remain.
    """
    if params.k != record.k:
        raise ValueError(f"params.k={params.k} does not match record k={record.k}")
    t, k = params.t, params.k
    if policy == "uniform":
        chosen = rng.sample(range(1, k + 1), t)
    elif policy == "fresh-first":
        fresh = [i for i in range(1, k + 1) if i not in record.server_used]
        if len(fresh) >= t:
            chosen = rng.sample(fresh, t)
        else:
            spent = sorted(record.server_used)
            chosen = fresh + rng.sample(spent, t - len(fresh))
    else:
        raise ValueError(f"unknown challenge policy {policy!r}")
    session = ChallengeSession(
        record.token_id,
        identity if identity is not None else (record.identity or ""),
        params,
        tuple(sorted(chosen)),
    )
    return session, Challenge(session.challenge)


def client_choose_subset(
    token: QuantumToken, challenge: Sequence[int], rng: random.Random
) -> Union[Subset, Abort]:
    t = len(challenge)
    if t < 3 or t % 3:
        raise ProtocolError(f"challenge size {t} is not a positive multiple of 3")
    if len(set(challenge)) != t:
        raise ProtocolError("challenge repeats an index")
    if any(not 1 <= i <= token.k for i in challenge):
        raise ProtocolError("challenge index out of range")
    need = 2 * t // 3
    available = [i for i in sorted(challenge) if not token.slots[i - 1].used]
    if len(available) < need:
        return Abort(FailureReason.TOKEN_EXHAUSTED.code)
    return Subset(tuple(sorted(rng.sample(available, need))))


def _subset_ok(session: ChallengeSession, subset: Sequence[int]) -> bool:
    return (
        len(subset) == session.params.subset_size
        and len(set(subset)) == len(subset)
        and set(subset) <= set(session.challenge)
    )


def server_pick_bases(
    session: ChallengeSession,
    subset: Sequence[int],
    record: TokenRecord,
    rng: random.Random,
    check_reuse: bool = True,
) -> Union[Bases, Result]:
    """Validate the client's nominated subset, then draw one fair basis bit per index."""
    if not _subset_ok(session, subset):
        session.verdict = failure(FailureReason.SUBSET_INVALID)
        return Result(False)
    if check_reuse and set(subset) & record.server_used:
        session.verdict = failure(FailureReason.INDEX_REUSED)
        return Result(False)
    session.subset = tuple(sorted(subset))
    session.bases = {i: rng.getrandbits(1) for i in session.subset}
    return Bases(tuple(session.bases.items()))


def client_respond(
    token: QuantumToken, bases: Mapping[int, int], rng: random.Random
) -> Response:
    for i in bases:
        if not 1 <= i <= token.k or token.slots[i - 1].used:
            raise TokenError(f"register {i} is not available for measurement")
    replies = tuple((i, token.measure_slot(i, m, rng)) for i, m in sorted(bases.items()))
    return Response(replies)


def server_verify(
    session: ChallengeSession, record: TokenRecord, replies: Mapping[int, Outcome]
) -> Result:
    """Apply the five acceptance conditions in order."""
    session.replies = dict(replies)
    if record.token_id != session.token_id or record.revoked:
        reason = FailureReason.REVOKED if record.revoked else FailureReason.UNKNOWN_TOKEN
    elif not record.permits(session.identity):
        reason = FailureReason.IDENTITY
    elif session.subset is None or session.bases is None or not _subset_ok(session, session.subset):
        reason = FailureReason.SUBSET_INVALID
    elif set(replies) != set(session.subset):
        reason = FailureReason.REPLY_KEYS
    elif not all(
        hmp4_condition(record.x_strings[i - 1], session.bases[i], replies[i]) for i in session.subset
    ):
        reason = FailureReason.HMP4
    else:
        session.verdict = SUCCESS
        record.server_used |= set(session.subset)
        return Result(True)
    session.verdict = failure(reason)
    return Result(False)


# ------------------------------------------------------------- state machines


@dataclass
class ServerConfig:
    """Server policy.  ``choose_t`` lets the server vary the challenge size per session."""

    t: int = 12
    track_used: bool = True
    timeout: float = DEFAULT_TIMEOUT
    challenge_policy: str = "uniform"
    choose_t: Optional[Callable[[TokenRecord, str], int]] = None


class ServerSession:
    """Server end of one connection.  Feed it client lines with :meth:`handle`."""

    def __init__(
        self,
        db: AuthDatabase,
        config: ServerConfig,
        rng: random.Random,
        clock: Callable[[], float] = time.monotonic,
        logger: logging.Logger = log,
    ) -> None:
        self.db = db
        self.config = config
        self.rng = rng
        self.clock = clock
        self.logger = logger
        self.started = clock()
        self.state = "auth"
        self.session: Optional[ChallengeSession] = None
        self.record: Optional[TokenRecord] = None
        self.token_id: Optional[str] = None
        self.verdict: Verdict = PENDING

    @property
    def done(self) -> bool:
        return self.state == "done"

    def _finish(self, verdict: Verdict) -> None:
        self.verdict = verdict
        self.state = "done"
        if self.session is not None:
            self.session.verdict = verdict
        if not verdict.success and self.token_id in self.db:
            self.db.record_failure(self.token_id)
        reason = verdict.reason
        self.logger.info(
            "session token=%s verdict=%s condition=%s",
            self.token_id or "-",
            verdict.status,
            "-" if reason is None else (reason.condition or reason.code),
        )

    def expire(self) -> List[str]:
        if self.done:
            return []
        self._finish(failure(FailureReason.TIMEOUT))
        return [Abort(FailureReason.TIMEOUT.code).encode()]

    def close(self) -> None:
        """The peer went away before the exchange completed."""
        if not self.done:
            self._finish(failure(FailureReason.CHANNEL_CLOSED))

    def _fail(self, reason: FailureReason) -> List[str]:
        self._finish(failure(reason))
        return [Result(False).encode()]

    def _protocol_error(self) -> List[str]:
        self._finish(failure(FailureReason.PROTOCOL_ERROR))
        return [Abort(FailureReason.PROTOCOL_ERROR.code).encode()]

    def handle(self, line: str) -> List[str]:
        if self.done:
            return []
        if self.clock() - self.started > self.config.timeout:
            return self.expire()
        try:
            msg = parse_message(line)
        except ProtocolError:
            return self._protocol_error()

        if isinstance(msg, Abort) and self.state in ("subset", "response"):
            self._finish(failure(FailureReason.from_code(msg.reason)))
            return []
        if self.state == "auth" and isinstance(msg, Auth):
            return self._on_auth(msg)
        if self.state == "subset" and isinstance(msg, Subset):
            reply = server_pick_bases(
                self.session, msg.indices, self.record, self.rng, self.config.track_used
            )
            if isinstance(reply, Result):
                return self._fail(self.session.verdict.reason)
            self.state = "response"
            return [reply.encode()]
        if self.state == "response" and isinstance(msg, Response):
            return self._on_response(msg)
        return self._protocol_error()

    def _on_auth(self, msg: Auth) -> List[str]:
        self.token_id = msg.token_id
        try:
            record = self.db.lookup(msg.token_id)
        except UnknownTokenError:
            return self._fail(FailureReason.UNKNOWN_TOKEN)
        except RevokedTokenError:
            return self._fail(FailureReason.REVOKED)
        if not record.permits(msg.identity):
            return self._fail(FailureReason.IDENTITY)
        if not self.config.track_used:
            record.server_used = set()
        t = self.config.choose_t(record, msg.identity) if self.config.choose_t else self.config.t
        try:
            params = ProtocolParams(t, record.k)
        except ValueError:
            return self._fail(FailureReason.BAD_PARAMS)
        self.record = record
        self.session, challenge = server_begin(
            record, params, self.rng, msg.identity, self.config.challenge_policy
        )
        self.state = "subset"
        return [challenge.encode()]

    def _on_response(self, msg: Response) -> List[str]:
        result = server_verify(self.session, self.record, msg.as_dict())
        if not result.ok:
            return self._fail(self.session.verdict.reason)
        if self.config.track_used and not self.db.commit_success(
            self.token_id, self.session.subset
        ):
            return self._fail(FailureReason.INDEX_REUSED)
        self._finish(SUCCESS)
        return [result.encode()]


class ClientSession:
    """Honest client holding the real token."""

    def __init__(self, token: QuantumToken, identity: str, rng: random.Random) -> None:
        self.token = token
        self.identity = check_identity(identity)
        self.rng = rng
        self.state = "start"
        self.subset: Optional[Tuple[int, ...]] = None
        self.verdict: Verdict = PENDING

    @property
    def done(self) -> bool:
        return self.state == "done"

    @property
    def token_id(self) -> str:
        return self.token.token_id

    def start(self) -> str:
        if self.state != "start":
            raise ProtocolError("session already started")
        self.state = "challenge"
        return Auth(self.identity, self.token_id).encode()

    def _finish(self, verdict: Verdict) -> None:
        self.verdict = verdict
        self.state = "done"

    def _protocol_error(self) -> str:
        self._finish(failure(FailureReason.PROTOCOL_ERROR))
        return Abort(FailureReason.PROTOCOL_ERROR.code).encode()

    def channel_closed(self) -> None:
        if not self.done:
            self._finish(failure(FailureReason.CHANNEL_CLOSED))

    def handle(self, line: str) -> Optional[str]:
        """Consume one server line; return the reply line, or None when finished."""
        if self.done:
            return None
        try:
            msg = parse_message(line)
        except ProtocolError:
            return self._protocol_error()
        if isinstance(msg, Result):
            self._finish(SUCCESS if msg.ok else failure(FailureReason.REJECTED))
            return None
        if isinstance(msg, Abort):
            self._finish(failure(FailureReason.from_code(msg.reason)))
            return None
        if self.state == "challenge" and isinstance(msg, Challenge):
            return self.on_challenge(msg)
        if self.state == "bases" and isinstance(msg, Bases):
            return self.on_bases(msg)
        return self._protocol_error()

    def on_challenge(self, msg: Challenge) -> str:
        try:
            reply = client_choose_subset(self.token, msg.indices, self.rng)
        except ProtocolError:
            return self._protocol_error()
        if isinstance(reply, Abort):
            self._finish(failure(FailureReason.TOKEN_EXHAUSTED))
            return reply.encode()
        self.subset = reply.indices
        self.state = "bases"
        return reply.encode()

    def on_bases(self, msg: Bases) -> str:
        bits = msg.as_dict()
        if set(bits) != set(self.subset):
            return self._protocol_error()
        try:
            response = client_respond(self.token, bits, self.rng)
        except TokenError:
            return self._protocol_error()
        self.state = "result"
        return response.encode()


# --------------------------------------------------------------- transcripts


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str  # "C" for client-to-server, "S" for server-to-client
    line: str
    timestamp: float


@dataclass
class Transcript:
    entries: List[TranscriptEntry] = field(default_factory=list)

    def record(self, direction: str, line: str) -> None:
        self.entries.append(TranscriptEntry(direction, line, time.time()))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def lines(self) -> List[str]:
        return [e.line for e in self.entries]

    def messages(self) -> List[Message]:
        return [parse_message(e.line) for e in self.entries]

    def first(self, kind: type) -> Optional[Message]:
        for msg in self.messages():
            if isinstance(msg, kind):
                return msg
        return None


class ChannelClosed(ConnectionError):
    pass


@dataclass
class Handshake:
    verdict: Verdict
    transcript: Transcript


def run_handshake(client, channel) -> Handshake:
    """Drive ``client`` over ``channel`` until the exchange ends.

    ``channel`` needs ``send(line)`` and ``recv() -> line``; ``recv`` raises
    :class:`ChannelClosed` when the peer has gone.
    """
    transcript = Transcript()
    line = client.start()
    while line is not None:
        try:
            channel.send(line)
        except ChannelClosed:
            client.channel_closed()
            break
        transcript.record("C", line)
        if client.done:
            break
        try:
            reply = channel.recv()
        except ChannelClosed:
            client.channel_closed()
            break
        transcript.record("S", reply)
        line = client.handle(reply)
    return Handshake(client.verdict, transcript)
