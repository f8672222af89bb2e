"""Token issuing and the server's classical authentication database."""
from __future__ import annotations

import base64
import copy
import random
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple, Union

from ._io import atomic_write
from .hmp4 import BitString4, encode
from .token import QuantumToken, build_token, check_token_id

__all__ = [
    "AuthDatabase",
    "AuthDBError",
    "DB_FORMAT_VERSION",
    "DatabaseFormatError",
    "MIN_REGISTERS",
    "RevokedTokenError",
    "TokenRecord",
    "UnknownTokenError",
    "check_identity",
    "issue",
    "load",
    "save",
]

DB_FORMAT_VERSION = 1
MIN_REGISTERS = 3
ISSUE_RETRIES = 8
_IDENTITY_RE = re.compile(r"[A-Za-z0-9_.@+-]{1,256}")


class AuthDBError(Exception):
    pass


class UnknownTokenError(AuthDBError, KeyError):
    pass


class RevokedTokenError(AuthDBError):
    pass


class DatabaseFormatError(AuthDBError, ValueError):
    pass


def check_identity(identity: str) -> str:
    if not isinstance(identity, str) or not _IDENTITY_RE.fullmatch(identity):
        raise ValueError(f"invalid identity {identity!r}")
    return identity


@dataclass
class TokenRecord:
    token_id: str
    x_strings: List[BitString4]
    identity: Optional[str] = None
    server_used: Set[int] = field(default_factory=set)
    revoked: bool = False
    failed_attempts: int = 0

    def __post_init__(self) -> None:
        check_token_id(self.token_id)
        if not self.x_strings:
            raise ValueError("a record needs at least one register string")
        if self.identity is not None:
            check_identity(self.identity)
        if not self.server_used <= set(range(1, self.k + 1)):
            raise ValueError("server_used must be a subset of 1..k")

    @property
    def k(self) -> int:
        return len(self.x_strings)

    def permits(self, identity: str) -> bool:
        return self.identity is None or self.identity == identity


def _new_token_id(rng: random.Random) -> str:
    raw = rng.getrandbits(128).to_bytes(16, "big")
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


class AuthDatabase:
    """Mapping of token ids to records, safe to share between threads.

    Reads hand out snapshot copies; every mutation happens under one lock,
    so a lookup never observes a half-applied change.
    """

    def __init__(self, records: Iterable[TokenRecord] = ()) -> None:
        self._lock = threading.RLock()
        self._records: Dict[str, TokenRecord] = {}
        for rec in records:
            self.add(rec)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def __contains__(self, token_id: object) -> bool:
        with self._lock:
            return token_id in self._records

    def __iter__(self) -> Iterator[TokenRecord]:
        with self._lock:
            return iter([copy.deepcopy(r) for r in self._records.values()])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AuthDatabase):
            return NotImplemented
        return list(self) == list(other)

    def add(self, record: TokenRecord) -> None:
        with self._lock:
            if record.token_id in self._records:
                raise AuthDBError(f"duplicate token id {record.token_id!r}")
            self._records[record.token_id] = copy.deepcopy(record)

    def lookup(self, token_id: str) -> TokenRecord:
        with self._lock:
            rec = self._records.get(token_id)
            if rec is None:
                raise UnknownTokenError(token_id)
            if rec.revoked:
                raise RevokedTokenError(token_id)
            return TokenRecord(
                rec.token_id,
                list(rec.x_strings),
                rec.identity,
                set(rec.server_used),
                rec.revoked,
                rec.failed_attempts,
            )

    def issue(
        self, k: int, identity: str, rng: random.Random
    ) -> Tuple[QuantumToken, TokenRecord]:
        """Create a token of ``k`` registers bound to ``identity``."""
        if k < MIN_REGISTERS:
            raise ValueError(f"k must be at least {MIN_REGISTERS}, got {k}")
        check_identity(identity)
        with self._lock:
            for _ in range(ISSUE_RETRIES):
                token_id = _new_token_id(rng)
                if token_id not in self._records:
                    break
            else:
                raise AuthDBError("could not draw an unused token id")
            xs = [BitString4.from_int(rng.getrandbits(4)) for _ in range(k)]
            record = TokenRecord(token_id, xs, identity)
            self._records[token_id] = copy.deepcopy(record)
        token = build_token(token_id, [encode(x) for x in xs])
        return token, record

    def commit_success(self, token_id: str, indices: Iterable[int], check_reuse: bool = True) -> bool:
        """Merge ``indices`` into the record's used set.

        Returns False without changing anything if ``check_reuse`` is set and
        one of the indices was already spent by an earlier session.
        """
        indices = set(indices)
        with self._lock:
            rec = self._records[token_id]
            if check_reuse and indices & rec.server_used:
                return False
            rec.server_used |= indices
            return True

    def record_failure(self, token_id: str) -> None:
        with self._lock:
            rec = self._records.get(token_id)
            if rec is not None:
                rec.failed_attempts += 1

    def revoke(self, token_id: str) -> None:
        with self._lock:
            if token_id not in self._records:
                raise UnknownTokenError(token_id)
            self._records[token_id].revoked = True

    def reset_usage(self, token_id: str) -> None:
        """Forget which indices were spent; used to model a server without reuse tracking."""
        with self._lock:
            self._records[token_id].server_used.clear()

    def dumps(self) -> str:
        with self._lock:
            records = list(self._records.values())
            lines = [f"qmfa-authdb {DB_FORMAT_VERSION} {len(records)}"]
            for r in records:
                used = ",".join(str(i) for i in sorted(r.server_used)) or "-"
                xs = "".join(format(x.to_int(), "x") for x in r.x_strings)
                lines.append(
                    f"{r.token_id} {r.identity or '-'} {r.k} {xs} {used} {int(r.revoked)} {r.failed_attempts}"
                )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "AuthDatabase":
        lines = text.split("\n")
        if not lines or lines[-1] != "":
            raise DatabaseFormatError("database file truncated (missing final newline)")
        lines.pop()
        if not lines:
            raise DatabaseFormatError("empty database file")
        head = lines[0].split(" ")
        if len(head) != 3 or head[0] != "qmfa-authdb":
            raise DatabaseFormatError("not an authentication database")
        if head[1] != str(DB_FORMAT_VERSION):
            raise DatabaseFormatError(f"unsupported database version {head[1]!r}")
        if not head[2].isdigit():
            raise DatabaseFormatError("bad record count in header")
        expected = int(head[2])
        if len(lines) - 1 != expected:
            raise DatabaseFormatError(
                f"database truncated: header announces {expected} records, found {len(lines) - 1}"
            )
        db = cls()
        for n, line in enumerate(lines[1:], start=1):
            try:
                db.add(_parse_record(line))
            except (ValueError, AuthDBError) as exc:
                label = line.split(" ", 1)[0] or "?"
                raise DatabaseFormatError(f"record {n} ({label}): {exc}") from None
        return db


def _parse_record(line: str) -> TokenRecord:
    fields = line.split(" ")
    if len(fields) != 7:
        raise ValueError(f"expected 7 fields, found {len(fields)}")
    token_id, identity, k_text, xs, used, revoked, failed = fields
    k = int(k_text)
    if len(xs) != k:
        raise ValueError(f"expected {k} packed strings, found {len(xs)}")
    if revoked not in ("0", "1"):
        raise ValueError("revoked flag must be 0 or 1")
    return TokenRecord(
        token_id,
        [BitString4.from_int(int(c, 16)) for c in xs],
        None if identity == "-" else identity,
        set() if used == "-" else {int(i) for i in used.split(",")},
        revoked == "1",
        int(failed),
    )


def issue(db: AuthDatabase, k: int, identity: str, rng: random.Random):
    return db.issue(k, identity, rng)


def lookup(db: AuthDatabase, token_id: str) -> TokenRecord:
    return db.lookup(token_id)


def save(db: AuthDatabase, path: Union[str, Path]) -> None:
    atomic_write(path, db.dumps())


def load(path: Union[str, Path]) -> AuthDatabase:
    return AuthDatabase.loads(Path(path).read_text(encoding="utf-8"))
