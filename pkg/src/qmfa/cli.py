"""Command line entry point: ``qmfa issue|serve|auth|revoke|attack|lifetime``.

Exit codes: 0 success, 1 authentication failure, 2 usage error,
3 I/O error, 4 token exhausted.
"""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from ._io import derive_rng
from .adversary import experiments
from .authdb import AuthDatabase, AuthDBError, MIN_REGISTERS, load, save
from .protocol import FailureReason, ClientSession, ServerConfig, run_handshake
from .token import TokenFormatError, load_token, save_token
from .transport import AuthServer, connect

EXIT_OK = 0
EXIT_AUTH_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_EXHAUSTED = 4

DB_ENV = "QMFA_DB"
DEFAULT_ADDR = "127.0.0.1:7390"
STRATEGIES = ("blind-guess", "replay", "verbatim-replay")

log = logging.getLogger("qmfa")


class UsageError(Exception):
    pass


def parse_addr(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or int(port) > 65535:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def parse_t_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad challenge-size list {text!r}") from None
    return values


def _db_path(args) -> Path:
    path = args.db or os.environ.get(DB_ENV)
    if not path:
        raise UsageError(f"no database given (use --db or set {DB_ENV})")
    return Path(path)


def _err(message: str) -> None:
    print(f"qmfa: {message}", file=sys.stderr)


def _emit(text: str, out: Optional[str]) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()
    if out:
        experiments.write_table(out, text)


# ------------------------------------------------------------------ commands


def cmd_issue(args) -> int:
    if args.k < MIN_REGISTERS:
        raise UsageError(f"--k must be at least {MIN_REGISTERS}")
    path = _db_path(args)
    db = load(path) if path.exists() else AuthDatabase()
    try:
        token, record = db.issue(args.k, args.identity, derive_rng(args.seed, "issue"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save(db, path)
    save_token(token, args.token)
    print(record.token_id)
    return EXIT_OK


def cmd_revoke(args) -> int:
    path = _db_path(args)
    db = load(path)
    db.revoke(args.token_id)
    save(db, path)
    return EXIT_OK


def cmd_serve(args) -> int:
    path = _db_path(args)
    db = load(path)
    config = ServerConfig(t=args.t, timeout=args.timeout)

    def flush(_session) -> None:
        save(db, path)

    server = AuthServer(args.addr, db, config, seed=args.seed, on_session=flush, logger=log)
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)

    def interrupt(signum, frame):
        raise KeyboardInterrupt

    # a shell may start background jobs with SIGINT ignored
    signal.signal(signal.SIGINT, interrupt)
    signal.signal(signal.SIGTERM, interrupt)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        save(db, path)
        log.info("shutdown, database flushed")
    return EXIT_OK


def cmd_auth(args) -> int:
    token = load_token(args.token)
    try:
        channel = connect(args.addr, timeout=args.timeout)
    except OSError as exc:
        _err(f"cannot connect to {args.addr[0]}:{args.addr[1]}: {exc}")
        return EXIT_IO
    client = ClientSession(token, args.identity, derive_rng(args.seed, "auth"))
    with channel:
        result = run_handshake(client, channel)
    save_token(token, args.token)
    remaining = len(token.unused_indices())
    print(f"verdict {result.verdict}")
    print(f"remaining registers {remaining}/{token.k}")
    if token.renewal_due():
        print("warning: token renewal due, request a new token soon", file=sys.stderr)
    if result.verdict.success:
        return EXIT_OK
    if result.verdict.reason is FailureReason.TOKEN_EXHAUSTED:
        _err("token exhausted: request a new token")
        return EXIT_EXHAUSTED
    return EXIT_AUTH_FAILED


def cmd_attack(args) -> int:
    if args.strategy == "blind-guess":
        exp = experiments.run_blind_guess(args.k, args.t, args.trials, args.seed)
    elif args.strategy == "replay":
        exp = experiments.run_replay_eavesdropper(
            args.k, args.t, args.observed, args.trials, args.seed, hardened=args.hardened
        )
    else:
        exp, _ = experiments.run_verbatim_replay(args.k, args.t, args.trials, args.seed)
    _emit(experiments.format_table(exp.HEADER, [exp.row()]), args.out)
    return EXIT_OK


def cmd_lifetime(args) -> int:
    if not args.t:
        raise UsageError("--t needs at least one challenge size")
    rows = experiments.sweep_lifetime(args.k, args.t, args.repetitions, args.seed)
    _emit(experiments.format_table(experiments.LifetimeRow.HEADER, [r.row() for r in rows]), args.out)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmfa", description="Quantum-token multi-factor authentication")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_db(p):
        p.add_argument("--db", help=f"authentication database (default: ${DB_ENV})")

    p = sub.add_parser("issue", help="issue a new token")
    with_db(p)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--identity", required=True)
    p.add_argument("--token", required=True, help="token file to write")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_issue)

    p = sub.add_parser("revoke", help="revoke a token")
    with_db(p)
    p.add_argument("token_id")
    p.set_defaults(func=cmd_revoke)

    p = sub.add_parser("serve", help="run the authentication server")
    with_db(p)
    p.add_argument("--addr", type=parse_addr, default=parse_addr(DEFAULT_ADDR))
    p.add_argument("--t", type=int, default=12)
    p.add_argument("--seed", type=int)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("auth", help="authenticate with a token")
    p.add_argument("--token", required=True)
    p.add_argument("--addr", type=parse_addr, default=parse_addr(DEFAULT_ADDR))
    p.add_argument("--identity", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_auth)

    p = sub.add_parser("attack", help="Monte Carlo impersonation experiment")
    p.add_argument("strategy", choices=STRATEGIES)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--t", type=int, default=12)
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--seed", type=int)
    p.add_argument("--observed", type=int, default=None,
                   help="honest sessions tapped before a replay attack (default: every register)")
    p.add_argument("--hardened", action="store_true", help="server rejects reused indices")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("lifetime", help="sessions-until-exhaustion sweep over t")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--t", type=parse_t_list, required=True, help="comma-separated challenge sizes")
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lifetime)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _err(str(exc))
        return EXIT_USAGE
    except (OSError, AuthDBError, TokenFormatError) as exc:
        _err(str(exc))
        return EXIT_IO
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        _err(str(exc))
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
