"""Monte Carlo experiments against the real server state machine.

Each trial draws its own random streams from ``(seed, role, trial)`` so
results do not depend on the order in which trials run.
"""
from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from .._io import atomic_write, derive_rng
from ..authdb import AuthDatabase
from ..protocol import (
    ClientSession,
    FailureReason,
    ProtocolParams,
    ServerConfig,
    Transcript,
)
from ..token import QuantumToken
from ..transport import run_local_handshake
from .strategies import (
    BlindGuess,
    ExhaustionAttacker,
    FullObservation,
    ReplayEavesdropper,
    VerbatimReplay,
)

__all__ = [
    "AttackExperiment",
    "LifetimeReport",
    "LifetimeRow",
    "format_table",
    "observe_all_registers",
    "observe_sessions",
    "run_blind_guess",
    "run_exhaustion",
    "run_replay_eavesdropper",
    "run_verbatim_replay",
    "sweep_lifetime",
]

VICTIM = "victim"

# simulated sessions would otherwise log one line each at INFO
trial_log = logging.getLogger("qmfa.adversary.trials")
trial_log.setLevel(logging.WARNING)
Z95 = 1.959963984540054


@dataclass
class AttackExperiment:
    strategy: str
    k: int
    t: int
    trials: int
    seed: Optional[int]
    successes: int = 0
    model: Optional[float] = None
    notes: str = ""

    @property
    def rate(self) -> float:
        return self.successes / self.trials

    @property
    def stderr(self) -> float:
        p = self.rate
        return math.sqrt(p * (1 - p) / self.trials)

    @property
    def interval(self):
        """95% normal-approximation interval, clipped to [0, 1]."""
        half = Z95 * self.stderr
        return max(0.0, self.rate - half), min(1.0, self.rate + half)

    def sigma(self, p: float) -> float:
        return math.sqrt(p * (1 - p) / self.trials)

    def deviation(self, p: Optional[float] = None) -> float:
        """Distance from ``p`` (default: the model rate) in binomial standard deviations."""
        p = self.model if p is None else p
        s = self.sigma(p)
        if s == 0:
            return 0.0 if self.rate == p else math.inf
        return abs(self.rate - p) / s

    def row(self) -> List[object]:
        lo, hi = self.interval
        model = "" if self.model is None else f"{self.model:.6f}"
        return [
            self.strategy, self.k, self.t, self.trials, "" if self.seed is None else self.seed,
            self.successes, f"{self.rate:.6f}", f"{lo:.6f}", f"{hi:.6f}", model,
        ]

    HEADER = ["strategy", "k", "t", "trials", "seed", "successes", "rate", "ci95_low", "ci95_high", "model"]


def _sub_seed(seed: Optional[int], *labels: object) -> Optional[int]:
    return None if seed is None else derive_rng(seed, *labels).getrandbits(63)


def _issue(k: int, seed: Optional[int], *labels: object):
    db = AuthDatabase()
    token, record = db.issue(k, VICTIM, derive_rng(seed, "issue", *labels))
    return db, token, record


def _attack(experiment: AttackExperiment, strategy, db: AuthDatabase, token_id: str, config: ServerConfig) -> AttackExperiment:
    seed = experiment.seed
    for trial in range(experiment.trials):
        client = strategy.client(VICTIM, token_id, derive_rng(seed, "attacker", trial))
        handshake, _ = run_local_handshake(
            client, db, config, derive_rng(seed, "server", trial), logger=trial_log
        )
        experiment.successes += handshake.verdict.success
    return experiment


def run_blind_guess(k: int, t: int, trials: int, seed: Optional[int] = None) -> AttackExperiment:
    """Impersonator with no information answers every challenge uniformly at random."""
    params = ProtocolParams(t, k)
    db, token, _ = _issue(k, seed)
    experiment = AttackExperiment("blind-guess", k, t, trials, seed, model=0.5 ** params.subset_size)
    # the baseline server keeps no per-index history, so trials stay independent
    return _attack(experiment, BlindGuess(), db, token.token_id, ServerConfig(t=t, track_used=False))


def observe_sessions(
    token: QuantumToken,
    db: AuthDatabase,
    config: ServerConfig,
    sessions: Optional[int],
    seed: Optional[int],
    label: str = "observe",
) -> List[Transcript]:
    """Run honest sessions under a passive tap until ``sessions`` succeed or the token runs out."""
    transcripts = []
    n = 0
    while sessions is None or len(transcripts) < sessions:
        observed = Transcript()
        client = ClientSession(token, VICTIM, derive_rng(seed, label, "client", n))
        handshake, _ = run_local_handshake(
            client, db, config, derive_rng(seed, label, "server", n),
            observers=(observed.record,), logger=trial_log,
        )
        n += 1
        if not handshake.verdict.success:
            if handshake.verdict.reason is FailureReason.TOKEN_EXHAUSTED:
                break
            raise RuntimeError(f"honest session failed: {handshake.verdict}")
        transcripts.append(observed)
    return transcripts


def observe_all_registers(
    token: QuantumToken, db: AuthDatabase, seed: Optional[int]
) -> List[Transcript]:
    """Tap honest sessions until every register has been measured once.

    Uses the smallest challenge size and a server that challenges unspent
    registers first, so sessions walk through the whole token.  For odd k the
    last register cannot be reached (each session measures two).
    """
    config = ServerConfig(t=3, track_used=True, challenge_policy="fresh-first")
    return observe_sessions(token, db, config, None, seed, label="observe-all")


def run_replay_eavesdropper(
    k: int,
    t: int,
    observed_sessions: Optional[int],
    trials: int,
    seed: Optional[int] = None,
    hardened: bool = False,
) -> AttackExperiment:
    """Replay attacker after tapping honest traffic.

    ``observed_sessions=None`` taps until every register has been seen once
    (full observation).  By default the attack runs against the baseline
    server that does not remember spent indices; ``hardened=True`` keeps
    reuse tracking on, which rejects any replayed index outright.
    """
    params = ProtocolParams(t, k)
    db, token, record = _issue(k, seed)
    if observed_sessions is None:
        transcripts = observe_all_registers(token, db, seed)
        strategy = FullObservation(transcripts, k=k - (k % 2))
        model = 0.75 ** params.subset_size if k % 2 == 0 else None
        name = "replay-full"
    else:
        transcripts = observe_sessions(token, db, ServerConfig(t=t), observed_sessions, seed)
        strategy = ReplayEavesdropper(transcripts)
        model = 0.5 ** params.subset_size if not transcripts else None
        name = "replay"
    if hardened:
        config = ServerConfig(t=t, track_used=True)
        model = 0.0 if observed_sessions is None else None
        name += "-hardened"
    else:
        db.reset_usage(record.token_id)
        config = ServerConfig(t=t, track_used=False)
    experiment = AttackExperiment(
        name, k, t, trials, seed, model=model,
        notes=f"observed_sessions={len(transcripts)} registers_known={len(strategy.knowledge.indices)}",
    )
    return _attack(experiment, strategy, db, record.token_id, config)


@dataclass
class ReplayAttempt:
    recorded_subset: tuple
    recorded_bases: dict
    fresh_subset: tuple
    fresh_bases: dict
    success: bool

    @property
    def same_challenge(self) -> bool:
        return self.recorded_subset == self.fresh_subset and self.recorded_bases == self.fresh_bases


def run_verbatim_replay(k: int, t: int, trials: int, seed: Optional[int] = None):
    """Record one honest session per trial, then replay its RESPONSE line verbatim.

    Every trial issues a fresh token, so the strings behind the replayed
    registers are independent across trials.  Returns the experiment and the
    per-trial attempts.  The model rate is the chance that the recorded subset
    fits inside the new challenge times 3/4 per replayed register.
    """
    params = ProtocolParams(t, k)
    s = params.subset_size
    fits = math.comb(k - s, t - s) / math.comb(k, t)
    experiment = AttackExperiment("verbatim-replay", k, t, trials, seed, model=fits * 0.75 ** s)
    attempts = []
    for trial in range(trials):
        db, token, record = _issue(k, seed, trial)
        recorded = observe_sessions(token, db, ServerConfig(t=t), 1, seed, label=f"record-{trial}")[0]
        db.reset_usage(record.token_id)
        client = VerbatimReplay(recorded).client(VICTIM, record.token_id, derive_rng(seed, "attacker", trial))
        handshake, server = run_local_handshake(
            client, db, ServerConfig(t=t, track_used=False), derive_rng(seed, "server", trial),
            logger=trial_log,
        )
        ok = handshake.verdict.success
        experiment.successes += ok
        session = server.session
        attempts.append(
            ReplayAttempt(
                client.recorded_subset,
                client.recorded_bases,
                tuple(session.subset or ()) if session else (),
                dict(session.bases or {}) if session else {},
                ok,
            )
        )
    return experiment, attempts


# ----------------------------------------------------------------- lifetime


@dataclass
class LifetimeReport:
    k: int
    t: int
    sessions_completed: int = 0
    registers_consumed: int = 0
    renewal_session: Optional[int] = None
    consumption: List[int] = field(default_factory=list)
    exhausted: bool = False


def run_exhaustion(
    k: int,
    t: int,
    seed: Optional[int] = None,
    attacker: Optional[ExhaustionAttacker] = None,
) -> LifetimeReport:
    """Authenticate honestly, over and over, until the subset step aborts.

    With an ``attacker`` the run stops after the forced number of sessions
    instead, which shows how far a lure campaign drains the token.
    """
    ProtocolParams(t, k)
    db, token, _ = _issue(k, seed)
    config = ServerConfig(t=t)
    report = LifetimeReport(k, t)
    n = 0
    while attacker is None or n < attacker.sessions_to_force:
        before = token.used_count
        client = ClientSession(token, VICTIM, derive_rng(seed, "client", n))
        handshake, _ = run_local_handshake(
            client, db, config, derive_rng(seed, "server", n), logger=trial_log
        )
        n += 1
        if handshake.verdict.reason is FailureReason.TOKEN_EXHAUSTED:
            report.exhausted = True
            break
        if not handshake.verdict.success:
            raise RuntimeError(f"honest session failed: {handshake.verdict}")
        report.sessions_completed += 1
        report.consumption.append(token.used_count - before)
        if report.renewal_session is None and token.renewal_due():
            report.renewal_session = report.sessions_completed
    report.registers_consumed = token.used_count
    return report


@dataclass
class LifetimeRow:
    t: int
    mean_sessions: float
    std_sessions: float
    repetitions: int

    HEADER = ["t", "mean_sessions", "std_sessions", "repetitions"]

    def row(self) -> List[object]:
        return [self.t, f"{self.mean_sessions:.4f}", f"{self.std_sessions:.4f}", self.repetitions]


def sweep_lifetime(
    k: int, t_values: Sequence[int], repetitions: int, seed: Optional[int] = None
) -> List[LifetimeRow]:
    if not t_values:
        raise ValueError("need at least one challenge size")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    for t in t_values:
        ProtocolParams(t, k)
    rows = []
    for t in t_values:
        counts = [
            run_exhaustion(k, t, _sub_seed(seed, "sweep", t, r)).sessions_completed
            for r in range(repetitions)
        ]
        rows.append(LifetimeRow(t, statistics.fmean(counts), statistics.pstdev(counts), repetitions))
    return rows


def format_table(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    lines = ["\t".join(header)]
    lines.extend("\t".join(str(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_table(path: Union[str, Path], text: str) -> None:
    atomic_write(path, text)
