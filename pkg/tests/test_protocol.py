import math
import random
from collections import Counter
from itertools import combinations

import pytest
from hypothesis import given, strategies as st

from qmfa.authdb import AuthDatabase
from qmfa.hmp4 import BitString4, Outcome, encode, hmp4_condition
from qmfa.protocol import (
    MAX_LINE_BYTES,
    Abort,
    Auth,
    Bases,
    Challenge,
    ClientSession,
    FailureReason,
    ProtocolError,
    ProtocolParams,
    Response,
    Result,
    ServerConfig,
    ServerSession,
    Subset,
    client_choose_subset,
    client_respond,
    parse_message,
    server_begin,
    server_pick_bases,
    server_verify,
)
from qmfa.token import TokenError, build_token
from qmfa.transport import run_local_handshake


def four_sigma(p, n):
    return 4 * math.sqrt(p * (1 - p) / n)


@pytest.fixture
def issued():
    db = AuthDatabase()
    token, record = db.issue(9, "alice", random.Random(1))
    return db, token, record


class TestParams:
    @pytest.mark.parametrize("t, k", [(4, 9), (0, 9), (12, 9), (5, 64)])
    def test_invalid(self, t, k):
        with pytest.raises(ValueError):
            ProtocolParams(t, k)

    def test_subset_size(self):
        assert ProtocolParams(12, 64).subset_size == 8


class TestMessages:
    @pytest.mark.parametrize(
        "msg",
        [
            Auth("alice", "tok_1-x"),
            Challenge((2, 5, 7)),
            Subset((2, 5)),
            Bases(((2, 0), (5, 1))),
            Response(((2, Outcome(0, 1)), (5, Outcome(1, 1)))),
            Result(True),
            Result(False),
            Abort("token-exhausted"),
        ],
    )
    def test_round_trip(self, msg):
        assert parse_message(msg.encode()) == msg

    def test_grammar(self):
        assert Auth("alice", "T1").encode() == "AUTH alice T1"
        assert Challenge((7, 2, 5)).encode() == "CHALLENGE 2,5,7"
        assert Subset((5, 2)).encode() == "SUBSET 2,5"
        assert Bases(((5, 1), (2, 0))).encode() == "BASES 2:0,5:1"
        assert Response(((5, Outcome(1, 1)), (2, Outcome(0, 1)))).encode() == "RESPONSE 2:0:1,5:1:1"
        assert Result(True).encode() == "RESULT OK" and Result(False).encode() == "RESULT FAIL"

    @pytest.mark.parametrize(
        "line",
        [
            "", "HELLO", "AUTH alice", "AUTH al ice tok", "CHALLENGE", "CHALLENGE 1,,2", "CHALLENGE 1,1,2",
            "CHALLENGE 01,2,3", "CHALLENGE -1,2,3", "BASES 1:2", "BASES 1", "RESPONSE 1:0", "RESPONSE 1:0:2",
            "RESULT MAYBE", "ABORT", "ABORT Bad Reason", "SUBSET 1,2 ",
        ],
    )
    def test_malformed(self, line):
        with pytest.raises(ProtocolError):
            parse_message(line)

    def test_line_limit(self):
        big = "CHALLENGE " + ",".join(["1"] * (MAX_LINE_BYTES // 2))
        with pytest.raises(ProtocolError, match="too long"):
            parse_message(big)

    @given(st.sets(st.integers(1, 10**6), min_size=1, max_size=40), st.randoms(use_true_random=False))
    def test_bases_round_trip_property(self, indices, r):
        msg = Bases(tuple((i, r.getrandbits(1)) for i in indices))
        parsed = parse_message(msg.encode())
        assert parsed.as_dict() == msg.as_dict()
        assert parsed.encode() == msg.encode()


class TestServerBegin:
    def test_shape(self, issued, rng):
        _, _, record = issued
        session, msg = server_begin(record, ProtocolParams(3, 9), rng)
        assert len(set(msg.indices)) == 3
        assert all(1 <= i <= 9 for i in msg.indices)
        assert session.challenge == msg.indices
        assert session.verdict.pending

    def test_uniform_inclusion(self, issued):
        _, _, record = issued
        r = random.Random(5)
        n = 10000
        counts = Counter()
        for _ in range(n):
            counts.update(server_begin(record, ProtocolParams(3, 9), r)[1].indices)
        for i in range(1, 10):
            assert abs(counts[i] / n - 1 / 3) <= four_sigma(1 / 3, n)

    def test_k_mismatch(self, issued, rng):
        with pytest.raises(ValueError):
            server_begin(issued[2], ProtocolParams(3, 12), rng)

    def test_fresh_first_policy(self, issued, rng):
        _, _, record = issued
        record.server_used = set(range(1, 8))
        _, msg = server_begin(record, ProtocolParams(3, 9), rng, policy="fresh-first")
        assert {8, 9} <= set(msg.indices)


class TestClientSubset:
    def test_fresh_token(self, issued, rng):
        _, token, _ = issued
        msg = client_choose_subset(token, (2, 5, 7), rng)
        assert isinstance(msg, Subset)
        assert len(msg.indices) == 2 and set(msg.indices) <= {2, 5, 7}

    def test_exhausted(self, issued, rng):
        _, token, _ = issued
        token.measure_slot(2, 0, rng)
        token.measure_slot(7, 0, rng)
        assert client_choose_subset(token, (2, 5, 7), rng) == Abort("token-exhausted")

    def test_uniform_choice(self, issued):
        _, token, _ = issued
        r = random.Random(8)
        n = 6000
        counts = Counter(client_choose_subset(token, (2, 5, 7), r).indices for _ in range(n))
        assert set(counts) == set(combinations((2, 5, 7), 2))
        for c in counts.values():
            assert abs(c / n - 1 / 3) <= four_sigma(1 / 3, n)

    @pytest.mark.parametrize("challenge", [(1, 2), (1, 2, 2), (0, 1, 2), (1, 2, 10)])
    def test_malformed_challenge(self, issued, rng, challenge):
        with pytest.raises(ProtocolError):
            client_choose_subset(issued[1], challenge, rng)


class TestPickBases:
    def setup_session(self, record, challenge=(2, 5, 7)):
        session, _ = server_begin(record, ProtocolParams(3, 9), random.Random(0))
        session.challenge = challenge
        return session

    def test_keys(self, issued, rng):
        session = self.setup_session(issued[2])
        msg = server_pick_bases(session, (2, 5), issued[2], rng)
        assert set(msg.as_dict()) == {2, 5}

    def test_wrong_size(self, issued, rng):
        session = self.setup_session(issued[2])
        assert server_pick_bases(session, (2, 5, 7), issued[2], rng) == Result(False)
        assert session.verdict.reason is FailureReason.SUBSET_INVALID

    def test_not_a_subset(self, issued, rng):
        session = self.setup_session(issued[2])
        assert server_pick_bases(session, (2, 6), issued[2], rng) == Result(False)

    def test_reused_index(self, issued, rng):
        record = issued[2]
        record.server_used = {5}
        session = self.setup_session(record)
        assert server_pick_bases(session, (2, 5), record, rng) == Result(False)
        assert session.verdict.reason is FailureReason.INDEX_REUSED

    def test_fair_bits(self, issued):
        record = issued[2]
        r = random.Random(4)
        n = 10000
        zeros = 0
        for _ in range(n):
            session = self.setup_session(record)
            zeros += list(server_pick_bases(session, (2, 5), record, r).as_dict().values()).count(0)
        assert abs(zeros / (2 * n) - 0.5) <= four_sigma(0.5, 2 * n)


def honest_exchange(record, token, rng, t=3):
    session, challenge = server_begin(record, ProtocolParams(t, record.k), rng, "alice")
    subset = client_choose_subset(token, challenge.indices, rng)
    bases = server_pick_bases(session, subset.indices, record, rng)
    response = client_respond(token, bases.as_dict(), rng)
    return session, bases, response


class TestRespondAndVerify:
    def test_honest_replies_satisfy_condition(self, issued, rng):
        _, token, record = issued
        _, bases, response = honest_exchange(record, token, rng)
        assert set(response.as_dict()) == set(bases.as_dict())
        for i, out in response.replies:
            assert hmp4_condition(record.x_strings[i - 1], bases.as_dict()[i], out)

    def test_success_marks_used(self, issued, rng):
        _, token, record = issued
        session, _, response = honest_exchange(record, token, rng)
        assert server_verify(session, record, response.as_dict()) == Result(True)
        assert session.verdict.success
        assert record.server_used == set(session.subset)

    def test_flipped_b_fails(self, issued, rng):
        _, token, record = issued
        session, _, response = honest_exchange(record, token, rng)
        replies = response.as_dict()
        i = min(replies)
        replies[i] = Outcome(replies[i].a, 1 - replies[i].b)
        assert server_verify(session, record, replies) == Result(False)
        assert session.verdict.reason is FailureReason.HMP4
        assert record.server_used == set()

    def test_wrong_keys_fail(self, issued, rng):
        _, token, record = issued
        session, _, response = honest_exchange(record, token, rng)
        replies = response.as_dict()
        other = next(i for i in range(1, 10) if i not in replies)
        replies[other] = replies.pop(min(replies))
        assert server_verify(session, record, replies) == Result(False)
        assert session.verdict.reason is FailureReason.REPLY_KEYS

    def test_identity_mismatch_fails(self, issued, rng):
        _, token, record = issued
        session, _, response = honest_exchange(record, token, rng)
        session.identity = "mallory"
        server_verify(session, record, response.as_dict())
        assert session.verdict.reason is FailureReason.IDENTITY

    def test_each_single_flip_fails(self):
        db = AuthDatabase()
        token, record = db.issue(64, "alice", random.Random(3))
        r = random.Random(4)
        session, _, response = honest_exchange(record, token, r, t=12)
        good = response.as_dict()
        for i in good:
            for bad in set(map(Outcome.from_index, range(4))) - {good[i]}:
                if hmp4_condition(record.x_strings[i - 1], session.bases[i], bad):
                    continue
                copy = dict(good)
                copy[i] = bad
                assert server_verify(session, record, copy) == Result(False)
        assert server_verify(session, record, good) == Result(True)

    def test_client_refuses_used_register(self, issued, rng):
        _, token, _ = issued
        token.measure_slot(5, 0, rng)
        with pytest.raises(TokenError):
            client_respond(token, {2: 0, 5: 1}, rng)
        assert not token.slots[1].used


class TestStateMachines:
    def test_honest_handshake(self, issued, rng):
        db, token, _ = issued
        client = ClientSession(token, "alice", random.Random(1))
        result, server = run_local_handshake(client, db, ServerConfig(t=3), random.Random(2))
        assert result.verdict.success and server.verdict.success
        kinds = [line.split(" ")[0] for line in result.transcript.lines()]
        assert kinds == ["AUTH", "CHALLENGE", "SUBSET", "BASES", "RESPONSE", "RESULT"]
        assert token.used_count == 2
        assert db.lookup(token.token_id).server_used == set(client.subset)

    def test_sessions_never_share_registers(self):
        db = AuthDatabase()
        token, _ = db.issue(64, "alice", random.Random(3))
        measured = []
        for n in range(20):
            client = ClientSession(token, "alice", random.Random(n))
            result, _ = run_local_handshake(client, db, ServerConfig(t=6), random.Random(100 + n))
            if result.verdict.success:
                measured.append(set(client.subset))
        assert len(measured) >= 2
        for a, b in combinations(measured, 2):
            assert not a & b

    def test_unknown_token(self, issued):
        db, _, _ = issued
        server = ServerSession(db, ServerConfig(t=3), random.Random(0))
        assert server.handle("AUTH alice nosuch") == ["RESULT FAIL"]
        assert server.verdict.reason is FailureReason.UNKNOWN_TOKEN
        assert server.verdict.reason.condition == 1

    def test_revoked_token_generic_failure(self, issued):
        db, token, _ = issued
        db.revoke(token.token_id)
        server = ServerSession(db, ServerConfig(t=3), random.Random(0))
        assert server.handle(f"AUTH alice {token.token_id}") == ["RESULT FAIL"]
        assert server.verdict.reason is FailureReason.REVOKED

    def test_wrong_identity(self, issued):
        db, token, _ = issued
        server = ServerSession(db, ServerConfig(t=3), random.Random(0))
        assert server.handle(f"AUTH bob {token.token_id}") == ["RESULT FAIL"]
        assert server.verdict.reason.condition == 2

    def test_t_larger_than_k(self, issued):
        db, token, _ = issued
        server = ServerSession(db, ServerConfig(t=12), random.Random(0))
        assert server.handle(f"AUTH alice {token.token_id}") == ["RESULT FAIL"]
        assert server.verdict.reason is FailureReason.BAD_PARAMS

    def test_server_rejects_out_of_order(self, issued):
        db, token, _ = issued
        server = ServerSession(db, ServerConfig(t=3), random.Random(0))
        server.handle(f"AUTH alice {token.token_id}")
        assert server.handle("RESPONSE 1:0:0,2:0:0") == ["ABORT protocol-error"]
        assert server.verdict.reason is FailureReason.PROTOCOL_ERROR
        assert server.handle("SUBSET 1,2") == []

    def test_server_rejects_malformed_first_line(self, issued):
        db, _, _ = issued
        server = ServerSession(db, ServerConfig(t=3), random.Random(0))
        assert server.handle("GARBAGE") == ["ABORT protocol-error"]

    def test_client_rejects_bases_before_challenge(self, issued):
        _, token, _ = issued
        client = ClientSession(token, "alice", random.Random(0))
        client.start()
        assert client.handle("BASES 1:0,2:1") == "ABORT protocol-error"
        assert client.verdict.reason is FailureReason.PROTOCOL_ERROR
        assert token.used_count == 0

    def test_client_rejects_bases_for_other_indices(self, issued):
        _, token, _ = issued
        client = ClientSession(token, "alice", random.Random(0))
        client.start()
        client.handle("CHALLENGE 2,5,7")
        assert client.handle("BASES 1:0,3:1") == "ABORT protocol-error"
        assert token.used_count == 0

    def test_client_abort_when_exhausted(self, issued):
        db, token, _ = issued
        r = random.Random(0)
        for i in range(1, 9):
            token.measure_slot(i, 0, r)
        client = ClientSession(token, "alice", random.Random(1))
        result, server = run_local_handshake(client, db, ServerConfig(t=3), random.Random(2))
        assert result.verdict.reason is FailureReason.TOKEN_EXHAUSTED
        assert result.transcript.lines()[-1] == "ABORT token-exhausted"
        assert server.verdict.reason is FailureReason.TOKEN_EXHAUSTED

    def test_server_rejects_reuse_across_sessions(self, issued):
        db, token, _ = issued
        server = ServerSession(db, ServerConfig(t=9), random.Random(0))
        db.commit_success(token.token_id, [1])
        server.handle(f"AUTH alice {token.token_id}")
        assert server.handle("SUBSET 1,2,3,4,5,6") == ["RESULT FAIL"]
        assert server.verdict.reason is FailureReason.INDEX_REUSED

    def test_timeout(self, issued):
        db, token, _ = issued
        clock = iter([0.0, 1.0, 31.0]).__next__
        server = ServerSession(db, ServerConfig(t=3, timeout=30.0), random.Random(0), clock=clock)
        assert server.handle(f"AUTH alice {token.token_id}")[0].startswith("CHALLENGE")
        assert server.handle("SUBSET 1,2") == ["ABORT timeout"]
        assert server.verdict.reason is FailureReason.TIMEOUT

    def test_failed_attempt_recorded(self, issued):
        db, token, _ = issued
        server = ServerSession(db, ServerConfig(t=3), random.Random(0))
        server.handle(f"AUTH bob {token.token_id}")
        assert db.lookup(token.token_id).failed_attempts == 1

    def test_step_up_challenge_size(self):
        db = AuthDatabase()
        token, _ = db.issue(64, "alice", random.Random(9))
        config = ServerConfig(choose_t=lambda record, identity: 24)
        client = ClientSession(token, "alice", random.Random(1))
        result, _ = run_local_handshake(client, db, config, random.Random(2))
        assert result.verdict.success
        assert len(client.subset) == 16

    def test_seeded_transcripts_identical(self):
        def once():
            db = AuthDatabase()
            token, _ = db.issue(64, "alice", random.Random(9))
            client = ClientSession(token, "alice", random.Random(1))
            return run_local_handshake(client, db, ServerConfig(), random.Random(2))[0].transcript.lines()

        assert once() == once()

    def test_neither_side_controls_measured_set(self):
        db = AuthDatabase()
        r = random.Random(12)
        n = 600
        hits = 0
        for trial in range(n):
            token, _ = db.issue(18, "alice", r)
            client = ClientSession(token, "alice", r)
            # greedy client that always nominates register 1 when it may
            original = client.on_challenge

            def greedy(msg, client=client, original=original):
                line = original(msg)
                if 1 in msg.indices and client.subset and 1 not in client.subset:
                    client.subset = tuple(sorted((1,) + client.subset[1:]))
                    line = Subset(client.subset).encode()
                return line

            client.on_challenge = greedy
            result, _ = run_local_handshake(client, db, ServerConfig(t=6), r)
            assert result.verdict.success
            hits += 1 in client.subset
        assert abs(hits / n - 6 / 18) <= four_sigma(6 / 18, n)
