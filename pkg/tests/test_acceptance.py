"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see one line per
criterion. Every tolerance here is exact; each test also enforces its
runtime budget.
"""

import base64
import itertools
import random
import time

import pytest

from usp.auth import (
    ApplicationMismatch,
    BadSignature,
    TokenError,
    TokenExpired,
    issue_token,
    negotiate,
    validate_token,
)
from usp.harness import (
    SCENARIO_NAMES,
    canonical_scenarios,
    enumerate_machine,
    fuzz_malformed,
    run_scenario,
)
from usp.session import non_authdata_count

SECRET = b"acceptance token secret 456789012345"
T0 = 1_700_000_000.0

SERVER_CLOSE_CAUSES = {
    "not_hosted",
    "no_shared_protocol",
    "auth_failed",
    "protocol_violation",
    "malformed",
    "timeout",
    "remote_error",
}


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds
        self.started = time.monotonic()

    def check(self) -> float:
        elapsed = time.monotonic() - self.started
        assert elapsed < self.seconds, f"took {elapsed:.2f}s, budget {self.seconds}s"
        return elapsed


def test_criterion_1_message_counts():
    """Unauthenticated: exactly 2 messages. Authenticated-direct: exactly 5."""
    budget = Budget(1.0)
    scenarios = canonical_scenarios()

    unauth = run_scenario(scenarios["unauthenticated-direct"])
    (trace,) = unauth.traces
    assert non_authdata_count(trace) == 2
    assert len(trace) == 2  # one message in each direction, nothing else

    auth = run_scenario(scenarios["authenticated-direct"])
    (trace,) = auth.traces
    assert non_authdata_count(trace) == 5
    assert [e.name for e in trace if e.name != "authdata"] == [
        "initialize",
        "authenticate",
        "token",
        "initialize",
        "connect",
    ]
    elapsed = budget.check()
    print(f"\nACCEPTANCE 1 PASS message counts 2/5 exact ({elapsed:.2f}s)")


def test_criterion_2_flow_fidelity():
    """All seven canonical flows produce their golden traces exactly."""
    budget = Budget(5.0)
    for name in SCENARIO_NAMES:
        run_scenario(canonical_scenarios()[name])  # raises on any divergence

    # The two sides of the error-frame rule: silence on auth failure,
    # an explicit error everywhere a diagram shows one.
    results = {n: run_scenario(canonical_scenarios()[n]) for n in SCENARIO_NAMES}
    assert all(e.name != "error" for e in results["auth-failure"].traces[0])
    for name in ("no-shared-protocol", "not-hosted", "malformed-message"):
        assert results[name].traces[0][-1].name == "error"
    elapsed = budget.check()
    print(f"\nACCEPTANCE 2 PASS all 7 golden traces exact ({elapsed:.2f}s)")


def test_criterion_3_gate_invariant():
    """Depth-8 enumeration plus 10,000 fuzz cases: no unauthorized handoff, no crash."""
    budget = Budget(60.0)
    report = enumerate_machine(8, expected_causes=SERVER_CLOSE_CAUSES)
    assert report.handoffs_observed > 0  # the legal paths are exercised

    fuzz = fuzz_malformed(seed=1, n=10000)
    assert fuzz.cases == 10000
    assert fuzz.handoffs == 0
    assert fuzz.crashes == 0
    elapsed = budget.check()
    print(
        f"\nACCEPTANCE 3 PASS gate invariant: enumeration({report.transitions} transitions) "
        f"+ fuzz(10000) with 0 handoffs, 0 crashes ({elapsed:.2f}s)"
    )


def test_criterion_4_token_suite():
    """Forgery, expiry, bit flips, and rebinding all behave exactly."""
    budget = Budget(30.0)
    rng = random.Random(99)
    clock = lambda: T0

    # 10^5 random strings never validate.
    printable = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_="
    for i in range(100_000):
        if i % 2 == 0:
            candidate = "".join(rng.choice(printable) for _ in range(64))
        else:
            candidate = base64.urlsafe_b64encode(rng.randbytes(79)).decode()
        try:
            validate_token(candidate, "echo", clock, SECRET)
        except TokenError:
            continue
        raise AssertionError(f"random string validated: {candidate!r}")

    # Strict TTL window under an injected clock.
    token = issue_token("alice", "echo", 3600, clock, SECRET, rng).encode()
    for offset in (0, 1, 1800, 3599):
        assert validate_token(token, "echo", lambda: T0 + offset, SECRET).identity == "alice"
    for offset in (3600, 3601, 100_000):
        with pytest.raises(TokenExpired):
            validate_token(token, "echo", lambda: T0 + offset, SECRET)

    # Every single-bit flip of the signature is rejected.
    raw = bytearray(base64.urlsafe_b64decode(token))
    for byte_index in range(32):
        for bit in range(8):
            tampered = bytearray(raw)
            tampered[-32 + byte_index] ^= 1 << bit
            with pytest.raises(BadSignature):
                validate_token(
                    base64.urlsafe_b64encode(bytes(tampered)).decode(), "echo", clock, SECRET
                )

    # Application rebinding is always rejected.
    for other_app in ("http", "files", "echo2", "e", "Echo"):
        with pytest.raises(ApplicationMismatch):
            validate_token(token, other_app, clock, SECRET)
    elapsed = budget.check()
    print(
        f"\nACCEPTANCE 4 PASS token suite: 100000 forgeries, strict TTL, "
        f"256 bit flips, rebinding ({elapsed:.2f}s)"
    )


def test_criterion_5_negotiation_oracle():
    """Equal to brute force on all ordered subsets (size <= 4, 4-name alphabet)."""
    budget = Budget(5.0)
    alphabet = ("psk-cr", "x509", "srp", "oauth-dev")

    def ordered_subsets():
        for size in range(len(alphabet) + 1):
            yield from itertools.permutations(alphabet, size)

    def oracle(offered, supported):
        for name in supported:
            if name in offered:
                return name
        return None

    pairs = 0
    for offered in ordered_subsets():
        for supported in ordered_subsets():
            expected = oracle(offered, supported)
            assert negotiate(offered, supported) == expected
            # Invariant under any permutation of the client's list.
            for permuted in itertools.permutations(offered):
                assert negotiate(permuted, supported) == expected
            pairs += 1
    assert pairs == 65 * 65
    elapsed = budget.check()
    print(f"\nACCEPTANCE 5 PASS negotiation oracle over {pairs} ordered pairs ({elapsed:.2f}s)")


def test_criterion_6_transport_equivalence():
    """Every scenario yields identical traces over memory and TCP loopback."""
    budget = Budget(30.0)
    for name, scenario in canonical_scenarios().items():
        memory = run_scenario(scenario, transport="memory")
        tcp = run_scenario(scenario, transport="tcp")
        assert memory.trace_pairs() == tcp.trace_pairs(), name
        assert memory.outcomes == tcp.outcomes, name
        assert memory.handoffs == tcp.handoffs, name
    elapsed = budget.check()
    print(f"\nACCEPTANCE 6 PASS memory/TCP trace equivalence on all 7 ({elapsed:.2f}s)")


def test_criterion_7_token_passing_two_messages():
    """A proxy-acquired token completes a distinct client's connect in 2 messages."""
    budget = Budget(1.0)
    result = run_scenario(canonical_scenarios()["token-passing"])
    completion = result.traces[1]
    assert [(e.direction, e.name) for e in completion] == [
        ("c2s", "initialize"),
        ("s2c", "connect"),
    ]
    assert result.handoffs == 1
    elapsed = budget.check()
    print(f"\nACCEPTANCE 7 PASS token passing completes in 2 messages ({elapsed:.2f}s)")
