"""Authentication protocols, negotiation, and identity tokens.

Token record layout (all integers big-endian), signed then base64url-encoded:

    u16 identity_len | identity (UTF-8)
    u16 application_len | application (UTF-8)
    u64 issued_at (seconds since epoch)
    u64 expires_at (seconds since epoch)
    nonce (16 bytes)
    signature (32 bytes, HMAC-SHA-256 over all preceding bytes)

Tokens are bearer credentials: self-contained, bound to one application,
multi-use until expiry unless the issuing server runs a nonce cache for
single-use mode. The signing secret never leaves the server, so a token
validates only where it was issued.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import random
import struct
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .errors import UspError

Clock = Callable[[], float]

NONCE_BYTES = 16
SIGNATURE_BYTES = 32
DEFAULT_TOKEN_TTL = 3600

ANONYMOUS_IDENTITY = "anonymous"

PSK_PROTOCOL_NAME = "psk-cr"
_CHALLENGE_BYTES = 32


class TokenError(UspError):
    """Base class for token validation failures."""


class TokenMalformed(TokenError):
    pass


class BadSignature(TokenError):
    pass


class TokenExpired(TokenError):
    pass


class ApplicationMismatch(TokenError):
    pass


class AuthProtocolError(UspError):
    """Misuse of an authentication protocol handle."""


class AuthMethod(Enum):
    NONE_REQUIRED = "none_required"
    PROTOCOL = "protocol"
    TOKEN = "token"


@dataclass(frozen=True)
class IdentityContext:
    """The verified identity handed to an application with its stream."""

    identity: str
    application: str
    method: AuthMethod
    authenticated_at: float
    protocol: str | None = None

    def __post_init__(self) -> None:
        if self.method is not AuthMethod.NONE_REQUIRED and not self.identity:
            raise ValueError("identity is empty")
        if self.method is AuthMethod.PROTOCOL and not self.protocol:
            raise ValueError("protocol method without protocol name")

    def to_dict(self) -> dict:
        return {
            "identity": self.identity,
            "application": self.application,
            "method": self.method.value,
            "protocol": self.protocol,
            "authenticated_at": self.authenticated_at,
        }


def anonymous_context(application: str, clock: Clock) -> IdentityContext:
    return IdentityContext(
        identity=ANONYMOUS_IDENTITY,
        application=application,
        method=AuthMethod.NONE_REQUIRED,
        authenticated_at=clock(),
    )


# --- negotiation ---


def negotiate(client_offered: Sequence[str], server_supported: Sequence[str]) -> str | None:
    """Pick the first server-preferred protocol the client also offered.

    Server order wins; the client's ordering carries no weight. Returns
    None when the two lists share nothing.
    """
    offered = set(client_offered)
    for name in server_supported:
        if name in offered:
            return name
    return None


# --- identity tokens ---


@dataclass(frozen=True)
class IdentityToken:
    """Decoded form of a signed bearer token."""

    identity: str
    application: str
    issued_at: int
    expires_at: int
    nonce: bytes
    signature: bytes

    def encode(self) -> str:
        return base64.urlsafe_b64encode(self._record() + self.signature).decode("ascii")

    def _record(self) -> bytes:
        ident = self.identity.encode("utf-8")
        app = self.application.encode("utf-8")
        return (
            struct.pack(">H", len(ident))
            + ident
            + struct.pack(">H", len(app))
            + app
            + struct.pack(">QQ", self.issued_at, self.expires_at)
            + self.nonce
        )


def _sign(record: bytes, secret: bytes) -> bytes:
    return hmac.new(secret, record, hashlib.sha256).digest()


def issue_token(
    identity: str,
    application: str,
    ttl: int,
    clock: Clock,
    secret: bytes,
    rng: random.Random,
) -> IdentityToken:
    """Issue a signed token binding ``identity`` to ``application`` for ``ttl`` seconds."""
    if not identity:
        raise ValueError("identity is empty")
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    issued_at = int(clock())
    unsigned = IdentityToken(
        identity=identity,
        application=application,
        issued_at=issued_at,
        expires_at=issued_at + int(ttl),
        nonce=rng.randbytes(NONCE_BYTES),
        signature=b"",
    )
    return replace(unsigned, signature=_sign(unsigned._record(), secret))


def decode_token(token: str) -> IdentityToken:
    """Parse a token string without verifying anything but its structure."""
    try:
        raw = base64.urlsafe_b64decode(token.encode("ascii"))
    except (binascii.Error, UnicodeEncodeError, ValueError):
        raise TokenMalformed("not base64") from None
    cursor = 0

    def take(n: int) -> bytes:
        nonlocal cursor
        if cursor + n > len(raw):
            raise TokenMalformed("record too short")
        piece = raw[cursor : cursor + n]
        cursor += n
        return piece

    (ident_len,) = struct.unpack(">H", take(2))
    try:
        identity = take(ident_len).decode("utf-8")
    except UnicodeDecodeError:
        raise TokenMalformed("identity is not UTF-8") from None
    (app_len,) = struct.unpack(">H", take(2))
    try:
        application = take(app_len).decode("utf-8")
    except UnicodeDecodeError:
        raise TokenMalformed("application is not UTF-8") from None
    issued_at, expires_at = struct.unpack(">QQ", take(16))
    nonce = take(NONCE_BYTES)
    signature = take(SIGNATURE_BYTES)
    if cursor != len(raw):
        raise TokenMalformed("trailing bytes in record")
    if not identity:
        raise TokenMalformed("identity is empty")
    if expires_at <= issued_at:
        raise TokenMalformed("expiry not after issuance")
    return IdentityToken(
        identity=identity,
        application=application,
        issued_at=issued_at,
        expires_at=expires_at,
        nonce=nonce,
        signature=signature,
    )


def validate_token(token: str, application: str, clock: Clock, secret: bytes) -> IdentityContext:
    """Verify a presented token for ``application``.

    Checks, in order: structure, signature, expiry (a token is dead at and
    after its expires_at instant), application binding.
    """
    decoded = decode_token(token)
    if not hmac.compare_digest(decoded.signature, _sign(decoded._record(), secret)):
        raise BadSignature("signature mismatch")
    if clock() >= decoded.expires_at:
        raise TokenExpired(f"expired at {decoded.expires_at}")
    if decoded.application != application:
        raise ApplicationMismatch(
            f"token is bound to {decoded.application!r}, presented for {application!r}"
        )
    return IdentityContext(
        identity=decoded.identity,
        application=application,
        method=AuthMethod.TOKEN,
        authenticated_at=clock(),
    )


def peek_token_identity(token: str) -> str | None:
    """Best-effort unverified read of the identity inside a token string."""
    try:
        return decode_token(token).identity
    except TokenError:
        return None


class NonceCache:
    """Tracks token nonces already accepted, for single-use token mode."""

    def __init__(self) -> None:
        self._seen: set[bytes] = set()
        self._lock = threading.Lock()

    def first_use(self, nonce: bytes) -> bool:
        with self._lock:
            if nonce in self._seen:
                return False
            self._seen.add(nonce)
            return True


# --- pluggable authentication protocols ---


class AuthStatus(Enum):
    PENDING = "pending"
    SUCCESS = "success"
    FAIL = "fail"


@dataclass(frozen=True)
class AuthStep:
    """Result of advancing an authentication exchange by one step."""

    status: AuthStatus
    outgoing: bytes | None = None
    identity: str | None = None
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.status is AuthStatus.SUCCESS and not self.identity:
            raise ValueError("success without identity")

    @property
    def terminal(self) -> bool:
        return self.status is not AuthStatus.PENDING


@dataclass
class AuthConfig:
    """Per-session inputs to an authentication handle."""

    rng: random.Random
    identity: str | None = None
    key: bytes | None = None


class AuthHandle:
    """Single-session, single-threaded state of one authentication run.

    Subclasses implement _advance; this base enforces the terminal-state
    and round-count contracts shared by every protocol.
    """

    def __init__(self, max_rounds: int):
        self._max_rounds = max_rounds
        self._rounds = 0
        self._done = False

    def step(self, incoming: bytes | None) -> AuthStep:
        if self._done:
            raise AuthProtocolError("step called after terminal status")
        self._rounds += 1
        if self._rounds > self._max_rounds:
            result = AuthStep(status=AuthStatus.FAIL, reason="round overflow")
        else:
            result = self._advance(incoming)
        if result.terminal:
            self._done = True
        return result

    def _advance(self, incoming: bytes | None) -> AuthStep:
        raise NotImplementedError


class AuthProtocol:
    """A named authentication protocol usable by either side of a session."""

    name: str = ""
    max_rounds: int = 8

    def begin(self, role: str, config: AuthConfig) -> AuthHandle:
        raise NotImplementedError


class _PskServerHandle(AuthHandle):
    def __init__(self, secrets: Mapping[str, bytes], rng: random.Random, max_rounds: int):
        super().__init__(max_rounds)
        self._secrets = secrets
        self._rng = rng
        self._challenge: bytes | None = None

    def _advance(self, incoming: bytes | None) -> AuthStep:
        if self._challenge is None:
            self._challenge = self._rng.randbytes(_CHALLENGE_BYTES)
            return AuthStep(status=AuthStatus.PENDING, outgoing=self._challenge)
        if incoming is None or len(incoming) <= SIGNATURE_BYTES:
            return AuthStep(status=AuthStatus.FAIL, reason="malformed response")
        mac = incoming[-SIGNATURE_BYTES:]
        try:
            identity = incoming[:-SIGNATURE_BYTES].decode("utf-8")
        except UnicodeDecodeError:
            return AuthStep(status=AuthStatus.FAIL, reason="malformed response")
        key = self._secrets.get(identity)
        if key is None:
            return AuthStep(status=AuthStatus.FAIL, reason="unknown identity")
        expected = hmac.new(key, self._challenge, hashlib.sha256).digest()
        if not hmac.compare_digest(mac, expected):
            return AuthStep(status=AuthStatus.FAIL, reason="bad response")
        return AuthStep(status=AuthStatus.SUCCESS, identity=identity)


class _PskClientHandle(AuthHandle):
    def __init__(self, identity: str | None, key: bytes | None, max_rounds: int):
        super().__init__(max_rounds)
        self._identity = identity
        self._key = key
        self._started = False

    def _advance(self, incoming: bytes | None) -> AuthStep:
        if self._identity is None or self._key is None:
            return AuthStep(status=AuthStatus.FAIL, reason="no credentials")
        if not self._started and incoming is None:
            self._started = True
            return AuthStep(status=AuthStatus.PENDING)
        if incoming is None:
            return AuthStep(status=AuthStatus.FAIL, reason="missing challenge")
        mac = hmac.new(self._key, incoming, hashlib.sha256).digest()
        return AuthStep(
            status=AuthStatus.SUCCESS,
            outgoing=self._identity.encode("utf-8") + mac,
            identity=self._identity,
        )


class PskChallengeResponse(AuthProtocol):
    """Built-in pre-shared-key challenge-response.

    Two authenticator rounds: the server sends a 32-byte random challenge,
    the client answers with identity bytes followed by
    HMAC-SHA-256(key, challenge). The server looks the identity up in its
    secret store and verifies the digest.
    """

    name = PSK_PROTOCOL_NAME
    max_rounds = 3

    def __init__(self, shared_secrets: Mapping[str, bytes] | None = None):
        self._secrets = dict(shared_secrets or {})

    def begin(self, role: str, config: AuthConfig) -> AuthHandle:
        if role == "server":
            return _PskServerHandle(self._secrets, config.rng, self.max_rounds)
        if role == "client":
            return _PskClientHandle(config.identity, config.key, self.max_rounds)
        raise AuthProtocolError(f"unknown role: {role!r}")


def psk_protocol(shared_secrets: Mapping[str, bytes] | None = None) -> PskChallengeResponse:
    return PskChallengeResponse(shared_secrets)


def make_registry(*protocols: AuthProtocol) -> dict[str, AuthProtocol]:
    registry: dict[str, AuthProtocol] = {}
    for proto in protocols:
        if not proto.name:
            raise ValueError("protocol has no name")
        if proto.name in registry:
            raise ValueError(f"duplicate protocol name: {proto.name!r}")
        registry[proto.name] = proto
    return registry


def load_psk_store(path: str | Path) -> dict[str, bytes]:
    """Read a JSON credential store mapping identity to hex-encoded key."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError("PSK store must be a JSON object")
    store = {}
    for identity, key_hex in data.items():
        if not isinstance(key_hex, str):
            raise ValueError(f"key for {identity!r} is not a hex string")
        store[identity] = bytes.fromhex(key_hex)
    return store
