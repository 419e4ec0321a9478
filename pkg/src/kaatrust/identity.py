"""Imprinting stations, identity-based encryption, signatures and channels.

Every node receives a trust germ from an imprinting station: an identity,
one key pair for encryption and one for signing.  Public keys are derived
from the identity string alone, so peers never need certificates; only the
station's public point ``P_pub = s*P`` has to be known.

Encryption follows the Boneh-Franklin BasicIdent construction with an
added HMAC tag.  Signatures use a Cha-Cheon style identity-based scheme:
``U = r*Q``, ``h = H(m, U)``, ``V = (r + h)*S`` verified through
``e(P, V) == e(P_pub, U + h*Q)``.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import secrets
from dataclasses import dataclass, field

from .pairing import (
    DEFAULT_PARAMS,
    ELEMENT_SIZE,
    DecodeError,
    G1Element,
    PairingParams,
    ParameterMismatch,
    hash_g2_to_mask,
    hash_to_g1,
    pairing,
)
from .wire import Reader, WireError, Writer

__all__ = [
    "ImprintingStation",
    "PublicIdentity",
    "TrustGerm",
    "Ciphertext",
    "Signature",
    "SecureChannel",
    "MacMismatch",
    "SignatureDecodeError",
    "ChannelError",
    "ReplayError",
    "station_setup",
    "imprint",
    "enc_public_key",
    "sig_public_key",
    "ibe_encrypt",
    "ibe_decrypt",
    "ibs_sign",
    "ibs_verify",
    "establish_channel",
    "channel_offer",
    "channel_accept",
]

GERM_VERSION = 1
KEYSTORE_VERSION = 1
STATION_VERSION = 1
SESSION_KEY_BYTES = 32
TAG_BYTES = 32
CHALLENGE_PREFIX = b"\x03"


class MacMismatch(ValueError):
    """Ciphertext authentication failed (tampering or wrong recipient)."""


class SignatureDecodeError(ValueError):
    """A signature byte string could not be decoded."""


class ChannelError(ValueError):
    pass


class ReplayError(ChannelError):
    pass


def make_rng(seed=None) -> random.Random:
    """Return a random source: OS entropy for ``None``, else a seeded PRNG."""
    if seed is None:
        return secrets.SystemRandom()
    if isinstance(seed, random.Random):
        return seed
    return random.Random(seed)


def enc_public_key(identity: str, params: PairingParams = DEFAULT_PARAMS) -> G1Element:
    return hash_to_g1(b"enc" + identity.encode("utf-8"), params)


def sig_public_key(identity: str, params: PairingParams = DEFAULT_PARAMS) -> G1Element:
    return hash_to_g1(b"sig" + identity.encode("utf-8"), params)


@dataclass(frozen=True)
class ImprintingStation:
    station_id: str
    master_secret: int = field(repr=False)
    params: PairingParams = DEFAULT_PARAMS

    @property
    def p_pub(self) -> G1Element:
        return self.master_secret * self.params.generator

    def to_bytes(self) -> bytes:
        """Secret station file; never publish."""
        w = Writer().u8(STATION_VERSION).text(self.station_id)
        w.raw(self.master_secret.to_bytes(16, "big"))
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, params: PairingParams = DEFAULT_PARAMS) -> ImprintingStation:
        r = Reader(data)
        if r.u8() != STATION_VERSION:
            raise WireError("unsupported station file version")
        station_id = r.text()
        secret = int.from_bytes(r.raw(16), "big")
        r.expect_end()
        if not 0 < secret < params.q:
            raise WireError("master secret out of range")
        return cls(station_id, secret, params)


def station_setup(station_id: str, seed=None, params: PairingParams = DEFAULT_PARAMS) -> ImprintingStation:
    rng = make_rng(seed)
    return ImprintingStation(station_id, rng.randrange(1, params.q), params)


@dataclass(frozen=True)
class PublicIdentity:
    """Public half of a trust germ; enough to encrypt to and verify a node."""

    id: str
    station_id: str
    p_pub: G1Element
    enc_public: G1Element
    sig_public: G1Element

    @property
    def params(self) -> PairingParams:
        return self.p_pub.params

    def verify(self, message: bytes, sig: Signature) -> bool:
        return ibs_verify(self.p_pub, self.id, message, sig)

    def to_bytes(self) -> bytes:
        w = Writer().u8(GERM_VERSION).text(self.station_id).raw(self.p_pub.to_bytes())
        w.text(self.id).raw(self.enc_public.to_bytes()).raw(self.sig_public.to_bytes())
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader, params: PairingParams = DEFAULT_PARAMS) -> PublicIdentity:
        if r.u8() != GERM_VERSION:
            raise WireError("unsupported germ version")
        station_id = r.text()
        p_pub = params.decode_g1(r.raw(ELEMENT_SIZE))
        ident = r.text()
        enc = params.decode_g1(r.raw(ELEMENT_SIZE))
        sig = params.decode_g1(r.raw(ELEMENT_SIZE))
        if enc != enc_public_key(ident, params) or sig != sig_public_key(ident, params):
            raise WireError(f"public keys do not match identity {ident!r}")
        return cls(ident, station_id, p_pub, enc, sig)

    @classmethod
    def from_bytes(cls, data: bytes, params: PairingParams = DEFAULT_PARAMS) -> PublicIdentity:
        r = Reader(data)
        out = cls.read(r, params)
        r.expect_end()
        return out


@dataclass(frozen=True)
class TrustGerm:
    public: PublicIdentity
    enc_secret: G1Element = field(repr=False)
    sig_secret: G1Element = field(repr=False)

    @property
    def id(self) -> str:
        return self.public.id

    @property
    def params(self) -> PairingParams:
        return self.public.params

    @property
    def p_pub(self) -> G1Element:
        return self.public.p_pub

    def keys_valid(self) -> bool:
        """Check e(S, P) == e(Q, P_pub) for both key pairs."""
        P = self.params.generator
        pub = self.public
        return (pairing(self.enc_secret, P) == pairing(pub.enc_public, pub.p_pub)
                and pairing(self.sig_secret, P) == pairing(pub.sig_public, pub.p_pub))

    def export_secrets(self) -> bytes:
        """Keystore encoding of the two secret keys, bound to the identity."""
        w = Writer().u8(KEYSTORE_VERSION).text(self.id)
        w.raw(self.enc_secret.to_bytes()).raw(self.sig_secret.to_bytes())
        return w.getvalue()

    @classmethod
    def from_parts(cls, public: PublicIdentity, keystore: bytes) -> TrustGerm:
        params = public.params
        r = Reader(keystore)
        if r.u8() != KEYSTORE_VERSION:
            raise WireError("unsupported keystore version")
        if r.text() != public.id:
            raise WireError("keystore belongs to a different identity")
        enc = params.decode_g1(r.raw(ELEMENT_SIZE))
        sig = params.decode_g1(r.raw(ELEMENT_SIZE))
        r.expect_end()
        germ = cls(public, enc, sig)
        if not germ.keys_valid():
            raise WireError("keystore secrets do not match the public germ")
        return germ


def imprint(station: ImprintingStation, identity: str) -> TrustGerm:
    if not identity:
        raise ValueError("identity must be non-empty")
    params = station.params
    q_enc = enc_public_key(identity, params)
    q_sig = sig_public_key(identity, params)
    public = PublicIdentity(identity, station.station_id, station.p_pub, q_enc, q_sig)
    return TrustGerm(public, station.master_secret * q_enc, station.master_secret * q_sig)


# -- encryption ---------------------------------------------------------------

@dataclass(frozen=True)
class Ciphertext:
    u: G1Element
    v: bytes
    mac: bytes

    def to_bytes(self) -> bytes:
        return Writer().raw(self.u.to_bytes()).blob(self.v).raw(self.mac).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, params: PairingParams = DEFAULT_PARAMS) -> Ciphertext:
        r = Reader(data)
        u = params.decode_g1(r.raw(ELEMENT_SIZE))
        v = r.blob()
        mac = r.raw(TAG_BYTES)
        r.expect_end()
        return cls(u, v, mac)


def _ibe_keys(shared, length: int) -> tuple[bytes, bytes]:
    stream = hash_g2_to_mask(shared, length + TAG_BYTES)
    return stream[:length], stream[length:]


def _ibe_tag(mac_key: bytes, u: G1Element, v: bytes, recipient_id: str) -> bytes:
    body = Writer().raw(u.to_bytes()).blob(v).text(recipient_id).getvalue()
    return hmac.new(mac_key, body, hashlib.sha256).digest()


def ibe_encrypt(recipient: PublicIdentity, plaintext: bytes, seed=None) -> Ciphertext:
    params = recipient.params
    r = make_rng(seed).randrange(1, params.q)
    u = r * params.generator
    shared = pairing(recipient.enc_public, recipient.p_pub) ** r
    mask, mac_key = _ibe_keys(shared, len(plaintext))
    v = bytes(a ^ b for a, b in zip(plaintext, mask))
    return Ciphertext(u, v, _ibe_tag(mac_key, u, v, recipient.id))


def ibe_decrypt(germ: TrustGerm, ct: Ciphertext) -> bytes:
    if ct.u.params != germ.params:
        raise ParameterMismatch("ciphertext uses different pairing parameters")
    shared = pairing(germ.enc_secret, ct.u)
    mask, mac_key = _ibe_keys(shared, len(ct.v))
    if not hmac.compare_digest(_ibe_tag(mac_key, ct.u, ct.v, germ.id), ct.mac):
        raise MacMismatch("ciphertext authentication failed")
    return bytes(a ^ b for a, b in zip(ct.v, mask))


# -- signatures ---------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    commitment: G1Element
    response: G1Element

    def to_bytes(self) -> bytes:
        return self.commitment.to_bytes() + self.response.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: PairingParams = DEFAULT_PARAMS) -> Signature:
        if len(data) != 2 * ELEMENT_SIZE:
            raise SignatureDecodeError(f"signature must be {2 * ELEMENT_SIZE} bytes, got {len(data)}")
        try:
            return cls(params.decode_g1(data[:ELEMENT_SIZE]), params.decode_g1(data[ELEMENT_SIZE:]))
        except DecodeError as exc:
            raise SignatureDecodeError(str(exc)) from None


SIGNATURE_SIZE = 2 * ELEMENT_SIZE


def _challenge(message: bytes, commitment: G1Element) -> int:
    body = CHALLENGE_PREFIX + Writer().blob(message).raw(commitment.to_bytes()).getvalue()
    return int.from_bytes(hashlib.sha256(body).digest(), "big") % commitment.params.q


def ibs_sign(germ: TrustGerm, message: bytes, seed=None) -> Signature:
    params = germ.params
    r = make_rng(seed).randrange(1, params.q)
    commitment = r * germ.public.sig_public
    h = _challenge(message, commitment)
    return Signature(commitment, (r + h) * germ.sig_secret)


def ibs_verify(p_pub: G1Element, signer_id: str, message: bytes, sig) -> bool:
    """Check ``sig`` over ``message`` for ``signer_id`` under station ``p_pub``.

    ``sig`` may be a Signature or its byte encoding; undecodable bytes raise
    SignatureDecodeError rather than returning False.
    """
    params = p_pub.params
    if isinstance(sig, (bytes, bytearray)):
        sig = Signature.from_bytes(bytes(sig), params)
    if sig.commitment.params != params or sig.response.params != params:
        return False
    q_sig = sig_public_key(signer_id, params)
    h = _challenge(message, sig.commitment)
    return pairing(params.generator, sig.response) == pairing(p_pub, sig.commitment + h * q_sig)


# -- secure channel -----------------------------------------------------------

def _keystream(key: bytes, sender: str, counter: int, length: int) -> bytes:
    prefix = key + b"stream" + Writer().text(sender).u64(counter).getvalue()
    out = b"".join(hashlib.sha256(prefix + i.to_bytes(4, "big")).digest()
                   for i in range((length + 31) // 32))
    return out[:length]


def _frame_tag(key: bytes, sender: str, counter: int, body: bytes) -> bytes:
    msg = b"tag" + Writer().text(sender).u64(counter).blob(body).getvalue()
    return hmac.new(key, msg, hashlib.sha256).digest()


class SecureChannel:
    """One endpoint of an authenticated, encrypted, replay-protected channel.

    Frames are ``counter (8) || ciphertext || tag (32)``.  The counter is the
    nonce; a frame whose counter is not above the last accepted one is a
    replay.
    """

    def __init__(self, session_key: bytes, local_id: str, remote_id: str):
        if len(session_key) != SESSION_KEY_BYTES:
            raise ValueError("session key must be 32 bytes")
        self.session_key = session_key
        self.local_id = local_id
        self.remote_id = remote_id
        self.send_counter = 0
        self.recv_counter = 0

    def send(self, payload: bytes) -> bytes:
        self.send_counter += 1
        n = self.send_counter
        body = bytes(a ^ b for a, b in zip(payload, _keystream(self.session_key, self.local_id, n, len(payload))))
        return n.to_bytes(8, "big") + body + _frame_tag(self.session_key, self.local_id, n, body)

    def receive(self, frame: bytes) -> bytes:
        if len(frame) < 8 + TAG_BYTES:
            raise ChannelError("frame too short")
        n = int.from_bytes(frame[:8], "big")
        body, tag = frame[8:-TAG_BYTES], frame[-TAG_BYTES:]
        if not hmac.compare_digest(_frame_tag(self.session_key, self.remote_id, n, body), tag):
            raise ChannelError("frame authentication failed")
        if n <= self.recv_counter:
            raise ReplayError(f"counter {n} already seen (last {self.recv_counter})")
        self.recv_counter = n
        return bytes(a ^ b for a, b in zip(body, _keystream(self.session_key, self.remote_id, n, len(body))))


def channel_offer(initiator: TrustGerm, responder: PublicIdentity, seed=None) -> tuple[SecureChannel, Ciphertext]:
    """Initiator side of the handshake: pick a session key, encrypt it to the peer."""
    if initiator.params != responder.params:
        raise ParameterMismatch("peers use different pairing parameters")
    rng = make_rng(seed)
    key = rng.getrandbits(8 * SESSION_KEY_BYTES).to_bytes(SESSION_KEY_BYTES, "big")
    ct = ibe_encrypt(responder, key + initiator.id.encode("utf-8"), rng)
    return SecureChannel(key, initiator.id, responder.id), ct


def channel_accept(responder: TrustGerm, initiator_id: str, ct: Ciphertext) -> SecureChannel:
    plain = ibe_decrypt(responder, ct)
    key, claimed = plain[:SESSION_KEY_BYTES], plain[SESSION_KEY_BYTES:]
    if claimed != initiator_id.encode("utf-8"):
        raise ChannelError("handshake names a different initiator")
    return SecureChannel(key, responder.id, initiator_id)


def establish_channel(initiator: TrustGerm, responder: TrustGerm, seed=None) -> tuple[SecureChannel, SecureChannel]:
    chan_i, ct = channel_offer(initiator, responder.public, seed)
    return chan_i, channel_accept(responder, initiator.id, ct)
