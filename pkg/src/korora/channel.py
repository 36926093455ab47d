"""Data-plane channel: certificate-based mutual authentication, AEAD
records with strict sequencing, and a scripted man-in-the-middle.

Every frame on the pipe starts with a one-byte content type. Handshake
frames carry length-prefixed fields; data frames are :class:`WireMessage`
records whose content type, session id and sequence number are bound into
the AEAD associated data.
"""

from __future__ import annotations

import enum
import hashlib
import os
import random
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

AEAD_ALG = "chacha20-poly1305"
KEX_ALG = "x25519"
SIGNATURE_ALG = "ed25519"
KDF_ALG = "hkdf-sha256"

SESSION_ID_SIZE = 16
TAG_SIZE = 16
HS_NONCE_SIZE = 16
# content type + session id + seq + length + tag
RECORD_OVERHEAD = 1 + SESSION_ID_SIZE + 8 + 4 + TAG_SIZE


class ContentType(enum.IntEnum):
    HANDSHAKE = 1
    MANIFEST = 2
    FILES = 3
    DISK = 4
    MEMORY = 5
    VTPM = 6
    CONTROL = 7


class ChannelError(Exception):
    """Record rejected. ``kind``: tamper-detected, replay-detected,
    sequence-gap, wrong-session."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


class HandshakeFailure(Exception):
    """``kind``: bad-certificate, bad-signature, transcript-mismatch, no-response."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


def _raw_pub(key) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def pack_fields(*fields: bytes) -> bytes:
    return b"".join(struct.pack("<I", len(f)) + f for f in fields)


def unpack_fields(data: bytes, count: int) -> list:
    out, pos = [], 0
    for _ in range(count):
        if pos + 4 > len(data):
            raise ValueError("truncated field header")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ValueError("truncated field")
        out.append(data[pos : pos + n])
        pos += n
    if pos != len(data):
        raise ValueError("trailing bytes")
    return out


# -- identities -------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    name: str
    verifying_key: bytes
    issuer: str
    signature: bytes

    def tbs(self) -> bytes:
        return pack_fields(b"KCERT1", self.name.encode(), self.verifying_key, self.issuer.encode())

    def to_bytes(self) -> bytes:
        return pack_fields(self.name.encode(), self.verifying_key, self.issuer.encode(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        name, vk, issuer, sig = unpack_fields(data, 4)
        return cls(name.decode(), vk, issuer.decode(), sig)


@dataclass(frozen=True)
class TrustRoot:
    name: str
    verifying_key: bytes

    def verify(self, cert: Certificate) -> bool:
        if cert.issuer != self.name:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(self.verifying_key).verify(cert.signature, cert.tbs())
        except (InvalidSignature, ValueError):
            return False
        return True


@dataclass(frozen=True)
class Identity:
    name: str
    signing_seed: bytes = field(repr=False)
    certificate: Certificate

    def sign(self, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.signing_seed).sign(data)

    @property
    def verifying_key(self) -> bytes:
        return _raw_pub(Ed25519PrivateKey.from_private_bytes(self.signing_seed))


class CertificateAuthority:
    def __init__(self, name: str, seed: bytes = None):
        self.name = name
        self._key = Ed25519PrivateKey.from_private_bytes(seed or os.urandom(32))
        self.root = TrustRoot(name, _raw_pub(self._key))

    def issue(self, name: str, seed: bytes = None) -> Identity:
        seed = seed or os.urandom(32)
        vk = _raw_pub(Ed25519PrivateKey.from_private_bytes(seed))
        unsigned = Certificate(name, vk, self.name, b"")
        cert = Certificate(name, vk, self.name, self._key.sign(unsigned.tbs()))
        return Identity(name, seed, cert)


def self_signed_identity(name: str, seed: bytes = None, issuer: str = None) -> Identity:
    """An identity whose certificate is signed by its own key.

    ``issuer`` lets a forger claim a real CA name; the signature still fails.
    """
    return CertificateAuthority(issuer or name, seed).issue(name, seed)


# -- session log ------------------------------------------------------------

LOG_KINDS = frozenset(
    {"HS-OK", "HS-FAIL", "SEND", "RECV", "TAMPER", "REPLAY", "DROP", "EAVESDROP", "ABORT"}
)


class SessionLog:
    def __init__(self):
        self.tick = 0
        self.events = []

    def emit(self, who: str, kind: str, detail: str = ""):
        if kind not in LOG_KINDS:
            raise ValueError(f"unknown log kind {kind}")
        self.events.append((self.tick, who, kind, detail))

    def lines(self) -> list:
        return [f"EVENT {t} {who} {kind} {detail}".rstrip() for t, who, kind, detail in self.events]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e[2] == kind)

    def sent_bytes(self, who: str = None) -> int:
        total = 0
        for _, w, kind, detail in self.events:
            if kind == "SEND" and (who is None or w == who):
                total += int(dict(p.split("=", 1) for p in detail.split())["bytes"])
        return total


# -- records ----------------------------------------------------------------

_REC = struct.Struct("<B16sQI")


@dataclass(frozen=True)
class WireMessage:
    content_type: int
    session_id: bytes
    seq: int
    ciphertext: bytes
    tag: bytes

    def associated_data(self) -> bytes:
        return struct.pack("<B", self.content_type) + self.session_id + struct.pack("<Q", self.seq)

    def to_bytes(self) -> bytes:
        return (
            _REC.pack(self.content_type, self.session_id, self.seq, len(self.ciphertext))
            + self.ciphertext
            + self.tag
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "WireMessage":
        if len(data) < RECORD_OVERHEAD:
            raise ChannelError("tamper-detected", "short record")
        ctype, sid, seq, n = _REC.unpack_from(data)
        if len(data) != _REC.size + n + TAG_SIZE:
            raise ChannelError("tamper-detected", "record length mismatch")
        return cls(ctype, sid, seq, data[_REC.size : _REC.size + n], data[_REC.size + n :])


def _record_nonce(seq: int) -> bytes:
    return b"\x00\x00\x00\x00" + struct.pack("<Q", seq)


@dataclass
class SecureChannel:
    session_id: bytes
    send_key: bytes = field(repr=False)
    recv_key: bytes = field(repr=False)
    peer: str
    transcript_hash: bytes
    exporter: bytes = field(repr=False, default=b"")
    send_seq: int = 0
    recv_seq: int = 0

    def export_key(self, label: bytes) -> bytes:
        """32-byte key bound to this session, same on both halves."""
        return HKDF(hashes.SHA256(), 32, self.session_id, b"korora-export " + label).derive(
            self.exporter
        )


def seal_send(channel: SecureChannel, plaintext: bytes, content_type: int = ContentType.CONTROL) -> WireMessage:
    seq = channel.send_seq + 1
    shell = WireMessage(int(content_type), channel.session_id, seq, b"", b"")
    out = ChaCha20Poly1305(channel.send_key).encrypt(_record_nonce(seq), plaintext, shell.associated_data())
    channel.send_seq = seq
    return WireMessage(shell.content_type, shell.session_id, seq, out[:-TAG_SIZE], out[-TAG_SIZE:])


def open_recv(channel: SecureChannel, msg) -> bytes:
    """Authenticate and decrypt one record; the channel only advances on success."""
    if isinstance(msg, (bytes, bytearray)):
        msg = WireMessage.from_bytes(bytes(msg))
    if msg.session_id != channel.session_id:
        raise ChannelError("wrong-session")
    try:
        plain = ChaCha20Poly1305(channel.recv_key).decrypt(
            _record_nonce(msg.seq), msg.ciphertext + msg.tag, msg.associated_data()
        )
    except InvalidTag:
        raise ChannelError("tamper-detected", f"seq={msg.seq}") from None
    if msg.seq <= channel.recv_seq:
        raise ChannelError("replay-detected", f"seq={msg.seq} last={channel.recv_seq}")
    if msg.seq != channel.recv_seq + 1:
        raise ChannelError("sequence-gap", f"seq={msg.seq} expected={channel.recv_seq + 1}")
    channel.recv_seq = msg.seq
    return plain


# -- adversary --------------------------------------------------------------


@dataclass(frozen=True)
class Tamper:
    """Flip one bit in the ``occurrence``-th frame of ``target`` type
    (any non-handshake frame when ``target`` is None). ``bit`` None picks a
    seeded random position."""

    target: int = None
    occurrence: int = 0
    bit: int = None


@dataclass(frozen=True)
class AdversaryConfig:
    """Scripted pipe owner. ``replay`` and ``drop`` take 0-based indices into
    the data (non-handshake) frame stream."""

    eavesdrop: bool = False
    tamper: tuple = ()
    replay: tuple = ()
    drop: tuple = ()
    impersonate: bool = False
    replay_handshake: bool = False
    seed: int = 0

    @property
    def modes(self) -> frozenset:
        out = set()
        if self.eavesdrop:
            out.add("eavesdrop")
        if self.tamper:
            out.add("tamper")
        if self.replay or self.replay_handshake:
            out.add("replay")
        if self.drop:
            out.add("drop")
        if self.impersonate:
            out.add("impersonate")
        return frozenset(out)

    @property
    def active(self) -> bool:
        return bool(self.modes - {"eavesdrop"})


def flip_bit(data: bytes, bit: int) -> bytes:
    buf = bytearray(data)
    buf[bit // 8] ^= 1 << (bit % 8)
    return bytes(buf)


class Adversary:
    """Owns the pipe. Feed every frame through :meth:`intercept`."""

    def __init__(
        self,
        config: AdversaryConfig,
        log: SessionLog = None,
        fake_identity: Identity = None,
        stale_hello: bytes = None,
    ):
        self.config = config
        self.log = log
        self.fake_identity = fake_identity
        self.stale_hello = stale_hello
        self.rng = random.Random(config.seed)
        self.observed = []  # eavesdropped frames, verbatim
        self.captured = []  # every frame seen, for later replay
        self._data_index = 0
        self._counts = {}
        self._h1 = None

    def _emit(self, kind, detail):
        if self.log is not None:
            self.log.emit("adversary", kind, detail)

    def _maybe_tamper(self, frame: bytes) -> bytes:
        ctype = frame[0]
        data = ctype != ContentType.HANDSHAKE
        for t in self.config.tamper:
            if t.target is None:
                hit = data and self._counts.get(None, 0) == t.occurrence
            else:
                hit = t.target == ctype and self._counts.get(ctype, 0) == t.occurrence
            if hit:
                bit = t.bit if t.bit is not None else self.rng.randrange(8, len(frame) * 8)
                self._emit("TAMPER", f"type={ctype} bit={bit}")
                frame = flip_bit(frame, bit)
        return frame

    def _count(self, ctype: int):
        self._counts[ctype] = self._counts.get(ctype, 0) + 1
        if ctype != ContentType.HANDSHAKE:
            self._counts[None] = self._counts.get(None, 0) + 1

    def intercept(self, frame: bytes, direction: str = "src->dst") -> list:
        """Frames actually delivered for one frame sent."""
        self.captured.append(frame)
        if self.config.eavesdrop:
            self.observed.append(frame)
            self._emit("EAVESDROP", f"bytes={len(frame)} sha={hashlib.sha256(frame).hexdigest()[:16]}")
        ctype = frame[0]
        if ctype == ContentType.HANDSHAKE:
            frame = self._handshake(frame)
            out = [self._maybe_tamper(frame)]
            self._count(ctype)
            return out
        idx = self._data_index
        self._data_index += 1
        if idx in self.config.drop:
            self._emit("DROP", f"index={idx}")
            self._count(ctype)
            return []
        frame = self._maybe_tamper(frame)
        self._count(ctype)
        out = [frame]
        if idx in self.config.replay:
            self._emit("REPLAY", f"index={idx}")
            out.append(frame)
        return out

    def _handshake(self, frame: bytes) -> bytes:
        step = _hs_step(frame[1:])
        if step == b"H1":
            self._h1 = frame
        if step == b"H2":
            if self.config.replay_handshake and self.stale_hello is not None:
                self._emit("REPLAY", "handshake responder hello")
                return self.stale_hello
            if self.config.impersonate and self.fake_identity is not None:
                self._emit("TAMPER", f"impersonate name={self.fake_identity.name}")
                h2, _ = _responder_hello(self.fake_identity, self._h1, self.rng.randbytes)
                return h2
        return frame


def adversary_apply(config: AdversaryConfig, stream, log: SessionLog = None):
    """Run ``stream`` (frames as bytes) through a fresh adversary.

    Returns ``(delivered_frames, adversary)``; ``adversary.observed`` holds the
    eavesdropped copies and the session log (if given) the events.
    """
    adv = Adversary(config, log)
    out = []
    for frame in stream:
        out.extend(adv.intercept(bytes(frame)))
    return out, adv


# -- handshake --------------------------------------------------------------


def _hs_step(body: bytes):
    try:
        (n,) = struct.unpack_from("<I", body, 0)
        return body[4 : 4 + n]
    except struct.error:
        return None


def _hs_frame(*fields: bytes) -> bytes:
    return bytes([ContentType.HANDSHAKE]) + pack_fields(*fields)


def _th2(h1: bytes, cert: bytes, nonce: bytes, eph: bytes) -> bytes:
    return hashlib.sha256(b"korora-hs-v1" + pack_fields(h1, cert, nonce, eph)).digest()


def _responder_hello(identity: Identity, h1: bytes, randbytes):
    nonce = randbytes(HS_NONCE_SIZE)
    eph = X25519PrivateKey.from_private_bytes(randbytes(32))
    eph_pub = _raw_pub(eph)
    cert = identity.certificate.to_bytes()
    th2 = _th2(h1, cert, nonce, eph_pub)
    sig = identity.sign(b"korora-hs-responder" + th2)
    return _hs_frame(b"H2", cert, nonce, eph_pub, th2, sig), (nonce, eph, th2)


def _check_cert(raw: bytes, trust_root: TrustRoot, expect_name: str = None) -> Certificate:
    try:
        cert = Certificate.from_bytes(raw)
    except (ValueError, UnicodeDecodeError):
        raise HandshakeFailure("bad-certificate", "unparseable") from None
    if not trust_root.verify(cert):
        raise HandshakeFailure("bad-certificate", f"{cert.name} not issued by {trust_root.name}")
    if expect_name is not None and cert.name != expect_name:
        raise HandshakeFailure("bad-certificate", f"expected {expect_name}, got {cert.name}")
    return cert


def _verify_sig(vk: bytes, sig: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(vk).verify(sig, data)
    except (InvalidSignature, ValueError):
        return False
    return True


def _parse(frame: bytes, step: bytes, count: int) -> list:
    try:
        if not frame or frame[0] != ContentType.HANDSHAKE:
            raise ValueError("not a handshake frame")
        fields = unpack_fields(frame[1:], count)
    except ValueError as exc:
        raise HandshakeFailure("transcript-mismatch", f"malformed {step.decode()}: {exc}") from None
    if fields[0] != step:
        raise HandshakeFailure("transcript-mismatch", f"expected {step.decode()}")
    return fields[1:]


def _derive(shared: bytes, n_i: bytes, n_r: bytes, th2: bytes):
    okm = HKDF(hashes.SHA256(), 112, n_i + n_r, b"korora-v1 keys" + th2).derive(shared)
    return okm[:32], okm[32:64], okm[64:80], okm[80:112]


@dataclass(frozen=True)
class HandshakeEvidence:
    """The three handshake frames as the responder received/sent them."""

    h1: bytes
    h2: bytes
    h3: bytes

    def hex(self) -> str:
        return pack_fields(self.h1, self.h2, self.h3).hex()

    @classmethod
    def from_hex(cls, text: str) -> "HandshakeEvidence":
        return cls(*unpack_fields(bytes.fromhex(text), 3))


def verify_evidence(evidence: HandshakeEvidence, trust_root: TrustRoot):
    """Third-party check of who established a session.

    Returns ``(initiator, responder)`` names; raises HandshakeFailure.
    """
    cert_i, _, _ = _parse(evidence.h1, b"H1", 4)
    cert_r, n_r, eph_r, th2, sig_r = _parse(evidence.h2, b"H2", 6)
    th2_claim, sig_i = _parse(evidence.h3, b"H3", 3)
    ci = _check_cert(cert_i, trust_root)
    cr = _check_cert(cert_r, trust_root)
    if _th2(evidence.h1, cert_r, n_r, eph_r) != th2 or th2_claim != th2:
        raise HandshakeFailure("transcript-mismatch")
    if not _verify_sig(cr.verifying_key, sig_r, b"korora-hs-responder" + th2):
        raise HandshakeFailure("bad-signature", "responder")
    if not _verify_sig(ci.verifying_key, sig_i, b"korora-hs-initiator" + th2):
        raise HandshakeFailure("bad-signature", "initiator")
    return ci.name, cr.name


def _one(frames: list, step: str) -> bytes:
    if len(frames) != 1:
        raise HandshakeFailure("no-response", f"{step}: {len(frames)} frames delivered")
    return frames[0]


def handshake(
    initiator: Identity,
    responder: Identity,
    trust_root: TrustRoot,
    adversary: Adversary = None,
    log: SessionLog = None,
    rng: random.Random = None,
):
    """Mutually authenticate and derive direction keys.

    Returns ``(initiator_channel, responder_channel, evidence)``.
    Raises :class:`HandshakeFailure`.
    """
    randbytes = rng.randbytes if rng is not None else os.urandom

    def send(frame: bytes, direction: str) -> list:
        if log is not None:
            who = "source" if direction == "src->dst" else "destination"
            log.emit(who, "SEND", f"type={frame[0]} bytes={len(frame)}")
        return adversary.intercept(frame, direction) if adversary is not None else [frame]

    def fail(exc: HandshakeFailure, who: str):
        if log is not None:
            log.emit(who, "HS-FAIL", exc.kind)
        raise exc

    # H1: initiator hello
    n_i = randbytes(HS_NONCE_SIZE)
    eph_i = X25519PrivateKey.from_private_bytes(randbytes(32))
    h1 = _hs_frame(b"H1", initiator.certificate.to_bytes(), n_i, _raw_pub(eph_i))
    try:
        h1_rx = _one(send(h1, "src->dst"), "H1")
        cert_i_raw, n_i_rx, eph_i_rx = _parse(h1_rx, b"H1", 4)
        cert_i = _check_cert(cert_i_raw, trust_root)
    except HandshakeFailure as exc:
        fail(exc, "destination")

    # H2: responder hello, signs transcript so far
    h2, (n_r, eph_r, th2_r) = _responder_hello(responder, h1_rx, randbytes)
    try:
        h2_rx = _one(send(h2, "dst->src"), "H2")
        cert_r_raw, n_r_rx, eph_r_rx, th2_claim, sig_r = _parse(h2_rx, b"H2", 6)
        cert_r = _check_cert(cert_r_raw, trust_root, responder.name)
        th2_i = _th2(h1, cert_r_raw, n_r_rx, eph_r_rx)
        if th2_claim != th2_i:
            raise HandshakeFailure("transcript-mismatch", "responder transcript differs")
        if not _verify_sig(cert_r.verifying_key, sig_r, b"korora-hs-responder" + th2_i):
            raise HandshakeFailure("bad-signature", "responder")
    except HandshakeFailure as exc:
        fail(exc, "source")

    # H3: initiator finish
    h3 = _hs_frame(b"H3", th2_i, initiator.sign(b"korora-hs-initiator" + th2_i))
    try:
        h3_rx = _one(send(h3, "src->dst"), "H3")
        th2_claim_r, sig_i = _parse(h3_rx, b"H3", 3)
        if th2_claim_r != th2_r:
            raise HandshakeFailure("transcript-mismatch", "initiator transcript differs")
        if not _verify_sig(cert_i.verifying_key, sig_i, b"korora-hs-initiator" + th2_r):
            raise HandshakeFailure("bad-signature", "initiator")
    except HandshakeFailure as exc:
        fail(exc, "destination")

    shared_i = eph_i.exchange(X25519PublicKey.from_public_bytes(eph_r_rx))
    shared_r = eph_r.exchange(X25519PublicKey.from_public_bytes(eph_i_rx))
    k_ir, k_ri, sid, exp = _derive(shared_i, n_i, n_r_rx, th2_i)
    k_ir2, k_ri2, sid2, exp2 = _derive(shared_r, n_i_rx, n_r, th2_r)
    a = SecureChannel(sid, k_ir, k_ri, cert_r.name, th2_i, exp)
    b = SecureChannel(sid2, k_ri2, k_ir2, cert_i.name, th2_r, exp2)
    evidence = HandshakeEvidence(h1_rx, h2, h3_rx)
    if log is not None:
        log.emit("source", "HS-OK", f"peer={cert_r.name} session={sid.hex()}")
        log.emit("destination", "HS-OK", f"peer={cert_i.name} session={sid2.hex()} evidence={evidence.hex()}")
    return a, b, evidence
