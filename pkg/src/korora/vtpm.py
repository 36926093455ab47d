"""Per-VM virtual TPM: PCR extend, signed quotes, sealed transferable state."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field, replace

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

PCR_COUNT = 8
DIGEST_SIZE = 32
NONCE_SIZE = 16
SEAL_NONCE_SIZE = 12
TAG_SIZE = 16

HASH_ALG = "sha256"
SIGNATURE_ALG = "ed25519"
SEAL_AEAD_ALG = "chacha20-poly1305"

SEALED_MAGIC = b"KVTP"
SEALED_VERSION = 1
_INSTANCE_MAGIC = b"VTPI"


class VtpmError(Exception):
    pass


class AttestationError(VtpmError):
    """Quote rejected. ``reason`` is bad-signature, stale-nonce or pcr-mismatch."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class SealError(VtpmError):
    """Sealed blob failed to parse or authenticate (tamper and wrong key look alike)."""


class RollbackError(VtpmError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


@dataclass(frozen=True)
class VtpmInstance:
    vm_id: str
    pcrs: tuple
    signing_seed: bytes = field(repr=False)
    counter: int = 0

    def __post_init__(self):
        if len(self.pcrs) != PCR_COUNT or any(len(p) != DIGEST_SIZE for p in self.pcrs):
            raise VtpmError(f"expected {PCR_COUNT} PCRs of {DIGEST_SIZE} bytes")
        if len(self.signing_seed) != 32:
            raise VtpmError("signing seed must be 32 bytes")
        if not 0 <= self.counter < 2**64:
            raise VtpmError("counter out of range")

    @classmethod
    def create(cls, vm_id: str, signing_seed: bytes = None) -> "VtpmInstance":
        seed = os.urandom(32) if signing_seed is None else signing_seed
        return cls(vm_id, (bytes(DIGEST_SIZE),) * PCR_COUNT, seed, 0)

    @property
    def verifying_key(self) -> bytes:
        return _raw_public(Ed25519PrivateKey.from_private_bytes(self.signing_seed))

    def to_bytes(self) -> bytes:
        vm = self.vm_id.encode()
        return b"".join(
            [
                _INSTANCE_MAGIC,
                struct.pack("<H", len(vm)),
                vm,
                struct.pack("<Q", self.counter),
                *self.pcrs,
                self.signing_seed,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "VtpmInstance":
        if data[:4] != _INSTANCE_MAGIC:
            raise VtpmError("bad instance magic")
        (n,) = struct.unpack_from("<H", data, 4)
        pos = 6 + n
        vm_id = data[6:pos].decode()
        (counter,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        pcrs = tuple(data[pos + i * DIGEST_SIZE : pos + (i + 1) * DIGEST_SIZE] for i in range(PCR_COUNT))
        pos += PCR_COUNT * DIGEST_SIZE
        seed = data[pos : pos + 32]
        if len(data) != pos + 32:
            raise VtpmError("bad instance length")
        return cls(vm_id, pcrs, seed, counter)


def pcr_extend(instance: VtpmInstance, index: int, measurement: bytes) -> VtpmInstance:
    """pcr[index] <- H(pcr[index] || H(measurement))."""
    if not 0 <= index < PCR_COUNT:
        raise IndexError(f"PCR index {index} out of range")
    pcrs = list(instance.pcrs)
    pcrs[index] = sha256(pcrs[index] + sha256(measurement))
    return replace(instance, pcrs=tuple(pcrs))


def composite_digest(pcrs, selection: int) -> bytes:
    return sha256(b"".join(pcrs[i] for i in range(PCR_COUNT) if selection >> i & 1))


@dataclass(frozen=True)
class Quote:
    nonce: bytes
    pcr_selection: int
    composite_digest: bytes
    counter: int
    signature: bytes

    def signed_message(self) -> bytes:
        return _quote_message(self.nonce, self.pcr_selection, self.composite_digest, self.counter)


def _quote_message(nonce, selection, composite, counter) -> bytes:
    return nonce + bytes([selection]) + composite + struct.pack("<Q", counter)


def quote(instance: VtpmInstance, nonce: bytes, selection: int):
    """Sign the selected PCRs under a challenge nonce.

    Returns ``(quote, instance)`` where the returned instance carries the
    incremented counter.
    """
    if len(nonce) != NONCE_SIZE:
        raise VtpmError(f"nonce must be {NONCE_SIZE} bytes")
    if not 0 < selection < 1 << PCR_COUNT:
        raise VtpmError("PCR selection must be a nonzero 8-bit mask")
    instance = replace(instance, counter=instance.counter + 1)
    comp = composite_digest(instance.pcrs, selection)
    key = Ed25519PrivateKey.from_private_bytes(instance.signing_seed)
    sig = key.sign(_quote_message(nonce, selection, comp, instance.counter))
    return Quote(nonce, selection, comp, instance.counter, sig), instance


def verify_quote(q: Quote, verifying_key: bytes, expected_nonce: bytes, expected_pcrs) -> None:
    """Raise :class:`AttestationError` unless the quote is good."""
    try:
        Ed25519PublicKey.from_public_bytes(verifying_key).verify(q.signature, q.signed_message())
    except (InvalidSignature, ValueError):
        raise AttestationError("bad-signature") from None
    if q.nonce != expected_nonce:
        raise AttestationError("stale-nonce")
    if composite_digest(expected_pcrs, q.pcr_selection) != q.composite_digest:
        raise AttestationError("pcr-mismatch")


@dataclass(frozen=True)
class SealedState:
    vm_id: str
    counter: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    @property
    def associated_data(self) -> bytes:
        return self.vm_id.encode() + struct.pack("<Q", self.counter)

    def to_bytes(self) -> bytes:
        vm = self.vm_id.encode()
        return b"".join(
            [
                SEALED_MAGIC,
                bytes([SEALED_VERSION]),
                struct.pack("<H", len(vm)),
                vm,
                struct.pack("<Q", self.counter),
                self.nonce,
                struct.pack("<I", len(self.associated_data)),
                struct.pack("<I", len(self.ciphertext)),
                self.ciphertext,
                self.tag,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedState":
        try:
            if data[:4] != SEALED_MAGIC:
                raise SealError("bad magic")
            if data[4] != SEALED_VERSION:
                raise SealError(f"unknown version {data[4]}")
            (n,) = struct.unpack_from("<H", data, 5)
            pos = 7 + n
            vm_id = data[7:pos].decode()
            (counter,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            nonce = data[pos : pos + SEAL_NONCE_SIZE]
            pos += SEAL_NONCE_SIZE
            ad_len, ct_len = struct.unpack_from("<II", data, pos)
            pos += 8
            if ad_len != n + 8:
                raise SealError("associated-data length mismatch")
            ct = data[pos : pos + ct_len]
            tag = data[pos + ct_len :]
            if len(ct) != ct_len or len(tag) != TAG_SIZE:
                raise SealError("truncated or overlong blob")
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise SealError(f"malformed blob: {exc}") from None
        return cls(vm_id, counter, nonce, ct, tag)


def seal_state(instance: VtpmInstance, transport_key: bytes, nonce: bytes = None) -> SealedState:
    """Encrypt the whole instance under ``transport_key``.

    ``nonce`` defaults to 12 random bytes; callers that pass one must not
    reuse it under the same key.
    """
    nonce = os.urandom(SEAL_NONCE_SIZE) if nonce is None else nonce
    if len(nonce) != SEAL_NONCE_SIZE:
        raise VtpmError("seal nonce must be 12 bytes")
    shell = SealedState(instance.vm_id, instance.counter, nonce, b"", b"")
    out = ChaCha20Poly1305(transport_key).encrypt(nonce, instance.to_bytes(), shell.associated_data)
    return replace(shell, ciphertext=out[:-TAG_SIZE], tag=out[-TAG_SIZE:])


def unseal_state(sealed, transport_key: bytes, min_counter: int = None) -> VtpmInstance:
    """Inverse of :func:`seal_state`. Accepts a SealedState or its wire bytes.

    ``min_counter`` rejects blobs older than a counter already observed for
    the VM.
    """
    if isinstance(sealed, (bytes, bytearray)):
        sealed = SealedState.from_bytes(bytes(sealed))
    try:
        plain = ChaCha20Poly1305(transport_key).decrypt(
            sealed.nonce, sealed.ciphertext + sealed.tag, sealed.associated_data
        )
    except (InvalidTag, ValueError):
        raise SealError("authentication failed") from None
    inst = VtpmInstance.from_bytes(plain)
    if inst.vm_id != sealed.vm_id or inst.counter != sealed.counter:
        raise SealError("sealed header does not match contents")
    if min_counter is not None and inst.counter < min_counter:
        raise RollbackError(f"counter {inst.counter} regressed below {min_counter}")
    return inst
