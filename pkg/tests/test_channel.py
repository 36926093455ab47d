import random

import pytest

from korora.channel import (
    RECORD_OVERHEAD,
    Adversary,
    AdversaryConfig,
    CertificateAuthority,
    ChannelError,
    ContentType,
    HandshakeEvidence,
    HandshakeFailure,
    SessionLog,
    Tamper,
    WireMessage,
    adversary_apply,
    flip_bit,
    handshake,
    open_recv,
    seal_send,
    self_signed_identity,
    verify_evidence,
)

HS = ContentType.HANDSHAKE


@pytest.fixture
def pki():
    ca = CertificateAuthority("korora-ca", bytes(32))
    src = ca.issue("src", b"\x01" * 32)
    dst = ca.issue("dst", b"\x02" * 32)
    return ca, src, dst


def connect(pki, adversary=None, log=None, seed=0):
    ca, src, dst = pki
    return handshake(src, dst, ca.root, adversary, log, random.Random(seed))


def hs_frames(pki, seed=0):
    log = SessionLog()
    adv = Adversary(AdversaryConfig(), log)
    connect(pki, adv, log, seed)
    return adv.captured


# -- handshake --------------------------------------------------------------


def test_handshake_agrees(pki):
    a, b, ev = connect(pki)
    assert a.session_id == b.session_id
    assert a.transcript_hash == b.transcript_hash
    assert a.send_key == b.recv_key and a.recv_key == b.send_key
    assert a.send_key != a.recv_key
    assert (a.peer, b.peer) == ("dst", "src")
    assert a.export_key(b"x") == b.export_key(b"x") != a.export_key(b"y")


def test_fresh_sessions_differ(pki):
    a1, _, _ = connect(pki, seed=1)
    a2, _, _ = connect(pki, seed=2)
    assert a1.session_id != a2.session_id


def test_impersonation_rejected(pki):
    ca, src, dst = pki
    fake = self_signed_identity("dst", b"\x09" * 32, issuer="korora-ca")
    log = SessionLog()
    adv = Adversary(AdversaryConfig(impersonate=True), log, fake_identity=fake)
    with pytest.raises(HandshakeFailure) as err:
        handshake(src, dst, ca.root, adv, log, random.Random(0))
    assert err.value.kind == "bad-certificate"
    assert log.count("HS-FAIL") == 1 and log.count("HS-OK") == 0


def test_wrong_peer_name_rejected(pki):
    ca, src, dst = pki
    other = ca.issue("other", b"\x05" * 32)
    with pytest.raises(HandshakeFailure) as err:
        handshake(src, dst, ca.root, Adversary(AdversaryConfig(impersonate=True), fake_identity=other))
    assert err.value.kind == "bad-certificate"


def test_h1_nonce_tamper_breaks_transcript(pki):
    h1 = hs_frames(pki)[0]
    # ctype, len+"H1", len+cert, len+nonce
    cert_len = int.from_bytes(h1[7:11], "little")
    nonce_at = 1 + 6 + 4 + cert_len + 4
    adv = Adversary(AdversaryConfig(tamper=(Tamper(HS, 0, nonce_at * 8 + 3),)))
    with pytest.raises(HandshakeFailure) as err:
        connect(pki, adv)
    assert err.value.kind == "transcript-mismatch"


def test_h2_signature_tamper(pki):
    h2 = hs_frames(pki)[1]
    adv = Adversary(AdversaryConfig(tamper=(Tamper(HS, 1, len(h2) * 8 - 1),)))
    with pytest.raises(HandshakeFailure) as err:
        connect(pki, adv)
    assert err.value.kind == "bad-signature"


def test_stale_hello_replay(pki):
    stale = hs_frames(pki, seed=1)[1]
    adv = Adversary(AdversaryConfig(replay_handshake=True), stale_hello=stale)
    with pytest.raises(HandshakeFailure) as err:
        connect(pki, adv, seed=2)
    assert err.value.kind == "transcript-mismatch"


def test_dropped_handshake_frame(pki):
    class Eat(Adversary):
        def intercept(self, frame, direction="src->dst"):
            return []

    with pytest.raises(HandshakeFailure) as err:
        connect(pki, Eat(AdversaryConfig()))
    assert err.value.kind == "no-response"


def test_evidence_verifies_from_log(pki):
    ca, _, _ = pki
    log = SessionLog()
    connect(pki, log=log)
    line = next(l for l in log.lines() if "evidence=" in l)
    ev = HandshakeEvidence.from_hex(line.split("evidence=")[1])
    assert verify_evidence(ev, ca.root) == ("src", "dst")
    bad = HandshakeEvidence(ev.h1, ev.h2, flip_bit(ev.h3, len(ev.h3) * 8 - 1))
    with pytest.raises(HandshakeFailure):
        verify_evidence(bad, ca.root)


# -- records ----------------------------------------------------------------


def test_record_layout(pki):
    a, b, _ = connect(pki)
    msg = seal_send(a, b"hello", ContentType.DISK)
    raw = msg.to_bytes()
    assert len(raw) == len(b"hello") + RECORD_OVERHEAD
    assert WireMessage.from_bytes(raw) == msg
    assert raw[0] == ContentType.DISK and msg.seq == 1


def test_thousand_payloads(pki):
    a, b, _ = connect(pki)
    rng = random.Random(1)
    for _ in range(1000):
        m = rng.randbytes(rng.randrange(0, 200))
        assert open_recv(b, seal_send(a, m).to_bytes()) == m
    m = b"reply"
    assert open_recv(a, seal_send(b, m)) == m


def test_replay_rejected(pki):
    a, b, _ = connect(pki)
    frames = [seal_send(a, bytes([i])).to_bytes() for i in range(10)]
    for f in frames[:6]:
        open_recv(b, f)
    with pytest.raises(ChannelError) as err:
        open_recv(b, frames[5])
    assert err.value.kind == "replay-detected"
    assert b.recv_seq == 6
    assert open_recv(b, frames[6]) == bytes([6])


def test_bit_flip_then_retransmit(pki):
    a, b, _ = connect(pki)
    raw = seal_send(a, b"payload").to_bytes()
    with pytest.raises(ChannelError) as err:
        open_recv(b, flip_bit(raw, len(raw) * 8 - 20))
    assert err.value.kind == "tamper-detected"
    assert b.recv_seq == 0
    assert open_recv(b, raw) == b"payload"


def test_content_type_is_authenticated(pki):
    a, b, _ = connect(pki)
    raw = bytearray(seal_send(a, b"x", ContentType.DISK).to_bytes())
    raw[0] = ContentType.MEMORY
    with pytest.raises(ChannelError) as err:
        open_recv(b, bytes(raw))
    assert err.value.kind == "tamper-detected"


def test_wrong_session(pki):
    a, _, _ = connect(pki, seed=1)
    _, b2, _ = connect(pki, seed=2)
    with pytest.raises(ChannelError) as err:
        open_recv(b2, seal_send(a, b"x"))
    assert err.value.kind == "wrong-session"


def test_drop_is_sequence_gap(pki):
    a, b, _ = connect(pki)
    stream = [seal_send(a, bytes([i])).to_bytes() for i in range(4)]
    out, _ = adversary_apply(AdversaryConfig(drop=(1,)), stream)
    open_recv(b, out[0])
    with pytest.raises(ChannelError) as err:
        open_recv(b, out[1])
    assert err.value.kind == "sequence-gap"


def test_replay_adversary_duplicates(pki):
    a, _, _ = connect(pki)
    stream = [seal_send(a, bytes([i])).to_bytes() for i in range(8)]
    log = SessionLog()
    out, _ = adversary_apply(AdversaryConfig(replay=(5,)), stream, log)
    assert out == stream[:6] + [stream[5]] + stream[6:]
    assert log.count("REPLAY") == 1


def test_passive_config_is_identity(pki):
    a, _, _ = connect(pki)
    stream = [seal_send(a, bytes([i]) * 30).to_bytes() for i in range(20)]
    out, adv = adversary_apply(AdversaryConfig(), stream)
    assert out == stream and adv.observed == []
    assert not AdversaryConfig(eavesdrop=True).active


def test_eavesdrop_sees_no_plaintext(pki):
    a, _, _ = connect(pki)
    rng = random.Random(5)
    secrets = [b"SECRET-" + rng.randbytes(24) for _ in range(50)]
    stream = [seal_send(a, s).to_bytes() for s in secrets]
    log = SessionLog()
    out, adv = adversary_apply(AdversaryConfig(eavesdrop=True), stream, log)
    assert out == stream and len(adv.observed) == 50
    blob = b"".join(adv.observed) + log.text().encode()
    assert not any(s in blob for s in secrets)
    assert b"SECRET" not in blob


def test_tamper_by_content_type(pki):
    a, b, _ = connect(pki)
    stream = [
        seal_send(a, b"d0", ContentType.DISK).to_bytes(),
        seal_send(a, b"v0", ContentType.VTPM).to_bytes(),
        seal_send(a, b"d1", ContentType.DISK).to_bytes(),
    ]
    out, _ = adversary_apply(AdversaryConfig(tamper=(Tamper(ContentType.DISK, 1, 40 * 8),)), stream)
    assert out[:2] == stream[:2] and out[2] != stream[2]
    open_recv(b, out[0])
    open_recv(b, out[1])
    with pytest.raises(ChannelError):
        open_recv(b, out[2])


def test_session_log_format():
    log = SessionLog()
    log.tick = 4
    log.emit("source", "SEND", "type=4 bytes=100")
    log.emit("destination", "RECV")
    assert log.lines() == ["EVENT 4 source SEND type=4 bytes=100", "EVENT 4 destination RECV"]
    assert log.sent_bytes() == 100
    with pytest.raises(ValueError):
        log.emit("source", "NOPE")
