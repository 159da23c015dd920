"""Handshake machine tests: full exchanges, KDF pins, failure paths,
loss recovery, buffer budget and the sealed session channel."""

from __future__ import annotations

from random import Random

import pytest

from imdauth import wire
from imdauth.crypto import AuthFailure
from imdauth.handshake import (
    BUFFER_BUDGET,
    BadFinished,
    BudgetExceeded,
    ClientHandshake,
    ClientPhase,
    CryptoMeter,
    ReplayDetected,
    ServerHandshake,
    ServerPhase,
    SessionChannel,
    StepEvent,
    UnexpectedMessage,
    UnknownPskIdentity,
    derive_key_block,
    derive_master_secret,
    finished_verify_data,
    psk_premaster,
)

IDENTITY = b"patient-1"
PSK = bytes.fromhex("000102030405060708090a0b0c0d0e0f")


def make_pair(client_seed=1, server_seed=2, psk=PSK, server_psk=None, meter=None):
    client = ClientHandshake(IDENTITY, psk, Random(client_seed), meter=meter)
    lookup_psk = psk if server_psk is None else server_psk
    server = ServerHandshake(
        lambda ident: lookup_psk if ident == IDENTITY else None, Random(server_seed)
    )
    return client, server


def exchange(client, server, drop=None):
    """Ping-pong all flights in memory. drop: set of 0-based flight indexes
    to discard (0 = ClientHello datagram, 1 = server flight, ...)."""
    events = {"client": None, "server": None}
    flight_no = 0
    pending = [("server", client.start())]
    while pending:
        dest, records = pending.pop(0)
        if drop and flight_no in drop:
            flight_no += 1
            continue
        flight_no += 1
        machine = server if dest == "server" else client
        outs = []
        for rec in records:
            result = machine.step(rec)
            outs.extend(result.records)
            if result.event is not StepEvent.NONE:
                events[dest] = result.event
        if outs:
            pending.append(("client" if dest == "server" else "server", outs))
    return events


def test_full_exchange_establishes_both_sides():
    client, server = make_pair()
    events = exchange(client, server)
    assert events["client"] is StepEvent.ESTABLISHED
    assert events["server"] is StepEvent.ESTABLISHED
    assert client.phase is ClientPhase.ESTABLISHED
    assert server.phase is ServerPhase.ESTABLISHED
    assert client.keys == server.keys
    assert server.psk_identity == IDENTITY


def test_handshake_byte_budget():
    client, server = make_pair()
    exchange(client, server)
    payload_total = client.payload_bytes_sent + server.payload_bytes_sent
    wire_total = client.wire_bytes_sent + server.wire_bytes_sent
    # 9-byte identity: 54+23+1+40 client, 50+12+1+40 server.
    assert payload_total == 221
    assert wire_total == payload_total + 8 * wire.RECORD_HEADER_LEN
    assert payload_total <= 320


def test_buffer_budget_respected_and_peak_tracked():
    client, server = make_pair()
    exchange(client, server)
    assert client.buffer_peak <= BUFFER_BUDGET
    assert server.buffer_peak <= BUFFER_BUDGET
    assert client.buffer_peak > 256  # flights actually charged


def test_oversized_record_rejected():
    client, server = make_pair()
    server.step(client.start()[0])
    big = wire.Record(wire.CT_HANDSHAKE, 0, 99, bytes(2801))
    result = server.step(big)
    assert result.event is StepEvent.FAILED
    assert isinstance(result.error, BudgetExceeded)


def test_kdf_pinned_vectors(kdf_vectors):
    vec = kdf_vectors[0]
    assert psk_premaster(vec["psk"]) == vec["premaster"]
    master = derive_master_secret(vec["psk"], vec["client_random"], vec["server_random"])
    assert master == vec["master"]
    keys = derive_key_block(master, vec["client_random"], vec["server_random"])
    assert keys.client_write_key.raw == vec["client_write_key"]
    assert keys.server_write_key.raw == vec["server_write_key"]
    assert keys.client_salt == vec["client_salt"]
    assert keys.server_salt == vec["server_salt"]
    digest = vec["transcript_digest"]
    assert finished_verify_data(master, digest, b"client finished") == vec["client_verify"]
    assert finished_verify_data(master, digest, b"server finished") == vec["server_verify"]


def test_master_secret_depends_on_both_randoms():
    cr, sr = b"\x01" * 32, b"\x02" * 32
    base = derive_master_secret(PSK, cr, sr)
    assert len(base) == 48
    assert derive_master_secret(PSK, cr, b"\x03" * 32) != base
    assert derive_master_secret(PSK, b"\x03" * 32, sr) != base


def test_finished_labels_separate_and_digest_sensitive():
    master = bytes(48)
    digest = bytes(range(32))
    client_vd = finished_verify_data(master, digest, b"client finished")
    assert client_vd != finished_verify_data(master, digest, b"server finished")
    for i in range(32):
        perturbed = bytearray(digest)
        perturbed[i] ^= 0x01
        assert finished_verify_data(master, bytes(perturbed), b"client finished") != client_vd


def test_mismatched_psk_fails_on_first_finished():
    client, server = make_pair(server_psk=bytes.fromhex("ff" * 16))
    events = exchange(client, server)
    assert events["server"] is StepEvent.FAILED
    assert events["client"] is StepEvent.FAILED
    assert server.phase is ServerPhase.FAILED
    assert client.phase is ClientPhase.FAILED


def test_unknown_identity_alerts_and_fails():
    client = ClientHandshake(b"stranger", PSK, Random(1))
    server = ServerHandshake(lambda ident: None, Random(2))
    collected = []
    events = {"client": None, "server": None}
    pending = [("server", client.start())]
    while pending:
        dest, records = pending.pop(0)
        machine = server if dest == "server" else client
        outs = []
        for rec in records:
            result = machine.step(rec)
            outs.extend(result.records)
            collected.extend(result.records)
            if result.event is not StepEvent.NONE:
                events[dest] = result.event
        if outs:
            pending.append(("client" if dest == "server" else "server", outs))
    assert events["server"] is StepEvent.FAILED
    alerts = [r for r in collected if r.content_type == wire.CT_ALERT]
    assert len(alerts) == 1
    _, description = wire.decode_alert(alerts[0].payload)
    assert description == wire.ALERT_UNKNOWN_IDENTITY
    assert events["client"] is StepEvent.FAILED  # client honors the alert


def test_client_rejects_wrong_suite_in_server_hello():
    client, server = make_pair()
    flight1 = client.start()
    flight2 = []
    for rec in flight1:
        flight2.extend(server.step(rec).records)
    sh = flight2[0]
    body = bytearray(sh.payload)
    body[12 + 35] = 0x13  # clobber the suite id inside ServerHello
    body[12 + 36] = 0x01
    doctored = wire.Record(sh.content_type, sh.epoch, sh.sequence, bytes(body))
    result = client.step(doctored)
    assert result.event is StepEvent.FAILED
    assert isinstance(result.error, UnexpectedMessage)


def test_server_requires_offered_suite():
    server = ServerHandshake(lambda ident: PSK, Random(2))
    body = bytearray(wire.encode_client_hello(b"\x07" * 32))
    body[-4:-2] = (0x1301).to_bytes(2, "big")  # replace the single offered suite
    msg = wire.HandshakeMessage(wire.HT_CLIENT_HELLO, 0, bytes(body)).encode()
    result = server.step(wire.Record(wire.CT_HANDSHAKE, 0, 0, msg))
    assert result.event is StepEvent.FAILED
    alerts = [r for r in result.records if r.content_type == wire.CT_ALERT]
    assert alerts and wire.decode_alert(alerts[0].payload)[1] == wire.ALERT_HANDSHAKE_FAILURE


def test_determinism_and_freshness_of_client_hello():
    a = ClientHandshake(IDENTITY, PSK, Random(7)).start()
    b = ClientHandshake(IDENTITY, PSK, Random(7)).start()
    c = ClientHandshake(IDENTITY, PSK, Random(8)).start()
    assert [r.encode() for r in a] == [r.encode() for r in b]
    assert a[0].encode() != c[0].encode()
    assert len(a) == 1 and len(a[0].payload) <= 60


def test_key_freshness_across_sessions():
    seen = set()
    for seed in range(50):
        client, server = make_pair(client_seed=seed, server_seed=1000 + seed)
        exchange(client, server)
        assert client.keys == server.keys and client.keys is not None
        material = (
            client.keys.client_write_key.raw,
            client.keys.server_write_key.raw,
            client.keys.client_salt,
            client.keys.server_salt,
        )
        assert material not in seen
        seen.add(material)


def test_failed_machine_emits_nothing():
    client, server = make_pair(server_psk=b"\xff" * 16)
    exchange(client, server)
    assert server.phase is ServerPhase.FAILED
    again = server.step(wire.Record(wire.CT_HANDSHAKE, 0, 50, b"\x01\x00\x00\x00\x00\x09" + bytes(6)))
    assert again.records == [] and again.event is StepEvent.NONE
    assert server.retransmit() == []


def test_client_retransmit_reencodes_with_fresh_record_sequence():
    client, server = make_pair()
    first = client.start()
    second = client.retransmit()
    assert first[0].sequence == 0 and second[0].sequence == 1
    m1 = wire.decode_handshake(first[0].payload)
    m2 = wire.decode_handshake(second[0].payload)
    assert m1 == m2  # same message_seq and body
    # Server accepts the retransmitted copy as if it were the first.
    outs = server.step(second[0])
    assert outs.records and server.phase is ServerPhase.AWAIT_CLIENT_KEY_EXCHANGE


def test_lost_server_flight_recovered_by_duplicate_client_hello():
    client, server = make_pair()
    flight1 = client.start()
    for rec in flight1:
        server.step(rec)  # flight 2 emitted but "lost"
    dup = client.retransmit()
    reemitted = []
    for rec in dup:
        reemitted.extend(server.step(rec).records)
    assert len(reemitted) == 2  # hello + done again
    events = {"client": None, "server": None}
    pending = [("client", reemitted)]
    while pending:
        dest, records = pending.pop(0)
        machine = server if dest == "server" else client
        outs = []
        for rec in records:
            result = machine.step(rec)
            outs.extend(result.records)
            if result.event is not StepEvent.NONE:
                events[dest] = result.event
        if outs:
            pending.append(("client" if dest == "server" else "server", outs))
    assert events["client"] is StepEvent.ESTABLISHED
    assert events["server"] is StepEvent.ESTABLISHED


def test_lost_final_flight_recovered_by_duplicate_finished():
    client, server = make_pair()
    flight1 = client.start()
    flight2 = []
    for rec in flight1:
        flight2.extend(server.step(rec).records)
    flight3 = []
    for rec in flight2:
        flight3.extend(client.step(rec).records)
    for rec in flight3:
        server.step(rec)  # final flight emitted but "lost"
    assert server.phase is ServerPhase.ESTABLISHED
    flight4 = []
    for rec in client.retransmit():
        flight4.extend(server.step(rec).records)
    assert [r.content_type for r in flight4] == [wire.CT_CCS, wire.CT_HANDSHAKE]
    for rec in flight4:
        client.step(rec)
    assert client.phase is ClientPhase.ESTABLISHED


def test_meter_counts_crypto_work():
    meter = CryptoMeter()
    client, server = make_pair(meter=meter)
    exchange(client, server)
    assert meter.sha_bytes > 500  # transcript + PRF work
    assert meter.aes_bytes == 48  # own Finished sealed + peer Finished opened
    assert meter.sha_blocks > 0 and meter.aes_blocks > 0


def make_channel_pair():
    client, server = make_pair()
    exchange(client, server)
    return (
        SessionChannel(client.keys, "client"),
        SessionChannel(server.keys, "server"),
    )


def test_channel_round_trip_and_sequencing():
    c, s = make_channel_pair()
    rec1 = c.seal(b"challenge payload 32 bytes long!")
    rec2 = c.seal(b"second")
    assert rec1.sequence == 1 and rec2.sequence == 2
    assert s.open(rec1) == b"challenge payload 32 bytes long!"
    assert s.open(rec2) == b"second"


def test_channel_replay_detected_before_decrypt():
    c, s = make_channel_pair()
    rec = c.seal(b"one-time")
    assert s.open(rec) == b"one-time"
    with pytest.raises(ReplayDetected):
        s.open(rec)
    stale = c.seal(b"newer")
    assert s.open(stale) == b"newer"
    with pytest.raises(ReplayDetected):
        s.open(rec)


def test_channel_tamper_raises_auth_failure_and_keeps_window():
    c, s = make_channel_pair()
    rec = c.seal(b"dose update")
    flipped = bytearray(rec.payload)
    flipped[0] ^= 0x80
    with pytest.raises(AuthFailure):
        s.open(wire.Record(rec.content_type, rec.epoch, rec.sequence, bytes(flipped)))
    # The genuine record is still acceptable: failures must not advance the window.
    assert s.open(rec) == b"dose update"


def test_channel_shares_sequence_space_with_machine():
    # A retransmitted flight 3 burns epoch-1 sequences 0 and 1 on the client;
    # the channel must continue from there, never reusing a nonce.
    client, server = make_pair()
    flight1 = client.start()
    flight2 = []
    for rec in flight1:
        flight2.extend(server.step(rec).records)
    flight3 = []
    for rec in flight2:
        flight3.extend(client.step(rec).records)
    client.retransmit()  # first copy "lost"
    for rec in client.retransmit():
        for out in server.step(rec).records:
            client.step(out)
    assert client.phase is ClientPhase.ESTABLISHED
    channel = SessionChannel.for_machine(client)
    assert channel.seal(b"x").sequence == 3  # 0, 1, 2 consumed by Finished copies


def test_channel_directions_use_distinct_keys():
    c, s = make_channel_pair()
    from_client = c.seal(b"ping")
    from_server = s.seal(b"pong")
    assert c.open(from_server) == b"pong"
    with pytest.raises(AuthFailure):
        c.open(wire.Record(from_client.content_type, 1, 5, from_client.payload))
