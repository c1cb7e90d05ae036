import random

import pytest

from oracles import flood_tail_writes, frame_bytes, seq_flag as oracle_seq_flag, tail_batch
from rdma_channel.errors import ConfigError, RingError
from rdma_channel.fabric import create_fabric
from rdma_channel.ring import (
    FRAME_OVERHEAD,
    PointerMode,
    RingConfig,
    init_ring,
    release_ring,
    seq_flag,
)


def make_ring(num_chunks=8, chunk_size=128, mode=PointerMode.PIGGYBACK, threshold=0.25, torn=False):
    fab = create_fabric(torn_delivery=torn)
    a, b = fab.endpoint(1 << 20), fab.endpoint(1 << 20)
    conn = fab.connect(a, b)
    cfg = RingConfig(num_chunks, chunk_size, threshold, mode)
    ab, ba = init_ring(conn, cfg)
    return fab, a, b, ab, ba


def drain(fab, *rings):
    """Run the fabric dry, letting the ring halves handle their completions."""
    halves = [h for ring in rings for h in (ring.tx, ring.rx)]
    endpoints = {h.ep.id: h.ep for h in halves}.values()
    while True:
        for ep in endpoints:
            for c in ep.poll_cq(64):
                assert any(h.handle_completion(c) for h in halves)
        if not fab.progress():
            return


@pytest.mark.parametrize("kw", [dict(chunk_size=60), dict(chunk_size=100), dict(num_chunks=1),
                                dict(tail_update_threshold=0), dict(tail_update_threshold=1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        RingConfig(**kw)


def test_init_registers_and_sizes_default_ring():
    fab = create_fabric()
    a, b = fab.endpoint(8 << 20), fab.endpoint(8 << 20)
    ab, ba = init_ring(fab.connect(a, b), RingConfig())
    assert ab.rx.data.length == 1 << 20 and ab.rx.data.endpoint_id == b.id
    assert ab.tx.staging.length == 1 << 20 and ab.tx.staging.endpoint_id == a.id
    assert a.counters().registrations + b.counters().registrations == 12
    assert ab.free_space() == 64 * (16384 - 24)
    for ring in (ab, ba):
        release_ring(ring)
    assert a.counters().deregistrations + b.counters().deregistrations == 12


def test_for_payload_sizes_chunk_around_payload():
    cfg = RingConfig.for_payload(16384)
    assert cfg.payload_capacity == 16384 and cfg.chunk_size == 16384 + FRAME_OVERHEAD


def test_flags_are_nonzero_and_differ_between_laps():
    assert seq_flag(0) == 1
    assert all(seq_flag(k) != 0 for k in (0, 0xFFFFFFFE, 0xFFFFFFFF, 1 << 40))
    for n in range(2, 9):
        assert all(seq_flag(k) != seq_flag(k + n) for k in range(0, 5000, 7))
    assert [seq_flag(k) for k in range(0, 3000, 13)] == [oracle_seq_flag(k) for k in range(0, 3000, 13)]


def test_free_chunks_uses_the_lagging_replica():
    fab, a, b, ab, _ = make_ring()
    assert ab.free_chunks() == 8
    for i in range(3):
        assert ab.tx.sender_post_frame(bytes([i]) * 5)
    assert ab.free_chunks() == 5
    drain(fab, ab)
    for _ in range(3):
        ab.rx.consume(ab.rx.poll())
    assert ab.free_chunks() == 5  # consumed, but no tail update sent yet


def test_frame_on_the_wire_is_bit_exact():
    fab, a, b, ab, _ = make_ring(chunk_size=128)
    payload = b"bottom-fill!"
    ab.tx.post(ab.tx.stage_bytes(payload), tail32=0xABCD)
    drain(fab, ab)
    chunk = b.read(ab.rx.data.base, 128)
    assert chunk == frame_bytes(128, payload, frame_no=0, head=1, tail32=0xABCD)
    # only the framed bytes crossed the wire, not the whole chunk
    assert a.counters().wire_bytes == FRAME_OVERHEAD + 16


@pytest.mark.parametrize("mode,writes", [(PointerMode.BASIC, 2), (PointerMode.PIGGYBACK, 1)])
def test_writes_per_frame_by_pointer_mode(mode, writes):
    fab, a, b, ab, _ = make_ring(mode=mode)
    ab.tx.sender_post_frame(b"hi")
    drain(fab, ab)
    assert a.counters().rdma_writes == writes
    frame = ab.rx.poll()
    assert frame is not None and ab.rx.payload(frame) == b"hi"


def test_basic_receiver_waits_for_the_head_pointer():
    fab, a, b, ab, _ = make_ring(mode=PointerMode.BASIC)
    ab.tx.sender_post_frame(b"data")
    fab.progress()  # data lands, head write not yet posted
    assert ab.rx.poll() is None
    drain(fab, ab)
    assert ab.rx.poll() is not None


def test_full_ring_refuses_without_side_effects():
    fab, a, b, ab, _ = make_ring(num_chunks=2)
    assert ab.tx.sender_post_frame(b"1") and ab.tx.sender_post_frame(b"2")
    before = a.counters()
    assert ab.tx.sender_post_frame(b"3") is False
    assert a.counters() == before


def test_oversize_payload_is_an_error():
    _, _, _, ab, _ = make_ring(chunk_size=64)
    with pytest.raises(RingError):
        ab.tx.sender_post_frame(bytes(64 - FRAME_OVERHEAD + 1))


def test_torn_frame_is_invisible_until_the_tail_installment():
    fab, a, b, ab, _ = make_ring(torn=True)
    ab.tx.sender_post_frame(b"x" * 40)
    fab.progress()
    assert ab.rx.poll() is None
    fab.progress()
    assert ab.rx.payload(ab.rx.poll()) == b"x" * 40


def test_payload_that_looks_like_a_flag_is_not_a_frame():
    fab, a, b, ab, _ = make_ring(chunk_size=64)
    fake = oracle_seq_flag(0).to_bytes(4, "little") * 10
    # plant the would-be flag everywhere in the receiver's slot by hand
    b.write(ab.rx.data.base, fake[:64 - 24] + bytes(24))
    assert ab.rx.poll() is None
    ab.tx.sender_post_frame(fake)
    fab.progress()
    assert ab.rx.payload(ab.rx.poll()) == fake


def test_consume_is_fifo_and_not_repeatable():
    fab, a, b, ab, _ = make_ring()
    for i in range(3):
        ab.tx.sender_post_frame(bytes([i]))
    drain(fab, ab)
    first = ab.rx.poll()
    ab.rx.consume(first)
    with pytest.raises(RingError):
        ab.rx.consume(first)
    assert ab.rx.payload(ab.rx.poll()) == b"\x01"
    assert ab.rx.tail == 1


def test_basic_tail_write_after_every_consume():
    fab, a, b, ab, _ = make_ring(mode=PointerMode.BASIC)
    for i in range(5):
        ab.tx.sender_post_frame(bytes([i]))
        drain(fab, ab)
    for _ in range(5):
        ab.rx.consume(ab.rx.poll())
        assert ab.rx.maybe_send_tail_update()
    drain(fab, ab)
    assert b.counters().rdma_writes == 5
    assert ab.free_chunks() == 8


def test_piggyback_tail_rides_reverse_frames():
    fab, a, b, ab, ba = make_ring()
    for _ in range(20):
        ab.tx.sender_post_frame(b"ping", tail32=ba.rx.take_tail32())
        drain(fab, ab, ba)
        f = ab.rx.poll()
        ba.tx.apply_tail32(f.tail32)
        ab.rx.consume(f)
        assert not ab.rx.maybe_send_tail_update(outbound=True)
        ba.tx.sender_post_frame(b"pong", tail32=ab.rx.take_tail32())
        drain(fab, ab, ba)
        f = ba.rx.poll()
        ab.tx.apply_tail32(f.tail32)
        ba.rx.consume(f)
        assert not ba.rx.maybe_send_tail_update(outbound=True)
    assert ab.rx.tail_writes == ba.rx.tail_writes == 0
    assert a.counters().rdma_writes == b.counters().rdma_writes == 20
    assert ab.free_chunks() == 8 and ba.free_chunks() == 7


@pytest.mark.parametrize("num_chunks,threshold", [(8, 0.25), (8, 0.5), (4, 0.25), (16, 0.1), (2, 0.75)])
def test_tail_batch_matches_oracle(num_chunks, threshold):
    assert RingConfig(num_chunks, 64, threshold).tail_batch == tail_batch(num_chunks, threshold)


def _flood(num_chunks, threshold, frames, rng=None, torn=False, payload_size=8):
    """Drive a one-directional flood, returns the ring and the received payloads."""
    fab, a, b, ab, _ = make_ring(num_chunks=num_chunks, threshold=threshold, torn=torn,
                                 chunk_size=64 + ((payload_size + 7) & ~7))
    sent = 0
    got = []
    while len(got) < frames:
        choice = rng.random() if rng else 0.0
        if sent < frames and choice < 0.4:
            if ab.tx.sender_post_frame(sent.to_bytes(4, "little") * (payload_size // 4)):
                sent += 1
                continue
        if choice < 0.8:
            f = ab.rx.poll()
            if f is not None:
                got.append(int.from_bytes(ab.rx.payload(f)[:4], "little"))
                ab.rx.consume(f)
                ab.rx.maybe_send_tail_update()
                continue
        for end in (a, b):
            for c in end.poll_cq(64):
                assert ab.tx.handle_completion(c) or ab.rx.handle_completion(c)
        if not fab.progress() and sent < frames and not rng:
            assert ab.tx.sender_post_frame(sent.to_bytes(4, "little") * (payload_size // 4))
            sent += 1
    return ab, got


def test_flood_tail_writes_equal_brute_force_oracle():
    ab, got = _flood(8, 0.25, 100)
    expected, _ = flood_tail_writes(100, 8, 0.25)
    assert got == list(range(100))
    assert ab.rx.tail_writes == expected == 16


@pytest.mark.parametrize("seed", range(5))
def test_oracle_count_does_not_depend_on_schedule(seed):
    writes, peak = flood_tail_writes(100, 8, 0.25, seed=seed)
    assert writes == 16 and peak <= 8


@pytest.mark.parametrize("num_chunks", [2, 3, 5, 8])
@pytest.mark.parametrize("torn", [False, True])
def test_random_schedules_never_overwrite_unconsumed_slots(num_chunks, torn):
    rng = random.Random(num_chunks * 31 + torn)
    ab, got = _flood(num_chunks, rng.choice([0.1, 0.25, 0.5]), 1300, rng=rng, torn=torn)
    # an overwritten slot would surface as a skipped or repeated sequence number
    assert got == list(range(1300))


def test_replica_never_leads_master():
    fab, a, b, ab, _ = make_ring()
    for _ in range(6):
        ab.tx.sender_post_frame(b"z")
    drain(fab, ab)
    for _ in range(6):
        ab.rx.consume(ab.rx.poll())
    ab.tx.apply_tail32(100)  # bogus value beyond head is ignored
    assert ab.tx.tail_replica == 0
    ab.rx.maybe_send_tail_update()
    drain(fab, ab)
    ab.tx.refresh_tail()
    assert ab.tx.tail_replica == ab.rx.tail == 6
