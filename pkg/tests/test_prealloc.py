"""Ring table state machine, wire layout, and the control register.

The serialization golden below is computed with literal shift arithmetic
rather than the module's own packing helper, so a layout regression cannot
hide behind its own encoder.
"""
import random
import struct
import threading
import time

import pytest

from mfoesim.prealloc import (
    CR9_DISABLED,
    Cr9Register,
    EntryState,
    HarvestRecord,
    PreallocTable,
    ProduceStatus,
)


def full_table(n=5, first_pfn=100):
    t = PreallocTable(n)
    for k in range(t.capacity):
        assert t.produce(first_pfn + k) is ProduceStatus.PRODUCED
    return t


def test_geometry_validation():
    with pytest.raises(ValueError):
        PreallocTable(1)  # header only, no data slot
    with pytest.raises(ValueError):
        PreallocTable(1 << 16)  # would not fit the register field
    assert PreallocTable((1 << 16) - 1).capacity == (1 << 16) - 2
    assert PreallocTable(2).capacity == 1


def test_produce_until_full():
    t = PreallocTable(5)
    heads = []
    for k in range(4):
        assert t.produce(k) is ProduceStatus.PRODUCED
        heads.append(t.head_index)
    assert heads == [2, 3, 4, 1], "head wraps past the last slot back to 1"
    assert t.produce(99) is ProduceStatus.FULL
    assert t.valid_count() == 4


def test_consume_empty_returns_none():
    t = PreallocTable(5)
    assert t.consume(0x1000, 7) is None


def test_fifo_order():
    t = full_table()
    assert [t.consume(0x1000 * i, 9) for i in range(4)] == [100, 101, 102, 103]
    assert t.consume(0x9000, 9) is None
    assert t.used_count() == 4 and t.valid_count() == 0


def test_consume_leaves_used_record():
    t = full_table()
    pfn = t.consume(0x5000_0000, 77)
    assert pfn == 100
    assert t.tail_index == 2
    assert t.entry_state(1) is EntryState.USED
    assert t.record_at(1) == HarvestRecord(va=0x5000_0000, tgid=77, pfn=100)


def test_produce_onto_used_slot_wants_harvest():
    t = full_table()
    for i in range(4):
        t.consume(0x1000 * i, 5)
    assert t.produce(200) is ProduceStatus.NEEDS_HARVEST


def test_harvest_clears_used_run_without_moving_head():
    t = full_table()
    for i in range(3):
        t.consume(0x2000 + 0x1000 * i, 42)
    assert t.head_index == 1
    records = t.harvest()
    assert records == [
        HarvestRecord(va=0x2000, tgid=42, pfn=100),
        HarvestRecord(va=0x3000, tgid=42, pfn=101),
        HarvestRecord(va=0x4000, tgid=42, pfn=102),
    ]
    assert t.head_index == 1, "produce refills the freed slots itself"
    assert [t.entry_state(i) for i in t.data_indices()] == [
        EntryState.EMPTY,
        EntryState.EMPTY,
        EntryState.EMPTY,
        EntryState.VALID,
    ]
    for k in range(3):
        assert t.produce(300 + k) is ProduceStatus.PRODUCED
    assert t.head_index == 4
    assert t.produce(999) is ProduceStatus.FULL
    # the surviving old frame is still next in line
    assert t.consume(0x7000, 42) == 103


def test_harvest_record_cap():
    t = full_table()
    for i in range(4):
        t.consume(0x1000 * i, 5)
    assert len(t.harvest(max_records=2)) == 2
    assert t.used_count() == 2
    # head has not moved, so a fresh scan stops at the emptied slot;
    # the remaining records come into reach once produce walks head on.
    assert t.harvest() == []
    assert t.produce(500) is ProduceStatus.PRODUCED
    assert t.produce(501) is ProduceStatus.PRODUCED
    assert [r.pfn for r in t.harvest()] == [102, 103]


def test_random_traffic_keeps_fifo_and_counts():
    rng = random.Random(3)
    t = PreallocTable(9)
    produced, consumed, harvested = [], [], []
    next_pfn = 1
    for _ in range(3000):
        op = rng.random()
        if op < 0.45:
            status = t.produce(next_pfn)
            if status is ProduceStatus.PRODUCED:
                produced.append(next_pfn)
                next_pfn += 1
            elif status is ProduceStatus.NEEDS_HARVEST:
                harvested.extend(t.harvest())
        elif op < 0.9:
            pfn = t.consume(rng.randrange(1 << 30) << 12, 8)
            if pfn is not None:
                consumed.append(pfn)
        else:
            harvested.extend(t.harvest())
        assert t.valid_count() + t.used_count() <= t.capacity
    assert consumed == produced[: len(consumed)], "strict FIFO across wraps"
    assert {r.pfn for r in harvested} <= set(consumed)
    assert len({r.pfn for r in harvested}) == len(harvested)


def test_fill_entry_and_skip_head():
    t = full_table()
    t.consume(0x1000, 5)
    t.harvest()
    t.fill_entry(1, 500)
    assert t.entry_state(1) is EntryState.VALID
    with pytest.raises(ValueError):
        t.fill_entry(1, 501)  # occupied now
    with pytest.raises(ValueError):
        t.skip_head()  # head slot holds a frame
    t2 = PreallocTable(5)
    t2.skip_head()
    assert t2.head_index == 2


def test_drain_valid_empties_table():
    t = full_table()
    t.consume(0x1000, 5)
    assert t.drain_valid() == [101, 102, 103]
    assert t.valid_count() == 0
    assert t.used_count() == 1, "drain leaves used records for bookkeeping"


def test_entry_index_bounds():
    t = PreallocTable(5)
    for bad in (0, 5, -1):
        with pytest.raises(IndexError):
            t.entry_state(bad)
    with pytest.raises(ValueError):
        t.record_at(1)  # empty, not used


def test_serialized_layout_golden():
    t = PreallocTable(4)
    for pfn in (100, 200, 300):
        t.produce(pfn)
    t.consume(0x7000, 5)
    expected = b"".join(
        [
            struct.pack("<IIII", 1, 2, 4, 0),  # head, tail, slots, locks
            struct.pack("<QQ", 0x7000, (100 << 30) | (5 << 14) | 0b10),
            struct.pack("<QQ", 0, (200 << 30) | 0b01),
            struct.pack("<QQ", 0, (300 << 30) | 0b01),
        ]
    )
    blob = t.to_bytes()
    assert len(blob) == 16 * t.num_entries
    assert blob == expected


def test_serialization_round_trip():
    t = full_table(7, first_pfn=9000)
    t.consume(0xAAAA000, 123)
    t.consume(0xBBBB000, 123)
    t.try_cleanup_lock()
    copy = PreallocTable.from_bytes(t.to_bytes())
    assert copy.head_index == t.head_index
    assert copy.tail_index == t.tail_index
    assert copy.locks == t.locks
    assert list(copy.iter_entries()) == list(t.iter_entries())
    assert copy.to_bytes() == t.to_bytes()


def test_from_bytes_rejects_bad_blobs():
    t = full_table()
    blob = t.to_bytes()
    with pytest.raises(ValueError):
        PreallocTable.from_bytes(blob[:24])
    with pytest.raises(ValueError):
        PreallocTable.from_bytes(blob[:16])  # header alone
    forged = struct.pack("<IIII", 1, 1, 9, 0) + blob[16:]
    with pytest.raises(ValueError):
        PreallocTable.from_bytes(forged)


def test_cleanup_lock_is_test_and_set():
    t = PreallocTable(5)
    assert t.try_cleanup_lock()
    assert not t.try_cleanup_lock()
    t.release_cleanup_lock()
    assert t.try_cleanup_lock()


def test_cleanup_lock_mutual_exclusion_across_threads():
    t = PreallocTable(5)
    inside = []
    errors = []

    def worker():
        acquired = 0
        while acquired < 200:
            if t.try_cleanup_lock():
                inside.append(1)
                if len(inside) > 1:
                    errors.append("two holders")
                inside.pop()
                t.release_cleanup_lock()
                acquired += 1

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not errors


def test_spsc_streams_frames_without_loss():
    # sleep(0) on the blocked side hands the interpreter over instead of
    # burning a whole switch interval spinning
    t = PreallocTable(1024)
    total = 20_000
    received = []

    def producer():
        pfn = 0
        while pfn < total:
            status = t.produce(pfn)
            if status is ProduceStatus.PRODUCED:
                pfn += 1
            elif status is ProduceStatus.NEEDS_HARVEST:
                t.harvest()
            else:
                time.sleep(0)

    def consumer():
        while len(received) < total:
            got = t.consume(0x1000 + len(received) * 0x1000, 6)
            if got is None:
                time.sleep(0)
            else:
                received.append(got)

    pt = threading.Thread(target=producer)
    ct = threading.Thread(target=consumer)
    pt.start()
    ct.start()
    pt.join()
    ct.join()
    assert received == list(range(total))


def test_cr9_packing():
    reg = Cr9Register(table_pfn=3, num_entries=256, mfoe_enable=True)
    # independent arithmetic: pfn low, entries at bit 34, enable at bit 50
    assert reg.pack() == 3 | (256 << 34) | (1 << 50)
    assert Cr9Register.unpack(reg.pack()) == reg
    assert CR9_DISABLED.pack() == 0
    assert not Cr9Register.unpack(0).mfoe_enable


def test_cr9_field_ranges():
    with pytest.raises(ValueError):
        Cr9Register(table_pfn=1 << 34).pack()
    with pytest.raises(ValueError):
        Cr9Register(num_entries=1 << 16).pack()
    wide = Cr9Register(table_pfn=(1 << 34) - 1, num_entries=(1 << 16) - 1, mfoe_enable=True)
    assert Cr9Register.unpack(wide.pack()) == wide
