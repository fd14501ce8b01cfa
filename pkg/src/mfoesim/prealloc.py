"""Per-core pre-allocation ring tables and the control register that
publishes them to the fault engine.

Layout (16 bytes per slot, little-endian):

  slot 0 header   4 x u32: head_index, tail_index, num_entries, locks
  slots 1..n-1    u64 word0 = faulting virtual address
                  u64 word1 = pfn[63:30] | tgid[29:14] | used[1] | valid[0]

num_entries counts all 16-byte slots including the header, so a table
serialized from num_entries slots is exactly 16 * num_entries bytes and
holds at most num_entries - 1 frames. head_index and tail_index are
1-based and wrap from num_entries - 1 back to 1.

Entry life cycle: empty (valid=0, used=0) -> valid (producer published a
frame) -> used (consumer took the frame, left va/tgid/pfn behind for the
deferred bookkeeping pass) -> empty again after harvest.

The produce and consume fast paths are single-producer single-consumer
and lock free: full/empty decisions come from the entry state bits, never
from comparing indices, and each transition is published with one word1
store after any other fields are in place. The header cleanup lock only
serializes the slow paths (harvest scans and exit cleanup).
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

ENTRY_BYTES = 16

W1_VALID = 1 << 0
W1_USED = 1 << 1
W1_TGID_SHIFT = 14
W1_TGID_MASK = (1 << 16) - 1
W1_PFN_SHIFT = 30
W1_PFN_MASK = (1 << 34) - 1

HEADER_CLEANUP_LOCK = 1 << 0

CR9_PFN_BITS = 34
CR9_ENTRIES_BITS = 16
CR9_ENTRIES_SHIFT = CR9_PFN_BITS
CR9_ENABLE_SHIFT = CR9_PFN_BITS + CR9_ENTRIES_BITS


class ProduceStatus(Enum):
    PRODUCED = "produced"
    FULL = "full"
    NEEDS_HARVEST = "needs_harvest"


class EntryState(Enum):
    EMPTY = "empty"
    VALID = "valid"
    USED = "used"


@dataclass(frozen=True)
class HarvestRecord:
    va: int
    tgid: int
    pfn: int


def pack_word1(pfn: int, tgid: int, used: bool, valid: bool) -> int:
    return (
        ((pfn & W1_PFN_MASK) << W1_PFN_SHIFT)
        | ((tgid & W1_TGID_MASK) << W1_TGID_SHIFT)
        | (W1_USED if used else 0)
        | (W1_VALID if valid else 0)
    )


class PreallocTable:
    """One core's frame ring. Producer refills at head, consumer takes at tail."""

    def __init__(self, num_entries: int):
        if num_entries < 2:
            raise ValueError("need the header slot plus at least one entry")
        if num_entries >= (1 << CR9_ENTRIES_BITS):
            raise ValueError("num_entries exceeds the 16-bit register field")
        self.num_entries = num_entries
        self.head_index = 1
        self.tail_index = 1
        self.locks = 0
        self._w0 = [0] * num_entries
        self._w1 = [0] * num_entries
        # Backs the test-and-set on the header lock bits only; the
        # produce/consume path never touches it.
        self._tas = threading.Lock()

    @property
    def capacity(self) -> int:
        return self.num_entries - 1

    def _next(self, index: int) -> int:
        return 1 if index == self.num_entries - 1 else index + 1

    # producer side

    def produce(self, pfn: int) -> ProduceStatus:
        """Publish one frame at head. Only the refill thread calls this."""
        i = self.head_index
        w1 = self._w1[i]
        if w1 & W1_VALID:
            return ProduceStatus.FULL
        if w1 & W1_USED:
            return ProduceStatus.NEEDS_HARVEST
        self._w1[i] = pack_word1(pfn, 0, used=False, valid=True)
        self.head_index = self._next(i)
        return ProduceStatus.PRODUCED

    def harvest(self, max_records: Optional[int] = None) -> list[HarvestRecord]:
        """Collect used entries starting at head, clearing them to empty.

        Does not advance head: the caller refills the freed slots with
        produce, which walks head forward over them. Caller must hold the
        cleanup lock or be the sole post-fault thread.
        """
        out: list[HarvestRecord] = []
        i = self.head_index
        for _ in range(self.capacity):
            if max_records is not None and len(out) >= max_records:
                break
            w1 = self._w1[i]
            if not w1 & W1_USED:
                break
            out.append(self._record_at(i, w1))
            self._w1[i] = 0
            self._w0[i] = 0
            i = self._next(i)
        return out

    # consumer side

    def consume(self, va: int, tgid: int) -> Optional[int]:
        """Take the frame at tail, leaving a used record of (va, tgid, pfn).

        Returns the frame number, or None when the tail entry holds no
        valid frame. word0 is written before the word1 store that flips
        valid to used, so a torn read on the producer side never sees a
        used entry with a stale address.
        """
        i = self.tail_index
        w1 = self._w1[i]
        if not w1 & W1_VALID:
            return None
        pfn = (w1 >> W1_PFN_SHIFT) & W1_PFN_MASK
        self._w0[i] = va
        self._w1[i] = pack_word1(pfn, tgid, used=True, valid=False)
        self.tail_index = self._next(i)
        return pfn

    # slow-path primitives (cleanup lock held)

    def try_cleanup_lock(self) -> bool:
        with self._tas:
            if self.locks & HEADER_CLEANUP_LOCK:
                return False
            self.locks |= HEADER_CLEANUP_LOCK
            return True

    def release_cleanup_lock(self) -> None:
        with self._tas:
            self.locks &= ~HEADER_CLEANUP_LOCK

    def entry_state(self, index: int) -> EntryState:
        w1 = self._w1[self._check_index(index)]
        if w1 & W1_VALID:
            return EntryState.VALID
        if w1 & W1_USED:
            return EntryState.USED
        return EntryState.EMPTY

    def record_at(self, index: int) -> HarvestRecord:
        i = self._check_index(index)
        w1 = self._w1[i]
        if not w1 & W1_USED:
            raise ValueError(f"entry {index} is not used")
        return self._record_at(i, w1)

    def clear_entry(self, index: int) -> None:
        i = self._check_index(index)
        self._w1[i] = 0
        self._w0[i] = 0

    def fill_entry(self, index: int, pfn: int) -> None:
        """Re-stock one emptied slot in place, off the head path."""
        i = self._check_index(index)
        if self._w1[i] & (W1_VALID | W1_USED):
            raise ValueError(f"entry {index} is not empty")
        self._w1[i] = pack_word1(pfn, 0, used=False, valid=True)

    def skip_head(self) -> None:
        """Advance head past an emptied slot when no frame is on hand."""
        if self._w1[self.head_index] & (W1_VALID | W1_USED):
            raise ValueError("head entry is not empty")
        self.head_index = self._next(self.head_index)

    def drain_valid(self) -> list[int]:
        """Clear every valid entry, returning their frames (disable path)."""
        pfns = []
        for i in self.data_indices():
            w1 = self._w1[i]
            if w1 & W1_VALID:
                pfns.append((w1 >> W1_PFN_SHIFT) & W1_PFN_MASK)
                self._w1[i] = 0
                self._w0[i] = 0
        return pfns

    def _check_index(self, index: int) -> int:
        if not 1 <= index <= self.capacity:
            raise IndexError(f"entry index {index} out of range")
        return index

    def _record_at(self, i: int, w1: int) -> HarvestRecord:
        return HarvestRecord(
            va=self._w0[i],
            tgid=(w1 >> W1_TGID_SHIFT) & W1_TGID_MASK,
            pfn=(w1 >> W1_PFN_SHIFT) & W1_PFN_MASK,
        )

    # inspection and serialization

    def data_indices(self) -> range:
        return range(1, self.num_entries)

    def iter_entries(self) -> Iterator[tuple[int, EntryState]]:
        for i in self.data_indices():
            yield i, self.entry_state(i)

    def valid_count(self) -> int:
        return sum(1 for w1 in self._w1[1:] if w1 & W1_VALID)

    def used_count(self) -> int:
        return sum(1 for w1 in self._w1[1:] if w1 & W1_USED)

    def valid_pfns(self) -> list[int]:
        return [
            (w1 >> W1_PFN_SHIFT) & W1_PFN_MASK
            for w1 in self._w1[1:]
            if w1 & W1_VALID
        ]

    def to_bytes(self) -> bytes:
        parts = [
            struct.pack(
                "<IIII", self.head_index, self.tail_index, self.num_entries, self.locks
            )
        ]
        for i in self.data_indices():
            parts.append(struct.pack("<QQ", self._w0[i], self._w1[i]))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PreallocTable":
        if len(blob) % ENTRY_BYTES or len(blob) < 2 * ENTRY_BYTES:
            raise ValueError("blob is not a whole number of 16-byte slots")
        head, tail, num_entries, locks = struct.unpack_from("<IIII", blob, 0)
        if num_entries * ENTRY_BYTES != len(blob):
            raise ValueError("header num_entries disagrees with blob size")
        table = cls(num_entries)
        table.head_index = head
        table.tail_index = tail
        table.locks = locks
        for i in table.data_indices():
            w0, w1 = struct.unpack_from("<QQ", blob, i * ENTRY_BYTES)
            table._w0[i] = w0
            table._w1[i] = w1
        return table


@dataclass(frozen=True)
class Cr9Register:
    """Per-core control register naming the table and switching the engine.

    Packed layout: table_pfn in bits 33..0, num_entries in bits 49..34,
    mfoe_enable in bit 50.
    """

    table_pfn: int = 0
    num_entries: int = 0
    mfoe_enable: bool = False

    def pack(self) -> int:
        if not 0 <= self.table_pfn < (1 << CR9_PFN_BITS):
            raise ValueError("table_pfn exceeds 34 bits")
        if not 0 <= self.num_entries < (1 << CR9_ENTRIES_BITS):
            raise ValueError("num_entries exceeds 16 bits")
        return (
            self.table_pfn
            | (self.num_entries << CR9_ENTRIES_SHIFT)
            | (int(self.mfoe_enable) << CR9_ENABLE_SHIFT)
        )

    @classmethod
    def unpack(cls, raw: int) -> "Cr9Register":
        return cls(
            table_pfn=raw & ((1 << CR9_PFN_BITS) - 1),
            num_entries=(raw >> CR9_ENTRIES_SHIFT) & ((1 << CR9_ENTRIES_BITS) - 1),
            mfoe_enable=bool((raw >> CR9_ENABLE_SHIFT) & 1),
        )


CR9_DISABLED = Cr9Register()
