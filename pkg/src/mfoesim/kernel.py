"""Kernel-side model: processes and their address spaces, table setup and
teardown, the background refill machinery, deferred bookkeeping, exit
cleanup, and the software-emulated consume path."""
from __future__ import annotations

import math
import random
import time
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .params import LatencySampler, ModelParameters
from .prealloc import (
    CR9_DISABLED,
    Cr9Register,
    EntryState,
    HarvestRecord,
    PreallocTable,
    ProduceStatus,
)
from .vm import PAGE_SIZE, FrameAllocator, OutOfMemory, PageTable

NS_PER_S = 1_000_000_000

# Where anonymous regions get their addresses from; bump-allocated upward
# with a one-page guard gap between regions.
REGION_BASE_VA = 0x5000_0000


class MfoeSeStatus(Enum):
    OK = "ok"
    NO_MFOE_VMA = "no_mfoe_vma"
    NOT_MFOEABLE = "not_mfoeable"
    ALREADY_MAPPED = "already_mapped"
    TABLE_EMPTY = "table_empty"


@dataclass
class VMA:
    start: int
    end: int
    writable: bool = True
    vm_mfoe: bool = False

    def contains(self, va: int) -> bool:
        return self.start <= va < self.end

    def pages(self) -> int:
        return (self.end - self.start) // PAGE_SIZE


@dataclass
class SegvEvent:
    tgid: int
    va: int
    when: int = 0


@dataclass
class ProtectionFaultEvent:
    tgid: int
    va: int
    when: int = 0


class ProcessModel:
    """One address space plus the counters the kernel keeps for it."""

    def __init__(self, tgid: int, quota_frames: Optional[int] = None):
        if not 0 < tgid < (1 << 16):
            raise ValueError("tgid must fit the 16-bit table field")
        self.tgid = tgid
        self.page_table = PageTable()
        self.vmas: list[VMA] = []
        self.mfoe_enabled = False
        self.allocated_pages = 0
        self.quota_frames = quota_frames
        self.next_region_va = REGION_BASE_VA

    def find_vma(self, va: int) -> Optional[VMA]:
        for vma in self.vmas:
            if vma.contains(va):
                return vma
        return None


class BookkeepingLedger:
    """The per-fault kernel state that offloaded handling defers.

    apply() performs, in order: anon_vma setup, the mm counter bump, the
    reverse-map insert, the LRU append, and the memcg charge. The same
    routine serves the inline path and the deferred one, so runs are
    comparable record-for-record.
    """

    def __init__(self) -> None:
        self.mm_counter: Counter = Counter()
        self.anon_vma_ready: set[int] = set()
        self.rmap: dict[int, tuple[int, int]] = {}
        self.lru: list[int] = []
        self.cgroup_charged: Counter = Counter()

    def apply(self, tgid: int, va: int, pfn: int) -> None:
        self.anon_vma_ready.add(tgid)
        self.mm_counter[tgid] += 1
        if pfn in self.rmap:
            raise RuntimeError(f"frame {pfn} already reverse-mapped")
        self.rmap[pfn] = (tgid, va)
        self.lru.append(pfn)
        self.cgroup_charged[tgid] += 1

    def remove(self, pfn: int) -> None:
        """Reverse of apply(), run when a mapping is torn down.

        Every present page is booked by the time an exit reaches the
        unmap loop, so an unknown frame here is an accounting bug and
        raises. Freed frames must leave the reverse map or their reuse
        by a later process would collide with the stale entry.
        """
        tgid, _ = self.rmap.pop(pfn)
        self.lru.remove(pfn)
        self.mm_counter[tgid] -= 1
        if not self.mm_counter[tgid]:
            del self.mm_counter[tgid]
        self.cgroup_charged[tgid] -= 1
        if not self.cgroup_charged[tgid]:
            del self.cgroup_charged[tgid]

    def records(self) -> set[tuple[int, int, int]]:
        return {(tgid, va, pfn) for pfn, (tgid, va) in self.rmap.items()}

    def equivalent(self, other: "BookkeepingLedger") -> bool:
        return (
            self.records() == other.records()
            and self.mm_counter == other.mm_counter
            and self.cgroup_charged == other.cgroup_charged
            and set(self.lru) == set(other.lru)
        )


class InitFillTask:
    """Populates the per-core tables core 0 upward, one page per step."""

    def __init__(self, cores: int):
        self.cores = cores
        self.core = 0
        self.produced_in_core = 0
        self.done = cores == 0

    def step(self, kernel: "KernelModel") -> bool:
        """Produce one page; False once every core's pass has finished."""
        while not self.done:
            table = kernel.tables[self.core]
            if (
                self.produced_in_core >= table.capacity
                or table.entry_state(table.head_index) is not EntryState.EMPTY
            ):
                self.core += 1
                self.produced_in_core = 0
                if self.core >= self.cores:
                    self.done = True
                continue
            try:
                pfn = kernel.allocator.allocate(kernel.node_of_core(self.core))
            except OutOfMemory:
                self.done = True
                return False
            status = table.produce(pfn)
            assert status is ProduceStatus.PRODUCED
            self.produced_in_core += 1
            return True
        return False


class KernelModel:
    """System-wide kernel state: frame pool, per-core tables, processes."""

    def __init__(
        self,
        params: Optional[ModelParameters] = None,
        cores: int = 1,
        total_frames: int = 1 << 20,
        numa_nodes: int = 1,
        seed: int = 0,
        refresh_interval_ms: float = 2.0,
        resource_threshold: float = 0.8,
        allocator: Optional[FrameAllocator] = None,
    ):
        if cores < 1:
            raise ValueError("need at least one core")
        self.params = params or ModelParameters()
        self.params.validate()
        self.cores = cores
        self.numa_nodes = numa_nodes
        self.refresh_interval_ms = refresh_interval_ms
        self.resource_threshold = resource_threshold
        self.allocator = allocator or FrameAllocator(total_frames, numa_nodes)
        self.rng = random.Random(seed)
        self.procs: dict[int, ProcessModel] = {}
        self.ledger = BookkeepingLedger()

        self.tables: Optional[list[PreallocTable]] = None
        self.table_width = 0
        self.table_storage_frames: list[int] = []
        self._table_base_pfns: list[int] = []
        self.cr9: list[Cr9Register] = [CR9_DISABLED] * cores
        self.mfoe_active = False
        self.fill_task: Optional[InitFillTask] = None

        self.tick_index = 0
        self.pending_bit_clears: list[ProcessModel] = []
        self.segv_events: list[SegvEvent] = []
        self.protection_faults: list[ProtectionFaultEvent] = []
        self._next_tgid = 1000

        self._baseline = LatencySampler(
            self.params.baseline_fault_mean_cycles,
            self.params.baseline_fault_p95_cycles,
            self.params.baseline_fault_dist,
        )
        self._swemu = LatencySampler(
            self.params.sw_emulation_mean_ns,
            self.params.sw_emulation_p95_ns,
            self.params.baseline_fault_dist,
        )

    # process and region management

    def create_process(
        self, tgid: Optional[int] = None, quota_frames: Optional[int] = None
    ) -> ProcessModel:
        if tgid is None:
            tgid = self._next_tgid
            self._next_tgid += 1
        if tgid in self.procs:
            raise ValueError(f"tgid {tgid} already exists")
        proc = ProcessModel(tgid, quota_frames)
        self.procs[tgid] = proc
        return proc

    def region_create(self, proc: ProcessModel, length: int, writable: bool = True) -> VMA:
        if length < 0:
            raise ValueError("negative region length")
        pages = math.ceil(length / PAGE_SIZE)
        start = proc.next_region_va
        vma = VMA(start, start + pages * PAGE_SIZE, writable, vm_mfoe=proc.mfoe_enabled)
        proc.vmas.append(vma)
        proc.next_region_va = vma.end + PAGE_SIZE
        return vma

    def prefault_construct(
        self, proc: ProcessModel, vma: VMA, max_pages: Optional[int] = None
    ) -> int:
        """Build paths and stamp offload eligibility over vma's pages.

        Runs asynchronously in the real system, so callers may limit work
        with max_pages and resume later; already-stamped and already-
        present leaves are skipped, which also makes re-runs idempotent.
        Returns the number of leaves newly stamped.
        """
        if not vma.vm_mfoe:
            return 0
        stamped = 0
        for va in range(vma.start, vma.end, PAGE_SIZE):
            leaf = proc.page_table.construct_path(va)
            if leaf.present or leaf.mfoeable:
                continue
            leaf.stamp_prefault(proc.tgid, vma.writable)
            stamped += 1
            if max_pages is not None and stamped >= max_pages:
                break
        return stamped

    # enable / disable

    def mfoe_enable(self, proc: ProcessModel, preallocation_size: int = 256) -> None:
        """Opt proc in; on the first activation build and start filling tables.

        Table geometry is fixed by the first construction since boot;
        later calls reuse it. Tables start empty and fill in the
        background, so early faults can still miss.
        """
        if preallocation_size < 2:
            raise ValueError("preallocation_size must cover header plus one entry")
        proc.mfoe_enabled = True
        if self.tables is None:
            frames_per_table = math.ceil(preallocation_size * 16 / PAGE_SIZE)
            tables = []
            for core in range(self.cores):
                storage = [
                    self.allocator.allocate(self.node_of_core(core))
                    for _ in range(frames_per_table)
                ]
                self.table_storage_frames.extend(storage)
                tables.append(PreallocTable(preallocation_size))
                self._table_base_pfns.append(storage[0])
            self.tables = tables
            self.table_width = preallocation_size
        if not self.mfoe_active:
            self.mfoe_active = True
            self.cr9 = [
                Cr9Register(self._table_base_pfns[core], self.table_width, True)
                for core in range(self.cores)
            ]
            self.fill_task = InitFillTask(self.cores)

    def mfoe_disable(self, proc: ProcessModel) -> int:
        """Drop proc out; the last participant drains tables and clears CR9.

        Safe to call twice. Returns the number of frames returned to the
        free lists.
        """
        if not proc.mfoe_enabled:
            return 0
        proc.mfoe_enabled = False
        if any(p.mfoe_enabled for p in self.procs.values()):
            return 0
        self.mfoe_active = False
        self.fill_task = None
        self.cr9 = [CR9_DISABLED] * self.cores
        freed = 0
        if self.tables:
            for table in self.tables:
                for pfn in table.drain_valid():
                    self.allocator.free(pfn)
                    freed += 1
        return freed

    # fill and refill machinery

    def run_init_fill(self) -> int:
        """Complete the whole initialization fill synchronously."""
        if self.fill_task is None:
            return 0
        count = 0
        while self.fill_task.step(self):
            count += 1
        return count

    def budget_pages(self, interval_ms: Optional[float] = None) -> int:
        interval_ns = round((interval_ms or self.refresh_interval_ms) * 1_000_000)
        return interval_ns * self.params.background_throughput_pages_per_s // NS_PER_S

    def process_one_record(self, core: int) -> Optional[HarvestRecord]:
        """Handle the oldest consumed entry of one core's table, if any."""
        table = self.tables[core]
        self._acquire_cleanup_lock(table)
        try:
            return self._process_head_locked(core)
        finally:
            table.release_cleanup_lock()

    def postfault_tick(self, now: int = 0) -> int:
        """One deferred-processing pass: harvest, book, refill, re-check quotas.

        Visits cores round-robin with a rotating starting core; total work
        is capped at refresh_interval * background throughput, with the
        excess left for the next pass.
        """
        if self.tables is None:
            return 0
        self.apply_pending_bit_clears()
        start = self.tick_index % self.cores
        self.tick_index += 1
        budget = self.budget_pages()
        processed = 0
        for offset in range(self.cores):
            core = (start + offset) % self.cores
            table = self.tables[core]
            self._acquire_cleanup_lock(table)
            try:
                while processed < budget:
                    if self._process_head_locked(core) is None:
                        break
                    processed += 1
            finally:
                table.release_cleanup_lock()
            if processed >= budget:
                break
        for proc in list(self.procs.values()):
            self.resource_check(proc)
        return processed

    def _process_head_locked(self, core: int) -> Optional[HarvestRecord]:
        table = self.tables[core]
        head = table.head_index
        if table.entry_state(head) is not EntryState.USED:
            return None
        record = table.record_at(head)
        table.clear_entry(head)
        self.apply_bookkeeping(record.tgid, record.va, record.pfn)
        self._refill_slot(table, core, head)
        return record

    def _refill_slot(self, table: PreallocTable, core: int, index: int) -> None:
        """Re-stock one just-cleared slot, advancing head when it sits there."""
        pfn = None
        if self.mfoe_active:
            try:
                pfn = self.allocator.allocate(self.node_of_core(core))
            except OutOfMemory:
                pfn = None
        if index == table.head_index:
            if pfn is not None:
                status = table.produce(pfn)
                assert status is ProduceStatus.PRODUCED
            else:
                table.skip_head()
        elif pfn is not None:
            table.fill_entry(index, pfn)

    def error_cleanup(self, tgid: int) -> int:
        """Process every consumed entry a dying thread group left behind.

        Scans all cores' tables under the cleanup lock so nothing keeps a
        reference to the dead tgid; each matching record gets the same
        bookkeeping and refill treatment as the periodic pass.
        """
        if self.tables is None:
            return 0
        removed = 0
        for core, table in enumerate(self.tables):
            self._acquire_cleanup_lock(table)
            try:
                for i in table.data_indices():
                    if table.entry_state(i) is not EntryState.USED:
                        continue
                    record = table.record_at(i)
                    if record.tgid != tgid:
                        continue
                    table.clear_entry(i)
                    self.apply_bookkeeping(record.tgid, record.va, record.pfn)
                    self._refill_slot(table, core, i)
                    removed += 1
            finally:
                table.release_cleanup_lock()
        return removed

    def resource_check(self, proc: ProcessModel) -> bool:
        """Disable offloading for proc once it crosses its page quota.

        The eligibility bits of its untouched pages are cleared at the
        start of the next pass.
        """
        if not proc.mfoe_enabled:
            return False
        quota = proc.quota_frames or self.allocator.total_frames
        if proc.allocated_pages <= self.resource_threshold * quota:
            return False
        self.mfoe_disable(proc)
        self.pending_bit_clears.append(proc)
        return True

    def apply_pending_bit_clears(self) -> None:
        for proc in self.pending_bit_clears:
            for vma in proc.vmas:
                if not vma.vm_mfoe:
                    continue
                vma.vm_mfoe = False
                for va in range(vma.start, vma.end, PAGE_SIZE):
                    leaf = proc.page_table.walk(va)
                    if leaf is not None and leaf.mfoeable and not leaf.present:
                        leaf.clear()
        self.pending_bit_clears = []

    # fault-path services

    def apply_bookkeeping(self, tgid: int, va: int, pfn: int) -> None:
        self.ledger.apply(tgid, va, pfn)
        proc = self.procs.get(tgid)
        if proc is not None:
            proc.allocated_pages += 1

    def inline_install(self, proc: ProcessModel, core: int, va: int, writable: bool) -> int:
        """Allocate, map, and book one page on the spot (the slow path)."""
        leaf = proc.page_table.construct_path(va)
        pfn = self.allocator.allocate(self.node_of_core(core))
        leaf.install_frame(pfn, writable)
        self.apply_bookkeeping(proc.tgid, va, pfn)
        return pfn

    def sample_baseline_cycles(self) -> int:
        return self._baseline.sample_int(self.rng)

    def record_segv(self, tgid: int, va: int, when: int = 0) -> None:
        self.segv_events.append(SegvEvent(tgid, va, when))

    def record_protection_fault(self, tgid: int, va: int, when: int = 0) -> None:
        self.protection_faults.append(ProtectionFaultEvent(tgid, va, when))

    def mfoe_se(self, proc: ProcessModel, core: int, va: int) -> tuple[MfoeSeStatus, int]:
        """Software-emulated consume: same table protocol, no hardware walk.

        On success the page is mapped but the TLB is untouched, so the
        next touch misses the TLB and resolves through the walker. Errors
        charge nothing; the caller falls back to the ordinary fault path.
        """
        vma = proc.find_vma(va)
        if vma is None or not vma.vm_mfoe:
            return MfoeSeStatus.NO_MFOE_VMA, 0
        leaf = proc.page_table.walk(va)
        if leaf is None or not leaf.mfoeable:
            return MfoeSeStatus.NOT_MFOEABLE, 0
        if leaf.present:
            return MfoeSeStatus.ALREADY_MAPPED, 0
        if not leaf.try_lock():
            return MfoeSeStatus.ALREADY_MAPPED, 0
        try:
            if leaf.present:
                return MfoeSeStatus.ALREADY_MAPPED, 0
            pfn = self.tables[core].consume(va, proc.tgid) if self.mfoe_active else None
            if pfn is None:
                return MfoeSeStatus.TABLE_EMPTY, 0
            leaf.install_frame(pfn, vma.writable)
        finally:
            leaf.unlock()
        cycles = self.params.ns_to_cycles(self._swemu.sample(self.rng))
        return MfoeSeStatus.OK, max(1, cycles)

    # teardown

    def terminate(self, proc: ProcessModel) -> int:
        """Full exit path: cleanup, unmap everything, then disable."""
        self.error_cleanup(proc.tgid)
        freed = 0
        for _, leaf in proc.page_table.iter_leaves():
            if leaf.present:
                self.allocator.free(leaf.pfn_or_tgid)
                self.ledger.remove(leaf.pfn_or_tgid)
                freed += 1
            leaf.clear()
        self.mfoe_disable(proc)
        del self.procs[proc.tgid]
        return freed

    # helpers

    def node_of_core(self, core: int) -> int:
        return core % self.numa_nodes

    def _acquire_cleanup_lock(self, table: PreallocTable) -> None:
        while not table.try_cleanup_lock():
            time.sleep(0)

    def frame_census(self) -> dict[str, int]:
        """Partition of every frame; free + outstanding always totals the pool."""
        table_valid = sum(t.valid_count() for t in self.tables) if self.tables else 0
        mapped = sum(
            1
            for proc in self.procs.values()
            for _, leaf in proc.page_table.iter_leaves()
            if leaf.present
        )
        return {
            "free": self.allocator.free_count(),
            "table_valid": table_valid,
            "table_storage": len(self.table_storage_frames),
            "mapped": mapped,
            "outstanding": self.allocator.outstanding(),
            "total": self.allocator.total_frames,
        }
