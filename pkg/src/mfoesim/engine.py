"""The hardware fault path: TLB, page walk dispatch, table consumption
under the per-entry bit lock, and fallback into the kernel model.

The whole minor-fault protocol lives in PteFaultSm, a small-step state
machine. The serialized simulator drives each machine to completion in
one call; the concurrency tests instead interleave step() calls from
several machines aimed at the same leaf to exercise the lock protocol.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .kernel import KernelModel, ProcessModel, VMA
from .vm import check_canonical, PAGE_SHIFT


class OutcomeKind(Enum):
    TLB_HIT = "tlb_hit"
    WALK_HIT = "walk_hit"
    MFOE_HIT = "mfoe_hit"
    MFOE_MISS = "mfoe_miss"
    KERNEL_FAULT = "kernel_fault"
    LOCK_WAIT = "lock_wait"
    SEGV = "segv"
    PROTECTION_FAULT = "protection_fault"


@dataclass
class FaultOutcome:
    kind: OutcomeKind
    cycles: int
    penalty_cycles: int = 0
    kernel_cycles: int = 0
    stall_cycles: int = 0
    pfn: Optional[int] = None


class Tlb:
    """Fully associative, LRU, tagged by (tgid, vpn). Holds only present
    translations."""

    def __init__(self, entries: int = 64):
        if entries < 1:
            raise ValueError("TLB needs at least one entry")
        self.entries = entries
        self._map: OrderedDict[tuple[int, int], tuple[int, bool]] = OrderedDict()

    def lookup(self, tgid: int, vpn: int) -> Optional[tuple[int, bool]]:
        key = (tgid, vpn)
        hit = self._map.get(key)
        if hit is not None:
            self._map.move_to_end(key)
        return hit

    def insert(self, tgid: int, vpn: int, pfn: int, rw: bool) -> None:
        key = (tgid, vpn)
        if key in self._map:
            self._map.move_to_end(key)
        elif len(self._map) >= self.entries:
            self._map.popitem(last=False)
        self._map[key] = (pfn, rw)

    def invalidate_asid(self, tgid: int) -> None:
        for key in [k for k in self._map if k[0] == tgid]:
            del self._map[key]

    def __len__(self) -> int:
        return len(self._map)

    def snapshot(self) -> dict[tuple[int, int], tuple[int, bool]]:
        return dict(self._map)


class SmState(Enum):
    CHECK = "check"
    TRY_LOCK = "try_lock"
    RECHECK = "recheck"
    CONSUME = "consume"
    INSTALL = "install"
    UNLOCK_HIT = "unlock_hit"
    UNLOCK_MISS = "unlock_miss"
    SPIN = "spin"
    K_LOCK = "k_lock"
    K_RECHECK = "k_recheck"
    K_WORK = "k_work"
    K_UNLOCK = "k_unlock"
    K_SPIN = "k_spin"
    DONE = "done"


class SmResult(Enum):
    MFOE_HIT = "mfoe_hit"
    MFOE_MISS_KERNEL = "mfoe_miss_kernel"
    KERNEL = "kernel"
    REUSE = "reuse"  # another handler installed the page first
    WAITED = "waited"  # spun on the lock, then reused the installed page


class PteFaultSm:
    """One core's in-flight minor-fault handler.

    Protocol on an offload-eligible leaf: read the entry; acquire the bit
    lock with an atomic read-modify-write; re-check present under the
    lock (someone may have resolved the fault between the read and the
    acquire); consume a frame from this core's table; write the new entry
    and release. An empty table releases the lock and retries the same
    dance as the ordinary kernel handler, which allocates inline.

    A handler that loses the lock race busy-waits until the lock is clear
    and present is set, then reuses the installed translation. Each
    step() is one atomic action; runnable() gates the waiting states so a
    scheduler only advances machines that can make progress.
    """

    def __init__(
        self,
        kernel: KernelModel,
        proc: ProcessModel,
        core: int,
        va: int,
        vma: VMA,
        mfoe_eligible: bool,
    ):
        self.kernel = kernel
        self.proc = proc
        self.core = core
        self.va = va
        self.vma = vma
        self.mfoe_eligible = mfoe_eligible
        self.leaf = proc.page_table.walk(va)
        self.state = SmState.CHECK
        self.result: Optional[SmResult] = None
        self.pfn: Optional[int] = None
        self.consumed_from_table = False
        self.allocated_inline = False
        self.mfoe_missed = False

    @property
    def done(self) -> bool:
        return self.state is SmState.DONE

    def runnable(self) -> bool:
        if self.done:
            return False
        if self.state in (SmState.SPIN, SmState.K_SPIN):
            return self.leaf is not None and not self.leaf.locked and self.leaf.present
        return True

    def step(self) -> None:
        if self.done:
            raise RuntimeError("stepping a finished handler")
        handler = getattr(self, f"_do_{self.state.value}")
        handler()

    def run(self) -> SmResult:
        """Drive to completion; callers must guarantee no concurrent owner."""
        while not self.done:
            if not self.runnable():
                raise RuntimeError("handler blocked with no concurrent progress")
            self.step()
        return self.result

    def _finish(self, result: SmResult) -> None:
        self.result = result
        self.state = SmState.DONE

    def _do_check(self) -> None:
        leaf = self.leaf
        if leaf is not None and leaf.present:
            self.pfn = leaf.pfn_or_tgid
            self._finish(SmResult.REUSE)
            return
        if self.mfoe_eligible and leaf is not None and leaf.mfoeable:
            self.state = SmState.TRY_LOCK
        else:
            self.state = SmState.K_LOCK

    def _do_try_lock(self) -> None:
        if self.leaf.try_lock():
            self.state = SmState.RECHECK
        else:
            self.state = SmState.SPIN

    def _do_recheck(self) -> None:
        if self.leaf.present:
            # Resolved while we raced for the lock; nothing to consume.
            self.pfn = self.leaf.pfn_or_tgid
            self.leaf.unlock()
            self._finish(SmResult.REUSE)
        else:
            self.state = SmState.CONSUME

    def _do_consume(self) -> None:
        table = self.kernel.tables[self.core]
        pfn = table.consume(self.va, self.proc.tgid)
        if pfn is None:
            self.state = SmState.UNLOCK_MISS
        else:
            self.pfn = pfn
            self.consumed_from_table = True
            self.state = SmState.INSTALL

    def _do_install(self) -> None:
        self.leaf.install_frame(self.pfn, self.vma.writable)
        self.state = SmState.UNLOCK_HIT

    def _do_unlock_hit(self) -> None:
        self.leaf.unlock()
        self._finish(SmResult.MFOE_HIT)

    def _do_unlock_miss(self) -> None:
        self.leaf.unlock()
        self.mfoe_missed = True
        self.state = SmState.K_LOCK

    def _do_k_lock(self) -> None:
        if self.leaf is None:
            self.leaf = self.proc.page_table.construct_path(self.va)
        if self.leaf.try_lock():
            self.state = SmState.K_RECHECK
        else:
            self.state = SmState.K_SPIN

    def _do_k_recheck(self) -> None:
        if self.leaf.present:
            self.pfn = self.leaf.pfn_or_tgid
            self.leaf.unlock()
            self._finish(SmResult.REUSE)
        else:
            self.state = SmState.K_WORK

    def _do_k_work(self) -> None:
        self.pfn = self.kernel.inline_install(
            self.proc, self.core, self.va, self.vma.writable
        )
        self.allocated_inline = True
        self.state = SmState.K_UNLOCK

    def _do_k_unlock(self) -> None:
        self.leaf.unlock()
        self._finish(SmResult.MFOE_MISS_KERNEL if self.mfoe_missed else SmResult.KERNEL)

    def _do_spin(self) -> None:
        # runnable() admitted us: lock clear, present set.
        self.pfn = self.leaf.pfn_or_tgid
        self._finish(SmResult.WAITED)

    def _do_k_spin(self) -> None:
        self.pfn = self.leaf.pfn_or_tgid
        self._finish(SmResult.WAITED)


class MfoeEngine:
    """Serialized front end: one access() call resolves one memory touch."""

    def __init__(self, kernel: KernelModel, tlb_entries: int = 64):
        self.kernel = kernel
        self.params = kernel.params
        self.tlb = Tlb(tlb_entries)
        self.core_proc: dict[int, ProcessModel] = {}
        # Page key -> (handler completion time, core); models the window
        # in which a second core's fault on the same page must wait.
        self._inflight: dict[tuple[int, int], tuple[int, int]] = {}

    def bind(self, core: int, proc: ProcessModel) -> None:
        self.core_proc[core] = proc

    def on_process_exit(self, tgid: int) -> None:
        self.tlb.invalidate_asid(tgid)
        for key in [k for k in self._inflight if k[0] == tgid]:
            del self._inflight[key]
        for core in [c for c, p in self.core_proc.items() if p.tgid == tgid]:
            del self.core_proc[core]

    def access(self, core: int, va: int, is_write: bool = False, now: int = 0) -> FaultOutcome:
        """Resolve one touch of va from core at time now (cycles).

        Dispatch: TLB, then the walker, then either the offload engine or
        the kernel. Any path that resolves the page leaves the
        translation in the TLB.
        """
        check_canonical(va)
        proc = self.core_proc[core]
        vpn = va >> PAGE_SHIFT
        key = (proc.tgid, vpn)

        tlb_hit = self.tlb.lookup(proc.tgid, vpn)
        if tlb_hit is not None:
            pfn, rw = tlb_hit
            if is_write and not rw:
                self.kernel.record_protection_fault(proc.tgid, va, now)
                return FaultOutcome(OutcomeKind.PROTECTION_FAULT, 0, pfn=pfn)
            return FaultOutcome(OutcomeKind.TLB_HIT, 0, pfn=pfn)

        inflight = self._inflight.get(key)
        if inflight is not None and inflight[0] > now:
            # The other core's handler still holds the entry lock; stall
            # for its remaining service time, then use its translation.
            stall = inflight[0] - now
            leaf = proc.page_table.walk(va)
            assert leaf is not None and leaf.present
            self.tlb.insert(proc.tgid, vpn, leaf.pfn_or_tgid, leaf.rw)
            return FaultOutcome(
                OutcomeKind.LOCK_WAIT, stall, stall_cycles=stall, pfn=leaf.pfn_or_tgid
            )

        leaf = proc.page_table.walk(va)
        if leaf is not None and leaf.present:
            if is_write and not leaf.rw:
                self.kernel.record_protection_fault(proc.tgid, va, now)
                return FaultOutcome(OutcomeKind.PROTECTION_FAULT, 0, pfn=leaf.pfn_or_tgid)
            self.tlb.insert(proc.tgid, vpn, leaf.pfn_or_tgid, leaf.rw)
            return FaultOutcome(OutcomeKind.WALK_HIT, 0, pfn=leaf.pfn_or_tgid)

        vma = proc.find_vma(va)
        if vma is None:
            self.kernel.record_segv(proc.tgid, va, now)
            return FaultOutcome(OutcomeKind.SEGV, 0)

        eligible = self.kernel.cr9[core].mfoe_enable
        sm = PteFaultSm(self.kernel, proc, core, va, vma, eligible)
        result = sm.run()

        if result is SmResult.MFOE_HIT:
            cycles = self.params.mfoe_hit_cycles
            outcome = FaultOutcome(OutcomeKind.MFOE_HIT, cycles, pfn=sm.pfn)
        elif result is SmResult.MFOE_MISS_KERNEL:
            kernel_cycles = self.kernel.sample_baseline_cycles()
            penalty = self.params.mfoe_miss_penalty_cycles
            outcome = FaultOutcome(
                OutcomeKind.MFOE_MISS,
                penalty + kernel_cycles,
                penalty_cycles=penalty,
                kernel_cycles=kernel_cycles,
                pfn=sm.pfn,
            )
        elif result is SmResult.KERNEL:
            kernel_cycles = self.kernel.sample_baseline_cycles()
            outcome = FaultOutcome(
                OutcomeKind.KERNEL_FAULT,
                kernel_cycles,
                kernel_cycles=kernel_cycles,
                pfn=sm.pfn,
            )
        else:
            # REUSE/WAITED cannot happen in serialized use: the in-flight
            # window is checked above before a handler starts.
            raise AssertionError(f"unexpected serialized handler result {result}")

        self.tlb.insert(proc.tgid, vpn, sm.pfn, sm.leaf.rw)
        self._inflight[key] = (now + outcome.cycles, core)
        return outcome
