"""Paged KV storage with per-(layer, head) block tables.

Entries live in fixed-size pages drawn from a shared pool. Each (layer, head)
owns an ordered block table of page ids forming a variable-length logical
sequence; eviction tombstones slots in place and returns fully emptied pages
to a LIFO free list, so logical order is preserved without contiguous storage.
`compact` repacks a head's survivors into the minimal number of pages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array, as_vector

DEFAULT_PAGE_SIZE = 16


class CacheCapacityError(RuntimeError):
    """The page allocator ran out of pages (max_pages reached)."""


@dataclass
class GatherResult:
    keys: Array        # [n, d] in birth order
    values: Array      # [n, d]
    births: np.ndarray
    betas: np.ndarray

    def __len__(self) -> int:
        return self.births.shape[0]


class _Page:
    __slots__ = ("keys", "values", "births", "betas", "occupied", "cursor")

    def __init__(self, page_size: int, dim: int):
        self.keys = np.zeros((page_size, dim))
        self.values = np.zeros((page_size, dim))
        self.births = np.zeros(page_size, dtype=np.int64)
        self.betas = np.zeros(page_size)
        self.occupied = np.zeros(page_size, dtype=bool)
        # next append slot; holes left by eviction are never refilled, which
        # keeps slot order identical to birth order
        self.cursor = 0

    def reset(self) -> None:
        self.occupied[:] = False
        self.cursor = 0

    @property
    def live(self) -> int:
        return int(self.occupied.sum())


class _BlockTable:
    __slots__ = ("page_ids", "logical_length", "slot_of_birth", "max_birth")

    def __init__(self):
        self.page_ids: list[int] = []
        self.logical_length = 0
        self.slot_of_birth: dict[int, tuple[int, int]] = {}
        self.max_birth = -1


class PagedKVStore:
    """Fixed-size pages, per-(layer, head) block tables, per-head logical lengths.

    Single writer per (layer, head); `gather` snapshots may be read concurrently.
    """

    def __init__(self, layers: int, heads: int, dim: int,
                 page_size: int = DEFAULT_PAGE_SIZE, max_pages: int | None = None):
        if layers < 1 or heads < 1 or dim < 1 or page_size < 1:
            raise ValueError("layers, heads, dim and page_size must be positive")
        self.layers = layers
        self.heads = heads
        self.dim = dim
        self.page_size = page_size
        self.max_pages = max_pages
        self._pages: dict[int, _Page] = {}
        self._free: list[int] = []      # LIFO reuse for reproducible traces
        self._next_page_id = 0
        self._tables = {(l, h): _BlockTable() for l in range(layers) for h in range(heads)}

    # -- allocation ---------------------------------------------------------

    def _alloc_page(self) -> int:
        if self._free:
            pid = self._free.pop()
            self._pages[pid].reset()
            return pid
        if self.max_pages is not None and len(self._pages) >= self.max_pages:
            raise CacheCapacityError(f"page pool exhausted (max_pages={self.max_pages})")
        pid = self._next_page_id
        self._next_page_id += 1
        self._pages[pid] = _Page(self.page_size, self.dim)
        return pid

    def _table(self, layer: int, head: int) -> _BlockTable:
        try:
            return self._tables[(layer, head)]
        except KeyError:
            raise IndexError(f"no such (layer, head): ({layer}, {head})") from None

    # -- operations ---------------------------------------------------------

    def append(self, layer: int, head: int, key, value, birth: int, beta: float) -> tuple[int, int]:
        """Append one entry at the tail of a head's logical sequence.

        Returns the (page_id, slot) address. Births must be strictly
        increasing per head and may never revive an evicted birth index.
        """
        table = self._table(layer, head)
        birth = int(birth)
        if birth <= table.max_birth:
            raise ValueError(f"birth {birth} not after previous max {table.max_birth}")
        k = as_vector(key, "key")
        v = as_vector(value, "value")
        if k.shape[0] != self.dim or v.shape[0] != self.dim:
            raise ValueError(f"entry dim must be {self.dim}")
        if not (0.0 <= beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")

        if table.page_ids and self._pages[table.page_ids[-1]].cursor < self.page_size:
            pid = table.page_ids[-1]
        else:
            pid = self._alloc_page()
            table.page_ids.append(pid)
        page = self._pages[pid]
        slot = page.cursor
        page.keys[slot] = k
        page.values[slot] = v
        page.births[slot] = birth
        page.betas[slot] = beta
        page.occupied[slot] = True
        page.cursor += 1
        table.logical_length += 1
        table.slot_of_birth[birth] = (pid, slot)
        table.max_birth = birth
        return pid, slot

    def evict(self, layer: int, head: int, births) -> None:
        """Tombstone the given birth indices; free pages that become empty."""
        table = self._table(layer, head)
        for birth in births:
            birth = int(birth)
            if birth not in table.slot_of_birth:
                raise KeyError(f"birth {birth} not present in ({layer}, {head})")
            pid, slot = table.slot_of_birth.pop(birth)
            page = self._pages[pid]
            page.occupied[slot] = False
            table.logical_length -= 1
            if page.live == 0:
                table.page_ids.remove(pid)
                self._free.append(pid)

    def gather(self, layer: int, head: int) -> GatherResult:
        """Copy out a head's live entries in logical (birth) order."""
        table = self._table(layer, head)
        if table.logical_length == 0:
            empty = np.zeros((0, self.dim))
            return GatherResult(empty, empty.copy(),
                                np.zeros(0, dtype=np.int64), np.zeros(0))
        keys, values, births, betas = [], [], [], []
        for pid in table.page_ids:
            page = self._pages[pid]
            mask = page.occupied
            keys.append(page.keys[mask])
            values.append(page.values[mask])
            births.append(page.births[mask])
            betas.append(page.betas[mask])
        return GatherResult(
            np.concatenate(keys), np.concatenate(values),
            np.concatenate(births), np.concatenate(betas),
        )

    def compact(self, layer: int, head: int) -> None:
        """Repack a head's survivors into ceil(n / page_size) pages.

        Gather output is unchanged bit-for-bit; only the physical layout moves.
        """
        table = self._table(layer, head)
        dense = all(self._pages[pid].live == self._pages[pid].cursor for pid in table.page_ids)
        full_prefix = all(self._pages[pid].live == self.page_size for pid in table.page_ids[:-1])
        if dense and full_prefix:
            return
        snap = self.gather(layer, head)
        for pid in table.page_ids:
            self._free.append(pid)
        table.page_ids = []
        table.slot_of_birth = {}
        table.logical_length = 0
        for i in range(len(snap)):
            pid_slot = self._append_compacted(table, snap.keys[i], snap.values[i],
                                              int(snap.births[i]), float(snap.betas[i]))
            table.slot_of_birth[int(snap.births[i])] = pid_slot
        table.logical_length = len(snap)

    def _append_compacted(self, table: _BlockTable, k: Array, v: Array,
                          birth: int, beta: float) -> tuple[int, int]:
        if table.page_ids and self._pages[table.page_ids[-1]].cursor < self.page_size:
            pid = table.page_ids[-1]
        else:
            pid = self._alloc_page()
            table.page_ids.append(pid)
        page = self._pages[pid]
        slot = page.cursor
        page.keys[slot] = k
        page.values[slot] = v
        page.births[slot] = birth
        page.betas[slot] = beta
        page.occupied[slot] = True
        page.cursor += 1
        return pid, slot

    # -- accounting ---------------------------------------------------------

    def logical_length(self, layer: int, head: int) -> int:
        return self._table(layer, head).logical_length

    def total_entries(self) -> int:
        return sum(t.logical_length for t in self._tables.values())

    def pages_in_use(self) -> int:
        return sum(len(t.page_ids) for t in self._tables.values())

    def occupied_slots(self) -> int:
        return sum(self._pages[pid].live
                   for t in self._tables.values() for pid in t.page_ids)

    def check_accounting(self) -> None:
        """Internal consistency: occupancy matches lengths, no page aliasing."""
        if self.occupied_slots() != self.total_entries():
            raise AssertionError("occupied slots disagree with logical lengths")
        seen: set[int] = set()
        for t in self._tables.values():
            for pid in t.page_ids:
                if pid in seen:
                    raise AssertionError(f"page {pid} appears in two block tables")
                seen.add(pid)
        if seen & set(self._free):
            raise AssertionError("free page still referenced by a block table")

    def snapshot(self) -> dict:
        """JSON-serializable view of block tables and occupancy, for inspection."""
        tables = {}
        for (l, h), t in sorted(self._tables.items()):
            tables[f"{l},{h}"] = {
                "pages": list(t.page_ids),
                "logical_length": t.logical_length,
                "occupancy": [self._pages[pid].live for pid in t.page_ids],
            }
        return {
            "page_size": self.page_size,
            "pages_allocated": len(self._pages),
            "free_pages": list(self._free),
            "tables": tables,
        }
