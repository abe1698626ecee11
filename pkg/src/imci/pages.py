"""Slotted leaf pages and physical application of redo entries to them.

Both the writer (during recovery) and the replicas' buffer pools go through
``apply_entry`` so the two sides can never disagree on page semantics.
"""

from __future__ import annotations

import struct

from .errors import PageStateMismatch
from .redo import Kind, RedoEntry
from .schema import Catalog, TableSchema

_PAGE_HEADER = struct.Struct("<QIHH")


class Page:
    """A fixed-capacity leaf page. Slot order is physical; ``pk_slot`` is the
    slot directory, sorted on demand by ``sorted_items``."""

    __slots__ = ("page_id", "table_id", "capacity", "slots", "pk_slot", "low", "high")

    def __init__(self, page_id: int, table_id: int, capacity: int):
        self.page_id = page_id
        self.table_id = table_id
        self.capacity = capacity
        self.slots: list[tuple | None] = [None] * capacity
        self.pk_slot: dict[int, int] = {}
        # B+tree fences, writer side only: low inclusive, high exclusive
        self.low: int | None = None
        self.high: int | None = None

    def __len__(self) -> int:
        return len(self.pk_slot)

    @property
    def full(self) -> bool:
        return len(self.pk_slot) >= self.capacity

    def free_slot(self) -> int:
        return self.slots.index(None)

    def get(self, pk: int) -> tuple | None:
        s = self.pk_slot.get(pk)
        return None if s is None else self.slots[s]

    def put(self, slot: int, row: tuple) -> None:
        self.slots[slot] = row
        self.pk_slot[row[0]] = slot

    def clear(self, slot: int) -> tuple:
        row = self.slots[slot]
        self.slots[slot] = None
        del self.pk_slot[row[0]]
        return row

    def sorted_items(self) -> list[tuple[int, int]]:
        """(pk, slot) pairs in key order."""
        return sorted(self.pk_slot.items())

    def copy(self) -> "Page":
        p = Page(self.page_id, self.table_id, self.capacity)
        p.slots = list(self.slots)
        p.pk_slot = dict(self.pk_slot)
        p.low, p.high = self.low, self.high
        return p

    @classmethod
    def from_bytes(cls, schema: TableSchema, buf, offset: int = 0) -> tuple["Page", int]:
        """Inverse of ``to_bytes``; returns (page, offset past it). Fences are not stored."""
        page_id, table_id, capacity, _ = _PAGE_HEADER.unpack_from(buf, offset)
        offset += _PAGE_HEADER.size
        p = cls(page_id, table_id, capacity)
        for slot in range(capacity):
            flag = buf[offset]
            offset += 1
            if flag:
                row, offset = schema.decode_row(buf, offset)
                p.put(slot, row)
        return p, offset

    def to_bytes(self, schema: TableSchema) -> bytes:
        parts = [_PAGE_HEADER.pack(self.page_id, self.table_id, self.capacity, len(self.pk_slot))]
        for row in self.slots:
            if row is None:
                parts.append(b"\x00")
            else:
                parts.append(b"\x01")
                parts.append(schema.encode_row(row))
        return b"".join(parts)


def apply_entry(pages: dict[int, Page], catalog: Catalog, entry: RedoEntry):
    """Apply one DML entry to ``pages``; returns (old_row, new_row).

    Raises PageStateMismatch when the slot content contradicts the entry,
    which can only happen if entries for a page are replayed out of order.
    """
    page = pages.get(entry.page_id)
    kind = entry.kind
    if kind == Kind.INSERT:
        schema = catalog[entry.table_id]
        if page is None:
            page = pages[entry.page_id] = Page(entry.page_id, entry.table_id, catalog.page_capacity)
        if page.slots[entry.slot_id] is not None:
            raise PageStateMismatch(f"lsn {entry.lsn}: insert into occupied slot {entry.page_id}/{entry.slot_id}")
        row, _ = schema.decode_row(entry.payload)
        page.put(entry.slot_id, row)
        return None, row
    if page is None or page.slots[entry.slot_id] is None:
        raise PageStateMismatch(f"lsn {entry.lsn}: {kind.name.lower()} of empty slot {entry.page_id}/{entry.slot_id}")
    if kind == Kind.DELETE:
        return page.clear(entry.slot_id), None
    if kind == Kind.UPDATE:
        schema = catalog[page.table_id]
        old = page.slots[entry.slot_id]
        new = list(old)
        for col, v in schema.decode_changes(entry.payload):
            new[col] = v
        new = tuple(new)
        page.slots[entry.slot_id] = new
        return old, new
    raise ValueError(f"not a page entry: {kind!r}")


def page_images(pages: dict[int, Page], catalog: Catalog) -> dict[int, bytes]:
    return {pid: p.to_bytes(catalog[p.table_id]) for pid, p in pages.items()}
