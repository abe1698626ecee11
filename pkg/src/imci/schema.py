"""Table schemas, the catalog, and the binary row image codec.

Rows are plain tuples, one value per column, ``row[0]`` being the int64
primary key. The same row image encoding is used inside row-store pages and
in insert redo payloads.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

INT64 = "int64"
FIXED = "fixed"
VAR = "var"

_U16 = struct.Struct("<H")
_I64 = struct.Struct("<q")


@dataclass(frozen=True)
class ColumnType:
    kind: str
    size: int = 0

    @classmethod
    def parse(cls, text: str) -> "ColumnType":
        text = text.strip().lower()
        if text in ("int64", "bigint"):
            return cls(INT64, 8)
        if text in ("varchar", "var", "text"):
            return cls(VAR, 0)
        m = re.fullmatch(r"(?:char|fixed)\((\d+)\)", text)
        if m:
            return cls(FIXED, int(m.group(1)))
        raise ValueError(f"unknown column type {text!r}")

    def __str__(self) -> str:
        if self.kind == INT64:
            return "int64"
        if self.kind == FIXED:
            return f"char({self.size})"
        return "varchar"

    @property
    def numeric(self) -> bool:
        return self.kind == INT64


@dataclass(frozen=True)
class Column:
    name: str
    type: ColumnType


@dataclass
class TableSchema:
    table_id: int
    columns: list[Column]
    name: str = ""
    pk_column: int = 0
    _struct: struct.Struct | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.columns:
            raise ValueError("schema needs at least one column")
        if self.columns[0].type.kind != INT64:
            raise ValueError("primary key column must be int64")
        if not 0 <= self.table_id < 2**32:
            raise ValueError("table_id must fit in u32")
        if not self.name:
            self.name = f"t{self.table_id}"
        if all(c.type.kind != VAR for c in self.columns):
            fmt = "<" + "".join("q" if c.type.kind == INT64 else f"{c.type.size}s" for c in self.columns)
            self._struct = struct.Struct(fmt)

    @classmethod
    def build(cls, table_id: int, types: list[str], name: str = "") -> "TableSchema":
        cols = [Column(f"c{i}", ColumnType.parse(t)) for i, t in enumerate(types)]
        return cls(table_id, cols, name)

    @property
    def ncols(self) -> int:
        return len(self.columns)

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(f"{self.name} has no column {name!r}")

    def validate(self, row: tuple) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} values, got {len(row)}")
        for c, v in zip(self.columns, row):
            self.validate_value(c.type, v)

    @staticmethod
    def validate_value(ctype: ColumnType, v) -> None:
        if ctype.kind == INT64:
            if not isinstance(v, int) or not -(2**63) <= v < 2**63:
                raise ValueError(f"not an int64: {v!r}")
            return
        if not isinstance(v, str):
            raise ValueError(f"not a string: {v!r}")
        b = v.encode()
        if ctype.kind == FIXED and (len(b) > ctype.size or b.endswith(b"\x00")):
            raise ValueError(f"value does not fit char({ctype.size}): {v!r}")
        if ctype.kind == VAR and len(b) > 0xFFFF:
            raise ValueError("varchar longer than 65535 bytes")

    # -- codec ------------------------------------------------------------

    def encode_row(self, row: tuple) -> bytes:
        if self._struct is not None:
            return self._struct.pack(*[v.encode() if isinstance(v, str) else v for v in row])
        return b"".join(encode_value(c.type, v) for c, v in zip(self.columns, row))

    def decode_row(self, buf, offset: int = 0) -> tuple[tuple, int]:
        s = self._struct
        if s is not None:
            vals = s.unpack_from(buf, offset)
            return (
                tuple(v.rstrip(b"\x00").decode() if isinstance(v, bytes) else v for v in vals),
                offset + s.size,
            )
        out = []
        for c in self.columns:
            v, offset = decode_value(c.type, buf, offset)
            out.append(v)
        return tuple(out), offset

    def encode_changes(self, changes: list[tuple[int, object]]) -> bytes:
        parts = [_U16.pack(len(changes))]
        for col, v in changes:
            parts.append(_U16.pack(col))
            parts.append(encode_value(self.columns[col].type, v))
        return b"".join(parts)

    def decode_changes(self, buf, offset: int = 0) -> list[tuple[int, object]]:
        (n,) = _U16.unpack_from(buf, offset)
        offset += 2
        out = []
        for _ in range(n):
            (col,) = _U16.unpack_from(buf, offset)
            v, offset = decode_value(self.columns[col].type, buf, offset + 2)
            out.append((col, v))
        return out

    def to_json(self) -> dict:
        return {
            "table_id": self.table_id,
            "name": self.name,
            "columns": [[c.name, str(c.type)] for c in self.columns],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TableSchema":
        cols = [Column(n, ColumnType.parse(t)) for n, t in d["columns"]]
        return cls(d["table_id"], cols, d.get("name", ""))


def encode_value(ctype: ColumnType, v) -> bytes:
    if ctype.kind == INT64:
        return _I64.pack(v)
    b = v.encode()
    if ctype.kind == FIXED:
        return b.ljust(ctype.size, b"\x00")
    return _U16.pack(len(b)) + b


def decode_value(ctype: ColumnType, buf, offset: int):
    if ctype.kind == INT64:
        return _I64.unpack_from(buf, offset)[0], offset + 8
    if ctype.kind == FIXED:
        end = offset + ctype.size
        return bytes(buf[offset:end]).rstrip(b"\x00").decode(), end
    (n,) = _U16.unpack_from(buf, offset)
    start = offset + 2
    return bytes(buf[start:start + n]).decode(), start + n


# 6 int64 + char(140) = 188 bytes per record
DEFAULT_TYPES = ["int64"] * 6 + ["char(140)"]


class Catalog:
    """table_id -> schema, plus the leaf page capacity shared by RW and ROs."""

    def __init__(self, schemas=(), page_capacity: int = 64):
        self.page_capacity = page_capacity
        self._by_id: dict[int, TableSchema] = {}
        self._by_name: dict[str, TableSchema] = {}
        for s in schemas:
            self.add(s)

    def add(self, schema: TableSchema) -> None:
        if schema.table_id in self._by_id:
            raise ValueError(f"duplicate table_id {schema.table_id}")
        if schema.name in self._by_name:
            raise ValueError(f"duplicate table name {schema.name}")
        self._by_id[schema.table_id] = schema
        self._by_name[schema.name] = schema

    def __getitem__(self, table_id: int) -> TableSchema:
        return self._by_id[table_id]

    def __contains__(self, table_id) -> bool:
        return table_id in self._by_id

    def __iter__(self):
        return iter(sorted(self._by_id.values(), key=lambda s: s.table_id))

    def __len__(self) -> int:
        return len(self._by_id)

    def by_name(self, name: str) -> TableSchema:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown table {name!r}") from None

    @classmethod
    def synthetic(cls, n_tables: int, types=None, page_capacity: int = 64) -> "Catalog":
        types = types or DEFAULT_TYPES
        return cls([TableSchema.build(i + 1, types) for i in range(n_tables)], page_capacity)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        doc = {"page_capacity": self.page_capacity, "tables": [s.to_json() for s in self]}
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Catalog":
        doc = json.loads(Path(path).read_text())
        return cls([TableSchema.from_json(t) for t in doc["tables"]], doc.get("page_capacity", 64))
