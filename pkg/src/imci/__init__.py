"""Row store with a redo log, and read-only replicas that keep an in-memory
column index current by replaying that log."""

from .cluster import Cluster
from .colindex import ColumnIndex
from .config import Config
from .kernels import BACKEND
from .query import QueryEngine, QuerySpec, parse_query
from .redo import MemoryLog, RedoLog
from .replication import ReplayConfig, RoNode
from .rowstore import RowStore
from .schema import Catalog, TableSchema

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Catalog",
    "Cluster",
    "ColumnIndex",
    "Config",
    "MemoryLog",
    "QueryEngine",
    "QuerySpec",
    "RedoLog",
    "ReplayConfig",
    "RoNode",
    "RowStore",
    "TableSchema",
    "parse_query",
]
