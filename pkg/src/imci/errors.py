class ImciError(Exception):
    """Base class for engine errors."""


# row store
class DuplicateKey(ImciError):
    pass


class KeyNotFound(ImciError):
    pass


class TxnNotActive(ImciError):
    pass


class LockConflict(ImciError):
    """Another active transaction holds the row."""


# redo log
class IoFailure(ImciError):
    pass


class CorruptEntry(ImciError):
    def __init__(self, message, last_valid_lsn=0):
        super().__init__(message)
        self.last_valid_lsn = last_valid_lsn


# locator / column index
class DuplicatePk(ImciError):
    pass


class NotFound(ImciError):
    pass


class ConflictingPk(ImciError):
    pass


class SnapshotTooOld(ImciError):
    pass


# replication
class PageStateMismatch(ImciError):
    pass


class ApplyConflict(ImciError):
    pass


# checkpoint
class NotLeader(ImciError):
    pass


class ChecksumMismatch(ImciError):
    pass


class MissingPackFile(ImciError):
    pass


class NoLiveRo(ImciError):
    pass


# query / proxy
class SnapshotAhead(ImciError):
    pass


class QueryError(ImciError):
    pass


class UnknownVerb(ImciError):
    pass


class NoAvailableNode(ImciError):
    pass


class ClusterDown(ImciError):
    pass
