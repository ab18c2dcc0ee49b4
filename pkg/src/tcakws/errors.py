class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class StoreNotFound(KeyError):
    """Requested utterance id is absent from a teacher store."""


class StoreIntegrityError(IOError):
    """A teacher store record or index failed validation."""
