"""Teacher-embedding exporter: runs a pretrained speech encoder over a
directory of WAVs and writes the indexed binary store consumed by the
keyword-spotting trainer."""

from .store import StoreWriter, verify_store

__version__ = "0.1.0"

__all__ = ["StoreWriter", "verify_store", "__version__"]
