# This file makes the services directory a Python package
from .storage import StorageBinaryFile, StorageTextFile

__all__ = ["StorageBinaryFile", "StorageTextFile"]
