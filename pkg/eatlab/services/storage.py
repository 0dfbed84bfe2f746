"""
Storage service for array containers on the local filesystem.

A container is one directory holding a JSON manifest plus one blob per named
array. This module provides the two classes that manage it:
- StorageTextFile: JSON manifests and other text files
- StorageBinaryFile: array blobs (magic + shape header + little-endian payload)

Blob layout (all integers little-endian):
    8 bytes   magic b"EATARR01"
    uint32    dtype code (0=float32, 1=int32, 2=float64)
    uint32    ndim
    uint64[]  shape, ndim entries
    payload   C-order array data
"""

import hashlib
import json
import logging
import os
import struct
from typing import Any, Dict, List, Mapping

import numpy as np

from eatlab.errors import StorageError
from eatlab.models.manifest import ArrayInfo

logger = logging.getLogger("eatlab.storage")

MAGIC = b"EATARR01"
BLOB_SUFFIX = ".arr"
MANIFEST_NAME = "manifest.json"

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<i4"): 1,
    np.dtype("<f8"): 2,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


class StorageTextFile:
    """
    Text files (JSON manifests, reports) inside a container directory.
    """

    def __init__(self, root: str):
        """Bind to a container directory, creating it if needed"""
        self.root = os.path.abspath(root)
        try:
            os.makedirs(self.root, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create container directory: {e}", self.root) from e
        logger.debug(f"Text storage bound to {self.root}")

    def _path(self, file_path: str) -> str:
        return os.path.join(self.root, file_path)

    def get(self, file_path: str) -> str:
        """
        Read a text file

        Args:
            file_path: Name relative to the container root

        Returns:
            File content
        """
        path = self._path(file_path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                return f.read()
        except OSError as e:
            raise StorageError(f"cannot read text file: {e}", path) from e

    def get_json(self, file_path: str = MANIFEST_NAME) -> Any:
        """Read and parse a JSON file"""
        content = self.get(file_path)
        try:
            return json.loads(content)
        except json.JSONDecodeError as e:
            raise StorageError(f"invalid JSON: {e}", self._path(file_path)) from e

    def create(self, file_path: str, content: str) -> str:
        """
        Write a text file, replacing any previous content

        Args:
            file_path: Name relative to the container root
            content: Text to store

        Returns:
            Absolute path written
        """
        path = self._path(file_path)
        try:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tmp = f"{path}.tmp"
            with open(tmp, "w", encoding="utf-8") as f:
                f.write(content)
            os.replace(tmp, path)
        except OSError as e:
            raise StorageError(f"cannot write text file: {e}", path) from e
        logger.debug(f"Wrote text file {path}")
        return path

    def create_json(self, file_path: str, data: Any) -> str:
        """Serialize data as indented, key-sorted JSON"""
        return self.create(file_path, json.dumps(data, indent=2, sort_keys=True))

    def exists(self, file_path: str = MANIFEST_NAME) -> bool:
        return os.path.isfile(self._path(file_path))

    def delete(self, file_path: str) -> None:
        path = self._path(file_path)
        try:
            os.remove(path)
        except OSError as e:
            raise StorageError(f"cannot delete file: {e}", path) from e

    def list_files(self) -> List[str]:
        """List text files (everything that is not an array blob)"""
        try:
            names = sorted(os.listdir(self.root))
        except OSError as e:
            raise StorageError(f"cannot list container: {e}", self.root) from e
        return [n for n in names if not n.endswith(BLOB_SUFFIX) and os.path.isfile(self._path(n))]


class StorageBinaryFile:
    """
    Named array blobs inside a container directory.
    """

    def __init__(self, root: str):
        """Bind to a container directory, creating it if needed"""
        self.root = os.path.abspath(root)
        try:
            os.makedirs(self.root, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create container directory: {e}", self.root) from e

    def _path(self, name: str) -> str:
        return os.path.join(self.root, f"{name}{BLOB_SUFFIX}")

    @staticmethod
    def encode(array: np.ndarray) -> bytes:
        """Serialize one array to blob bytes"""
        arr = np.asarray(array)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8" if arr.dtype == np.float64 else "<f4", copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i4", copy=False)
        else:
            raise StorageError(f"unsupported dtype {arr.dtype}")
        header = MAGIC + struct.pack("<II", DTYPE_CODES[arr.dtype], arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        return header + np.ascontiguousarray(arr).tobytes()

    @staticmethod
    def decode(blob: bytes, path: str = "<memory>") -> np.ndarray:
        """Parse blob bytes back into an array"""
        if len(blob) < 16 or blob[:8] != MAGIC:
            raise StorageError("bad array blob magic", path)
        code, ndim = struct.unpack_from("<II", blob, 8)
        if code not in CODE_DTYPES:
            raise StorageError(f"unknown dtype code {code}", path)
        shape = struct.unpack_from(f"<{ndim}Q", blob, 16)
        offset = 16 + 8 * ndim
        dtype = CODE_DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(blob) - offset != expected:
            raise StorageError(f"payload is {len(blob) - offset} bytes, expected {expected}", path)
        return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).copy()

    def get(self, name: str) -> np.ndarray:
        """
        Load a named array

        Args:
            name: Array name (without suffix)

        Returns:
            The array with its stored dtype
        """
        path = self._path(name)
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise StorageError(f"cannot read array: {e}", path) from e
        return self.decode(blob, path)

    def create(self, name: str, array: np.ndarray) -> ArrayInfo:
        """
        Write a named array, replacing any previous blob

        Returns:
            Shape and dtype as recorded in manifests
        """
        path = self._path(name)
        blob = self.encode(array)
        try:
            tmp = f"{path}.tmp"
            with open(tmp, "wb") as f:
                f.write(blob)
            os.replace(tmp, path)
        except OSError as e:
            raise StorageError(f"cannot write array: {e}", path) from e
        code = struct.unpack_from("<I", blob, 8)[0]
        return ArrayInfo(shape=list(np.shape(array)), dtype=CODE_DTYPES[code].name)

    def create_many(self, arrays: Mapping[str, np.ndarray]) -> Dict[str, ArrayInfo]:
        return {name: self.create(name, arr) for name, arr in arrays.items()}

    def get_many(self, names: List[str]) -> Dict[str, np.ndarray]:
        return {name: self.get(name) for name in names}

    def delete(self, name: str) -> None:
        path = self._path(name)
        try:
            os.remove(path)
        except OSError as e:
            raise StorageError(f"cannot delete array: {e}", path) from e

    def list_files(self) -> List[str]:
        """List array names in the container"""
        try:
            names = sorted(os.listdir(self.root))
        except OSError as e:
            raise StorageError(f"cannot list container: {e}", self.root) from e
        return sorted(n[: -len(BLOB_SUFFIX)] for n in names if n.endswith(BLOB_SUFFIX))

    def fingerprint(self) -> str:
        """sha256 over (name, blob bytes) of every array, in sorted name order"""
        digest = hashlib.sha256()
        for name in self.list_files():
            digest.update(name.encode("utf-8"))
            try:
                with open(self._path(name), "rb") as f:
                    digest.update(f.read())
            except OSError as e:
                raise StorageError(f"cannot hash array: {e}", self._path(name)) from e
        return digest.hexdigest()


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """Fingerprint of in-memory arrays; equals StorageBinaryFile.fingerprint after a save"""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode("utf-8"))
        digest.update(StorageBinaryFile.encode(arrays[name]))
    return digest.hexdigest()
