"""Base module to be used by other emib modules.

Datasets and checkpoints share one on-disk layout: a directory holding a UTF-8 ``manifest.json`` and one raw
little-endian float32 file per named tensor, in C row-major order. The manifest records, for every blob, its file
name, shape, dtype and SHA-256 checksum, plus free-form metadata owned by the caller.
"""

import hashlib
import json

from json.decoder import JSONDecodeError
from logging import getLogger
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

import numpy as np

from emib import __version__
from emib._types import FloatArray, JsonDict

log = getLogger(__name__)

MANIFEST_NAME = "manifest.json"
BLOB_DTYPE = "<f4"
BLOB_SUFFIX = ".f32"

PathLike = Union[str, Path]


def dump_json(obj: JsonDict) -> str:
    """Return ``obj`` serialized byte-stably: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: PathLike, obj: JsonDict) -> None:
    """Write ``obj`` to ``path`` with :func:`dump_json`, creating parent directories."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_json(obj), encoding="utf-8")
    except OSError as e:
        log.error("Cannot write %s: %s", path, e)
        raise BlobStoreError("Cannot write `%s`: %s" % (path, e)) from e


class BlobStore:
    """Directory of named float32 tensors described by a JSON manifest."""

    def __init__(self, directory: PathLike, kind: str) -> None:
        """Parameter ``kind`` tags the manifest (e.g. ``emib-dataset``) and is checked on read."""
        self.directory = Path(directory)
        if not kind:
            raise ValueError("Blob store kind must be provided!")
        self.kind = kind

    @property
    def manifest_path(self) -> Path:
        """Path of the manifest file."""
        return self.directory / MANIFEST_NAME

    @staticmethod
    def _blob_file(name: str) -> str:
        return name.replace("/", "__") + BLOB_SUFFIX

    @staticmethod
    def _checksum(data: bytes) -> str:
        return hashlib.sha256(data).hexdigest()

    def write(self, tensors: Mapping[str, FloatArray], meta: Optional[JsonDict] = None) -> JsonDict:
        """Write all ``tensors`` and the manifest, returning the manifest.

        :param tensors: Named arrays. Each is cast to little-endian float32.
        :param meta: Caller metadata stored under the ``meta`` key.
        :returns: The manifest as written.
        :raises: BlobStoreError
        """
        log.info("Write %s tensors to %s", len(tensors), self.directory)
        blobs = dict()
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            for name in sorted(tensors):
                array = np.ascontiguousarray(np.asarray(tensors[name], dtype=BLOB_DTYPE))
                data = array.tobytes(order="C")
                file_name = self._blob_file(name)
                (self.directory / file_name).write_bytes(data)
                blobs[name] = {
                    "file": file_name,
                    "shape": list(array.shape),
                    "dtype": "float32",
                    "sha256": self._checksum(data),
                }
                log.debug("Wrote blob %s, shape=%s", name, array.shape)
        except OSError as e:
            log.error("Cannot write blobs to %s: %s", self.directory, e)
            raise BlobStoreError("Cannot write blobs to `%s`: %s" % (self.directory, e)) from e

        manifest = {"kind": self.kind, "format_version": 1, "emib_version": __version__, "blobs": blobs}
        manifest["meta"] = meta or {}
        write_json(self.manifest_path, manifest)
        return manifest

    def read_manifest(self) -> JsonDict:
        """Return the parsed manifest.

        :raises: BlobStoreError when the manifest is missing, not valid JSON, or of another kind.
        """
        try:
            text = self.manifest_path.read_text(encoding="utf-8")
        except OSError as e:
            log.error("Cannot read manifest %s", self.manifest_path)
            raise BlobStoreError("Cannot read manifest `%s`: %s" % (self.manifest_path, e)) from e

        try:
            manifest: JsonDict = json.loads(text)
        except JSONDecodeError as e:
            log.error("Manifest is not valid json: %s", self.manifest_path)
            raise BlobStoreError("Manifest `%s` is not valid JSON" % self.manifest_path) from e

        if manifest.get("kind") != self.kind:
            raise BlobStoreError("Expected manifest of kind `%s`, got `%s`" % (self.kind, manifest.get("kind")))
        if manifest.get("format_version") != 1:
            raise BlobStoreError("Unsupported format version `%s`" % manifest.get("format_version"))
        return manifest

    def read(self, names: Optional[Iterable[str]] = None) -> Dict[str, FloatArray]:
        """Return named tensors, validated against the manifest.

        All requested blobs are read and checked before anything is returned, so a bad blob never yields a partial
        result.

        :param names: Blob names to read, defaulting to all blobs.
        :raises: BlobStoreError naming the first blob that is missing, truncated, or fails its checksum.
        """
        manifest = self.read_manifest()
        blobs = manifest["blobs"]
        names = sorted(blobs) if names is None else list(names)

        tensors = dict()
        for name in names:
            if name not in blobs:
                raise BlobStoreError("Blob `%s` is not listed in %s" % (name, self.manifest_path))
            entry = blobs[name]
            shape = tuple(int(s) for s in entry["shape"])
            path = self.directory / entry["file"]
            try:
                data = path.read_bytes()
            except OSError as e:
                log.error("Cannot read blob %s", path)
                raise BlobStoreError("Cannot read blob `%s`: %s" % (name, e)) from e

            expected_size = int(np.prod(shape, dtype=np.int64)) * 4
            if len(data) != expected_size:
                log.error("Blob %s has %s bytes, expected %s", name, len(data), expected_size)
                raise BlobStoreError("Blob `%s` has %s bytes, expected %s" % (name, len(data), expected_size))
            if self._checksum(data) != entry["sha256"]:
                raise BlobStoreError("Blob `%s` failed its checksum" % name)

            tensors[name] = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape).astype(np.float32)

        log.debug("Read %s blobs from %s", len(tensors), self.directory)
        return tensors


class EmibError(Exception):
    """Base class of all errors raised by emib."""


class ConfigError(EmibError):
    """Raised when a configuration is invalid or inconsistent."""


class DomainError(EmibError, ValueError):
    """Raised when an input lies outside the domain of an operation."""


class BlobStoreError(EmibError):
    """Raised when a manifest or blob cannot be written, read, or validated."""


class DivergenceError(EmibError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, last_good: Optional[Path] = None) -> None:
        """Parameter ``last_good`` is the directory of the last checkpoint written before divergence."""
        super().__init__(message)
        self.last_good = last_good


class ProbeError(EmibError):
    """Raised when a probe cannot be fitted or used."""


class AuditFailedError(EmibError):
    """Raised when the gradient audit exceeds its tolerance."""
