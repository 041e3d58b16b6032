# codebook.py
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path, PurePosixPath
from typing import Union

import numpy as np

from fingerprint import Fingerprint
from helpers import (
    FormatError,
    MissingReferenceError,
    ParameterError,
    StateError,
    StorageError,
)
from tensor_store import (
    FORMAT_VERSION,
    BinaryReader,
    Checkpoint,
    check_header,
    checkpoint_load,
    checkpoint_save,
)

logger = logging.getLogger(__name__)

MAGIC = b"CMIX"
_HEADER = struct.Struct("<4sIIQ")
_ENTRY_HEAD = struct.Struct("<QI")
CHECKPOINT_DIR = "checkpoints"

CheckpointRef = Union[Path, Checkpoint]


@dataclass(frozen=True)
class CodebookEntry:
    fingerprint: Fingerprint
    checkpoint_ref: CheckpointRef
    step: int

    def __post_init__(self):
        if self.fingerprint.step != self.step:
            raise ParameterError(
                f"fingerprint step {self.fingerprint.step} does not match entry step {self.step}"
            )


class Codebook:
    """
    Append-only fingerprint -> checkpoint store.

    Only fingerprints live in memory when references are paths; checkpoints are
    read from disk on `resolve`. Appends replace the entry tuple wholesale, so a
    snapshot taken by a reader never changes under it.
    """

    def __init__(self, d_prime, max_entries=None):
        if int(d_prime) < 1:
            raise ParameterError(f"d_prime must be positive, got {d_prime}")
        if max_entries is not None and int(max_entries) < 1:
            raise ParameterError(f"max_entries must be positive, got {max_entries}")
        self.d_prime = int(d_prime)
        self.max_entries = None if max_entries is None else int(max_entries)
        self._entries = ()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def entries(self):
        return self._entries

    def snapshot(self):
        return self._entries

    @property
    def steps(self):
        return [entry.step for entry in self._entries]

    @property
    def last_step(self):
        return self._entries[-1].step if self._entries else None

    def append(self, fingerprint, ref):
        if fingerprint.d_prime != self.d_prime:
            raise ParameterError(
                f"fingerprint length {fingerprint.d_prime} does not match codebook d_prime {self.d_prime}"
            )
        if not isinstance(ref, Checkpoint):
            ref = Path(ref)
        with self._lock:
            last = self.last_step
            if last is not None and fingerprint.step <= last:
                raise ParameterError(
                    f"step {fingerprint.step} must be greater than the last stored step {last}"
                )
            if self.max_entries is not None and len(self._entries) >= self.max_entries:
                raise StateError(f"codebook is full ({self.max_entries} entries)")
            entry = CodebookEntry(fingerprint=fingerprint, checkpoint_ref=ref, step=fingerprint.step)
            self._entries = self._entries + (entry,)
        logger.debug(f"Appended step {entry.step} to codebook ({len(self._entries)} entries)")
        return entry

    def fingerprint_matrix(self, entries=None):
        entries = self._entries if entries is None else entries
        if not entries:
            raise StateError("codebook is empty")
        return np.stack([entry.fingerprint.values for entry in entries]).astype(np.float64)

    def resolve(self, entry):
        ref = entry.checkpoint_ref
        if isinstance(ref, Checkpoint):
            return ref
        if not ref.is_file():
            raise MissingReferenceError(
                f"checkpoint for step {entry.step} is missing: {ref}", path=ref
            )
        return checkpoint_load(ref)

    def find(self, step):
        for entry in self._entries:
            if entry.step == step:
                return entry
        raise StateError(f"no codebook entry for step {step}")

    #############################
    # CMIX persistence
    #############################

    def save(self, path):
        path = Path(path)
        root = path.parent
        entries = self.snapshot()
        parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, self.d_prime, len(entries))]
        for entry in entries:
            ref = entry.checkpoint_ref
            if isinstance(ref, Checkpoint):
                target = root / CHECKPOINT_DIR / f"step_{entry.step:08d}.cmck"
                try:
                    target.parent.mkdir(parents=True, exist_ok=True)
                except OSError as e:
                    raise StorageError(f"could not create checkpoint directory: {e}", path=target.parent)
                checkpoint_save(ref, target)
                ref = target
            rel = PurePosixPath(Path(os.path.relpath(Path(ref).resolve(), root.resolve())).as_posix())
            raw_path = str(rel).encode("utf-8")
            parts.append(_ENTRY_HEAD.pack(entry.step, len(raw_path)))
            parts.append(raw_path)
            parts.append(entry.fingerprint.values.astype("<f4").tobytes())
        try:
            with open(path, "wb") as f:
                f.write(b"".join(parts))
        except OSError as e:
            raise StorageError(f"could not write codebook index: {e.strerror or e}", path=path)
        logger.info(f"Saved codebook with {len(entries)} entries to {path}")

    @classmethod
    def load(cls, path, max_entries=None):
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as e:
            raise StorageError(f"could not read codebook index: {e.strerror or e}", path=path)
        reader = BinaryReader(buf)
        check_header(reader, MAGIC, "CMIX")
        d_prime = reader.u32("d_prime")
        if d_prime == 0:
            raise FormatError("d_prime must be positive", field="d_prime")
        count = reader.u64("entry count")
        codebook = cls(d_prime, max_entries=max_entries)
        entries = []
        last = None
        for index in range(count):
            step = reader.u64(f"step of entry #{index}")
            if last is not None and step <= last:
                raise FormatError(f"entry #{index} step {step} is not increasing", field="step")
            path_len = reader.u32(f"path length of entry {step}")
            rel = reader.utf8(path_len, f"path of entry {step}")
            values = reader.f32(d_prime, f"fingerprint of entry {step}")
            ref = path.parent / Path(PurePosixPath(rel))
            entries.append(CodebookEntry(Fingerprint(step, values), ref, step))
            last = step
        reader.expect_end()
        if max_entries is not None and len(entries) > max_entries:
            raise StateError(f"index holds {len(entries)} entries, cap is {max_entries}")
        codebook._entries = tuple(entries)
        logger.info(f"Loaded codebook with {len(entries)} entries from {path}")
        return codebook


def codebook_save(codebook, path):
    codebook.save(path)


def codebook_load(path, max_entries=None):
    return Codebook.load(path, max_entries=max_entries)
