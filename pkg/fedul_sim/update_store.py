import json
import logging
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from fedul_sim._errors import (
    StoreFormatError,
    StoreInvariantError,
    StoreTruncatedError,
    StoreVersionError,
)
from fedul_sim.params import ParamVector, quantize_f32

STORE_MAGIC = b"FFUL"
STORE_VERSION = 1

_HEADER = struct.Struct("<4sIIII")
_RECORD_HEAD = struct.Struct("<II")
_ENTRY_HEAD = struct.Struct("<If")


@dataclass(frozen=True)
class StoreEntry:
    """One sampled client update inside a round.

    Probabilities and updates are rounded to float32 on construction, the
    precision of the binary format, so a written store reads back equal.
    """

    client_id: int
    probability: float
    """Sampling probability p_t^i."""
    update: ParamVector
    """Client update ΔM^i_t."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "probability", float(np.float32(self.probability)))
        object.__setattr__(self, "update", quantize_f32(self.update))


@dataclass(frozen=True)
class RoundRecord:
    """Sampled updates of one training round."""

    round: int
    entries: tuple[StoreEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def client_ids(self) -> list[int]:
        return [e.client_id for e in self.entries]

    def get(self, client_id: int) -> Optional[StoreEntry]:
        for e in self.entries:
            if e.client_id == client_id:
                return e
        return None

    def validate(self, dim: int, num_clients: int) -> None:
        seen: set[int] = set()
        for e in self.entries:
            if e.client_id in seen:
                raise StoreInvariantError(
                    f"Round {self.round}: duplicate client id {e.client_id}."
                )
            seen.add(e.client_id)
            if not 0 <= e.client_id < num_clients:
                raise StoreInvariantError(
                    f"Round {self.round}: client id {e.client_id} out of range "
                    f"[0, {num_clients})."
                )
            if not 0.0 < e.probability <= 1.0:
                raise StoreInvariantError(
                    f"Round {self.round}: probability {e.probability} of client "
                    f"{e.client_id} outside (0, 1]."
                )
            if e.update.dim != dim:
                raise StoreInvariantError(
                    f"Round {self.round}: update of client {e.client_id} has dim "
                    f"{e.update.dim}, store dim is {dim}."
                )


@dataclass(frozen=True)
class StoreMeta:
    version: int
    num_clients: int
    dim: int
    rounds: int


@dataclass
class UpdateStore:
    """Append-only history of sampled client updates.

    Written by a single training loop; read-only once unlearning starts.
    """

    num_clients: int
    """Number of clients N in the federation."""
    dim: int
    """Dimension of every stored update."""
    records: List[RoundRecord] = field(default_factory=list)
    """Per-round records ordered by round."""

    layout: List[Dict[str, Any]] = field(default_factory=list, compare=False)
    """Parameter layout description, persisted only in the JSON manifest."""
    sampling: str = field(default="optimal", compare=False)
    """Sampling scheme that produced the records ("optimal" or "uniform")."""

    lock: threading.Lock = field(
        default_factory=threading.Lock, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        if self.num_clients < 1 or self.dim < 1:
            raise StoreInvariantError(
                f"Store needs num_clients >= 1 and dim >= 1, got "
                f"{self.num_clients} and {self.dim}."
            )
        records, self.records = list(self.records), []
        for r in records:
            self.append(r)

    @property
    def meta(self) -> StoreMeta:
        return StoreMeta(STORE_VERSION, self.num_clients, self.dim, len(self.records))

    @property
    def rounds(self) -> int:
        return len(self.records)

    def append(self, record: RoundRecord) -> None:
        """Validate and append the next round's record."""
        with self.lock:
            if record.round != len(self.records):
                raise StoreInvariantError(
                    f"Expected record for round {len(self.records)}, got {record.round}."
                )
            record.validate(self.dim, self.num_clients)
            self.records.append(record)

    def prefix(self, rounds: int) -> "UpdateStore":
        """Copy holding only the first `rounds` records."""
        return UpdateStore(
            num_clients=self.num_clients,
            dim=self.dim,
            records=self.records[:rounds],
            layout=self.layout,
            sampling=self.sampling,
        )

    def num_updates(self) -> int:
        return sum(len(r.entries) for r in self.records)

    def report(self) -> Dict[str, Any]:
        """Snapshot of the store's size and per-client sampling counts."""
        with self.lock:
            counts = Counter(e.client_id for r in self.records for e in r.entries)
            return {
                "rounds": len(self.records),
                "num_clients": self.num_clients,
                "dim": self.dim,
                "sampling": self.sampling,
                "stored_updates": sum(counts.values()),
                "sampled_counts": {str(k): counts[k] for k in sorted(counts)},
                "serialized_bytes": serialized_size(self),
            }


def serialized_size(store: UpdateStore) -> int:
    """Byte size of `store` in the binary store format."""
    size = _HEADER.size
    per_entry = _ENTRY_HEAD.size + 4 * store.dim
    for r in store.records:
        size += _RECORD_HEAD.size + per_entry * len(r.entries)
    return size


def encode_store(store: UpdateStore) -> bytes:
    parts = [
        _HEADER.pack(
            STORE_MAGIC, STORE_VERSION, store.num_clients, store.dim, store.rounds
        )
    ]
    for r in store.records:
        parts.append(_RECORD_HEAD.pack(r.round, len(r.entries)))
        for e in r.entries:
            parts.append(_ENTRY_HEAD.pack(e.client_id, e.probability))
            parts.append(e.update.values.astype("<f4").tobytes())
    return b"".join(parts)


def decode_store(buf: bytes) -> UpdateStore:
    if len(buf) < _HEADER.size:
        raise StoreTruncatedError(
            f"Store header needs {_HEADER.size} bytes, file has {len(buf)}."
        )
    magic, version, n, dim, rounds = _HEADER.unpack_from(buf, 0)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"Bad store magic {magic!r}, expected {STORE_MAGIC!r}.")
    if version != STORE_VERSION:
        raise StoreVersionError(
            f"Unsupported store version {version}, expected {STORE_VERSION}."
        )

    offset = _HEADER.size
    update_bytes = 4 * dim

    def need(count: int) -> None:
        if offset + count > len(buf):
            raise StoreTruncatedError(
                f"Store truncated at byte {offset}: need {count} more bytes, "
                f"{len(buf) - offset} left."
            )

    records: list[RoundRecord] = []
    for _ in range(rounds):
        need(_RECORD_HEAD.size)
        rnd, k = _RECORD_HEAD.unpack_from(buf, offset)
        offset += _RECORD_HEAD.size
        entries = []
        for _ in range(k):
            need(_ENTRY_HEAD.size + update_bytes)
            cid, prob = _ENTRY_HEAD.unpack_from(buf, offset)
            offset += _ENTRY_HEAD.size
            upd = np.frombuffer(buf, dtype="<f4", count=dim, offset=offset)
            offset += update_bytes
            entries.append(StoreEntry(cid, prob, ParamVector(upd.astype(np.float64))))
        records.append(RoundRecord(rnd, tuple(entries)))

    if offset != len(buf):
        raise StoreFormatError(
            f"Store has {len(buf) - offset} trailing bytes after {rounds} records."
        )
    # UpdateStore re-validates every record on construction.
    return UpdateStore(num_clients=n, dim=dim, records=records)


def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def store_write(store: UpdateStore, path: str | Path) -> int:
    """Write the binary store and its sibling JSON manifest; returns bytes written."""
    path = Path(path)
    for r in store.records:
        r.validate(store.dim, store.num_clients)
    data = encode_store(store)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)

    manifest = {
        "magic": STORE_MAGIC.decode("ascii"),
        "version": STORE_VERSION,
        "num_clients": store.num_clients,
        "dim": store.dim,
        "rounds": store.rounds,
        "sampling": store.sampling,
        "layout": store.layout,
        "serialized_bytes": len(data),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logging.info(f"Wrote update store {path} ({len(data)} bytes, {store.rounds} rounds)")
    return len(data)


def store_read(path: str | Path) -> UpdateStore:
    """Read a binary store; the sibling manifest, if present, restores layout info."""
    path = Path(path)
    store = decode_store(path.read_bytes())

    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        for key in ("num_clients", "dim", "rounds"):
            if manifest.get(key) != getattr(store.meta, key):
                raise StoreFormatError(
                    f"Manifest {mpath} disagrees with store header on '{key}': "
                    f"{manifest.get(key)} != {getattr(store.meta, key)}."
                )
        store.layout = manifest.get("layout", [])
        store.sampling = manifest.get("sampling", "optimal")
    logging.info(f"Read update store {path} ({store.rounds} rounds)")
    return store
