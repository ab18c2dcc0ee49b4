"""Indexed binary store of per-utterance frame embeddings.

Layout (little-endian): magic "W2VE", u32 version=1, u32 record count, then
records of [u16 id length, id (UTF-8), u32 frames, u32 dim, u32 CRC32 of the
payload, payload f32 row-major], then an index [u32 count, entries of
u16 id length, id, u64 record byte offset] and finally the u64 index offset.
"""
from __future__ import annotations

import struct
import zlib
from collections import Counter

import numpy as np

MAGIC = b"W2VE"
VERSION = 1
DIM = 768


class StoreWriter:
    def __init__(self, path):
        self._f = open(path, "wb")
        self._index: list[tuple[bytes, int]] = []
        self._ids: set[str] = set()
        self._f.write(MAGIC)
        self._f.write(struct.pack("<II", VERSION, 0))

    def add(self, utterance_id: str, embedding: np.ndarray) -> None:
        arr = np.ascontiguousarray(embedding, dtype="<f4")
        if arr.ndim != 2 or arr.shape[1] != DIM:
            raise ValueError(f"embedding must be [frames, {DIM}], got {arr.shape}")
        if utterance_id in self._ids:
            raise ValueError(f"duplicate utterance id {utterance_id!r}")
        self._ids.add(utterance_id)
        raw = utterance_id.encode("utf-8")
        payload = arr.tobytes()
        offset = self._f.tell()
        self._f.write(struct.pack("<H", len(raw)))
        self._f.write(raw)
        self._f.write(struct.pack("<III", arr.shape[0], arr.shape[1],
                                  zlib.crc32(payload)))
        self._f.write(payload)
        self._index.append((raw, offset))

    def close(self) -> None:
        index_offset = self._f.tell()
        self._f.write(struct.pack("<I", len(self._index)))
        for raw, offset in self._index:
            self._f.write(struct.pack("<H", len(raw)))
            self._f.write(raw)
            self._f.write(struct.pack("<Q", offset))
        self._f.write(struct.pack("<Q", index_offset))
        self._f.seek(8)
        self._f.write(struct.pack("<I", len(self._index)))
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def verify_store(path) -> dict:
    """Walk every record and the index; returns a report dict.

    report["ok"] is False if any magic/version/CRC/offset/dim check fails;
    report["errors"] lists offending ids or structural problems, and
    report["frame_histogram"] maps frame count -> number of records.
    """
    errors: list[str] = []
    frames_seen: Counter = Counter()
    records = 0
    with open(path, "rb") as f:
        data_head = f.read(12)
        if len(data_head) < 12 or data_head[:4] != MAGIC:
            return {"ok": False, "records": 0, "frame_histogram": {},
                    "errors": ["bad magic"]}
        version, count = struct.unpack("<II", data_head[4:])
        if version != VERSION:
            errors.append(f"unsupported version {version}")
        f.seek(0, 2)
        end = f.tell()
        if end < 20:
            return {"ok": False, "records": 0, "frame_histogram": {},
                    "errors": ["file truncated"]}
        f.seek(end - 8)
        (index_offset,) = struct.unpack("<Q", f.read(8))
        if not (12 <= index_offset <= end - 8):
            return {"ok": False, "records": 0, "frame_histogram": {},
                    "errors": [f"index offset {index_offset} out of range"]}

        # sequential record walk up to the index
        f.seek(12)
        offsets_seen: dict[str, int] = {}
        while f.tell() < index_offset:
            rec_off = f.tell()
            try:
                (nlen,) = struct.unpack("<H", f.read(2))
                uid = f.read(nlen).decode("utf-8")
                frames, dim, crc = struct.unpack("<III", f.read(12))
                payload = f.read(frames * dim * 4)
                if len(payload) != frames * dim * 4:
                    errors.append(f"{uid}: payload truncated")
                    break
            except (struct.error, UnicodeDecodeError) as e:
                errors.append(f"record at {rec_off}: unparseable ({e})")
                break
            records += 1
            offsets_seen[uid] = rec_off
            if dim != DIM:
                errors.append(f"{uid}: dim {dim} != {DIM}")
            if zlib.crc32(payload) != crc:
                errors.append(f"{uid}: CRC mismatch")
            frames_seen[frames] += 1

        if records != count:
            errors.append(f"header count {count} != records walked {records}")

        # index consistency
        f.seek(index_offset)
        try:
            (icount,) = struct.unpack("<I", f.read(4))
            prev = -1
            for _ in range(icount):
                (nlen,) = struct.unpack("<H", f.read(2))
                uid = f.read(nlen).decode("utf-8")
                (off,) = struct.unpack("<Q", f.read(8))
                if off <= prev:
                    errors.append(f"index offsets not increasing at {uid}")
                prev = off
                if offsets_seen.get(uid) != off:
                    errors.append(f"index entry {uid} points to {off}, "
                                  f"record at {offsets_seen.get(uid)}")
            if icount != count:
                errors.append(f"index count {icount} != header count {count}")
        except (struct.error, UnicodeDecodeError) as e:
            errors.append(f"index unparseable ({e})")

    return {"ok": not errors, "records": records,
            "frame_histogram": dict(sorted(frames_seen.items())),
            "errors": errors}
