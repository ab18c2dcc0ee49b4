"""Speech Commands ingestion, 12-class labeling, batching, and the binary
teacher-embedding store.

Directory layout expected: one subdirectory per word containing WAV files,
`_background_noise_` with longer noise WAVs, and (optionally)
validation_list.txt / testing_list.txt. Without the list files the split
falls back to the dataset's published filename-hash assignment.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import augment as aug
from . import frontend as fe
from .errors import ContractViolation, StoreIntegrityError, StoreNotFound

log = logging.getLogger(__name__)

CLASS_NAMES = ["yes", "no", "up", "down", "left", "right",
               "on", "off", "stop", "go", "unknown", "silence"]
TARGET_WORDS = CLASS_NAMES[:10]
UNKNOWN_INDEX = 10
SILENCE_INDEX = 11

_MAX_WAVS_PER_CLASS = 2 ** 27 - 1


def which_set(filename: str, validation_percentage: float = 10.0,
              testing_percentage: float = 10.0) -> str:
    """The dataset's published hash split: stable per speaker recording."""
    base = Path(filename).name
    hash_name = re.sub(r"_nohash_.*$", "", base)
    digest = hashlib.sha1(hash_name.encode("utf-8")).hexdigest()
    pct = (int(digest, 16) % (_MAX_WAVS_PER_CLASS + 1)) * (100.0 / _MAX_WAVS_PER_CLASS)
    if pct < validation_percentage:
        return "val"
    if pct < validation_percentage + testing_percentage:
        return "test"
    return "train"


@dataclass
class ManifestEntry:
    utterance_id: str
    path: str
    class_index: int
    split: str
    crop_start: int = -1      # >= 0 only for synthesized silence crops

    def as_dict(self) -> dict:
        return {"utterance_id": self.utterance_id, "path": self.path,
                "class_index": self.class_index, "split": self.split,
                "crop_start": self.crop_start}


class DatasetManifest:
    def __init__(self, entries: list[ManifestEntry], noise_files: list[str]):
        self.entries = entries
        self.noise_files = noise_files
        self._by_split: dict[str, list[int]] = {"train": [], "val": [], "test": []}
        for i, e in enumerate(entries):
            self._by_split[e.split].append(i)

    def split_indices(self, split: str) -> list[int]:
        return list(self._by_split[split])

    def word_indices(self, split: str) -> list[int]:
        """Entries backed by real word recordings (no synthesized silence)."""
        return [i for i in self._by_split[split]
                if self.entries[i].class_index != SILENCE_INDEX]

    def export_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e.as_dict()) + "\n")
            for n in self.noise_files:
                f.write(json.dumps({"noise_file": n}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "DatasetManifest":
        entries, noise = [], []
        with open(path) as f:
            for line in f:
                d = json.loads(line)
                if "noise_file" in d:
                    noise.append(d["noise_file"])
                else:
                    entries.append(ManifestEntry(**d))
        return cls(entries, noise)


def load_dataset(root, validation_list: str = "validation_list.txt",
                 testing_list: str = "testing_list.txt",
                 silence_fraction: float = 0.1) -> DatasetManifest:
    """Scan a Speech Commands style directory into a manifest.

    Files named in the two list files go to val/test, the rest to train;
    if a list file is missing the hash split decides. The ten target words
    map to classes 0-9, every other word directory to "unknown", and
    per-split "silence" entries are synthesized as fixed 1 s crops of the
    background-noise files.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")

    def read_list(name):
        p = root / name
        if not p.is_file():
            return None
        return {line.strip() for line in p.read_text().splitlines() if line.strip()}

    val_set = read_list(validation_list)
    test_set = read_list(testing_list)
    if val_set is None or test_set is None:
        log.warning("split list files missing under %s; using hash split", root)

    entries: list[ManifestEntry] = []
    word_dirs = sorted(d for d in root.iterdir()
                       if d.is_dir() and not d.name.startswith("_"))
    for d in word_dirs:
        cls = TARGET_WORDS.index(d.name) if d.name in TARGET_WORDS else UNKNOWN_INDEX
        for wav in sorted(d.glob("*.wav")):
            rel = f"{d.name}/{wav.name}"
            if val_set is not None and test_set is not None:
                split = "val" if rel in val_set else "test" if rel in test_set else "train"
            else:
                split = which_set(rel)
            entries.append(ManifestEntry(rel, str(wav), cls, split))

    noise_dir = root / "_background_noise_"
    noise_files = sorted(str(p) for p in noise_dir.glob("*.wav")) if noise_dir.is_dir() else []
    if noise_files:
        counts = {"train": 0, "val": 0, "test": 0}
        for e in entries:
            counts[e.split] += 1
        for split in ("train", "val", "test"):
            if counts[split] == 0:
                continue
            n_sil = max(1, round(silence_fraction * counts[split]))
            rng = np.random.default_rng([zlib.crc32(split.encode()), len(noise_files)])
            for j in range(n_sil):
                path = noise_files[int(rng.integers(0, len(noise_files)))]
                n_samples = _wav_length(path)
                start = int(rng.integers(0, max(1, n_samples - fe.CLIP_SAMPLES + 1)))
                entries.append(ManifestEntry(
                    f"_silence_/{split}_{j:05d}", path, SILENCE_INDEX, split, start))
    return DatasetManifest(entries, noise_files)


@lru_cache(maxsize=None)
def _wav_length(path: str) -> int:
    return len(fe.read_wav(path).samples)


@lru_cache(maxsize=16384)
def _load_wave(path: str) -> np.ndarray:
    return fe.read_wav(path).samples


def entry_wave(entry: ManifestEntry, rng: np.random.Generator | None = None) -> np.ndarray:
    """Clip samples for one entry, exactly 16000 long.

    Silence entries crop their noise file: at `crop_start` when no rng is
    given (evaluation), at a fresh random offset otherwise (training variety).
    """
    samples = _load_wave(entry.path)
    if entry.class_index == SILENCE_INDEX:
        limit = max(1, len(samples) - fe.CLIP_SAMPLES + 1)
        start = entry.crop_start if rng is None else int(rng.integers(0, limit))
        start = min(max(start, 0), limit - 1)
        return fe.fit_length(samples[start: start + fe.CLIP_SAMPLES])
    return fe.fit_length(samples)


def align_frames(student_frames: int, teacher_frames: int) -> int:
    """Common frame count for the distillation loss: trailing-truncate both."""
    if student_frames < 1 or teacher_frames < 1:
        raise ContractViolation("frame counts must be positive")
    return min(student_frames, teacher_frames)


# -- teacher store -----------------------------------------------------------------

_STORE_MAGIC = b"W2VE"
_STORE_VERSION = 1
TEACHER_DIM = 768


class TeacherStoreWriter:
    """Sequential writer for the indexed embedding file.

    Layout: magic, u32 version, u32 record count, then per record
    u16 id length, id, u32 frames, u32 dim, u32 CRC32(payload), payload
    (f32 LE row-major); then the index (u32 count, entries of u16 id length,
    id, u64 record offset) and finally the u64 index offset.
    """

    def __init__(self, path):
        self._f = open(path, "wb")
        self._index: list[tuple[bytes, int]] = []
        self._ids: set[str] = set()
        self._f.write(_STORE_MAGIC)
        self._f.write(struct.pack("<II", _STORE_VERSION, 0))

    def add(self, utterance_id: str, embedding: np.ndarray) -> None:
        arr = np.ascontiguousarray(embedding, dtype="<f4")
        if arr.ndim != 2 or arr.shape[1] != TEACHER_DIM:
            raise ContractViolation(
                f"teacher embedding must be [frames, {TEACHER_DIM}], got {arr.shape}")
        if utterance_id in self._ids:
            raise ContractViolation(f"duplicate utterance id {utterance_id!r}")
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


class TeacherStore:
    """Read-only view of an embedding store; lookups are exact by id."""

    def __init__(self, path):
        self.path = str(path)
        self._f = open(path, "rb")
        head = self._f.read(12)
        if len(head) < 12 or head[:4] != _STORE_MAGIC:
            raise StoreIntegrityError(f"{path}: bad magic")
        version, self.record_count = struct.unpack("<II", head[4:])
        if version != _STORE_VERSION:
            raise StoreIntegrityError(f"{path}: unsupported version {version}")
        self._offsets = self._read_index()

    def _read_index(self) -> dict[str, int]:
        self._f.seek(0, 2)
        end = self._f.tell()
        if end < 20:
            raise StoreIntegrityError(f"{self.path}: file truncated")
        self._f.seek(end - 8)
        (index_offset,) = struct.unpack("<Q", self._f.read(8))
        if index_offset >= end - 8 or index_offset < 12:
            raise StoreIntegrityError(f"{self.path}: index offset out of range")
        self._f.seek(index_offset)
        (count,) = struct.unpack("<I", self._f.read(4))
        if count != self.record_count:
            raise StoreIntegrityError(
                f"{self.path}: index count {count} != header count {self.record_count}")
        offsets: dict[str, int] = {}
        prev = -1
        for _ in range(count):
            (nlen,) = struct.unpack("<H", self._f.read(2))
            uid = self._f.read(nlen).decode("utf-8")
            (off,) = struct.unpack("<Q", self._f.read(8))
            if off <= prev:
                raise StoreIntegrityError(f"{self.path}: index offsets not increasing")
            prev = off
            offsets[uid] = off
        return offsets

    def ids(self) -> list[str]:
        return list(self._offsets)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self._offsets

    def read(self, utterance_id: str) -> np.ndarray:
        if utterance_id not in self._offsets:
            raise StoreNotFound(utterance_id)
        self._f.seek(self._offsets[utterance_id])
        (nlen,) = struct.unpack("<H", self._f.read(2))
        uid = self._f.read(nlen).decode("utf-8")
        if uid != utterance_id:
            raise StoreIntegrityError(
                f"{self.path}: index points at record {uid!r}, expected {utterance_id!r}")
        frames, dim, crc = struct.unpack("<III", self._f.read(12))
        if dim != TEACHER_DIM:
            raise StoreIntegrityError(f"{self.path}: record {uid!r} has dim {dim}")
        payload = self._f.read(frames * dim * 4)
        if len(payload) != frames * dim * 4:
            raise StoreIntegrityError(f"{self.path}: record {uid!r} truncated")
        if zlib.crc32(payload) != crc:
            raise StoreIntegrityError(f"{self.path}: CRC mismatch for {uid!r}")
        return np.frombuffer(payload, dtype="<f4").reshape(frames, dim).copy()

    def close(self) -> None:
        self._f.close()


def read_teacher(store: TeacherStore, utterance_id: str) -> np.ndarray:
    return store.read(utterance_id)


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    x1: np.ndarray                      # [B,100,40] normalized (+masked) view
    waves: np.ndarray                   # [B,16000] clean waveforms
    x2: np.ndarray | None = None        # second augmented view
    clean: np.ndarray | None = None     # clean normalized spectrogram
    labels: np.ndarray | None = None    # int64 [B]
    teacher: np.ndarray | None = None   # [n_covered,F,768]
    teacher_rows: np.ndarray | None = None  # batch rows the teacher covers


_MODES = ("supervised", "siamese", "wvc", "joint")


class BatchBuilder:
    """Assembles training batches from a manifest.

    supervised: one augmented view (+labels, with 10%/10% unknown/silence
    substitution). siamese: two independently augmented views. wvc: clean
    spectrogram plus teacher embeddings. joint: both views plus clean+teacher.
    """

    def __init__(self, manifest: DatasetManifest,
                 frontend_cfg: fe.FrontendConfig | None = None,
                 augment_cfg: aug.AugmentConfig | None = None,
                 teacher_store: TeacherStore | None = None,
                 unknown_rate: float = 0.1, silence_rate: float = 0.1,
                 missing_teacher: str = "fatal",
                 unknown_pool: list[int] | None = None,
                 record_sink=None):
        self.manifest = manifest
        self.frontend_cfg = frontend_cfg or fe.FrontendConfig()
        self.augment_cfg = augment_cfg or self._default_augment(manifest)
        self.store = teacher_store
        self.unknown_rate = unknown_rate
        self.silence_rate = silence_rate
        if missing_teacher not in ("fatal", "skip"):
            raise ContractViolation("missing_teacher must be 'fatal' or 'skip'")
        self.missing_teacher = missing_teacher
        self.record_sink = record_sink
        # substitution pools; the unknown pool can be restricted (e.g. to a
        # labeled subset) by the caller
        self._unknown_pool = unknown_pool if unknown_pool is not None else [
            i for i in manifest.split_indices("train")
            if manifest.entries[i].class_index == UNKNOWN_INDEX]
        self._silence_pool = [i for i in manifest.split_indices("train")
                              if manifest.entries[i].class_index == SILENCE_INDEX]

    @staticmethod
    def _default_augment(manifest: DatasetManifest) -> aug.AugmentConfig:
        bank = [_load_wave(p) for p in manifest.noise_files]
        return aug.AugmentConfig(noise_bank=bank)

    def _augmented_spec(self, wave, rng, uid, view):
        outcome = aug.augment_utterance(wave, self.augment_cfg, rng)
        spec = fe.normalize_spectrogram(
            fe.log_mel(fe.AudioClip(outcome.wave), self.frontend_cfg))
        spec = aug.apply_masks(spec, outcome.mask_plan)
        if self.record_sink is not None:
            self.record_sink({"utterance_id": uid, "view": view, **outcome.record})
        return spec

    def _clean_spec(self, wave):
        return fe.normalize_spectrogram(
            fe.log_mel(fe.AudioClip(wave), self.frontend_cfg))

    def make_batch(self, indices, mode: str, rng: np.random.Generator,
                   with_labels: bool | None = None) -> Batch:
        if mode not in _MODES:
            raise ContractViolation(f"unknown batch mode {mode!r}")
        if with_labels is None:
            with_labels = mode == "supervised"
        entries = self.manifest.entries
        chosen: list[ManifestEntry] = []
        for idx in indices:
            e = entries[idx]
            if with_labels:
                u = rng.random()
                if u < self.silence_rate and self._silence_pool:
                    e = entries[self._silence_pool[int(rng.integers(0, len(self._silence_pool)))]]
                elif u < self.silence_rate + self.unknown_rate and self._unknown_pool:
                    e = entries[self._unknown_pool[int(rng.integers(0, len(self._unknown_pool)))]]
            chosen.append(e)

        need_teacher = mode in ("wvc", "joint")
        if need_teacher:
            if self.store is None:
                raise ContractViolation(f"mode {mode!r} needs a teacher store")
            # synthesized silence crops cannot have exported embeddings, so
            # they are exempt from coverage; they simply sit out the teacher
            # term in labeled batches
            missing = [e.utterance_id for e in chosen
                       if e.class_index != SILENCE_INDEX
                       and e.utterance_id not in self.store]
            if missing:
                if self.missing_teacher == "fatal":
                    raise StoreNotFound(
                        f"teacher embeddings missing for {missing[:5]}"
                        f"{'...' if len(missing) > 5 else ''}")
                log.warning("%d utterances lack teacher embeddings", len(missing))
            if not with_labels:
                # unlabeled batches carry no other training signal: drop
                # anything without an embedding
                chosen = [e for e in chosen if e.utterance_id in self.store]
                if not chosen:
                    raise StoreNotFound("no utterance in this batch has a teacher embedding")

        waves = [entry_wave(e, rng if e.class_index == SILENCE_INDEX else None)
                 for e in chosen]
        ids = [e.utterance_id for e in chosen]
        augment_views = 2 if mode in ("siamese", "joint") else (1 if mode == "supervised" else 0)

        x1_list, x2_list = [], []
        for e, w in zip(chosen, waves):
            if augment_views >= 1:
                x1_list.append(self._augmented_spec(w, rng, e.utterance_id, 1))
            else:
                x1_list.append(self._clean_spec(w))
            if augment_views == 2:
                x2_list.append(self._augmented_spec(w, rng, e.utterance_id, 2))

        batch = Batch(
            ids=ids,
            x1=np.stack(x1_list),
            waves=np.stack(waves),
            x2=np.stack(x2_list) if x2_list else None,
        )
        if mode in ("wvc", "joint"):
            batch.clean = batch.x1 if mode == "wvc" else np.stack(
                [self._clean_spec(w) for w in waves])
            rows = [i for i, uid in enumerate(ids) if uid in self.store]
            if rows:
                mats = [self.store.read(ids[i]) for i in rows]
                frames = min(m.shape[0] for m in mats)
                batch.teacher = np.stack([m[:frames] for m in mats])
                batch.teacher_rows = np.array(rows, dtype=np.int64)
        if with_labels:
            batch.labels = np.array([e.class_index for e in chosen], dtype=np.int64)
        return batch
