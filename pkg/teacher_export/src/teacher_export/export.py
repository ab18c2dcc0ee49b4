"""Run a pretrained wav2vec-style encoder over WAV files and fill a store.

The heavy dependencies (torch, transformers) are imported lazily so that
`verify` works in minimal environments. Inference runs in eval mode, one
clip at a time, fully deterministic.
"""
from __future__ import annotations

import hashlib
import json
import logging
import wave as _wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .store import StoreWriter

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
DEFAULT_CHECKPOINT = "facebook/wav2vec2-base"


@dataclass
class ExportManifest:
    checkpoint: str
    checkpoint_hash: str
    layer: int
    utterance_ids: list[str] = field(default_factory=list)
    source_paths: list[str] = field(default_factory=list)
    frames: list[int] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def read_wav_16k_mono(path) -> np.ndarray:
    """Strict reader: canonical 16 kHz mono 16-bit PCM only."""
    with _wave.open(str(path), "rb") as w:
        if w.getcomptype() != "NONE":
            raise ValueError("compressed WAV")
        if w.getsampwidth() != 2:
            raise ValueError(f"{8 * w.getsampwidth()}-bit samples")
        if w.getnchannels() != 1:
            raise ValueError(f"{w.getnchannels()} channels")
        if w.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{w.getframerate()} Hz")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def fit_length(x: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    if len(x) >= length:
        return x[:length]
    out = np.zeros(length, dtype=np.float32)
    out[: len(x)] = x
    return out


def load_teacher(checkpoint: str = DEFAULT_CHECKPOINT):
    """Load the encoder from a local path or a hub identifier."""
    from transformers import Wav2Vec2Model

    model = Wav2Vec2Model.from_pretrained(checkpoint)
    model.eval()
    return model


def model_hash(model) -> str:
    """Stable digest over parameter bytes, for manifest provenance."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


def compute_embedding(model, samples: np.ndarray, layer: int = -1,
                      normalize: bool = True) -> np.ndarray:
    """Context-network output [frames, 768] for one clip."""
    import torch

    x = fit_length(np.asarray(samples, dtype=np.float32))
    if normalize:
        x = (x - x.mean()) / np.sqrt(x.var() + 1e-7)
    with torch.no_grad():
        out = model(torch.from_numpy(x)[None, :], output_hidden_states=True)
        hidden = out.hidden_states[layer]
    return hidden[0].cpu().numpy().astype(np.float32)


def export_embeddings(audio_dir, out_store_path, layer: int = -1,
                      checkpoint: str = DEFAULT_CHECKPOINT, model=None,
                      normalize: bool = True,
                      manifest_path=None) -> ExportManifest:
    """Embed every WAV under audio_dir (recursive, background-noise folder
    excluded) into a store keyed by the path relative to audio_dir.
    Unreadable files are skipped with a log entry."""
    audio_dir = Path(audio_dir)
    if model is None:
        model = load_teacher(checkpoint)
    manifest = ExportManifest(checkpoint=str(checkpoint),
                              checkpoint_hash=model_hash(model), layer=layer)
    wavs = sorted(p for p in audio_dir.rglob("*.wav")
                  if "_background_noise_" not in p.parts)
    with StoreWriter(out_store_path) as writer:
        for path in wavs:
            uid = path.relative_to(audio_dir).as_posix()
            try:
                samples = read_wav_16k_mono(path)
            except Exception as e:
                log.warning("skipping %s: %s", uid, e)
                manifest.skipped.append(uid)
                continue
            emb = compute_embedding(model, samples, layer, normalize)
            writer.add(uid, emb)
            manifest.utterance_ids.append(uid)
            manifest.source_paths.append(str(path))
            manifest.frames.append(int(emb.shape[0]))
    if manifest_path:
        manifest.save(manifest_path)
    return manifest
