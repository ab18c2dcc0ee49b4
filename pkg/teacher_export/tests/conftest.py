import wave

import numpy as np
import pytest


def write_wav(path, samples, rate=16000):
    pcm = (np.clip(samples, -1, 1) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


@pytest.fixture(scope="session")
def wav_dir(tmp_path_factory):
    """Six one-second clips in a word-directory layout plus one junk file."""
    root = tmp_path_factory.mktemp("wavs")
    rng = np.random.default_rng(0)
    t = np.arange(16000) / 16000
    for word, freq in [("yes", 440.0), ("no", 550.0)]:
        d = root / word
        d.mkdir()
        for i in range(3):
            wav = 0.3 * np.sin(2 * np.pi * freq * t + rng.uniform(0, 6.28))
            wav += rng.normal(0, 0.01, 16000)
            write_wav(d / f"clip{i}_nohash_0.wav", wav)
    (root / "yes" / "broken.wav").write_bytes(b"not a wav at all")
    noise = root / "_background_noise_"
    noise.mkdir()
    write_wav(noise / "hum.wav", rng.normal(0, 0.05, 32000))
    return root


@pytest.fixture(scope="session")
def tiny_teacher():
    """Random-init encoder with the standard conv frontend (49 frames/sec)
    but a single transformer block, for fast deterministic tests."""
    import torch
    from transformers import Wav2Vec2Config, Wav2Vec2Model

    torch.manual_seed(0)
    model = Wav2Vec2Model(Wav2Vec2Config(num_hidden_layers=1))
    model.eval()
    return model
