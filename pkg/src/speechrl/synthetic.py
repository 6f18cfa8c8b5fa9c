"""Synthetic stand-in corpus laid out like Speech Commands.

Each command gets a formant trajectory template; utterances are harmonic
source signals shaped by those formants with per-speaker pitch, vocal-tract
scaling, timing jitter and additive noise. Useful for exercising the full
pipeline when the real corpus is unavailable; it says nothing about
accuracy on real speech.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_ingest import SAMPLE_RATE, SUBSETS, write_wav

# (F1 start, F1 end, F2 start, F2 end) in Hz for the voiced part, plus the
# centre of a trailing fricative band (0 for none)
_TEMPLATE_SEED = 20190503


def command_template(command: str) -> tuple[float, float, float, float, float]:
    presets = {
        "left": (530.0, 560.0, 1850.0, 1650.0, 4500.0),
        "right": (700.0, 420.0, 1150.0, 2050.0, 3000.0),
    }
    if command in presets:
        return presets[command]
    h = np.random.default_rng([_TEMPLATE_SEED, *command.encode()])
    f1 = h.uniform(300, 800, size=2)
    f2 = h.uniform(900, 2400, size=2)
    fric = h.choice([0.0, h.uniform(2500, 6000)])
    return (f1[0], f1[1], f2[0], f2[1], float(fric))


def synth_utterance(command: str, rng: np.random.Generator, noise_db: tuple[float, float] = (15.0, 30.0)) -> np.ndarray:
    f1a, f1b, f2a, f2b, fric = command_template(command)
    tract = rng.uniform(0.85, 1.2)  # vocal tract length scaling
    f0 = rng.uniform(85.0, 260.0)
    dur = rng.uniform(0.35, 0.75)
    n_voiced = int(dur * SAMPLE_RATE)
    t = np.arange(n_voiced) / SAMPLE_RATE
    ramp = t / dur
    jit = rng.normal(0.0, 60.0, size=4)
    f1 = tract * (f1a + jit[0] + (f1b - f1a + jit[1]) * ramp)
    f2 = tract * (f2a + jit[2] + (f2b - f2a + jit[3]) * ramp)
    f3 = tract * 2600.0
    pitch = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 4) * t) - 0.1 * ramp)
    phase = 2 * np.pi * np.cumsum(pitch) / SAMPLE_RATE
    voiced = np.zeros(n_voiced)
    for k in range(1, int(4000 / f0) + 1):
        fk = k * pitch
        amp = (np.exp(-((fk - f1) / 120.0) ** 2) + 0.7 * np.exp(-((fk - f2) / 160.0) ** 2)
               + 0.3 * np.exp(-((fk - f3) / 200.0) ** 2)) / np.sqrt(k)
        voiced += amp * np.sin(k * phase)
    env = np.sin(np.pi * np.clip(ramp, 0, 1)) ** 0.5
    voiced *= env
    parts = [voiced]
    if fric > 0:
        n_f = int(rng.uniform(0.06, 0.14) * SAMPLE_RATE)
        noise = rng.normal(size=n_f + 64)
        spec = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(len(noise), 1 / SAMPLE_RATE)
        spec *= np.exp(-((freqs - tract * fric) / 700.0) ** 2)
        burst = np.fft.irfft(spec, len(noise))[:n_f]
        burst *= np.hanning(n_f)
        burst /= np.max(np.abs(burst)) + 1e-12
        parts.append(np.zeros(int(rng.uniform(0.01, 0.04) * SAMPLE_RATE)))
        parts.append(0.4 * burst)
    utt = np.concatenate(parts)
    utt /= np.max(np.abs(utt)) + 1e-12
    clip = np.zeros(SAMPLE_RATE)
    start = rng.integers(0, SAMPLE_RATE - len(utt)) if len(utt) < SAMPLE_RATE else 0
    seg = utt[:SAMPLE_RATE - start]
    clip[start:start + len(seg)] = seg
    snr_db = rng.uniform(*noise_db)
    sig_pow = np.mean(seg ** 2)
    clip += rng.normal(0.0, np.sqrt(sig_pow / 10 ** (snr_db / 10)), size=SAMPLE_RATE)
    return 0.5 * rng.uniform(0.2, 1.0) * clip / (np.max(np.abs(clip)) + 1e-12)


def make_corpus(root: str | Path, subset: str = "binary", per_class: int = 200, seed: int = 0,
                noise_db: tuple[float, float] = (15.0, 30.0)) -> Path:
    """Write ``per_class`` WAV files for every command of ``subset`` under ``root``."""
    root = Path(root)
    for label, command in enumerate(SUBSETS[subset]):
        d = root / command
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng([seed, label, i])
            speaker = rng.integers(0, 1 << 32)
            write_wav(d / f"{speaker:08x}_nohash_{i}.wav", synth_utterance(command, rng, noise_db))
    return root
