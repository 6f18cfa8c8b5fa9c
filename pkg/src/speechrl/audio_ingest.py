"""WAV decoding and Speech Commands indexing/splitting."""

from __future__ import annotations

import hashlib
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000

MAIN_COMMANDS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
                 "down", "go", "left", "no", "off", "on", "right", "stop", "up", "yes", "zero")
SUB_COMMANDS = ("bed", "bird", "cat", "dog", "happy", "house", "marvin", "sheila", "tree", "wow")

SUBSETS = {
    "binary": ("left", "right"),
    "main20": MAIN_COMMANDS,
    "all30": MAIN_COMMANDS + SUB_COMMANDS,
}


class AudioError(Exception):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class MalformedWav(AudioError):
    pass


class UnsupportedFormat(AudioError):
    pass


class DatasetError(Exception):
    pass


class MissingCommandDir(DatasetError):
    def __init__(self, command: str):
        super().__init__(f"no directory for command {command!r}")
        self.command = command


class EmptyDataset(DatasetError):
    pass


class DegenerateSplit(DatasetError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_path: str
    label_id: int | None = None


@dataclass
class DatasetIndex:
    """``entries`` holds ``(relative_path, label_id)`` pairs sorted by path."""

    root: str
    entries: list[tuple[str, int]]
    label_map: list[str]
    subset_kind: str

    def __len__(self):
        return len(self.entries)

    def paths(self) -> list[Path]:
        return [Path(self.root) / rel for rel, _ in self.entries]

    def with_entries(self, entries) -> "DatasetIndex":
        return DatasetIndex(self.root, sorted(entries), list(self.label_map), self.subset_kind)


@dataclass(frozen=True)
class SplitSpec:
    pretrain_fraction: float = 0.4
    rl_fraction: float = 0.4
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = self.fractions
        if any(f < 0 or f > 1 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must lie in [0, 1] and sum to 1, got {fr}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.pretrain_fraction, self.rl_fraction, self.eval_fraction)


def fit_length(samples: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Center-pad with zeros or center-crop to ``length`` samples."""
    n = len(samples)
    if n == length:
        return samples
    if n < length:
        lead = (length - n) // 2
        return np.pad(samples, (lead, length - n - lead))
    start = (n - length) // 2
    return samples[start:start + length]


def load_wav(path: str | Path) -> AudioClip:
    """Read a 16-bit PCM mono 16 kHz WAV file as a 1 s clip in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            nframes = w.getnframes()
            if channels != 1:
                raise UnsupportedFormat(path, f"{channels} channels, expected mono")
            if width != 2:
                raise UnsupportedFormat(path, f"{8 * width}-bit samples, expected 16-bit PCM")
            if rate != SAMPLE_RATE:
                raise UnsupportedFormat(path, f"{rate} Hz, expected {SAMPLE_RATE} Hz")
            raw = w.readframes(nframes)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormat(path, f"non-PCM encoding ({msg})") from exc
        raise MalformedWav(path, msg) from exc
    except (EOFError, ValueError) as exc:
        raise MalformedWav(path, str(exc) or "truncated header") from exc
    if len(raw) != 2 * nframes:
        raise MalformedWav(path, f"data chunk holds {len(raw)} bytes, header promises {2 * nframes}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioClip(fit_length(pcm / 32768.0), SAMPLE_RATE, str(path))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate_hz: int = SAMPLE_RATE) -> None:
    """Write amplitudes in [-1, 1] as 16-bit PCM mono; values are clipped and rounded."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate_hz)
        w.writeframes(pcm.tobytes())


def scan_dataset(root: str | Path, subset_kind: str,
                 max_per_class: int | None = None) -> DatasetIndex:
    """Index ``<root>/<command>/*.wav`` for the commands of ``subset_kind``.

    With ``max_per_class`` the first N files of each command (in path order)
    are kept. Files are not opened here.
    """
    if subset_kind not in SUBSETS:
        raise ValueError(f"unknown subset {subset_kind!r}; choose from {sorted(SUBSETS)}")
    root = Path(root)
    label_map = list(SUBSETS[subset_kind])
    entries = []
    for label_id, command in enumerate(label_map):
        d = root / command
        if not d.is_dir():
            raise MissingCommandDir(command)
        files = sorted(p.relative_to(root).as_posix() for p in d.glob("*.wav") if p.is_file())
        if max_per_class is not None:
            files = files[:max_per_class]
        entries.extend((f, label_id) for f in files)
    if not entries:
        raise EmptyDataset(f"no .wav files under {root} for subset {subset_kind}")
    return DatasetIndex(str(root), sorted(entries), label_map, subset_kind)


def _hash_key(seed: int, rel_path: str) -> bytes:
    return hashlib.sha256(f"{seed}\0{rel_path}".encode()).digest()


def _allocate(n: int, fractions) -> list[int]:
    """Split n items by fractions with largest-remainder rounding."""
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(index: DatasetIndex, spec: SplitSpec) -> tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    """Partition into (pretrain, rl, eval), stratified per class.

    Within each class files are ordered by a seed-salted SHA-256 of their
    path, then cut at the rounded fraction boundaries.
    """
    if not index.entries:
        raise EmptyDataset("cannot split an empty index")
    parts: list[list] = [[], [], []]
    by_class: dict[int, list[str]] = {}
    for rel, label in index.entries:
        by_class.setdefault(label, []).append(rel)
    for label in sorted(by_class):
        files = sorted(by_class[label], key=lambda r: _hash_key(spec.seed, r))
        pos = 0
        for k, count in enumerate(_allocate(len(files), spec.fractions)):
            parts[k].extend((r, label) for r in files[pos:pos + count])
            pos += count
    names = ("pretrain", "rl", "eval")
    for name, part, frac in zip(names, parts, spec.fractions):
        if frac > 0 and not part:
            raise DegenerateSplit(f"{name} partition is empty with fraction {frac}")
    return tuple(index.with_entries(p) for p in parts)


@dataclass
class BulkLoad:
    clips: list[AudioClip] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def load_index(index: DatasetIndex) -> BulkLoad:
    """Load every entry, skipping (with a warning) files that fail format checks."""
    out = BulkLoad()
    for (rel, label), path in zip(index.entries, index.paths()):
        try:
            clip = load_wav(path)
        except AudioError as exc:
            log.warning("skipping %s", exc)
            out.skipped.append(rel)
            continue
        clip.source_path = rel
        clip.label_id = label
        out.clips.append(clip)
    return out
