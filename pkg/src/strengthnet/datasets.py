"""Corpus manifests, train/val/test splitting and the synthetic emotional corpus."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InsufficientData, InvalidInput, ParseError
from .features import SAMPLE_RATE, Waveform, write_wav

EMOTIONS = ("neutral", "happy", "sad", "angry", "surprise")
TRAINED_EMOTIONS = ("happy", "sad", "angry", "surprise")
SPLITS = ("train", "val", "test", "unassigned")
MANIFEST_HEADER = ["utterance_id", "audio_path", "dataset_id", "emotion", "speaker_id", "split"]
TRUTH_HEADER = ["utterance_id", "strength_param"]


@dataclass(frozen=True)
class ManifestRow:
    utterance_id: str
    audio_path: str
    dataset_id: str
    emotion: str
    speaker_id: str
    split: str = "unassigned"


@dataclass(frozen=True)
class CorpusManifest:
    rows: tuple[ManifestRow, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        seen = set()
        for r in self.rows:
            if r.utterance_id in seen:
                raise InvalidInput(f"duplicate utterance_id {r.utterance_id!r}")
            seen.add(r.utterance_id)
            if r.emotion not in EMOTIONS:
                raise InvalidInput(f"unknown emotion {r.emotion!r} for {r.utterance_id!r}")
            if r.split not in SPLITS:
                raise InvalidInput(f"unknown split {r.split!r} for {r.utterance_id!r}")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __add__(self, other: "CorpusManifest") -> "CorpusManifest":
        return CorpusManifest(self.rows + other.rows)

    @property
    def ids(self) -> list[str]:
        return [r.utterance_id for r in self.rows]

    @property
    def dataset_ids(self) -> list[str]:
        return sorted({r.dataset_id for r in self.rows})

    def filter(self, *, split=None, emotion=None, dataset_id=None) -> "CorpusManifest":
        def keep(r):
            return ((split is None or r.split in _as_set(split))
                    and (emotion is None or r.emotion in _as_set(emotion))
                    and (dataset_id is None or r.dataset_id in _as_set(dataset_id)))
        return CorpusManifest(tuple(r for r in self.rows if keep(r)))

    def missing_audio(self) -> list[str]:
        return [r.utterance_id for r in self.rows if not Path(r.audio_path).is_file()]


def _as_set(v):
    return {v} if isinstance(v, str) else set(v)


def load_manifest(path) -> CorpusManifest:
    """Read a manifest CSV; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    seen = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ParseError(f"expected header {','.join(MANIFEST_HEADER)}", line=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(MANIFEST_HEADER):
                raise ParseError(f"expected {len(MANIFEST_HEADER)} fields, got {len(rec)}", line=lineno)
            uid, audio, dataset_id, emotion, speaker, split = (c.strip() for c in rec)
            if not uid:
                raise ParseError("empty utterance_id", line=lineno)
            if emotion not in EMOTIONS:
                raise ParseError(f"row {uid!r}: unknown emotion {emotion!r}", line=lineno)
            split = split or "unassigned"
            if split not in SPLITS:
                raise ParseError(f"row {uid!r}: unknown split {split!r}", line=lineno)
            if uid in seen:
                raise ParseError(f"duplicate utterance_id {uid!r} (first on line {seen[uid]})", line=lineno)
            seen[uid] = lineno
            audio_path = Path(audio)
            if not audio_path.is_absolute():
                audio_path = base / audio_path
            rows.append(ManifestRow(uid, str(audio_path), dataset_id, emotion, speaker, split))
    return CorpusManifest(tuple(rows))


def save_manifest(m: CorpusManifest, path, relative_to=None) -> None:
    relative_to = Path(relative_to) if relative_to is not None else Path(path).parent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in m:
            audio = Path(r.audio_path)
            try:
                audio = audio.resolve().relative_to(relative_to.resolve())
            except ValueError:
                pass
            writer.writerow([r.utterance_id, str(audio), r.dataset_id, r.emotion, r.speaker_id, r.split])


def split_counts(n: int, ratios=(8, 1, 1)) -> tuple[int, int, int]:
    """Largest-remainder apportionment; val and test are never left empty when n >= 3."""
    if n < 3:
        raise InsufficientData(f"need at least 3 items to split, got {n}")
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in (1, 2):
        if counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] = 1
    return tuple(counts)


def split_manifest(m: CorpusManifest, ratios=(8, 1, 1), rng_seed: int = 0,
                   speaker_disjoint: bool = False) -> CorpusManifest:
    """Stratified split per (dataset_id, emotion) group; deterministic for a seed.

    With ``speaker_disjoint`` whole speakers are apportioned per dataset instead.
    """
    rng = np.random.default_rng(rng_seed)
    assignment: dict[str, str] = {}
    names = ("train", "val", "test")
    if speaker_disjoint:
        for ds in m.dataset_ids:
            speakers = sorted({r.speaker_id for r in m if r.dataset_id == ds})
            if len(speakers) < 3:
                raise InsufficientData(f"dataset {ds!r} has {len(speakers)} speakers; need >= 3")
            perm = rng.permutation(len(speakers))
            counts = split_counts(len(speakers), ratios)
            bounds = np.cumsum(counts)
            spk_split = {}
            for pos, k in enumerate(perm):
                spk_split[speakers[k]] = names[int(np.searchsorted(bounds, pos, side="right"))]
            for r in m:
                if r.dataset_id == ds:
                    assignment[r.utterance_id] = spk_split[r.speaker_id]
    else:
        groups: dict[tuple[str, str], list[str]] = {}
        for r in m:
            groups.setdefault((r.dataset_id, r.emotion), []).append(r.utterance_id)
        for key in sorted(groups):
            ids = groups[key]
            if len(ids) < 3:
                raise InsufficientData(f"group dataset={key[0]!r} emotion={key[1]!r} has {len(ids)} utterances; need >= 3")
            counts = split_counts(len(ids), ratios)
            perm = rng.permutation(len(ids))
            bounds = np.cumsum(counts)
            for pos, k in enumerate(perm):
                assignment[ids[k]] = names[int(np.searchsorted(bounds, pos, side="right"))]
    return CorpusManifest(tuple(replace(r, split=assignment[r.utterance_id]) for r in m))


# ---------------------------------------------------------------------------
# manifest builders for the public corpora's directory conventions

_ESD_EMOTIONS = {"Neutral": "neutral", "Happy": "happy", "Sad": "sad", "Angry": "angry", "Surprise": "surprise"}
_RAVDESS_EMOTIONS = {"01": "neutral", "03": "happy", "04": "sad", "05": "angry", "08": "surprise"}
_SAVEE_PREFIX = re.compile(r"^(sa|su|a|h|n|d|f)(\d+)$")
_SAVEE_EMOTIONS = {"n": "neutral", "h": "happy", "sa": "sad", "a": "angry", "su": "surprise"}


def esd_manifest(root, dataset_id="ESD", english_only=True) -> CorpusManifest:
    """ESD layout: <root>/<speaker>/<Emotion>/<speaker>_<num>.wav (speakers 0011-0020 are English)."""
    rows = []
    for wav in sorted(Path(root).glob("*/*/*.wav")):
        speaker, emo_dir = wav.parent.parent.name, wav.parent.name
        if emo_dir not in _ESD_EMOTIONS:
            continue
        if english_only and speaker.isdigit() and int(speaker) <= 10:
            continue
        rows.append(ManifestRow(f"{dataset_id}_{wav.stem}", str(wav), dataset_id,
                                _ESD_EMOTIONS[emo_dir], speaker))
    return CorpusManifest(tuple(rows))


def ravdess_manifest(root, dataset_id="RAVDESS") -> CorpusManifest:
    """RAVDESS speech layout: Actor_XX/MM-VC-EE-II-SS-RR-AA.wav."""
    rows = []
    for wav in sorted(Path(root).glob("Actor_*/*.wav")):
        parts = wav.stem.split("-")
        if len(parts) != 7 or parts[1] != "01":  # vocal channel 01 = speech
            continue
        emotion = _RAVDESS_EMOTIONS.get(parts[2])
        if emotion is None:
            continue
        rows.append(ManifestRow(f"{dataset_id}_{wav.stem}", str(wav), dataset_id, emotion, f"actor{parts[6]}"))
    return CorpusManifest(tuple(rows))


def savee_manifest(root, dataset_id="SAVEE") -> CorpusManifest:
    """SAVEE layout: AudioData/<speaker>/<prefix><nn>.wav with a/h/n/sa/su prefixes."""
    rows = []
    for wav in sorted(Path(root).glob("*/*.wav")):
        match = _SAVEE_PREFIX.match(wav.stem)
        if not match or match.group(1) not in _SAVEE_EMOTIONS:
            continue
        speaker = wav.parent.name
        rows.append(ManifestRow(f"{dataset_id}_{speaker}_{wav.stem}", str(wav), dataset_id,
                                _SAVEE_EMOTIONS[match.group(1)], speaker))
    return CorpusManifest(tuple(rows))


# ---------------------------------------------------------------------------
# synthetic corpus

# relative harmonic amplitudes (8 partials) per emotion
TIMBRES = {
    "neutral": np.array([1.0, 0.5, 0.33, 0.25, 0.2, 0.17, 0.14, 0.12]),
    "happy": np.array([0.6, 1.0, 0.9, 0.7, 0.35, 0.2, 0.1, 0.05]),
    "sad": np.array([1.0, 0.3, 0.1, 0.04, 0.02, 0.01, 0.005, 0.0]),
    "angry": np.array([0.8, 0.3, 1.0, 0.3, 0.9, 0.3, 0.7, 0.3]),
    "surprise": np.array([0.3, 0.2, 0.3, 0.5, 0.8, 1.0, 0.9, 0.7]),
}
VIBRATO_RATE = 5.5
AM_RATE = 4.0
BASE_RMS = 0.1
RAMP_SECONDS = 0.02
TIMBRE_FLOOR = 0.3  # share of the emotion timbre present at zero strength


@dataclass(frozen=True)
class SyntheticSpec:
    utterance_id: str
    base_f0: float
    strength: float  # designed strength s* in [0, 1]
    emotion: str
    duration: float
    rng_seed: int
    dataset_id: str = "synthA"
    speaker_id: str = "spk0"
    noise_level: float = 0.002  # std of additive white noise
    tilt_db_per_octave: float = 0.0  # recording-channel coloration

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise InvalidInput(f"strength must lie in [0, 1], got {self.strength}")
        if self.emotion not in EMOTIONS:
            raise InvalidInput(f"unknown emotion {self.emotion!r}")
        if self.emotion == "neutral" and self.strength != 0.0:
            raise InvalidInput("neutral utterances must have strength 0")
        if self.duration <= 0 or self.base_f0 <= 0:
            raise InvalidInput("duration and base_f0 must be positive")


def synthesize(spec: SyntheticSpec, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Harmonic tone whose modulation and energy grow with the designed strength.

    vibrato depth = 3 * s semitones, AM depth = 0.5 * s, energy scale = 0.5 + 0.5 * s.
    The partial amplitudes move from the neutral template toward the emotion's
    template as s grows (TIMBRE_FLOOR of the way at s = 0).
    """
    rng = np.random.default_rng(spec.rng_seed)
    n = int(round(spec.duration * sample_rate))
    t = np.arange(n) / sample_rate
    vib_phase, am_phase = rng.uniform(0, 2 * np.pi, size=2)
    partial_phases = rng.uniform(0, 2 * np.pi, size=len(TIMBRES[spec.emotion]))
    noise = rng.standard_normal(n)

    s = spec.strength
    semitones = 3.0 * s * np.sin(2 * np.pi * VIBRATO_RATE * t + vib_phase)
    inst_f0 = spec.base_f0 * 2.0 ** (semitones / 12.0)
    phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate

    blend = 0.0 if spec.emotion == "neutral" else TIMBRE_FLOOR + (1.0 - TIMBRE_FLOOR) * s
    amps = TIMBRES["neutral"] + blend * (TIMBRES[spec.emotion] - TIMBRES["neutral"])
    k = np.arange(1, len(amps) + 1)
    amps = amps * 10.0 ** (spec.tilt_db_per_octave * np.log2(k) / 20.0)
    amps[k * spec.base_f0 * 2.0 ** 0.25 >= sample_rate / 2] = 0.0
    # unit-RMS unmodulated tone before the strength-dependent gains
    amps = amps / np.sqrt(0.5 * np.sum(amps**2))
    tone = (amps[:, None] * np.sin(k[:, None] * phase[None, :] + partial_phases[:, None])).sum(axis=0)

    envelope = (0.5 + 0.5 * s) * (1.0 + 0.5 * s * np.sin(2 * np.pi * AM_RATE * t + am_phase))
    ramp = np.minimum(1.0, np.minimum(t, t[::-1]) / RAMP_SECONDS) if n > 1 else np.ones(n)
    y = BASE_RMS * tone * envelope * ramp + spec.noise_level * noise
    return Waveform(np.clip(y, -1.0, 1.0), sample_rate)


@dataclass
class CorpusProfile:
    """Corpus-level recording conditions for a synthetic dataset."""
    dataset_id: str
    f0_range: tuple[float, float] = (100.0, 180.0)
    duration_range: tuple[float, float] = (0.8, 1.3)
    noise_range: tuple[float, float] = (0.002, 0.002)
    tilt_db_per_octave: float = 0.0
    n_speakers: int = 4
    extra: dict = field(default_factory=dict)


PROFILES = {
    "synthA": CorpusProfile("synthA"),
    "synthB": CorpusProfile("synthB", f0_range=(170.0, 280.0), noise_range=(0.002, 0.03),
                            tilt_db_per_octave=-3.0),
}


def synthetic_corpus_specs(profile: CorpusProfile | str, n_per_emotion: int, n_neutral: int,
                           rng_seed: int = 0, emotions=TRAINED_EMOTIONS) -> list[SyntheticSpec]:
    """Draw per-utterance specs: s* ~ U[0, 1] for emotional speech, 0 for neutral."""
    if isinstance(profile, str):
        profile = PROFILES[profile]
    rng = np.random.default_rng(rng_seed)
    specs = []
    plan = [("neutral", n_neutral)] + [(e, n_per_emotion) for e in emotions]
    for emotion, count in plan:
        for i in range(count):
            speaker = int(rng.integers(profile.n_speakers))
            strength = 0.0 if emotion == "neutral" else float(rng.uniform(0.0, 1.0))
            specs.append(SyntheticSpec(
                utterance_id=f"{profile.dataset_id}_{emotion}_{i:04d}",
                base_f0=float(rng.uniform(*profile.f0_range)),
                strength=strength,
                emotion=emotion,
                duration=float(rng.uniform(*profile.duration_range)),
                rng_seed=int(rng.integers(2**31)),
                dataset_id=profile.dataset_id,
                speaker_id=f"{profile.dataset_id}_spk{speaker}",
                noise_level=float(rng.uniform(*profile.noise_range)),
                tilt_db_per_octave=profile.tilt_db_per_octave,
            ))
    return specs


def generate_synthetic_corpus(specs, out_dir) -> tuple[CorpusManifest, dict[str, float]]:
    """Write WAVs, ``manifest.csv`` and ``strength_truth.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rows, truth = [], {}
    for spec in specs:
        wav_path = audio_dir / f"{spec.utterance_id}.wav"
        write_wav(wav_path, synthesize(spec))
        rows.append(ManifestRow(spec.utterance_id, str(wav_path), spec.dataset_id,
                                spec.emotion, spec.speaker_id))
        truth[spec.utterance_id] = spec.strength
    manifest = CorpusManifest(tuple(rows))
    save_manifest(manifest, out_dir / "manifest.csv")
    save_truth(truth, out_dir / "strength_truth.csv")
    return manifest, truth


def save_truth(truth: dict[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRUTH_HEADER)
        for uid, s in truth.items():
            writer.writerow([uid, repr(float(s))])


def load_truth(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRUTH_HEADER:
            raise ParseError(f"expected header {','.join(TRUTH_HEADER)}", line=1)
        return {r["utterance_id"]: float(r["strength_param"]) for r in reader}
