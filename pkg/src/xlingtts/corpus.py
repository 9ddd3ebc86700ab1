"""Synthetic multilingual mel corpus with known speaker and language factors.

Every speech frame is the sum of a phone template, the speaker's additive
signature, a spectral tilt ramp, a slow per-language contour and Gaussian
noise. Because all factors are linear, the speaker part of any mel can be
recovered analytically (:func:`oracle_speaker_vector`).
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

GENERATOR_VERSION = 1
STORE_MAGIC = b"XLMS"
STORE_VERSION = 1
HEADER = struct.Struct("<4sIII")  # magic, version, n_mels, reserved

MANIFEST_NAME = "manifest.tsv"
STORE_NAME = "mels.bin"
CONFIG_NAME = "corpus.cfg"

# seed-sequence stream ids
_STREAM_SPECS = 0
_STREAM_TEXT = 1
_STREAM_RENDER = 2
_STREAM_EXTRA = 3


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_languages: int = 4
    speakers_per_language: int = 3
    phones_per_language: int = 8
    n_mels: int = 20
    max_utts_per_language: int = 120
    # ratio between the largest and smallest language; counts follow a geometric ladder
    imbalance_ratio: float = 5.0
    min_phones: int = 4
    max_phones: int = 8
    min_duration: int = 2
    max_duration: int = 4
    # silence kept at each end after trimming
    silence_frames: int = 2
    raw_silence_max: int = 6
    silence_level: float = -4.0
    silence_floor: float = -3.0
    template_scale: float = 1.0
    signature_min: float = 1.0
    signature_max: float = 1.5
    tilt_max: float = 0.3
    contour_min: float = 0.2
    contour_max: float = 0.5
    contour_period_min: int = 8
    contour_period_max: int = 16
    noise_std: float = 0.1
    # every dev_every-th utterance of a speaker is held out
    dev_every: int = 10

    def validate(self) -> None:
        if self.n_languages < 2:
            raise CorpusError("need at least 2 languages for cross-lingual experiments")
        if self.speakers_per_language < 2:
            raise CorpusError("need at least 2 speakers per language")
        if self.phones_per_language < 1 or self.n_mels < 2:
            raise CorpusError("phones_per_language must be >= 1 and n_mels >= 2")
        if self.imbalance_ratio < 1:
            raise CorpusError("imbalance_ratio must be >= 1")
        if not 1 <= self.min_phones <= self.max_phones:
            raise CorpusError("need 1 <= min_phones <= max_phones")
        if not 1 <= self.min_duration <= self.max_duration:
            raise CorpusError("durations must be >= 1 frame")
        if self.raw_silence_max < self.silence_frames:
            raise CorpusError("raw_silence_max must be >= silence_frames")
        if self.silence_level >= self.silence_floor:
            raise CorpusError("silence_level must lie below silence_floor")
        if not 0 < self.signature_min <= self.signature_max:
            raise CorpusError("signature norm band must satisfy 0 < min <= max")
        if self.max_utts_per_language < self.speakers_per_language:
            raise CorpusError("every speaker needs at least one utterance")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "CorpusConfig":
        return cls(**parse_kv(text, cls))

    def replace(self, **kw) -> "CorpusConfig":
        d = asdict(self)
        d.update(kw)
        return CorpusConfig(**d)


def parse_kv(text: str, cls) -> dict:
    """Parse ``key = value`` lines into kwargs typed after the dataclass fields."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorpusError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise CorpusError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def _coerce(value: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ.startswith("Optional["):
        return None if value == "None" else _coerce(value, typ[len("Optional["):-1])
    if typ == "bool":
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise CorpusError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value.strip("'\"")


@dataclass
class LanguageSpec:
    lang_id: int
    phone_ids: Tuple[int, ...]
    durations: np.ndarray  # [n_phones] frames per phone
    templates: np.ndarray  # [n_phones, n_mels]
    contour_amp: float
    contour_period: int

    def index(self, phone: int) -> int:
        return phone - self.phone_ids[0]

    def contains(self, phone: int) -> bool:
        return self.phone_ids[0] <= phone <= self.phone_ids[-1]

    def contour(self, n_frames: int) -> np.ndarray:
        t = np.arange(n_frames)
        return self.contour_amp * np.sin(2 * np.pi * t / self.contour_period)

    def expected_frames(self, phones: Sequence[int]) -> int:
        return int(sum(self.durations[self.index(p)] for p in phones))

    def template_mean(self, phones: Sequence[int]) -> np.ndarray:
        """Duration-weighted mean phone template of a phone sequence."""
        idx = [self.index(p) for p in phones]
        d = self.durations[idx].astype(np.float64)
        return (d[:, None] * self.templates[idx]).sum(0) / d.sum()


@dataclass
class SpeakerSpec:
    speaker_id: int
    native_lang: int
    signature: np.ndarray  # [n_mels]
    tilt: float

    def bias(self) -> np.ndarray:
        """Signature plus tilt ramp: the full additive speaker term."""
        return self.signature + tilt_ramp(self.tilt, len(self.signature))


def tilt_ramp(tilt: float, n_mels: int) -> np.ndarray:
    return tilt * np.linspace(-1.0, 1.0, n_mels)


@dataclass
class Utterance:
    utt_id: int
    speaker_id: int
    lang_id: int
    phones: Tuple[int, ...]
    mel: np.ndarray  # float32 [n_frames, n_mels]
    split: str = "train"

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    languages: List[LanguageSpec]
    speakers: List[SpeakerSpec]
    utterances: List[Utterance] = field(default_factory=list)

    @property
    def n_phones(self) -> int:
        """Phone vocabulary size including the padding id 0."""
        return 1 + self.config.n_languages * self.config.phones_per_language

    def speaker(self, speaker_id: int) -> SpeakerSpec:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(f"unknown speaker {speaker_id}")

    def language_counts(self) -> Dict[int, int]:
        counts = {lang.lang_id: 0 for lang in self.languages}
        for u in self.utterances:
            counts[u.lang_id] += 1
        return counts

    def by_split(self, split: str) -> List[Utterance]:
        return [u for u in self.utterances if u.split == split]

    def speakers_of(self, lang_id: int) -> List[int]:
        return [s.speaker_id for s in self.speakers if s.native_lang == lang_id]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(manifest_text(self).encode())
        h.update(store_bytes(self))
        return h.hexdigest()


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=stream))


def language_ladder(config: CorpusConfig) -> List[int]:
    """Per-language utterance counts on a geometric ladder from max down to max/ratio."""
    n = config.n_languages
    out = []
    for i in range(n):
        c = config.max_utts_per_language * config.imbalance_ratio ** (-i / (n - 1))
        out.append(max(config.speakers_per_language, int(round(c))))
    return out


def make_specs(config: CorpusConfig, seed: int) -> Tuple[List[LanguageSpec], List[SpeakerSpec]]:
    config.validate()
    rng = _rng(seed, _STREAM_SPECS)
    P, M = config.phones_per_language, config.n_mels
    languages = []
    for l in range(config.n_languages):
        templates = rng.normal(0.0, config.template_scale, size=(P, M))
        # centered so a language's average spectrum carries no speaker-like offset
        templates -= templates.mean(0, keepdims=True)
        durations = rng.integers(config.min_duration, config.max_duration + 1, size=P)
        languages.append(LanguageSpec(
            lang_id=l,
            phone_ids=tuple(range(1 + l * P, 1 + (l + 1) * P)),
            durations=durations,
            templates=templates,
            contour_amp=float(rng.uniform(config.contour_min, config.contour_max)),
            contour_period=int(rng.integers(config.contour_period_min, config.contour_period_max + 1)),
        ))
    speakers = []
    for l in range(config.n_languages):
        for j in range(config.speakers_per_language):
            speakers.append(_draw_speaker(rng, config, l * config.speakers_per_language + j, l))
    return languages, speakers


def _draw_speaker(rng, config: CorpusConfig, speaker_id: int, lang: int) -> SpeakerSpec:
    v = rng.normal(size=config.n_mels)
    norm = rng.uniform(config.signature_min, config.signature_max)
    return SpeakerSpec(
        speaker_id=speaker_id,
        native_lang=lang,
        signature=v / np.linalg.norm(v) * norm,
        tilt=float(rng.uniform(-config.tilt_max, config.tilt_max)),
    )


def render_utterance(
    phones: Sequence[int],
    speaker: SpeakerSpec,
    language: LanguageSpec,
    seed: int,
    *,
    noise_std: float = 0.0,
    silence: Tuple[int, int] = (2, 2),
    silence_level: float = -4.0,
    utt_id: int = -1,
) -> Utterance:
    """Render one utterance; speech frames get template + speaker + contour + noise."""
    if len(phones) == 0:
        raise CorpusError("empty phone sequence")
    bad = [p for p in phones if not language.contains(p)]
    if bad:
        raise CorpusError(f"phones {bad} not in language {language.lang_id}")
    idx = [language.index(p) for p in phones]
    rows = np.repeat(language.templates[idx], language.durations[idx], axis=0)
    n_speech = rows.shape[0]
    speech = rows + speaker.bias()[None, :] + language.contour(n_speech)[:, None]
    if noise_std > 0:
        speech = speech + _rng(seed).normal(0.0, noise_std, size=speech.shape)
    lead, trail = silence
    M = speech.shape[1]
    mel = np.concatenate([
        np.full((lead, M), silence_level),
        speech,
        np.full((trail, M), silence_level),
    ]).astype(np.float32)
    return Utterance(utt_id, speaker.speaker_id, language.lang_id, tuple(int(p) for p in phones), mel)


def silence_mask(mel: np.ndarray, floor: float) -> np.ndarray:
    return np.all(mel < floor, axis=1)


def trim_silence(mel: np.ndarray, target_frames: int, *, floor: float = -3.0,
                 level: float = -4.0) -> np.ndarray:
    """Keep exactly ``target_frames`` silent frames at both ends.

    Missing silence is padded with frames at ``level``.
    """
    quiet = silence_mask(mel, floor)
    if quiet.all():
        raise CorpusError("mel contains no speech frames")
    lead = int(np.argmin(quiet))
    trail = int(np.argmin(quiet[::-1]))
    interior = mel[lead:mel.shape[0] - trail]
    if lead < target_frames or trail < target_frames:
        log.info("padding silence: lead=%d trail=%d target=%d", lead, trail, target_frames)
    pad = lambda n: np.full((n, mel.shape[1]), level, dtype=mel.dtype)  # noqa: E731
    head = mel[lead - target_frames:lead] if lead >= target_frames else \
        np.concatenate([pad(target_frames - lead), mel[:lead]])
    end = mel.shape[0] - trail
    tail = mel[end:end + target_frames] if trail >= target_frames else \
        np.concatenate([mel[end:], pad(target_frames - trail)])
    return np.concatenate([head, interior, tail])


def oracle_speaker_vector(mel: np.ndarray, phones: Sequence[int], language: LanguageSpec,
                          floor: float = -3.0) -> np.ndarray:
    """Recover the additive speaker term of a mel rendered (or synthesized) in ``language``.

    Time-mean of the speech frames minus the duration-weighted phone template
    mean and the contour mean over the detected speech length.
    """
    mel = np.asarray(mel, dtype=np.float64)
    speech = mel[~silence_mask(mel, floor)]
    if speech.shape[0] == 0:
        raise CorpusError("no speech frames: cannot estimate speaker vector")
    return speech.mean(0) - language.template_mean(phones) - language.contour(speech.shape[0]).mean()


def build_corpus(config: CorpusConfig, seed: int) -> Corpus:
    languages, speakers = make_specs(config, seed)
    text_rng = _rng(seed, _STREAM_TEXT)
    S = config.speakers_per_language
    utts: List[Utterance] = []
    uid = 0
    for lang, count in zip(languages, language_ladder(config)):
        for k in range(count):
            spk = speakers[lang.lang_id * S + k % S]
            n = int(text_rng.integers(config.min_phones, config.max_phones + 1))
            phones = text_rng.choice(lang.phone_ids, size=n)
            lead, trail = text_rng.integers(config.silence_frames, config.raw_silence_max + 1, size=2)
            u = render_utterance(
                phones, spk, lang, seed=_seed_for(seed, uid),
                noise_std=config.noise_std, silence=(int(lead), int(trail)),
                silence_level=config.silence_level, utt_id=uid,
            )
            u.mel = trim_silence(u.mel, config.silence_frames, floor=config.silence_floor,
                                 level=config.silence_level)
            u.split = "dev" if (k // S) % config.dev_every == config.dev_every - 1 else "train"
            utts.append(u)
            uid += 1
    return Corpus(config, seed, languages, speakers, utts)


def _seed_for(seed: int, uid: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(_STREAM_RENDER, uid)).generate_state(1)[0])


def new_speaker(corpus: Corpus, lang_id: int, n_utts: int, seed: int) -> Tuple[SpeakerSpec, List[Utterance]]:
    """Draw an unseen speaker for ``lang_id`` with ``n_utts`` utterances (not added to the corpus)."""
    cfg = corpus.config
    rng = _rng(seed, _STREAM_EXTRA, lang_id)
    spk = _draw_speaker(rng, cfg, max(s.speaker_id for s in corpus.speakers) + 1, lang_id)
    lang = corpus.languages[lang_id]
    uid0 = max(u.utt_id for u in corpus.utterances) + 1
    utts = []
    for k in range(n_utts):
        n = int(rng.integers(cfg.min_phones, cfg.max_phones + 1))
        phones = rng.choice(lang.phone_ids, size=n)
        u = render_utterance(phones, spk, lang, seed=_seed_for(seed, uid0 + k),
                             noise_std=cfg.noise_std, silence=(cfg.silence_frames,) * 2,
                             silence_level=cfg.silence_level, utt_id=uid0 + k)
        utts.append(u)
    return spk, utts


# ---------------------------------------------------------------- disk format

def manifest_text(corpus: Corpus) -> str:
    counts = corpus.language_counts()
    lines = [
        f"# generator_version={GENERATOR_VERSION}",
        f"# seed={corpus.seed}",
        "# language_counts=" + ",".join(f"{k}:{v}" for k, v in sorted(counts.items())),
        "# utt_id\tspeaker_id\tlang_id\tn_frames\tphones\toffset\tsplit",
    ]
    offset = HEADER.size
    for u in corpus.utterances:
        phones = ",".join(map(str, u.phones))
        lines.append(f"{u.utt_id}\t{u.speaker_id}\t{u.lang_id}\t{u.n_frames}\t{phones}\t{offset}\t{u.split}")
        offset += u.mel.size * 4
    return "\n".join(lines) + "\n"


def store_bytes(corpus: Corpus) -> bytes:
    parts = [HEADER.pack(STORE_MAGIC, STORE_VERSION, corpus.config.n_mels, 0)]
    parts.extend(u.mel.astype("<f4").tobytes() for u in corpus.utterances)
    return b"".join(parts)


def save_corpus(corpus: Corpus, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / CONFIG_NAME).write_text(corpus.config.to_text() + f"seed = {corpus.seed}\n")
    (d / MANIFEST_NAME).write_text(manifest_text(corpus))
    (d / STORE_NAME).write_bytes(store_bytes(corpus))
    return d


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    cfg_lines, seed = [], None
    for line in (d / CONFIG_NAME).read_text().splitlines():
        if line.split("=", 1)[0].strip() == "seed":
            seed = int(line.split("=", 1)[1])
        else:
            cfg_lines.append(line)
    if seed is None:
        raise CorpusError(f"{d / CONFIG_NAME}: missing seed")
    config = CorpusConfig.from_text("\n".join(cfg_lines))
    languages, speakers = make_specs(config, seed)

    blob = (d / STORE_NAME).read_bytes()
    magic, version, n_mels, _ = HEADER.unpack_from(blob)
    if magic != STORE_MAGIC or version != STORE_VERSION:
        raise CorpusError(f"{d / STORE_NAME}: bad header {magic!r} v{version}")
    if n_mels != config.n_mels:
        raise CorpusError(f"store has n_mels={n_mels}, config says {config.n_mels}")
    utts = []
    for line in (d / MANIFEST_NAME).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        uid, spk, lang, n, phones, offset, split = line.split("\t")
        n, offset = int(n), int(offset)
        mel = np.frombuffer(blob, dtype="<f4", count=n * n_mels, offset=offset).reshape(n, n_mels)
        utts.append(Utterance(int(uid), int(spk), int(lang), tuple(int(p) for p in phones.split(",")),
                              mel.astype(np.float32), split))
    return Corpus(config, seed, languages, speakers, utts)


def read_manifest_header(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.startswith("#"):
            break
        if "=" in line:
            k, v = line[1:].split("=", 1)
            out[k.strip()] = v.strip()
    return out


def oracle_for(corpus: Corpus, mel: np.ndarray, phones: Sequence[int], lang_id: int) -> np.ndarray:
    return oracle_speaker_vector(mel, phones, corpus.languages[lang_id], corpus.config.silence_floor)


def speaker_reference(corpus: Corpus, speaker_id: int, utts: Optional[List[Utterance]] = None) -> np.ndarray:
    """Mean oracle vector over a speaker's real utterances."""
    utts = utts if utts is not None else [u for u in corpus.utterances if u.speaker_id == speaker_id]
    vecs = [oracle_for(corpus, u.mel, u.phones, u.lang_id) for u in utts if u.speaker_id == speaker_id]
    if not vecs:
        raise CorpusError(f"speaker {speaker_id} has no utterances")
    return np.mean(vecs, axis=0)
