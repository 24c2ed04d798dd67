"""Deterministic synthetic speaker corpus.

Speakers are prototypes (pitch, formant triple, 40-dim feature centroid);
utterances are either waveforms (harmonic stacks shaped by formant
resonances) or feature sequences (centroid plus AR(1) noise). A noisy
variant of each utterance is produced by additive noise at a target SNR
plus a channel gain. Everything derives from PCG64 streams keyed by
(corpus seed, item id), so parallel and serial generation agree bit for
bit and regeneration is reproducible across platforms.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import audio
from .audio import FeatureSequence, PcmSignal
from .errors import ConfigError, DataError, FormatError
from .trials import NONTARGET, TARGET, Trial, TrialSet

SAMPLE_RATE = 16000
MIN_FRAMES, MAX_FRAMES = 20, 200
AR_COEFF = 0.9
INNOVATION_SD = 0.5
CENTROID_SD = 1.5
CLEAN, NOISY = "clean", "noisy"
MANIFEST_FORMAT = "drvec-corpus-v1"


def stream(seed: int, *tokens: str) -> np.random.Generator:
    """Independent PCG64 stream for (seed, tokens); stable across platforms."""
    keys = [int(seed)]
    for tok in tokens:
        digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
        keys.append(int.from_bytes(digest, "little"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


@dataclass
class SpeakerPrototype:
    speaker_id: str
    formants: np.ndarray  # 3 resonance frequencies, strictly increasing
    pitch: float
    feature_centroid: np.ndarray  # 40-dim, used in feature mode

    def __post_init__(self):
        self.formants = np.asarray(self.formants, dtype=np.float64)
        self.feature_centroid = np.asarray(self.feature_centroid, dtype=np.float64)
        if not np.all(np.diff(self.formants) > 0):
            raise DataError(f"speaker {self.speaker_id}: formants must be strictly increasing")
        if not 80.0 <= self.pitch <= 300.0:
            raise DataError(f"speaker {self.speaker_id}: pitch {self.pitch} outside [80, 300] Hz")


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    condition: str
    payload: object  # PcmSignal or FeatureSequence
    length_frames: int

    def __post_init__(self):
        if not MIN_FRAMES <= self.length_frames <= MAX_FRAMES:
            raise DataError(f"utterance {self.utt_id}: length {self.length_frames} frames "
                            f"outside [{MIN_FRAMES}, {MAX_FRAMES}]")


@dataclass
class CorpusConfig:
    mode: str = "feature"  # "feature" | "waveform"
    train_speakers: int = 64
    eval_speakers: int = 32
    train_utts: int = 10
    eval_utts: int = 8
    min_frames: int = 20
    max_frames: int = 60  # short desk default; corpus invariant allows up to 200
    seed: int = 7
    augment_train: bool = True  # noisy copies of train utterances
    noise_snr_db: float = 8.0
    snr_spread_db: float = 0.0  # per-utterance SNR drawn from +- this band
    gain_spread_db: float = 3.0
    feature_dim: int = audio.N_MELS
    centroid_sd: float = CENTROID_SD  # speaker separation in feature space
    n_clusters: int = 0  # > 0 groups speakers around shared cluster centers
    cluster_sd: float = 1.8  # spread of cluster centers (when clustered)

    def validate(self) -> None:
        if self.mode not in ("feature", "waveform"):
            raise ConfigError(f"corpus mode must be feature or waveform, got {self.mode!r}")
        if not (MIN_FRAMES <= self.min_frames <= self.max_frames <= MAX_FRAMES):
            raise ConfigError(f"frame-length range [{self.min_frames}, {self.max_frames}] "
                              f"must lie within [{MIN_FRAMES}, {MAX_FRAMES}]")
        if self.train_speakers < 1 or self.eval_speakers < 1:
            raise ConfigError("corpus needs at least one speaker per split")


@dataclass
class Corpus:
    seed: int
    mode: str
    config: CorpusConfig
    speakers: dict = field(default_factory=dict)  # id -> SpeakerPrototype
    splits: dict = field(default_factory=dict)  # id -> "train" | "eval"
    utterances: dict = field(default_factory=dict)  # id -> UtteranceRecord (insertion-ordered)
    _feature_cache: dict = field(default_factory=dict, repr=False)

    def speaker_ids(self, split: str | None = None) -> list:
        if split is None:
            return list(self.speakers)
        return [s for s in self.speakers if self.splits[s] == split]

    def _speaker_index(self) -> dict:
        # rebuilt lazily; corpora are append-built once, then read-heavy
        cache = self._feature_cache.get("__by_speaker__")
        if cache is None or cache[0] != len(self.utterances):
            index = {}
            for u in self.utterances.values():
                index.setdefault(u.speaker_id, []).append(u)
            cache = (len(self.utterances), index)
            self._feature_cache["__by_speaker__"] = cache
        return cache[1]

    def utts_of(self, speaker_id: str, condition: str | None = None) -> list:
        records = self._speaker_index().get(speaker_id, [])
        return [u.utt_id for u in records
                if condition is None or u.condition == condition]

    def conditions(self) -> list:
        seen = []
        for u in self.utterances.values():
            if u.condition not in seen:
                seen.append(u.condition)
        return seen

    def features(self, utt_id: str) -> np.ndarray:
        """T x feature_dim matrix for an utterance (frontend applied on demand
        in waveform mode, cached)."""
        rec = self.utterances.get(utt_id)
        if rec is None:
            raise DataError(f"unknown utterance id {utt_id!r}")
        if isinstance(rec.payload, FeatureSequence):
            return rec.payload.frames
        cached = self._feature_cache.get(utt_id)
        if cached is None:
            cached = audio.log_fbank(rec.payload).frames
            self._feature_cache[utt_id] = cached
        return cached


# ---------------------------------------------------------------------------
# prototype and utterance synthesis

def gen_speaker(rng: np.random.Generator, speaker_id: str,
                feature_dim: int = audio.N_MELS,
                centroid_sd: float = CENTROID_SD) -> SpeakerPrototype:
    """Sample a prototype: pitch U(80, 300); formants uniform in the disjoint
    bands (300-900, 1000-2000, 2100-3400) Hz; centroid N(0, centroid_sd^2)."""
    pitch = float(rng.uniform(80.0, 300.0))
    formants = np.array([rng.uniform(300.0, 900.0),
                         rng.uniform(1000.0, 2000.0),
                         rng.uniform(2100.0, 3400.0)])
    centroid = centroid_sd * rng.standard_normal(feature_dim)
    return SpeakerPrototype(speaker_id, formants, pitch, centroid)


def _samples_for_frames(length_frames: int) -> int:
    frame_len, hop = audio.frame_lengths(SAMPLE_RATE)
    return frame_len + hop * (length_frames - 1)


def gen_utterance(proto: SpeakerPrototype, mode: str, length_frames: int,
                  rng: np.random.Generator, utt_id: str = "utt",
                  innovation_sd: float = INNOVATION_SD) -> UtteranceRecord:
    """Synthesize one clean utterance of exactly ``length_frames`` frames."""
    if not MIN_FRAMES <= length_frames <= MAX_FRAMES:
        raise ConfigError(f"length_frames {length_frames} outside [{MIN_FRAMES}, {MAX_FRAMES}]")
    if mode == "feature":
        dim = proto.feature_centroid.size
        innovations = innovation_sd * rng.standard_normal((length_frames, dim))
        drift = np.empty_like(innovations)
        prev = np.zeros(dim)
        for t in range(length_frames):
            prev = AR_COEFF * prev + innovations[t]
            drift[t] = prev
        payload = FeatureSequence(proto.feature_centroid[None, :] + drift)
    elif mode == "waveform":
        n = _samples_for_frames(length_frames)
        f0 = proto.pitch * (1.0 + 0.03 * rng.uniform(-1.0, 1.0))
        t = np.arange(n) / SAMPLE_RATE
        x = np.zeros(n)
        k = 1
        while k * f0 <= audio.FMAX_HZ:
            freq = k * f0
            gain = 0.01 + np.sum(np.exp(-((freq - proto.formants) ** 2) / (2.0 * 150.0 ** 2)))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            x += gain * np.sin(2.0 * np.pi * freq * t + phase)
            k += 1
        peak = np.max(np.abs(x))
        if peak > 0:
            x *= 0.5 / peak
        payload = PcmSignal(x, SAMPLE_RATE)
    else:
        raise ConfigError(f"unknown utterance mode {mode!r}")
    return UtteranceRecord(utt_id, proto.speaker_id, CLEAN, payload, length_frames)


def corrupt(utt: UtteranceRecord, snr_db: float, gain_db: float,
            rng: np.random.Generator, new_utt_id: str | None = None) -> UtteranceRecord:
    """Noisy variant: channel gain plus additive noise scaled so the measured
    signal-to-noise power ratio equals ``snr_db`` exactly."""
    if not -10.0 <= snr_db <= 60.0:
        raise ConfigError(f"snr_db {snr_db} outside [-10, 60]")
    if utt.condition != CLEAN:
        raise DataError(f"corrupt expects a clean utterance, got condition {utt.condition!r}")
    new_id = new_utt_id if new_utt_id is not None else utt.utt_id + "_noisy"

    if isinstance(utt.payload, PcmSignal):
        gained = utt.payload.samples * (10.0 ** (gain_db / 20.0))
        p_sig = float(np.mean(gained ** 2))
        noise = rng.standard_normal(gained.size)
        target_p = p_sig * 10.0 ** (-snr_db / 10.0)
        noise *= np.sqrt(target_p / np.mean(noise ** 2))
        mixed = gained + noise
        peak = np.max(np.abs(mixed))
        if peak > 0.999:  # protect the int16 range; scales both components alike
            mixed *= 0.999 / peak
        payload = PcmSignal(mixed, utt.payload.sample_rate)
    else:
        # log-energy domain: channel gain is an additive shift, noise variance
        # is matched to the feature variance at the requested SNR
        frames = utt.payload.frames + gain_db * np.log(10.0) / 10.0
        p_sig = float(np.var(frames))
        noise = rng.standard_normal(frames.shape)
        target_p = p_sig * 10.0 ** (-snr_db / 10.0)
        noise *= np.sqrt(target_p / np.mean(noise ** 2))
        payload = FeatureSequence(frames + noise)
    return UtteranceRecord(new_id, utt.speaker_id, NOISY, payload, utt.length_frames)


# ---------------------------------------------------------------------------
# corpus assembly

def gen_corpus(config: CorpusConfig) -> Corpus:
    """Generate the full corpus; a pure function of the config (incl. seed).

    With ``n_clusters`` > 0 speaker centroids scatter around shared cluster
    centers (heterogeneous confusability: same-cluster speakers are hard to
    tell apart, cross-cluster ones easy), standing in for the language/accent
    structure of real speaker populations.
    """
    config.validate()
    corpus = Corpus(seed=config.seed, mode=config.mode, config=config)
    plan = [("train", f"tr{i:03d}", config.train_utts) for i in range(config.train_speakers)]
    plan += [("eval", f"ev{i:03d}", config.eval_utts) for i in range(config.eval_speakers)]

    centers = None
    if config.n_clusters > 0:
        centers = config.cluster_sd * stream(config.seed, "clusters").standard_normal(
            (config.n_clusters, config.feature_dim))

    for split, sid, n_utts in plan:
        spk_stream = stream(config.seed, "spk:" + sid)
        proto = gen_speaker(spk_stream, sid, config.feature_dim, config.centroid_sd)
        if centers is not None:
            cluster = int(spk_stream.integers(config.n_clusters))
            proto.feature_centroid = centers[cluster] + proto.feature_centroid
        corpus.speakers[sid] = proto
        corpus.splits[sid] = split
        for u in range(n_utts):
            uid = f"{sid}_u{u:02d}"
            rng = stream(config.seed, "utt:" + uid)
            length = int(rng.integers(config.min_frames, config.max_frames + 1))
            rec = gen_utterance(proto, config.mode, length, rng, utt_id=uid)
            corpus.utterances[uid] = rec
            if split == "eval" or config.augment_train:
                noise_rng = stream(config.seed, "noise:" + uid)
                gain_db = float(noise_rng.uniform(-config.gain_spread_db, config.gain_spread_db))
                snr_db = config.noise_snr_db
                if config.snr_spread_db > 0:
                    snr_db += float(noise_rng.uniform(-config.snr_spread_db, config.snr_spread_db))
                noisy = corrupt(rec, snr_db, gain_db, noise_rng)
                corpus.utterances[noisy.utt_id] = noisy
    return corpus


def build_trials(corpus: Corpus, n_enroll_utts: int, n_target: int, n_nontarget: int,
                 rng: np.random.Generator, conditions=None) -> TrialSet:
    """Sample per-condition target/nontarget trials over the eval split.

    Enrollment and test roles never share an utterance within a trial;
    counts come out exactly as requested for every condition.
    """
    eval_speakers = corpus.speaker_ids("eval")
    if len(eval_speakers) < 2:
        raise DataError("trial construction needs at least 2 eval speakers")
    if conditions is None:
        conditions = [c for c in corpus.conditions()
                      if any(corpus.utts_of(s, c) for s in eval_speakers)]

    trials = []
    for cond in conditions:
        pool = {}
        for sid in eval_speakers:
            utts = corpus.utts_of(sid, cond)
            if len(utts) < n_enroll_utts + 2:
                raise DataError(f"speaker {sid} has {len(utts)} {cond} utterances; "
                                f"need >= {n_enroll_utts + 2} for {n_enroll_utts}-utterance enrollment")
            pool[sid] = utts
        for _ in range(n_target):
            sid = eval_speakers[rng.integers(len(eval_speakers))]
            picked = rng.choice(len(pool[sid]), size=n_enroll_utts + 1, replace=False)
            utts = [pool[sid][i] for i in picked]
            trials.append(Trial(tuple(utts[:-1]), utts[-1], TARGET, cond))
        for _ in range(n_nontarget):
            i, j = rng.choice(len(eval_speakers), size=2, replace=False)
            enroll_sid, test_sid = eval_speakers[i], eval_speakers[j]
            picked = rng.choice(len(pool[enroll_sid]), size=n_enroll_utts, replace=False)
            enroll = tuple(pool[enroll_sid][k] for k in picked)
            test = pool[test_sid][rng.integers(len(pool[test_sid]))]
            trials.append(Trial(enroll, test, NONTARGET, cond))
    return TrialSet(trials)


# ---------------------------------------------------------------------------
# disk layout: manifest.json + utt/<id>.{wav,fbk} + trials_<condition>.txt

def manifest_dict(corpus: Corpus, version: str = "") -> dict:
    speakers = []
    for sid, proto in corpus.speakers.items():
        speakers.append({
            "speaker_id": sid,
            "split": corpus.splits[sid],
            "pitch": proto.pitch,
            "formants": proto.formants.tolist(),
            "centroid": proto.feature_centroid.tolist(),
        })
    ext = ".fbk" if corpus.mode == "feature" else ".wav"
    utterances = [{
        "utt_id": u.utt_id,
        "speaker_id": u.speaker_id,
        "condition": u.condition,
        "length_frames": u.length_frames,
        "file": f"utt/{u.utt_id}{ext}",
    } for u in corpus.utterances.values()]
    return {
        "format": MANIFEST_FORMAT,
        "version": version,
        "seed": corpus.seed,
        "mode": corpus.mode,
        "config": asdict(corpus.config),
        "speakers": speakers,
        "utterances": utterances,
    }


def save_corpus(corpus: Corpus, out_dir, version: str = "") -> None:
    from .artifacts import write_atomic  # local import: artifacts imports nothing from synth

    out = Path(out_dir)
    (out / "utt").mkdir(parents=True, exist_ok=True)
    manifest = manifest_dict(corpus, version)
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for rec in corpus.utterances.values():
        if isinstance(rec.payload, PcmSignal):
            write_atomic(out / "utt" / f"{rec.utt_id}.wav", audio.write_wav(rec.payload))
        else:
            write_atomic(out / "utt" / f"{rec.utt_id}.fbk", audio.write_fbk(rec.payload))


def load_corpus(in_dir) -> Corpus:
    from .trials import parse_trial_lines  # noqa: F401  (re-export convenience)

    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"manifest format: expected {MANIFEST_FORMAT!r}, got {manifest.get('format')!r}")
    config = CorpusConfig(**manifest["config"])
    corpus = Corpus(seed=manifest["seed"], mode=manifest["mode"], config=config)
    for spk in manifest["speakers"]:
        corpus.speakers[spk["speaker_id"]] = SpeakerPrototype(
            spk["speaker_id"], np.array(spk["formants"]), spk["pitch"], np.array(spk["centroid"]))
        corpus.splits[spk["speaker_id"]] = spk["split"]
    for utt in manifest["utterances"]:
        payload_path = root / utt["file"]
        data = payload_path.read_bytes()
        if payload_path.suffix == ".wav":
            payload = audio.parse_wav(data)
        else:
            payload = audio.parse_fbk(data)
        if utt["speaker_id"] not in corpus.speakers:
            raise FormatError(f"utterance {utt['utt_id']}: unknown speaker {utt['speaker_id']!r}")
        corpus.utterances[utt["utt_id"]] = UtteranceRecord(
            utt["utt_id"], utt["speaker_id"], utt["condition"], payload, utt["length_frames"])
    return corpus
