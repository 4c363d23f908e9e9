"""Manifests, mixture synthesis and the synthetic desk-scale corpus."""

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from . import dsp, querybank
from .errors import ClipSepError, ClipTooShortError, InvalidInputError

SPLITS = ("train", "val", "test")
FRAMES_PER_CLIP = 3
TRAIN_CROP = 65535
DESK_CROP = 8191


@dataclass
class ManifestEntry:
    clip_id: str
    clip_path: str
    embed_id_image: list
    embed_id_text: str
    label: str = None
    split: str = "train"
    clean_path: str = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"{self.clip_id}: unknown split {self.split!r}")
        if isinstance(self.embed_id_image, str):
            self.embed_id_image = [self.embed_id_image]

    @property
    def reference_path(self):
        """Path of the clean stem when the corpus stores one, else the clip itself."""
        return self.clean_path or self.clip_path


def read_manifest(path, bank=None, check_files=True):
    """Load a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = ManifestEntry(**rec)
            except (json.JSONDecodeError, TypeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad manifest record ({exc})") from None
            entry.clip_path = str(base / entry.clip_path)
            if entry.clean_path:
                entry.clean_path = str(base / entry.clean_path)
            entries.append(entry)
    if check_files:
        missing = [e.clip_path for e in entries if not os.path.exists(e.clip_path)]
        missing += [e.clean_path for e in entries if e.clean_path and not os.path.exists(e.clean_path)]
        if missing:
            raise InvalidInputError(f"manifest references missing files: {missing[:5]}")
    if bank is not None:
        ids = [i for e in entries for i in e.embed_id_image]
        absent = bank.missing(ids)
        if absent:
            raise querybank.MissingEmbeddingError(absent)
    return entries


def write_manifest(path, entries, base=None):
    base = Path(base) if base is not None else Path(path).parent
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            rec = asdict(e)
            for key in ("clip_path", "clean_path"):
                if rec[key]:
                    rec[key] = os.path.relpath(rec[key], base)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def split_entries(entries, split):
    return [e for e in entries if e.split == split]


class AudioCache:
    """Memoizes decoded wav files by path."""

    def __init__(self):
        self._clips = {}

    def __call__(self, path):
        clip = self._clips.get(path)
        if clip is None:
            try:
                clip = dsp.read_wav(path).samples
            except (OSError, ValueError) as exc:
                raise ClipSepError(f"cannot read {path}: {exc}") from None
            self._clips[path] = clip
        return clip


@dataclass
class MixtureExample:
    mixture: np.ndarray
    spec: np.ndarray
    X: np.ndarray
    targets: np.ndarray
    sources: np.ndarray
    entries: list
    embeddings: np.ndarray = None
    class_ids: list = field(default_factory=list)
    target_index: int = 0

    @property
    def n(self):
        return len(self.entries)


def crop(samples, length, start):
    if samples.shape[0] < dsp.WIN_LENGTH:
        raise ClipTooShortError(f"clip has {samples.shape[0]} samples")
    if samples.shape[0] <= length:
        return np.pad(samples, (0, length - samples.shape[0]))
    return samples[start:start + length]


def query_embedding(bank, entry, modality):
    if modality == "image":
        return querybank.frame_query(bank, entry.embed_id_image)
    if modality == "text":
        return querybank.text_query(bank, entry.embed_id_text)
    raise InvalidInputError(f"modality {modality!r} has no bank embedding")


def _assemble(entries, crops, bank, modality, class_index, target_index=0):
    sources = np.stack(crops)
    mixture = sources.sum(axis=0)
    spec = dsp.stft(mixture)
    mags = [np.abs(dsp.stft(s)) for s in sources]
    targets = dsp.ground_truth_masks(mags, kind="binary")
    embeddings = None
    if bank is not None and modality in ("image", "text"):
        embeddings = np.stack([query_embedding(bank, e, modality).vector for e in entries])
    class_ids = []
    if class_index is not None:
        class_ids = [class_index[e.label] for e in entries]
    return MixtureExample(
        mixture=mixture,
        spec=spec,
        X=np.abs(spec),
        targets=targets,
        sources=sources,
        entries=list(entries),
        embeddings=embeddings,
        class_ids=class_ids,
        target_index=target_index,
    )


def synthesize_mixture(entries, rng_seed, bank=None, crop_len=TRAIN_CROP, modality="image",
                       loader=None, gain_range=None, class_index=None):
    """Mix random crops of ``entries`` by plain summation.

    Targets are binary masks of the per-source magnitudes.  ``gain_range``
    applies an optional uniform random gain per source (off by default).
    """
    if len(entries) < 1:
        raise InvalidInputError("need at least one entry")
    if len({e.clip_id for e in entries}) != len(entries):
        raise InvalidInputError("mixture entries must be distinct clips")
    loader = loader or AudioCache()
    rng = np.random.default_rng(rng_seed)
    crops = []
    for e in entries:
        samples = loader(e.clip_path)
        start = int(rng.integers(0, max(samples.shape[0] - crop_len, 0) + 1))
        piece = crop(samples, crop_len, start)
        if gain_range is not None:
            piece = piece * rng.uniform(*gain_range)
        crops.append(piece)
    return _assemble(entries, crops, bank, modality, class_index)


def sample_batch(entries, batch_size, n, seed, step, bank=None, crop_len=TRAIN_CROP,
                 modality="image", loader=None, gain_range=None, class_index=None, max_tries=10):
    """Deterministic batch for ``(seed, step)``.

    Clips are drawn uniformly without replacement across the whole batch when
    the pool is large enough, otherwise without replacement per example.
    Clips too short for one window are skipped and redrawn.
    """
    rng = np.random.default_rng([seed, step])
    pool = len(entries)
    if pool < n:
        raise InvalidInputError(f"need at least {n} clips, manifest has {pool}")
    if pool >= batch_size * n:
        draws = list(rng.permutation(pool)[: batch_size * n].reshape(batch_size, n))
    else:
        draws = [rng.choice(pool, size=n, replace=False) for _ in range(batch_size)]
    batch = []
    for picks in draws:
        for _ in range(max_tries):
            try:
                ex = synthesize_mixture(
                    [entries[i] for i in picks], int(rng.integers(2**63)), bank, crop_len,
                    modality, loader, gain_range, class_index,
                )
            except ClipTooShortError:
                picks = rng.choice(pool, size=n, replace=False)
                continue
            batch.append(ex)
            break
        else:
            raise InvalidInputError("could not draw a usable mixture; clips too short")
    return batch


def eval_pairing(targets, interferences, count, seed, bank=None, crop_len=TRAIN_CROP,
                 loader=None, exclude_labels=(), distinct_labels=True):
    """Pair clean target stems with interference clips.

    Source 0 of each example is the clean target (``reference_path``), source 1
    the interference as stored.  Crops are taken from the clip centres.
    """
    if not targets or not interferences:
        raise InvalidInputError("both manifests must be non-empty")
    exclude = set(exclude_labels)
    usable = [i for i in interferences if i.label not in exclude or i.label is None]
    candidates = [
        (t, i)
        for t in targets
        for i in usable
        if t.clip_id != i.clip_id and not (distinct_labels and t.label is not None and t.label == i.label)
    ]
    if count > len(candidates):
        raise InvalidInputError(f"requested {count} pairs, only {len(candidates)} available")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))[:count]
    loader = loader or AudioCache()
    pairs = []
    for idx in order:
        t, i = candidates[int(idx)]
        crops = []
        for path in (t.reference_path, i.clip_path):
            samples = loader(path)
            start = max(samples.shape[0] - crop_len, 0) // 2
            crops.append(crop(samples, crop_len, start))
        pairs.append(_assemble([t, i], crops, bank, "image" if bank is not None else None, None))
    return pairs


def class_index_for(entries):
    labels = sorted({e.label for e in entries if e.label is not None})
    return {label: i for i, label in enumerate(labels)}


# -- synthetic corpus -------------------------------------------------------

SR = dsp.SAMPLE_RATE


def _bandpass(x, lo, hi, order=4):
    sos = scipy.signal.butter(order, [lo, hi], btype="bandpass", fs=SR, output="sos")
    return scipy.signal.sosfilt(sos, x)


def _lowpass(x, cutoff, order=4):
    sos = scipy.signal.butter(order, cutoff, btype="lowpass", fs=SR, output="sos")
    return scipy.signal.sosfilt(sos, x)


def _highpass(x, cutoff, order=4):
    sos = scipy.signal.butter(order, cutoff, btype="highpass", fs=SR, output="sos")
    return scipy.signal.sosfilt(sos, x)


def _gate(rng, length, on=(0.15, 0.45), off=(0.03, 0.15)):
    """Random on/off envelope with 10 ms ramps."""
    env = np.zeros(length)
    pos = int(rng.uniform(0, off[1]) * SR)
    ramp = int(0.01 * SR)
    while pos < length:
        dur = int(rng.uniform(*on) * SR)
        seg = np.ones(dur)
        r = min(ramp, dur // 2)
        if r:
            seg[:r] = np.linspace(0, 1, r)
            seg[-r:] = np.linspace(1, 0, r)
        end = min(pos + dur, length)
        env[pos:end] = seg[: end - pos]
        pos = end + int(rng.uniform(*off) * SR)
    return env


def _harmonic_tone(rng, length):
    t = np.arange(length) / SR
    env = _gate(rng, length)
    out = np.zeros(length)
    # new pitch per note: piecewise-constant f0 following the gate segments
    f0 = np.full(length, rng.uniform(180, 320))
    edges = np.flatnonzero(np.diff((env > 0).astype(int)) == 1)
    for e in edges:
        f0[e:] = rng.uniform(180, 320)
    phase = 2 * np.pi * np.cumsum(f0 * (1 + 0.005 * np.sin(2 * np.pi * 5 * t))) / SR
    for h in range(1, 5):
        out += np.sin(h * phase) / h
    return out * env


def _rising_chirp(rng, length, lo=800.0, hi=2500.0):
    out = np.zeros(length)
    pos = int(rng.uniform(0, 0.1) * SR)
    while pos < length:
        dur = int(rng.uniform(0.15, 0.3) * SR)
        tt = np.arange(dur) / SR
        f_lo, f_hi = lo * rng.uniform(0.9, 1.1), hi * rng.uniform(0.9, 1.1)
        seg = scipy.signal.chirp(tt, f_lo, tt[-1], f_hi) * np.hanning(dur)
        end = min(pos + dur, length)
        out[pos:end] = seg[: end - pos]
        pos = end + int(rng.uniform(0.02, 0.1) * SR)
    return out


def _falling_chirp(rng, length):
    return _rising_chirp(rng, length, lo=2500.0, hi=800.0)


def _filtered_noise(rng, length):
    x = _bandpass(rng.standard_normal(length), 3000, 4500)
    t = np.arange(length) / SR
    return x * (0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1, 3) * t + rng.uniform(0, 2 * np.pi)))


def _pulse_train(rng, length):
    rate = rng.uniform(6, 12)
    period = int(SR / rate)
    burst = int(0.03 * SR)
    out = np.zeros(length)
    noise = _bandpass(rng.standard_normal(length + burst), 5000, 7000)
    decay = np.exp(-np.arange(burst) / (0.006 * SR))
    for start in range(int(rng.uniform(0, period)), length, period):
        end = min(start + burst, length)
        out[start:end] = noise[start:end] * decay[: end - start]
    return out


def _low_hum(rng, length):
    t = np.arange(length) / SR
    f0 = rng.uniform(90, 130)
    return sum(np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 6.28)) / h for h in (1, 2, 3)) * _gate(
        rng, length, on=(0.3, 0.6)
    )


def _tremolo_tone(rng, length):
    t = np.arange(length) / SR
    f = rng.uniform(1900, 2300)
    return np.sin(2 * np.pi * f * t) * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(8, 14) * t))


def _bell(rng, length):
    t = np.arange(length) / SR
    out = np.zeros(length)
    partials = rng.uniform(1.0, 1.1) * np.array([520.0, 1340.0, 2750.0])
    for start in range(0, length, int(rng.uniform(0.3, 0.5) * SR)):
        tt = t[: length - start]
        strike = sum(np.sin(2 * np.pi * p * tt) * np.exp(-tt * (3 + i * 2)) for i, p in enumerate(partials))
        out[start:] += strike
    return out


CLASS_GENERATORS = {
    "harmonic tone": _harmonic_tone,
    "rising chirp": _rising_chirp,
    "filtered noise": _filtered_noise,
    "pulse train": _pulse_train,
    "low hum": _low_hum,
    "falling chirp": _falling_chirp,
    "tremolo tone": _tremolo_tone,
    "bell": _bell,
}


def _rumble(rng, length):
    return _lowpass(np.cumsum(rng.standard_normal(length)), 400)


def _hiss(rng, length):
    return _highpass(rng.standard_normal(length), 7000)


def _wind(rng, length):
    x = _bandpass(rng.standard_normal(length), 300, 900)
    env = _lowpass(np.abs(rng.standard_normal(length)), 3)
    return x * (0.3 + env / (env.max() + 1e-12))


def _pink(rng, length):
    spectrum = np.fft.rfft(rng.standard_normal(length))
    freqs = np.fft.rfftfreq(length, 1 / SR)
    spectrum[1:] /= np.sqrt(freqs[1:])
    spectrum[0] = 0
    return np.fft.irfft(spectrum, n=length)


BACKGROUNDS = {"rumble": _rumble, "hiss": _hiss, "wind": _wind, "pink": _pink}


def _rms_normalize(x, rms):
    cur = np.sqrt(np.mean(x**2))
    return x * (rms / cur) if cur > 0 else x


def generate_clip(class_name, rng, length, rms=0.0125):
    return _rms_normalize(CLASS_GENERATORS[class_name](rng, length), rms)


def generate_background(rng, length, rms):
    kind = sorted(BACKGROUNDS)[int(rng.integers(len(BACKGROUNDS)))]
    return kind, _rms_normalize(BACKGROUNDS[kind](rng, length), rms)


@dataclass
class CorpusSpec:
    classes: int = 4
    clips_per_class: int = 10
    seed: int = 0
    clip_seconds: float = 1.0
    noisy: bool = False
    # about -38 dBFS; sets the scale of the STFT magnitudes X, which both feed
    # log(1 + X) and weight the BCE, so it balances the noise hinge against the loss
    source_rms: float = 0.0125
    # background level relative to the clean clip, in dB (uniform range)
    noise_snr_db: tuple = (0.0, 6.0)
    gap_degrees: float = 15.0
    split_fractions: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if not 1 <= self.classes <= len(CLASS_GENERATORS):
            raise InvalidInputError(f"classes must be in [1, {len(CLASS_GENERATORS)}]")
        if self.clips_per_class < 1:
            raise InvalidInputError("clips_per_class must be >= 1")
        if self.clip_seconds * SR < dsp.WIN_LENGTH:
            raise InvalidInputError("clips must hold at least one STFT window")
        self.noise_snr_db = tuple(self.noise_snr_db)
        self.split_fractions = tuple(self.split_fractions)

    @property
    def class_names(self):
        return list(CLASS_GENERATORS)[: self.classes]


def _split_for(index, count, fractions):
    n_val = max(1, round(count * fractions[1])) if count >= 3 else 0
    n_test = max(1, round(count * fractions[2])) if count >= 3 else 0
    n_train = count - n_val - n_test
    if index < n_train:
        return "train"
    return "val" if index < n_train + n_val else "test"


@dataclass
class Corpus:
    root: Path
    manifest: Path
    bank: Path
    gap_bank: Path
    entries: list


def make_synthetic_corpus(spec, out_dir, force=False):
    """Write wavs, a manifest and two embedding banks for ``spec`` into ``out_dir``.

    ``bank.qemb`` has text vectors equal to image vectors (no modality gap);
    ``bank_gap.qemb`` rotates text vectors by ``spec.gap_degrees``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise InvalidInputError(f"{out} exists and is not empty (use force to overwrite)")
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    length = int(round(spec.clip_seconds * SR))
    names = spec.class_names
    class_vecs = querybank.synthetic_class_embeddings(names, seed=spec.seed)
    gap_vecs = querybank.perturb_embeddings(class_vecs, spec.gap_degrees, seed=spec.seed)

    entries, image_items = [], []
    for c, name in enumerate(names):
        for j in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, c, j])
            clip_id = f"{name.replace(' ', '_')}_{j:03d}"
            clean = generate_clip(name, rng, length, spec.source_rms)
            path = audio_dir / f"{clip_id}.wav"
            clean_path = None
            if spec.noisy:
                snr = rng.uniform(*spec.noise_snr_db)
                _, background = generate_background(rng, length, spec.source_rms * 10 ** (-snr / 20))
                clean_path = audio_dir / f"{clip_id}.clean.wav"
                dsp.write_wav(clean_path, clean)
                dsp.write_wav(path, clean + background)
            else:
                dsp.write_wav(path, clean)
            frame_ids = [f"{clip_id}/frame{f}" for f in range(FRAMES_PER_CLIP)]
            image_items += [(fid, class_vecs[name]) for fid in frame_ids]
            entries.append(ManifestEntry(
                clip_id=clip_id,
                clip_path=str(path),
                embed_id_image=frame_ids,
                embed_id_text=name,
                label=name,
                split=_split_for(j, spec.clips_per_class, spec.split_fractions),
                clean_path=str(clean_path) if clean_path else None,
            ))

    def text_items(vecs):
        return [(tid, vecs[name]) for name in names for tid in querybank.template_ids(name)]

    bank_path, gap_path = out / "bank.qemb", out / "bank_gap.qemb"
    querybank.write_bank(bank_path, image_items + text_items(class_vecs))
    querybank.write_bank(gap_path, image_items + text_items(gap_vecs))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    meta = asdict(spec)
    meta["class_names"] = names
    meta["samples_per_clip"] = length
    with open(out / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Corpus(out, manifest, bank_path, gap_path, entries)
