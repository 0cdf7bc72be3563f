"""Datasets: synthetic band-pattern classes, log-mel features and WAV ingestion."""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np

N_MELS = 40


@dataclass
class Dataset:
    """Train/validation split of ``(N, 1, n_mels, T)`` features with integer labels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    @property
    def feature_shape(self):
        return tuple(self.x_train.shape[1:])

    def validate(self):
        if self.x_train.shape[1:] != self.x_val.shape[1:]:
            raise ValueError("train and val features differ in shape")
        for name, y in (("train", self.y_train), ("val", self.y_val)):
            missing = set(range(self.num_classes)) - set(np.unique(y).tolist())
            if missing:
                raise ValueError(f"classes {sorted(missing)} missing from the {name} split")
        return self


def stratified_split(labels, train_fraction, rng):
    """Index arrays (train, val) with ``round(train_fraction * n_c)`` of each class in train."""
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(train_fraction * idx.size))
        train.append(idx[:k])
        val.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def class_templates(num_classes, frames, rng, n_mels=N_MELS):
    """One smooth spectro-temporal pattern per class: a few Gaussian bands with
    class-specific temporal modulation, normalised to unit RMS."""
    bands = np.arange(n_mels)[:, None]
    t = np.arange(frames)[None, :]
    out = np.empty((num_classes, n_mels, frames))
    for c in range(num_classes):
        tpl = np.zeros((n_mels, frames))
        for _ in range(3):
            center = rng.uniform(0, n_mels)
            width = rng.uniform(1.5, 4.0)
            period = rng.uniform(4, max(8, frames))
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            tpl += amp * np.exp(-0.5 * ((bands - center) / width) ** 2) * np.cos(2 * np.pi * t / period + phase)
        tpl -= tpl.mean()
        out[c] = tpl / np.sqrt(np.mean(tpl ** 2))
    return out


def synth_dataset(num_classes=10, samples_per_class=200, frames=128, noise_level=0.1, seed=0,
                  train_fraction=0.7, n_mels=N_MELS, dtype=np.float32):
    """Template + Gaussian noise dataset with a stratified split.

    Noise standard deviation per cell is ``noise_level`` times the template RMS.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    n_train = int(round(train_fraction * samples_per_class))
    if n_train < 2 or samples_per_class - n_train < 2:
        raise ValueError("need at least 2 samples per class in each split")
    if frames < 1 or noise_level < 0:
        raise ValueError("frames must be >= 1 and noise_level >= 0")
    rng = np.random.default_rng(seed)
    templates = class_templates(num_classes, frames, rng, n_mels)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((labels.size, n_mels, frames))
    feats = templates[labels] + noise_level * noise
    feats = feats[:, None].astype(dtype)
    tr, va = stratified_split(labels, train_fraction, rng)
    ds = Dataset(feats[tr], labels[tr], feats[va], labels[va], num_classes)
    ds.templates = templates
    return ds.validate()


def load_feature_file(path, train_fraction=0.7, seed=0):
    """Dataset from an ``.npz`` with ``features`` (N, 1, n_mels, T) and ``labels``."""
    with np.load(path) as data:
        feats = np.asarray(data["features"], dtype=np.float32)
        labels = np.asarray(data["labels"], dtype=np.int64)
    if feats.ndim == 3:
        feats = feats[:, None]
    num_classes = int(labels.max()) + 1
    tr, va = stratified_split(labels, train_fraction, np.random.default_rng(seed))
    return Dataset(feats[tr], labels[tr], feats[va], labels[va], num_classes).validate()


# --------------------------------------------------------------------------
# audio features
# --------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels, fmin, fmax):
    """Frequencies (Hz) of the ``n_mels + 2`` triangle corners; band b peaks at index b + 1."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """HTK-spaced triangular filters, shape ``(n_mels, n_fft // 2 + 1)``, unit peak."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_band_edges(n_mels, fmin, fmax)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, freqs.size))
    for b in range(n_mels):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def frame_count(n_samples, win, hop):
    return (n_samples - win) // hop + 1


def logmel_extract(waveform, sample_rate, n_mels=N_MELS, window_ms=40.0, hop_fraction=0.625,
                   fmin=0.0, fmax=None, floor=1e-10, power=1.0):
    """Log mel-band features of shape ``(1, n_mels, frames)``.

    Hann-windowed STFT without padding (``frames = (len - win) // hop + 1``),
    magnitude (``power=1``) spectrum, HTK mel filterbank, natural log with a floor.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("waveform must be a non-empty 1-D sequence")
    win = int(round(sample_rate * window_ms / 1000.0))
    hop = max(1, int(round(win * hop_fraction)))
    if x.size < win:
        raise ValueError(f"waveform of {x.size} samples is shorter than one window ({win})")
    n_fft = 1 << (win - 1).bit_length()
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    spec = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1)) ** power
    fb = mel_filterbank(n_mels, n_fft, sample_rate, fmin, fmax)
    mel = spec @ fb.T
    return np.log(np.maximum(mel, floor)).T[None].astype(np.float32)


def read_wav(path):
    """Mono 16- or 24-bit PCM WAV as float64 samples in [-1, 1] plus the sample rate."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: only mono WAV is supported")
        if fh.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV is not supported")
        width = fh.getsampwidth()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        data = ints.astype(np.float64) / float(1 << 23)
    else:
        raise ValueError(f"{path}: unsupported sample width {8 * width} bits")
    return data, rate


def write_wav(path, samples, sample_rate, bits=16):
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(bits // 8)
        fh.setframerate(int(sample_rate))
        if bits == 16:
            fh.writeframes((samples * 32767).astype("<i2").tobytes())
        elif bits == 24:
            ints = np.round(samples * ((1 << 23) - 1)).astype(np.int32) & 0xFFFFFF
            b = np.stack([ints & 0xFF, (ints >> 8) & 0xFF, (ints >> 16) & 0xFF], axis=1).astype(np.uint8)
            fh.writeframes(b.tobytes())
        else:
            raise ValueError("bits must be 16 or 24")


def resample_linear(x, source_rate, target_rate):
    if source_rate == target_rate:
        return np.asarray(x, dtype=np.float64)
    n_out = int(math.floor(len(x) * target_rate / source_rate))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(len(x)) / source_rate
    return np.interp(t_out, t_in, x)


def wav_features(path, target_rate=44100, frames=None, **kw):
    """Read, resample and extract log-mel features; optionally crop/pad to ``frames``."""
    x, rate = read_wav(path)
    feat = logmel_extract(resample_linear(x, rate, target_rate), target_rate, **kw)
    if frames is not None:
        if feat.shape[2] >= frames:
            feat = feat[:, :, :frames]
        else:
            pad = np.full((1, feat.shape[1], frames - feat.shape[2]), feat.min(), dtype=feat.dtype)
            feat = np.concatenate([feat, pad], axis=2)
    return feat


def build_feature_file(wav_paths, labels, out_path, target_rate=44100, frames=128, **kw):
    feats = np.stack([wav_features(p, target_rate, frames, **kw) for p in wav_paths])
    np.savez(out_path, features=feats, labels=np.asarray(labels, dtype=np.int64))
    return out_path
