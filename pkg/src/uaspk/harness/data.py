"""Seeded synthetic multi-speaker data with controllable frame corruption.

Every frame is ``speaker_mean + session_offset + noise``.  Utterances are
cut into contiguous segments whose noise level is drawn from
``frame_noise_levels``; a contiguous run of frames may additionally be
zeroed out (masking).  Training speakers and evaluation speakers are disjoint.
"""
import csv
import itertools
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..checkpoint import load_arrays, save_arrays
from ..numkit import RandomStream
from ..scoring import Trial, read_trials, write_trials


@dataclass
class SyntheticDatasetConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 20
    frames_per_utt: tuple = (30, 60)
    feature_dim: int = 20
    speaker_spread: float = 0.7
    session_spread: float = 0.5
    frame_noise_levels: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0, 8.0])
    mask_fractions: list = field(default_factory=lambda: [0.0, 0.1, 0.25])
    segments_per_utt: int = 3
    # segment levels of one utterance lie within this many steps of an
    # utterance base level; None draws every segment from the full list
    level_span: int = None
    n_eval_speakers: int = 10
    eval_utts_per_speaker: int = 10
    seed: int = 0

    def __post_init__(self):
        self.frames_per_utt = tuple(int(v) for v in self.frames_per_utt)
        self.frame_noise_levels = [float(v) for v in self.frame_noise_levels]
        self.mask_fractions = [float(v) for v in self.mask_fractions]
        lo, hi = self.frames_per_utt
        if not 1 <= lo <= hi:
            raise ValueError("frames_per_utt must be a range 1 <= lo <= hi")
        if any(b <= a for a, b in zip(self.frame_noise_levels, self.frame_noise_levels[1:])):
            raise ValueError("frame_noise_levels must be strictly increasing")
        if any(v < 0 for v in self.frame_noise_levels):
            raise ValueError("noise levels must be non-negative")
        if any(not 0.0 <= f <= 1.0 for f in self.mask_fractions):
            raise ValueError("mask fractions must lie in [0, 1]")
        if self.segments_per_utt < 1:
            raise ValueError("segments_per_utt must be >= 1")
        if self.level_span is not None and self.level_span < 0:
            raise ValueError("level_span must be >= 0")


@dataclass
class Utterance:
    utt_id: str
    speaker: int
    split: str
    features: np.ndarray
    levels: list
    mask_fraction: float

    @property
    def n_frames(self):
        return len(self.features)


@dataclass
class Dataset:
    cfg: SyntheticDatasetConfig
    utterances: list
    trials: list

    def split(self, name):
        return [u for u in self.utterances if u.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def eval(self):
        return self.split("eval")

    def by_id(self):
        return {u.utt_id: u for u in self.utterances}


def segment_bounds(T, n_segments):
    """Contiguous, near-equal segments covering ``range(T)``."""
    edges = np.linspace(0, T, n_segments + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def corrupt(features, mode, amount, seed=0, segment=None):
    """Return a corrupted copy of a (T, F) utterance.

    ``mode="noise"`` adds zero-mean Gaussian noise of standard deviation
    ``amount`` to frames ``segment = (start, stop)`` (default: all).
    ``mode="mask"`` zeroes a contiguous run of ``round(amount * T)`` frames
    at a seeded offset.  The input is never modified.
    """
    x = np.array(features, dtype=np.float64, copy=True)
    T = len(x)
    stream = RandomStream(seed)
    if mode == "noise":
        if amount < 0:
            raise ValueError("noise level must be non-negative")
        a, b = segment if segment is not None else (0, T)
        if amount > 0:
            x[a:b] += stream.normal(size=x[a:b].shape, scale=amount)
        return x
    if mode == "mask":
        if not 0.0 <= amount <= 1.0:
            raise ValueError("mask fraction must lie in [0, 1]")
        n = int(round(amount * T))
        if n:
            start = int(stream.integers(0, T - n + 1))
            x[start: start + n] = 0.0
        return x
    raise ValueError(f"unknown corruption mode {mode!r}")


def _speaker_means(cfg, stream, n):
    return stream.normal(size=(n, cfg.feature_dim), scale=cfg.speaker_spread)


def _seed_of(stream):
    return int(stream.integers(0, 2 ** 62))


def make_utterance(cfg, mean, stream, utt_id, speaker, split):
    lo, hi = cfg.frames_per_utt
    T = int(stream.integers(lo, hi + 1))
    session = stream.normal(size=cfg.feature_dim, scale=cfg.session_spread) if cfg.session_spread else 0.0
    x = np.tile(mean + session, (T, 1))
    levels = []
    n_levels = len(cfg.frame_noise_levels)
    base = int(stream.integers(0, n_levels)) if cfg.level_span is not None else 0
    for seg in segment_bounds(T, cfg.segments_per_utt):
        if cfg.level_span is None:
            level = float(stream.choice(cfg.frame_noise_levels))
        else:
            k = min(base + int(stream.integers(0, cfg.level_span + 1)), n_levels - 1)
            level = cfg.frame_noise_levels[k]
        levels.append(level)
        x = corrupt(x, "noise", level, seed=_seed_of(stream), segment=seg)
    frac = float(stream.choice(cfg.mask_fractions)) if cfg.mask_fractions else 0.0
    x = corrupt(x, "mask", frac, seed=_seed_of(stream))
    return Utterance(utt_id, speaker, split, x, levels, frac)


def generate_dataset(cfg: SyntheticDatasetConfig):
    """Deterministic dataset for ``cfg``: training speakers, eval speakers, trials."""
    if cfg.n_speakers < 2:
        raise ValueError("need at least two training speakers")
    root = RandomStream(cfg.seed)
    means = _speaker_means(cfg, root.child(0), cfg.n_speakers + cfg.n_eval_speakers)
    utts = []
    for spk in range(cfg.n_speakers):
        for k in range(cfg.utts_per_speaker):
            utts.append(make_utterance(cfg, means[spk], root.child(1, spk, k),
                                       f"tr{spk:03d}-{k:03d}", spk, "train"))
    for j in range(cfg.n_eval_speakers):
        spk = cfg.n_speakers + j
        for k in range(cfg.eval_utts_per_speaker):
            utts.append(make_utterance(cfg, means[spk], root.child(2, spk, k),
                                       f"ev{spk:03d}-{k:03d}", spk, "eval"))
    ev = [u for u in utts if u.split == "eval"]
    trials = [Trial(a.utt_id, b.utt_id, a.speaker == b.speaker)
              for a, b in itertools.combinations(ev, 2)]
    return Dataset(cfg, utts, trials)


def profile_utterance(cfg: SyntheticDatasetConfig, levels, frames_per_segment=40, seed=None,
                      mode="noise"):
    """Long held-out utterance whose consecutive segments get ``levels``.

    ``mode="noise"`` uses each level as a noise standard deviation;
    ``mode="mask"`` uses it as the masked fraction of that segment.  The
    speaker is fresh (not among training or eval speakers).
    """
    stream = RandomStream(cfg.seed if seed is None else seed, key=(7,))
    mean = _speaker_means(cfg, stream.child(0), 1)[0]
    T = frames_per_segment * len(levels)
    x = np.tile(mean, (T, 1)) + stream.child(1).normal(size=(T, cfg.feature_dim),
                                                       scale=cfg.frame_noise_levels[0])
    bounds = [(i * frames_per_segment, (i + 1) * frames_per_segment) for i in range(len(levels))]
    for i, ((a, b), lv) in enumerate(zip(bounds, levels)):
        if mode == "noise":
            x = corrupt(x, "noise", lv, seed=_seed_of(stream.child(2, i)), segment=(a, b))
        else:
            x[a:b] = corrupt(x[a:b], "mask", lv, seed=_seed_of(stream.child(2, i)))
    return x, bounds


def save_dataset(ds: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    arrays = {u.utt_id: u.features for u in ds.utterances}
    index = [{"utt_id": u.utt_id, "speaker": u.speaker, "split": u.split,
              "levels": u.levels, "mask_fraction": u.mask_fraction} for u in ds.utterances]
    save_arrays(os.path.join(out_dir, "features"), arrays,
                meta={"dataset": asdict(ds.cfg), "utterances": index})
    with open(os.path.join(out_dir, "utterances.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "speaker", "split", "n_frames", "levels", "mask_fraction"])
        for u in ds.utterances:
            w.writerow([u.utt_id, u.speaker, u.split, u.n_frames,
                        " ".join(repr(v) for v in u.levels), repr(u.mask_fraction)])
    write_trials(os.path.join(out_dir, "trials.txt"), ds.trials)


def load_dataset(data_dir):
    arrays, meta = load_arrays(os.path.join(data_dir, "features"))
    cfg = SyntheticDatasetConfig(**meta["dataset"])
    utts = [Utterance(e["utt_id"], int(e["speaker"]), e["split"], arrays[e["utt_id"]],
                      list(e["levels"]), float(e["mask_fraction"])) for e in meta["utterances"]]
    trials_path = os.path.join(data_dir, "trials.txt")
    trials = read_trials(trials_path) if os.path.exists(trials_path) else []
    return Dataset(cfg, utts, trials)
