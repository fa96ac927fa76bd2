"""Post-training analyses: precision profiles, uncertainty vs difficulty and duration,
scale distributions and uncertainty trajectories.  Every section is a list of
row dicts that is also written as CSV by :func:`analyze`."""
import csv
import os

import numpy as np
import torch

from ..losses import build_lambda, delta_cos, exact_mahalanobis_scale, uncertainty_scale
from ..model import SpeakerModel
from ..numkit import as_tensor, correlation
from .data import profile_utterance
from .train import write_rows


def check_model(model: SpeakerModel):
    for name, p in model.state_dict().items():
        if not torch.isfinite(p).all():
            raise ValueError(f"model parameter {name!r} is not finite")


@torch.no_grad()
def precision_profile(model: SpeakerModel, features, bounds, levels):
    """Mean frame precision (over frames and channels) of each segment.

    Returns ``(rows, spearman)`` where the Spearman correlation is taken
    between the corruption level and the segment's mean precision (None
    when every segment has the same level).
    """
    was = model.training
    model.eval()
    L = model.frames(as_tensor(features)).L
    model.train(was)
    rows = []
    for i, ((a, b), lv) in enumerate(zip(bounds, levels)):
        rows.append({"segment": i, "start": a, "stop": b, "level": float(lv),
                     "mean_precision": float(L[a:b].mean())})
    if len({r["level"] for r in rows}) < 2:
        return rows, None  # flat schedule: no rank correlation to report
    rho = correlation([r["level"] for r in rows], [r["mean_precision"] for r in rows], "spearman")
    return rows, rho


def _speaker_labels(utterances):
    speakers = sorted({u.speaker for u in utterances})
    index = {s: i for i, s in enumerate(speakers)}
    return torch.tensor([index[u.speaker] for u in utterances])


def sigma_vs_difficulty(model: SpeakerModel, utterances, labels=None):
    """Per-utterance mean diag Sigma^s against Delta-cos; returns (rows, pearson)."""
    labels = _speaker_labels(utterances) if labels is None else torch.as_tensor(labels)
    emb = model.extract([u.features for u in utterances])
    dcos = delta_cos(emb.phi_s, labels, model.weights)
    sig = emb.sigma_s.mean(dim=1)
    rows = [{"utt_id": u.utt_id, "sigma_mean": float(s), "dcos": float(d)}
            for u, s, d in zip(utterances, sig, dcos)]
    return rows, correlation(sig.numpy(), dcos.numpy())


def sigma_vs_duration(model: SpeakerModel, utterances):
    """Per-utterance mean diag Sigma^s against frame count; returns (rows, pearson)."""
    emb = model.extract([u.features for u in utterances])
    sig = emb.sigma_s.mean(dim=1).numpy()
    n = np.array([len(u.features) for u in utterances], dtype=float)
    rows = [{"utt_id": u.utt_id, "n_frames": int(k), "sigma_mean": float(s)}
            for u, k, s in zip(utterances, n, sig)]
    return rows, correlation(n, sig)


def scale_histograms(samples, bins=20):
    """Per-epoch histogram of the sample-wise scale s_u on shared bin edges."""
    su = np.array([r["s_u"] for r in samples], dtype=float)
    edges = np.histogram_bin_edges(su, bins=bins)
    rows = []
    for epoch in sorted({r["epoch"] for r in samples}):
        vals = [r["s_u"] for r in samples if r["epoch"] == epoch]
        counts, _ = np.histogram(vals, bins=edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            rows.append({"epoch": epoch, "bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)})
    return rows


def mean_scale_by_epoch(samples):
    out = {}
    for r in samples:
        out.setdefault(r["epoch"], []).append(r["s_u"])
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}


def sigma_trajectories(samples, utt_ids=None, n=10):
    """Mean diag Sigma^s of selected utterances at every epoch (first ``n`` ids by default)."""
    if utt_ids is None:
        utt_ids = sorted({r["utt_id"] for r in samples})[:n]
    keep = set(utt_ids)
    rows = [{"utt_id": r["utt_id"], "epoch": r["epoch"], "sigma_mean": r["sigma_mean"]}
            for r in samples if r["utt_id"] in keep]
    return sorted(rows, key=lambda r: (r["utt_id"], r["epoch"]))


@torch.no_grad()
def compare_scale_forms(phi_s, sigma_s, Lambda):
    """Stable s_u next to the exact Mahalanobis form for the same inputs."""
    return uncertainty_scale(phi_s, sigma_s, Lambda), exact_mahalanobis_scale(phi_s, sigma_s, Lambda)


def scale_form_rows(model: SpeakerModel, utterances, variant):
    labels = _speaker_labels(utterances)
    emb = model.extract([u.features for u in utterances])
    dcos = delta_cos(emb.phi_s, labels, model.weights)
    lam, _ = build_lambda(variant, dcos)
    stable, exact = compare_scale_forms(emb.phi_s, emb.sigma_s, lam[:, None])
    return [{"utt_id": u.utt_id, "stable": float(a), "exact": float(b)}
            for u, a, b in zip(utterances, stable, exact)]


def read_samples(path):
    with open(path) as fh:
        return [{"epoch": int(r["epoch"]), "utt_id": r["utt_id"], "s_u": float(r["s_u"]),
                 "sigma_mean": float(r["sigma_mean"]), "dcos": float(r["dcos"])}
                for r in csv.DictReader(fh)]


def analyze(model: SpeakerModel, dataset, out_dir, samples=None, profile_levels=None, seed=None):
    """Write every analysis section under ``out_dir``; returns the correlation summary."""
    check_model(model)
    os.makedirs(out_dir, exist_ok=True)
    levels = list(profile_levels or dataset.cfg.frame_noise_levels)
    x, bounds = profile_utterance(dataset.cfg, levels, seed=seed)
    prof, prof_rho = precision_profile(model, x, bounds, levels)
    write_rows(os.path.join(out_dir, "precision_profile.csv"), list(prof[0]), prof)
    summary = {"precision_profile_spearman": prof_rho}
    train = dataset.train
    if model.cfg.pooling == "posterior":
        rows, r = sigma_vs_difficulty(model, train)
        write_rows(os.path.join(out_dir, "sigma_vs_dcos.csv"), list(rows[0]), rows)
        summary["sigma_dcos_pearson"] = r
        rows, r = sigma_vs_duration(model, train)
        write_rows(os.path.join(out_dir, "sigma_vs_duration.csv"), list(rows[0]), rows)
        summary["sigma_duration_pearson"] = r
    if samples:
        rows = scale_histograms(samples)
        write_rows(os.path.join(out_dir, "scale_histograms.csv"), list(rows[0]), rows)
        rows = sigma_trajectories(samples)
        write_rows(os.path.join(out_dir, "sigma_trajectories.csv"), list(rows[0]), rows)
    return summary
