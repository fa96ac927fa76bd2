"""Desk-scale training loop.

One run = epochs of shuffled mini-batches through encoder -> pooling ->
shared head -> (U)AAM [+ kappa * SVL], with the margin, scale, kappa and
learning-rate schedules evaluated once per epoch.  Telemetry is written as
CSV with ``repr`` floats so that identical runs give identical bytes.
"""
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from ..checkpoint import checkpoint_average, load_arrays
from ..losses import (
    aam_loss,
    build_centroids,
    build_lambda,
    delta_cos,
    kappa_at,
    margin_at,
    svl_loss,
    total_loss,
    uaam_forward,
    uncertainty_scale,
)
from ..model import ModelConfig, SpeakerModel, pad_batch
from ..numkit import RandomStream
from .config import TrainingConfig, learning_rate_at, scale_at

logger = logging.getLogger(__name__)

EPOCH_FIELDS = [
    "epoch", "lr", "margin", "scale", "kappa", "alpha", "loss_total", "loss_class",
    "loss_svl", "svl_raw", "su_mean", "su_q10", "su_q50", "su_q90", "sigma_mean",
    "dcos_mean", "clamp_count", "train_acc",
]
STEP_FIELDS = [
    "epoch", "step", "loss_total", "loss_class", "loss_svl", "su_mean", "sigma_mean",
    "dcos_mean", "clamp_count",
]
SAMPLE_FIELDS = ["epoch", "utt_id", "s_u", "sigma_mean", "dcos"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ExperimentReport:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    centroids: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    correlations: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    model: SpeakerModel
    checkpoints: list
    report: ExperimentReport


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])


def _optimizer(model, cfg):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _centroid_rows(epoch, table):
    rows = []
    for spk in sorted(table.centroids):
        rows.append({"epoch": epoch, "speaker": spk,
                     "values": " ".join(repr(float(v)) for v in table.centroids[spk])})
    return rows


def pretrain_centroids(utterances, labels, model_cfg, cfg: TrainingConfig, checkpoint=None):
    """Fixed centroids from an AAM-only model (trained here unless ``checkpoint`` is given)."""
    if checkpoint is not None:
        model, _ = SpeakerModel.load(checkpoint)
        source = str(checkpoint)
    else:
        pre_cfg = TrainingConfig(**{**cfg.__dict__, "loss": "aam", "save_checkpoints": False})
        model = train_model(utterances, labels, model_cfg, pre_cfg).model
        source = "aam-pretrain"
    emb = model.extract([u.features for u in utterances])
    return build_centroids(emb.phi_s, labels, mode="pre", source=source)


def train_model(utterances, labels, model_cfg: ModelConfig, cfg: TrainingConfig,
                out_dir=None, centroids=None, ids=None):
    """Train on ``utterances`` (objects with ``.features``) with integer ``labels``.

    Writes checkpoints and telemetry under ``out_dir`` when given.  The
    returned model is the average of the last ``checkpoint_average_k``
    epoch checkpoints.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    torch.set_num_threads(cfg.threads)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    ids = ids or [getattr(u, "utt_id", str(i)) for i, u in enumerate(utterances)]
    feats = [u.features for u in utterances]
    root = RandomStream(cfg.seed)
    model = SpeakerModel(model_cfg, seed=cfg.seed)
    model.train()
    opt = _optimizer(model, cfg)
    report = ExperimentReport()
    ckpt_dir = os.path.join(out_dir, "checkpoints") if out_dir else None
    history = []

    if cfg.uses_svl and cfg.svl.centroid_mode == "pre" and centroids is None:
        centroids = pretrain_centroids(utterances, labels, model_cfg, cfg)
    table = centroids if cfg.svl.centroid_mode == "pre" else None
    if table is not None:
        report.centroids += _centroid_rows(0, table)

    n = len(feats)
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        m, s, kappa = margin_at(epoch, cfg.margin), scale_at(epoch, cfg), kappa_at(epoch, cfg.svl)
        if not cfg.uses_svl:
            kappa = 0.0
        order = root.child(epoch).permutation(n)
        batches = [order[i: i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate([batches[-2], batches[-1]])
            batches.pop()
        sums = {"loss_total": 0.0, "loss_class": 0.0, "loss_svl": 0.0, "svl_raw": 0.0}
        su_all, sig_all, dcos_all, correct, clamps = [], [], [], 0, 0
        for step, idx in enumerate(batches, 1):
            x, valid = pad_batch([feats[i] for i in idx])
            y = labels[idx]
            try:
                emb = model(x, valid)
            except FloatingPointError as err:
                raise TrainingDiverged(f"{err} at epoch {epoch} step {step}") from err
            dcos = delta_cos(emb.phi_s, y, model.weights)
            if cfg.uses_uaam:
                out = uaam_forward(emb.phi_s, emb.sigma_s, y, model.weights, s=s, m=m,
                                   variant=cfg.lambda_variant, include_sigma=cfg.include_sigma, dcos=dcos)
                cls_loss, s_u, n_clamped = out.loss, out.s_u.detach(), out.n_clamped
            else:
                cls_loss = aam_loss(emb.phi_s, y, model.weights, s=s, m=m)
                with torch.no_grad():
                    lam, n_clamped = build_lambda(cfg.lambda_variant, dcos)
                    s_u = uncertainty_scale(emb.phi_s, emb.sigma_s, lam[:, None])
            svl_raw = torch.zeros((), dtype=cls_loss.dtype)
            if kappa > 0 and table is not None:
                svl_raw = svl_loss(emb.phi_s, emb.sigma_s, y, table, model.alpha)
            loss = total_loss(cls_loss, svl_raw, epoch, cfg.svl) if kappa > 0 else cls_loss
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            sig_mean = emb.sigma_s.detach().mean(dim=1)
            with torch.no_grad():
                pred = (emb.phi_s.detach() @ model.classifier.detach().T).argmax(1)
            correct += int((pred == y).sum())
            clamps += n_clamped
            B = len(idx)
            sums["loss_total"] += loss.item() * B
            sums["loss_class"] += cls_loss.item() * B
            sums["loss_svl"] += kappa * svl_raw.item() * B
            sums["svl_raw"] += svl_raw.item() * B
            su_all.append(s_u)
            sig_all.append(sig_mean)
            dcos_all.append(dcos)
            report.steps.append({
                "epoch": epoch, "step": step, "loss_total": loss.item(), "loss_class": cls_loss.item(),
                "loss_svl": kappa * svl_raw.item(), "su_mean": float(s_u.mean()),
                "sigma_mean": float(sig_mean.mean()), "dcos_mean": float(dcos.mean()),
                "clamp_count": n_clamped,
            })
            for j, i in enumerate(idx):
                report.samples.append({"epoch": epoch, "utt_id": ids[i], "s_u": float(s_u[j]),
                                       "sigma_mean": float(sig_mean[j]), "dcos": float(dcos[j])})
        su = torch.cat(su_all).numpy()
        q10, q50, q90 = np.quantile(su, [0.1, 0.5, 0.9])
        report.epochs.append({
            "epoch": epoch, "lr": float(lr), "margin": float(m), "scale": float(s), "kappa": float(kappa),
            "alpha": float(model.alpha.detach()),
            **{k: v / n for k, v in sums.items()},
            "su_mean": float(su.mean()), "su_q10": float(q10), "su_q50": float(q50), "su_q90": float(q90),
            "sigma_mean": float(torch.cat(sig_all).mean()), "dcos_mean": float(torch.cat(dcos_all).mean()),
            "clamp_count": clamps, "train_acc": correct / n,
        })
        logger.info("epoch %d loss %.4f acc %.3f su %.3f", epoch, sums["loss_total"] / n, correct / n, su.mean())

        state = model.state_arrays()
        history.append(state)
        if ckpt_dir and cfg.save_checkpoints:
            model.save(os.path.join(ckpt_dir, f"epoch_{epoch:03d}"), {"epoch": epoch})
        if cfg.uses_svl and cfg.svl.centroid_mode == "epoch" and epoch < cfg.epochs:
            # rows are labelled with the epoch that uses them
            emb_all = model.extract(feats)
            table = build_centroids(emb_all.phi_s, labels, mode="epoch", source=f"epoch_{epoch:03d}")
            report.centroids += _centroid_rows(epoch + 1, table)

    final = SpeakerModel(model_cfg, seed=cfg.seed)
    final.load_state_arrays(checkpoint_average(history[-cfg.checkpoint_average_k:]))
    final.eval()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        final.save(os.path.join(out_dir, "final"), {"averaged": cfg.checkpoint_average_k})
        report.paths.update(write_report(report, out_dir))
    return TrainResult(final, history, report)


def write_report(report: ExperimentReport, out_dir):
    paths = {
        "epochs": os.path.join(out_dir, "telemetry_epochs.csv"),
        "steps": os.path.join(out_dir, "telemetry_steps.csv"),
        "samples": os.path.join(out_dir, "telemetry_samples.csv"),
    }
    write_rows(paths["epochs"], EPOCH_FIELDS, report.epochs)
    write_rows(paths["steps"], STEP_FIELDS, report.steps)
    write_rows(paths["samples"], SAMPLE_FIELDS, report.samples)
    if report.centroids:
        paths["centroids"] = os.path.join(out_dir, "centroids.csv")
        write_rows(paths["centroids"], ["epoch", "speaker", "values"], report.centroids)
    return paths


def average_checkpoint_files(paths):
    """Average checkpoint files on disk; returns (arrays, meta of the last one)."""
    loaded = [load_arrays(p) for p in paths]
    return checkpoint_average([a for a, _ in loaded]), loaded[-1][1]


def train(dataset, cfg: TrainingConfig, model_cfg: ModelConfig, out_dir=None, centroids=None):
    """Train on the training split of a synthetic :class:`Dataset`."""
    utts = dataset.train
    speakers = sorted({u.speaker for u in utts})
    remap = {s: i for i, s in enumerate(speakers)}
    labels = [remap[u.speaker] for u in utts]
    return train_model(utts, labels, model_cfg, cfg, out_dir=out_dir, centroids=centroids,
                       ids=[u.utt_id for u in utts])
