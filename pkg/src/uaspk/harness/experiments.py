"""Toy experiments behind the qualitative checks.

``toy_setup`` fixes the desk-scale recipe used by the acceptance suite:
default synthetic data, Adam, and the three systems compared in the
verification experiment (posterior pooling + UAAM, posterior pooling +
AAM, mean pooling + AAM).
"""
import time
from dataclasses import dataclass, field

import numpy as np

from ..model import ModelConfig
from .analysis import mean_scale_by_epoch, precision_profile, sigma_vs_difficulty
from .config import TrainingConfig
from .data import SyntheticDatasetConfig, generate_dataset, profile_utterance
from .evaluate import evaluate
from .train import train

SYSTEMS = {
    "uaam_posterior": ("uaam", "posterior"),
    "aam_posterior": ("aam", "posterior"),
    "aam_mean": ("aam", "mean"),
}

# plain SGD drives s_u to zero under UAAM at this scale; Adam does not
TOY_TRAINING = {"optimizer": "adam", "learning_rate": 1e-3, "lr_final": 1e-4}


def toy_setup(system, seed=0, data=None, training=None, model=None):
    """(dataset config, training config, model config) for a named system."""
    loss, pooling = SYSTEMS[system]
    dcfg = SyntheticDatasetConfig(seed=seed, **(data or {}))
    tcfg = TrainingConfig(loss=loss, seed=seed, **{**TOY_TRAINING, **(training or {})})
    mcfg = ModelConfig(n_classes=dcfg.n_speakers, pooling=pooling, **(model or {}))
    return dcfg, tcfg, mcfg


@dataclass
class UncertaintyFindings:
    seed: int
    profile: list
    profile_spearman: float
    sigma_dcos_pearson: float
    scale_by_epoch: dict
    first_post_margin_epoch: int
    final_epoch: int
    seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def scale_rises(self):
        return self.scale_by_epoch[self.final_epoch] > self.scale_by_epoch[self.first_post_margin_epoch]


def uncertainty_findings(system="uaam_posterior", seed=0, dataset=None, **overrides):
    """Train one toy model and measure the profile, difficulty and scale statistics."""
    t0 = time.perf_counter()
    dcfg, tcfg, mcfg = toy_setup(system, seed, **overrides)
    ds = dataset or generate_dataset(dcfg)
    result = train(ds, tcfg, mcfg)
    levels = ds.cfg.frame_noise_levels
    x, bounds = profile_utterance(ds.cfg, levels)
    rows, rho = precision_profile(result.model, x, bounds, levels)
    _, pearson = sigma_vs_difficulty(result.model, ds.train)
    return UncertaintyFindings(
        seed=seed, profile=rows, profile_spearman=rho, sigma_dcos_pearson=pearson,
        scale_by_epoch=mean_scale_by_epoch(result.report.samples),
        first_post_margin_epoch=tcfg.margin.end_epoch + 1, final_epoch=tcfg.epochs,
        seconds=time.perf_counter() - t0,
    )


def verification_comparison(seeds=(0, 1, 2, 3, 4), systems=("uaam_posterior", "aam_mean"), rho="0"):
    """EER of each system on the corrupted eval trials, one paired run per seed."""
    eers = {s: [] for s in systems}
    for seed in seeds:
        ds = None
        for name in systems:
            dcfg, tcfg, mcfg = toy_setup(name, seed)
            ds = ds or generate_dataset(dcfg)
            model = train(ds, tcfg, mcfg).model
            eers[name].append(evaluate(model, ds.eval, ds.trials, [rho])[rho]["eer"])
    return {name: {"eer": v, "median": float(np.median(v))} for name, v in eers.items()}
