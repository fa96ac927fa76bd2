"""Experiment configuration and the flat key-value config file.

The config file is INI-style with three optional sections::

    [dataset]    fields of SyntheticDatasetConfig
    [model]      pooling, precision_mode, d_out, embed_dim, trunk_widths, heads, ...
    [training]   fields of TrainingConfig (margin_*, svl_* and lambda_* flattened)

Lists are comma separated.  Unknown keys are an error.
"""
import configparser
from dataclasses import dataclass, field, fields

from ..encoder import EncoderConfig, MVAConfig
from ..losses import LambdaVariant, MarginScheduleConfig, SVLConfig
from ..model import ModelConfig
from .data import SyntheticDatasetConfig

LOSS_MODES = ("aam", "uaam", "aam+svl", "uaam+svl")
OPTIMIZERS = ("sgd", "adam")

# paper schedule breakpoints (epochs 20/40 for the margin, 40/150 for SVL)
# rescaled by epochs / 150 for desk-scale runs
PAPER_EPOCHS = 150


def rescale_epoch(paper_epoch, epochs):
    return int(round(paper_epoch * epochs / PAPER_EPOCHS))


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_final: float = 0.005
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: str = "uaam"
    margin: MarginScheduleConfig = None
    scale_start: float = 32.0
    scale_end: float = 32.0
    svl: SVLConfig = None
    lambda_variant: LambdaVariant = field(default_factory=LambdaVariant)
    include_sigma: bool = True
    checkpoint_average_k: int = 3
    seed: int = 0
    threads: int = 1
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.margin is None:
            self.margin = MarginScheduleConfig(0.2, rescale_epoch(20, self.epochs), rescale_epoch(40, self.epochs))
        if self.svl is None:
            self.svl = SVLConfig(lam=0.05, psi_svl=rescale_epoch(40, self.epochs), psi_max=self.epochs)
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.epochs < self.margin.end_epoch:
            raise ValueError("epochs must reach the end of the margin schedule")
        if "svl" in self.loss and self.epochs < self.svl.psi_max:
            raise ValueError("epochs must reach psi_max of the SVL schedule")
        if self.checkpoint_average_k < 1:
            raise ValueError("checkpoint_average_k must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch norm needs batch_size >= 2")

    @property
    def uses_svl(self):
        return self.loss.endswith("+svl")

    @property
    def uses_uaam(self):
        return self.loss.startswith("uaam")


def scale_at(epoch, cfg: TrainingConfig):
    """Softmax scale: constant, or linear from scale_start (epoch 1) to scale_end (last epoch)."""
    if cfg.scale_start == cfg.scale_end or cfg.epochs <= 1:
        return float(cfg.scale_start)
    frac = (min(max(epoch, 1), cfg.epochs) - 1) / (cfg.epochs - 1)
    return cfg.scale_start + (cfg.scale_end - cfg.scale_start) * frac


def learning_rate_at(epoch, cfg: TrainingConfig):
    """Exponential decay from learning_rate (epoch 1) to lr_final (last epoch)."""
    if cfg.lr_final is None or cfg.epochs <= 1 or cfg.learning_rate == 0:
        return cfg.learning_rate
    frac = (epoch - 1) / (cfg.epochs - 1)
    return cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** frac


def _parse(raw, kind):
    if kind is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind in (list, tuple):
        return [float(v) if any(c in v for c in ".e") else int(v) for v in (s.strip() for s in raw.split(",")) if v]
    return kind(raw.strip())


def _section(cp, name):
    return dict(cp[name]) if cp.has_section(name) else {}


def _typed(cls, values, skip=()):
    kinds = {f.name: f.type for f in fields(cls) if f.name not in skip}
    out = {}
    for key, raw in values.items():
        if key not in kinds:
            raise KeyError(f"unknown key {key!r} for {cls.__name__}")
        kind = kinds[key]
        kind = {"int": int, "float": float, "bool": bool, "str": str, "list": list, "tuple": tuple}.get(kind, kind)
        out[key] = _parse(raw, kind if isinstance(kind, type) else str)
    return out


def dataset_config(values):
    return SyntheticDatasetConfig(**_typed(SyntheticDatasetConfig, values))


def training_config(values):
    values = dict(values)
    margin = {k[7:]: values.pop(k) for k in list(values) if k.startswith("margin_")}
    svl = {k[4:]: values.pop(k) for k in list(values) if k.startswith("svl_")}
    lam = {k[7:]: values.pop(k) for k in list(values) if k.startswith("lambda_")}
    kw = _typed(TrainingConfig, values, skip=("margin", "svl", "lambda_variant"))
    epochs = kw.get("epochs", TrainingConfig.epochs)
    if margin:
        base = {"m_max": 0.2, "start_epoch": rescale_epoch(20, epochs), "end_epoch": rescale_epoch(40, epochs)}
        base.update(_typed(MarginScheduleConfig, margin))
        kw["margin"] = MarginScheduleConfig(**base)
    if svl:
        base = {"lam": 0.05, "psi_svl": rescale_epoch(40, epochs), "psi_max": epochs}
        base.update(_typed(SVLConfig, svl))
        kw["svl"] = SVLConfig(**base)
    if lam:
        if "variant" in lam:
            lam["tag"] = lam.pop("variant")
        kw["lambda_variant"] = LambdaVariant(**_typed(LambdaVariant, lam))
    return TrainingConfig(**kw)


MODEL_KEYS = {
    "pooling": str, "precision_mode": str, "d_out": int, "embed_dim": int,
    "trunk_widths": list, "trunk_activations": str, "heads": int, "d_ff": int,
    "mva_layers": int, "bn_eps": float, "precision_bias": float, "final_norm": bool,
}


def model_config(values, n_classes, feature_dim):
    kw = {}
    for key, raw in values.items():
        if key not in MODEL_KEYS:
            raise KeyError(f"unknown key {key!r} for model")
        kw[key] = _parse(raw, MODEL_KEYS[key])
    widths = [int(v) for v in kw.get("trunk_widths", [64, 64])]
    acts = [a.strip() for a in kw["trunk_activations"].split(",")] if "trunk_activations" in kw else ["relu"] * len(widths)
    mva = MVAConfig(n_heads=kw.get("heads", 8), d_model=widths[-1] if widths else feature_dim,
                    d_ff=kw.get("d_ff", 128), layers=kw.get("mva_layers", 1))
    enc = EncoderConfig(feature_dim=feature_dim, trunk_widths=widths, trunk_activations=acts,
                        embed_dim=kw.get("embed_dim", 16), mva=mva, final_norm=kw.get("final_norm", False))
    return ModelConfig(n_classes=n_classes, encoder=enc, d_out=kw.get("d_out", 16),
                       pooling=kw.get("pooling", "posterior"),
                       precision_mode=kw.get("precision_mode", "softplus"),
                       bn_eps=kw.get("bn_eps", 1e-5),
                       precision_bias=kw.get("precision_bias", ModelConfig.precision_bias))


def read_config(path):
    """Parse a config file into its raw dataset/model/training sections."""
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    extra = set(cp.sections()) - {"dataset", "model", "training"}
    if extra:
        raise KeyError(f"unknown config sections: {sorted(extra)}")
    return {name: _section(cp, name) for name in ("dataset", "model", "training")}
