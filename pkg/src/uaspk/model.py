"""End-to-end speaker model: frame encoder, pooling, shared head and classifier."""
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_arrays, save_arrays
from .encoder import EncoderConfig, FrameEncoder, MVAConfig, init_parameters
from .losses import ClassifierWeights
from .numkit import DTYPE, RandomStream
from .pooling import (
    PRECISION_MODES,
    EmbeddingWithUncertainty,
    FrameGaussians,
    PosteriorGaussian,
    PriorParams,
    SharedHead,
    gaussian_posterior,
    precision_from_logits,
    temporal_average_pool,
)

POOLING_MODES = ("posterior", "mean")


@dataclass
class ModelConfig:
    n_classes: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_out: int = 16
    pooling: str = "posterior"
    precision_mode: str = "softplus"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # initial precision-head bias: large values start training with small posterior covariance
    precision_bias: float = 8.0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.precision_mode not in PRECISION_MODES:
            raise ValueError(f"precision_mode must be one of {PRECISION_MODES}")

    def to_dict(self):
        return asdict(self)


def pad_batch(utterances):
    """Stack variable-length (T_i, F) arrays into (B, T_max, F) plus a validity mask."""
    lengths = [len(u) for u in utterances]
    B, T, F = len(utterances), max(lengths), np.shape(utterances[0])[1]
    x = np.zeros((B, T, F))
    valid = np.zeros((B, T), dtype=bool)
    for i, u in enumerate(utterances):
        x[i, : lengths[i]] = u
        valid[i, : lengths[i]] = True
    return torch.from_numpy(x), torch.from_numpy(valid)


class SpeakerModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        d = cfg.encoder.embed_dim
        self.encoder = FrameEncoder(cfg.encoder)
        self.prior_mean = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.prior_logprec = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.head = SharedHead(d, cfg.d_out, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.classifier = nn.Parameter(torch.zeros(cfg.n_classes, cfg.d_out, dtype=DTYPE))
        self.log_alpha = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.reset_parameters(RandomStream(seed))

    def reset_parameters(self, stream):
        init_parameters(self.encoder, stream.child(1))
        with torch.no_grad():
            self.encoder.precision_head.bias.fill_(self.cfg.precision_bias)
            self.prior_mean.zero_()
            self.prior_logprec.zero_()
            self.head.gamma.fill_(1.0)
            self.head.beta.zero_()
            init_parameters(self.head.fc, stream.child(2))
            self.classifier.copy_(torch.from_numpy(stream.child(3).normal(size=tuple(self.classifier.shape))))
            self.log_alpha.zero_()
            self.head.running_mean.zero_()
            self.head.running_var.fill_(1.0)

    @property
    def prior(self):
        return PriorParams(self.prior_mean, torch.exp(self.prior_logprec))

    @property
    def alpha(self):
        return torch.exp(self.log_alpha)

    @property
    def weights(self):
        return ClassifierWeights(self.classifier)

    def frames(self, x, valid=None):
        out = self.encoder(x, valid)
        L = precision_from_logits(out.logit, self.cfg.precision_mode, valid)
        return FrameGaussians(out.z, L)

    def posterior(self, x, valid=None):
        if self.cfg.pooling == "mean":
            z = self.encoder(x, valid).z
            phi = temporal_average_pool(z, valid)
            zero = torch.zeros_like(phi)
            return PosteriorGaussian(phi, torch.full_like(phi, torch.inf), zero)
        return gaussian_posterior(self.frames(x, valid), self.prior)

    def forward(self, x, valid=None):
        """Embedding with uncertainty for a padded batch (B, T, F)."""
        return self.head(self.posterior(x, valid))

    @torch.no_grad()
    def extract(self, utterances, batch_size=64):
        """Eval-mode embeddings for a list of (T, F) arrays, in order."""
        was_training = self.training
        self.eval()
        phis, sigmas = [], []
        for i in range(0, len(utterances), batch_size):
            x, valid = pad_batch(utterances[i: i + batch_size])
            e = self(x, valid)
            phis.append(e.phi_s)
            sigmas.append(e.sigma_s)
        self.train(was_training)
        return EmbeddingWithUncertainty(torch.cat(phis), torch.cat(sigmas))

    def state_arrays(self):
        return {k: v.detach().numpy().copy() for k, v in self.state_dict().items()}

    def load_state_arrays(self, arrays):
        state = {k: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()}
        self.load_state_dict(state)

    def save(self, path, extra_meta=None):
        meta = {"model": self.cfg.to_dict()}
        meta.update(extra_meta or {})
        return save_arrays(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        cfg = model_config_from_dict(meta["model"])
        model = cls(cfg)
        model.load_state_arrays(arrays)
        return model, meta


def model_config_from_dict(d):
    d = dict(d)
    enc = dict(d.pop("encoder"))
    enc["mva"] = MVAConfig(**enc["mva"])
    return ModelConfig(encoder=EncoderConfig(**enc), **d)
