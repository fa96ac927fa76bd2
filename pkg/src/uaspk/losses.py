"""Classification and uncertainty-supervision objectives.

All losses take an embedding batch ``phi_s`` of shape (N, d) (a single
(d,) vector is promoted) and integer labels, and return the batch mean.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch

from .numkit import DTYPE, as_tensor, log_sum_exp

logger = logging.getLogger(__name__)


@dataclass
class ClassifierWeights:
    W: torch.Tensor
    b: torch.Tensor = None

    def __post_init__(self):
        if self.W.dim() != 2 or self.W.shape[0] < 2:
            raise ValueError("classifier needs a C x d weight matrix with C >= 2")
        if self.b is None:
            self.b = torch.zeros(self.W.shape[0], dtype=self.W.dtype)

    @property
    def n_classes(self):
        return self.W.shape[0]


@dataclass
class MarginScheduleConfig:
    m_max: float = 0.2
    start_epoch: int = 20
    end_epoch: int = 40

    def __post_init__(self):
        if not 0 <= self.start_epoch <= self.end_epoch:
            raise ValueError("need 0 <= start_epoch <= end_epoch")


@dataclass
class SVLConfig:
    lam: float = 0.05
    psi_svl: int = 40
    psi_max: int = 150
    alpha: float = 1.0
    centroid_mode: str = "epoch"

    def __post_init__(self):
        if self.psi_svl >= self.psi_max:
            raise ValueError("psi_svl must be smaller than psi_max")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.centroid_mode not in ("pre", "epoch"):
            raise ValueError(f"centroid_mode must be 'pre' or 'epoch', got {self.centroid_mode!r}")


@dataclass(frozen=True)
class LambdaVariant:
    """Bias term of the uncertainty-aware scale.

    ``identity``: 1; ``one_minus_dcos``: 1 - dcos; ``half_minus_dcos``:
    0.5 - dcos; ``const_minus_dcos``: c - dcos.  Clamped below at ``floor``.
    """
    tag: str = "half_minus_dcos"
    c: float = 0.5
    floor: float = 1e-6

    def __post_init__(self):
        if self.tag not in ("identity", "one_minus_dcos", "half_minus_dcos", "const_minus_dcos"):
            raise ValueError(f"unknown Lambda variant {self.tag!r}")
        if self.floor < 0:
            raise ValueError("floor must be non-negative")

    def offset(self):
        return {"identity": None, "one_minus_dcos": 1.0, "half_minus_dcos": 0.5}.get(self.tag, self.c)


@dataclass
class CentroidTable:
    centroids: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    mode: str = "epoch"
    source: str = ""

    def __getitem__(self, speaker):
        try:
            return self.centroids[int(speaker)]
        except KeyError:
            raise KeyError(f"no centroid for speaker {int(speaker)}") from None

    def __contains__(self, speaker):
        return int(speaker) in self.centroids

    def stack(self, labels):
        return torch.stack([self[y] for y in labels.tolist()])


def _batch(phi_s, labels):
    phi_s = as_tensor(phi_s)
    if phi_s.dim() == 1:
        phi_s = phi_s[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.shape[0] != phi_s.shape[0]:
        raise ValueError("one label per embedding")
    return phi_s, labels


def _check_labels(labels, C):
    if (labels < 0).any() or (labels >= C).any():
        raise ValueError(f"label out of range [0, {C})")


def cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` via the max-shifted LSE."""
    target = logits.gather(1, labels[:, None]).squeeze(1)
    return (log_sum_exp(logits, dim=1) - target).mean()


def softmax_ce_loss(phi_s, labels, weights: ClassifierWeights):
    phi_s, labels = _batch(phi_s, labels)
    _check_labels(labels, weights.n_classes)
    return cross_entropy(phi_s @ weights.W.T + weights.b, labels)


def _normalize(x, what):
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if (n == 0).any():
        raise ValueError(f"zero-norm {what}")
    return x / n


def cosines(phi_s, weights: ClassifierWeights):
    """Cosine between every embedding and every class row, (N, C)."""
    return _normalize(phi_s, "embedding") @ _normalize(weights.W, "weight row").T


def margin_logits(cos, labels, m):
    """``cos(theta_y + m)`` at the target, ``cos(theta_j)`` elsewhere."""
    if m == 0:
        return cos
    target = cos.gather(1, labels[:, None]).clamp(-1.0, 1.0)
    sin = torch.sqrt((1.0 - target * target).clamp_min(0.0))
    shifted = target * math.cos(m) - sin * math.sin(m)
    return cos.scatter(1, labels[:, None], shifted)


def aam_loss(phi_s, labels, weights: ClassifierWeights, s=32.0, m=0.2):
    if s <= 0:
        raise ValueError("scale must be positive")
    phi_s, labels = _batch(phi_s, labels)
    _check_labels(labels, weights.n_classes)
    return cross_entropy(s * margin_logits(cosines(phi_s, weights), labels, m), labels)


def margin_at(epoch, cfg: MarginScheduleConfig):
    """0 up to ``start_epoch``, linear to ``m_max`` at ``end_epoch``, flat after."""
    if epoch <= cfg.start_epoch:
        return 0.0
    if epoch >= cfg.end_epoch:
        return float(cfg.m_max)
    return cfg.m_max * (epoch - cfg.start_epoch) / (cfg.end_epoch - cfg.start_epoch)


def delta_cos(phi_s, labels, weights: ClassifierWeights):
    """Detached gap between the target cosine and the best competitor."""
    phi_s, labels = _batch(phi_s, labels)
    _check_labels(labels, weights.n_classes)
    with torch.no_grad():
        cos = cosines(phi_s.detach(), ClassifierWeights(weights.W.detach()))
        target = cos.gather(1, labels[:, None]).squeeze(1)
        rivals = cos.scatter(1, labels[:, None], float("-inf"))
        return target - rivals.max(dim=1).values


def _quadratic(phi_s, metric_diag):
    q = (phi_s * phi_s * metric_diag).sum(dim=-1)
    if (q <= 0).any():
        raise ValueError("non-positive quadratic form in uncertainty scale")
    return q


def uncertainty_scale(phi_s, sigma_s, Lambda):
    """``||phi|| / sqrt(phi^T (Lambda + Sigma) phi)`` with diagonal matrices.

    ``Lambda`` broadcasts against ``sigma_s`` (scalar per sample is fine).
    """
    phi_s, sigma_s = as_tensor(phi_s), as_tensor(sigma_s)
    # same reduction as the quadratic form so that Lambda + Sigma = 1 gives exactly 1
    sq = (phi_s * phi_s).sum(dim=-1)
    if (sq == 0).any():
        raise ValueError("zero-norm embedding in uncertainty scale")
    return torch.sqrt(sq) / torch.sqrt(_quadratic(phi_s, as_tensor(Lambda) + sigma_s))


def exact_mahalanobis_scale(phi_s, sigma_s, Lambda):
    """``sqrt(phi^T (Lambda + Sigma)^-1 phi) / ||phi||``, the inverse-metric form."""
    phi_s, sigma_s = as_tensor(phi_s), as_tensor(sigma_s)
    diag = as_tensor(Lambda) + sigma_s
    if (diag == 0).any():
        raise ValueError("zero diagonal entry in Lambda + Sigma")
    norm = torch.linalg.vector_norm(phi_s, dim=-1)
    if (norm == 0).any():
        raise ValueError("zero-norm embedding")
    return torch.sqrt(_quadratic(phi_s, 1.0 / diag)) / norm


def build_lambda(variant: LambdaVariant, dcos):
    """Per-sample diagonal value of Lambda and the number of floor clamps."""
    off = variant.offset()
    if off is None:
        return torch.ones_like(dcos), 0
    raw = off - dcos
    n_clamped = int((raw < variant.floor).sum())
    return raw.clamp_min(variant.floor), n_clamped


class UAAMOutput(NamedTuple):
    loss: torch.Tensor
    s_u: torch.Tensor
    delta_cos: torch.Tensor
    n_clamped: int


def uaam_forward(phi_s, sigma_s, labels, weights, s=32.0, m=0.2,
                 variant: LambdaVariant = LambdaVariant(), include_sigma=True, dcos=None):
    """AAM with every logit scaled by ``s * s_u``.

    ``dcos`` overrides the detached difficulty indicator (used to build a
    frozen surrogate for gradient checks).  ``include_sigma=False`` keeps
    only Lambda in the scale.
    """
    if s <= 0:
        raise ValueError("scale must be positive")
    phi_s, labels = _batch(phi_s, labels)
    sigma_s = as_tensor(sigma_s).reshape(phi_s.shape)
    _check_labels(labels, weights.n_classes)
    if dcos is None:
        dcos = delta_cos(phi_s, labels, weights)
    lam, n_clamped = build_lambda(variant, as_tensor(dcos).reshape(-1))
    sig = sigma_s if include_sigma else torch.zeros_like(sigma_s)
    s_u = uncertainty_scale(phi_s, sig, lam[:, None])
    logits = (s * s_u)[:, None] * margin_logits(cosines(phi_s, weights), labels, m)
    if n_clamped:
        logger.debug("Lambda floor clamp on %d samples", n_clamped)
    return UAAMOutput(cross_entropy(logits, labels), s_u, dcos, n_clamped)


def uaam_loss(phi_s, sigma_s, labels, weights, s=32.0, m=0.2,
              variant: LambdaVariant = LambdaVariant(), include_sigma=True, dcos=None):
    return uaam_forward(phi_s, sigma_s, labels, weights, s, m, variant, include_sigma, dcos).loss


def svl_loss(phi_s, sigma_s, labels, centroids: CentroidTable, alpha):
    """Mean over the batch of ``||alpha * sqrt(Sigma) - |phi - centroid|||^2``."""
    phi_s, labels = _batch(phi_s, labels)
    sigma_s = as_tensor(sigma_s).reshape(phi_s.shape)
    target = centroids.stack(labels).to(phi_s.dtype)
    resid = as_tensor(alpha) * torch.sqrt(sigma_s) - (phi_s - target).abs()
    return (resid * resid).sum(dim=-1).mean()


def kappa_at(epoch, cfg: SVLConfig):
    """SVL weight: 0 through ``psi_svl``, then rising linearly to ``lam`` at ``psi_max``."""
    if epoch <= cfg.psi_svl:
        return 0.0
    return cfg.lam * (epoch - cfg.psi_svl) / (cfg.psi_max - cfg.psi_svl)


def total_loss(classification_loss, svl, epoch, cfg: SVLConfig):
    kappa = kappa_at(epoch, cfg)
    if kappa == 0.0:
        return classification_loss
    return classification_loss + kappa * svl


def build_centroids(embeddings, labels, mode="epoch", source="", speakers=None):
    """Per-speaker mean embedding.

    ``speakers`` lists the speakers expected in the table; any of them with
    no utterance is left out with a warning.
    """
    if mode not in ("pre", "epoch"):
        raise ValueError(f"unknown centroid mode {mode!r}")
    emb = as_tensor(embeddings).detach()
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    table = CentroidTable(mode=mode, source=source)
    for spk in sorted(set(labels.tolist())):
        rows = emb[labels == spk]
        table.centroids[spk] = rows.sum(dim=0) / rows.shape[0]
        table.counts[spk] = rows.shape[0]
    if speakers is not None:
        missing = sorted(set(int(s) for s in speakers) - set(table.centroids))
        if missing:
            logger.warning("no utterances for speakers %s; excluded from centroid table", missing)
    return table
