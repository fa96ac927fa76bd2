"""Gaussian posterior inference pooling and the shared batch-norm + projection head.

Each frame is treated as a noisy observation ``z_t = h + eps_t`` of a latent
utterance vector with ``eps_t ~ N(0, L_t^-1)`` and prior ``h ~ N(z_p, L_p^-1)``,
all diagonal.  The posterior over ``h`` is then pushed through batch norm and
a linear layer, the mean and the covariance sharing the same parameters.
"""
import csv
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numkit import DTYPE, as_tensor

PRECISION_MODES = ("softplus", "softmax_over_time")


@dataclass
class PriorParams:
    z_p: torch.Tensor
    L_p: torch.Tensor

    @classmethod
    def standard(cls, d):
        return cls(torch.zeros(d, dtype=DTYPE), torch.ones(d, dtype=DTYPE))


@dataclass
class FrameGaussians:
    z: torch.Tensor
    L: torch.Tensor


@dataclass
class PosteriorGaussian:
    phi: torch.Tensor
    prec: torch.Tensor
    cov: torch.Tensor
    empty: bool = False


@dataclass
class SharedHeadParams:
    mu_bn: torch.Tensor
    sigma_bn: torch.Tensor
    gamma_bn: torch.Tensor
    beta_bn: torch.Tensor
    A_fc: torch.Tensor
    b_fc: torch.Tensor
    eps: float = 1e-5

    @classmethod
    def identity(cls, d):
        one, zero = torch.ones(d, dtype=DTYPE), torch.zeros(d, dtype=DTYPE)
        return cls(zero, one, one, zero, torch.eye(d, dtype=DTYPE), zero, eps=0.0)


@dataclass
class EmbeddingWithUncertainty:
    phi_s: torch.Tensor
    sigma_s: torch.Tensor


def precision_from_logits(logit, mode="softplus", valid=None):
    """Positive frame precisions from log-precision logits.

    ``softplus`` is elementwise.  ``softmax_over_time`` normalizes each
    dimension across frames, so every column sums to one.  ``valid`` (same
    leading shape as ``logit`` minus the last axis) zeroes padded frames.
    """
    logit = as_tensor(logit)
    if mode == "softplus":
        L = F.softplus(logit)
        return L if valid is None else L * valid[..., None]
    if mode == "softmax_over_time":
        if valid is not None:
            logit = logit.masked_fill(~valid[..., None], float("-inf"))
        return torch.softmax(logit, dim=-2)
    raise ValueError(f"unknown precision mode {mode!r}")


def gaussian_posterior(frames: FrameGaussians, prior: PriorParams):
    """Closed-form diagonal posterior of the latent utterance vector.

    Works on (T, d) or batched (B, T, d) frames; padded frames should carry
    zero precision.  With no frames the prior is returned and flagged.
    """
    z, L = as_tensor(frames.z), as_tensor(frames.L)
    if z.shape != L.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs L {tuple(L.shape)}")
    z_p, L_p = as_tensor(prior.z_p), as_tensor(prior.L_p)
    if z.shape[-2] == 0:
        phi = z_p.expand(z.shape[:-2] + z_p.shape)
        prec = L_p.expand_as(phi)
        return PosteriorGaussian(phi, prec, 1.0 / prec, empty=True)
    prec = L.sum(dim=-2) + L_p
    phi = ((L * z).sum(dim=-2) + L_p * z_p) / prec
    return PosteriorGaussian(phi, prec, 1.0 / prec)


def temporal_average_pool(z, valid=None):
    """Plain frame mean, the baseline the posterior reduces to."""
    z = as_tensor(z)
    if valid is None:
        return z.sum(dim=-2) / z.shape[-2]
    w = valid.to(DTYPE)[..., None]
    return (z * w).sum(dim=-2) / w.sum(dim=-2)


def _bn_denominator(head):
    denom = as_tensor(head.sigma_bn) + head.eps
    if (denom <= 0).any():
        raise ValueError("sigma_bn + eps must be positive in every dimension")
    return denom


def propagate_mean(post: PosteriorGaussian, head: SharedHeadParams):
    """Posterior mean through batch norm and the projection."""
    denom = _bn_denominator(head)
    normed = (post.phi - head.mu_bn) / torch.sqrt(denom) * head.gamma_bn + head.beta_bn
    return normed @ head.A_fc.T + head.b_fc


def propagate_variance(post: PosteriorGaussian, head: SharedHeadParams):
    """Diagonal of ``A diag(cov * gamma^2 / (sigma + eps)) A^T``.

    Only the diagonal is kept; shifts (mu, beta, b) do not enter.
    """
    D = post.cov * head.gamma_bn ** 2 / _bn_denominator(head)
    return D @ (head.A_fc ** 2).T


class SharedHead(nn.Module):
    """Batch norm + linear layer applied to both posterior branches.

    Training mode normalizes with the biased batch variance and updates the
    running statistics (momentum 0.1, unbiased variance) once per call, in
    batch order.  Eval mode uses the frozen running statistics.  The variance
    branch always consumes the same ``sigma_bn`` as the mean branch.
    """

    def __init__(self, d, d_out, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.beta = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.fc = nn.Linear(d, d_out, dtype=DTYPE)
        self.register_buffer("running_mean", torch.zeros(d, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(d, dtype=DTYPE))

    def params(self, phi=None):
        if self.training:
            if phi is None or phi.dim() != 2 or phi.shape[0] < 2:
                raise ValueError("training-mode batch norm needs a batch of >= 2 posteriors")
            mu, var = phi.mean(0), phi.var(0, unbiased=False)
            with torch.no_grad():
                n = phi.shape[0]
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mu.detach())
                self.running_var.mul_(1 - self.momentum).add_(
                    self.momentum * var.detach() * n / (n - 1))
        else:
            mu, var = self.running_mean, self.running_var
        return SharedHeadParams(mu, var, self.gamma, self.beta, self.fc.weight, self.fc.bias, self.eps)

    def forward(self, post: PosteriorGaussian):
        head = self.params(post.phi)
        return EmbeddingWithUncertainty(propagate_mean(post, head), propagate_variance(post, head))


def export_embeddings_csv(path, utt_ids, embeddings: EmbeddingWithUncertainty):
    """One row per utterance: id, d_out, phi_s values, then sigma_s values."""
    phi = np.asarray(embeddings.phi_s.detach(), dtype=np.float64)
    sig = np.asarray(embeddings.sigma_s.detach(), dtype=np.float64)
    d = phi.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "d_out"] + [f"phi_{i}" for i in range(d)] + [f"sigma_{i}" for i in range(d)])
        for u, p, s in zip(utt_ids, phi, sig):
            w.writerow([u, d] + [repr(float(v)) for v in p] + [repr(float(v)) for v in s])


def read_embeddings_csv(path):
    ids, phis, sigs = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            d = int(row[1])
            ids.append(row[0])
            phis.append([float(v) for v in row[2:2 + d]])
            sigs.append([float(v) for v in row[2 + d:2 + 2 * d]])
    return ids, EmbeddingWithUncertainty(torch.tensor(phis, dtype=DTYPE), torch.tensor(sigs, dtype=DTYPE))
