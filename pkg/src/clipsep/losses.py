"""Training objectives on (batched) mask tensors.

Masks and targets are shaped (B, n, T, F) with mixture magnitudes X of
shape (B, T, F).  Unbatched inputs (n, T, F) / (T, F) are accepted too and
give unbatched results.  Per-bin losses are averaged over T x F.
"""

import itertools
from dataclasses import dataclass, field

import torch

from .errors import InvalidInputError

CLAMP_EPS = 1e-7
MAX_PERMUTATION_SOURCES = 6


@dataclass
class LossConfig:
    lambda_: float = 0.1
    gamma: float = 0.25
    clamp_eps: float = CLAMP_EPS

    def __post_init__(self):
        if self.lambda_ < 0:
            raise InvalidInputError("lambda must be non-negative")
        if self.gamma < 0:
            raise InvalidInputError("gamma must be non-negative")

    def check(self, n):
        if self.gamma > n:
            raise InvalidInputError(f"gamma={self.gamma} outside [0, n={n}]")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    nit: torch.Tensor = None
    reg: torch.Tensor = None
    chosen_permutation: list = field(default_factory=list)

    def as_log(self):
        out = {"total": float(self.total.detach())}
        if self.nit is not None:
            out["nit"] = float(self.nit.detach())
        if self.reg is not None:
            out["reg"] = float(self.reg.detach())
        out["chosen_permutation"] = self.chosen_permutation
        return out


def wbce(target, pred, X, eps=CLAMP_EPS):
    """Magnitude-weighted binary cross entropy, averaged over the last two axes."""
    if target.shape != pred.shape:
        raise InvalidInputError(f"target {tuple(target.shape)} vs prediction {tuple(pred.shape)}")
    if X.shape[-2:] != pred.shape[-2:]:
        raise InvalidInputError(f"magnitude {tuple(X.shape)} vs mask {tuple(pred.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    bce = -target * torch.log(p) - (1.0 - target) * torch.log1p(-p)
    return (X * bce).mean(dim=(-2, -1))


def _batched(*tensors):
    unbatched = tensors[0].dim() == 3
    if unbatched:
        tensors = tuple(t.unsqueeze(0) for t in tensors)
    return unbatched, tensors


def _check_count(*tensors):
    n = tensors[0].shape[-3]
    for t in tensors[1:]:
        if t.shape[-3] != n:
            raise InvalidInputError(f"source count mismatch: {n} vs {t.shape[-3]}")
    return n


def clipsep_loss(masks, targets, X, eps=CLAMP_EPS):
    """Sum over sources of wbce(target_i, mask_i)."""
    _check_count(masks, targets)
    return wbce(targets, masks, X.unsqueeze(-3), eps).sum(dim=-1)


def _permutations(n):
    if n > MAX_PERMUTATION_SOURCES:
        raise InvalidInputError(
            f"exhaustive permutation search refused for n={n} > {MAX_PERMUTATION_SOURCES}"
        )
    return list(itertools.permutations(range(n)))


def _min_over_permutations(pair_cost, counter):
    """pair_cost[b, i, j]: cost of pairing target i with candidate j."""
    B, n, _ = pair_cost.shape
    perms = _permutations(n)
    idx = torch.tensor(perms, dtype=torch.long)  # (P, n)
    rows = torch.arange(n)
    sums = pair_cost[:, rows[None, :], idx].sum(dim=-1)  # (B, P)
    if counter is not None:
        counter["candidates"] += B * len(perms)
    best = torch.argmin(sums.detach(), dim=1)
    loss = sums.gather(1, best[:, None]).squeeze(1)
    return loss, idx[best]


def nit_loss(query_masks, noise_masks, targets, X, eps=CLAMP_EPS, counter=None):
    """Noise-invariant loss: best pairing of query heads with noise heads.

    Returns (loss, permutation) where ``permutation[i]`` is the noise head
    added to query head i.  ``counter["candidates"]`` is incremented by the
    number of candidate arrangements evaluated (n! per example).
    """
    n = _check_count(query_masks, noise_masks, targets)
    unbatched, (Q, N, M, X) = _batched(query_masks, noise_masks, targets, X)
    _permutations(n)  # refuse large n before building the n x n cost grid
    # combined[b, i, j] = min(1, Q_i + N_j)
    combined = torch.clamp(Q.unsqueeze(2) + N.unsqueeze(1), max=1.0)
    pair_cost = wbce(M.unsqueeze(2).expand_as(combined), combined, X[:, None, None], eps)
    loss, perm = _min_over_permutations(pair_cost, counter)
    if unbatched:
        return loss[0], perm[0]
    return loss, perm


def pit_loss(masks, targets, X, eps=CLAMP_EPS, counter=None):
    """Permutation-invariant loss; ``permutation[i]`` is the prediction matched to target i."""
    n = _check_count(masks, targets)
    unbatched, (P, M, X) = _batched(masks, targets, X)
    _permutations(n)  # refuse large n before building the n x n cost grid
    pair_cost = wbce(
        M.unsqueeze(2).expand(-1, -1, n, -1, -1),
        P.unsqueeze(1).expand(-1, n, -1, -1, -1),
        X[:, None, None],
        eps,
    )
    loss, perm = _min_over_permutations(pair_cost, counter)
    if unbatched:
        return loss[0], perm[0]
    return loss, perm


def noise_activation(noise_masks):
    """Total mean noise-head activation, sum_i mean(N_i)."""
    return noise_masks.mean(dim=(-2, -1)).sum(dim=-1)


def noise_reg(noise_masks, gamma):
    """Hinge max(0, sum_i mean(N_i) - gamma)."""
    return torch.relu(noise_activation(noise_masks) - gamma)


def nit_objective(query_masks, noise_masks, targets, X, cfg=None, counter=None):
    """Batch-mean of nit_loss + lambda * noise_reg."""
    cfg = cfg or LossConfig()
    cfg.check(query_masks.shape[-3])
    nit, perm = nit_loss(query_masks, noise_masks, targets, X, cfg.clamp_eps, counter)
    reg = noise_reg(noise_masks, cfg.gamma)
    nit, reg = nit.mean(), reg.mean()
    return LossBreakdown(
        total=nit + cfg.lambda_ * reg, nit=nit, reg=reg, chosen_permutation=perm.tolist()
    )
