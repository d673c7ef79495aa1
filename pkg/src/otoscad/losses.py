"""Training objectives for the embedding stage.

All functions take embeddings as torch tensors (rows are vectors on or near
the unit sphere) and return scalar tensors, so gradients come from autograd.
View batches are stacked halves: rows [0, N) are first views, rows [N, 2N)
are second views, and row i pairs with row (i + N) % 2N.
"""

from __future__ import annotations

import torch

from .geometry import ContractError

MSC_TERM = "msc"
ANGULAR_TERM = "angular"
SHIFT_ANGULAR_TERM = "shift_angular"
OBJECTIVE_TERMS = (MSC_TERM, ANGULAR_TERM, SHIFT_ANGULAR_TERM)


def paired_indices(n_views: int) -> torch.Tensor:
    """Positive index for each anchor under the stacked-halves layout."""
    if n_views % 2 != 0:
        raise ContractError(f"view count {n_views} is not 2N")
    n = n_views // 2
    idx = torch.arange(n_views)
    return (idx + n) % n_views


def contrastive_loss_per_anchor(
    views: torch.Tensor,
    tau: float,
    extras: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-anchor InfoNCE values over a 2N view batch.

    Each of the 2N views is an anchor; its positive is its paired view and the
    denominator runs over every other view plus all extra instances.  Extras
    (e.g. shift-transformed samples) are never anchors.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be > 0, got {tau}")
    n_views = views.shape[0]
    pos = paired_indices(n_views)
    pool = views if extras is None or extras.shape[0] == 0 else torch.cat([views, extras], dim=0)
    sims = views @ pool.T / tau
    pos_sim = sims.gather(1, pos.view(-1, 1)).squeeze(1)
    mask = torch.zeros_like(sims, dtype=torch.bool)
    mask[torch.arange(n_views), torch.arange(n_views)] = True
    denom = torch.logsumexp(sims.masked_fill(mask, float("-inf")), dim=1)
    return denom - pos_sim


def contrastive_loss(
    views: torch.Tensor, tau: float, extras: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean InfoNCE over all 2N anchors."""
    return contrastive_loss_per_anchor(views, tau, extras).mean()


def mean_shift(embeddings: torch.Tensor, center: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Center-subtracted embeddings renormalized to the unit sphere."""
    diff = embeddings - center
    norms = diff.norm(dim=-1, keepdim=True)
    if bool((norms < eps).any()):
        raise ContractError("embedding coincides with the center; shifted direction undefined")
    return diff / norms


def msc_loss(
    views: torch.Tensor,
    center: torch.Tensor,
    tau: float,
    shifted: torch.Tensor | None = None,
    include_shifted: bool = True,
) -> torch.Tensor:
    """Contrastive loss evaluated in the mean-shifted space.

    Shifted samples join the candidate pool as additional instances (negatives
    for every anchor) unless include_shifted is off; they are never anchors.
    """
    theta_views = mean_shift(views, center)
    theta_extras = None
    if shifted is not None and shifted.shape[0] > 0 and include_shifted:
        theta_extras = mean_shift(shifted, center)
    return contrastive_loss(theta_views, tau, theta_extras)


def angular_loss(embeddings: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
    """Mean negative cosine to the center; minimized when everything sits at c."""
    return -(embeddings @ center).mean()


def shift_angular_loss(
    normal: torch.Tensor, shifted: torch.Tensor, center: torch.Tensor
) -> torch.Tensor:
    """Angular pull on normal samples plus a hinge pushing shifted ones off center.

    mean(-phi(x) . c) + mean(max(0, 1 - phi(z) . c)); with equal, paired
    batches this is the per-pair mean of -phi(x).c + max(0, 1 - phi(z).c).
    """
    pull = -(normal @ center).mean()
    hinge = torch.clamp(1.0 - shifted @ center, min=0.0).mean()
    return pull + hinge


def final_loss(
    views: torch.Tensor,
    shifted: torch.Tensor,
    center: torch.Tensor,
    tau: float,
    include_shifted_in_msc: bool = True,
) -> torch.Tensor:
    """Mean-shifted contrastive plus shift-angular objective."""
    return msc_loss(views, center, tau, shifted, include_shifted_in_msc) + shift_angular_loss(
        views, shifted, center
    )


def objective_loss(
    views: torch.Tensor,
    shifted: torch.Tensor | None,
    center: torch.Tensor,
    tau: float,
    terms: tuple[str, ...],
    include_shifted_in_msc: bool = True,
) -> torch.Tensor:
    """Sum of the selected loss terms; the ablation switch.

    terms ("msc", "shift_angular") is the full objective; ("msc", "angular")
    is the baseline without shift transforms.
    """
    for t in terms:
        if t not in OBJECTIVE_TERMS:
            raise ContractError(f"unknown objective term {t!r}")
    if not terms:
        raise ContractError("objective needs at least one term")
    if SHIFT_ANGULAR_TERM in terms and (shifted is None or shifted.shape[0] == 0):
        raise ContractError("shift_angular term requires shifted samples")
    total = views.new_zeros(())
    if MSC_TERM in terms:
        total = total + msc_loss(views, center, tau, shifted, include_shifted_in_msc)
    if ANGULAR_TERM in terms:
        total = total + angular_loss(views, center)
    if SHIFT_ANGULAR_TERM in terms:
        assert shifted is not None
        total = total + shift_angular_loss(views, shifted, center)
    return total
