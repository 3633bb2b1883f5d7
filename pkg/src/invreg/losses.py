"""Training objectives: windowed correlation, cycle reconstruction, adversarial terms.

All functions operate on torch tensors and stay dtype-agnostic so the
same code path runs in float32 for training and float64 for numeric
verification. Image batches are shaped (B, 1, X, Y, Z) and flows
(B, 3, X, Y, Z) in voxel units.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .warp import warp_batch


@dataclass(frozen=True)
class LossConfig:
    window: int = 9
    eps: float = 1e-5
    adv_weight: float = 0.1

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 3, got {self.window}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.adv_weight < 0:
            raise ConfigError(f"adv_weight must be >= 0, got {self.adv_weight}")


def _axis_window_sum(x: torch.Tensor, dim: int, pad: int) -> torch.Tensor:
    """Centered running sum of width 2*pad+1 along one axis, zero padded."""
    n = x.shape[dim]
    xp = F.pad(x, [0, 0] * (4 - dim) + [pad, pad])
    run = xp.cumsum(dim)
    zero = torch.zeros_like(run.narrow(dim, 0, 1))
    run = torch.cat([zero, run], dim)
    return run.narrow(dim, 2 * pad + 1, n) - run.narrow(dim, 0, n)


def _window_sums(x: torch.Tensor, window: int) -> torch.Tensor:
    """Sum of x over a centered window at every voxel, zero padded.

    Three separable prefix-sum passes; equal to a full window**3 box
    filter but independent of window size in cost, and each channel is
    handled on its own.
    """
    pad = window // 2
    for dim in (2, 3, 4):
        x = _axis_window_sum(x, dim, pad)
    return x


def _window_counts(dims, window: int, dtype, device) -> torch.Tensor:
    """In-bounds voxel count of the centered window at every voxel.

    Separable: the product of per-axis 1-D overlap lengths.
    """
    pad = window // 2
    axes = []
    for n in dims:
        idx = torch.arange(n, device=device, dtype=dtype)
        lo = (idx - pad).clamp(min=0.0)
        hi = (idx + pad).clamp(max=float(n - 1))
        axes.append(hi - lo + 1)
    cx, cy, cz = axes
    return cx.view(1, 1, -1, 1, 1) * cy.view(1, 1, 1, -1, 1) * cz.view(1, 1, 1, 1, -1)


def ncc_local(a: torch.Tensor, b: torch.Tensor, window: int = 9, eps: float = 1e-5) -> torch.Tensor:
    """Mean signed local normalized cross-correlation over all windows.

    Every voxel centers one window; windows straddling the border are
    clipped and their statistics use the in-bounds voxel count, which
    keeps the value exactly affine-intensity invariant there. Constant
    windows score 0 through the variance floor eps. Result is in
    [-1, 1] up to that floor.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"window must be an odd integer >= 3, got {window}")
    if a.dim() == 3:
        a = a[None, None]
        b = b[None, None]
    c = a.shape[1]
    moments = torch.cat([a, b, a * a, b * b, a * b], dim=1)
    sums = _window_sums(moments, window)
    sum_a, sum_b, sum_aa, sum_bb, sum_ab = sums.split(c, dim=1)
    cnt = _window_counts(a.shape[-3:], window, a.dtype, a.device)
    cross = sum_ab - sum_a * sum_b / cnt
    var_a = torch.clamp(sum_aa - sum_a * sum_a / cnt, min=0.0)
    var_b = torch.clamp(sum_bb - sum_b * sum_b / cnt, min=0.0)
    cc = cross / torch.sqrt(var_a * var_b + eps)
    return cc.mean()


def cycle_loss(
    source: torch.Tensor,
    target: torch.Tensor,
    flow_st: torch.Tensor,
    flow_ts: torch.Tensor,
) -> torch.Tensor:
    """Mean L1 error of round-trip resampling, summed over both directions."""
    s_round = warp_batch(warp_batch(source, flow_st), flow_ts)
    t_round = warp_batch(warp_batch(target, flow_ts), flow_st)
    return (s_round - source).abs().mean() + (t_round - target).abs().mean()


def bce_with_logits(logits: torch.Tensor, label: float) -> torch.Tensor:
    """Mean binary cross-entropy against a constant label, computed stably.

    Uses max(z, 0) - z*t + log(1 + exp(-|z|)) so large logits of either
    sign cannot overflow the exponential.
    """
    z = logits
    t = torch.as_tensor(label, dtype=z.dtype, device=z.device)
    return (z.clamp(min=0) - z * t + torch.log1p(torch.exp(-z.abs()))).mean()


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Real-vs-fake classification loss: mean BCE over the combined batch.

    A chance-level classifier (all logits zero) scores ln 2.
    """
    n_real = real_logits.numel()
    n_fake = fake_logits.numel()
    if n_real == 0 or n_fake == 0:
        raise ValueError("discriminator_loss needs non-empty logit batches")
    real = bce_with_logits(real_logits, 1.0)
    fake = bce_with_logits(fake_logits, 0.0)
    return (n_real * real + n_fake * fake) / (n_real + n_fake)


def generator_loss(
    source: torch.Tensor,
    target: torch.Tensor,
    flow_st: torch.Tensor,
    flow_ts: torch.Tensor,
    config: LossConfig,
    d_t_fake_logits: torch.Tensor | None = None,
    d_s_fake_logits: torch.Tensor | None = None,
    warped_st: torch.Tensor | None = None,
    warped_ts: torch.Tensor | None = None,
):
    """Total generator objective and its additive components.

    The fake logits are the discriminators' scores of the warped patches
    (computed by the caller so this module stays model-free). Callers
    that already resampled the patches can pass warped_st / warped_ts to
    skip recomputing them; the values must equal warp_batch(source,
    flow_st) and warp_batch(target, flow_ts). Components always hold
    "sim_fwd", "sim_bwd" and "cycle"; "adv" is present only when both
    logit sets are given and adv_weight is nonzero, so disabling the
    adversarial path leaves the remaining computation graph untouched.
    The returned total is exactly the sum of the component tensors.
    """
    if warped_st is None:
        warped_st = warp_batch(source, flow_st)
    if warped_ts is None:
        warped_ts = warp_batch(target, flow_ts)
    # Same round trips as cycle_loss, reusing the single warps above.
    s_round = warp_batch(warped_st, flow_ts)
    t_round = warp_batch(warped_ts, flow_st)
    components = {
        "sim_fwd": -ncc_local(warped_st, target, config.window, config.eps),
        "sim_bwd": -ncc_local(warped_ts, source, config.window, config.eps),
        "cycle": (s_round - source).abs().mean() + (t_round - target).abs().mean(),
    }
    if d_t_fake_logits is not None and d_s_fake_logits is not None and config.adv_weight != 0:
        fool = bce_with_logits(d_t_fake_logits, 1.0) + bce_with_logits(d_s_fake_logits, 1.0)
        components["adv"] = config.adv_weight * fool
    total = components["sim_fwd"] + components["sim_bwd"] + components["cycle"]
    if "adv" in components:
        total = total + components["adv"]
    return total, components
