"""Conditional denoising-diffusion core in app-embedding space.

The generator treats one app embedding as a length-d 1-D signal.  Forward
corruption follows the closed form x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
The denoiser is a stack of 8 gated dilated-convolution residual blocks with
skip-sum output, conditioned on the diffusion step (32-dim Fourier code),
the historical behavior vector, and the current spatio-temporal context.
Training optimizes the noise-matching loss plus a decayed embedding loss on
the single-shot x0 estimate; sampling runs the full reverse chain and decodes
to an app id by cosine similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoders import EmbeddingTable
from .errors import ValidationError
from .validation import check_positive_int

STEP_EMBED_DIM = 32
_TAU = 10000.0
NUM_BLOCKS = 8
DILATION_CYCLE = (1, 2, 4, 8)


# --------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with its cumulative alpha products."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size < 1:
            raise ValidationError("schedule needs at least one beta")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValidationError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ValidationError("betas must be non-decreasing")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def num_steps(self) -> int:
        return self.betas.shape[0]

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, t) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t):
        if not 1 <= t <= self.num_steps:
            raise ValidationError(f"step {t} outside 1..{self.num_steps}")

    def corrupts_fully(self, threshold=0.01) -> bool:
        """Whether the terminal signal share is below ``threshold``."""
        return bool(self.alpha_bars[-1] < threshold)


def make_schedule(num_steps, beta_start=1e-4, beta_end=0.2, shape="linear") -> NoiseSchedule:
    """Betas linearly interpolated from start to end, endpoints included."""
    check_positive_int("num_steps", num_steps)
    if shape != "linear":
        raise ValidationError(f"unknown schedule shape {shape!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if num_steps == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, num_steps)
    return NoiseSchedule(betas)


# --------------------------------------------------------------------------
# Forward corruption


def forward_noise(x0, t, eps, sched: NoiseSchedule):
    """Jump straight to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    Works on single vectors or batches; ``t`` may be scalar or per-row.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValidationError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.num_steps):
        raise ValidationError(f"step {t} outside 1..{sched.num_steps}")
    abar = sched.alpha_bars[t_arr - 1]
    if t_arr.ndim == 1:
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def reconstruct_x0(x_t, t, eps, sched: NoiseSchedule):
    """Invert the forward jump given the exact noise (single-shot estimate)."""
    x_t = np.asarray(x_t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    t_arr = np.asarray(t)
    abar = sched.alpha_bars[t_arr - 1]
    if t_arr.ndim == 1:
        abar = abar.reshape(-1, *([1] * (x_t.ndim - 1)))
    return (x_t - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


# --------------------------------------------------------------------------
# Step embedding


def step_embedding(t, dim=STEP_EMBED_DIM) -> np.ndarray:
    """Fourier features of the noise index: half sines then half cosines."""
    t = int(t)
    if t < 0:
        raise ValidationError(f"step must be >= 0, got {t}")
    half = dim // 2
    j = np.arange(half)
    angle = t / _TAU ** (j / half)
    return np.concatenate([np.sin(angle), np.cos(angle)])


# --------------------------------------------------------------------------
# Conditional denoiser


def _require_finite(name, tensor):
    if not torch.isfinite(tensor).all():
        raise ValidationError(f"{name} contains NaN or infinite values")


class ConditionalDenoiser(torch.nn.Module):
    """Gated dilated-conv residual stack predicting the injected noise.

    Input vectors are treated as single-channel 1-D signals.  Each of the 8
    blocks adds a per-block projection of the step embedding to its input,
    runs a dilated width-3 convolution to 2C channels, adds per-block
    projections of both condition vectors, applies the tanh x sigmoid gate,
    and emits residual and skip halves; skips are summed and projected back
    to one channel.
    """

    def __init__(
        self,
        emb_dim,
        history_dim,
        context_dim,
        channels=16,
        seed_rng=None,
        dtype=torch.float32,
    ):
        super().__init__()
        check_positive_int("emb_dim", emb_dim)
        check_positive_int("history_dim", history_dim)
        check_positive_int("context_dim", context_dim)
        check_positive_int("channels", channels)
        self.emb_dim = emb_dim
        self.history_dim = history_dim
        self.context_dim = context_dim
        self.channels = channels
        c = channels

        self.input_proj = torch.nn.Conv1d(1, c, 1)
        self.step_fc1 = torch.nn.Linear(STEP_EMBED_DIM, c)
        self.step_fc2 = torch.nn.Linear(c, c)
        self.history_proj = torch.nn.Linear(history_dim, c)
        self.context_proj = torch.nn.Linear(context_dim, c)

        self.block_step = torch.nn.ModuleList()
        self.block_conv = torch.nn.ModuleList()
        self.block_history = torch.nn.ModuleList()
        self.block_context = torch.nn.ModuleList()
        self.block_out = torch.nn.ModuleList()
        for b in range(NUM_BLOCKS):
            dilation = DILATION_CYCLE[b % len(DILATION_CYCLE)]
            self.block_step.append(torch.nn.Linear(c, c))
            self.block_conv.append(
                torch.nn.Conv1d(c, 2 * c, 3, padding=dilation, dilation=dilation)
            )
            self.block_history.append(torch.nn.Linear(c, 2 * c))
            self.block_context.append(torch.nn.Linear(c, 2 * c))
            self.block_out.append(torch.nn.Conv1d(c, 2 * c, 1))
        self.skip_proj = torch.nn.Conv1d(c, c, 1)
        self.out_proj = torch.nn.Conv1d(c, 1, 1)

        half = STEP_EMBED_DIM // 2
        freqs = 1.0 / _TAU ** (np.arange(half) / half)
        self.register_buffer("step_freqs", torch.as_tensor(freqs, dtype=dtype))
        self.to(dtype)

        if seed_rng is not None:
            with torch.no_grad():
                for p in self.parameters():
                    p.copy_(
                        torch.as_tensor(
                            seed_rng.uniform(-0.05, 0.05, tuple(p.shape)), dtype=p.dtype
                        )
                    )

    def _step_code(self, t):
        angle = t.to(self.step_freqs.dtype)[:, None] * self.step_freqs[None, :]
        return torch.cat([torch.sin(angle), torch.cos(angle)], dim=1)

    def forward(self, x, t, history, context):
        """eps_hat for a batch: x [B, d], t [B] int, history [B, h], context [B, c]."""
        if x.ndim != 2 or x.shape[1] != self.emb_dim:
            raise ValidationError(f"x must be [batch, {self.emb_dim}], got {tuple(x.shape)}")
        if history.shape[-1] != self.history_dim:
            raise ValidationError(
                f"history dim {history.shape[-1]} != expected {self.history_dim}"
            )
        if context.shape[-1] != self.context_dim:
            raise ValidationError(
                f"context dim {context.shape[-1]} != expected {self.context_dim}"
            )
        _require_finite("x", x)
        _require_finite("history", history)
        _require_finite("context", context)

        t_emb = self.step_fc2(torch.nn.functional.silu(self.step_fc1(self._step_code(t))))
        h_emb = torch.nn.functional.silu(self.history_proj(history))
        c_emb = torch.nn.functional.silu(self.context_proj(context))

        h = torch.relu(self.input_proj(x[:, None, :]))
        skip_sum = 0.0
        for b in range(NUM_BLOCKS):
            y = h + self.block_step[b](t_emb)[:, :, None]
            z = self.block_conv[b](y)
            z = z + self.block_history[b](h_emb)[:, :, None]
            z = z + self.block_context[b](c_emb)[:, :, None]
            gated = torch.tanh(z[:, : self.channels]) * torch.sigmoid(z[:, self.channels :])
            out = self.block_out[b](gated)
            h = (h + out[:, : self.channels]) / math.sqrt(2.0)
            skip_sum = skip_sum + out[:, self.channels :]
        s = torch.relu(skip_sum)
        s = torch.relu(self.skip_proj(s))
        return self.out_proj(s)[:, 0, :]


def denoise_predict(denoiser: ConditionalDenoiser, x_t, t, h_tilde, c) -> np.ndarray:
    """Single-vector convenience wrapper around the batched forward pass."""
    dtype = next(denoiser.parameters()).dtype
    x = torch.as_tensor(np.asarray(x_t, dtype=float)[None, :], dtype=dtype)
    h = torch.as_tensor(np.asarray(h_tilde, dtype=float)[None, :], dtype=dtype)
    cc = torch.as_tensor(np.asarray(c, dtype=float)[None, :], dtype=dtype)
    with torch.no_grad():
        out = denoiser(x, torch.tensor([int(t)]), h, cc)
    return out[0].numpy()


# --------------------------------------------------------------------------
# Training loss


def decay_weight(t, num_steps, lambda_alpha) -> float:
    """The embedding-loss weight 1 - lambda_alpha * t / T."""
    if not 0 <= lambda_alpha <= 1:
        raise ValidationError(f"lambda_alpha must lie in [0, 1], got {lambda_alpha}")
    return 1.0 - lambda_alpha * (t / num_steps)


def training_loss(denoiser, x0, t, eps, history, context, sched, lambda_alpha=0.8):
    """Noise-matching plus decayed embedding loss, averaged over the batch.

    All array arguments are torch tensors; ``t`` is a 1-D integer tensor.
    Returns the scalar loss (differentiable through the denoiser).
    """
    if not 0 <= lambda_alpha <= 1:
        raise ValidationError(f"lambda_alpha must lie in [0, 1], got {lambda_alpha}")
    dtype = x0.dtype
    abar = torch.as_tensor(sched.alpha_bars, dtype=dtype)[t - 1][:, None]
    x_t = torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps
    eps_hat = denoiser(x_t, t, history, context)
    x0_hat = (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)
    lam = 1.0 - lambda_alpha * (t.to(dtype) / sched.num_steps)
    noise_term = ((eps - eps_hat) ** 2).sum(dim=1)
    embed_term = ((x0 - x0_hat) ** 2).sum(dim=1)
    return (noise_term + lam * embed_term).mean()


# --------------------------------------------------------------------------
# Reverse process


def reverse_step(denoiser, x_t, t, history, context, z, sched: NoiseSchedule):
    """One posterior step of the reverse chain (z is ignored at t = 1)."""
    sched._check_t(t)
    beta = sched.beta(t)
    alpha = sched.alpha(t)
    abar = sched.alpha_bar(t)
    dtype = x_t.dtype
    b = x_t.shape[0]
    eps_hat = denoiser(x_t, torch.full((b,), t, dtype=torch.long), history, context)
    mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    return mean + math.sqrt(beta) * z.to(dtype)


def reverse_chain(denoiser, sched, history, context, rng) -> np.ndarray:
    """Full reverse chain from pure noise for a batch of conditions.

    All Gaussian draws come from ``rng`` (terminal noise first, then one z
    per step down to 2), so the chain is reproducible from the generator
    state alone.
    """
    b = history.shape[0]
    d = denoiser.emb_dim
    dtype = next(denoiser.parameters()).dtype
    x = torch.as_tensor(rng.standard_normal((b, d)), dtype=dtype)
    with torch.no_grad():
        for t in range(sched.num_steps, 0, -1):
            z = (
                torch.as_tensor(rng.standard_normal((b, d)), dtype=dtype)
                if t > 1
                else torch.zeros((b, d), dtype=dtype)
            )
            x = reverse_step(denoiser, x, t, history, context, z, sched)
    return x.numpy()


# --------------------------------------------------------------------------
# Decoding


def decode_app(a_hat, app_table: EmbeddingTable) -> int:
    """Nearest app by cosine similarity; ties go to the smallest id."""
    a_hat = np.asarray(a_hat, dtype=float)
    if not np.all(np.isfinite(a_hat)):
        raise ValidationError("cannot decode a non-finite vector")
    matrix = app_table.as_matrix()
    return int(decode_apps(a_hat[None, :], matrix)[0])


def decode_apps(a_hats, app_matrix) -> np.ndarray:
    """Batched cosine decoding against a row-per-id embedding matrix."""
    a_hats = np.asarray(a_hats, dtype=np.float64)
    app_matrix = np.asarray(app_matrix, dtype=np.float64)
    norms = np.linalg.norm(a_hats, axis=1)
    if np.any(norms == 0):
        raise ValidationError("cannot decode a zero-norm vector")
    table_norms = np.linalg.norm(app_matrix, axis=1)
    if np.any(table_norms == 0):
        raise ValidationError(
            f"app table rows with zero norm: {np.flatnonzero(table_norms == 0).tolist()}"
        )
    sims = (a_hats / norms[:, None]) @ (app_matrix / table_norms[:, None]).T
    return np.argmax(sims, axis=1)
