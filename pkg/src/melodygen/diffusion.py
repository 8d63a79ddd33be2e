"""Retrieval-conditioned denoising diffusion over flattened latents.

Standard DDPM pieces: a linear beta schedule with its derived alpha tables,
the closed-form forward marginal x_n = sqrt(abar_n) x0 + sqrt(1-abar_n) eps,
the Gaussian posterior q(x_{n-1} | x_n, x0), and epsilon-prediction training.
Conditioning is a single fused vector c = W^T [query || melody] + b; a
learned constant null vector stands in for "no condition" and is trained by
random condition dropout, enabling classifier-free guidance
eps_bar = (w+1) eps(x,n,c) - w eps(x,n,null). Samplers: ancestral (DDPM) and
deterministic subsequence (DDIM, eta=0).

Step indices n are 1-based (1..N); abar(0) = 1 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import smallnet
from .errors import SamplingError, ShapeError, ValidationError

CONDITION_SOURCES = ("text+melody", "wave+melody", "unconditional")


@dataclass
class NoiseSchedule:
    """beta/alpha tables for N steps; arrays are 0-indexed by n-1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def N(self) -> int:
        return len(self.beta)

    def abar(self, n) -> np.ndarray | float:
        """alpha_bar at step n (scalar or array of steps), with abar(0) = 1."""
        n = np.asarray(n)
        return np.where(n == 0, 1.0, self.alpha_bar[np.maximum(n, 1) - 1])


def make_schedule(N: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValidationError(f"unknown schedule kind {kind!r}")
    if N < 1:
        raise ValidationError(f"N must be >= 1, got {N}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, N)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(beta, alpha, alpha_bar, posterior_var)


def _check_step(sched: NoiseSchedule, n: int) -> None:
    if not (1 <= n <= sched.N):
        raise ValidationError(f"step n={n} outside 1..{sched.N}")


def q_sample(sched: NoiseSchedule, x0: np.ndarray, n: int, eps: np.ndarray) -> np.ndarray:
    """Forward marginal: sqrt(abar_n) x0 + sqrt(1 - abar_n) eps."""
    _check_step(sched, n)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar[n - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior(sched: NoiseSchedule, x_n: np.ndarray, x0: np.ndarray, n: int):
    """Mean and variance of q(x_{n-1} | x_n, x0); n=1 returns (x0, 0)."""
    _check_step(sched, n)
    if n == 1:
        return np.asarray(x0, dtype=np.float64).copy(), 0.0
    ab_n = sched.alpha_bar[n - 1]
    ab_prev = sched.alpha_bar[n - 2]
    beta_n = sched.beta[n - 1]
    alpha_n = sched.alpha[n - 1]
    coef_x0 = np.sqrt(ab_prev) * beta_n / (1.0 - ab_n)
    coef_xn = np.sqrt(alpha_n) * (1.0 - ab_prev) / (1.0 - ab_n)
    mu = coef_x0 * np.asarray(x0, dtype=np.float64) + coef_xn * np.asarray(x_n, dtype=np.float64)
    return mu, float(sched.posterior_var[n - 1])


# --- conditioning ----------------------------------------------------------


@dataclass
class Condition:
    vector: np.ndarray
    source: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.source not in CONDITION_SOURCES:
            raise ValidationError(f"unknown condition source {self.source!r}")


@dataclass
class ConditionFusion:
    """c = W^T [query || melody] + b, plus the learned null condition."""

    W: np.ndarray  # (2d, d_c)
    b: np.ndarray  # (d_c,)
    null_condition: np.ndarray  # (d_c,)

    @classmethod
    def create(cls, embed_dim: int, cond_dim: int, seed: int = 0) -> "ConditionFusion":
        rng = smallnet.spawn_rng(seed, 505)
        w = rng.uniform(-1.0, 1.0, size=(2 * embed_dim, cond_dim)) / np.sqrt(2 * embed_dim)
        return cls(W=w, b=np.zeros(cond_dim), null_condition=np.zeros(cond_dim))

    @property
    def embed_dim(self) -> int:
        return self.W.shape[0] // 2

    @property
    def cond_dim(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [self.W, self.b, self.null_condition]

    def parameter_names(self) -> list[str]:
        return ["fusion.W", "fusion.b", "fusion.null_condition"]


def fuse_condition(fusion: ConditionFusion, query_embed: np.ndarray,
                   melody_embed: np.ndarray | None, source: str) -> Condition:
    """Concatenate query and melody embeddings and map through W, b.

    ``melody_embed=None`` is the zero-padding ablation: the melody half of the
    concatenation is zeros and only the query steers the condition.
    """
    d = fusion.embed_dim
    q = np.asarray(query_embed, dtype=np.float64)
    if q.shape != (d,):
        raise ShapeError(f"query embedding has shape {q.shape}, fusion wants ({d},)")
    if melody_embed is None:
        m = np.zeros(d)
    else:
        m = np.asarray(melody_embed, dtype=np.float64)
        if m.shape != (d,):
            raise ShapeError(f"melody embedding has shape {m.shape}, fusion wants ({d},)")
    c = fusion.W.T @ np.concatenate([q, m]) + fusion.b
    return Condition(c, source)


def fusion_backward(fusion: ConditionFusion, query_embed, melody_embed, d_c: np.ndarray):
    """Gradients of a loss through fuse_condition: (dW, db, d_query, d_melody)."""
    d = fusion.embed_dim
    q = np.asarray(query_embed, dtype=np.float64)
    m = np.zeros(d) if melody_embed is None else np.asarray(melody_embed, dtype=np.float64)
    x = np.concatenate([q, m])
    dW = np.outer(x, d_c)
    db = d_c.copy()
    dx = fusion.W @ d_c
    return dW, db, dx[:d], dx[d:]


# --- denoiser ----------------------------------------------------------------


def time_embedding(n, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer step(s) n; (dim,) or (len(n), dim)."""
    if dim % 2:
        raise ValidationError(f"time embedding dim must be even, got {dim}")
    n_arr = np.atleast_1d(np.asarray(n, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = n_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb[0] if np.isscalar(n) or np.ndim(n) == 0 else emb


@dataclass
class Denoiser:
    """eps-prediction net over [flattened latent || time embedding || c]."""

    net: smallnet.DenseNet
    latent_dim: int
    cond_dim: int
    time_embed_dim: int

    @classmethod
    def create(cls, latent_dim: int, cond_dim: int, hidden: list[int] | int = 128,
               time_embed_dim: int = 64, seed: int = 0) -> "Denoiser":
        rng = smallnet.spawn_rng(seed, 606)
        hidden = [hidden] if isinstance(hidden, int) else list(hidden)
        dims = [latent_dim + time_embed_dim + cond_dim] + hidden + [latent_dim]
        return cls(
            net=smallnet.DenseNet.create(dims, "tanh", rng),
            latent_dim=latent_dim,
            cond_dim=cond_dim,
            time_embed_dim=time_embed_dim,
        )

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters()

    def parameter_names(self) -> list[str]:
        return self.net.parameter_names("denoiser.")

    def _stack_input(self, x_n: np.ndarray, n, c: np.ndarray) -> np.ndarray:
        x_n = np.atleast_2d(np.asarray(x_n, dtype=np.float64))
        batch = x_n.shape[0]
        if x_n.shape[1] != self.latent_dim:
            raise ShapeError(f"latent has dim {x_n.shape[1]}, denoiser wants {self.latent_dim}")
        temb = time_embedding(np.broadcast_to(np.asarray(n), (batch,)), self.time_embed_dim)
        c = np.asarray(c, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (batch, self.cond_dim))
        if c.shape != (batch, self.cond_dim):
            raise ShapeError(f"condition has shape {c.shape}, wanted ({batch}, {self.cond_dim})")
        return np.concatenate([x_n, temb, c], axis=1)

    def predict(self, x_n: np.ndarray, n, c: np.ndarray) -> np.ndarray:
        single = np.asarray(x_n).ndim == 1
        out = self.net.forward(self._stack_input(x_n, n, c))
        return out[0] if single else out

    def save(self, path, fusion: ConditionFusion | None = None, extra_meta: dict | None = None) -> None:
        arrays, net_meta = smallnet.net_state(self.net, "denoiser.")
        meta = {
            "latent_dim": self.latent_dim,
            "cond_dim": self.cond_dim,
            "time_embed_dim": self.time_embed_dim,
            "net": net_meta,
        }
        if fusion is not None:
            arrays["fusion.W"] = fusion.W
            arrays["fusion.b"] = fusion.b
            arrays["fusion.null_condition"] = fusion.null_condition
        if extra_meta:
            meta["extra"] = extra_meta
        smallnet.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        """Returns (denoiser, fusion_or_None, extra_meta)."""
        arrays, meta = smallnet.load_checkpoint(path)
        den = cls(
            net=smallnet.net_from_state(arrays, meta["net"], "denoiser."),
            latent_dim=int(meta["latent_dim"]),
            cond_dim=int(meta["cond_dim"]),
            time_embed_dim=int(meta["time_embed_dim"]),
        )
        fusion = None
        if "fusion.W" in arrays:
            fusion = ConditionFusion(
                W=arrays["fusion.W"].copy(),
                b=arrays["fusion.b"].copy(),
                null_condition=arrays["fusion.null_condition"].copy(),
            )
        return den, fusion, meta.get("extra", {})


# --- training -----------------------------------------------------------------


@dataclass
class TrainingStepResult:
    loss: float
    denoiser_grads: list[np.ndarray]
    d_conditions: np.ndarray  # (B, d_c); zero rows where the null was used
    d_null: np.ndarray  # (d_c,)
    uncond_mask: np.ndarray  # (B,) bool


def training_step(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    x0: np.ndarray,
    conditions: np.ndarray | None,
    null_condition: np.ndarray,
    uncond_prob: float,
    rng: np.random.Generator,
    steps: np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> TrainingStepResult:
    """One eps-prediction step over a batch.

    Per sample: draw n uniform in 1..N and eps ~ N(0, I); with probability
    ``uncond_prob`` swap the row's condition for the learned null. The loss is
    mean_i ||eps_i - eps_theta(x_n_i, n_i, c_i)||^2 (squared norm per sample,
    mean over the batch). Returns gradients for the denoiser, the condition
    rows, and the null vector so the caller can backprop into the fusion map.

    ``steps`` and ``noise`` override the random draws for deterministic
    replay (oracle tests, debugging).
    """
    if not (0.0 <= uncond_prob <= 1.0):
        raise ValidationError(f"uncond_prob must be in [0, 1], got {uncond_prob}")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    batch = x0.shape[0]
    if conditions is None:
        conditions = np.zeros((batch, denoiser.cond_dim))
        uncond_prob = 1.0
    conditions = np.asarray(conditions, dtype=np.float64)
    if conditions.shape != (batch, denoiser.cond_dim):
        raise ShapeError(
            f"conditions shape {conditions.shape} != ({batch}, {denoiser.cond_dim})"
        )

    n = rng.integers(1, sched.N + 1, size=batch) if steps is None else np.asarray(steps)
    if n.shape != (batch,) or n.min() < 1 or n.max() > sched.N:
        raise ValidationError(f"steps must be {batch} values in 1..{sched.N}")
    eps = rng.standard_normal(x0.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} != x0 shape {x0.shape}")
    mask = rng.random(batch) < uncond_prob
    c_eff = np.where(mask[:, None], null_condition[None, :], conditions)

    ab = sched.alpha_bar[n - 1][:, None]
    x_n = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    inp = np.concatenate(
        [x_n, time_embedding(n, denoiser.time_embed_dim), c_eff], axis=1
    )
    out, cache = denoiser.net.forward_cached(inp)
    diff = out - eps
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    d_out = 2.0 * diff / batch
    grads, d_inp = denoiser.net.backward_cached(cache, d_out)
    d_c_eff = d_inp[:, denoiser.latent_dim + denoiser.time_embed_dim:]
    d_conditions = np.where(mask[:, None], 0.0, d_c_eff)
    d_null = d_c_eff[mask].sum(axis=0) if mask.any() else np.zeros(denoiser.cond_dim)
    return TrainingStepResult(loss, grads, d_conditions, d_null, mask)


# --- guidance and sampling ------------------------------------------------------


def cfg_eps(denoiser: Denoiser, x_n: np.ndarray, n, c: np.ndarray,
            null_condition: np.ndarray, w: float) -> np.ndarray:
    """Guided noise estimate (w+1) * eps(x,n,c) - w * eps(x,n,null)."""
    if w < 0:
        raise ValidationError(f"guidance weight must be >= 0, got {w}")
    cond = denoiser.predict(x_n, n, c)
    if w == 0.0:
        return cond
    uncond = denoiser.predict(x_n, n, null_condition)
    return (w + 1.0) * cond - w * uncond


def _prior_draw(rng: np.random.Generator, n_samples: int, latent_dim: int) -> np.ndarray:
    return rng.standard_normal((n_samples, latent_dim))


def _x0_estimate(sched: NoiseSchedule, x_n: np.ndarray, eps_bar: np.ndarray, n: int) -> np.ndarray:
    ab = sched.alpha_bar[n - 1]
    return (x_n - np.sqrt(1.0 - ab) * eps_bar) / np.sqrt(ab)


def _check_finite(eps_bar: np.ndarray, n: int) -> None:
    if not np.all(np.isfinite(eps_bar)):
        raise SamplingError("denoiser produced non-finite noise estimate", n)


def sample_ddpm(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    condition: np.ndarray,
    null_condition: np.ndarray,
    w: float,
    seed: int,
    n_samples: int = 1,
) -> np.ndarray:
    """Ancestral sampling: x_N ~ N(0, I), then posterior steps down to x_0.

    At each step the guided eps estimate gives x0_hat, the posterior mean is
    taken, and sqrt(posterior_var) noise is added (none at n=1). Deterministic
    for a fixed seed. Returns (n_samples, latent_dim).
    """
    rng = smallnet.spawn_rng(seed, 707)
    x = _prior_draw(rng, n_samples, denoiser.latent_dim)
    for n in range(sched.N, 0, -1):
        eps_bar = cfg_eps(denoiser, x, n, condition, null_condition, w)
        _check_finite(eps_bar, n)
        x0_hat = _x0_estimate(sched, x, eps_bar, n)
        mu, var = posterior(sched, x, x0_hat, n)
        if n > 1:
            x = mu + np.sqrt(var) * rng.standard_normal(x.shape)
        else:
            x = mu
    return x


def ddim_timesteps(N: int, steps: int) -> list[int]:
    """Evenly spaced descending subsequence of 1..N, ending at 1 side."""
    if not (1 <= steps <= N):
        raise ValidationError(f"steps must be in 1..{N}, got {steps}")
    ts = np.unique(np.round(np.linspace(N, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def sample_ddim(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    condition: np.ndarray,
    null_condition: np.ndarray,
    w: float,
    steps: int,
    seed: int,
    n_samples: int = 1,
) -> np.ndarray:
    """Deterministic DDIM (eta = 0) over an evenly spaced timestep subsequence.

    Only the starting draw x_N consumes randomness; steps=1 reduces to the
    single-step x0 estimate.
    """
    ts = ddim_timesteps(sched.N, steps)
    rng = smallnet.spawn_rng(seed, 708)
    x = _prior_draw(rng, n_samples, denoiser.latent_dim)
    for i, n in enumerate(ts):
        eps_bar = cfg_eps(denoiser, x, n, condition, null_condition, w)
        _check_finite(eps_bar, n)
        x0_hat = _x0_estimate(sched, x, eps_bar, n)
        n_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_prev = float(sched.abar(n_prev))
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_bar
    return x
