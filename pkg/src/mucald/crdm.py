"""Causal representation and diffusion at a split point.

One block per (client, split point): a pooled exogenous encoder samples a
low-dimensional latent by reparameterization, a neural SCM evaluates one
latent per causal-graph node in topological order, the split activation
is noised on a cosine schedule, and a conditional denoiser predicts the
clean activation from the noisy one given the causal latents. What
crosses the wire is the denoised prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DataError, ShapeMismatchError
from .nn import Conv2d, GlobalAvgPool, Linear, ReLU, Sigmoid


# ----------------- diffusion schedule -----------------

@dataclass
class DiffusionSchedule:
    timesteps: int
    offset: float
    alpha_bar: np.ndarray  # length timesteps + 1, alpha_bar[0] == 1
    betas: np.ndarray      # length timesteps, clipped to <= 0.999


def cosine_schedule(timesteps, s=0.008):
    """Cosine cumulative-noise schedule.

    alpha_bar[t] = f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2);
    beta_t = 1 - alpha_bar[t]/alpha_bar[t-1], clipped to 0.999.
    """
    if timesteps < 1:
        raise ConfigError(f"diffusion timesteps must be >= 1, got {timesteps}")
    t = np.arange(timesteps + 1, dtype=np.float64) / timesteps
    f = np.cos(((t + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    betas = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    return DiffusionSchedule(timesteps=timesteps, offset=s, alpha_bar=alpha_bar, betas=betas)


def forward_diffuse(z, t, noise, schedule):
    """z_noisy = sqrt(alpha_bar[t]) * z + sqrt(1 - alpha_bar[t]) * noise."""
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z.shape:
        raise ShapeMismatchError(f"forward_diffuse: noise shape {noise.shape} "
                                 f"does not match activation shape {z.shape}")
    if not (0 <= t <= schedule.timesteps):
        raise ConfigError(f"forward_diffuse: timestep {t} outside [0, {schedule.timesteps}]")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * noise


def time_embedding(t, timesteps, dim):
    """Sinusoidal embedding of t/T at geometric frequencies; shape [dim]."""
    tau = t / timesteps
    half = dim // 2
    freqs = 2.0 ** np.arange(half)
    angles = np.pi * tau * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])[:dim]


# ----------------- losses -----------------

def kl_standard_normal(mean, log_var):
    """KL(N(mean, exp(log_var)) || N(0, 1)): 0.5 * sum(mu^2 + sigma^2 -
    log sigma^2 - 1) per sample, averaged over the batch."""
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
        raise DataError("kl_standard_normal: non-finite inputs")
    per_sample = 0.5 * (mean ** 2 + np.exp(log_var) - log_var - 1.0).sum(axis=-1)
    return float(per_sample.mean())


def kl_standard_normal_grads(mean, log_var):
    """d KL / d mean and d KL / d log_var for the batch-mean KL above."""
    b = mean.shape[0]
    return mean / b, (np.exp(log_var) - 1.0) / (2.0 * b)


# ----------------- exogenous encoder -----------------

LOG_VAR_CLAMP = 10.0


class ExogenousEncoder:
    """Spatial mean pool, then a 2-layer MLP to (mean, log-variance).

    In training mode the latent is sampled as mean + sigma * noise with
    the caller-provided noise; in eval mode the latent is the mean.
    """

    def __init__(self, in_channels, latent_dim, hidden, rng, name="exo"):
        self.latent_dim = int(latent_dim)
        self.name = name
        self.pool = GlobalAvgPool()
        self.fc_in = Linear(in_channels, hidden, rng, name=f"{name}.fc_in")
        self.act = ReLU()
        self.fc_out = Linear(hidden, 2 * latent_dim, rng, name=f"{name}.fc_out")
        self._cache = None

    def param_items(self):
        return self.fc_in.param_items() + self.fc_out.param_items()

    def parameters(self):
        return [t for _, t in self.param_items()]

    def forward(self, x, noise=None):
        """Returns (latent, mean, log_var); pass noise=None for eval mode."""
        out = self.fc_out.forward(self.act.forward(self.fc_in.forward(self.pool.forward(x))))
        mean = out[:, :self.latent_dim]
        raw_log_var = out[:, self.latent_dim:]
        clamp_mask = (raw_log_var > -LOG_VAR_CLAMP) & (raw_log_var < LOG_VAR_CLAMP)
        log_var = np.clip(raw_log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        if noise is not None:
            noise = np.asarray(noise, dtype=np.float64)
            if noise.shape != mean.shape:
                raise ShapeMismatchError(f"{self.name}: noise shape {noise.shape} "
                                         f"does not match latent shape {mean.shape}")
            latent = mean + np.exp(0.5 * log_var) * noise
        else:
            latent = mean
        if not np.all(np.isfinite(latent)):
            raise DataError(f"{self.name}: non-finite encoder output")
        self._cache = (noise, log_var, clamp_mask)
        return latent, mean, log_var

    def backward(self, d_latent, d_mean=None, d_log_var=None, accumulate=True):
        noise, log_var, clamp_mask = self._cache
        self._cache = None
        d_mu = d_latent.copy()
        if d_mean is not None:
            d_mu = d_mu + d_mean
        d_lv = np.zeros_like(log_var)
        if noise is not None:
            d_lv += d_latent * noise * np.exp(0.5 * log_var) * 0.5
        if d_log_var is not None:
            d_lv += d_log_var
        d_out = np.concatenate([d_mu, d_lv * clamp_mask], axis=1)
        d_pooled = self.fc_in.backward(
            self.act.backward(self.fc_out.backward(d_out, accumulate=accumulate)),
            accumulate=accumulate)
        return self.pool.backward(d_pooled)


# ----------------- neural SCM -----------------

class NeuralSCM:
    """Per-node transforms evaluated in topological graph order.

    Node i sees its parents' latents (masked out otherwise) plus its own
    contiguous slice of the exogenous latent. A linear head predicts the
    normalized proxy vector from all node latents. With no graph the SCM
    is unstructured: one node per exogenous dimension, no parents.
    """

    def __init__(self, exo_dim, proxy_dim, hidden, graph, rng, name="scm"):
        self.name = name
        if graph is not None:
            self.n_nodes = graph.d
            self.order = graph.topological_order()
            parent_sets = graph.parent_sets()
        else:
            self.n_nodes = exo_dim
            self.order = list(range(exo_dim))
            parent_sets = [[] for _ in range(exo_dim)]
        if exo_dim % self.n_nodes != 0:
            raise ConfigError(f"{name}: exogenous dim {exo_dim} not divisible by "
                              f"{self.n_nodes} graph nodes")
        self.slice_width = exo_dim // self.n_nodes
        self.parent_mask = np.zeros((self.n_nodes, self.n_nodes))
        for i, parents in enumerate(parent_sets):
            for p in parents:
                self.parent_mask[i, p] = 1.0

        in_dim = self.n_nodes + self.slice_width
        self.node_in = [Linear(in_dim, hidden, rng, name=f"{name}.node{i}.in")
                        for i in range(self.n_nodes)]
        self.node_act = [Sigmoid() for _ in range(self.n_nodes)]
        self.node_out = [Linear(hidden, 1, rng, name=f"{name}.node{i}.out")
                         for i in range(self.n_nodes)]
        self.head = Linear(self.n_nodes, proxy_dim, rng, name=f"{name}.head")

    def param_items(self):
        items = []
        for i in range(self.n_nodes):
            items += self.node_in[i].param_items() + self.node_out[i].param_items()
        return items + self.head.param_items()

    def parameters(self):
        return [t for _, t in self.param_items()]

    def forward(self, exo_latent):
        exo_latent = np.asarray(exo_latent, dtype=np.float64)
        b = exo_latent.shape[0]
        latents = np.zeros((b, self.n_nodes))
        w = self.slice_width
        for i in self.order:
            node_input = np.concatenate(
                [latents * self.parent_mask[i], exo_latent[:, i * w:(i + 1) * w]], axis=1)
            hidden = self.node_act[i].forward(self.node_in[i].forward(node_input))
            latents[:, i] = self.node_out[i].forward(hidden)[:, 0]
        proxy_pred = self.head.forward(latents)
        return latents, proxy_pred

    def backward(self, d_latents, d_proxy_pred=None, accumulate=True):
        d_latents = d_latents.copy()
        if d_proxy_pred is not None:
            d_latents += self.head.backward(d_proxy_pred, accumulate=accumulate)
        b = d_latents.shape[0]
        w = self.slice_width
        d_exo = np.zeros((b, self.n_nodes * w))
        for i in reversed(self.order):
            d_hidden = self.node_out[i].backward(d_latents[:, i:i + 1], accumulate=accumulate)
            d_input = self.node_in[i].backward(
                self.node_act[i].backward(d_hidden), accumulate=accumulate)
            d_latents += d_input[:, :self.n_nodes] * self.parent_mask[i]
            d_exo[:, i * w:(i + 1) * w] += d_input[:, self.n_nodes:]
        return d_exo


# ----------------- conditional denoiser -----------------

class ConditionalDenoiser:
    """Predicts the clean activation directly from the noisy one.

    Conditioning latents are broadcast-concatenated as constant channels
    together with a sinusoidal timestep embedding; the convolutional
    correction rides on an identity skip, and its last conv starts at
    zero so the initial map is exactly the identity.
    """

    def __init__(self, channels, cond_dim, t_embed_dim, hidden, timesteps, rng, name="denoiser"):
        self.channels = int(channels)
        self.cond_dim = int(cond_dim)
        self.t_embed_dim = int(t_embed_dim)
        self.timesteps = int(timesteps)
        self.name = name
        in_ch = channels + cond_dim + t_embed_dim
        self.conv_in = Conv2d(in_ch, hidden, rng, name=f"{name}.conv_in")
        self.act = ReLU()
        self.conv_out = Conv2d(hidden, channels, rng, name=f"{name}.conv_out", zero_init=True)

    def param_items(self):
        return self.conv_in.param_items() + self.conv_out.param_items()

    def parameters(self):
        return [t for _, t in self.param_items()]

    def forward(self, z_noisy, t, cond):
        z_noisy = np.asarray(z_noisy, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        b, c, h, w = z_noisy.shape
        if c != self.channels:
            raise ShapeMismatchError(f"{self.name}: activation channels {c} do not match "
                                     f"configured channels {self.channels}")
        if cond.shape != (b, self.cond_dim):
            raise ShapeMismatchError(f"{self.name}: conditioning shape {cond.shape} does not "
                                     f"match {(b, self.cond_dim)}")
        emb = time_embedding(t, self.timesteps, self.t_embed_dim)
        cond_maps = np.broadcast_to(cond[:, :, None, None], (b, self.cond_dim, h, w))
        emb_maps = np.broadcast_to(emb[None, :, None, None], (b, self.t_embed_dim, h, w))
        stacked = np.concatenate([z_noisy, cond_maps, emb_maps], axis=1)
        return z_noisy + self.conv_out.forward(self.act.forward(self.conv_in.forward(stacked)))

    def backward(self, upstream, accumulate=True):
        d_stacked = self.conv_in.backward(
            self.act.backward(self.conv_out.backward(upstream, accumulate=accumulate)),
            accumulate=accumulate)
        d_noisy = upstream + d_stacked[:, :self.channels]
        d_cond = d_stacked[:, self.channels:self.channels + self.cond_dim].sum(axis=(2, 3))
        return d_noisy, d_cond


def denoise(z_noisy, t, causal_latents, denoiser):
    """Eval-mode denoising; the output (same shape as the input) is the
    payload that crosses the wire to the next partition."""
    return denoiser.forward(z_noisy, t, causal_latents)


# ----------------- full block -----------------

@dataclass
class CrdmForward:
    """Cached state of one block forward pass."""

    z: np.ndarray
    wire: np.ndarray
    mean: np.ndarray
    log_var: np.ndarray
    causal: np.ndarray
    proxy_pred: np.ndarray
    z_noisy: np.ndarray | None
    t: int
    diff_loss: float
    klu: float
    klz: float


class CrdmBlock:
    """Exogenous encoder + SCM + forward diffusion + conditional denoiser.

    ``use_denoiser=False`` drops diffusion entirely (the wire carries the
    raw activation); ``use_forward_noise=False`` keeps the denoiser but
    feeds it the clean activation.
    """

    def __init__(self, channels, exo_dim, proxy_dim, graph, schedule, rng,
                 exo_hidden=32, scm_hidden=8, denoiser_hidden=16, t_embed_dim=4,
                 use_denoiser=True, use_forward_noise=True, name="crdm"):
        self.name = name
        self.schedule = schedule
        self.use_denoiser = use_denoiser
        self.use_forward_noise = use_forward_noise
        self.encoder = ExogenousEncoder(channels, exo_dim, exo_hidden, rng, name=f"{name}.exo")
        self.scm = NeuralSCM(exo_dim, proxy_dim, scm_hidden, graph, rng, name=f"{name}.scm")
        self.denoiser = None
        if use_denoiser:
            self.denoiser = ConditionalDenoiser(
                channels, self.scm.n_nodes, t_embed_dim, denoiser_hidden,
                schedule.timesteps, rng, name=f"{name}.denoiser")
        self._fwd = None

    def param_items(self):
        items = self.encoder.param_items() + self.scm.param_items()
        if self.denoiser is not None:
            items += self.denoiser.param_items()
        return items

    def parameters(self):
        return [t for _, t in self.param_items()]

    def forward(self, z, t, exo_noise=None, diff_noise=None):
        z = np.asarray(z, dtype=np.float64)
        latent, mean, log_var = self.encoder.forward(z, noise=exo_noise)
        causal, proxy_pred = self.scm.forward(latent)
        z_noisy = None
        if self.denoiser is not None:
            if self.use_forward_noise:
                z_noisy = forward_diffuse(z, t, diff_noise, self.schedule)
            else:
                z_noisy = z
            wire = self.denoiser.forward(z_noisy, t, causal)
            diff_loss = float(((wire - z) ** 2).mean())
        else:
            wire = z
            diff_loss = 0.0
        klu = kl_standard_normal(mean, log_var)
        klz = kl_standard_normal(causal, np.zeros_like(causal))
        self._fwd = CrdmForward(z=z, wire=wire, mean=mean, log_var=log_var,
                                causal=causal, proxy_pred=proxy_pred,
                                z_noisy=z_noisy, t=t, diff_loss=diff_loss,
                                klu=klu, klz=klz)
        return wire, self._fwd

    def proxy_loss_and_grad(self, proxy_target, valid_mask):
        """Masked MSE between the SCM proxy head and the normalized targets;
        empty-region samples carry valid_mask 0 and drop out of the mean."""
        fwd = self._fwd
        pred = fwd.proxy_pred
        valid = np.asarray(valid_mask, dtype=np.float64)
        n_valid = valid.sum()
        if n_valid == 0:
            return 0.0, np.zeros_like(pred)
        diff = (pred - proxy_target) * valid[:, None]
        denom = n_valid * pred.shape[1]
        return float((diff ** 2).sum() / denom), 2.0 * diff / denom

    def backward(self, d_wire, lam_diff=0.0, lam_klu=0.0, lam_klz=0.0,
                 d_proxy_pred=None, accumulate=True):
        """Backward from the wire gradient plus this block's own loss terms.

        Returns the gradient with respect to the incoming activation.
        """
        fwd = self._fwd
        self._fwd = None
        b = fwd.z.shape[0]
        d_z = np.zeros_like(fwd.z)
        if self.denoiser is not None:
            d_mse = 2.0 * (fwd.wire - fwd.z) / fwd.z.size
            d_out = d_wire + lam_diff * d_mse
            d_z -= lam_diff * d_mse  # target side of the reconstruction loss
            d_noisy, d_causal = self.denoiser.backward(d_out, accumulate=accumulate)
            if self.use_forward_noise:
                d_z += np.sqrt(self.schedule.alpha_bar[fwd.t]) * d_noisy
            else:
                d_z += d_noisy
        else:
            d_z += d_wire
            d_causal = np.zeros_like(fwd.causal)

        d_causal = d_causal + lam_klz * fwd.causal / b
        d_latent = self.scm.backward(d_causal, d_proxy_pred, accumulate=accumulate)
        d_mean, d_log_var = kl_standard_normal_grads(fwd.mean, fwd.log_var)
        d_z += self.encoder.backward(d_latent, lam_klu * d_mean, lam_klu * d_log_var,
                                     accumulate=accumulate)
        return d_z
