"""Domain-adversarial alignment at the split points.

A per-split discriminator tries to predict the originating client from
the wire payload. Two decoupled gradient paths: the features receive the
reversed (negated, alpha-scaled) cross-entropy gradient so they become
domain-agnostic, while the discriminator itself trains on a detached
copy of the payload. Neither path touches the other's parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .nn import GlobalAvgPool, GradientReversal, Linear, ReLU, cross_entropy_logits


@dataclass
class GrlConfig:
    """Reversal strength; ramped from 0 to alpha_max over the ramp-up epochs."""

    alpha_max: float = 1.0

    def __post_init__(self):
        if self.alpha_max < 0:
            raise ConfigError(f"grl alpha_max must be >= 0, got {self.alpha_max}")


class DomainDiscriminator:
    """Pool + 2-layer MLP over a split payload -> one logit per client.

    The final layer starts at zero, so an untrained discriminator emits
    uniform logits (cross-entropy exactly ln K on any batch).
    """

    def __init__(self, channels, n_clients, rng, hidden=64, name="disc"):
        self.n_clients = int(n_clients)
        self.name = name
        self.pool = GlobalAvgPool()
        self.fc_in = Linear(channels, hidden, rng, name=f"{name}.fc_in")
        self.act = ReLU()
        self.fc_out = Linear(hidden, n_clients, rng, name=f"{name}.fc_out", zero_init=True)

    def param_items(self):
        return self.fc_in.param_items() + self.fc_out.param_items()

    def parameters(self):
        return [t for _, t in self.param_items()]

    def forward(self, wire):
        return self.fc_out.forward(self.act.forward(self.fc_in.forward(self.pool.forward(wire))))

    def backward(self, d_logits, accumulate=True):
        d_pooled = self.fc_in.backward(
            self.act.backward(self.fc_out.backward(d_logits, accumulate=accumulate)),
            accumulate=accumulate)
        return self.pool.backward(d_pooled)


def discriminate(wire, disc):
    """Client logits for a split payload; length K."""
    logits = disc.forward(wire)
    if logits.shape[1] != disc.n_clients:
        raise ConfigError(f"{disc.name}: logit width {logits.shape[1]} does not match "
                          f"client count {disc.n_clients}")
    return logits


def adversarial_loss(wire, client_id, alpha, disc):
    """Dual-path adversarial term at one split point.

    Returns (cross_entropy, d_wire): ``d_wire`` is the gradient the
    upstream features receive (reversed, scaled by alpha; the
    discriminator parameters are left untouched on this path). The
    discriminator's own update signal is accumulated into its parameter
    gradients from a detached copy of the payload; the input gradient of
    that second path is dropped.
    """
    labels = np.full(wire.shape[0], client_id, dtype=np.int64)

    grl = GradientReversal(alpha)
    logits = disc.forward(grl.forward(wire))
    ce, d_logits = cross_entropy_logits(logits, labels)
    d_wire = grl.backward(disc.backward(d_logits, accumulate=False))

    detached = np.array(wire, copy=True)
    logits2 = disc.forward(detached)
    _, d_logits2 = cross_entropy_logits(logits2, labels)
    disc.backward(d_logits2, accumulate=True)

    return ce, d_wire
