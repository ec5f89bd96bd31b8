"""Split-federated protocol engine.

Every model is partitioned into a client front-end, a server segment and
a client back-end, with a causal-diffusion block and a domain
discriminator at each of the two split points. Clients train locally for
several epochs per round; at the round barrier the server-side segment
and the split-point modules are federated-averaged while front- and
back-ends stay local. The full run is deterministic given (config, seed).
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .causal_discovery import CausalGraph, NotearsConfig, fit_notears
from .crdm import CrdmBlock, cosine_schedule
from .daca import DomainDiscriminator, adversarial_loss
from .exceptions import ConfigError, DataError, StateError
from .frames import ActivationFrame, encode_frame, frame_from_activation
from .metrics import (ReconMetrics, SegMetrics, mean_seg_metrics, psnr,
                      recon_metrics, segmentation_metrics)
from .nn import (Adam, AvgPool2, Conv2d, InstanceNorm2d, ReLU, Sequential,
                 SoftmaxChannel, Upsample2, flatten_tensors, load_flat,
                 save_tensors, load_tensors)
from .objective import (LossBreakdown, LossWeights, ScheduleState,
                        effective_weights, mean_breakdown, ramp_factor,
                        soft_dice_loss, total_loss)
from .proxy_features import ProxySpec, extract, normalize_dataset
from .synth_tasks import FAMILY_CLASSES, TaskSpec, augment, generate

DEFAULT_FAMILIES = ("nested_rings", "single_blob", "two_objects",
                    "textured_region", "irregular_blob")
DEFAULT_PROXY_FEATURES = ("area", "perimeter", "circularity", "solidity",
                          "mean_intensity", "std_intensity", "entropy", "brightness")
ABLATIONS = ("crdm_only", "daca_only", "no_causality", "no_diffusion", "no_forward_noise")

# seed-derivation domains
_INIT, _DATA, _TRAIN, _EVAL, _NOTEARS = 1, 2, 3, 4, 5


def derive_rng(*key):
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def derive_seed(*key):
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


# ----------------- configuration -----------------

@dataclass
class RunConfig:
    rounds: int = 24
    local_epochs: int = 5
    clients: int = 5
    batch_size: int = 8
    image_size: int = 32
    train_samples: int = 200
    val_samples: int = 36
    test_samples: int = 40
    data_noise: float = 0.08
    seed: int = 0
    variant: str = "mucald"          # mucald | baseline
    ablation: str | None = None      # one of ABLATIONS or None
    families: tuple = DEFAULT_FAMILIES
    in_channels: int = 1
    fe_widths: tuple = (8, 16)
    ss_width: int = 16
    be_widths: tuple = (12, 8)
    exo_dim: int = 16
    exo_hidden: int = 32
    scm_hidden: int = 8
    denoiser_hidden: int = 12
    t_embed_dim: int = 2
    disc_hidden: int = 64
    proxy_features: tuple = DEFAULT_PROXY_FEATURES
    proxy_target_class: int = 1
    timesteps: int = 100
    schedule_offset: float = 0.008
    weights: LossWeights = field(default_factory=LossWeights)
    warmup_epochs: int = 2
    rampup_epochs: int = 3
    alpha_max: float = 1.0
    notears: NotearsConfig = field(default_factory=NotearsConfig)
    notears_variant: str = "mlp"
    learning_rate: float = 1e-3
    capture_batches: int = 3

    def validate(self):
        if self.rounds < 1:
            raise ConfigError(f"run.rounds must be >= 1, got {self.rounds}")
        if self.clients < 1:
            raise ConfigError(f"run.clients must be >= 1, got {self.clients}")
        if self.local_epochs < 1:
            raise ConfigError(f"run.local_epochs must be >= 1, got {self.local_epochs}")
        if self.variant not in ("mucald", "baseline"):
            raise ConfigError(f"run.variant must be mucald or baseline, got {self.variant!r}")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation.flag must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.variant == "baseline" and self.ablation is not None:
            raise ConfigError("ablation.flag requires the mucald variant")
        if not self.families:
            raise ConfigError("run.families must not be empty")
        for fam in self.families:
            if fam not in FAMILY_CLASSES:
                raise ConfigError(f"run.families contains unknown family {fam!r}")
        self.weights = self.weights if isinstance(self.weights, LossWeights) \
            else LossWeights(**self.weights)
        self.notears.validate()
        n_nodes = len(self.proxy_features)
        if self.has_crdm() and self.uses_graph() and self.exo_dim % n_nodes != 0:
            raise ConfigError(f"model.exo_dim {self.exo_dim} must be divisible by the "
                              f"{n_nodes} proxy features")
        return self

    # which components exist under this variant/ablation
    def has_crdm(self):
        return self.variant == "mucald" and self.ablation != "daca_only"

    def has_daca(self):
        return self.variant == "mucald" and self.ablation != "crdm_only"

    def uses_graph(self):
        return self.has_crdm() and self.ablation != "no_causality"

    def uses_denoiser(self):
        return self.has_crdm() and self.ablation != "no_diffusion"

    def uses_forward_noise(self):
        return self.uses_denoiser() and self.ablation != "no_forward_noise"

    def family_of(self, cid):
        return self.families[cid % len(self.families)]

    def classes_of(self, cid):
        return FAMILY_CLASSES[self.family_of(cid)]

    def head_channels(self):
        return max(self.classes_of(c) for c in range(self.clients))

    def shared_module_names(self):
        if self.variant == "baseline":
            return ["fe", "ss", "be"]
        names = ["ss"]
        if self.has_crdm():
            names += ["crdm1", "crdm2"]
        if self.has_daca():
            names += ["disc1", "disc2"]
        return names

    def local_module_names(self):
        return [n for n in self.module_names() if n not in self.shared_module_names()]

    def module_names(self):
        names = ["fe", "ss", "be"]
        if self.has_crdm():
            names += ["crdm1", "crdm2"]
        if self.has_daca():
            names += ["disc1", "disc2"]
        return names

    def to_dict(self):
        d = asdict(self)
        d["families"] = list(self.families)
        d["proxy_features"] = list(self.proxy_features)
        d["fe_widths"] = list(self.fe_widths)
        d["be_widths"] = list(self.be_widths)
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["families"] = tuple(data["families"])
        data["proxy_features"] = tuple(data["proxy_features"])
        data["fe_widths"] = tuple(data["fe_widths"])
        data["be_widths"] = tuple(data["be_widths"])
        data["weights"] = LossWeights(**data["weights"])
        data["notears"] = NotearsConfig(**data["notears"])
        return cls(**data).validate()


# ----------------- model partitions -----------------

def build_frontend(cfg):
    rng = derive_rng(cfg.seed, _INIT, 0)
    w1, w2 = cfg.fe_widths
    return Sequential([
        Conv2d(cfg.in_channels, w1, rng, name="fe.conv1", bias=False),
        InstanceNorm2d(w1, name="fe.norm1"), ReLU(),
        AvgPool2(),
        Conv2d(w1, w2, rng, name="fe.conv2", bias=False),
        InstanceNorm2d(w2, name="fe.norm2"), ReLU(),
    ], name="fe")


def build_server_segment(cfg):
    rng = derive_rng(cfg.seed, _INIT, 1)
    w = cfg.ss_width
    c_in = cfg.fe_widths[-1]
    return Sequential([
        Conv2d(c_in, w, rng, name="ss.conv1", bias=False),
        InstanceNorm2d(w, name="ss.norm1"), ReLU(),
        Conv2d(w, w, rng, name="ss.conv2", bias=False),
        InstanceNorm2d(w, name="ss.norm2"), ReLU(),
    ], name="ss")


def build_backend(cfg):
    rng = derive_rng(cfg.seed, _INIT, 2)
    w1, w2 = cfg.be_widths
    return Sequential([
        Conv2d(cfg.ss_width, w1, rng, name="be.conv1", bias=False),
        InstanceNorm2d(w1, name="be.norm1"), ReLU(),
        Upsample2(),
        Conv2d(w1, w2, rng, name="be.conv2", bias=False),
        InstanceNorm2d(w2, name="be.norm2"), ReLU(),
        Conv2d(w2, cfg.head_channels(), rng, kernel=1, name="be.head"),
    ], name="be")


def build_crdm(cfg, split, graph, schedule):
    channels = cfg.fe_widths[-1] if split == 1 else cfg.ss_width
    rng = derive_rng(cfg.seed, _INIT, 2 + split)
    return CrdmBlock(
        channels=channels,
        exo_dim=cfg.exo_dim,
        proxy_dim=len(cfg.proxy_features),
        graph=graph if cfg.uses_graph() else None,
        schedule=schedule,
        rng=rng,
        exo_hidden=cfg.exo_hidden,
        scm_hidden=cfg.scm_hidden,
        denoiser_hidden=cfg.denoiser_hidden,
        t_embed_dim=cfg.t_embed_dim,
        use_denoiser=cfg.uses_denoiser(),
        use_forward_noise=cfg.uses_forward_noise(),
        name=f"crdm{split}",
    )


def build_discriminator(cfg, split):
    channels = cfg.fe_widths[-1] if split == 1 else cfg.ss_width
    rng = derive_rng(cfg.seed, _INIT, 4 + split)
    return DomainDiscriminator(channels, cfg.clients, rng, hidden=cfg.disc_hidden,
                               name=f"disc{split}")


def module_hash(module):
    flat = flatten_tensors(module.parameters() if hasattr(module, "parameters")
                           else [t for _, t in module.param_items()])
    return hashlib.sha256(flat.tobytes()).hexdigest()


# ----------------- federated averaging -----------------

def fedavg(param_sets, weights):
    """Elementwise weighted mean of flat parameter vectors."""
    if not param_sets:
        raise DataError("fedavg: no parameter sets")
    length = param_sets[0].size
    for vec in param_sets:
        if vec.size != length:
            raise DataError(f"fedavg: vector length {vec.size} does not match {length}")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise DataError("fedavg: weights must be > 0")
    stacked = np.stack(param_sets)
    return (weights[:, None] * stacked).sum(axis=0) / weights.sum()


def aggregate_round(clients, cfg):
    """FedAvg the shared modules across clients (weights = sample counts),
    broadcast the result, and leave front-/back-ends byte-identical.

    Returns the checksum of the concatenated shared parameters.
    """
    sample_counts = [c.n_train for c in clients]
    local_before = {(c.cid, name): module_hash(c.modules[name])
                    for c in clients for name in cfg.local_module_names()}
    digest = hashlib.sha256()
    for name in cfg.shared_module_names():
        flats = [flatten_tensors(c.modules[name].parameters()) for c in clients]
        merged = fedavg(flats, sample_counts)
        for c in clients:
            load_flat(c.modules[name].parameters(), merged)
        digest.update(merged.tobytes())
    for c in clients:
        for name in cfg.local_module_names():
            if module_hash(c.modules[name]) != local_before[(c.cid, name)]:
                raise StateError(f"aggregation touched local module {name} of client {c.cid}")
    return digest.hexdigest()


def shared_state_checksum(client, cfg):
    digest = hashlib.sha256()
    for name in cfg.shared_module_names():
        digest.update(flatten_tensors(client.modules[name].parameters()).tobytes())
    return digest.hexdigest()


# ----------------- per-client state -----------------

# Data, proxy vectors and discovered graphs are pure functions of config
# fields; memoized so paired runs (same seed, different variant/ablation)
# do not regenerate them. Cached values are treated as read-only.
_TASK_CACHE = {}
_PROXY_CACHE = {}
_GRAPH_CACHE = {}


def _cached_task_data(cfg, cid, family):
    key = (cfg.seed, cid, family, cfg.image_size, cfg.train_samples,
           cfg.val_samples, cfg.test_samples, cfg.data_noise)
    if key not in _TASK_CACHE:
        spec = TaskSpec(family=family, image_size=cfg.image_size,
                        n_train=cfg.train_samples, n_val=cfg.val_samples,
                        n_test=cfg.test_samples, noise=cfg.data_noise,
                        seed=derive_seed(cfg.seed, _DATA, cid))
        _TASK_CACHE[key] = generate(spec)
    return _TASK_CACHE[key]


def _cached_proxies(cfg, cid, data):
    key = (cfg.seed, cid, cfg.family_of(cid), cfg.image_size, cfg.train_samples,
           cfg.val_samples, cfg.test_samples, cfg.data_noise,
           cfg.proxy_features, cfg.proxy_target_class)
    if key not in _PROXY_CACHE:
        spec = ProxySpec(cfg.proxy_features)
        splits = {
            "train": (data.train_images, data.train_masks),
            "val": (data.val_images, data.val_masks),
            "test": (data.test_images, data.test_masks),
        }
        raw = {name: [extract(img, msk, cfg.proxy_target_class, spec)
                      for img, msk in zip(images, masks)]
               for name, (images, masks) in splits.items()}
        train_kept = [v for v in raw["train"] if not v.empty]
        if len(train_kept) < 2:
            raise DataError(f"client {cid}: not enough non-empty proxy regions")
        _, stats = normalize_dataset(train_kept)
        proxy = {}
        for name in splits:
            values = np.stack([(v.values - stats.mean) / stats.std for v in raw[name]])
            valid = np.array([not v.empty for v in raw[name]], dtype=np.float64)
            proxy[name] = (values, valid)
        _PROXY_CACHE[key] = (proxy, stats)
    return _PROXY_CACHE[key]


def _cached_graph(cfg, cid, proxy):
    key = (cfg.seed, cid, cfg.family_of(cid), cfg.image_size, cfg.train_samples,
           cfg.data_noise, cfg.proxy_features, cfg.proxy_target_class,
           cfg.notears_variant, tuple(sorted(asdict(cfg.notears).items())))
    if key not in _GRAPH_CACHE:
        values, valid = proxy["train"]
        kept = values[valid > 0]
        _GRAPH_CACHE[key] = fit_notears(kept, cfg.notears, variant=cfg.notears_variant,
                                        names=cfg.proxy_features,
                                        seed=derive_seed(cfg.seed, _NOTEARS, cid))
    return _GRAPH_CACHE[key]


@dataclass
class StepResult:
    breakdown: LossBreakdown
    frames: list


class ClientWorker:
    """Owns one client's data, module instances and optimizers.

    Instances share no mutable state, so distinct clients may train on
    distinct threads within a round.
    """

    def __init__(self, cid, cfg, schedule):
        self.cid = cid
        self.cfg = cfg
        self.schedule = schedule
        self.family = cfg.family_of(cid)
        self.num_classes = cfg.classes_of(cid)
        self.data = _cached_task_data(cfg, cid, self.family)
        self.n_train = self.data.train_images.shape[0]
        self.graph = None
        self.proxy = {}
        if cfg.has_crdm():
            self._prepare_proxies()
        self.modules = self._build_modules()
        self.optimizers = {}

    # -- setup ------------------------------------------------------------

    def _prepare_proxies(self):
        cfg = self.cfg
        self.proxy, self.proxy_stats = _cached_proxies(cfg, self.cid, self.data)
        if cfg.uses_graph():
            self.graph = _cached_graph(cfg, self.cid, self.proxy)

    def _build_modules(self):
        cfg = self.cfg
        modules = {
            "fe": build_frontend(cfg),
            "ss": build_server_segment(cfg),
            "be": build_backend(cfg),
        }
        if cfg.has_crdm():
            modules["crdm1"] = build_crdm(cfg, 1, self.graph, self.schedule)
            modules["crdm2"] = build_crdm(cfg, 2, self.graph, self.schedule)
        if cfg.has_daca():
            modules["disc1"] = build_discriminator(cfg, 1)
            modules["disc2"] = build_discriminator(cfg, 2)
        return modules

    def reset_optimizers(self):
        self.optimizers = {
            name: Adam(module.param_items(), lr=self.cfg.learning_rate)
            for name, module in self.modules.items()
        }
        self.softmax = SoftmaxChannel()

    # -- one training batch -----------------------------------------------

    def _draw_noises(self, rng, batch, shape1, shape2):
        cfg = self.cfg
        t = int(rng.integers(1, cfg.timesteps + 1))
        bundle = {"t": t}
        if cfg.has_crdm():
            bundle["exo1"] = rng.standard_normal((batch, cfg.exo_dim))
            bundle["diff1"] = rng.standard_normal(shape1) if cfg.uses_forward_noise() else None
            bundle["exo2"] = rng.standard_normal((batch, cfg.exo_dim))
            bundle["diff2"] = rng.standard_normal(shape2) if cfg.uses_forward_noise() else None
        return bundle

    def forward_batch(self, images, targets, noises, weights, alpha, proxy_t=None,
                      proxy_valid=None, train=True):
        """Forward through both splits; returns the component losses and
        everything backward_batch needs."""
        cfg = self.cfg
        ctx = {"targets": targets, "weights": weights, "alpha": alpha}
        z1 = self.modules["fe"].forward(images)
        if cfg.has_crdm():
            wire1, fwd1 = self.modules["crdm1"].forward(
                z1, noises["t"],
                noises.get("exo1") if train else None,
                noises.get("diff1"))
            ctx["fwd1"] = fwd1
            if proxy_t is not None:
                ctx["proxy1"], ctx["d_proxy1"] = \
                    self.modules["crdm1"].proxy_loss_and_grad(proxy_t, proxy_valid)
            else:
                ctx["proxy1"], ctx["d_proxy1"] = 0.0, None
        else:
            wire1 = z1
        if cfg.has_daca() and train:
            ctx["adv1"], ctx["d_adv1"] = adversarial_loss(
                wire1, self.cid, alpha, self.modules["disc1"])
        z2 = self.modules["ss"].forward(wire1)
        if cfg.has_crdm():
            wire2, fwd2 = self.modules["crdm2"].forward(
                z2, noises["t"],
                noises.get("exo2") if train else None,
                noises.get("diff2"))
            ctx["fwd2"] = fwd2
            if proxy_t is not None:
                ctx["proxy2"], ctx["d_proxy2"] = \
                    self.modules["crdm2"].proxy_loss_and_grad(proxy_t, proxy_valid)
            else:
                ctx["proxy2"], ctx["d_proxy2"] = 0.0, None
        else:
            wire2 = z2
        if cfg.has_daca() and train:
            ctx["adv2"], ctx["d_adv2"] = adversarial_loss(
                wire2, self.cid, alpha, self.modules["disc2"])
        logits = self.modules["be"].forward(wire2)
        probs = self.softmax.forward(logits)
        seg, d_probs = soft_dice_loss(probs, targets, return_grad=True)
        ctx.update(probs=probs, d_probs=d_probs, wire1=wire1, wire2=wire2, z1=z1, z2=z2)

        fwd1 = ctx.get("fwd1")
        fwd2 = ctx.get("fwd2")
        breakdown = total_loss(
            seg=seg,
            proxy1=ctx.get("proxy1", 0.0), proxy2=ctx.get("proxy2", 0.0),
            diff1=fwd1.diff_loss if fwd1 else 0.0,
            diff2=fwd2.diff_loss if fwd2 else 0.0,
            klu=(fwd1.klu if fwd1 else 0.0) + (fwd2.klu if fwd2 else 0.0),
            klz=(fwd1.klz if fwd1 else 0.0) + (fwd2.klz if fwd2 else 0.0),
            adv1=ctx.get("adv1", 0.0), adv2=ctx.get("adv2", 0.0),
            weights=weights,
        )
        ctx["breakdown"] = breakdown
        return breakdown, ctx

    def backward_batch(self, ctx):
        """Backpropagate the weighted objective through both split points.

        Adversarial gradients arrive at the wires already reversed; the
        discriminators received their own update signal during forward.
        """
        cfg = self.cfg
        w = ctx["weights"]
        d_logits = self.softmax.backward(w.lambda_seg * ctx["d_probs"])
        d_wire2 = self.modules["be"].backward(d_logits)
        if "d_adv2" in ctx:
            d_wire2 = d_wire2 + w.lambda_adv * ctx["d_adv2"]
        if cfg.has_crdm():
            d_proxy2 = None if ctx["d_proxy2"] is None else w.lambda_proxy * ctx["d_proxy2"]
            d_z2 = self.modules["crdm2"].backward(
                d_wire2, lam_diff=w.lambda_diff, lam_klu=w.lambda_klu,
                lam_klz=w.lambda_klz, d_proxy_pred=d_proxy2)
        else:
            d_z2 = d_wire2
        d_wire1 = self.modules["ss"].backward(d_z2)
        if "d_adv1" in ctx:
            d_wire1 = d_wire1 + w.lambda_adv * ctx["d_adv1"]
        if cfg.has_crdm():
            d_proxy1 = None if ctx["d_proxy1"] is None else w.lambda_proxy * ctx["d_proxy1"]
            d_z1 = self.modules["crdm1"].backward(
                d_wire1, lam_diff=w.lambda_diff, lam_klu=w.lambda_klu,
                lam_klz=w.lambda_klz, d_proxy_pred=d_proxy1)
        else:
            d_z1 = d_wire1
        self.modules["fe"].backward(d_z1)

    def client_step(self, images, targets, proxy_t, proxy_valid, weights, alpha,
                    rng, round_index, capture=False):
        """One optimizer step per partition on one batch."""
        shape1 = (images.shape[0], self.cfg.fe_widths[-1],
                  self.cfg.image_size // 2, self.cfg.image_size // 2)
        shape2 = (images.shape[0], self.cfg.ss_width,
                  self.cfg.image_size // 2, self.cfg.image_size // 2)
        noises = self._draw_noises(rng, images.shape[0], shape1, shape2)
        try:
            breakdown, ctx = self.forward_batch(images, targets, noises, weights, alpha,
                                                proxy_t, proxy_valid, train=True)
        except DataError as exc:
            raise StateError(f"client {self.cid}: aborting round {round_index}: {exc}") from exc
        self.backward_batch(ctx)
        for opt in self.optimizers.values():
            opt.step()
        frames = []
        if capture:
            for split, wire in ((1, ctx["wire1"]), (2, ctx["wire2"])):
                for i in range(wire.shape[0]):
                    frames.append((split, frame_from_activation(
                        wire[i], round_index, self.cid, split, noises["t"])))
        return StepResult(breakdown=breakdown, frames=frames)

    def train_round(self, round_index):
        """Local epochs with the warm-up/ramp-up weight schedule.

        Returns (mean loss breakdown, captured intercept frames). Frames
        are captured on the last local epoch only, tagged with the source
        image index.
        """
        cfg = self.cfg
        self.reset_optimizers()
        rng = derive_rng(cfg.seed, _TRAIN, round_index, self.cid)
        breakdowns = []
        captured = []  # (split, frame, image_index)
        proxy_train = self.proxy.get("train")
        for epoch in range(1, cfg.local_epochs + 1):
            schedule = ScheduleState(round_index=round_index, epoch=epoch,
                                     warmup_epochs=cfg.warmup_epochs,
                                     rampup_epochs=cfg.rampup_epochs)
            weights = effective_weights(schedule, cfg.weights)
            alpha = cfg.alpha_max * ramp_factor(schedule)
            order = rng.permutation(self.n_train)
            capture_left = cfg.capture_batches if epoch == cfg.local_epochs else 0
            for start in range(0, self.n_train, cfg.batch_size):
                batch_idx = order[start:start + cfg.batch_size]
                pairs = [augment(self.data.train_images[i], self.data.train_masks[i], rng)
                         for i in batch_idx]
                images = np.stack([p[0] for p in pairs])
                targets = np.stack([p[1] for p in pairs])
                proxy_t = proxy_valid = None
                if proxy_train is not None:
                    proxy_t = proxy_train[0][batch_idx]
                    proxy_valid = proxy_train[1][batch_idx]
                result = self.client_step(images, targets, proxy_t, proxy_valid,
                                          weights, alpha, rng, round_index,
                                          capture=capture_left > 0)
                if capture_left > 0:
                    capture_left -= 1
                    per_split = {1: [], 2: []}
                    for split, frame in result.frames:
                        per_split[split].append(frame)
                    for split in (1, 2):
                        for frame, img_idx in zip(per_split[split], batch_idx):
                            captured.append((split, frame, int(img_idx)))
                breakdowns.append(result.breakdown)
        return mean_breakdown(breakdowns), captured

    # -- evaluation ---------------------------------------------------------

    def eval_timestep(self):
        return max(1, self.cfg.timesteps // 4)

    def _eval_forward(self, images, rng):
        """Eval-mode pipeline: latent means, fixed mid-schedule timestep,
        seeded diffusion noise. Returns (probs, per-split (clean, noisy, wire))."""
        cfg = self.cfg
        t = self.eval_timestep()
        recon = {}
        z1 = self.modules["fe"].forward(images)
        if cfg.has_crdm():
            noise1 = rng.standard_normal(z1.shape) if cfg.uses_forward_noise() else None
            wire1, fwd1 = self.modules["crdm1"].forward(z1, t, None, noise1)
            recon[1] = (z1, fwd1.z_noisy, wire1)
        else:
            wire1 = z1
        z2 = self.modules["ss"].forward(wire1)
        if cfg.has_crdm():
            noise2 = rng.standard_normal(z2.shape) if cfg.uses_forward_noise() else None
            wire2, fwd2 = self.modules["crdm2"].forward(z2, t, None, noise2)
            recon[2] = (z2, fwd2.z_noisy, wire2)
        else:
            wire2 = z2
        logits = self.modules["be"].forward(wire2)
        probs = SoftmaxChannel().forward(logits)
        return probs, recon

    def predict_masks(self, images, rng=None):
        """Argmax over this client's class range."""
        rng = rng or derive_rng(self.cfg.seed, _EVAL, 0, self.cid)
        probs, _ = self._eval_forward(images, rng)
        return np.argmax(probs[:, :self.num_classes], axis=1)

    def per_sample_seg_loss(self, image, mask, rng=None):
        rng = rng or derive_rng(self.cfg.seed, _EVAL, 0, self.cid)
        probs, _ = self._eval_forward(image[None], rng)
        return soft_dice_loss(probs, mask[None])

    def evaluate(self, split, round_index):
        """Segmentation metrics plus denoiser-fidelity metrics per split point."""
        cfg = self.cfg
        images, masks = {
            "val": (self.data.val_images, self.data.val_masks),
            "test": (self.data.test_images, self.data.test_masks),
        }[split]
        rng = derive_rng(cfg.seed, _EVAL, round_index, self.cid)
        seg_all = []
        fid = {1: [], 2: []}
        noisy_psnr = {1: [], 2: []}
        for start in range(0, images.shape[0], cfg.batch_size):
            batch_img = images[start:start + cfg.batch_size]
            batch_msk = masks[start:start + cfg.batch_size]
            probs, recon = self._eval_forward(batch_img, rng)
            preds = np.argmax(probs[:, :self.num_classes], axis=1)
            for i in range(batch_img.shape[0]):
                seg_all.append(segmentation_metrics(preds[i], batch_msk[i], self.num_classes))
            for split_point, (clean, noisy, wire) in recon.items():
                for i in range(clean.shape[0]):
                    fid[split_point].append(recon_metrics(clean[i], wire[i]))
                    if noisy is not None:
                        rng_range = max(float(clean[i].max() - clean[i].min()), 1e-6)
                        noisy_psnr[split_point].append(psnr(clean[i], noisy[i], peak=rng_range))
        out_recon = {}
        for split_point in (1, 2):
            if fid[split_point]:
                out_recon[split_point] = ReconMetrics(
                    mse=float(np.mean([m.mse for m in fid[split_point]])),
                    psnr=float(np.mean([m.psnr for m in fid[split_point]])),
                    ssim=float(np.mean([m.ssim for m in fid[split_point]])),
                )
            else:
                out_recon[split_point] = None
        out_noisy = {sp: (float(np.mean(vals)) if vals else None)
                     for sp, vals in noisy_psnr.items()}
        return mean_seg_metrics(seg_all), out_recon, out_noisy

    # -- checkpointing ------------------------------------------------------

    def all_tensors(self):
        tensors = []
        for name in self.cfg.module_names():
            tensors.extend(self.modules[name].parameters())
        return tensors

    def save(self, path):
        save_tensors(path, [t.data for t in self.all_tensors()])

    def load(self, path):
        arrays = load_tensors(path)
        tensors = self.all_tensors()
        if len(arrays) != len(tensors):
            raise DataError(f"checkpoint holds {len(arrays)} tensors, model needs {len(tensors)}")
        for tensor, arr in zip(tensors, arrays):
            tensor.data[...] = arr.reshape(tensor.data.shape)


# ----------------- round reports and artifacts -----------------

@dataclass
class RoundReport:
    round_index: int
    losses: dict          # cid -> LossBreakdown
    val_metrics: dict     # cid -> SegMetrics
    recon: dict           # cid -> {split -> ReconMetrics | None}
    noisy_psnr: dict      # cid -> {split -> float | None}
    checksum: str


CSV_COLUMNS = (
    ["round", "client"]
    + list(LossBreakdown.FIELDS)
    + ["Dice", "IoU W/B", "IoU N/B", "Precision", "Recall", "F1 Score", "HD95", "ASSD",
       "MSE(S1)", "PSNR(S1)", "SSIM(S1)", "MSE(S2)", "PSNR(S2)", "SSIM(S2)",
       "PSNR-noisy(S1)", "PSNR-noisy(S2)", "checksum"]
)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_round_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            for cid in sorted(report.losses):
                recon = report.recon[cid]
                noisy = report.noisy_psnr[cid]
                row = ([report.round_index, cid]
                       + report.losses[cid].as_row()
                       + report.val_metrics[cid].as_row())
                for sp in (1, 2):
                    m = recon.get(sp)
                    row += [m.mse, m.psnr, m.ssim] if m else [None, None, None]
                row += [noisy.get(1), noisy.get(2), report.checksum]
                writer.writerow([_fmt(v) for v in row])


@dataclass
class RunResult:
    config: RunConfig
    reports: list
    test_metrics: dict    # cid -> SegMetrics
    clients: list


def run(cfg, out_dir=None, progress=None):
    """Execute the full protocol; deterministic given (config, seed).

    Writes per-round CSV, a JSON summary, discovered graphs, checkpoints
    and intercept logs when ``out_dir`` is given.
    """
    cfg = copy.deepcopy(cfg).validate()
    schedule = cosine_schedule(cfg.timesteps, cfg.schedule_offset)
    clients = [ClientWorker(cid, cfg, schedule) for cid in range(cfg.clients)]

    max_workers = int(os.environ.get("MUCALD_THREADS", "1") or "1")
    reports = []
    intercepts = {1: [], 2: []}  # (frame, image_id) with image_id = cid * 1_000_000 + index

    for round_index in range(1, cfg.rounds + 1):
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = list(pool.map(lambda c: c.train_round(round_index), clients))
        else:
            results = [c.train_round(round_index) for c in clients]
        losses = {c.cid: res[0] for c, res in zip(clients, results)}
        for c, res in zip(clients, results):
            for split, frame, img_idx in res[1]:
                intercepts[split].append((frame, c.cid * 1_000_000 + img_idx))

        checksum = aggregate_round(clients, cfg)
        for c in clients:
            if shared_state_checksum(c, cfg) != checksum:
                raise StateError(f"client {c.cid} shared-state checksum mismatch after broadcast")

        # validation measures the model each client would deploy after the
        # round barrier: the fresh shared broadcast plus its local modules
        val_metrics, recon, noisy = {}, {}, {}
        for c in clients:
            seg, rec, np_psnr = c.evaluate("val", round_index)
            val_metrics[c.cid] = seg
            recon[c.cid] = rec
            noisy[c.cid] = np_psnr
        report = RoundReport(round_index=round_index, losses=losses,
                             val_metrics=val_metrics, recon=recon,
                             noisy_psnr=noisy, checksum=checksum)
        reports.append(report)
        if progress:
            mean_iou = float(np.mean([m.iou_nb for m in val_metrics.values()]))
            progress(f"round {round_index}/{cfg.rounds}: mean val IoU N/B = {mean_iou:.3f}")

    test_metrics = {}
    for c in clients:
        seg, _, _ = c.evaluate("test", cfg.rounds)
        test_metrics[c.cid] = seg

    result = RunResult(config=cfg, reports=reports, test_metrics=test_metrics, clients=clients)
    if out_dir is not None:
        _write_artifacts(result, intercepts, Path(out_dir))
    return result


def _write_artifacts(result, intercepts, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    write_round_csv(out_dir / "metrics.csv", result.reports)

    summary = {
        "config": cfg.to_dict(),
        "test_metrics": {
            str(cid): {f: getattr(m, f) for f in SegMetrics.FIELDS}
            for cid, m in result.test_metrics.items()
        },
        "mean_test_iou_nb": float(np.mean([m.iou_nb for m in result.test_metrics.values()])),
        "final_checksum": result.reports[-1].checksum if result.reports else "",
        "rounds_completed": len(result.reports),
    }
    summary["config"]["weights"] = asdict(cfg.weights)
    summary["config"]["notears"] = asdict(cfg.notears)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    graph_dir = out_dir / "graphs"
    graph_dir.mkdir(exist_ok=True)
    for client in result.clients:
        if client.graph is not None:
            (graph_dir / f"client{client.cid}.json").write_text(client.graph.to_json())

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for client in result.clients:
        client.save(ckpt_dir / f"client{client.cid}.mcsf")

    frame_dir = out_dir / "intercepts"
    frame_dir.mkdir(exist_ok=True)
    for split in (1, 2):
        entries = []
        blob_path = frame_dir / f"split{split}_frames.bin"
        with open(blob_path, "wb") as fh:
            offset = 0
            for frame, image_id in intercepts[split]:
                payload = encode_frame(frame)
                fh.write(payload)
                entries.append({"offset": offset, "length": len(payload),
                                "image_id": image_id, "round": frame.round_index,
                                "client": frame.client_id})
                offset += len(payload)
        with open(frame_dir / f"split{split}_index.json", "w") as fh:
            json.dump(entries, fh)
