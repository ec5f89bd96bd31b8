"""Registered gradient checks and brute-force metric oracles.

Used by the CLI (`grad-check`, `metrics-oracle`) and by the acceptance
suite. The brute-force oracles here are deliberately naive re-derivations
(python loops, all-pairs distances, per-window formula evaluation) kept
independent of the production implementations they validate.
"""
from __future__ import annotations

import numpy as np

from .causal_discovery import CausalGraph
from .crdm import CrdmBlock, cosine_schedule
from .daca import DomainDiscriminator, adversarial_loss
from .metrics import assd, confusion_scores, hd95, psnr, ssim
from .nn import (AvgPool2, Conv2d, GlobalAvgPool, Linear, ReLU, Sequential,
                 Sigmoid, SoftmaxChannel, Upsample2, cross_entropy_logits,
                 grad_check_layer)
from .nn.gradcheck import central_difference
from .objective import LossWeights
from .runtime import ClientWorker, RunConfig


# ----------------- gradient-check suite -----------------

def _masked_error(analytic, numeric, idx):
    mask = np.zeros(analytic.size, dtype=bool)
    mask[idx] = True
    a = analytic.reshape(-1)[mask]
    n = numeric.reshape(-1)[mask]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _micro_config(seed=0):
    return RunConfig(
        rounds=1, local_epochs=1, clients=2, batch_size=2, image_size=8,
        train_samples=4, val_samples=2, test_samples=2, seed=seed,
        families=("single_blob", "two_objects"),
        fe_widths=(4, 8), ss_width=8, be_widths=(6, 4),
        exo_dim=8, exo_hidden=8, scm_hidden=4, denoiser_hidden=6,
        t_embed_dim=2, disc_hidden=8,
        proxy_features=("area", "perimeter", "mean_intensity", "entropy"),
        timesteps=20,
    )


def _micro_graph():
    w = np.zeros((4, 4))
    w[0, 1], w[1, 2], w[0, 3] = 1.0, 0.8, 0.5
    return CausalGraph(names=("area", "perimeter", "mean_intensity", "entropy"),
                       weights=w, threshold=0.3,
                       edges=[(0, 1, 1.0), (1, 2, 0.8), (0, 3, 0.5)])


def _bare_worker(cfg, cid, graph):
    worker = ClientWorker.__new__(ClientWorker)
    worker.cid = cid
    worker.cfg = cfg
    worker.schedule = cosine_schedule(cfg.timesteps, cfg.schedule_offset)
    worker.family = cfg.family_of(cid)
    worker.num_classes = cfg.classes_of(cid)
    worker.data = None
    worker.n_train = cfg.train_samples
    worker.graph = graph
    worker.proxy = {}
    worker.modules = worker._build_modules()
    worker.optimizers = {}
    worker.softmax = SoftmaxChannel()
    return worker


def check_layers(seed=0):
    """Per-layer checks: every layer kind, full coordinates."""
    rng = np.random.default_rng(seed)
    checks = []
    checks.append(("linear", grad_check_layer(
        Linear(5, 7, rng), rng.uniform(-1.5, 1.5, (3, 5)), eps=1e-5)))
    checks.append(("conv3x3", grad_check_layer(
        Conv2d(3, 4, rng), rng.uniform(-1.5, 1.5, (2, 3, 6, 6)), eps=1e-6)))
    checks.append(("conv1x1", grad_check_layer(
        Conv2d(3, 2, rng, kernel=1), rng.uniform(-1.5, 1.5, (2, 3, 4, 4)), eps=1e-6)))
    checks.append(("relu", grad_check_layer(
        ReLU(), rng.uniform(-1.5, 1.5, (4, 9)) + 0.05, eps=1e-6)))
    checks.append(("sigmoid", grad_check_layer(
        Sigmoid(), rng.uniform(-1.5, 1.5, (4, 9)), eps=1e-5)))
    # softmax and instance norm produce constant-sum outputs, so weight
    # them to give the sum-loss a non-degenerate gradient
    from .nn import InstanceNorm2d, grad_check
    softmax = SoftmaxChannel()
    mix = rng.uniform(0.5, 1.5, (2, 5, 3, 3))
    checks.append(("softmax_channel", grad_check(
        lambda x: softmax.forward(x) * mix,
        lambda up: softmax.backward(up * mix),
        rng.uniform(-1.5, 1.5, (2, 5, 3, 3)), eps=1e-5)))
    inorm = InstanceNorm2d(3)
    mix_n = rng.uniform(0.5, 1.5, (2, 3, 5, 5))
    checks.append(("instance_norm", grad_check(
        lambda x: inorm.forward(x) * mix_n,
        lambda up: inorm.backward(up * mix_n),
        rng.uniform(-1.5, 1.5, (2, 3, 5, 5)), eps=1e-5, params=inorm.param_items())))
    checks.append(("avg_pool", grad_check_layer(
        AvgPool2(), rng.uniform(-1.5, 1.5, (2, 3, 4, 4)), eps=1e-5)))
    checks.append(("upsample", grad_check_layer(
        Upsample2(), rng.uniform(-1.5, 1.5, (2, 3, 3, 3)), eps=1e-5)))
    checks.append(("global_pool", grad_check_layer(
        GlobalAvgPool(), rng.uniform(-1.5, 1.5, (2, 3, 4, 4)), eps=1e-5)))
    checks.append(("mlp_stack", grad_check_layer(
        Sequential([Linear(6, 8, rng), ReLU(), Linear(8, 3, rng)], name="mlp"),
        rng.uniform(-1.5, 1.5, (3, 6)), eps=1e-5)))
    return checks


def check_crdm_end_to_end(seed=0, max_coords=40):
    """Full block: encode -> SCM -> diffuse -> denoise, with the block's
    own loss terms, against central differences."""
    rng = np.random.default_rng(seed)
    schedule = cosine_schedule(20)
    block = CrdmBlock(channels=3, exo_dim=8, proxy_dim=4, graph=_micro_graph(),
                      schedule=schedule, rng=np.random.default_rng(seed + 1),
                      exo_hidden=8, scm_hidden=4, denoiser_hidden=6, t_embed_dim=2,
                      name="check")
    z = rng.uniform(-1.5, 1.5, (2, 3, 6, 6))
    exo_noise = rng.standard_normal((2, 8))
    diff_noise = rng.standard_normal(z.shape)
    proxy_target = rng.standard_normal((2, 4))
    valid = np.ones(2)
    lams = dict(lam_diff=0.5, lam_klu=0.3, lam_klz=0.2)

    def scalar():
        wire, fwd = block.forward(z, 7, exo_noise, diff_noise)
        p_loss, _ = block.proxy_loss_and_grad(proxy_target, valid)
        return (float(wire.sum()) + lams["lam_diff"] * fwd.diff_loss
                + lams["lam_klu"] * fwd.klu + lams["lam_klz"] * fwd.klz + 0.7 * p_loss)

    for _, t in block.param_items():
        t.zero_grad()
    wire, fwd = block.forward(z, 7, exo_noise, diff_noise)
    _, d_proxy = block.proxy_loss_and_grad(proxy_target, valid)
    d_z = block.backward(np.ones_like(wire), d_proxy_pred=0.7 * d_proxy, **lams)

    errors = []
    crng = np.random.default_rng(seed + 2)
    numeric, idx = central_difference(scalar, z, 1e-6, max_coords, crng)
    errors.append(_masked_error(d_z, numeric, idx))
    for name, tensor in block.param_items():
        numeric, idx = central_difference(scalar, tensor.data, 1e-6, max_coords, crng)
        errors.append(_masked_error(tensor.grad, numeric, idx))
    return max(errors)


def check_daca_dual_path(seed=0):
    """The upstream adversarial gradient must equal -alpha times the input
    gradient of the discriminator path, and the discriminator must receive
    plain cross-entropy parameter gradients."""
    rng = np.random.default_rng(seed)
    disc = DomainDiscriminator(4, 3, np.random.default_rng(seed + 1), hidden=8, name="check")
    wire = rng.uniform(-1.5, 1.5, (3, 4, 5, 5))
    alpha = 0.7

    for _, t in disc.param_items():
        t.zero_grad()
    ce, d_wire = adversarial_loss(wire, 1, alpha, disc)

    # discriminator-path input gradient, recomputed independently
    logits = disc.forward(wire)
    labels = np.full(3, 1)
    _, d_logits = cross_entropy_logits(logits, labels)
    disc_path = disc.backward(d_logits, accumulate=False)
    scale = max(np.abs(d_wire).max(), np.abs(disc_path).max(), 1e-8)
    sign_err = float(np.abs(d_wire + alpha * disc_path).max() / scale)

    # parameter gradients against finite differences of the cross-entropy
    def scalar():
        lg = disc.forward(wire)
        row = lg - lg.max(axis=1, keepdims=True)
        log_probs = row - np.log(np.exp(row).sum(axis=1))[:, None]
        return float(-log_probs[np.arange(3), labels].mean())

    errors = [sign_err]
    crng = np.random.default_rng(seed + 2)
    for name, tensor in disc.param_items():
        numeric, idx = central_difference(scalar, tensor.data, 1e-5, None, crng)
        errors.append(_masked_error(tensor.grad, numeric, idx))
    return max(errors)


def check_composite_objective(seed=0, max_coords=30):
    """Eq-style composite on a 2-client 8x8 micro-config: the gradients the
    backward pass delivers match central differences of the signed
    objective (the adversarial group enters negated and alpha-scaled for
    everything upstream of the reversal; discriminators see the raw
    cross-entropy)."""
    cfg = _micro_config(seed).validate()
    worker = _bare_worker(cfg, 0, _micro_graph())
    rng = np.random.default_rng(seed + 3)
    images = rng.uniform(0.0, 1.0, (cfg.batch_size, 1, 8, 8))
    targets = rng.integers(0, worker.num_classes, (cfg.batch_size, 8, 8))
    proxy_t = rng.standard_normal((cfg.batch_size, 4))
    valid = np.ones(cfg.batch_size)
    weights = LossWeights(lambda_seg=1.0, lambda_proxy=0.3, lambda_diff=0.2,
                          lambda_klu=0.05, lambda_klz=0.05, lambda_adv=0.15)
    alpha = 0.8
    noises = {
        "t": 5,
        "exo1": rng.standard_normal((cfg.batch_size, cfg.exo_dim)),
        "diff1": rng.standard_normal((cfg.batch_size, cfg.fe_widths[-1], 4, 4)),
        "exo2": rng.standard_normal((cfg.batch_size, cfg.exo_dim)),
        "diff2": rng.standard_normal((cfg.batch_size, cfg.ss_width, 4, 4)),
    }

    upstream_modules = ["fe", "ss", "be", "crdm1", "crdm2"]
    disc_modules = ["disc1", "disc2"]

    def forward_scalars():
        breakdown, _ = worker.forward_batch(images, targets, noises, weights, alpha,
                                            proxy_t, valid, train=True)
        adv_group = weights.lambda_adv * (breakdown.adv1 + breakdown.adv2)
        upstream_objective = breakdown.total - (1.0 + alpha) * adv_group
        disc_objective = breakdown.adv1 + breakdown.adv2
        return upstream_objective, disc_objective

    for name in worker.modules:
        for _, t in worker.modules[name].param_items():
            t.zero_grad()
    breakdown, ctx = worker.forward_batch(images, targets, noises, weights, alpha,
                                          proxy_t, valid, train=True)
    worker.backward_batch(ctx)
    analytic = {name: [(pname, t.grad.copy()) for pname, t in worker.modules[name].param_items()]
                for name in worker.modules}

    errors = []
    crng = np.random.default_rng(seed + 4)
    for group, scalar_index in ((upstream_modules, 0), (disc_modules, 1)):
        for name in group:
            for (pname, tensor), (_, a_grad) in zip(worker.modules[name].param_items(),
                                                    analytic[name]):
                numeric, idx = central_difference(
                    lambda: forward_scalars()[scalar_index], tensor.data,
                    1e-6, max_coords, crng)
                errors.append(_masked_error(a_grad, numeric, idx))
    return max(errors)


def grad_check_suite(seed=0):
    """Every registered check as (name, max normalised error)."""
    results = list(check_layers(seed))
    results.append(("crdm_end_to_end", check_crdm_end_to_end(seed)))
    results.append(("daca_dual_path", check_daca_dual_path(seed)))
    results.append(("composite_objective_2client_8x8", check_composite_objective(seed)))
    return results


# ----------------- brute-force metric oracles -----------------

def brute_confusion(pred, truth, num_classes):
    """Loop re-derivation of every overlap score."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    dice, iou, prec, rec, f1 = [], [], [], [], []
    for c in range(num_classes):
        tp = fp = fn = 0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                p = pred[i, j] == c
                t = truth[i, j] == c
                tp += p and t
                fp += p and not t
                fn += t and not p
        dice.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
        iou.append(tp / (tp + fp + fn) if (tp + fp + fn) else 0.0)
        prec.append(tp / (tp + fp) if (tp + fp) else 0.0)
        rec.append(tp / (tp + fn) if (tp + fn) else 0.0)
        f1.append(2 * prec[-1] * rec[-1] / (prec[-1] + rec[-1])
                  if (prec[-1] + rec[-1]) else 0.0)
    return {
        "dice": float(np.mean(dice)), "iou_wb": float(np.mean(iou)),
        "iou_nb": float(np.mean(iou[1:])) if num_classes > 1 else 0.0,
        "precision": float(np.mean(prec)), "recall": float(np.mean(rec)),
        "f1": float(np.mean(f1)),
    }


def brute_boundary(region):
    region = np.asarray(region, dtype=bool)
    pts = []
    h, w = region.shape
    for i in range(h):
        for j in range(w):
            if not region[i, j]:
                continue
            edge = False
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if ni < 0 or nj < 0 or ni >= h or nj >= w or not region[ni, nj]:
                    edge = True
            if edge:
                pts.append((i, j))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def brute_surface_distances(a_pts, b_pts):
    """All-pairs directed nearest-neighbour distances, pooled."""
    pooled = []
    for src, dst in ((a_pts, b_pts), (b_pts, a_pts)):
        for p in src:
            best = np.inf
            for q in dst:
                best = min(best, float(np.hypot(p[0] - q[0], p[1] - q[1])))
            pooled.append(best)
    return np.array(pooled)


def brute_hd95(a_pts, b_pts):
    return float(np.percentile(brute_surface_distances(a_pts, b_pts), 95))


def brute_assd(a_pts, b_pts):
    return float(brute_surface_distances(a_pts, b_pts).mean())


def brute_psnr(x, y, peak=None):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    err = float(np.mean((x - y) ** 2))
    if peak is None:
        peak = max(float(x.max() - x.min()), 1e-6)
    if err == 0:
        return 100.0
    return min(10.0 * np.log10(peak * peak / err), 100.0)


def brute_ssim(x, y, data_range=None, window=7):
    """Direct per-window evaluation of the SSIM formula."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if data_range is None:
        data_range = max(float(x.max() - x.min()), 1e-6)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w = x.shape
    if h < window or w < window:
        windows = [(x, y)]
    else:
        windows = [(x[i:i + window, j:j + window], y[i:i + window, j:j + window])
                   for i in range(h - window + 1) for j in range(w - window + 1)]
    scores = []
    for wx, wy in windows:
        mx, my = wx.mean(), wy.mean()
        vx, vy = wx.var(), wy.var()
        cov = ((wx - mx) * (wy - my)).mean()
        scores.append(((2 * mx * my + c1) * (2 * cov + c2))
                      / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(scores))


def _random_masks(rng, size=16, num_classes=3):
    """Blobby random label maps with occasional empty classes."""
    pred = np.zeros((size, size), dtype=np.int64)
    truth = np.zeros((size, size), dtype=np.int64)
    for mask in (pred, truth):
        for c in range(1, num_classes):
            if rng.random() < 0.15:
                continue  # leave this class empty sometimes
            cy, cx = rng.uniform(3, size - 3, 2)
            r = rng.uniform(2, size / 3)
            rr, cc = np.mgrid[0:size, 0:size]
            mask[np.hypot(rr - cy, cc - cx) <= r] = c
    return pred, truth


def metrics_oracle_suite(seed=0, cases=20, size=16):
    """Randomized comparisons against the brute-force oracles.

    Returns (name, max delta) pairs; HD95/ASSD are compared exactly.
    """
    rng = np.random.default_rng(seed)
    deltas = {"confusion": 0.0, "hd95": 0.0, "assd": 0.0, "psnr": 0.0,
              "ssim": 0.0, "dice_f1_binary": 0.0}
    for _ in range(cases):
        num_classes = int(rng.integers(2, 4))
        pred, truth = _random_masks(rng, size=size, num_classes=num_classes)
        fast = confusion_scores(pred, truth, num_classes)
        slow = brute_confusion(pred, truth, num_classes)
        for key, fast_val in (("dice", fast.dice), ("iou_wb", fast.iou_wb),
                              ("iou_nb", fast.iou_nb), ("precision", fast.precision),
                              ("recall", fast.recall), ("f1", fast.f1)):
            deltas["confusion"] = max(deltas["confusion"], abs(fast_val - slow[key]))

        a = brute_boundary(pred == 1)
        b = brute_boundary(truth == 1)
        if len(a) and len(b):
            deltas["hd95"] = max(deltas["hd95"], abs(hd95(a, b) - brute_hd95(a, b)))
            deltas["assd"] = max(deltas["assd"], abs(assd(a, b) - brute_assd(a, b)))

        x = rng.uniform(0, 1, (size, size))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        deltas["psnr"] = max(deltas["psnr"], abs(psnr(x, y) - brute_psnr(x, y)))
        deltas["ssim"] = max(deltas["ssim"], abs(ssim(x, y) - brute_ssim(x, y)))

        binary_pred = (pred > 0).astype(np.int64)
        binary_truth = (truth > 0).astype(np.int64)
        binary = confusion_scores(binary_pred, binary_truth, 2)
        deltas["dice_f1_binary"] = max(deltas["dice_f1_binary"],
                                       float(np.abs(binary.per_class_dice
                                                    - binary.per_class_f1).max()))
    return sorted(deltas.items())
