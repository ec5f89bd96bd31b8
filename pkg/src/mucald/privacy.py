"""Split-point leakage quantification.

Two attacks against intercepted wire traffic: a reconstruction decoder
trained to invert captured activation frames back to their source
images, and a loss-threshold membership-inference test. Comparisons are
always paired: same seed, same decoder initialization, same budget; only
the obfuscation flag of the producing run differs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .exceptions import HarnessError
from .frames import decode_frame
from .metrics import psnr, recon_metrics
from .nn import Adam, Conv2d, ReLU, Sequential, Upsample2, save_tensors

MIN_INTERCEPTS = 100
ATTACK_STEPS = 500
ATTACK_BATCH = 16
HOLDOUT_FRACTION = 0.25


@dataclass
class InterceptLog:
    """Frames captured at one split point during training, with the id of
    the source image each payload was computed from."""

    split: int
    entries: list  # (ActivationFrame, image_id)
    round_range: tuple

    def __len__(self):
        return len(self.entries)


def load_intercepts(run_dir, split):
    run_dir = Path(run_dir)
    index_path = run_dir / "intercepts" / f"split{split}_index.json"
    blob_path = run_dir / "intercepts" / f"split{split}_frames.bin"
    if not index_path.exists() or not blob_path.exists():
        raise HarnessError(f"no intercept log for split {split} under {run_dir}")
    index = json.loads(index_path.read_text())
    blob = blob_path.read_bytes()
    entries = []
    for item in index:
        frame, _ = decode_frame(blob[item["offset"]:item["offset"] + item["length"]])
        entries.append((frame, item["image_id"]))
    if not entries:
        raise HarnessError(f"empty intercept log for split {split} under {run_dir}")
    rounds = [f.round_index for f, _ in entries]
    return InterceptLog(split=split, entries=entries, round_range=(min(rounds), max(rounds)))


@dataclass
class AttackReport:
    split: int
    obfuscation: str          # "on" | "off"
    n_train_intercepts: int
    n_eval_intercepts: int
    recon_mse_mean: float
    recon_mse_std: float
    recon_psnr_mean: float
    recon_psnr_std: float
    recon_ssim_mean: float
    recon_ssim_std: float
    baseline_psnr: float      # mean-image predictor on the held-out targets
    mia_auc: float | None = None
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _build_decoder(payload_shape, image_shape, seed):
    """Fixed-budget conv decoder from a wire payload to the source image."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA77AC4]))
    channels = payload_shape[0]
    upsamples = []
    side = payload_shape[1]
    while side < image_shape[1]:
        upsamples.append(Upsample2())
        side *= 2
    if side != image_shape[1]:
        raise HarnessError(f"payload side {payload_shape[1]} cannot be upsampled to "
                           f"image side {image_shape[1]}")
    return Sequential(
        [Conv2d(channels, 16, rng, name="attack.conv1"), ReLU()]
        + upsamples
        + [Conv2d(16, 8, rng, name="attack.conv2"), ReLU(),
           Conv2d(8, image_shape[0], rng, kernel=1, name="attack.head")],
        name="attack_decoder")


def train_attack_decoder(log, images_by_id, seed=0, steps=ATTACK_STEPS,
                         batch_size=ATTACK_BATCH, holdout_fraction=HOLDOUT_FRACTION,
                         shuffle_pairs=False):
    """Train the reconstruction attack and score it on held-out intercepts.

    The intercept set is split by source image id so no evaluated image
    was seen in decoder training. ``shuffle_pairs`` breaks the
    (frame, image) correspondence as a negative control. Returns
    (decoder, AttackReport-without-MIA).
    """
    if len(log) < MIN_INTERCEPTS:
        raise HarnessError(f"need at least {MIN_INTERCEPTS} intercepts, have {len(log)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC0DE]))

    payloads = np.stack([np.asarray(f.payload, dtype=np.float64) for f, _ in log.entries])
    image_ids = [img_id for _, img_id in log.entries]
    images = np.stack([np.asarray(images_by_id[i], dtype=np.float64) for i in image_ids])
    if shuffle_pairs:
        images = images[rng.permutation(len(images))]

    unique_ids = sorted(set(image_ids))
    n_hold = max(1, int(round(len(unique_ids) * holdout_fraction)))
    hold_ids = set(rng.choice(unique_ids, size=n_hold, replace=False).tolist())
    hold_mask = np.array([i in hold_ids for i in image_ids])
    train_x, train_y = payloads[~hold_mask], images[~hold_mask]
    eval_x, eval_y = payloads[hold_mask], images[hold_mask]
    if len(train_x) == 0 or len(eval_x) == 0:
        raise HarnessError("intercept split left an empty train or eval side")

    decoder = _build_decoder(payloads.shape[1:], images.shape[1:], seed)
    optimizer = Adam(decoder.param_items(), lr=1e-3)
    n = len(train_x)
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        pred = decoder.forward(train_x[idx])
        grad = 2.0 * (pred - train_y[idx]) / pred.size
        decoder.backward(grad)
        optimizer.step()

    per_sample = [recon_metrics(y, decoder.forward(x[None])[0])
                  for x, y in zip(eval_x, eval_y)]
    mean_image = train_y.mean(axis=0)
    baseline = float(np.mean([psnr(y, mean_image) for y in eval_y]))
    report = AttackReport(
        split=log.split, obfuscation="?",
        n_train_intercepts=int(len(train_x)), n_eval_intercepts=int(len(eval_x)),
        recon_mse_mean=float(np.mean([m.mse for m in per_sample])),
        recon_mse_std=float(np.std([m.mse for m in per_sample])),
        recon_psnr_mean=float(np.mean([m.psnr for m in per_sample])),
        recon_psnr_std=float(np.std([m.psnr for m in per_sample])),
        recon_ssim_mean=float(np.mean([m.ssim for m in per_sample])),
        recon_ssim_std=float(np.std([m.ssim for m in per_sample])),
        baseline_psnr=baseline,
    )
    return decoder, report


def membership_inference(per_sample_loss, member_set, holdout_set):
    """AUC of the loss-threshold membership test.

    ``per_sample_loss(image, mask)`` scores one sample; members are
    expected to score lower. The AUC is the probability that a random
    member scores below a random non-member (ties count half).
    """
    member_images, member_masks = member_set
    holdout_images, holdout_masks = holdout_set
    if len(member_images) == 0 or len(holdout_images) == 0:
        raise HarnessError("membership inference needs non-empty member and holdout sets")
    n = min(len(member_images), len(holdout_images))
    member_scores = np.array([per_sample_loss(member_images[i], member_masks[i])
                              for i in range(n)])
    holdout_scores = np.array([per_sample_loss(holdout_images[i], holdout_masks[i])
                               for i in range(n)])
    less = (member_scores[:, None] < holdout_scores[None, :]).sum()
    ties = (member_scores[:, None] == holdout_scores[None, :]).sum()
    return float((less + 0.5 * ties) / (n * n))


def dump_reconstructions(path, decoder, payloads):
    """Checkpoint-format dump of attack reconstructions for inspection."""
    recons = [decoder.forward(p[None])[0] for p in payloads]
    save_tensors(path, recons)
