"""Multi-task split-federated segmentation with causal latent representations,
diffusion-obfuscated split-point activations, and domain-adversarial alignment."""

from .causal_discovery import (CausalGraph, NotearsConfig, NotearsDiscovery,
                               fit_notears, matrix_exp, notears_h, notears_h_grad,
                               top_k_edges)
from .crdm import (CrdmBlock, ConditionalDenoiser, DiffusionSchedule,
                   ExogenousEncoder, NeuralSCM, cosine_schedule, denoise,
                   forward_diffuse, kl_standard_normal)
from .daca import DomainDiscriminator, GrlConfig, adversarial_loss, discriminate
from .estimator import MuCALDSplitFed
from .frames import ActivationFrame, decode_frame, encode_frame
from .metrics import (ReconMetrics, SegMetrics, assd, confusion_scores, hd95,
                      psnr, recon_metrics, segmentation_metrics, ssim)
from .objective import (LossBreakdown, LossWeights, ScheduleState,
                        effective_weights, proxy_loss, soft_dice_loss, total_loss)
from .proxy_features import (ProxyFeatureExtractor, ProxySpec, ProxyVector,
                             convex_hull, extract, normalize_dataset,
                             shannon_entropy)
from .privacy import (AttackReport, InterceptLog, load_intercepts,
                      membership_inference, train_attack_decoder)
from .runtime import (RunConfig, RoundReport, RunResult, aggregate_round,
                      fedavg, run)
from .synth_tasks import TaskSpec, augment, generate

__version__ = "0.1.0"

__all__ = [
    "CausalGraph", "NotearsConfig", "NotearsDiscovery", "fit_notears",
    "matrix_exp", "notears_h", "notears_h_grad", "top_k_edges",
    "CrdmBlock", "ConditionalDenoiser", "DiffusionSchedule", "ExogenousEncoder",
    "NeuralSCM", "cosine_schedule", "denoise", "forward_diffuse", "kl_standard_normal",
    "DomainDiscriminator", "GrlConfig", "adversarial_loss", "discriminate",
    "MuCALDSplitFed",
    "ActivationFrame", "decode_frame", "encode_frame",
    "ReconMetrics", "SegMetrics", "assd", "confusion_scores", "hd95", "psnr",
    "recon_metrics", "segmentation_metrics", "ssim",
    "LossBreakdown", "LossWeights", "ScheduleState", "effective_weights",
    "proxy_loss", "soft_dice_loss", "total_loss",
    "ProxyFeatureExtractor", "ProxySpec", "ProxyVector", "convex_hull", "extract",
    "normalize_dataset", "shannon_entropy",
    "AttackReport", "InterceptLog", "load_intercepts", "membership_inference",
    "train_attack_decoder",
    "RunConfig", "RoundReport", "RunResult", "aggregate_round", "fedavg", "run",
    "TaskSpec", "augment", "generate",
]
