"""
Training objectives and loops for the seven methods: baseline, fbpaug,
dann_enc/dann_dec (adversarial feature alignment via gradient reversal),
fcons_enc/fcons_dec (paired feature-map MSE), and pcons (paired prediction
Dice loss).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import PairedSample, Volume
from .recon import fbp_augment
from .segnet import (
    ModelBundle,
    ResUNet,
    TapSet,
    aggregate_features,
    build_adversarial_heads,
    grad_reverse,
)

__all__ = [
    "TrainConfig",
    "TrainData",
    "METHODS",
    "segmentation_loss",
    "adversarial_objective",
    "lambda_schedule",
    "f_consistency_loss",
    "p_consistency_loss",
    "train",
    "fbpaug_train_hook",
    "predict_probs",
]

METHODS = ("baseline", "fbpaug", "dann_enc", "dann_dec", "fcons_enc", "fcons_dec", "pcons")
_PAIR_METHODS = ("dann_enc", "dann_dec", "fcons_enc", "fcons_dec", "pcons")
_DEFAULT_ALPHA = {"fcons_enc": 1.0, "fcons_dec": 1e-4, "pcons": 1e-3}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    method: str = "baseline"
    lam: float = 1e-2  # adversarial weight ceiling (dann_*)
    alpha: float | None = None  # consistency weight; None = method default
    iterations: int = 500
    batch_labeled: int = 32
    batch_pairs: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.2
    lr_milestone_fracs: tuple[float, ...] = (0.24, 0.48, 0.72, 0.96)
    seed: int = 0
    aug_prob: float = 0.1
    aug_a_range: tuple[float, float] = (10.0, 40.0)
    aug_b_range: tuple[float, float] = (1.0, 4.0)
    aug_n_angles: int = 60
    single_thread: bool = True  # single-producer mode: bit-exact reruns

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lam < 0 or (self.alpha is not None and self.alpha < 0):
            raise ValueError("adaptation weights must be non-negative")

    @property
    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return _DEFAULT_ALPHA.get(self.method, 0.0)

    @property
    def site_filter(self) -> str:
        return "decoder" if self.method.endswith("_dec") else "encoder"


@dataclass
class TrainData:
    """Trainer-facing dataset view: labeled volumes plus unlabeled pairs."""

    source_volumes: list[Volume]
    paired_train: list[PairedSample] = field(default_factory=list)


def segmentation_loss(logits: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between logits and a binary mask."""
    if logits.shape != target_mask.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target_mask.shape)}")
    t = target_mask.to(logits.dtype)
    if not torch.all((t == 0) | (t == 1)):
        raise ValueError("target mask must be binary")
    return F.binary_cross_entropy_with_logits(logits, t)


def lambda_schedule(progress: float, lam_max: float) -> float:
    """Adversarial-weight ramp ``lam_max * (2 / (1 + exp(-10 p)) - 1)``."""
    if progress < 0.0 or progress > 1.0:
        warnings.warn(f"training progress {progress} outside [0, 1]; clamping", stacklevel=2)
        progress = min(max(progress, 0.0), 1.0)
    return lam_max * (2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)


def f_consistency_loss(
    taps_smooth: TapSet, taps_sharp: TapSet, site_filter: str | None = None
) -> torch.Tensor:
    """Mean over selected tap sites of the MSE between paired feature maps."""
    a = taps_smooth.select(site_filter) if site_filter else taps_smooth
    b = taps_sharp.select(site_filter) if site_filter else taps_sharp
    if a.sites != b.sites:
        raise ValueError(f"tap site mismatch: {a.sites} vs {b.sites}")
    total = None
    for (_, fa), (_, fb) in zip(a, b):
        if fa.shape != fb.shape:
            raise ValueError(f"tap shape mismatch: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        term = F.mse_loss(fa, fb)
        total = term if total is None else total + term
    return total / len(a)


def p_consistency_loss(
    probs_smooth: torch.Tensor, probs_sharp: torch.Tensor, eps: float = 1.0
) -> torch.Tensor:
    """Soft Dice loss ``1 - (2*sum(p*q)+eps) / (sum(p)+sum(q)+eps)``.

    Computed per batch item over all pixels, then averaged over the batch.
    """
    if probs_smooth.shape != probs_sharp.shape:
        raise ValueError("paired prediction maps must share a shape")
    for p in (probs_smooth, probs_sharp):
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
    flat_p = probs_smooth.reshape(probs_smooth.shape[0], -1)
    flat_q = probs_sharp.reshape(probs_sharp.shape[0], -1)
    inter = (flat_p * flat_q).sum(dim=1)
    denom = flat_p.sum(dim=1) + flat_q.sum(dim=1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def adversarial_objective(
    bundle: ModelBundle,
    labeled_batch: tuple[torch.Tensor, torch.Tensor],
    paired_batch: tuple[torch.Tensor, torch.Tensor] | None,
    lam: float,
    site_filter: str = "encoder",
) -> tuple[torch.Tensor, dict[str, float]]:
    """Composite DANN objective realized through gradient reversal.

    Returns a single backpropagatable total: the segmentation BCE plus the
    discriminator's domain BCE with every tap passed through
    ``grad_reverse(., lam)``.  One backward pass therefore descends the
    discriminator loss in the head parameters while ascending it (scaled by
    lam) in the trunk — the min-max of the adversarial objective.
    """
    if paired_batch is None:
        raise ValueError("adversarial objective requires a paired batch with domain labels")
    if bundle.aggregator is None or bundle.discriminator is None:
        raise ValueError("bundle lacks adversarial heads")
    x, y = labeled_batch
    logits, _ = bundle.segmenter(x)
    loss_seg = segmentation_loss(logits, y)

    xs, xt = paired_batch
    both = torch.cat([xs, xt], dim=0)
    if site_filter == "encoder":
        feats = bundle.segmenter.encode(both)
        taps = TapSet([(f"encoder_{i}", f) for i, f in enumerate(feats)])
    else:
        _, taps = bundle.segmenter(both)
    reversed_taps = TapSet([(s, grad_reverse(t, lam)) for s, t in taps.select(site_filter)])
    agg = aggregate_features(reversed_taps, site_filter, bundle.aggregator)
    domain_logit = bundle.discriminator(agg)
    labels = torch.cat(
        [torch.zeros(xs.shape[0]), torch.ones(xt.shape[0])]
    ).to(domain_logit.dtype)
    loss_domain = F.binary_cross_entropy_with_logits(domain_logit, labels)
    total = loss_seg + loss_domain
    with torch.no_grad():
        acc = ((domain_logit > 0).float() == labels).float().mean().item()
    parts = {
        "loss_seg": float(loss_seg.detach()),
        "loss_adapt": float(loss_domain.detach()),
        "disc_acc": acc,
    }
    return total, parts


def fbpaug_train_hook(
    images: np.ndarray,
    rng: np.random.Generator,
    prob: float = 0.1,
    a_range: tuple[float, float] = (10.0, 40.0),
    b_range: tuple[float, float] = (1.0, 4.0),
    n_angles: int = 60,
) -> np.ndarray:
    """Independently re-reconstruct each slice of a batch with probability ``prob``.

    Outputs are clipped back to [0, 1] so augmented slices obey the same
    intensity contract as preprocessed data; masks are untouched by design.
    """
    out = np.empty_like(images)
    for i, img in enumerate(images):
        aug = fbp_augment(img.astype(np.float64), a_range, b_range, prob, rng, n_angles=n_angles)
        out[i] = np.clip(aug, 0.0, 1.0)
    return out


def _rng_for(seed: int, *key: object) -> np.random.Generator:
    import hashlib

    digest = hashlib.sha256(repr((seed,) + key).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


def _stack_labeled(volumes: list[Volume]) -> tuple[torch.Tensor, torch.Tensor, int]:
    imgs, masks = [], []
    slices_per_volume = len(volumes[0].slices)
    for vol in volumes:
        if len(vol.slices) != slices_per_volume:
            raise ValueError("volumes must share a slice count for uniform sampling")
        for s in vol.slices:
            imgs.append(s.image)
            masks.append(s.lesion_mask)
    x = torch.from_numpy(np.stack(imgs)).float().unsqueeze(1)
    y = torch.from_numpy(np.stack(masks)).float().unsqueeze(1)
    return x, y, slices_per_volume


def train(config: TrainConfig, datasets: TrainData) -> tuple[ModelBundle, list[dict]]:
    """Run one stochastic-optimization training job.

    Every iteration samples 32 labeled slices (uniform over volumes, then
    uniform over slices) and, for pair-consuming methods, 16 pairs mixed
    uniformly across kernel-pair families.  Adam with the configured initial
    learning rate is decayed by ``lr_decay`` at the configured milestone
    fractions.  Deterministic given the seed (single-producer data loading).
    """
    if config.method in _PAIR_METHODS and not datasets.paired_train:
        raise ValueError(f"method {config.method!r} requires paired training data")
    if config.single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    model = ResUNet()
    bundle = ModelBundle(segmenter=model)
    if config.method.startswith("dann"):
        agg, disc = build_adversarial_heads(model, config.site_filter)
        bundle.aggregator = agg
        bundle.discriminator = disc

    x_all, y_all, slices_per_volume = _stack_labeled(datasets.source_volumes)
    n_volumes = len(datasets.source_volumes)
    if datasets.paired_train:
        xs_all = torch.from_numpy(
            np.stack([p.image_smooth for p in datasets.paired_train])
        ).float().unsqueeze(1)
        xt_all = torch.from_numpy(
            np.stack([p.image_sharp for p in datasets.paired_train])
        ).float().unsqueeze(1)

    batch_rng = _rng_for(config.seed, "labeled-batches")
    pair_rng = _rng_for(config.seed, "pair-batches")
    aug_rng = _rng_for(config.seed, "fbpaug")

    params = list(bundle.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    milestones = sorted({max(1, round(f * config.iterations)) for f in config.lr_milestone_fracs})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=config.lr_decay)

    alpha = config.resolved_alpha
    log: list[dict] = []
    bundle.train()
    for it in range(config.iterations):
        vol_idx = batch_rng.integers(0, n_volumes, size=config.batch_labeled)
        slc_idx = batch_rng.integers(0, slices_per_volume, size=config.batch_labeled)
        flat = vol_idx * slices_per_volume + slc_idx
        xb = x_all[flat]
        yb = y_all[flat]
        if config.method == "fbpaug":
            aug = fbpaug_train_hook(
                xb[:, 0].numpy(),
                aug_rng,
                prob=config.aug_prob,
                a_range=config.aug_a_range,
                b_range=config.aug_b_range,
                n_angles=config.aug_n_angles,
            )
            xb = torch.from_numpy(aug).float().unsqueeze(1)

        progress = it / max(1, config.iterations - 1)
        weight = 0.0
        if config.method.startswith("dann"):
            weight = lambda_schedule(progress, config.lam)
        elif config.method in ("fcons_enc", "fcons_dec", "pcons"):
            weight = alpha

        # a weight of exactly zero takes the plain supervised step: the pair
        # forward pass is skipped entirely so batch-norm running statistics
        # stay on the baseline trajectory (the alpha/lambda -> 0 limit is the
        # baseline, bit for bit)
        if weight != 0.0 and config.method.startswith("dann"):
            pi = pair_rng.integers(0, xs_all.shape[0], size=config.batch_pairs)
            total, parts = adversarial_objective(
                bundle, (xb, yb), (xs_all[pi], xt_all[pi]), weight, config.site_filter
            )
        else:
            logits, _ = model(xb)
            loss_seg = segmentation_loss(logits, yb)
            loss_adapt = torch.zeros(())
            if weight != 0.0 and config.method in ("fcons_enc", "fcons_dec"):
                pi = pair_rng.integers(0, xs_all.shape[0], size=config.batch_pairs)
                if config.site_filter == "encoder":
                    fs = model.encode(xs_all[pi])
                    ft = model.encode(xt_all[pi])
                    ts = TapSet([(f"encoder_{i}", f) for i, f in enumerate(fs)])
                    tt = TapSet([(f"encoder_{i}", f) for i, f in enumerate(ft)])
                    loss_adapt = f_consistency_loss(ts, tt)
                else:
                    _, ts = model(xs_all[pi])
                    _, tt = model(xt_all[pi])
                    loss_adapt = f_consistency_loss(ts, tt, "decoder")
            elif weight != 0.0 and config.method == "pcons":
                pi = pair_rng.integers(0, xs_all.shape[0], size=config.batch_pairs)
                ls, _ = model(xs_all[pi])
                lt, _ = model(xt_all[pi])
                loss_adapt = p_consistency_loss(torch.sigmoid(ls), torch.sigmoid(lt))
            total = loss_seg + weight * loss_adapt
            parts = {
                "loss_seg": float(loss_seg.detach()),
                "loss_adapt": float(loss_adapt.detach()),
            }

        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        log.append(
            {
                "iteration": it,
                "loss_seg": parts["loss_seg"],
                "loss_adapt": parts.get("loss_adapt", 0.0),
                "lr": opt.param_groups[0]["lr"],
                "weight": weight,
                **({"disc_acc": parts["disc_acc"]} if "disc_acc" in parts else {}),
            }
        )
    bundle.eval()
    return bundle, log


@torch.no_grad()
def predict_probs(bundle: ModelBundle, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Sigmoid lesion probabilities for a stack of slices, shape (N, H, W)."""
    bundle.eval()
    outs = []
    for i in range(0, images.shape[0], batch_size):
        x = torch.from_numpy(images[i : i + batch_size]).float().unsqueeze(1)
        logits, _ = bundle.segmenter(x)
        outs.append(torch.sigmoid(logits)[:, 0].numpy())
    return np.concatenate(outs, axis=0)
