"""Phase-1 critic training and phase-2 segmentation training.

Phase 2 trains the mask decoder through the critic: the mask swaps content
between a high-value image A and a low-value image B, and the losses compare
critic values before/after the swap. Critic weights are treated as constants
inside those terms; only the continued-critic MSE term moves them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericFaultError
from .model import CriticPath, CriticSegModel, save_checkpoint, to_batch

logger = logging.getLogger(__name__)


@dataclass
class Phase1Hyper:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-4
    shift_max_px: int = 12
    seed: int = 0

    def validate(self):
        assert self.epochs >= 1


@dataclass
class Phase2Hyper:
    epochs: int = 1
    batch_size: int = 128
    n_high_a: int = 32
    n_low_a: int = 32
    n_low_b: int = 64
    w_inject: float = 1.0
    w_replace: float = 1.0
    w_reg: float = 0.3
    w_critic: float = 1.0
    lr: float = 1e-3
    variant: str = "full"
    seed: int = 0

    def validate(self):
        assert self.n_high_a + self.n_low_a + self.n_low_b == self.batch_size


@dataclass
class LossBreakdown:
    inject: float
    replace: float
    regularization: float
    critic_mse: float
    total: float
    mask_mean: float

    def to_dict(self):
        return asdict(self)


def _shift_batch(images: torch.Tensor, shifts) -> torch.Tensor:
    """Horizontal shift with edge replication, per image, NCHW."""
    out = images.clone()
    for i, k in enumerate(shifts):
        k = int(k)
        if k > 0:
            out[i, :, :, k:] = images[i, :, :, :-k]
            out[i, :, :, :k] = images[i, :, :, :1]
        elif k < 0:
            out[i, :, :, :k] = images[i, :, :, -k:]
            out[i, :, :, k:] = images[i, :, :, -1:]
    return out


def train_phase1(images, labels, hyper: Phase1Hyper, model: CriticSegModel,
                 val=None, diag_path=None):
    """Supervised critic regression on discounted-reward labels.

    Only encoder and critic-head weights are updated. Returns (model, log)
    where log holds one record per epoch.
    """
    hyper.validate()
    if len(labels) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(hyper.seed)
    params = list(model.encoder.parameters()) + list(model.critic_head.parameters())
    opt = torch.optim.Adam(params, lr=hyper.lr)
    labels_t = torch.from_numpy(np.asarray(labels)).float()
    log = []
    n = len(labels)
    for epoch in range(hyper.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=hyper.seed, spawn_key=(epoch,)))
        order = rng.permutation(n)
        model.train()
        losses = []
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            batch = to_batch(images[idx])
            if hyper.shift_max_px > 0:
                shifts = rng.integers(-hyper.shift_max_px, hyper.shift_max_px + 1, size=len(idx))
                batch = _shift_batch(batch, shifts)
            v = model.forward_critic(batch)
            loss = F.mse_loss(v, labels_t[idx])
            if not torch.isfinite(loss):
                if diag_path is not None:
                    save_checkpoint(diag_path, model, "phase1-diagnostic", epoch, hyper.seed)
                raise NumericFaultError(f"NaN phase-1 loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        record = {"epoch": epoch, "train_mse": float(np.mean(losses)), "lr": hyper.lr, "seed": hyper.seed}
        if val is not None:
            record["val_mse"] = critic_mse(model, val[0], val[1])
        log.append(record)
        logger.info("phase1 %s", record)
    return model, log


def critic_mse(model, images, labels, batch_size: int = 256) -> float:
    model.eval()
    errs = []
    labels = np.asarray(labels)
    with torch.no_grad():
        for i in range(0, len(labels), batch_size):
            v = model.forward_critic(to_batch(images[i : i + batch_size]))
            errs.append((v.numpy() - labels[i : i + batch_size]) ** 2)
    return float(np.mean(np.concatenate(errs)))


def compose_batch(high_idx, low_idx, rng, hyper: Phase2Hyper):
    """Sample one phase-2 batch: A-slots from high and low, B-slots from low.

    Sampling is without replacement within each slot group when the source set
    is large enough, otherwise with replacement (logged once)."""
    hyper.validate()

    def pick(pool, k):
        pool = np.asarray(pool)
        if len(pool) >= k:
            return rng.choice(pool, size=k, replace=False)
        logger.warning("set of %d smaller than slot count %d; sampling with replacement", len(pool), k)
        return rng.choice(pool, size=k, replace=True)

    return pick(high_idx, hyper.n_high_a), pick(low_idx, hyper.n_low_a), pick(low_idx, hyper.n_low_b)


def _values_const_critic(model: CriticSegModel, x: torch.Tensor) -> torch.Tensor:
    """Critic values with parameters detached: gradients flow to the input
    (and hence the mask) but never into critic or encoder weights."""
    cp = CriticPath(model.encoder, model.critic_head)
    frozen = {k: v.detach() for k, v in cp.named_parameters()}
    return torch.func.functional_call(cp, frozen, (x,))


def phase2_losses(model: CriticSegModel, batch, hyper: Phase2Hyper):
    """Compute the weighted phase-2 loss for one batch.

    batch = (a_images, b_images, a_labels, b_labels) as tensors, where the
    first n_high_a A-slots come from the high set. Returns (total tensor,
    LossBreakdown).
    """
    a_imgs, b_imgs, a_labels, b_labels = batch
    # mask production and merged-image values run without dropout
    model.eval()
    m = model.forward_mask(a_imgs)
    m1 = m.unsqueeze(1)
    x = (1.0 - m1) * a_imgs + m1 * b_imgs
    y = (1.0 - m1) * b_imgs + m1 * a_imgs
    n = a_imgs.shape[0]
    values = _values_const_critic(model, torch.cat([a_imgs, b_imgs, x, y], dim=0))
    v_a, v_b, v_x, v_y = values[:n], values[n : 2 * n], values[2 * n : 3 * n], values[3 * n :]
    inject = ((v_a - v_y) ** 2).mean()
    replace = ((v_b - v_x) ** 2).mean()
    reg = m.mean()

    # continued critic training matches phase-1 conditions (dropout on)
    model.train()
    v_live = model.forward_critic(torch.cat([a_imgs, b_imgs], dim=0))
    c_mse = F.mse_loss(v_live, torch.cat([a_labels, b_labels], dim=0))

    total = hyper.w_replace * replace + hyper.w_reg * reg + hyper.w_critic * c_mse
    if hyper.variant != "no_inject":
        total = total + hyper.w_inject * inject
    if not torch.isfinite(total):
        raise NumericFaultError(
            f"non-finite phase-2 loss: inject={inject.item()} replace={replace.item()} "
            f"reg={reg.item()} critic={c_mse.item()}"
        )
    breakdown = LossBreakdown(
        inject=inject.item(),
        replace=replace.item(),
        regularization=reg.item(),
        critic_mse=c_mse.item(),
        total=total.item(),
        mask_mean=m.mean().item(),
    )
    return total, breakdown


def phase2_parameters(model: CriticSegModel, variant: str):
    """Parameter set updated in phase 2 for each variant."""
    params = list(model.decoder.parameters())
    if variant == "frozen_encoder":
        params += list(model.critic_head.parameters())
    elif variant == "separate_critic":
        params += list(model.seg_encoder.parameters())
        params += list(model.encoder.parameters()) + list(model.critic_head.parameters())
    else:  # full, no_inject: shared encoder, continued critic training
        params += list(model.encoder.parameters()) + list(model.critic_head.parameters())
    return params


def train_phase2(model: CriticSegModel, high_data, low_data, hyper: Phase2Hyper):
    """One (or more) epochs of segmentation training.

    high_data/low_data are (images_uint8, labels) arrays. An epoch is
    ceil((|high|+|low|) / batch_size) composed batches. Returns (model, log)
    with one record per step.
    """
    hyper.validate()
    torch.manual_seed(hyper.seed)
    high_imgs, high_labels = high_data
    low_imgs, low_labels = low_data
    if len(high_labels) == 0 or len(low_labels) == 0:
        raise ValueError("phase 2 requires non-empty high and low sets")
    opt = torch.optim.Adam(phase2_parameters(model, hyper.variant), lr=hyper.lr)
    steps_per_epoch = math.ceil((len(high_labels) + len(low_labels)) / hyper.batch_size)
    log = []
    step = 0
    for epoch in range(hyper.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=hyper.seed, spawn_key=(1000 + epoch,)))
        for _ in range(steps_per_epoch):
            ha, la, lb = compose_batch(np.arange(len(high_labels)), np.arange(len(low_labels)), rng, hyper)
            a_imgs = to_batch(np.concatenate([high_imgs[ha], low_imgs[la]]))
            b_imgs = to_batch(low_imgs[lb])
            a_labels = torch.from_numpy(np.concatenate([high_labels[ha], low_labels[la]])).float()
            # B slots pair one-to-one with A slots
            b_labels = torch.from_numpy(low_labels[lb]).float()
            total, breakdown = phase2_losses(model, (a_imgs, b_imgs, a_labels, b_labels), hyper)
            opt.zero_grad()
            total.backward()
            opt.step()
            record = {"step": step, "epoch": epoch, "losses": breakdown.to_dict(),
                      "mask_mean": breakdown.mask_mean, "lr": hyper.lr, "seed": hyper.seed}
            log.append(record)
            step += 1
        logger.info("phase2 epoch %d: mask_mean=%.4f total=%.4f", epoch,
                    log[-1]["mask_mean"], log[-1]["losses"]["total"])
    return model, log
