import math
from typing import Callable, Optional

import torch
from loguru import logger
from torch.utils.data import DataLoader, TensorDataset

from affinity_lab.utils.config import TrainConfig
from affinity_lab.utils.exceptions import TrainingDivergedError
from affinity_lab.utils.misc import log_event, wandb_log
from affinity_lab.utils.progress_tracker import EpochProgress, LossCurve


def build_optimizer(model: torch.nn.Module, train_cfg: TrainConfig) -> torch.optim.Optimizer:
    """
    AdamW over two parameter groups: weight matrices and embeddings decay, biases do not.
    """
    param_dict = {pn: p for pn, p in model.named_parameters() if p.requires_grad}
    decay_params = [p for n, p in param_dict.items() if p.dim() >= 2]
    nodecay_params = [p for n, p in param_dict.items() if p.dim() < 2]
    optim_groups = [
        {"params": decay_params, "weight_decay": train_cfg.weight_decay},
        {"params": nodecay_params, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(optim_groups, lr=train_cfg.learning_rate, betas=(0.9, 0.99), eps=1e-8)


def train_epochs(
    model: torch.nn.Module,
    num_examples: int,
    batch_loss: Callable[[torch.LongTensor, torch.Generator], torch.Tensor],
    train_cfg: TrainConfig,
    rng: torch.Generator,
    stage: str,
    wandb_run=None,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> LossCurve:
    """
    Generic minibatch loop. `batch_loss(indices, rng)` returns the mean loss of the examples at
    `indices`; the curve records the per-epoch mean over batches. Zero epochs leaves the model
    untouched.
    """
    curve = LossCurve(stage)
    if train_cfg.epochs == 0 or num_examples == 0:
        return curve
    optimizer = optimizer or build_optimizer(model, train_cfg)
    loader = DataLoader(
        TensorDataset(torch.arange(num_examples)),
        batch_size=train_cfg.batch_size,
        shuffle=True,
        generator=rng,
    )

    model.train()
    for epoch in range(train_cfg.epochs):
        total, batches = 0.0, 0
        for (indices,) in loader:
            optimizer.zero_grad()
            loss = batch_loss(indices, rng)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(stage, epoch, float(loss), train_cfg.learning_rate)
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            batches += 1

        progress = EpochProgress(
            stage=stage,
            epoch=epoch,
            mean_loss=total / batches,
            learning_rate=train_cfg.learning_rate,
            num_batches=batches,
        )
        if not math.isfinite(progress.mean_loss):
            raise TrainingDivergedError(stage, epoch, progress.mean_loss, train_cfg.learning_rate)
        curve.update(progress)
        wandb_log(wandb_run, {f"{stage}/loss": progress.mean_loss}, step=epoch)
        if epoch % 50 == 0 or epoch == train_cfg.epochs - 1:
            logger.debug(f"{stage} epoch {epoch}: loss {progress.mean_loss:.6g}")

    model.eval()
    log_event(
        f"{stage} training finished",
        stage=stage,
        epochs=train_cfg.epochs,
        initial_loss=curve.initial,
        final_loss=curve.final,
    )
    return curve
