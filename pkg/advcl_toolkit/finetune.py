"""
Downstream finetuning of a pretrained encoder: standard linear (SLF), adversarial
linear (ALF) and adversarial full finetuning with the TRADES loss (AFF).
"""
import copy
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch.optim import SGD
from torch.optim.lr_scheduler import MultiStepLR

from .attacks import eval_attack, perturb, trades_attack
from .data_pipeline import ImageDataset, LabeledBatch, match_resolution
from .evaluate import eval_ra, eval_sa
from .exceptions import ConfigurationError, TrainingError
from .losses import trades_loss
from .models import BNRoute, FinetuneConfig, FinetuneMode
from .network import RobustModel, load_checkpoint, save_checkpoint
from .utils import (append_jsonl, ensure_dir, file_fingerprint, json_fingerprint, make_generator,
                    parameter_hash, resolve_device, seed_everything, status)


@dataclass
class FinetunedModel:
    model: RobustModel
    mode: FinetuneMode
    base_checkpoint: Optional[str]
    encoder_frozen: bool
    base_encoder_hash: str
    best_epoch: int = -1
    best_score: float = 0.0
    history: List[Dict[str, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    metrics_path: Optional[Path] = None

    @property
    def head(self) -> torch.nn.Linear:
        return self.model.classifier

    def encoder_hash(self) -> str:
        return parameter_hash(self.model.encoder)


def build_finetune_optimizer(params: Iterable[torch.nn.Parameter], cfg: FinetuneConfig) -> Tuple[SGD, MultiStepLR]:
    """SGD with the configured momentum / weight decay and x``gamma`` drops at ``milestones``."""
    optimizer = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return optimizer, MultiStepLR(optimizer, milestones=list(cfg.milestones), gamma=cfg.gamma)


def _freeze_encoder(model: RobustModel) -> None:
    for p in model.encoder.parameters():
        p.requires_grad_(False)


def _train_mode(model: RobustModel, cfg: FinetuneConfig) -> None:
    """AFF trains BN; SLF / ALF keep running statistics fixed unless told otherwise."""
    if cfg.mode == FinetuneMode.AFF or not cfg.freeze_bn_stats:
        model.train()
    else:
        model.eval()


def finetune_step(model: RobustModel, batch: LabeledBatch, cfg: FinetuneConfig, optimizer: torch.optim.Optimizer,
                  generator: Optional[torch.Generator] = None) -> Dict[str, float]:
    """
    One update under ``cfg.mode``. Returns the optimized loss and the clean CE of the same batch
    computed with the pre-update weights.
    """
    x, y = batch.images, batch.labels
    mode = FinetuneMode(cfg.mode)
    if mode == FinetuneMode.AFF:
        delta = trades_attack(model, x, cfg.budget, generator, BNRoute.NORMAL, bn_mode="eval")
        _train_mode(model, cfg)
        logits_clean = model.forward_classifier(x)
        logits_adv = model.forward_classifier(perturb(x, delta))
        loss = trades_loss(logits_clean, logits_adv, y, cfg.trades_beta)
        clean = F.cross_entropy(logits_clean, y)
    else:
        if mode == FinetuneMode.ALF:
            delta = eval_attack(model, batch, cfg.budget, generator, BNRoute.NORMAL, bn_mode="eval")
            x_in = perturb(x, delta)
        else:
            x_in = x
        _train_mode(model, cfg)
        loss = F.cross_entropy(model.forward_classifier(x_in), y)
        with torch.no_grad():
            clean = loss if x_in is x else F.cross_entropy(model.forward_classifier(x), y)
    if not torch.isfinite(loss):
        raise TrainingError(f"Non-finite {mode.value} finetuning loss ({loss.item()}).")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {"loss": loss.item(), "clean_loss": clean.item()}


def _prepare(ckpt: Union[str, Path, RobustModel], dataset: ImageDataset, cfg: FinetuneConfig,
             device: torch.device) -> Tuple[RobustModel, Optional[str], ImageDataset]:
    if isinstance(ckpt, RobustModel):
        model, source = copy.deepcopy(ckpt).to(device), None
    else:
        model, _ = load_checkpoint(ckpt, device)
        source = str(ckpt)
    try:
        dataset = match_resolution(dataset, model.config.input_channels, model.config.image_size, cfg.resize_inputs)
    except ConfigurationError as e:
        raise ConfigurationError(f"Checkpoint '{source or 'in-memory'}' is incompatible with the dataset: {e}") from e
    return model, source, dataset


def finetune(ckpt: Union[str, Path, RobustModel], dataset: ImageDataset, cfg: FinetuneConfig,
             val_dataset: Optional[ImageDataset] = None, output_dir: Union[str, Path] = "artifacts/finetune",
             device: Union[str, torch.device] = "cpu") -> FinetunedModel:
    """
    Trains a fresh linear head (and, for AFF, the encoder) on ``dataset``.

    After every epoch the model is scored on ``val_dataset`` (the training data when absent):
    SA for SLF, RA under ``cfg.selection_budget`` for ALF / AFF. The best-scoring epoch is
    restored and returned.

    Raises:
        ConfigurationError: checkpoint and dataset resolutions or channels are incompatible.
        TrainingError: non-finite loss.
    """
    device = resolve_device(device)
    mode = FinetuneMode(cfg.mode)
    model, source, dataset = _prepare(ckpt, dataset, cfg, device)
    if val_dataset is not None:
        val_dataset = match_resolution(val_dataset, model.config.input_channels, model.config.image_size,
                                       cfg.resize_inputs)
    selection_data = val_dataset or dataset

    seed_everything(cfg.seed)
    model.attach_classifier(dataset.num_classes)
    frozen = mode in (FinetuneMode.SLF, FinetuneMode.ALF)
    if frozen:
        _freeze_encoder(model)
        params = list(model.classifier.parameters())
    else:
        params = list(model.encoder.parameters()) + list(model.classifier.parameters())
    base_hash = parameter_hash(model.encoder)
    optimizer, scheduler = build_finetune_optimizer(params, cfg)
    generator = make_generator(cfg.seed)

    output_dir = ensure_dir(output_dir)
    metrics_path = output_dir / "metrics.jsonl"
    metrics_path.write_text("")
    result = FinetunedModel(model, mode, source, frozen, base_hash, metrics_path=metrics_path)
    best_state = None
    status(f"Finetuning ({mode.value}) on {dataset.name}/{dataset.split}: {len(dataset)} samples, "
           f"{dataset.num_classes} classes, {cfg.epochs} epochs.")

    for epoch in range(cfg.epochs):
        lr = optimizer.param_groups[0]["lr"]
        sums: Dict[str, float] = defaultdict(float)
        steps = 0
        for batch in dataset.batches(cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
            for key, value in finetune_step(model, batch.to(device), cfg, optimizer, generator).items():
                sums[key] += value
            steps += 1
        scheduler.step()

        if mode == FinetuneMode.SLF:
            score = eval_sa(model, selection_data, cfg.batch_size)
        else:
            score = eval_ra(model, selection_data, cfg.selection_budget, cfg.batch_size, cfg.seed)
        record = {"epoch": epoch, "lr": lr, "steps": steps, "selection_score": score}
        record.update({key: value / max(steps, 1) for key, value in sums.items()})
        result.history.append(record)
        append_jsonl(metrics_path, record)
        if best_state is None or score > result.best_score:
            result.best_epoch, result.best_score = epoch, score
            best_state = copy.deepcopy(model.state_dict())
        status(f"[{mode.value}] epoch {epoch + 1}/{cfg.epochs} loss={record.get('loss', float('nan')):.4f} "
               f"{'SA' if mode == FinetuneMode.SLF else 'RA'}={score:.4f}")

    model.load_state_dict(best_state)
    extra = {
        "stage": "finetune",
        "mode": mode.value,
        "base_checkpoint": source,
        "base_checkpoint_sha256": file_fingerprint(source) if source else None,
        "encoder_frozen": frozen,
        "best_epoch": result.best_epoch,
        "best_score": result.best_score,
    }
    result.checkpoint = save_checkpoint(model, output_dir / "finetuned.pt", json_fingerprint(cfg.dict()), extra)
    status(f"[{mode.value}] best epoch {result.best_epoch + 1} ({result.best_score:.4f}); "
           f"checkpoint written to '{result.checkpoint}'.")
    return result


def finetune_slf(ckpt, dataset: ImageDataset, cfg: Optional[FinetuneConfig] = None, **kwargs) -> FinetunedModel:
    cfg = (cfg or FinetuneConfig()).copy(update={"mode": FinetuneMode.SLF})
    return finetune(ckpt, dataset, cfg, **kwargs)


def finetune_alf(ckpt, dataset: ImageDataset, cfg: Optional[FinetuneConfig] = None, **kwargs) -> FinetunedModel:
    cfg = (cfg or FinetuneConfig()).copy(update={"mode": FinetuneMode.ALF})
    return finetune(ckpt, dataset, cfg, **kwargs)


def finetune_aff(ckpt, dataset: ImageDataset, cfg: Optional[FinetuneConfig] = None, **kwargs) -> FinetunedModel:
    cfg = (cfg or FinetuneConfig()).copy(update={"mode": FinetuneMode.AFF})
    return finetune(ckpt, dataset, cfg, **kwargs)
