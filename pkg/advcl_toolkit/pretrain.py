"""
Pretraining loops: AdvCL (adversarial multi-view contrastive learning with the
pseudo-label CE regularizer), plain SimCLR, and the supervised min-max baseline.

Every loop shares one driver that owns seeded batch order, the learning-rate
schedule, JSON-lines metrics, periodic / last-good checkpoints and resume.
"""
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch.optim import SGD
from torch.optim.lr_scheduler import LambdaLR, MultiStepLR

from .attacks import (adv_ce, adv_view_3view, adv_view_paired, adv_view_single, contrastive_view_loss,
                      eval_attack, perturb, pseudo_ce_loss)
from .clusterfit import PseudoLabelTable
from .data_pipeline import ImageDataset, LabeledBatch, augment
from .exceptions import AttackError, ConfigurationError, StateError, TrainingError
from .frequency_views import fft_decompose
from .models import (AugmentConfig, BNRoute, EncoderConfig, PretrainConfig, SupervisedATConfig,
                     ViewRecipe)
from .network import RobustModel, read_checkpoint, save_checkpoint
from .utils import (append_jsonl, ensure_dir, json_fingerprint, make_generator, preserved_buffers,
                    resolve_device, seed_everything, status)

_FREQUENCY_PARTS = {
    ViewRecipe.THREE_VIEW_LOW: ("low",),
    ViewRecipe.THREE_VIEW_LOW_HIGH: ("low", "high"),
    ViewRecipe.THREE_VIEW_HIGH: ("high",),
}


# === Schedule ===

def warmup_cosine_lr(epoch: float, cfg: PretrainConfig) -> float:
    """
    Learning rate at a (fractional) epoch: linear warm-up from ``warmup_start_lr`` to ``lr`` over
    ``warmup_epochs``, then ``lr * 0.5 * (1 + cos(pi * (e - W) / (E - W)))``.
    """
    w, total = cfg.warmup_epochs, cfg.epochs
    if w > 0 and epoch < w:
        return cfg.warmup_start_lr + (cfg.lr - cfg.warmup_start_lr) * epoch / w
    if total <= w:
        return cfg.lr
    progress = min(max((epoch - w) / (total - w), 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# === Views ===

@dataclass
class ViewBundle:
    """Ordered views of one batch with the BN route each is encoded under."""
    views: List[torch.Tensor]
    routes: List[BNRoute]
    names: List[str]
    perturbations: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.views) == len(self.routes) == len(self.names)):
            raise ConfigurationError("a view bundle needs one route and one name per view.")

    @property
    def num_views(self) -> int:
        return len(self.views)


def build_view_bundle(model: RobustModel, x: torch.Tensor, cfg: PretrainConfig,
                      augment_cfg: Optional[AugmentConfig] = None,
                      generator: Optional[torch.Generator] = None) -> ViewBundle:
    """
    Samples tau1(x), tau2(x) once and assembles the views of ``cfg.recipe``.

    Adversarial views are encoded under ``adv_cl``; clean, augmented and frequency views
    under ``normal``.
    """
    recipe = ViewRecipe(cfg.recipe)
    t1x = augment(x, augment_cfg, generator)
    t2x = augment(x, augment_cfg, generator)
    budget, t, bn_mode = cfg.budget, cfg.temperature, cfg.attack_bn_mode

    if recipe == ViewRecipe.SINGLE_ADV:
        d1 = adv_view_single(model, t1x, t2x, budget, t, generator, bn_mode)
        return ViewBundle([perturb(t1x, d1), t2x], [BNRoute.ADV_CL, BNRoute.NORMAL],
                          ["t1x+d1", "t2x"], {"d1": d1})
    if recipe == ViewRecipe.SINGLE_ADV_PLUS_CLEAN:
        # t1x plays the identity view: delta1 maximizes the loss over (t1x + delta1, t1x, t2x).
        d1 = adv_view_3view(model, t1x, t1x, t2x, budget, t, generator, bn_mode)
        return ViewBundle([perturb(t1x, d1), t1x, t2x], [BNRoute.ADV_CL, BNRoute.NORMAL, BNRoute.NORMAL],
                          ["t1x+d1", "t1x", "t2x"], {"d1": d1})
    if recipe in (ViewRecipe.PAIRED_ADV, ViewRecipe.PAIRED_ADV_PLUS_CLEAN):
        d1, d2 = adv_view_paired(model, t1x, t2x, budget, t, generator, bn_mode)
        bundle = ViewBundle([perturb(t1x, d1), perturb(t2x, d2)], [BNRoute.ADV_CL, BNRoute.ADV_CL],
                            ["t1x+d1", "t2x+d2"], {"d1": d1, "d2": d2})
        if recipe == ViewRecipe.PAIRED_ADV_PLUS_CLEAN:
            bundle.views += [t1x, t2x]
            bundle.routes += [BNRoute.NORMAL, BNRoute.NORMAL]
            bundle.names += ["t1x", "t2x"]
        return bundle

    delta = adv_view_3view(model, x, t1x, t2x, budget, t, generator, bn_mode)
    bundle = ViewBundle([t1x, t2x, perturb(x, delta)], [BNRoute.NORMAL, BNRoute.NORMAL, BNRoute.ADV_CL],
                        ["t1x", "t2x", "x+d"], {"d": delta})
    parts = _FREQUENCY_PARTS.get(recipe, ())
    if parts:
        freq = fft_decompose(x, cfg.frequency_radius, clamp=cfg.clamp_frequency_views)
        for part in parts:
            bundle.views.append(getattr(freq, part))
            bundle.routes.append(BNRoute.NORMAL)
            bundle.names.append(f"x_{part}")
    return bundle


# === AdvCL objective and step ===

@dataclass
class StepResult:
    loss: float
    cl_loss: float
    ce_loss: float
    bundle: ViewBundle
    delta_ce: Optional[torch.Tensor] = None

    def metrics(self) -> Dict[str, float]:
        return {"loss": self.loss, "cl_loss": self.cl_loss, "ce_loss": self.ce_loss}


def advcl_objective(model: RobustModel, bundle: ViewBundle, cfg: PretrainConfig, x: Optional[torch.Tensor] = None,
                    delta_ce: Optional[torch.Tensor] = None,
                    pseudo_labels: Optional[List[torch.Tensor]] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Multi-view contrastive loss over the bundle plus ``lambda`` times the ensemble-mean pseudo-label
    CE on ``x + delta_ce`` (route ``adv_ce``). Perturbations are treated as constants.

    Returns:
        (total, {"cl": ..., "ce": ...})
    """
    cl = contrastive_view_loss(model, bundle.views, bundle.routes, cfg.temperature)
    ce = cl.new_zeros(())
    if cfg.lambda_ce > 0:
        if x is None or delta_ce is None or pseudo_labels is None:
            raise StateError("lambda > 0 needs the clean batch, delta_ce and pseudo labels.")
        heads = list(range(len(pseudo_labels)))
        ce = pseudo_ce_loss(model, perturb(x, delta_ce), pseudo_labels, heads, BNRoute.ADV_CE, "mean")
    return cl + cfg.lambda_ce * ce, {"cl": cl, "ce": ce}


def _check_finite(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss).all():
        raise TrainingError(f"Non-finite {what} ({loss.item()}).")


def advcl_step(model: RobustModel, batch: Union[LabeledBatch, torch.Tensor], cfg: PretrainConfig,
               optimizer: torch.optim.Optimizer, augment_cfg: Optional[AugmentConfig] = None,
               pseudo_table: Optional[PseudoLabelTable] = None,
               generator: Optional[torch.Generator] = None) -> StepResult:
    """
    One AdvCL update: build views (attacks included), compute the objective, step the optimizer.

    Raises:
        StateError: lambda > 0 without a pseudo-label table or without sample indices.
        TrainingError: the loss is not finite; no update is applied.
    """
    if isinstance(batch, LabeledBatch):
        x, indices = batch.images, batch.indices
    else:
        x, indices = batch, None
    pseudo_labels = delta_ce = None
    if cfg.lambda_ce > 0:
        if pseudo_table is None:
            raise StateError("lambda > 0 requires a pseudo-label table; run 'cluster' first or set lambda to 0.")
        if indices is None:
            raise StateError("lambda > 0 requires batches that carry dataset indices.")
        pseudo_labels = pseudo_table.labels_for(indices, model.pseudo_head_sizes)

    bundle = build_view_bundle(model, x, cfg, augment_cfg, generator)
    if pseudo_labels is not None:
        heads = list(range(len(pseudo_labels)))
        delta_ce = adv_ce(model, x, pseudo_labels, cfg.budget, heads, generator, cfg.attack_bn_mode)

    model.train()
    total, parts = advcl_objective(model, bundle, cfg, x, delta_ce, pseudo_labels)
    _check_finite(total, "AdvCL loss")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepResult(total.item(), parts["cl"].item(), parts["ce"].item(), bundle, delta_ce)


def simclr_step(model: RobustModel, batch: Union[LabeledBatch, torch.Tensor], cfg: PretrainConfig,
                optimizer: torch.optim.Optimizer, augment_cfg: Optional[AugmentConfig] = None,
                generator: Optional[torch.Generator] = None) -> StepResult:
    """Two augmented views, route ``normal``, no attacks."""
    x = batch.images if isinstance(batch, LabeledBatch) else batch
    t1x = augment(x, augment_cfg, generator)
    t2x = augment(x, augment_cfg, generator)
    bundle = ViewBundle([t1x, t2x], [BNRoute.NORMAL, BNRoute.NORMAL], ["t1x", "t2x"])
    model.train()
    loss = contrastive_view_loss(model, bundle.views, bundle.routes, cfg.temperature)
    _check_finite(loss, "SimCLR loss")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepResult(loss.item(), loss.item(), 0.0, bundle)


def supervised_at_step(model: RobustModel, batch: LabeledBatch, cfg: SupervisedATConfig,
                       optimizer: torch.optim.Optimizer,
                       generator: Optional[torch.Generator] = None) -> Dict[str, float]:
    """Min-max CE step; the clean loss is recorded on the same batch without touching BN buffers."""
    delta = eval_attack(model, batch, cfg.budget, generator, BNRoute.NORMAL, cfg.attack_bn_mode)
    model.train()
    with torch.no_grad(), preserved_buffers(model):
        clean = F.cross_entropy(model.forward_classifier(batch.images), batch.labels)
    robust = F.cross_entropy(model.forward_classifier(perturb(batch.images, delta)), batch.labels)
    _check_finite(robust, "adversarial CE")
    optimizer.zero_grad(set_to_none=True)
    robust.backward()
    optimizer.step()
    return {"loss": robust.item(), "clean_loss": clean.item(),
            "delta_linf": delta.abs().max().item() if delta.numel() else 0.0}


# === Shared training driver ===

@dataclass
class TrainingResult:
    model: RobustModel
    checkpoint: Path
    metrics_path: Path
    history: List[Dict[str, float]] = field(default_factory=list)


def fit_encoder_config(encoder_cfg: Optional[EncoderConfig], dataset: ImageDataset) -> EncoderConfig:
    """Copies the dataset's channel count and resolution into the encoder config."""
    encoder_cfg = encoder_cfg or EncoderConfig()
    return encoder_cfg.copy(update={"input_channels": dataset.channels, "image_size": dataset.image_size})


def _plain_state(state: Dict) -> Dict:
    """Scheduler state with Counter values turned into dicts so checkpoints load with weights_only."""
    return {k: dict(v) if isinstance(v, Counter) else v for k, v in state.items()}


def _drop_last(dataset: ImageDataset, batch_size: int) -> bool:
    return len(dataset) > batch_size


def _run_epochs(kind: str, model: RobustModel, optimizer, scheduler, per_step_schedule: bool,
                dataset: ImageDataset, *, epochs: int, batch_size: int, seed: int, checkpoint_every: int,
                step_fn: Callable[[LabeledBatch], Dict[str, float]], generator: torch.Generator,
                output_dir: Union[str, Path], config_hash: str, extra: Dict, device: torch.device,
                resume_from: Optional[Union[str, Path]] = None) -> TrainingResult:
    output_dir = ensure_dir(output_dir)
    metrics_path = output_dir / "metrics.jsonl"
    start_epoch, history = 0, []

    if resume_from is not None:
        payload = read_checkpoint(resume_from)
        state = payload.get("training_state")
        if state is None or state.get("kind") != kind:
            raise StateError(f"'{resume_from}' holds no resumable {kind} state.")
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        if isinstance(getattr(scheduler, "milestones", None), dict):
            scheduler.milestones = Counter(scheduler.milestones)
        generator.set_state(state["generator"])
        start_epoch = int(state["epoch"])
        history = list(state["history"])
        status(f"Resuming {kind} from '{resume_from}' at epoch {start_epoch}.")
    metrics_path.write_text("")
    for record in history:
        append_jsonl(metrics_path, record)

    def training_state(epoch: int) -> Dict:
        return {
            "kind": kind,
            "epoch": epoch,
            "optimizer": optimizer.state_dict(),
            "scheduler": _plain_state(scheduler.state_dict()),
            "generator": generator.get_state(),
            "history": history,
        }

    last_good = save_checkpoint(model, output_dir / "last.pt", config_hash, extra, training_state(start_epoch))
    drop_last = _drop_last(dataset, batch_size)
    for epoch in range(start_epoch, epochs):
        sums: Dict[str, float] = defaultdict(float)
        steps = 0
        lr = optimizer.param_groups[0]["lr"]
        for batch in dataset.batches(batch_size, shuffle=True, seed=seed, epoch=epoch, drop_last=drop_last):
            try:
                parts = step_fn(batch.to(device))
            except (TrainingError, AttackError) as e:
                raise TrainingError(f"{kind} epoch {epoch} step {steps}: {e} Last good checkpoint: '{last_good}'.",
                                    last_good_checkpoint=last_good) from e
            for key, value in parts.items():
                sums[key] += value
            steps += 1
            if per_step_schedule:
                scheduler.step()
        if not per_step_schedule:
            scheduler.step()
        record = {"epoch": epoch, "lr": lr, "steps": steps}
        record.update({key: value / max(steps, 1) for key, value in sums.items()})
        history.append(record)
        append_jsonl(metrics_path, record)
        last_good = save_checkpoint(model, output_dir / "last.pt", config_hash, extra, training_state(epoch + 1))
        if (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(model, output_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.pt", config_hash, extra,
                            training_state(epoch + 1))
        status(f"[{kind}] epoch {epoch + 1}/{epochs} loss={record.get('loss', float('nan')):.4f} lr={lr:.4g}")

    final = save_checkpoint(model, output_dir / "final.pt", config_hash, extra)
    status(f"[{kind}] finished; checkpoint written to '{final}'.")
    return TrainingResult(model, final, metrics_path, history)


def _pretrain_optimizer(model: RobustModel, cfg: PretrainConfig, steps_per_epoch: int):
    head_params = list(model.pseudo_heads.parameters())
    head_ids = {id(p) for p in head_params}
    groups = [{"params": [p for p in model.parameters() if id(p) not in head_ids]}]
    if head_params:
        groups.append({"params": head_params, "lr": cfg.pseudo_head_lr or cfg.lr})
    optimizer = SGD(groups, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    # LambdaLR multiplies each group's base lr, so the pseudo-head group keeps its own scale.
    scheduler = LambdaLR(optimizer, lambda step: warmup_cosine_lr(step / steps_per_epoch, cfg) / cfg.lr)
    return optimizer, scheduler


def _steps_per_epoch(dataset: ImageDataset, batch_size: int) -> int:
    n = len(dataset)
    return n // batch_size if _drop_last(dataset, batch_size) else max(1, math.ceil(n / batch_size))


# === Entry points ===

def pretrain(cfg: PretrainConfig, dataset: ImageDataset, encoder_cfg: Optional[EncoderConfig] = None,
             augment_cfg: Optional[AugmentConfig] = None, pseudo_table: Optional[PseudoLabelTable] = None,
             output_dir: Union[str, Path] = "artifacts/pretrain", resume_from: Optional[Union[str, Path]] = None,
             device: Union[str, torch.device] = "cpu") -> TrainingResult:
    """
    AdvCL pretraining: ``epochs`` passes of advcl_step under the warm-up + cosine schedule.

    Args:
        cfg (PretrainConfig): objective, view recipe, attack budget and optimizer settings.
        dataset (ImageDataset): unlabeled use of the training split; indices key the pseudo table.
        pseudo_table (Optional[PseudoLabelTable]): required when ``cfg.lambda_ce > 0``.
        resume_from: a ``last.pt`` or periodic checkpoint written by a previous run.

    Returns:
        TrainingResult: model, final checkpoint path, metrics path and per-epoch history.

    Raises:
        StateError: lambda > 0 and no pseudo table, or the table does not cover the dataset.
        TrainingError: non-finite loss or attack gradient; carries the last good checkpoint.
    """
    device = resolve_device(device)
    head_sizes: List[int] = []
    if cfg.lambda_ce > 0:
        if pseudo_table is None:
            raise StateError("lambda > 0 requires a pseudo-label table; run 'cluster' first or set lambda to 0.")
        if len(pseudo_table) != len(dataset):
            raise StateError(f"Pseudo-label table covers {len(pseudo_table)} samples, dataset has {len(dataset)}.")
        head_sizes = list(cfg.k_list)
        missing = sorted(set(head_sizes) - set(pseudo_table.k_list))
        if missing:
            raise StateError(f"Pseudo-label table lacks K={missing}; it holds K={pseudo_table.k_list}.")

    seed_everything(cfg.seed)
    model = RobustModel(fit_encoder_config(encoder_cfg, dataset), pseudo_head_sizes=head_sizes).to(device)
    optimizer, scheduler = _pretrain_optimizer(model, cfg, _steps_per_epoch(dataset, cfg.batch_size))
    generator = make_generator(cfg.seed)
    status(f"AdvCL pretraining: recipe={ViewRecipe(cfg.recipe).value}, lambda={cfg.lambda_ce}, "
           f"K={head_sizes or '-'}, epochs={cfg.epochs}, n={len(dataset)}.")

    def step(batch: LabeledBatch) -> Dict[str, float]:
        return advcl_step(model, batch, cfg, optimizer, augment_cfg, pseudo_table, generator).metrics()

    extra = {"stage": "pretrain", "objective": "advcl", "recipe": ViewRecipe(cfg.recipe).value,
             "pseudo_table": getattr(pseudo_table, "fingerprint", None)}
    return _run_epochs("advcl", model, optimizer, scheduler, True, dataset, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=cfg.seed, checkpoint_every=cfg.checkpoint_every,
                       step_fn=step, generator=generator, output_dir=output_dir,
                       config_hash=json_fingerprint(cfg.dict()), extra=extra, device=device,
                       resume_from=resume_from)


def simclr_pretrain(cfg: PretrainConfig, dataset: ImageDataset, encoder_cfg: Optional[EncoderConfig] = None,
                    augment_cfg: Optional[AugmentConfig] = None,
                    output_dir: Union[str, Path] = "artifacts/simclr", resume_from: Optional[Union[str, Path]] = None,
                    device: Union[str, torch.device] = "cpu") -> TrainingResult:
    """
    Standard SimCLR on the single-BN twin, with the same optimizer and schedule as AdvCL;
    ``lambda``, budget and recipe are unused.
    """
    device = resolve_device(device)
    seed_everything(cfg.seed)
    model = RobustModel(fit_encoder_config(encoder_cfg, dataset).copy(update={"tri_bn": False})).to(device)
    optimizer, scheduler = _pretrain_optimizer(model, cfg, _steps_per_epoch(dataset, cfg.batch_size))
    generator = make_generator(cfg.seed)
    status(f"SimCLR pretraining (single BN): epochs={cfg.epochs}, n={len(dataset)}.")

    def step(batch: LabeledBatch) -> Dict[str, float]:
        return simclr_step(model, batch, cfg, optimizer, augment_cfg, generator).metrics()

    return _run_epochs("simclr", model, optimizer, scheduler, True, dataset, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=cfg.seed, checkpoint_every=cfg.checkpoint_every,
                       step_fn=step, generator=generator, output_dir=output_dir,
                       config_hash=json_fingerprint(cfg.dict()), extra={"stage": "pretrain", "objective": "simclr"},
                       device=device, resume_from=resume_from)


def supervised_at(cfg: SupervisedATConfig, dataset: ImageDataset, encoder_cfg: Optional[EncoderConfig] = None,
                  output_dir: Union[str, Path] = "artifacts/supervised_at",
                  resume_from: Optional[Union[str, Path]] = None,
                  device: Union[str, torch.device] = "cpu") -> TrainingResult:
    """Min-max CE training of encoder and classifier; ``epsilon = 0`` is plain supervised training."""
    device = resolve_device(device)
    seed_everything(cfg.seed)
    model = RobustModel(fit_encoder_config(encoder_cfg, dataset), num_classes=dataset.num_classes).to(device)
    optimizer = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    scheduler = MultiStepLR(optimizer, milestones=cfg.milestones, gamma=cfg.gamma)
    generator = make_generator(cfg.seed)
    status(f"Supervised AT: epsilon={cfg.budget.epsilon:.4g}, steps={cfg.budget.steps}, epochs={cfg.epochs}.")

    def step(batch: LabeledBatch) -> Dict[str, float]:
        return supervised_at_step(model, batch, cfg, optimizer, generator)

    return _run_epochs("supervised_at", model, optimizer, scheduler, False, dataset, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=cfg.seed, checkpoint_every=cfg.checkpoint_every,
                       step_fn=step, generator=generator, output_dir=output_dir,
                       config_hash=json_fingerprint(cfg.dict()),
                       extra={"stage": "pretrain", "objective": "supervised_at"}, device=device,
                       resume_from=resume_from)
