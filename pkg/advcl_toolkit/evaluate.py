"""Standard and robust accuracy, PGD sweep grids, and the obfuscated-gradient screen."""
import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from .attacks import eval_attack, perturb
from .data_pipeline import ImageDataset, LabeledBatch
from .models import BNRoute, EvalConfig, EvalReport, PerturbBudget, RAEntry
from .utils import ensure_dir, eval_mode, make_generator, parameter_hash, status, warn, write_json

# Models only need ``forward_classifier(x, route)``; RobustModel with a head attached qualifies.


def _batches(data: Union[ImageDataset, Iterable[LabeledBatch]], batch_size: int) -> Iterable[LabeledBatch]:
    if isinstance(data, ImageDataset):
        return data.batches(batch_size)
    return data


def _device_of(model) -> torch.device:
    try:
        return next(model.parameters()).device
    except StopIteration:
        return torch.device("cpu")


def eval_sa(model, dataset: Union[ImageDataset, Iterable[LabeledBatch]], batch_size: int = 128,
            route: Union[BNRoute, str] = BNRoute.NORMAL) -> float:
    """Fraction of argmax-correct predictions on clean inputs, in eval mode."""
    device = _device_of(model)
    correct = total = 0
    with eval_mode(model), torch.no_grad():
        for batch in _batches(dataset, batch_size):
            batch = batch.to(device)
            pred = model.forward_classifier(batch.images, route).argmax(dim=1)
            correct += (pred == batch.labels).sum().item()
            total += len(batch)
    return correct / total if total else 0.0


def eval_ra(model, dataset: Union[ImageDataset, Iterable[LabeledBatch]], budget: PerturbBudget,
            batch_size: int = 128, seed: int = 0, route: Union[BNRoute, str] = BNRoute.NORMAL) -> float:
    """Accuracy on x + delta, with delta from a fresh eval_attack per batch."""
    device = _device_of(model)
    generator = make_generator(seed)
    correct = total = 0
    with eval_mode(model):
        for batch in _batches(dataset, batch_size):
            batch = batch.to(device)
            delta = eval_attack(model, batch, budget, generator, route, bn_mode="eval")
            with torch.no_grad():
                pred = model.forward_classifier(perturb(batch.images, delta), route).argmax(dim=1)
            correct += (pred == batch.labels).sum().item()
            total += len(batch)
    return correct / total if total else 0.0


def screen_sweep(report: EvalReport, tolerance: float = 0.005, max_violations: int = 1) -> List[str]:
    """
    Flags signs of gradient masking: RA that rises with epsilon (fixed steps) or with steps
    (fixed epsilon > 0), and RA above SA. Up to ``max_violations`` rises of at most ``tolerance``
    are accepted per direction.
    """
    findings: List[str] = []
    eps_values = sorted({e.epsilon for e in report.ra_grid})
    step_values = sorted({e.steps for e in report.ra_grid})

    def check(series: List[tuple], axis: str, fixed: str) -> None:
        rises = [(a, b, rb - ra) for (a, ra), (b, rb) in zip(series, series[1:]) if rb > ra]
        if not rises:
            return
        large = [r for r in rises if r[2] > tolerance]
        if large or len(rises) > max_violations:
            worst = max(rises, key=lambda r: r[2])
            findings.append(
                f"RA increases with {axis} at {fixed} ({len(rises)} rise(s), largest +{worst[2]:.4f} "
                f"between {worst[0]:.4g} and {worst[1]:.4g}); possible obfuscated gradients."
            )

    for steps in step_values:
        series = [(e, report.ra(e, steps)) for e in eps_values]
        check(series, "epsilon", f"steps={steps}")
    for eps in eps_values:
        if eps == 0:
            continue
        series = [(s, report.ra(eps, s)) for s in step_values]
        check(series, "steps", f"epsilon={eps:.4g}")
    for entry in report.ra_grid:
        if entry.ra > report.sa + tolerance:
            findings.append(f"RA {entry.ra:.4f} exceeds SA {report.sa:.4f} at epsilon={entry.epsilon:.4g}, "
                            f"steps={entry.steps}.")
    return findings


def eval_sweep(model, dataset: ImageDataset, eps_list: Optional[Sequence[float]] = None,
               steps_list: Optional[Sequence[int]] = None, cfg: Optional[EvalConfig] = None) -> EvalReport:
    """
    RA over the grid eps_list x steps_list with the step size and init of ``cfg.budget``.

    The epsilon = 0 column is SA by definition and is not attacked.
    """
    cfg = cfg or EvalConfig()
    eps_list = list(cfg.eps_list if eps_list is None else eps_list)
    steps_list = list(cfg.steps_list if steps_list is None else steps_list)
    sa = eval_sa(model, dataset, cfg.batch_size)
    grid: List[RAEntry] = []
    for eps in eps_list:
        for steps in steps_list:
            if eps == 0:
                ra = sa
            else:
                budget = cfg.budget.copy(update={"epsilon": float(eps), "steps": int(steps)})
                ra = eval_ra(model, dataset, budget, cfg.batch_size, cfg.seed)
            grid.append(RAEntry(epsilon=float(eps), steps=int(steps), ra=ra))
            status(f"  epsilon={eps:.4g} steps={steps}: RA={ra:.4f}")
    report = EvalReport(
        sa=sa,
        ra_grid=grid,
        dataset=f"{dataset.name}/{dataset.split}",
        model_fingerprint=parameter_hash(model),
        budget={"step_size": cfg.budget.step_size, "init": cfg.budget.init.value, "seed": cfg.seed},
    )
    report.warnings = screen_sweep(report, cfg.violation_tolerance, cfg.max_violations)
    for message in report.warnings:
        warn(message)
    return report


def write_report(report: EvalReport, output_dir: Union[str, Path], write_plots: bool = True) -> Dict[str, Path]:
    """Writes report.json, report.csv and (optionally) ra_vs_eps.png / ra_vs_steps.png."""
    output_dir = ensure_dir(output_dir)
    outputs = {"report": write_json(output_dir / "report.json", report.dict())}
    csv_path = output_dir / "report.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epsilon", "steps", "ra", "sa"])
        for entry in report.ra_grid:
            writer.writerow([f"{entry.epsilon:.6g}", entry.steps, f"{entry.ra:.6f}", f"{report.sa:.6f}"])
    outputs["table"] = csv_path
    if write_plots and report.ra_grid:
        outputs.update(_plot_sweeps(report, output_dir))
    return outputs


def _plot_sweeps(report: EvalReport, output_dir: Path) -> Dict[str, Path]:
    eps_values = sorted({e.epsilon for e in report.ra_grid})
    step_values = sorted({e.steps for e in report.ra_grid})
    paths = {}

    fig, ax = plt.subplots(figsize=(5, 4))
    for steps in step_values:
        ax.plot([e * 255 for e in eps_values], [report.ra(e, steps) for e in eps_values], marker="o",
                label=f"{steps} steps")
    ax.set_xlabel("epsilon (x/255)")
    ax.set_ylabel("robust accuracy")
    ax.legend()
    fig.tight_layout()
    paths["ra_vs_eps"] = output_dir / "ra_vs_eps.png"
    fig.savefig(paths["ra_vs_eps"])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    for eps in eps_values:
        if eps == 0:
            continue
        ax.plot(step_values, [report.ra(eps, s) for s in step_values], marker="o", label=f"eps={eps * 255:.3g}/255")
    ax.set_xlabel("PGD steps")
    ax.set_ylabel("robust accuracy")
    if len(eps_values) > 1:
        ax.legend()
    fig.tight_layout()
    paths["ra_vs_steps"] = output_dir / "ra_vs_steps.png"
    fig.savefig(paths["ra_vs_steps"])
    plt.close(fig)
    return paths
