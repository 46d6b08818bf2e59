"""Command-line entry point: ``advcl <subcommand> [flags]``."""
import argparse
import sys
from typing import Any, Dict, List, Optional

import yaml

from .exceptions import AdvCLToolkitError
from .models import AblationKind, AttackInit, FinetuneMode, ViewRecipe
from .toolkit import AdvCLToolkit
from .utils import set_verbose

# Stage section whose attack budget --eps / --steps / --step-size / --attack-init override.
_BUDGET_SECTION = {
    "pretrain": "pretrain",
    "supervised-at": "supervised_at",
    "finetune": "finetune",
    "eval": "evaluate",
    "analyze": "evaluate",
    "ablate": "pretrain",
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file (flat dotted or nested keys).")
    parser.add_argument("--seed", type=int, help="Run seed; copied to every stage seed not set explicitly.")
    parser.add_argument("--artifact-root", help="Output root (default: $ADVCL_ARTIFACT_ROOT or ./artifacts).")
    parser.add_argument("--dataset", help="Dataset id: synthetic, cifar10, cifar100, stl10.")
    parser.add_argument("--data-root", help="Directory with the dataset files.")
    parser.add_argument("--device", help="torch device, e.g. cpu or cuda:0.")
    parser.add_argument("--eps", help="Attack radius, e.g. 0.031 or 8/255.")
    parser.add_argument("--steps", type=int, help="PGD steps.")
    parser.add_argument("--step-size", help="PGD step size, e.g. 2/255.")
    parser.add_argument("--attack-init", choices=[i.value for i in AttackInit], help="PGD starting point.")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key, e.g. --set pretrain.epochs=5 (repeatable).")
    parser.add_argument("--no-cache", action="store_true", help="Recompute even if a completed run exists.")
    parser.add_argument("--quiet", action="store_true", help="Silence status lines.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advcl", description="Adversarial contrastive pretraining toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="AdvCL pretraining.")
    _common(p)
    p.add_argument("--pseudo-table", help="Pseudo-label table from 'cluster' (needed when lambda > 0).")
    p.add_argument("--recipe", choices=[r.value for r in ViewRecipe], help="Contrastive view recipe.")

    p = sub.add_parser("simclr", help="Standard SimCLR pretraining (f_pre and non-robust baseline).")
    _common(p)

    p = sub.add_parser("supervised-at", help="Supervised min-max adversarial training baseline.")
    _common(p)

    p = sub.add_parser("cluster", help="k-means pseudo labels from a pretrained encoder.")
    _common(p)
    p.add_argument("--fpre-ckpt", required=True, help="Encoder checkpoint used as f_pre.")
    p.add_argument("--k-list", help="Comma-separated cluster counts (default: pretrain.k_list).")

    p = sub.add_parser("finetune", help="SLF / ALF / AFF finetuning of a pretrained encoder.")
    _common(p)
    p.add_argument("--ckpt", required=True, help="Pretrained checkpoint.")
    p.add_argument("--mode", choices=[m.value for m in FinetuneMode], help="Finetuning protocol.")

    p = sub.add_parser("eval", help="SA and RA sweep of a finetuned checkpoint.")
    _common(p)
    p.add_argument("--ckpt", required=True, help="Checkpoint with a classifier head.")

    p = sub.add_parser("analyze", help="Diagnostics: frequency dumps, FIM, loss landscape.")
    _common(p)
    p.add_argument("what", choices=["freq", "fim", "landscape"])
    p.add_argument("--ckpt", help="Checkpoint (fim, landscape).")
    p.add_argument("--sign", choices=["min", "max"], help="FIM direction.")
    p.add_argument("--unit", type=int, help="FIM feature coordinate.")

    p = sub.add_parser("ablate", help="Ablation grids with SA / RA tables.")
    _common(p)
    p.add_argument("kind", choices=[k.value for k in AblationKind])
    p.add_argument("--recipes", help="'all' or comma-separated recipe ids (views ablation).")
    return parser


def _parse_value(raw: str) -> Any:
    return yaml.safe_load(raw)


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flat config overrides from CLI flags; flags win over config file keys."""
    overrides: Dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise AdvCLToolkitError(f"--set expects KEY=VALUE, got '{item}'.")
        overrides[key.strip()] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.dataset:
        overrides["dataset.name"] = args.dataset
    if args.data_root:
        overrides["dataset.root"] = args.data_root
    if args.device:
        overrides["device"] = args.device
    section = _BUDGET_SECTION.get(args.command)
    if section:
        if args.eps is not None:
            overrides[f"{section}.budget.epsilon"] = args.eps
        if args.steps is not None:
            overrides[f"{section}.budget.steps"] = args.steps
        if args.step_size is not None:
            overrides[f"{section}.budget.step_size"] = args.step_size
        if args.attack_init is not None:
            overrides[f"{section}.budget.init"] = args.attack_init
        if args.command == "eval" and (args.eps is not None or args.steps is not None):
            overrides["evaluate.eps_list"] = [0.0, args.eps] if args.eps is not None else None
            overrides["evaluate.steps_list"] = [args.steps] if args.steps is not None else None
            overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "recipe", None):
        overrides["pretrain.recipe"] = args.recipe
    if getattr(args, "mode", None):
        overrides["finetune.mode"] = args.mode
    if getattr(args, "sign", None):
        overrides["analysis.fim_sign"] = args.sign
    if getattr(args, "unit", None) is not None:
        overrides["analysis.fim_unit"] = args.unit
    return overrides


def run(args: argparse.Namespace) -> None:
    set_verbose(not args.quiet)
    toolkit = AdvCLToolkit.from_file(args.config, collect_overrides(args), args.artifact_root,
                                     use_cache=not args.no_cache)
    command = args.command
    if command == "pretrain":
        manifest = toolkit.pretrain(args.pseudo_table)
    elif command == "simclr":
        manifest = toolkit.simclr()
    elif command == "supervised-at":
        manifest = toolkit.supervised_at()
    elif command == "cluster":
        k_list = [int(k) for k in args.k_list.split(",")] if args.k_list else None
        manifest = toolkit.cluster(args.fpre_ckpt, k_list)
    elif command == "finetune":
        manifest = toolkit.finetune(args.ckpt)
    elif command == "eval":
        manifest = toolkit.evaluate(args.ckpt)
    elif command == "analyze":
        if args.what == "freq":
            manifest = toolkit.analyze_freq()
        elif not args.ckpt:
            raise AdvCLToolkitError(f"'analyze {args.what}' needs --ckpt.")
        elif args.what == "fim":
            manifest = toolkit.analyze_fim(args.ckpt)
        else:
            manifest = toolkit.analyze_landscape(args.ckpt)
    else:
        recipes: Optional[List[str]] = None
        if args.recipes and args.recipes != "all":
            recipes = [r.strip() for r in args.recipes.split(",")]
        print(toolkit.ablate(args.kind, recipes))
        return
    for name, path in manifest.outputs.items():
        print(f"{name}: {path}")


def main(argv: Optional[List[str]] = None) -> int:
    """Returns 0 on success, 1 on toolkit, I/O and runtime errors, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        run(args)
    except (AdvCLToolkitError, ValueError, OSError, RuntimeError) as e:
        print(f"Error [{type(e).__name__}]: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
