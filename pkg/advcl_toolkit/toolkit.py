import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import yaml
from pydantic.v1 import BaseModel
from pydantic.v1 import ValidationError as PydanticValidationError

from .analysis import dump_frequency_views, fim, loss_landscape, save_fim, save_landscape
from .clusterfit import build_pseudo_tables, extract_features, load_pseudo_table, save_pseudo_table
from .data_pipeline import ImageDataset, load_dataset, match_resolution
from .evaluate import eval_ra, eval_sa, eval_sweep, write_report
from .exceptions import ConfigurationError, StateError
from .finetune import finetune
from .models import (AblationKind, ExperimentConfig, FinetuneMode, RunManifest, Stage, ViewRecipe)
from .network import load_checkpoint
from .pretrain import pretrain, simclr_pretrain, supervised_at
from .utils import (artifact_root, code_fingerprint, ensure_dir, error, file_fingerprint, json_fingerprint,
                    read_json, status, write_json)

PathLike = Union[str, Path]

# Sections whose ``seed`` follows the run seed unless set explicitly.
SEEDED_SECTIONS = ("dataset", "augment", "pretrain", "cluster", "finetune", "supervised_at", "evaluate")


# === Configuration files ===

def _schema_keys(model_cls, prefix: str = "") -> Dict[str, str]:
    """Maps every accepted flat key (field names and aliases) to its canonical dotted field path."""
    keys: Dict[str, str] = {}
    for name, f in model_cls.__fields__.items():
        nested = isinstance(f.outer_type_, type) and issubclass(f.outer_type_, BaseModel)
        for spelled in {name, f.alias}:
            if nested:
                for sub, canonical in _schema_keys(f.outer_type_).items():
                    keys[f"{prefix}{spelled}.{sub}"] = f"{prefix}{name}.{canonical}"
            else:
                keys[f"{prefix}{spelled}"] = f"{prefix}{name}"
    return keys


CONFIG_KEYS = _schema_keys(ExperimentConfig)

# Fully materialized defaults (by field name) that flat overrides are merged onto, so a partial
# override of a nested budget keeps the defaults of the section it belongs to.
_DEFAULTS: Dict[str, Any] = json.loads(ExperimentConfig().json())


def flatten_config(mapping: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested mappings become dotted keys; dotted keys pass through."""
    flat: Dict[str, Any] = {}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, f"{full}."))
        else:
            flat[full] = value
    return flat


def _unflatten(flat: Dict[str, Any], base: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Writes dotted keys into a copy of ``base``; sibling fields of a nested section keep their base values."""
    nested: Dict[str, Any] = json.loads(json.dumps(base)) if base else {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def resolve_config(flat: Dict[str, Any]) -> ExperimentConfig:
    """
    Builds an ExperimentConfig from flat dotted keys.

    Raises:
        ConfigurationError: unknown keys or values the config models reject.
    """
    canonical: Dict[str, Any] = {}
    unknown = [k for k in flat if k not in CONFIG_KEYS]
    if unknown:
        raise ConfigurationError(f"Unknown config key(s): {', '.join(sorted(unknown))}.")
    for key, value in flat.items():
        canonical[CONFIG_KEYS[key]] = value
    if "seed" in canonical:
        for section in SEEDED_SECTIONS:
            canonical.setdefault(f"{section}.seed", canonical["seed"])
    try:
        return ExperimentConfig.parse_obj(_unflatten(canonical, _DEFAULTS))
    except PydanticValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def load_config(path: Optional[PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Reads a YAML config (flat dotted or nested keys) and applies ``overrides`` on top."""
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file '{path}' does not exist.")
        try:
            with open(path) as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Config file '{path}' is not valid YAML: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"Config file '{path}' must hold a mapping at the top level.")
        flat = flatten_config(loaded)
    flat.update(flatten_config(overrides or {}))
    return resolve_config(flat)


def _to_plain(model: BaseModel) -> Dict[str, Any]:
    return json.loads(model.json())


class AdvCLToolkit:
    """
    Runs the AdvCL pipeline stages over one resolved ExperimentConfig.

    Every stage writes its outputs into ``<artifact_root>/<command>/<cache key>/`` together with a
    ``manifest.json`` (RunManifest). The cache key hashes the stage command, the config sections
    the stage reads and the fingerprints of its input files, so rerunning a completed stage with the
    same inputs returns the recorded outputs without recomputation.
    """

    def __init__(self, config: Optional[ExperimentConfig] = None, artifact_root_dir: Optional[PathLike] = None,
                 use_cache: bool = True):
        """
        Args:
            config (Optional[ExperimentConfig]): resolved configuration; defaults everywhere when omitted.
            artifact_root_dir (Optional[PathLike]): output root. Falls back to ADVCL_ARTIFACT_ROOT,
                then ./artifacts.
            use_cache (bool): reuse completed stage outputs.
        """
        self.config = config or ExperimentConfig()
        self.root = artifact_root(artifact_root_dir)
        self.use_cache = use_cache
        self.device = self.config.device
        self._datasets: Dict[str, ImageDataset] = {}
        print(f"AdvCLToolkit initialized: dataset '{self.config.dataset.name}', artifacts under '{self.root}'.")

    @classmethod
    def from_file(cls, path: Optional[PathLike] = None, overrides: Optional[Dict[str, Any]] = None,
                  artifact_root_dir: Optional[PathLike] = None, use_cache: bool = True) -> "AdvCLToolkit":
        return cls(load_config(path, overrides), artifact_root_dir, use_cache)

    def with_overrides(self, overrides: Dict[str, Any]) -> "AdvCLToolkit":
        """A toolkit sharing root and cache whose config has ``overrides`` (flat dotted keys) applied."""
        flat = flatten_config(_to_plain(self.config))
        flat.update(flatten_config(overrides))
        clone = AdvCLToolkit.__new__(AdvCLToolkit)
        clone.config = resolve_config(flat)
        clone.root, clone.use_cache, clone.device = self.root, self.use_cache, clone.config.device
        clone._datasets = self._datasets if _to_plain(clone.config.dataset) == _to_plain(self.config.dataset) else {}
        return clone

    # --- data ---

    def dataset(self, split: str = "train") -> ImageDataset:
        if split not in self._datasets:
            cfg = self.config.dataset
            self._datasets[split] = load_dataset(cfg.name, split, cfg.root, cfg)
        return self._datasets[split]

    # --- stage plumbing ---

    def _run_stage(self, stage: Stage, command: str, sections: Dict[str, Any], inputs: Dict[str, PathLike],
                   body: Callable[[Path], Dict[str, Path]]) -> RunManifest:
        input_fps = {name: file_fingerprint(path) for name, path in inputs.items()}
        cache_key = json_fingerprint({"command": command, "config": sections, "inputs": input_fps})
        run_dir = ensure_dir(self.root / command / cache_key[:16])
        manifest_path = run_dir / "manifest.json"

        if self.use_cache and manifest_path.is_file():
            previous = RunManifest.parse_obj(read_json(manifest_path))
            if previous.status == "complete" and all(Path(p).exists() for p in previous.outputs.values()):
                status(f"[{command}] cached run {previous.run_id} reused from '{run_dir}'.")
                return previous

        now = datetime.now(timezone.utc)
        manifest = RunManifest(
            run_id=f"{command}-{cache_key[:12]}-{now.strftime('%Y%m%dT%H%M%S%f')}",
            stage=stage,
            command=command,
            config=_to_plain(self.config),
            seed=self.config.seed,
            code_fingerprint=code_fingerprint(),
            cache_key=cache_key,
            inputs={k: str(v) for k, v in inputs.items()},
            created_at=now.isoformat(),
        )
        write_json(manifest_path, manifest.dict())
        try:
            outputs = body(run_dir)
        except Exception as e:
            manifest.status = "failed"
            write_json(manifest_path, manifest.dict())
            error(f"[{command}] failed: {e}")
            raise
        manifest.outputs = {k: str(v) for k, v in outputs.items()}
        manifest.status = "complete"
        write_json(manifest_path, manifest.dict())
        status(f"[{command}] complete; manifest written to '{manifest_path}'.")
        return manifest

    def _data_sections(self) -> Dict[str, Any]:
        return {"dataset": _to_plain(self.config.dataset), "device": self.config.device}

    def _eval_split(self, model) -> ImageDataset:
        return match_resolution(self.dataset("test"), model.config.input_channels, model.config.image_size,
                                self.config.finetune.resize_inputs)

    # --- pretraining stages ---

    def pretrain(self, pseudo_table: Optional[PathLike] = None) -> RunManifest:
        """AdvCL pretraining; ``pseudo_table`` is required when lambda > 0."""
        cfg = self.config.pretrain
        if cfg.lambda_ce > 0 and pseudo_table is None:
            raise StateError("lambda > 0 requires a pseudo-label table (--pseudo-table); run 'cluster' first "
                             "or set pretrain.lambda to 0.")
        sections = {**self._data_sections(), "encoder": _to_plain(self.config.encoder),
                    "augment": _to_plain(self.config.augment), "pretrain": _to_plain(cfg)}
        inputs = {"pseudo_table": pseudo_table} if cfg.lambda_ce > 0 else {}

        def body(run_dir: Path) -> Dict[str, Path]:
            table = load_pseudo_table(pseudo_table) if cfg.lambda_ce > 0 else None
            result = pretrain(cfg, self.dataset("train"), self.config.encoder, self.config.augment, table,
                              run_dir, device=self.device)
            return {"checkpoint": result.checkpoint, "metrics": result.metrics_path}

        return self._run_stage(Stage.PRETRAIN, "pretrain", sections, inputs, body)

    def simclr(self) -> RunManifest:
        cfg = self.config.pretrain
        sections = {**self._data_sections(), "encoder": _to_plain(self.config.encoder),
                    "augment": _to_plain(self.config.augment),
                    "pretrain": {k: v for k, v in _to_plain(cfg).items()
                                 if k not in ("lambda_ce", "budget", "recipe", "k_list", "frequency_radius",
                                              "clamp_frequency_views", "attack_bn_mode", "pseudo_head_lr")}}

        def body(run_dir: Path) -> Dict[str, Path]:
            result = simclr_pretrain(cfg, self.dataset("train"), self.config.encoder, self.config.augment,
                                     run_dir, device=self.device)
            return {"checkpoint": result.checkpoint, "metrics": result.metrics_path}

        return self._run_stage(Stage.PRETRAIN, "simclr", sections, {}, body)

    def supervised_at(self) -> RunManifest:
        cfg = self.config.supervised_at
        sections = {**self._data_sections(), "encoder": _to_plain(self.config.encoder),
                    "supervised_at": _to_plain(cfg)}

        def body(run_dir: Path) -> Dict[str, Path]:
            result = supervised_at(cfg, self.dataset("train"), self.config.encoder, run_dir, device=self.device)
            return {"checkpoint": result.checkpoint, "metrics": result.metrics_path}

        return self._run_stage(Stage.PRETRAIN, "supervised-at", sections, {}, body)

    def cluster(self, fpre_ckpt: PathLike, k_list: Optional[Sequence[int]] = None) -> RunManifest:
        """Extracts f_pre features of the training split and fits one k-means per K."""
        cfg = self.config.cluster
        k_list = sorted({int(k) for k in (k_list or self.config.pretrain.k_list)})
        n = len(self.dataset("train"))
        if k_list[-1] > n:
            raise ConfigurationError(f"K={k_list[-1]} exceeds the {n} training samples; lower pretrain.k_list "
                                     f"(or ablation.k_lists) or use a larger dataset.")
        sections = {**self._data_sections(), "cluster": _to_plain(cfg), "k_list": k_list}

        def body(run_dir: Path) -> Dict[str, Path]:
            features = extract_features(fpre_ckpt, self.dataset("train"), self.device, cfg.batch_size)
            table = build_pseudo_tables(features, k_list, cfg.seed, cfg.max_iter, cfg.tol, cfg.max_workers)
            return {"pseudo_table": save_pseudo_table(table, run_dir / "pseudo_labels.npz")}

        return self._run_stage(Stage.CLUSTER, "cluster", sections, {"fpre_ckpt": fpre_ckpt}, body)

    def prepare_pseudo_table(self, k_list: Optional[Sequence[int]] = None,
                             fpre_ckpt: Optional[PathLike] = None) -> Path:
        """Pseudo-label table for ``k_list``; trains the SimCLR f_pre first when none is given."""
        if fpre_ckpt is None:
            fpre_ckpt = self.simclr().outputs["checkpoint"]
        return Path(self.cluster(fpre_ckpt, k_list).outputs["pseudo_table"])

    # --- downstream stages ---

    def finetune(self, ckpt: PathLike, mode: Optional[Union[FinetuneMode, str]] = None) -> RunManifest:
        cfg = self.config.finetune
        if mode is not None:
            cfg = cfg.copy(update={"mode": FinetuneMode(mode)})
        sections = {**self._data_sections(), "finetune": _to_plain(cfg)}

        def body(run_dir: Path) -> Dict[str, Path]:
            result = finetune(ckpt, self.dataset("train"), cfg, val_dataset=self.dataset("test"),
                              output_dir=run_dir, device=self.device)
            return {"checkpoint": result.checkpoint, "metrics": result.metrics_path}

        return self._run_stage(Stage.FINETUNE, f"finetune-{FinetuneMode(cfg.mode).value}", sections,
                               {"ckpt": ckpt}, body)

    def evaluate(self, ckpt: PathLike) -> RunManifest:
        """SA and the RA sweep of a checkpoint with a classifier head, on the test split."""
        cfg = self.config.evaluate
        sections = {**self._data_sections(), "evaluate": _to_plain(cfg)}

        def body(run_dir: Path) -> Dict[str, Path]:
            model, _ = load_checkpoint(ckpt, self.device)
            if model.classifier is None:
                raise StateError(f"Checkpoint '{ckpt}' has no classifier head; finetune it first.")
            report = eval_sweep(model, self._eval_split(model), cfg=cfg)
            status(f"SA={report.sa:.4f}; {len(report.ra_grid)} RA cells; {len(report.warnings)} warning(s).")
            return write_report(report, run_dir, cfg.write_plots)

        return self._run_stage(Stage.EVAL, "eval", sections, {"ckpt": ckpt}, body)

    # --- analysis stages ---

    def analyze_freq(self) -> RunManifest:
        cfg = self.config.analysis
        sections = {**self._data_sections(), "radius": self.config.pretrain.frequency_radius,
                    "freq_samples": cfg.freq_samples}

        def body(run_dir: Path) -> Dict[str, Path]:
            images = self.dataset("test").images[:cfg.freq_samples]
            return dump_frequency_views(images, self.config.pretrain.frequency_radius, run_dir)

        return self._run_stage(Stage.ANALYZE, "analyze-freq", sections, {}, body)

    def analyze_fim(self, ckpt: PathLike) -> RunManifest:
        cfg = self.config.analysis
        sections = {**self._data_sections(), "analysis": _to_plain(cfg)}

        def body(run_dir: Path) -> Dict[str, Path]:
            model, _ = load_checkpoint(ckpt, self.device)
            data = self._eval_split(model)
            if cfg.fim_sample >= len(data):
                raise ConfigurationError(f"analysis.fim_sample={cfg.fim_sample} but the test split has {len(data)} images.")
            x0 = data.images[cfg.fim_sample].to(self.device)
            result = fim(model, x0, cfg.fim_unit, cfg.fim_steps, cfg.fim_lr, cfg.fim_sign)
            outputs = save_fim(result, x0, run_dir)
            outputs["trajectory"] = write_json(run_dir / "fim_trajectory.json",
                                               {"unit": cfg.fim_unit, "sign": cfg.fim_sign.value,
                                                "trajectory": result.trajectory})
            return outputs

        return self._run_stage(Stage.ANALYZE, "analyze-fim", sections, {"ckpt": ckpt}, body)

    def analyze_landscape(self, ckpt: PathLike) -> RunManifest:
        cfg = self.config.analysis
        sections = {**self._data_sections(), "analysis": _to_plain(cfg),
                    "budget": _to_plain(self.config.evaluate.budget)}

        def body(run_dir: Path) -> Dict[str, Path]:
            model, _ = load_checkpoint(ckpt, self.device)
            if model.classifier is None:
                raise StateError(f"Checkpoint '{ckpt}' has no classifier head; finetune it first.")
            batch = next(self._eval_split(model).batches(cfg.landscape_batch_size)).to(self.device)
            grid = loss_landscape(model, batch, self.config.evaluate.budget, cfg.landscape_alphas,
                                  cfg.landscape_betas, cfg.landscape_seed)
            return save_landscape(grid, run_dir)

        return self._run_stage(Stage.ANALYZE, "analyze-landscape", sections, {"ckpt": ckpt}, body)

    # --- ablations ---

    def _score(self, finetuned_ckpt: PathLike) -> Tuple[float, float]:
        model, _ = load_checkpoint(finetuned_ckpt, self.device)
        data = self._eval_split(model)
        sa = eval_sa(model, data, self.config.evaluate.batch_size)
        ra = eval_ra(model, data, self.config.ablation.ra_budget, self.config.evaluate.batch_size,
                     self.config.evaluate.seed)
        return sa, ra

    def _pretrain_and_score(self, overrides: Dict[str, Any], table: Optional[Path],
                            modes: Sequence[FinetuneMode] = (FinetuneMode.SLF,)) -> List[Tuple[str, float, float]]:
        variant = self.with_overrides(overrides)
        ckpt = variant.pretrain(table if variant.config.pretrain.lambda_ce > 0 else None).outputs["checkpoint"]
        scores = []
        for mode in modes:
            finetuned = variant.finetune(ckpt, mode).outputs["checkpoint"]
            sa, ra = variant._score(finetuned)
            scores.append((FinetuneMode(mode).value, sa, ra))
        return scores

    def ablate(self, kind: Union[AblationKind, str], recipes: Optional[Sequence[Union[ViewRecipe, str]]] = None) -> Path:
        """
        Runs one ablation grid with shared seeds and writes ``ablation_<kind>.csv`` / ``.md``.

        Rows are written as they complete; completed cells come from the stage cache on rerun.

        Returns:
            Path: the CSV table.
        """
        kind = AblationKind(kind)
        ab, base = self.config.ablation, self.config.pretrain
        out_dir = ensure_dir(self.root / "ablations" / kind.value)
        rows: List[Dict[str, Any]] = []
        table_path = out_dir / f"ablation_{kind.value}.csv"

        def needs_table(lambda_ce: float, k_list: Sequence[int]) -> Optional[Path]:
            return self.prepare_pseudo_table(k_list) if lambda_ce > 0 else None

        def add(setting: str, mode: str, sa: float, ra: float, **extra) -> None:
            rows.append({"setting": setting, "finetune": mode, "sa": sa, "ra": ra, **extra})
            _write_table(rows, table_path, out_dir / f"ablation_{kind.value}.md", kind)

        if kind == AblationKind.VIEWS:
            chosen = [ViewRecipe(r) for r in (recipes or ab.recipes)]
            table = needs_table(base.lambda_ce, base.k_list)
            for recipe in chosen:
                status(f"[ablate views] {recipe.value}")
                for mode, sa, ra in self._pretrain_and_score({"pretrain.recipe": recipe.value}, table):
                    add(recipe.value, mode, sa, ra)
        elif kind == AblationKind.LAMBDA:
            table = needs_table(max(ab.lambdas, default=0.0), base.k_list)
            for lam in ab.lambdas:
                setting = "w/o ClusterFit" if lam == 0 else f"lambda={lam:g}, K={{{','.join(map(str, base.k_list))}}}"
                status(f"[ablate lambda] {setting}")
                for mode, sa, ra in self._pretrain_and_score({"pretrain.lambda_ce": lam}, table if lam > 0 else None):
                    add(setting, mode, sa, ra, **{"lambda": lam})
        elif kind == AblationKind.KLIST:
            if base.lambda_ce == 0:
                raise ConfigurationError("'ablate klist' needs pretrain.lambda > 0.")
            union = sorted({k for ks in ab.k_lists for k in ks})
            table = self.prepare_pseudo_table(union)
            for ks in ab.k_lists:
                setting = "K=" + ",".join(map(str, ks))
                status(f"[ablate klist] {setting}")
                for mode, sa, ra in self._pretrain_and_score({"pretrain.k_list": list(ks)}, table):
                    add(setting, mode, sa, ra)
        elif kind == AblationKind.BASELINE:
            wins = 0
            for seed in ab.seeds:
                # The dataset seed stays fixed so both arms and every seed see the same images.
                variant = self.with_overrides({"seed": seed, **{f"{s}.seed": seed for s in SEEDED_SECTIONS if s != "dataset"}})
                simclr_ckpt = variant.simclr().outputs["checkpoint"]
                table = variant.prepare_pseudo_table(base.k_list, simclr_ckpt) if base.lambda_ce > 0 else None
                advcl_ckpt = variant.pretrain(table).outputs["checkpoint"]
                ra_by_arm: Dict[str, float] = {}
                for setting, ckpt in (("SimCLR", simclr_ckpt), ("AdvCL", advcl_ckpt)):
                    status(f"[ablate baseline] {setting}, seed {seed}")
                    finetuned = variant.finetune(ckpt, FinetuneMode.SLF).outputs["checkpoint"]
                    sa, ra = variant._score(finetuned)
                    report = json.loads(Path(variant.evaluate(finetuned).outputs["report"]).read_text())
                    ra_by_arm[setting] = ra
                    add(setting, FinetuneMode.SLF.value, sa, ra, seed=seed, warnings=len(report.get("warnings", [])))
                wins += int(ra_by_arm["AdvCL"] > ra_by_arm["SimCLR"])
            status(f"[ablate baseline] AdvCL RA above SimCLR in {wins}/{len(ab.seeds)} seed(s).")
        else:
            table = needs_table(base.lambda_ce, base.k_list)
            modes = [FinetuneMode(m) for m in ab.finetune_modes]
            for mode, sa, ra in self._pretrain_and_score({}, table, modes):
                add(mode.upper(), mode, sa, ra)
        status(f"[ablate {kind.value}] {len(rows)} row(s) written to '{table_path}'.")
        return table_path


def _write_table(rows: List[Dict[str, Any]], csv_path: Path, md_path: Path, kind: AblationKind) -> None:
    columns = list(rows[0].keys())
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    lines = [f"# Ablation: {kind.value}", "", "| " + " | ".join(c.upper() if c in ("sa", "ra") else c for c in columns) + " |",
             "|" + "---|" * len(columns)]
    for row in rows:
        cells = [f"{100 * v:.2f}" if k in ("sa", "ra") else (f"{v:g}" if isinstance(v, float) else str(v))
                 for k, v in row.items()]
        lines.append("| " + " | ".join(cells) + " |")
    md_path.write_text("\n".join(lines) + "\n")
