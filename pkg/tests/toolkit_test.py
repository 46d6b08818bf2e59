import csv
import json
import os
from pathlib import Path

import pytest
import yaml

from advcl_toolkit import AdvCLToolkit, load_config
from advcl_toolkit.exceptions import ConfigurationError, StateError
from advcl_toolkit.models import AttackInit, ExperimentConfig, FinetuneMode, ViewRecipe
from advcl_toolkit.network import load_checkpoint, save_checkpoint
from advcl_toolkit.toolkit import CONFIG_KEYS, flatten_config, resolve_config

TINY = {
    "dataset.n": 16,
    "dataset.classes": 2,
    "dataset.image_size": 16,
    "encoder.feature_dim": 8,
    "encoder.projection_dim": 4,
    "pretrain.epochs": 1,
    "pretrain.batch_size": 8,
    "pretrain.warmup_epochs": 0,
    "pretrain.budget.steps": 1,
    "pretrain.k_list": [2, 3],
    "pretrain.lambda": 0.0,
    "cluster.max_iter": 20,
    "finetune.epochs": 1,
    "finetune.batch_size": 8,
    "finetune.budget.steps": 1,
    "finetune.selection_budget.steps": 1,
    "supervised_at.epochs": 1,
    "supervised_at.batch_size": 8,
    "supervised_at.budget.steps": 1,
    "evaluate.eps_list": [0, "8/255"],
    "evaluate.steps_list": [1],
    "evaluate.batch_size": 16,
    "evaluate.write_plots": False,
    "analysis.fim_steps": 2,
    "analysis.landscape_alphas": [-0.5, 0.0, 0.5],
    "analysis.landscape_betas": [0.0, 0.5],
    "analysis.landscape_batch_size": 8,
    "analysis.freq_samples": 2,
    "ablation.ra_budget.steps": 1,
}


@pytest.fixture
def toolkit(artifact_root):
    return AdvCLToolkit(resolve_config(dict(TINY)))


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


# --- configuration ---

def test_unknown_key_is_rejected():
    with pytest.raises(ConfigurationError, match="pretrain.nope"):
        resolve_config({"pretrain.nope": 1})


def test_invalid_value_is_rejected():
    with pytest.raises(ConfigurationError):
        resolve_config({"pretrain.epochs": 0})
    with pytest.raises(ConfigurationError):
        resolve_config({"pretrain.budget.norm": "l2"})


def test_seed_propagates_unless_set():
    cfg = resolve_config({"seed": 7, "finetune.seed": 1})
    assert cfg.seed == 7
    assert cfg.pretrain.seed == cfg.dataset.seed == cfg.evaluate.seed == 7
    assert cfg.finetune.seed == 1


def test_alias_and_fractions():
    cfg = resolve_config({"pretrain.lambda": 0.5, "evaluate.budget.epsilon": "8/255",
                          "evaluate.eps_list": ["0", "2/255"]})
    assert cfg.pretrain.lambda_ce == 0.5
    assert cfg.evaluate.budget.epsilon == pytest.approx(8 / 255)
    assert cfg.evaluate.eps_list == [0.0, pytest.approx(2 / 255)]
    assert CONFIG_KEYS["pretrain.lambda"] == CONFIG_KEYS["pretrain.lambda_ce"] == "pretrain.lambda_ce"


def test_yaml_with_nested_and_flat_keys(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({
        "seed": 3,
        "pretrain": {"epochs": 4, "budget": {"steps": 2}},
        "finetune.mode": "alf",
    }))
    cfg = load_config(path, {"pretrain.epochs": 6})
    assert cfg.pretrain.epochs == 6
    assert cfg.pretrain.budget.steps == 2
    assert cfg.finetune.mode == FinetuneMode.ALF
    assert cfg.cluster.seed == 3


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        load_config(listing)


def test_flatten_config():
    assert flatten_config({"a": {"b": 1, "c": {"d": 2}}, "e.f": 3}) == {"a.b": 1, "a.c.d": 2, "e.f": 3}


def test_partial_budget_override_keeps_section_defaults():
    cfg = resolve_config({"evaluate.budget.epsilon": "4/255", "finetune.selection_budget.steps": 3,
                          "ablation.ra_budget.epsilon": "16/255"})
    assert cfg.evaluate.budget.epsilon == pytest.approx(4 / 255)
    assert cfg.evaluate.budget.steps == 20
    assert cfg.evaluate.budget.init == AttackInit.ZERO
    assert cfg.finetune.selection_budget.steps == 3
    assert cfg.finetune.selection_budget.init == AttackInit.ZERO
    assert cfg.ablation.ra_budget.steps == 10
    assert cfg.ablation.ra_budget.init == AttackInit.ZERO


def test_shipped_config_keeps_eval_budget_defaults():
    cfg = load_config(Path(__file__).parents[1] / "configs" / "desk.yaml")
    assert cfg.evaluate.budget.step_size == pytest.approx(1 / 255)
    assert cfg.evaluate.budget.steps == 20
    assert cfg.evaluate.budget.init == AttackInit.ZERO


def test_default_k_list_fits_default_dataset():
    cfg = ExperimentConfig()
    assert max(cfg.pretrain.k_list) <= cfg.dataset.n
    assert max(k for ks in cfg.ablation.k_lists for k in ks) <= cfg.dataset.n


# --- stages ---

def test_pretrain_requires_table_when_lambda_positive(toolkit):
    with pytest.raises(StateError):
        toolkit.with_overrides({"pretrain.lambda": 0.2}).pretrain()


def test_stage_cache(toolkit, artifact_root):
    first = toolkit.pretrain()
    second = toolkit.pretrain()
    assert first.status == "complete"
    assert second.run_id == first.run_id
    assert (artifact_root / "pretrain" / first.cache_key[:16] / "manifest.json").is_file()

    fresh = AdvCLToolkit(toolkit.config, use_cache=False).pretrain()
    assert fresh.run_id != first.run_id
    assert fresh.cache_key == first.cache_key

    changed = toolkit.with_overrides({"pretrain.recipe": "three_view"}).pretrain()
    assert changed.cache_key != first.cache_key


def test_with_overrides_keeps_root(toolkit):
    variant = toolkit.with_overrides({"pretrain.recipe": ViewRecipe.SINGLE_ADV.value})
    assert variant.root == toolkit.root
    assert variant.config.pretrain.recipe == ViewRecipe.SINGLE_ADV
    assert toolkit.config.pretrain.recipe == ViewRecipe.THREE_VIEW_HIGH


def test_evaluate_needs_a_classifier(toolkit, artifact_root):
    ckpt = toolkit.pretrain().outputs["checkpoint"]
    with pytest.raises(StateError):
        toolkit.evaluate(ckpt)
    manifests = list((artifact_root / "eval").glob("*/manifest.json"))
    assert json.loads(manifests[0].read_text())["status"] == "failed"


def test_pipeline(toolkit):
    table = toolkit.prepare_pseudo_table()
    assert table.name == "pseudo_labels.npz"
    advcl = toolkit.with_overrides({"pretrain.lambda": 0.2})
    ckpt = advcl.pretrain(table).outputs["checkpoint"]
    model, _ = load_checkpoint(ckpt)
    assert model.pseudo_head_sizes == [2, 3]

    finetuned = advcl.finetune(ckpt, "slf").outputs["checkpoint"]
    report = advcl.evaluate(finetuned)
    payload = json.loads(open(report.outputs["report"]).read())
    assert 0.0 <= payload["sa"] <= 1.0
    assert [cell["epsilon"] for cell in payload["ra_grid"]] == [0.0, pytest.approx(8 / 255)]
    assert payload["ra_grid"][0]["ra"] == payload["sa"]

    landscape = advcl.analyze_landscape(finetuned)
    assert set(landscape.outputs) >= {"npy", "png", "grid"}
    fim_run = advcl.analyze_fim(ckpt)
    assert json.loads(open(fim_run.outputs["trajectory"]).read())["unit"] == 0


def test_analyze_freq(toolkit):
    outputs = toolkit.analyze_freq().outputs
    assert {"x", "x_high", "x_low", "panel_0", "panel_1"} <= set(outputs)


def test_supervised_at_stage(toolkit):
    ckpt = toolkit.supervised_at().outputs["checkpoint"]
    model, payload = load_checkpoint(ckpt)
    assert model.num_classes == 2
    assert payload["extra"]["objective"] == "supervised_at"


def test_fim_sample_out_of_range(toolkit, tmp_path, tiny_model):
    ckpt = save_checkpoint(tiny_model, tmp_path / "model.pt")
    with pytest.raises(ConfigurationError):
        toolkit.with_overrides({"analysis.fim_sample": 99}).analyze_fim(ckpt)


def test_cluster_rejects_k_above_training_size(toolkit, tmp_path):
    with pytest.raises(ConfigurationError, match="K=17"):
        toolkit.cluster(tmp_path / "unused.pt", k_list=[2, 17])


# --- ablations ---

def test_ablate_views(toolkit, artifact_root):
    path = toolkit.ablate("views", ["three_view", "single_adv"])
    assert path == artifact_root / "ablations" / "views" / "ablation_views.csv"
    rows = read_rows(path)
    assert [r["setting"] for r in rows] == ["three_view", "single_adv"]
    assert all(r["finetune"] == "slf" for r in rows)
    assert path.with_suffix(".md").is_file()


def test_ablate_lambda(toolkit):
    rows = read_rows(toolkit.with_overrides({"ablation.lambdas": [0.0, 0.2]}).ablate("lambda"))
    assert [r["setting"] for r in rows] == ["w/o ClusterFit", "lambda=0.2, K={2,3}"]
    assert all(0.0 <= float(r["ra"]) <= 1.0 for r in rows)


def test_ablate_klist_needs_positive_lambda(toolkit):
    with pytest.raises(ConfigurationError):
        toolkit.ablate("klist")


@pytest.mark.slow
def test_ablate_every_recipe_and_finetune_mode(toolkit):
    rows = read_rows(toolkit.ablate("views"))
    assert [r["setting"] for r in rows] == [r.value for r in ViewRecipe]
    modes = read_rows(toolkit.ablate("finetune_modes"))
    assert [r["finetune"] for r in modes] == ["slf", "alf", "aff"]


def test_ablate_baseline(toolkit, artifact_root):
    rows = read_rows(toolkit.with_overrides({"ablation.seeds": [0, 1]}).ablate("baseline"))
    assert [(r["setting"], r["seed"]) for r in rows] == [("SimCLR", "0"), ("AdvCL", "0"),
                                                          ("SimCLR", "1"), ("AdvCL", "1")]
    assert all(r["finetune"] == "slf" for r in rows)
    assert all(0.0 <= float(r["sa"]) <= 1.0 and 0.0 <= float(r["ra"]) <= 1.0 for r in rows)
    assert all(int(r["warnings"]) >= 0 for r in rows)
    assert len(list((artifact_root / "simclr").glob("*/manifest.json"))) == 2


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("ADVCL_DATA_ROOT"), reason="needs CIFAR-10 under $ADVCL_DATA_ROOT")
def test_baseline_on_two_class_cifar10():
    toolkit = AdvCLToolkit(resolve_config({
        "dataset.name": "cifar10",
        "dataset.root": os.environ["ADVCL_DATA_ROOT"],
        "dataset.classes_subset": [0, 1],
        "encoder.feature_dim": 64,
        "encoder.projection_dim": 32,
        "pretrain.epochs": 30,
        "pretrain.batch_size": 128,
        "finetune.epochs": 10,
        "finetune.milestones": [6, 8],
        "evaluate.eps_list": [0, "2/255", "4/255", "8/255", "16/255"],
        "evaluate.steps_list": [1, 5, 10, 20],
        "evaluate.write_plots": False,
        "ablation.seeds": [0, 1, 2],
    }))
    rows = read_rows(toolkit.ablate("baseline"))
    by_seed = {}
    for row in rows:
        by_seed.setdefault(row["seed"], {})[row["setting"]] = row
    assert len(by_seed) == 3
    wins = sum(float(arms["AdvCL"]["ra"]) > float(arms["SimCLR"]["ra"]) for arms in by_seed.values())
    assert wins >= 2
    for arms in by_seed.values():
        assert float(arms["SimCLR"]["sa"]) - float(arms["AdvCL"]["sa"]) <= 0.10
    assert all(row["warnings"] == "0" for row in rows)
