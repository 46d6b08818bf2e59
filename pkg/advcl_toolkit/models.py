from enum import Enum
from fractions import Fraction
from typing import List, Dict, Optional, Any, Tuple

from pydantic.v1 import BaseModel, Field, validator, root_validator


def _parse_fraction(value):
    """Accepts floats and strings such as '8/255' for perturbation radii."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"Cannot parse '{value}' as a number or fraction.") from e
    return value


# === Vocabulary ===

class BNRoute(str, Enum):
    """Batch-norm branch a forward pass reads and updates."""
    NORMAL = "normal"
    ADV_CL = "adv_cl"
    ADV_CE = "adv_ce"

class ViewRecipe(str, Enum):
    """Rows of the contrastive view ablation."""
    SINGLE_ADV = "single_adv"
    SINGLE_ADV_PLUS_CLEAN = "single_adv_plus_clean"
    PAIRED_ADV = "paired_adv"
    PAIRED_ADV_PLUS_CLEAN = "paired_adv_plus_clean"
    THREE_VIEW = "three_view"
    THREE_VIEW_LOW = "three_view_low"
    THREE_VIEW_LOW_HIGH = "three_view_low_high"
    THREE_VIEW_HIGH = "three_view_high"

class FinetuneMode(str, Enum):
    SLF = "slf"
    ALF = "alf"
    AFF = "aff"

class AttackInit(str, Enum):
    ZERO = "zero"
    UNIFORM_RANDOM = "uniform_random"

class Architecture(str, Enum):
    TINY_CNN = "tiny_cnn"
    RESNET18 = "resnet18"

class FimSign(str, Enum):
    MIN = "min"
    MAX = "max"

class Stage(str, Enum):
    PRETRAIN = "pretrain"
    CLUSTER = "cluster"
    FINETUNE = "finetune"
    EVAL = "eval"
    ANALYZE = "analyze"

class AblationKind(str, Enum):
    VIEWS = "views"
    LAMBDA = "lambda"
    KLIST = "klist"
    FINETUNE_MODES = "finetune_modes"
    BASELINE = "baseline"


# === Configuration sections ===

class DatasetConfig(BaseModel):
    name: str = Field("synthetic", description="Dataset id: synthetic, cifar10, cifar100 or stl10.")
    root: str = Field("./data", description="Directory holding the dataset files (torchvision layout).")
    n: int = Field(256, ge=1, description="Synthetic only: number of samples per split.")
    classes: int = Field(2, ge=1, description="Synthetic only: number of Gaussian class blobs.")
    image_size: int = Field(16, ge=2, description="Synthetic only: side length of the rendered square images.")
    channels: int = Field(1, description="Synthetic only: 1 or 3 channels.")
    blob_spread: float = Field(0.05, gt=0, description="Synthetic only: std of the 2-D class blobs in unit coordinates.")
    seed: int = Field(0, description="Seed for synthetic generation and batch order.")
    classes_subset: Optional[List[int]] = Field(None, description="Optional: keep only these original classes, relabelled to [0, len).")
    max_samples: Optional[int] = Field(None, ge=1, description="Optional: truncate the split to this many samples (after subsetting).")
    download: bool = Field(False, description="Allow torchvision to download missing files. No guarantees.")

    @validator("channels")
    def _channels(cls, v):
        if v not in (1, 3):
            raise ValueError("channels must be 1 or 3.")
        return v


class AugmentConfig(BaseModel):
    crop_scale_min: float = Field(0.2, description="Lower bound of the random-resized-crop area fraction.")
    crop_scale_max: float = Field(1.0, description="Upper bound of the random-resized-crop area fraction.")
    hflip_prob: float = Field(0.5, description="Probability of a horizontal flip.")
    jitter_strengths: Tuple[float, float, float, float] = Field((0.4, 0.4, 0.4, 0.1), description="Brightness, contrast, saturation, hue jitter strengths.")
    jitter_prob: float = Field(0.8, description="Probability of applying color jitter.")
    grayscale_prob: float = Field(0.2, description="Probability of converting to grayscale.")
    seed: int = Field(0, description="Seed used when no explicit generator is given.")

    @validator("hflip_prob", "jitter_prob", "grayscale_prob")
    def _probability(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("probabilities must lie in [0, 1].")
        return v

    @validator("jitter_strengths")
    def _strengths(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("jitter strengths must be non-negative.")
        if v[3] > 0.5:
            raise ValueError("hue strength must be <= 0.5.")
        return v

    @root_validator(skip_on_failure=True)
    def _crop_scale(cls, values):
        lo, hi = values["crop_scale_min"], values["crop_scale_max"]
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("need 0 < crop_scale_min <= crop_scale_max <= 1.")
        return values


class EncoderConfig(BaseModel):
    architecture: Architecture = Field(Architecture.TINY_CNN, description="Encoder backbone.")
    feature_dim: int = Field(128, ge=1, description="Output width of the encoder f.")
    projection_dim: int = Field(64, ge=1, description="Output width of the projection head g.")
    projection_hidden_dim: Optional[int] = Field(None, ge=1, description="Hidden width of g. Defaults to feature_dim.")
    input_channels: int = Field(3, ge=1, description="Image channels the encoder accepts.")
    image_size: int = Field(32, ge=2, description="Square input resolution the encoder accepts.")
    tri_bn: bool = Field(True, description="Three routed BN branches. False builds the single-BN twin.")


class PerturbBudget(BaseModel):
    epsilon: float = Field(8 / 255, ge=0, description="l-inf radius in image units.")
    steps: int = Field(5, ge=0, description="Number of PGD iterations.")
    step_size: float = Field(2 / 255, ge=0, description="Sign-gradient step size.")
    init: AttackInit = Field(AttackInit.UNIFORM_RANDOM, description="Starting point inside the ball.")
    norm: str = Field("linf", description="Only 'linf' is supported.")

    _fractions = validator("epsilon", "step_size", pre=True, allow_reuse=True)(_parse_fraction)

    @validator("norm")
    def _norm(cls, v):
        if v != "linf":
            raise ValueError("only the l-inf norm is supported.")
        return v

    @root_validator(skip_on_failure=True)
    def _step_size(cls, values):
        if values["steps"] > 0 and values["step_size"] <= 0:
            raise ValueError("step_size must be > 0 when steps > 0.")
        return values


class PretrainConfig(BaseModel):
    epochs: int = Field(20, ge=1, description="Training epochs (1000 for full-scale runs).")
    batch_size: int = Field(64, ge=1, description="Batch size (512 for full-scale runs).")
    lr: float = Field(0.5, gt=0, description="Peak learning rate reached after warm-up.")
    momentum: float = Field(0.9, ge=0, description="SGD momentum.")
    weight_decay: float = Field(1e-4, ge=0, description="SGD weight decay.")
    warmup_epochs: int = Field(10, ge=0, description="Linear warm-up length in epochs.")
    warmup_start_lr: float = Field(0.01, ge=0, description="Learning rate at the start of warm-up.")
    temperature: float = Field(0.5, gt=0, description="NT-Xent temperature t.")
    lambda_ce: float = Field(0.2, ge=0, alias="lambda", description="Weight of the pseudo-label CE regularizer.")
    budget: PerturbBudget = Field(default_factory=lambda: PerturbBudget(steps=5), description="PGD budget for both inner maximizations.")
    recipe: ViewRecipe = Field(ViewRecipe.THREE_VIEW_HIGH, description="Which contrastive views are built per step.")
    k_list: List[int] = Field([2, 10, 50], description="Cluster counts of the pseudo-label ensemble, one head each ([2, 10, 50, 100, 500] for full-scale runs). Every K must not exceed the training split size.")
    frequency_radius: float = Field(8.0, ge=0, description="Radius r of the frequency split.")
    clamp_frequency_views: bool = Field(False, description="Clamp x_high / x_low into [0, 1] before the encoder.")
    attack_bn_mode: str = Field("eval", description="'eval' or 'train' batch-norm statistics during inner maximization.")
    pseudo_head_lr: Optional[float] = Field(None, gt=0, description="Optional: separate learning rate for the pseudo heads. None shares the encoder settings.")
    checkpoint_every: int = Field(5, ge=1, description="Epoch interval between periodic checkpoints.")
    seed: int = Field(0, description="Seed for parameter init, batch order, augmentation and attacks.")

    class Config:
        allow_population_by_field_name = True

    @validator("attack_bn_mode")
    def _bn_mode(cls, v):
        if v not in ("eval", "train"):
            raise ValueError("attack_bn_mode must be 'eval' or 'train'.")
        return v

    @validator("k_list")
    def _k_list(cls, v):
        if any(k < 1 for k in v):
            raise ValueError("every K must be >= 1.")
        return v


class ClusterConfig(BaseModel):
    seed: int = Field(0, description="Base seed; each K derives its own seed from it.")
    max_iter: int = Field(300, ge=1, description="Lloyd iteration cap.")
    tol: float = Field(1e-6, gt=0, description="Stop when the largest centroid shift drops below this.")
    max_workers: int = Field(1, ge=1, description="Threads used to fit the K values concurrently.")
    batch_size: int = Field(256, ge=1, description="Batch size for feature extraction.")


class FinetuneConfig(BaseModel):
    mode: FinetuneMode = Field(FinetuneMode.SLF, description="slf, alf or aff.")
    epochs: int = Field(25, ge=1, description="Finetuning epochs.")
    batch_size: int = Field(64, ge=1, description="Batch size (512 for full-scale runs).")
    lr: float = Field(0.1, gt=0, description="Initial learning rate.")
    momentum: float = Field(0.9, ge=0, description="SGD momentum.")
    weight_decay: float = Field(2e-4, ge=0, description="SGD weight decay (also used for ALF and AFF).")
    milestones: List[int] = Field([15, 20], description="Epochs at which the learning rate is multiplied by gamma.")
    gamma: float = Field(0.1, gt=0, description="Learning rate drop factor.")
    budget: PerturbBudget = Field(default_factory=lambda: PerturbBudget(steps=10), description="Training attack for ALF / AFF. Ignored by SLF.")
    selection_budget: PerturbBudget = Field(default_factory=lambda: PerturbBudget(steps=10, init=AttackInit.ZERO), description="Attack used to pick the best epoch by RA (ALF / AFF).")
    trades_beta: float = Field(6.0, ge=0, description="TRADES KL weight for AFF.")
    freeze_bn_stats: bool = Field(True, description="Keep encoder BN running statistics fixed in SLF / ALF.")
    resize_inputs: bool = Field(True, description="Resize images to the encoder resolution when they differ.")
    seed: int = Field(0, description="Seed for head init, batch order and attacks.")

    @property
    def training_budget(self) -> Optional[PerturbBudget]:
        """The attack used while training; SLF has none."""
        return None if self.mode == FinetuneMode.SLF else self.budget


class SupervisedATConfig(BaseModel):
    epochs: int = Field(20, ge=1, description="Training epochs.")
    batch_size: int = Field(64, ge=1, description="Batch size.")
    lr: float = Field(0.1, gt=0, description="Initial learning rate.")
    momentum: float = Field(0.9, ge=0, description="SGD momentum.")
    weight_decay: float = Field(5e-4, ge=0, description="SGD weight decay.")
    milestones: List[int] = Field([10, 15], description="Epochs at which the learning rate is multiplied by gamma.")
    gamma: float = Field(0.1, gt=0, description="Learning rate drop factor.")
    budget: PerturbBudget = Field(default_factory=lambda: PerturbBudget(steps=10), description="Inner PGD budget.")
    attack_bn_mode: str = Field("eval", description="'eval' or 'train' batch-norm statistics during the inner maximization.")
    checkpoint_every: int = Field(5, ge=1, description="Epoch interval between periodic checkpoints.")
    seed: int = Field(0, description="Seed for init, batch order and attacks.")


class EvalConfig(BaseModel):
    budget: PerturbBudget = Field(default_factory=lambda: PerturbBudget(steps=20, init=AttackInit.ZERO), description="Attack for the headline RA.")
    eps_list: List[float] = Field([0.0, 2 / 255, 4 / 255, 8 / 255, 16 / 255], description="Radii of the sweep grid.")
    steps_list: List[int] = Field([1, 5, 10, 20], description="Step counts of the sweep grid.")
    batch_size: int = Field(128, ge=1, description="Evaluation batch size.")
    violation_tolerance: float = Field(0.005, ge=0, description="Absolute RA increase tolerated by the sweep screen.")
    max_violations: int = Field(1, ge=0, description="Number of tolerated small violations before warning.")
    write_plots: bool = Field(True, description="Emit RA-vs-eps and RA-vs-steps PNGs.")
    seed: int = Field(0, description="Seed for random-init attacks.")

    @validator("eps_list", pre=True)
    def _eps_list(cls, v):
        return [_parse_fraction(e) for e in v]


class AnalysisConfig(BaseModel):
    fim_unit: int = Field(0, ge=0, description="Feature coordinate driven by the feature inversion map.")
    fim_steps: int = Field(100, ge=0, description="Gradient steps of the inversion.")
    fim_lr: float = Field(0.1, gt=0, description="Initial step size of the inversion.")
    fim_sign: FimSign = Field(FimSign.MIN, description="'min' drives the coordinate down, 'max' up.")
    fim_sample: int = Field(0, ge=0, description="Index of the seed image in the test split.")
    landscape_alphas: List[float] = Field([-1.0, -0.5, 0.0, 0.5, 1.0], description="First-direction grid.")
    landscape_betas: List[float] = Field([-1.0, -0.5, 0.0, 0.5, 1.0], description="Second-direction grid.")
    landscape_batch_size: int = Field(64, ge=1, description="Samples used per landscape cell.")
    landscape_seed: int = Field(0, description="Seed of the two random directions.")
    freq_samples: int = Field(4, ge=1, description="Images dumped by 'analyze freq'.")


class AblationConfig(BaseModel):
    recipes: List[ViewRecipe] = Field(list(ViewRecipe), description="Recipes enumerated by 'ablate views'.")
    lambdas: List[float] = Field([0.0, 0.2], description="Regularizer weights enumerated by 'ablate lambda'.")
    k_lists: List[List[int]] = Field([[2], [10], [50], [2, 10, 50]], description="Cluster sets enumerated by 'ablate klist' (add [100], [500] and the five-K ensemble for full-scale runs).")
    finetune_modes: List[FinetuneMode] = Field(list(FinetuneMode), description="Modes enumerated by 'ablate finetune_modes'.")
    ra_budget: PerturbBudget = Field(default_factory=lambda: PerturbBudget(steps=10, init=AttackInit.ZERO), description="Attack used for the RA column.")
    seeds: List[int] = Field([0, 1, 2], description="Run seeds of 'ablate baseline' (SimCLR against AdvCL, dataset held fixed).")


class ExperimentConfig(BaseModel):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    supervised_at: SupervisedATConfig = Field(default_factory=SupervisedATConfig)
    evaluate: EvalConfig = Field(default_factory=EvalConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    seed: int = Field(0, description="Run seed; copied into every stage that has a seed key unless set explicitly.")
    device: str = Field("cpu", description="torch device string.")

    class Config:
        allow_population_by_field_name = True


# === Records ===

class RunManifest(BaseModel):
    run_id: str = Field(..., description="Unique id of this stage execution.")
    stage: Stage = Field(..., description="Pipeline stage.")
    command: str = Field(..., description="CLI subcommand or facade method that produced the run.")
    config: Dict[str, Any] = Field(..., description="Fully resolved configuration snapshot.")
    seed: int = Field(..., description="Run seed.")
    code_fingerprint: str = Field(..., description="Package version plus hash of the package sources.")
    cache_key: str = Field(..., description="Content hash of (stage, config, inputs).")
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input artifact paths.")
    outputs: Dict[str, str] = Field(default_factory=dict, description="Output artifact paths.")
    status: str = Field("running", description="'running', 'complete' or 'failed'.")
    created_at: str = Field(..., description="UTC timestamp.")


class RAEntry(BaseModel):
    epsilon: float
    steps: int
    ra: float = Field(..., ge=0, le=1)


class EvalReport(BaseModel):
    sa: float = Field(..., ge=0, le=1, description="Standard accuracy.")
    ra_grid: List[RAEntry] = Field(default_factory=list, description="Robust accuracy per (epsilon, steps).")
    dataset: str = Field(..., description="Dataset id.")
    model_fingerprint: str = Field(..., description="Hash of the evaluated parameters.")
    budget: Dict[str, Any] = Field(default_factory=dict, description="Step size and init of the sweep attacks.")
    warnings: List[str] = Field(default_factory=list, description="Obfuscated-gradient screen findings.")

    def ra(self, epsilon: float, steps: int) -> float:
        for entry in self.ra_grid:
            if abs(entry.epsilon - epsilon) < 1e-12 and entry.steps == steps:
                return entry.ra
        raise KeyError(f"No RA entry for epsilon={epsilon}, steps={steps}.")
