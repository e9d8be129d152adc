"""
Experiment configuration: INI files validated by pydantic.

Example file:

    [experiment]
    seeds = 0, 1, 2
    steps = 500
    batch_size = 50
    eval_interval = 25
    output_dir = results/quadratic

    [problem]
    kind = quadratic
    d = 512
    n = 1000

    [privacy]
    clip = 5.0
    target_epsilon = 4
    target_delta = 1e-5

    [arm:dpsgd]
    method = dpsgd
    learning_rate = 0.5

    [arm:fftkf]
    method = fftkf
    learning_rate = 0.5
    kappa = 0.5
    gamma = 4
    rho = 0.5

Validation errors are reported as "section.field: message".
"""

import configparser
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.tools.mnist import data_root, find_mnist_files, load_mnist_idx
from src.tools.problems import (
    ClassificationData,
    LogisticProblem,
    MLPProblem,
    Problem,
    QuadraticProblem,
    make_classification,
)

from .optimizer import BaseOptimizer, FilterParams, KalmanParams, MethodConfig, default_releases, resolve_privacy


class ConfigError(ValueError):
    """Invalid experiment configuration; carries one message per offending field."""

    def __init__(self, messages: list[str]):
        self.messages = messages
        super().__init__("; ".join(messages))


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.replace(";", ",").split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExperimentSection(_Section):
    seeds: list[int] = Field(default_factory=lambda: [0])
    steps: Optional[int] = Field(None, ge=0)
    epochs: Optional[float] = Field(None, gt=0)
    batch_size: int = Field(50, ge=1)
    eval_interval: int = Field(10, ge=1)
    output_dir: Path = Path("results")
    emit_plot_data: bool = False
    parallelism: int = Field(1, ge=1)
    sampling: Literal["poisson", "fixed"] = "poisson"
    record_wall_time: bool = False

    @field_validator("seeds", mode="before")
    @classmethod
    def split_seeds(cls, value):
        return _split_list(value)

    @field_validator("seeds")
    @classmethod
    def unique_seeds(cls, seeds: list[int]) -> list[int]:
        if not seeds:
            raise ValueError("at least one seed is required")
        duplicates = sorted({s for s in seeds if seeds.count(s) > 1})
        if duplicates:
            raise ValueError(f"duplicate seeds {duplicates}")
        return seeds

    @model_validator(mode="after")
    def steps_or_epochs(self) -> "ExperimentSection":
        if self.steps is None and self.epochs is None:
            raise ValueError("one of steps or epochs is required")
        if self.steps is not None and self.epochs is not None:
            raise ValueError("give steps or epochs, not both")
        return self


class ProblemSection(_Section):
    kind: Literal["quadratic", "logistic", "mlp"] = "quadratic"
    dataset: Literal["synthetic", "mnist"] = "synthetic"
    seed: int = 0
    # quadratic
    d: int = Field(512, ge=2)
    n: int = Field(1000, ge=1)
    mu: float = Field(0.1, gt=0)
    L: float = Field(1.0, gt=0)
    tau: float = Field(0.0, ge=0)
    rotate: bool = True
    # classification
    n_features: int = Field(784, ge=1)
    n_classes: int = Field(10, ge=2)
    n_test: int = Field(1000, ge=0)
    separation: float = Field(3.0, ge=0)
    n_hidden: int = Field(64, ge=1)
    subset_n: Optional[int] = Field(None, ge=1)
    eval_examples: int = Field(2048, ge=1)

    @model_validator(mode="after")
    def check_ranges(self) -> "ProblemSection":
        if self.mu > self.L:
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")
        if self.dataset == "mnist" and self.kind == "quadratic":
            raise ValueError("the quadratic problem is synthetic only")
        return self


class PrivacySection(_Section):
    clip: float = Field(1.0, gt=0)
    target_epsilon: float = Field(4.0, gt=0)
    target_delta: float = Field(1e-5, gt=0, lt=1)
    sigma_w: Optional[float] = Field(None, ge=0)
    sigma_fd: Optional[float] = Field(None, ge=0)
    releases_per_step: Optional[int] = Field(None, ge=1, le=2)


class ArmSection(_Section):
    name: str
    method: Literal["dpsgd", "disk", "fftkf"]
    optimizer: Literal["sgd", "momentum", "adam"] = "sgd"
    learning_rate: float = Field(0.1, gt=0)
    momentum_beta: float = Field(0.9, ge=0, lt=1)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_epsilon: float = Field(1e-8, gt=0)
    kappa: Optional[float] = Field(None, gt=0, le=1)
    gamma: Optional[float] = Field(None, gt=0)
    lam: Optional[float] = Field(None, gt=0, lt=1)
    rho: Optional[float] = Field(None, ge=0, lt=1)
    alpha: Optional[float] = Field(None, ge=0)
    releases_per_step: Optional[int] = Field(None, ge=1, le=2)

    @model_validator(mode="after")
    def method_fields(self) -> "ArmSection":
        filter_keys = [k for k in ("lam", "rho", "alpha") if getattr(self, k) is not None]
        kalman_keys = [k for k in ("kappa", "gamma") if getattr(self, k) is not None]
        if self.method == "dpsgd" and (filter_keys or kalman_keys):
            raise ValueError(f"dpsgd takes no filter or kalman keys, got {filter_keys + kalman_keys}")
        if self.method == "disk" and filter_keys:
            raise ValueError(f"disk takes no filter keys, got {filter_keys}")
        if self.method == "dpsgd" and self.releases_per_step == 2:
            raise ValueError("dpsgd makes one release per step")
        return self

    def base(self) -> BaseOptimizer:
        return BaseOptimizer(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            momentum_beta=self.momentum_beta,
            adam_betas=(self.adam_beta1, self.adam_beta2),
            adam_epsilon=self.adam_epsilon,
        )

    def kalman_params(self) -> Optional[KalmanParams]:
        if self.method == "dpsgd":
            return None
        defaults = KalmanParams()
        return KalmanParams(
            kappa=defaults.kappa if self.kappa is None else self.kappa,
            gamma=defaults.gamma if self.gamma is None else self.gamma,
        )

    def filter_params(self) -> Optional[FilterParams]:
        if self.method != "fftkf":
            return None
        defaults = FilterParams()
        return FilterParams(
            lam=defaults.lam if self.lam is None else self.lam,
            rho=defaults.rho if self.rho is None else self.rho,
            alpha=defaults.alpha if self.alpha is None else self.alpha,
        )


class SweepSection(_Section):
    rho_grid: list[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5, 0.6, 0.7, 0.9])
    epsilon_grid: list[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    base_arm: str = "fftkf"

    @field_validator("rho_grid", "epsilon_grid", mode="before")
    @classmethod
    def split_grids(cls, value):
        return _split_list(value)

    @field_validator("rho_grid")
    @classmethod
    def rho_range(cls, grid: list[float]) -> list[float]:
        if not grid or not all(0 < r < 1 for r in grid):
            raise ValueError("rho values must lie in (0, 1)")
        return grid

    @field_validator("epsilon_grid")
    @classmethod
    def epsilon_positive(cls, grid: list[float]) -> list[float]:
        if not grid or not all(e > 0 for e in grid):
            raise ValueError("epsilon values must be > 0")
        return grid


class ExperimentConfig(BaseModel):
    experiment: ExperimentSection
    problem: ProblemSection
    privacy: PrivacySection
    arms: list[ArmSection]
    sweep: Optional[SweepSection] = None

    def resolve_steps(self, n_examples: int) -> int:
        """steps, or ceil(epochs * N / B)"""
        if self.experiment.steps is not None:
            return self.experiment.steps
        return math.ceil(self.experiment.epochs * n_examples / self.experiment.batch_size)

    def arm(self, name: str) -> ArmSection:
        for arm in self.arms:
            if arm.name == name:
                return arm
        raise ConfigError([f"sweep.base_arm: no arm named '{name}'"])

    def method_config(
        self,
        arm: ArmSection,
        problem: Problem,
        seed: int,
        target_epsilon: Optional[float] = None,
    ) -> MethodConfig:
        """
        Resolve one arm against the problem; calibrates sigma_w when the
        privacy section does not fix it.

        Raises:
            InfeasiblePrivacyTarget: calibration fails
        """
        exp = self.experiment
        steps = self.resolve_steps(problem.n)
        kalman_params = arm.kalman_params()
        releases = arm.releases_per_step or self.privacy.releases_per_step or default_releases(arm.method)
        if arm.method == "dpsgd":
            releases = 1
        privacy = resolve_privacy(
            clip_C=self.privacy.clip,
            batch_size=exp.batch_size,
            n_examples=problem.n,
            steps=steps,
            target_epsilon=target_epsilon or self.privacy.target_epsilon,
            target_delta=self.privacy.target_delta,
            sigma_w=self.privacy.sigma_w,
            sigma_fd=self.privacy.sigma_fd,
            gamma=kalman_params.gamma if kalman_params else 1.0,
            releases_per_step=releases,
            sampling=exp.sampling,
        )
        return MethodConfig(
            method=arm.method,
            privacy=privacy,
            base=arm.base(),
            steps=steps,
            batch_size=exp.batch_size,
            seed=seed,
            filter=arm.filter_params(),
            kalman=kalman_params,
            releases_per_step=releases,
            eval_interval=exp.eval_interval,
            sampling=exp.sampling,
            record_wall_time=exp.record_wall_time,
            name=arm.name,
        )


# ============================================================================
# Loading
# ============================================================================

def _validate(model: type[BaseModel], section: str, values: dict) -> BaseModel:
    try:
        return model.model_validate(values)
    except ValidationError as exc:
        messages = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            where = f"{section}.{loc}" if loc else section
            messages.append(f"{where}: {err['msg']}")
        raise ConfigError(messages) from exc


def parse_config(
    text: str,
    seed_override: Optional[list[int]] = None,
    output_dir: Optional[Path] = None,
    parallelism: Optional[int] = None,
    subset_n: Optional[int] = None,
) -> ExperimentConfig:
    """Parse INI text; command-line overrides replace file values."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc

    known = {"experiment", "problem", "privacy", "sweep"}
    unknown = [s for s in parser.sections() if s not in known and not s.startswith("arm:")]
    if unknown:
        raise ConfigError([f"{s}: unknown section" for s in unknown])
    for required in ("experiment", "problem"):
        if not parser.has_section(required):
            raise ConfigError([f"{required}: section is missing"])

    experiment = dict(parser["experiment"])
    if seed_override:
        experiment["seeds"] = list(seed_override)
    if output_dir is not None:
        experiment["output_dir"] = output_dir
    if parallelism is not None:
        experiment["parallelism"] = parallelism
    problem = dict(parser["problem"])
    if subset_n is not None:
        problem["subset_n"] = subset_n

    messages: list[str] = []
    sections = {}
    raw = {
        "experiment": (ExperimentSection, experiment),
        "problem": (ProblemSection, problem),
        "privacy": (PrivacySection, dict(parser["privacy"]) if parser.has_section("privacy") else {}),
    }
    if parser.has_section("sweep"):
        raw["sweep"] = (SweepSection, dict(parser["sweep"]))
    for name, (model, values) in raw.items():
        try:
            sections[name] = _validate(model, name, values)
        except ConfigError as exc:
            messages.extend(exc.messages)

    arms = []
    for section in parser.sections():
        if not section.startswith("arm:"):
            continue
        values = {"name": section.split(":", 1)[1].strip(), **dict(parser[section])}
        try:
            arms.append(_validate(ArmSection, section, values))
        except ConfigError as exc:
            messages.extend(exc.messages)
    if not arms and not any(m.startswith("arm:") for m in messages):
        messages.append("arms: at least one [arm:<name>] section is required")

    if messages:
        raise ConfigError(messages)
    config = ExperimentConfig(arms=arms, **sections)
    if config.sweep is not None:
        base = config.arm(config.sweep.base_arm)
        if base.method != "fftkf":
            raise ConfigError([f"sweep.base_arm: '{base.name}' is {base.method}, sweeps need an fftkf arm"])
    return config


def load_config(path: Path, **overrides) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"{path}: file not found"])
    return parse_config(path.read_text(encoding="utf-8"), **overrides)


# ============================================================================
# Problem construction
# ============================================================================

def _classification_data(section: ProblemSection) -> tuple[ClassificationData, Optional[ClassificationData]]:
    if section.dataset == "mnist":
        root = data_root()
        train_files = find_mnist_files(root, "train")
        if train_files is None:
            raise ConfigError([f"problem.dataset: no MNIST IDX files under {root}"])
        train = load_mnist_idx(*train_files, subset_n=section.subset_n, seed=section.seed)
        test = None
        test_files = find_mnist_files(root, "test")
        if test_files is not None and section.n_test > 0:
            test = load_mnist_idx(*test_files, subset_n=section.n_test, seed=section.seed, split="test")
        return (
            ClassificationData(features=train.images, labels=train.labels),
            None if test is None else ClassificationData(features=test.images, labels=test.labels),
        )

    n_train = section.subset_n or section.n
    full = make_classification(
        n_train + section.n_test,
        n_features=section.n_features,
        n_classes=section.n_classes,
        separation=section.separation,
        seed=section.seed,
    )
    train = ClassificationData(features=full.features[:n_train], labels=full.labels[:n_train])
    test = None
    if section.n_test > 0:
        test = ClassificationData(features=full.features[n_train:], labels=full.labels[n_train:])
    return train, test


def build_problem(section: ProblemSection) -> Problem:
    """Deterministic in section.seed; every arm and seed shares the result."""
    if section.kind == "quadratic":
        return QuadraticProblem.create(
            d=section.d,
            n=section.subset_n or section.n,
            mu=section.mu,
            L=section.L,
            tau=section.tau,
            seed=section.seed,
            rotate=section.rotate,
        )
    train, test = _classification_data(section)
    if section.kind == "logistic":
        return LogisticProblem(train, test, n_classes=section.n_classes, eval_examples=section.eval_examples)
    return MLPProblem(
        train, test, n_hidden=section.n_hidden, n_classes=section.n_classes, eval_examples=section.eval_examples
    )
