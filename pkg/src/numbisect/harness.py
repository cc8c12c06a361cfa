"""Bisection training protocol: anchor labels, seeded training runs,
replicates and the hold-one-category-out pooling."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensornet as tn
from .models import FAMILIES, Network, NetworkConfig, build_network
from .stimgen import (ANCHORS, CATEGORIES, FEW, MANY, NUMEROSITIES, Dataset, StimulusCategory,
                      StimulusSpec, generate_dataset, label_for)

log = logging.getLogger(__name__)

DEFAULT_OPTIMIZERS = {
    "MLP": ("adam", 1e-4),
    "MicroViT": ("adam", 5e-5),
    "MicroCNN": ("sgd", 1e-2),
}


class UnlabeledNumerosity(ValueError):
    pass


class Divergence(RuntimeError):
    def __init__(self, step: int, loss: float, seed: int | None = None):
        self.step = step
        self.loss = loss
        self.seed = seed
        who = f" (seed {seed})" if seed is not None else ""
        super().__init__(f"loss became {loss} at step {step}{who}")


class PlanError(ValueError):
    pass


def make_labels(n: int) -> str:
    label = label_for(n)
    if label not in (FEW, MANY):
        raise UnlabeledNumerosity(f"numerosity {n} has no training label")
    return label


def one_hot(labels: Sequence[str]) -> np.ndarray:
    """few -> [1, 0], many -> [0, 1]; class index 1 is 'many'."""
    out = np.zeros((len(labels), 2))
    for i, lab in enumerate(labels):
        if lab == FEW:
            out[i, 0] = 1
        elif lab == MANY:
            out[i, 1] = 1
        else:
            raise UnlabeledNumerosity(f"label {lab!r} cannot be used for training")
    return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 5000
    optimizers: dict = field(default_factory=lambda: dict(DEFAULT_OPTIMIZERS))
    weight_decay: float = 1e-4
    seeds: tuple[int, ...] = tuple(range(10))
    shuffle_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        merged = dict(DEFAULT_OPTIMIZERS)
        for fam, spec in dict(self.optimizers).items():
            merged[fam] = (str(spec[0]).lower(), float(spec[1]))
        object.__setattr__(self, "optimizers", merged)
        if self.batch_size < 1:
            raise PlanError("batch_size must be >= 1")
        if self.steps < 1:
            raise PlanError("steps must be >= 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise PlanError(f"replicate seeds must be distinct, got {list(self.seeds)}")
        if not self.seeds:
            raise PlanError("at least one replicate seed is required")

    def optimizer_state(self, family: str) -> tn.OptimizerState:
        kind, lr = self.optimizers[family]
        return tn.OptimizerState(kind=kind, learning_rate=lr, weight_decay=self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["optimizers"] = {k: list(v) for k, v in sorted(self.optimizers.items())}
        return d


@dataclass
class TrainedNetwork:
    config: NetworkConfig
    params: tn.ParameterSet
    loss_log: list[float]
    train_accuracy: float
    seed: int
    optimizer: tn.OptimizerState | None = None
    train_category: str = ""

    @property
    def network(self) -> Network:
        return Network(self.config, self.params)

    def checkpoint(self, optimizer: bool = True) -> dict:
        return tn.checkpoint_dict(self.params, self.optimizer if optimizer else None, {
            "config": self.config.to_dict(), "seed": self.seed,
            "train_accuracy": self.train_accuracy, "train_category": self.train_category,
            "steps": len(self.loss_log)})


def _train_arrays(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    if any(int(n) not in ANCHORS for n in dataset.numerosities):
        raise UnlabeledNumerosity("training data may only contain anchor numerosities")
    return dataset.images, one_hot(dataset.labels)


def train_run(net_config: NetworkConfig, dataset: Dataset, config: TrainConfig, seed: int,
              train_category: str = "") -> TrainedNetwork:
    """Minibatch training for ``config.steps`` updates.

    Each epoch is a fresh permutation of the training set; the last partial
    batch of an epoch is kept. Raises Divergence on a non-finite loss.
    """
    images, targets = _train_arrays(dataset)
    if len(images) == 0:
        raise ValueError("empty training set")
    net = build_network(net_config, seed)
    state = config.optimizer_state(net_config.family)
    rng = np.random.default_rng(np.random.SeedSequence([config.shuffle_seed, seed]))
    losses: list[float] = []
    order = np.empty(0, dtype=int)
    pos = 0
    for step in range(config.steps):
        if pos >= len(order):
            order = rng.permutation(len(images))
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += len(idx)
        net.params.zero_grad()
        out = net.forward(images[idx])
        loss = tn.cross_entropy(out.logits, targets[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise Divergence(step, value, seed)
        tn.backward(loss)
        tn.optimizer_step(net.params, net.params.grads(), state)
        losses.append(value)
    net.params.zero_grad()
    pred = net.logits(images).argmax(axis=1)
    accuracy = float((pred == targets.argmax(axis=1)).mean())
    log.debug("trained %s seed=%d acc=%.4f final loss=%.4g", net_config.family, seed, accuracy, losses[-1])
    return TrainedNetwork(net_config, net.params, losses, accuracy, seed, state, train_category)


# ---------------------------------------------------------------------------
# plans


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a master seed and string/int tags."""
    words = []
    for p in parts:
        words.append(int(p) if isinstance(p, (int, np.integer)) else zlib.crc32(str(p).encode()))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class ExperimentPlan:
    mode: str = "single_stimulus"
    train_categories: tuple[str, ...] = tuple(c.value for c in CATEGORIES)
    test_categories: tuple[str, ...] = tuple(c.value for c in CATEGORIES)
    families: tuple[str, ...] = ("MLP", "MicroCNN", "MicroViT")
    train: TrainConfig = field(default_factory=TrainConfig)
    resolution: int = 64
    data_seed: int = 2023
    train_count: int = 100
    test_count: int = 100
    stimulus: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    name: str = "experiment"

    def __post_init__(self):
        for key in ("train_categories", "test_categories", "families"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig(**self.train))
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("single_stimulus", "holdout"):
            raise PlanError(f"unknown mode {self.mode!r}")
        names = {c.value for c in CATEGORIES}
        for cat in (*self.train_categories, *self.test_categories):
            if cat not in names:
                raise PlanError(f"unknown stimulus category {cat!r}")
        for fam in self.families:
            if fam not in FAMILIES:
                raise PlanError(f"unknown model family {fam!r}")
        if not self.families or not self.test_categories:
            raise PlanError("plan needs at least one family and one test category")
        if self.mode == "holdout":
            if len(set(self.train_categories)) != 5:
                raise PlanError("holdout mode trains on exactly 5 categories")
            held = names - set(self.train_categories)
            if set(self.test_categories) != held:
                raise PlanError("holdout mode tests on exactly the held-out category")
        elif not self.train_categories:
            raise PlanError("plan needs at least one training category")
        if self.train_count < 1 or self.test_count < 1:
            raise PlanError("image counts must be >= 1")
        for fam in self.models:
            if fam not in FAMILIES:
                raise PlanError(f"model overrides for unknown family {fam!r}")
        try:
            for fam in self.families:
                self.network_config(fam)
            for cat in {*self.train_categories, *self.test_categories}:
                self.stimulus_spec(cat, "train")
        except (ValueError, TypeError) as exc:
            raise PlanError(str(exc)) from exc

    @property
    def held_out(self) -> str | None:
        if self.mode != "holdout":
            return None
        return self.test_categories[0]

    def network_config(self, family: str) -> NetworkConfig:
        overrides = dict(self.models.get(family, {}))
        overrides.setdefault("input_resolution", self.resolution)
        return NetworkConfig.default(family, **overrides)

    def stimulus_spec(self, category: str, split: str) -> StimulusSpec:
        return StimulusSpec(StimulusCategory(category), resolution=self.resolution,
                            seed=derive_seed(self.data_seed, split, category), **self.stimulus)

    def train_dataset(self, category: str) -> Dataset:
        return generate_dataset(self.stimulus_spec(category, "train"), ANCHORS, self.train_count)

    def test_dataset(self, category: str) -> Dataset:
        return generate_dataset(self.stimulus_spec(category, "test"), NUMEROSITIES, self.test_count)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "mode": self.mode,
            "train_categories": list(self.train_categories),
            "test_categories": list(self.test_categories),
            "families": list(self.families), "train": self.train.to_dict(),
            "resolution": self.resolution, "data_seed": self.data_seed,
            "train_count": self.train_count, "test_count": self.test_count,
            "stimulus": self.stimulus, "models": self.models, "analysis": self.analysis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        d = dict(d)
        if "train" in d:
            train = dict(d["train"])
            bad = set(train) - {f.name for f in fields(TrainConfig)}
            if bad:
                raise PlanError(f"unknown train keys {sorted(bad)}")
            d["train"] = TrainConfig(**train)
        try:
            return cls(**d)
        except PlanError:
            raise
        except (TypeError, ValueError) as exc:
            raise PlanError(str(exc)) from exc


def _run_job(args):
    net_config, dataset, train_config, seed, category = args
    return train_run(net_config, dataset, train_config, seed, category)


def run_jobs(jobs: list[tuple], workers: int = 1) -> list[TrainedNetwork]:
    """Execute training jobs, in parallel when workers > 1; order is preserved."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def replicate_runs(plan: ExperimentPlan, family: str, category: str,
                   dataset: Dataset | None = None, workers: int = 1) -> list[TrainedNetwork]:
    """One run per replicate seed, returned in seed order."""
    dataset = plan.train_dataset(category) if dataset is None else dataset
    cfg = plan.network_config(family)
    return run_jobs([(cfg, dataset, plan.train, s, category) for s in plan.train.seeds], workers)


def holdout_pool(plan: ExperimentPlan, held_out: str) -> Dataset:
    """Union of the anchor training sets of every category except ``held_out``."""
    cats = [c.value for c in CATEGORIES if c.value != held_out]
    return Dataset.concat(plan.train_dataset(c) for c in cats)


def holdout_train(plan: ExperimentPlan, workers: int = 1,
                  held_out: Sequence[str] | None = None) -> dict[str, dict[str, list[TrainedNetwork]]]:
    """{held_out category: {family: replicate networks}}.

    With ``held_out`` omitted the plan's own held-out category is used.
    """
    if plan.mode != "holdout":
        raise PlanError("holdout_train needs a holdout-mode plan")
    targets = list(held_out) if held_out is not None else [plan.held_out]
    out: dict[str, dict[str, list[TrainedNetwork]]] = {}
    for cat in targets:
        pool = holdout_pool(plan, cat)
        label = f"all-but-{cat}"
        jobs = [(plan.network_config(f), pool, plan.train, s, label)
                for f in plan.families for s in plan.train.seeds]
        nets = run_jobs(jobs, workers)
        per = len(plan.train.seeds)
        out[cat] = {f: nets[i * per:(i + 1) * per] for i, f in enumerate(plan.families)}
    return out


def with_train(plan: ExperimentPlan, **changes) -> ExperimentPlan:
    return replace(plan, train=replace(plan.train, **changes))


# ---------------------------------------------------------------------------
# on-disk cache of trained replicates

_TRAINING_MODULES = ("tensornet.py", "models.py")


def training_source_hash() -> str:
    """Hash of the code that determines a training result.

    Stimulus code is covered by the dataset content hash in the cache key.
    """
    import inspect
    from pathlib import Path

    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in _TRAINING_MODULES:
        h.update((root / name).read_bytes())
    for obj in (TrainConfig, one_hot, _train_arrays, train_run):
        h.update(inspect.getsource(obj).encode())
    return h.hexdigest()


def cache_key(net_config: NetworkConfig, dataset: Dataset, config: TrainConfig, seed: int,
              category: str) -> str:
    doc = json.dumps({"net": net_config.to_dict(), "train": config.to_dict(), "seed": seed,
                      "category": category, "source": training_source_hash(),
                      "data": hashlib.sha256(dataset.content_bytes()).hexdigest()}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:32]


def train_cached(net_config: NetworkConfig, dataset: Dataset, config: TrainConfig, seed: int,
                 category: str, cache_dir) -> TrainedNetwork:
    """train_run, reusing a stored result when sources, data and settings all match."""
    from pathlib import Path

    path = Path(cache_dir) / f"{cache_key(net_config, dataset, config, seed, category)}.json"
    if path.is_file():
        doc = json.loads(path.read_text(encoding="utf-8"))
        params, state, meta = tn.checkpoint_from_dict(doc["checkpoint"])
        return TrainedNetwork(NetworkConfig.from_dict(meta["config"]), params, doc["loss_log"],
                              meta["train_accuracy"], meta["seed"], state, meta["train_category"])
    net = train_run(net_config, dataset, config, seed, category)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"checkpoint": net.checkpoint(optimizer=False), "loss_log": net.loss_log}), encoding="utf-8")
    tmp.replace(path)
    return net


def _run_cached_job(args):
    *job, cache_dir = args
    return train_cached(*job, cache_dir)


def cached_replicates(plan: ExperimentPlan, family: str, category: str, cache_dir,
                      workers: int = 1) -> list[TrainedNetwork]:
    dataset = plan.train_dataset(category)
    cfg = plan.network_config(family)
    jobs = [(cfg, dataset, plan.train, s, category, str(cache_dir)) for s in plan.train.seeds]
    if workers <= 1:
        return [_run_cached_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cached_job, jobs))
