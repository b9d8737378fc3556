"""SGD with momentum, step learning-rate decay, the training driver for every
mode, and per-class accuracy evaluation."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources

import numpy as np

from .data import BundleError, DatasetBundle, SplitSpec, make_batches, select_rows, validate_bundle
from .losses import Batch, BatchLossReport, LossWeights, combine_grads, loss_agg, loss_cumix, loss_mixup_baseline
from .mixing import MixSchedule
from .model import ModelConfig, ModelParams, forward, init_model
from .numerics import DimensionError
from .rng import substream

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class Mode(str, enum.Enum):
    AGG = "agg"
    MIXUP = "mixup"
    CUMIX = "cumix"
    CUMIX_NO_CURRICULUM = "cumix_no_curriculum"
    CUMIX_INPUT_ONLY = "cumix_input_only"
    CUMIX_FEATURE_ONLY = "cumix_feature_only"

    @classmethod
    def parse(cls, name: str) -> "Mode":
        try:
            return cls(str(name).lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(f"unknown mode {name!r}; choose from {[m.value for m in cls]}") from None


ABLATION_GRID = (
    Mode.AGG,
    Mode.MIXUP,
    Mode.CUMIX_INPUT_ONLY,
    Mode.CUMIX_FEATURE_ONLY,
    Mode.CUMIX_NO_CURRICULUM,
    Mode.CUMIX,
)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.001
    epochs: int = 90
    decay_factor: float = 0.1
    decay_epoch: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"optim.lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"optim.momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"optim.weight_decay must be >= 0, got {self.weight_decay}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"optim.epochs must be a positive integer, got {self.epochs}")

    @property
    def resolved_decay_epoch(self) -> int:
        if self.decay_epoch is not None:
            return int(self.decay_epoch)
        return math.ceil(2 * self.epochs / 3)


def lr_at_epoch(cfg: OptimConfig, epoch: int) -> float:
    return cfg.lr if epoch < cfg.resolved_decay_epoch else cfg.lr * cfg.decay_factor


def sgd_step(params: ModelParams, grads, velocity: dict, cfg: OptimConfig, epoch: int):
    """One in-place update: v <- m*v + (g + wd*w); w <- w - lr*v.

    Only trainable tensors move; a frozen omega is never touched.
    """
    lr = lr_at_epoch(cfg, epoch)
    for name in params.trainable_names():
        w = params.tensors[name]
        g = grads[name]
        if g.shape != w.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = cfg.momentum * v + (g + cfg.weight_decay * w)
        velocity[name] = v
        params.tensors[name] = w - lr * v
    return params, velocity


@dataclass(frozen=True)
class ModelOptions:
    hidden_dims: tuple[int, ...] = ()
    embed_dim: int | None = None
    omega_trainable: bool | None = None
    init_seed: int | None = None


@dataclass(frozen=True)
class RunConfig:
    mode: Mode = Mode.CUMIX
    model: ModelOptions = field(default_factory=ModelOptions)
    optim: OptimConfig = field(default_factory=OptimConfig)
    mix: MixSchedule = field(default_factory=lambda: MixSchedule(warmup=30, beta_max=0.8))
    loss: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 128
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "model": {**asdict(self.model), "hidden_dims": list(self.model.hidden_dims)},
            "optim": asdict(self.optim),
            "mix": {"warmup": self.mix.warmup, "beta_max": self.mix.beta_max},
            "loss": asdict(self.loss),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {"model": ModelOptions, "optim": OptimConfig, "loss": LossWeights}
        top = {"mode", "seed", "batch_size", "mix", *sections}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, klass in sections.items():
            sub = d.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{key} must be a mapping")
            allowed = {f.name for f in fields(klass)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown config keys: {sorted(f'{key}.{b}' for b in bad)}")
            if key == "model" and "hidden_dims" in sub:
                sub = {**sub, "hidden_dims": tuple(sub["hidden_dims"])}
            try:
                kwargs[key] = klass(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from None
        mix = d.get("mix", {})
        bad = set(mix) - {"warmup", "beta_max"}
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(f'mix.{b}' for b in bad)}")
        try:
            kwargs["mix"] = MixSchedule(warmup=mix.get("warmup", 30), beta_max=mix.get("beta_max", 0.8))
        except ValueError as exc:
            raise ConfigError(f"mix: {exc}") from None
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        batch_size = d.get("batch_size", 128)
        if not isinstance(batch_size, int) or batch_size < 4:
            raise ConfigError(f"batch_size must be an integer >= 4, got {batch_size!r}")
        return cls(mode=Mode.parse(d.get("mode", "cumix")), seed=seed, batch_size=batch_size, **kwargs)


def load_preset(name: str) -> dict:
    """Named run configuration shipped with the package (e.g. ``cub``, ``synthetic``)."""
    path = resources.files("cumix") / "configs" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"no preset named {name!r}")
    return json.loads(path.read_text())


@dataclass
class EvalResult:
    per_class_accuracy: float
    top1: float
    table: list[dict]

    def to_dict(self) -> dict:
        return {"per_class_accuracy": self.per_class_accuracy, "top1": self.top1, "per_class": self.table}


def class_table(params: ModelParams, bundle: DatasetBundle, classes) -> np.ndarray:
    """Rows of the class table used to score ``classes`` at test time."""
    classes = list(classes)
    if not params.config.omega_trainable:
        return bundle.embeddings[classes]
    row_of = {c: r for r, c in enumerate(params.class_ids)}
    missing = [c for c in classes if c not in row_of]
    if missing:
        raise ValueError(f"a learned classifier cannot score classes it never saw: {missing}")
    return params.tensors["omega"][[row_of[c] for c in classes]]


def evaluate(params: ModelParams, bundle: DatasetBundle, classes, domains) -> EvalResult:
    """Per-class and overall top-1 accuracy, predicting only among ``classes``."""
    classes = [int(c) for c in classes]
    if not classes:
        raise ValueError("class subset is empty")
    rows = select_rows(bundle, classes, domains)
    if rows.size == 0:
        raise ValueError("no samples for the requested classes and domains")
    table = class_table(params, bundle, classes)
    if table.shape[1] != params.config.embed_dim:
        raise DimensionError(f"class table width {table.shape[1]} vs model embed_dim {params.config.embed_dim}")
    logits = forward(params, bundle.features[rows], omega=table).logits
    pred = np.asarray(classes)[np.argmax(logits, axis=1)]
    truth = bundle.labels[rows]
    correct = pred == truth

    out, accs = [], []
    for c in classes:
        mask = truth == c
        count = int(mask.sum())
        if count == 0:
            log.warning("class %d has no evaluation samples and is excluded", c)
            continue
        hits = int(correct[mask].sum())
        accs.append(hits / count)
        out.append({"class_id": c, "name": bundle.class_names[c], "correct": hits, "count": count, "accuracy": hits / count})
    return EvalResult(float(np.mean(accs)), float(correct.mean()), out)


def eval_splits(split: SplitSpec) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
    """Named (classes, domains) evaluation subsets; the first is the setting's target."""
    target = {
        "zsl+dg": ("unseen@test", split.unseen_classes, split.test_domains),
        "dg": ("seen@test", split.seen_classes, split.test_domains),
        "zsl": ("unseen@train", split.unseen_classes, split.train_domains),
        "plain": ("seen@train", split.seen_classes, split.train_domains),
    }[split.setting]
    out = {target[0]: (target[1], target[2])}
    for cname, cls in (("seen", split.seen_classes), ("unseen", split.unseen_classes)):
        for dname, doms in (("train", split.train_domains), ("test", split.test_domains)):
            key = f"{cname}@{dname}"
            if cls and doms and key not in out:
                if cname == "unseen" and not split.zsl:
                    continue
                out[key] = (cls, doms)
    return out


@dataclass
class RunReport:
    mode: str
    seed: int
    setting: str
    config: dict
    epochs: list[dict]
    evaluations: dict[str, dict]
    target_split: str
    batch_hash: str
    wall_clock_seconds: float | None = None

    @property
    def target_accuracy(self) -> float:
        return self.evaluations[self.target_split]["per_class_accuracy"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


EPOCH_CSV_COLUMNS = ("epoch", "loss_agg", "loss_mix_img", "loss_mix_feat", "total", "lr", "alpha", "beta")


def epoch_csv(report: RunReport) -> str:
    lines = [",".join(EPOCH_CSV_COLUMNS)]
    for e in report.epochs:
        lines.append(",".join(repr(float(e[c])) if isinstance(e[c], float) else str(e[c]) for c in EPOCH_CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def _resolve_model(bundle: DatasetBundle, split: SplitSpec, cfg: RunConfig) -> tuple[ModelConfig, np.ndarray | None]:
    opts = cfg.model
    trainable = opts.omega_trainable if opts.omega_trainable is not None else not split.zsl
    if split.zsl and trainable:
        raise ConfigError("unseen-class evaluation needs a frozen omega (model.omega_trainable=false)")
    seen = list(split.seen_classes)
    embeddings = None
    if trainable:
        embed_dim = opts.embed_dim if opts.embed_dim is not None else len(seen)
    else:
        embeddings = bundle.embeddings[seen]
        embed_dim = bundle.embed_dim
        if opts.embed_dim is not None and opts.embed_dim != embed_dim:
            raise ConfigError(f"model.embed_dim={opts.embed_dim} but the class embeddings have width {embed_dim}")
    try:
        mcfg = ModelConfig(
            input_dim=bundle.feature_dim,
            embed_dim=embed_dim,
            num_classes=len(seen),
            hidden_dims=opts.hidden_dims,
            omega_trainable=trainable,
            init_seed=cfg.seed if opts.init_seed is None else opts.init_seed,
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    return mcfg, embeddings


def _mean(values) -> float:
    total = 0.0
    for v in values:
        total += v
    return float(total) / len(values)


def train_run(bundle: DatasetBundle, split: SplitSpec, cfg: RunConfig, eval_sets=None) -> tuple[ModelParams, RunReport]:
    """Train one model under ``cfg.mode`` and evaluate it.

    Deterministic in the master seed: model init, batch order and every
    mixing draw come from named substreams of ``cfg.seed``.
    """
    problems = validate_bundle(bundle, split)
    if problems:
        raise BundleError("; ".join(problems))
    mcfg, embeddings = _resolve_model(bundle, split, cfg)
    mode = cfg.mode
    if mode is Mode.CUMIX_INPUT_ONLY:
        weights = LossWeights(cfg.loss.eta_img, 0.0)
    elif mode is Mode.CUMIX_FEATURE_ONLY:
        weights = LossWeights(0.0, cfg.loss.eta_feat)
    else:
        weights = cfg.loss
    # the single-term ablations follow the no-curriculum rows of the ablation table
    curriculum = mode is Mode.CUMIX
    schedule = replace(cfg.mix, curriculum=curriculum)
    collapse = not mcfg.hidden_dims
    seen_row = {c: r for r, c in enumerate(split.seen_classes)}
    label_rows = np.array([seen_row.get(int(c), -1) for c in bundle.labels])
    eval_sets = eval_splits(split) if eval_sets is None else eval_sets

    params = init_model(mcfg, embeddings, class_ids=split.seen_classes)
    velocity: dict = {}
    batch_digest = hashlib.sha256()
    history = []
    start = time.perf_counter()
    for epoch in range(cfg.optim.epochs):
        lr = lr_at_epoch(cfg.optim, epoch)
        batches = make_batches(bundle, split, cfg.batch_size, epoch, cfg.seed)
        reports: list[BatchLossReport] = []
        for b, idx in enumerate(batches):
            batch_digest.update(idx.astype("<i8").tobytes())
            batch = Batch(bundle.features[idx], label_rows[idx], bundle.domains[idx])
            if mode is Mode.AGG:
                value, grads = loss_agg(params, batch)
                rep = BatchLossReport(value, 0.0, 0.0, value, 0, 0, 0.0, 0.0)
            elif mode is Mode.MIXUP:
                agg, g_agg = loss_agg(params, batch)
                mix, g_mix = loss_mixup_baseline(params, batch, cfg.mix.beta_max, substream(cfg.seed, "mix.pair", epoch, b))
                grads = combine_grads(params, [(1.0, g_agg), (weights.eta_img, g_mix)])
                rep = BatchLossReport(agg, mix, 0.0, agg + weights.eta_img * mix, 0, 0, 0.0, cfg.mix.beta_max)
            else:
                rep, grads = loss_cumix(
                    params, batch, epoch, schedule, weights,
                    rng_img=substream(cfg.seed, "mix.input", epoch, b),
                    rng_feat=substream(cfg.seed, "mix.feature", epoch, b),
                    collapse=collapse,
                )
            if not np.isfinite(rep.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            sgd_step(params, grads, velocity, cfg.optim, epoch)
            reports.append(rep)
        history.append({
            "epoch": epoch,
            "loss_agg": _mean([r.loss_agg for r in reports]),
            "loss_mix_img": _mean([r.loss_mix_img for r in reports]),
            "loss_mix_feat": _mean([r.loss_mix_feat for r in reports]),
            "total": _mean([r.total for r in reports]),
            "lr": lr,
            "alpha": reports[0].alpha,
            "beta": reports[0].beta,
            "n_cross": sum(r.n_cross for r in reports),
            "n_intra": sum(r.n_intra for r in reports),
            "n_batches": len(reports),
        })
        log.debug("epoch %d total %.5f", epoch, history[-1]["total"])
    elapsed = time.perf_counter() - start

    evaluations = {name: evaluate(params, bundle, c, d).to_dict() for name, (c, d) in eval_sets.items()}
    report = RunReport(
        mode=mode.value,
        seed=cfg.seed,
        setting=split.setting,
        config=cfg.to_dict(),
        epochs=history,
        evaluations=evaluations,
        target_split=next(iter(eval_sets)),
        batch_hash=batch_digest.hexdigest()[:16],
        wall_clock_seconds=elapsed,
    )
    return params, report
