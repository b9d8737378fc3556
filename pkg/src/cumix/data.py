"""Dataset bundles on disk, split validation, domain-stratified batching and a
synthetic benchmark with both unseen classes and an unseen domain.

Directory layout (little-endian throughout)::

    features.bin    "CMX1", u16 version, u32 rows, u32 cols, float32 row-major
    embeddings.bin  same layout, row r = embedding of class id r
    labels.csv      index,class_id,domain_id
    manifest.json   name, feature_dim, embed_dim, num_samples, class_names, domain_names
    splits.json     seen_classes, unseen_classes, train_domains, test_domains
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import substream

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"CMX1"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<4sHII")

REQUIRED_FILES = ("features.bin", "embeddings.bin", "labels.csv", "manifest.json", "splits.json")


class BundleError(ValueError):
    """Unreadable or inconsistent dataset directory."""


@dataclass(frozen=True)
class DatasetBundle:
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    class_names: tuple[str, ...]
    domain_names: tuple[str, ...]
    embeddings: np.ndarray
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]
    train_domains: tuple[int, ...]
    test_domains: tuple[int, ...]

    def __post_init__(self):
        for f in ("seen_classes", "unseen_classes", "train_domains", "test_domains"):
            object.__setattr__(self, f, tuple(int(v) for v in getattr(self, f)))

    @property
    def zsl(self) -> bool:
        return bool(self.unseen_classes)

    @property
    def dg(self) -> bool:
        return bool(self.test_domains) and set(self.test_domains) != set(self.train_domains)

    @property
    def setting(self) -> str:
        if self.zsl and self.dg:
            return "zsl+dg"
        if self.zsl:
            return "zsl"
        # no held-out classes or domains: ordinary supervised training
        return "dg" if self.dg else "plain"


def write_tensor(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"tensor files hold 2-D matrices, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise BundleError(f"{path}: file too short for a tensor header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise BundleError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise BundleError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise BundleError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    return arr.astype(np.float64).reshape(rows, cols)


def l2_normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if zero.any():
        log.warning("rows %s have zero norm and are left unnormalized", np.flatnonzero(zero).tolist())
    return np.where(norms > 0.0, m / np.where(norms > 0.0, norms, 1.0), m)


def validate_bundle(bundle: DatasetBundle, split: SplitSpec) -> list[str]:
    problems: list[str] = []
    n = len(bundle.labels)
    n_cls, n_dom = len(bundle.class_names), len(bundle.domain_names)
    if n == 0:
        problems.append("bundle has no samples")
    if bundle.features.ndim != 2 or bundle.features.shape[0] != n:
        problems.append(f"features have shape {bundle.features.shape} but there are {n} labels")
    if len(bundle.domains) != n:
        problems.append(f"{len(bundle.domains)} domain ids for {n} samples")
    bad = np.flatnonzero((bundle.labels < 0) | (bundle.labels >= n_cls))
    if bad.size:
        problems.append(f"row {int(bad[0])}: class id {int(bundle.labels[bad[0]])} outside {n_cls} classes")
    bad = np.flatnonzero((bundle.domains < 0) | (bundle.domains >= n_dom))
    if bad.size:
        problems.append(f"row {int(bad[0])}: domain id {int(bundle.domains[bad[0]])} outside {n_dom} domains")
    if bundle.embeddings.shape[0] != n_cls:
        problems.append(f"embeddings have {bundle.embeddings.shape[0]} rows for {n_cls} classes")
    if not np.all(np.isfinite(bundle.features)) or not np.all(np.isfinite(bundle.embeddings)):
        problems.append("non-finite values in features or embeddings")

    for f, limit in (("seen_classes", n_cls), ("unseen_classes", n_cls), ("train_domains", n_dom), ("test_domains", n_dom)):
        ids = getattr(split, f)
        out = [i for i in ids if not 0 <= i < limit]
        if out:
            problems.append(f"splits: {f} references unknown ids {out}")
        if len(set(ids)) != len(ids):
            problems.append(f"splits: {f} has duplicate ids")
    if not split.seen_classes:
        problems.append("splits: no seen classes")
    if not split.train_domains:
        problems.append("splits: no training domains")
    overlap = set(split.seen_classes) & set(split.unseen_classes)
    if overlap:
        problems.append(f"splits: seen and unseen classes overlap on {sorted(overlap)}")
    if split.dg:
        overlap = set(split.train_domains) & set(split.test_domains)
        if overlap:
            problems.append(f"splits: train and test domains overlap on {sorted(overlap)}")
    return problems


def _check_writable(dir_path: Path, force: bool) -> None:
    if dir_path.exists() and any(dir_path.iterdir()) and not force:
        raise FileExistsError(f"{dir_path} exists and is not empty (pass force=True to overwrite)")
    dir_path.mkdir(parents=True, exist_ok=True)


def write_bundle(bundle: DatasetBundle, split: SplitSpec, dir_path, force: bool = False) -> None:
    if len(bundle) == 0:
        raise BundleError("refusing to write an empty bundle")
    problems = validate_bundle(bundle, split)
    if problems:
        raise BundleError("; ".join(problems))
    dir_path = Path(dir_path)
    _check_writable(dir_path, force)
    write_tensor(dir_path / "features.bin", bundle.features)
    write_tensor(dir_path / "embeddings.bin", bundle.embeddings)
    with open(dir_path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "class_id", "domain_id"])
        for i, (c, d) in enumerate(zip(bundle.labels.tolist(), bundle.domains.tolist())):
            w.writerow([i, c, d])
    manifest = {
        "name": bundle.name,
        "feature_dim": bundle.feature_dim,
        "embed_dim": bundle.embed_dim,
        "num_samples": len(bundle),
        "class_names": list(bundle.class_names),
        "domain_names": list(bundle.domain_names),
    }
    (dir_path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    splits = {k: list(v) for k, v in asdict(split).items()}
    (dir_path / "splits.json").write_text(json.dumps(splits, indent=2) + "\n")


def _read_labels(path: Path) -> tuple[np.ndarray, np.ndarray]:
    labels, domains = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "class_id", "domain_id"]:
            raise BundleError(f"{path}: header must be index,class_id,domain_id, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise BundleError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                idx, c, d = (int(v) for v in row)
            except ValueError:
                raise BundleError(f"{path}:{lineno}: non-integer field in {row}") from None
            if idx != len(labels):
                raise BundleError(f"{path}:{lineno}: index {idx} out of sequence, expected {len(labels)}")
            labels.append(c)
            domains.append(d)
    return np.array(labels, dtype=np.int64), np.array(domains, dtype=np.int64)


def load_bundle(dir_path) -> tuple[DatasetBundle, SplitSpec]:
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise BundleError(f"{dir_path}: not a directory")
    for name in REQUIRED_FILES:
        if not (dir_path / name).is_file():
            raise BundleError(f"{dir_path}: missing {name}")
    try:
        manifest = json.loads((dir_path / "manifest.json").read_text())
        splits = json.loads((dir_path / "splits.json").read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"{dir_path}: malformed JSON: {exc}") from None
    for key in ("class_names", "domain_names"):
        if key not in manifest:
            raise BundleError(f"{dir_path}/manifest.json: missing {key}")
    try:
        split = SplitSpec(**{k: splits[k] for k in ("seen_classes", "unseen_classes", "train_domains", "test_domains")})
    except KeyError as exc:
        raise BundleError(f"{dir_path}/splits.json: missing {exc.args[0]}") from None

    features = read_tensor(dir_path / "features.bin")
    embeddings = read_tensor(dir_path / "embeddings.bin")
    labels, domains = _read_labels(dir_path / "labels.csv")
    if features.shape[0] != len(labels):
        raise BundleError(f"{dir_path}: features.bin has {features.shape[0]} rows, labels.csv has {len(labels)}")
    for key, actual in (("num_samples", len(labels)), ("feature_dim", features.shape[1]), ("embed_dim", embeddings.shape[1])):
        if key in manifest and manifest[key] != actual:
            raise BundleError(f"{dir_path}/manifest.json: {key}={manifest[key]} but files give {actual}")
    bundle = DatasetBundle(
        features, labels, domains,
        tuple(manifest["class_names"]), tuple(manifest["domain_names"]),
        embeddings, manifest.get("name", dir_path.name),
    )
    problems = validate_bundle(bundle, split)
    if problems:
        raise BundleError(f"{dir_path}: " + "; ".join(problems))
    return bundle, split


def select_rows(bundle: DatasetBundle, classes, domains) -> np.ndarray:
    mask = np.isin(bundle.labels, list(classes)) & np.isin(bundle.domains, list(domains))
    return np.flatnonzero(mask)


def make_batches(bundle: DatasetBundle, split: SplitSpec, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Shuffle the training rows into domain-stratified batches.

    Each domain's rows are shuffled and cut into pairs (a leftover row joins
    the last pair), and pairs from all domains are interleaved in proportion
    to domain size. Batches are then packed from whole pairs, so every
    domain present in a batch has at least two rows in it and most batches
    see several domains. The last batch may be smaller.
    """
    if batch_size < 4:
        raise ValueError(f"batch_size must be >= 4, got {batch_size}")
    rows = select_rows(bundle, split.seen_classes, split.train_domains)
    if rows.size == 0:
        raise BundleError("no training rows for the seen classes in the training domains")
    present = np.unique(bundle.domains[rows])
    if split.dg and present.size < 2:
        raise ValueError(f"domain generalization needs >= 2 training domains, found {present.size}")

    rng = substream(seed, "batch-shuffle", epoch)
    units: list[np.ndarray] = []
    keys: list[float] = []
    for d in present:
        idx = rows[bundle.domains[rows] == d]
        idx = idx[rng.permutation(idx.size)]
        n_units = max(1, idx.size // 2)
        cuts = [idx[2 * u: 2 * u + 2] for u in range(n_units)]
        if idx.size > 2 * n_units:
            if batch_size >= 6:
                cuts[-1] = idx[2 * n_units - 2:]
            else:
                cuts.append(idx[2 * n_units:])
        jitter = rng.random(len(cuts))
        for u, cut in enumerate(cuts):
            units.append(cut)
            keys.append((u + jitter[u]) / len(cuts))
    order = np.argsort(np.array(keys), kind="stable")

    batches: list[np.ndarray] = []
    current: list[np.ndarray] = []
    size = 0
    for u in order:
        unit = units[u]
        if size and size + unit.size > batch_size:
            batches.append(np.concatenate(current))
            current, size = [], 0
        current.append(unit)
        size += unit.size
    if current:
        batches.append(np.concatenate(current))
    return batches


@dataclass(frozen=True)
class SynthConfig:
    attr_dim: int = 16
    input_dim: int = 64
    n_seen_classes: int = 8
    n_unseen_classes: int = 4
    # (rotation angle in degrees, bias scale) per domain
    train_domain_params: tuple[tuple[float, float], ...] = ((0.0, 0.5), (15.0, 0.5), (30.0, 0.5))
    test_domain_params: tuple[tuple[float, float], ...] = ((45.0, 0.5),)
    samples_per_class_per_domain: int = 50
    noise_sigma: float = 0.1
    seed: int = 0
    # calibration constants
    signal_scale: float = 0.25
    plane_in_signal_span: bool = True

    def __post_init__(self):
        object.__setattr__(self, "train_domain_params", tuple(tuple(map(float, p)) for p in self.train_domain_params))
        object.__setattr__(self, "test_domain_params", tuple(tuple(map(float, p)) for p in self.test_domain_params))
        counts = (self.attr_dim, self.input_dim, self.n_seen_classes, self.samples_per_class_per_domain)
        if any(int(c) != c or c < 1 for c in counts) or self.n_unseen_classes < 0:
            raise ValueError("synthetic config counts must be positive integers")
        if not self.train_domain_params:
            raise ValueError("at least one training domain is required")
        if any(len(p) != 2 for p in self.train_domain_params + self.test_domain_params):
            raise ValueError("domain params are (angle_degrees, bias_scale) pairs")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2 to hold a rotation plane")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_domain_params"] = [list(p) for p in self.train_domain_params]
        d["test_domain_params"] = [list(p) for p in self.test_domain_params]
        return d


def _rotation(u1: np.ndarray, u2: np.ndarray, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    dim = u1.size
    return (
        np.eye(dim)
        + (math.cos(t) - 1.0) * (np.outer(u1, u1) + np.outer(u2, u2))
        + math.sin(t) * (np.outer(u2, u1) - np.outer(u1, u2))
    )


def generate_synthetic(cfg: SynthConfig) -> tuple[DatasetBundle, SplitSpec]:
    """Sample a ZSL+DG benchmark: x = R_d (M a_y) + b_d + noise.

    Class attribute vectors a_y (unit norm) double as the class embeddings.
    Each domain rotates the class prototypes M a_y inside one fixed plane
    and adds its own offset b_d. Every class is sampled in every domain; the
    split decides what training may see.
    """
    n_cls = cfg.n_seen_classes + cfg.n_unseen_classes
    attrs = l2_normalize_rows(substream(cfg.seed, "synth.attributes").standard_normal((n_cls, cfg.attr_dim)))
    mapping = substream(cfg.seed, "synth.map").standard_normal((cfg.attr_dim, cfg.input_dim))
    mapping *= cfg.signal_scale / math.sqrt(cfg.attr_dim)
    plane = substream(cfg.seed, "synth.plane").standard_normal((2, cfg.attr_dim if cfg.plane_in_signal_span else cfg.input_dim))
    if cfg.plane_in_signal_span:
        plane = plane @ mapping
    u1, u2 = np.linalg.svd(plane, full_matrices=False)[2][:2]
    prototypes = attrs @ mapping  # (classes, input_dim)

    domain_params = cfg.train_domain_params + cfg.test_domain_params
    bias_rng = substream(cfg.seed, "synth.bias")
    noise_rng = substream(cfg.seed, "synth.noise")
    per = cfg.samples_per_class_per_domain
    feats, labels, domains = [], [], []
    for d, (angle, bias_scale) in enumerate(domain_params):
        direction = l2_normalize_rows(bias_rng.standard_normal((1, cfg.input_dim)))[0]
        rot = _rotation(u1, u2, angle)
        shifted = prototypes @ rot.T + bias_scale * direction
        for c in range(n_cls):
            noise = noise_rng.standard_normal((per, cfg.input_dim)) * cfg.noise_sigma
            feats.append(shifted[c] + noise)
            labels.append(np.full(per, c))
            domains.append(np.full(per, d))

    n_train = len(cfg.train_domain_params)
    bundle = DatasetBundle(
        features=np.concatenate(feats),
        labels=np.concatenate(labels).astype(np.int64),
        domains=np.concatenate(domains).astype(np.int64),
        class_names=tuple(f"class{c:02d}" for c in range(n_cls)),
        domain_names=tuple(f"train{d}" for d in range(n_train))
        + tuple(f"test{d}" for d in range(len(cfg.test_domain_params))),
        embeddings=attrs,
        name=f"synthetic-{cfg.seed}",
    )
    split = SplitSpec(
        seen_classes=tuple(range(cfg.n_seen_classes)),
        unseen_classes=tuple(range(cfg.n_seen_classes, n_cls)),
        train_domains=tuple(range(n_train)),
        test_domains=tuple(range(n_train, len(domain_params))),
    )
    return bundle, split
