"""Experiment orchestration: train, evaluate, perturb, attack and report.

Every sweep returns :class:`ResultRecord` rows. A row carries the config hash
and seed of the run that produced it, so the command can be reissued.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attacks, audio_io, features, models
from .errors import DataError
from .features import MfccConfig, NormStats
from .lca import LcaConfig
from .models import Classifier, ModelParams, ModelSpec, TrainConfig

log = logging.getLogger(__name__)

COMMANDS = ("train", "eval", "perturb", "attack", "report")
SNR_GRID = (15.0, 20.0, 24.0, 25.0, math.inf)
WHITE_BOX_EPS = (0.0, 0.01, 0.016, 0.02, 0.03)
GAUSSIAN_EPS = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
REPORT_COLUMNS = ("model", "experiment", "sweep_param", "sweep_value", "accuracy", "n", "seed",
                  "runtime_s", "config_hash")
DISPLAY_NAMES = {"cnn": "cnn", "lcanet": "lcanet", "lcanet_pp": "lcanet++"}
SPLIT_SEED = 0  # fixed so every model and seed sees the same train/test partition
ATTACK_BATCH = 64


class UsageError(ValueError):
    """Command-line arguments are inconsistent."""


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    model: str = "lcanet_pp"
    data_root: Optional[str] = None
    classes: tuple[str, ...] = ("yes", "no", "stop")
    epochs: int = 20
    lr: float = 1e-4
    lam: float = 1.0
    seed: int = 0
    snr: tuple[float, ...] = ()
    attack: Optional[str] = None
    eps: tuple[float, ...] = ()
    checkpoint: Optional[str] = None
    out: Optional[str] = None
    format: str = "csv"
    channels: tuple[int, int] = (32, 64)
    lca_iters: int = 50
    batch_size: int = 32
    pgd_steps: int = 10
    inputs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        object.__setattr__(self, "model", models.canonical_variant(self.model))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "snr", tuple(float(v) for v in self.snr))
        object.__setattr__(self, "eps", tuple(float(v) for v in self.eps))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.format not in ("csv", "json"):
            raise UsageError("format must be csv or json")
        if self.attack is not None and self.attack not in attacks.KINDS:
            raise UsageError(f"unknown attack {self.attack!r}")
        if any(e < 0 for e in self.eps):
            raise UsageError("epsilon values must be >= 0")

    def validate(self) -> None:
        """Check the per-command requirements that do not touch the file system."""
        c = self.command
        if c in ("train", "eval", "perturb", "attack") and not self.data_root:
            raise UsageError(f"{c} needs --data-root")
        if c in ("train", "eval", "perturb", "attack") and not self.checkpoint:
            raise UsageError(f"{c} needs --checkpoint")
        if c == "perturb" and not self.snr and not (self.attack == "gaussian" and self.eps):
            raise UsageError("perturb needs --snr LIST or --attack gaussian --eps LIST")
        if c == "perturb" and self.attack not in (None, "gaussian"):
            raise UsageError("perturb only supports --attack gaussian; use the attack command")
        if c == "attack" and (not self.attack or not self.eps):
            raise UsageError("attack needs --attack and a nonempty --eps LIST")
        if c == "report" and (not self.inputs or not self.out):
            raise UsageError("report needs input files and --out")

    def config_hash(self) -> str:
        """Short digest of every field that changes results.

        Output location and format are excluded. The checkpoint is identified
        by the digest of its content rather than its path.
        """
        d = asdict(self)
        for k in ("out", "format"):
            d.pop(k)
        d["data_root"] = str(Path(self.data_root).resolve()) if self.data_root else None
        if self.command != "train" and self.checkpoint and Path(self.checkpoint).is_file():
            d["checkpoint"] = _file_digest(self.checkpoint)
        d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
        text = json.dumps(d, sort_keys=True, allow_nan=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ResultRecord:
    model: str
    experiment: str
    sweep_param: str
    sweep_value: float
    accuracy: float
    n: int
    seed: int
    runtime_s: float
    config_hash: str

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _row(r: ResultRecord) -> dict:
    return {"model": r.model, "experiment": r.experiment, "sweep_param": r.sweep_param,
            "sweep_value": _fmt(r.sweep_value), "accuracy": _fmt(r.accuracy), "n": str(r.n),
            "seed": str(r.seed), "runtime_s": _fmt(r.runtime_s), "config_hash": r.config_hash}


def _json_number(text: str):
    v = float(text)
    # JSON has no infinity literal
    return text if math.isinf(v) else v


def format_report(records: Sequence[ResultRecord], fmt: str) -> str:
    if not records:
        raise ValueError("no records to report")
    rows = [_row(r) for r in records]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "json":
        objs = [{k: (_json_number(v) if k in ("sweep_value", "accuracy", "runtime_s") else
                     int(v) if k in ("n", "seed") else v) for k, v in row.items()} for row in rows]
        return json.dumps(objs, indent=1) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(records: Sequence[ResultRecord], fmt: str, path) -> Path:
    """Write ``records`` atomically as CSV or JSON."""
    text = format_report(records, fmt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _record(d: dict) -> ResultRecord:
    missing = set(REPORT_COLUMNS) - set(d)
    if missing:
        raise DataError(f"report row lacks fields {sorted(missing)}")
    return ResultRecord(str(d["model"]), str(d["experiment"]), str(d["sweep_param"]),
                        float(d["sweep_value"]), float(d["accuracy"]), int(d["n"]),
                        int(d["seed"]), float(d["runtime_s"]), str(d["config_hash"]))


def read_report(path) -> list[ResultRecord]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        if text.lstrip().startswith("["):
            return [_record(d) for d in json.loads(text)]
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return [_record(d) for d in reader]
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable report ({exc})") from exc


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def default_cache_dir() -> Path:
    base = os.environ.get("XDG_CACHE_HOME") or Path.home() / ".cache"
    return Path(base) / "lcanetpp"


class FeatureStore:
    """Normalized clean feature maps, cached on disk.

    Records are keyed by (absolute clip path, MFCC config digest, normalizer
    digest). ``cache_dir=None`` disables the disk cache.
    """

    def __init__(self, mfcc: MfccConfig, cache_dir: Optional[Path] = None):
        self.mfcc = mfcc
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.hits = 0
        self.misses = 0

    def _key(self, path, stats: NormStats) -> Path:
        ident = f"{Path(path).resolve()}|{self.mfcc.digest()}|{stats.digest()}"
        return self.cache_dir / (hashlib.sha256(ident.encode()).hexdigest()[:32] + ".mfcc")

    def normalized(self, entries: Sequence[audio_io.Entry], stats: NormStats) -> np.ndarray:
        out = []
        for e in entries:
            key = self._key(e.path, stats) if self.cache_dir is not None else None
            if key is not None and key.exists():
                try:
                    out.append(features.read_feature_record(key))
                    self.hits += 1
                    continue
                except DataError:
                    log.warning("discarding corrupt cache record %s", key)
            self.misses += 1
            fm = features.apply_normalizer(
                features.compute_mfcc(audio_io.read_wav(e.path), self.mfcc), stats)
            if key is not None:
                key.parent.mkdir(parents=True, exist_ok=True)
                features.write_feature_record(key, fm)
            out.append(fm)
        return _stack(out, self.mfcc)


def _stack(maps, mfcc: MfccConfig) -> np.ndarray:
    if not maps:
        return np.zeros((0, 1, mfcc.n_coeffs, mfcc.n_frames), np.float32)
    return np.concatenate(maps).astype(np.float32)


@dataclass
class Experiment:
    """A loaded checkpoint together with the data it was trained on."""

    params: ModelParams
    spec: ModelSpec
    index: audio_io.DatasetIndex
    stats: NormStats
    mfcc: MfccConfig
    store: FeatureStore
    metadata: dict = field(default_factory=dict)

    @property
    def classifier(self) -> Classifier:
        return Classifier(self.params, self.spec)

    def split(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        entries = self.index.split(tag)
        if not entries:
            raise DataError(f"the {tag} split is empty")
        x = self.store.normalized(entries, self.stats)
        return x, np.array([e.label for e in entries])


def _index(data_root, classes) -> audio_io.DatasetIndex:
    return audio_io.index_dataset(data_root, list(classes), seed=SPLIT_SEED)


def train_model(data_root, spec: ModelSpec, classes: Sequence[str], train_cfg: TrainConfig,
                checkpoint, mfcc: MfccConfig = MfccConfig(),
                cache_dir: Optional[Path] = None) -> Experiment:
    """Extract features, fit the normalizer on the training split, train and checkpoint."""
    index = _index(data_root, classes)
    train = index.split("train")
    if not train:
        raise DataError(f"no training clips under {data_root}")
    raw = [features.compute_mfcc(audio_io.read_wav(e.path), mfcc) for e in train]
    stats = features.fit_normalizer(raw)
    x = _stack([features.apply_normalizer(fm, stats) for fm in raw], mfcc)
    y = np.array([e.label for e in train])
    params, history = models.fit(spec, x, y, train_cfg)
    metadata = {"classes": list(classes), "split_seed": SPLIT_SEED, "mfcc": asdict(mfcc),
                "train": asdict(train_cfg),
                "history": [{"epoch": m.epoch, "loss": m.loss, "accuracy": m.accuracy}
                            for m in history]}
    models.save_checkpoint(params, spec, checkpoint,
                           extras={"norm.mean": stats.mean, "norm.std": stats.std},
                           metadata=metadata)
    return Experiment(params, spec, index, stats, mfcc, FeatureStore(mfcc, cache_dir), metadata)


def load_experiment(checkpoint, data_root, cache_dir: Optional[Path] = None,
                    expect_variant: Optional[str] = None) -> Experiment:
    path = Path(checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    ck = models.load_checkpoint(path, expect_variant)
    if "norm.mean" not in ck.extras or "classes" not in ck.metadata:
        raise DataError(f"{path}: checkpoint lacks normalizer statistics or class list")
    stats = NormStats(ck.extras["norm.mean"], ck.extras["norm.std"])
    mfcc = MfccConfig(**ck.metadata.get("mfcc", {}))
    index = audio_io.index_dataset(data_root, ck.metadata["classes"],
                                   seed=ck.metadata.get("split_seed", SPLIT_SEED))
    return Experiment(ck.params, ck.spec, index, stats, mfcc, FeatureStore(mfcc, cache_dir),
                      ck.metadata)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def run_clean_eval(exp: Experiment, seed: int = 0, config_hash: str = "") -> ResultRecord:
    t0 = time.perf_counter()
    x, y = exp.split("test")
    acc = models.evaluate(exp.params, exp.spec, x, y)
    return ResultRecord(DISPLAY_NAMES[exp.spec.variant], "clean", "epsilon", 0.0, acc, len(y),
                        seed, time.perf_counter() - t0, config_hash)


def run_background_noise_sweep(exp: Experiment, snr_list: Sequence[float] = SNR_GRID,
                               seed: int = 0, config_hash: str = "") -> list[ResultRecord]:
    """Mix background noise into every test waveform at each SNR and evaluate.

    Each clip's noise file and crop depend only on (seed, clip position), so
    rows differ only in the noise gain.
    """
    if not snr_list:
        raise ValueError("SNR list is empty")
    entries = exp.index.split("test")
    if not entries:
        raise DataError("the test split is empty")
    if any(math.isfinite(s) for s in snr_list) and not exp.index.noise_files:
        raise DataError(f"no background-noise files under {exp.index.root / audio_io.NOISE_DIR}")
    clips = audio_io.load_clips(entries)
    y = np.array([e.label for e in entries])
    noises = [audio_io.read_wav(p, canonical=False) for p in exp.index.noise_files]
    choice = []
    for i in range(len(entries)):
        rng = np.random.default_rng([seed, i])
        choice.append((int(rng.integers(len(noises))) if noises else -1,
                       int(rng.integers(2**31))))
    rows = []
    for snr in snr_list:
        t0 = time.perf_counter()
        if math.isinf(snr) and snr > 0:
            x, _ = exp.split("test")
        else:
            maps = []
            for clip, (k, crop_seed) in zip(clips, choice):
                mixed = audio_io.mix_at_snr(clip, noises[k], snr, crop_seed)
                maps.append(features.apply_normalizer(features.compute_mfcc(mixed, exp.mfcc),
                                                      exp.stats))
            x = _stack(maps, exp.mfcc)
        acc = models.evaluate(exp.params, exp.spec, x, y)
        rows.append(ResultRecord(DISPLAY_NAMES[exp.spec.variant], "background_noise", "snr_db",
                                 float(snr), acc, len(y), seed, time.perf_counter() - t0,
                                 config_hash))
    return rows


def _batched(fn, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(x[i:i + ATTACK_BATCH], y[i:i + ATTACK_BATCH])
                           for i in range(0, len(x), ATTACK_BATCH)])


def surrogate_spec(target: ModelSpec) -> ModelSpec:
    return ModelSpec("cnn", target.n_classes, target.input_hw, target.channels, target.kernel,
                     target.pad, target.lca)


def run_attack_sweep(exp: Experiment, config: attacks.AttackConfig, eps_list: Sequence[float],
                     seed: int = 0, config_hash: str = "",
                     surrogate_config: Optional[TrainConfig] = None) -> list[ResultRecord]:
    """One row per epsilon; evasion adds a row with surrogate query count and agreement.

    ``config.epsilon`` is ignored in favour of ``eps_list``.
    """
    if not eps_list:
        raise ValueError("epsilon list is empty")
    x, y = exp.split("test")
    target = exp.classifier
    name = DISPLAY_NAMES[exp.spec.variant]
    rows = []
    surrogate = None
    if config.kind == "evasion":
        t0 = time.perf_counter()
        oracle = attacks.QueryOracle.from_classifier(target)
        probes, _ = exp.split("train")
        cfg = surrogate_config or TrainConfig(seed=seed)
        sur = attacks.train_surrogate(oracle, probes, surrogate_spec(exp.spec), cfg)
        surrogate = sur.classifier
        agree = attacks.agreement(attacks.QueryOracle.from_classifier(target), surrogate, x)
        rows.append(ResultRecord(name, "evasion_surrogate", "queries", float(sur.queries), agree,
                                 len(y), seed, time.perf_counter() - t0, config_hash))
    for eps in eps_list:
        t0 = time.perf_counter()
        if config.kind == "gaussian":
            xa = attacks.gaussian_perturb(x, eps, seed)
        elif config.kind == "fgsm":
            xa = _batched(lambda a, b: attacks.fgsm(target, a, b, eps), x, y)
        elif config.kind == "pgd":
            alpha = eps / 4 if config.pgd_alpha is None else config.pgd_alpha
            xa = _batched(lambda a, b: attacks.pgd(target, a, b, eps, alpha, config.pgd_steps,
                                                   seed), x, y)
        else:
            xa = _batched(lambda a, b: attacks.evasion_attack(surrogate, a, b, eps), x, y)
        acc = models.evaluate(exp.params, exp.spec, xa, y)
        rows.append(ResultRecord(name, config.kind, "epsilon", float(eps), acc, len(y), seed,
                                 time.perf_counter() - t0, config_hash))
    return rows


# ---------------------------------------------------------------------------
# command dispatch
# ---------------------------------------------------------------------------

def model_spec(cfg: ExperimentConfig, n_classes: int) -> ModelSpec:
    return ModelSpec(cfg.model, n_classes=n_classes, channels=cfg.channels,
                     lca=LcaConfig(lam=cfg.lam, n_iter=cfg.lca_iters))


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)


def run(cfg: ExperimentConfig, cache_dir: Optional[Path] = None) -> list[ResultRecord]:
    """Execute one command and return its result rows (written to ``cfg.out`` if set)."""
    cfg.validate()
    h = cfg.config_hash()
    if cfg.command == "report":
        records = [r for p in cfg.inputs for r in read_report(p)]
        if not records:
            raise DataError("input reports contain no rows")
        emit_report(records, cfg.format, cfg.out)
        return records
    if cfg.command == "train":
        exp = train_model(cfg.data_root, model_spec(cfg, len(cfg.classes)), cfg.classes,
                          train_config(cfg), cfg.checkpoint, cache_dir=cache_dir)
        records = [run_clean_eval(exp, cfg.seed, h)]
    else:
        exp = load_experiment(cfg.checkpoint, cfg.data_root, cache_dir)
        if cfg.command == "eval":
            records = [run_clean_eval(exp, cfg.seed, h)]
        elif cfg.command == "perturb" and cfg.snr:
            records = run_background_noise_sweep(exp, cfg.snr, cfg.seed, h)
        else:
            acfg = attacks.AttackConfig(cfg.attack, max(cfg.eps), cfg.pgd_steps, seed=cfg.seed)
            records = run_attack_sweep(exp, acfg, cfg.eps, cfg.seed, h,
                                       surrogate_config=train_config(cfg))
    if cfg.out:
        emit_report(records, cfg.format, cfg.out)
    return records


def config_from_dict(d: dict) -> ExperimentConfig:
    names = {f.name for f in fields(ExperimentConfig)}
    return ExperimentConfig(**{k: v for k, v in d.items() if k in names})
