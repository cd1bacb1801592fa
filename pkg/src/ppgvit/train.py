"""Fine-tuning, MAE evaluation and result tables."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import load_container, save_container
from .errors import ConfigError, DataError, LayoutError, NumericError
from .imagify import REPR_TAGS, RecurrenceConfig, StftConfig, make_image
from .model import SELECTORS, VitRegressor
from .seeding import RNG_DROPOUT, RNG_SHUFFLE, derived_rng
from .synth import split
from .tensorize import PROFILE_NAMES, get_profile, image_to_patches
from .vit import LoraConfig

log = logging.getLogger(__name__)

UNITS = {
    "sbp": "mmHg", "dbp": "mmHg", "hr": "BPM", "rr": "BRPM", "spo2": "%",
    "sodium": "MEQ/L", "potassium": "MEQ/L", "lactate": "MMOL/L",
}
ROW_LABELS = {
    "hr": "Heart rate", "rr": "Resp. rate", "spo2": "SpO2", "sodium": "Sodium",
    "potassium": "Potassium", "lactate": "Lactate", "sbp": "SBP", "dbp": "DBP",
}


@dataclass(frozen=True)
class TrainConfig:
    target: str = "hr"
    repr_tag: str = "stft"
    profile: str = "dinov3_like"
    preset: str = "tiny"
    selector: str = "lora_pool_head"
    loss_kind: str = "l1"
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    val_fraction: float = 0.2
    seed: int = 0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    stft: StftConfig = field(default_factory=StftConfig)
    recurrence: RecurrenceConfig = field(default_factory=RecurrenceConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr and batch_size must be positive, epochs non-negative")
        if self.loss_kind not in ("l1", "mse"):
            raise ConfigError(f"unknown loss {self.loss_kind!r}")
        if self.selector not in SELECTORS:
            raise ConfigError(f"unknown selector {self.selector!r}; choose from {SELECTORS}")
        if self.repr_tag not in REPR_TAGS:
            raise ConfigError(f"unknown representation {self.repr_tag!r}")
        if self.profile not in PROFILE_NAMES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    def lora_config(self) -> LoraConfig:
        return LoraConfig(self.lora_rank, self.lora_alpha, self.lora_dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("stft"), dict):
            d["stft"] = StftConfig(**d["stft"])
        if isinstance(d.get("recurrence"), dict):
            d["recurrence"] = RecurrenceConfig(**d["recurrence"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- data preparation ---------------------------------------------------------

@dataclass
class PatchArrays:
    U: np.ndarray  # (n, N, 3p^2)
    M: np.ndarray  # (n, N) bool
    grid: tuple[int, int]
    ids: list[str]
    labels: np.ndarray | None


def _record_patches(args):
    samples, cfg = args
    prof = get_profile(cfg.profile, cfg.preset)
    img = make_image(samples, cfg.repr_tag, cfg.stft, cfg.recurrence)
    ps = image_to_patches(img, prof)
    return ps.patches, ps.patch_mask, ps.grid[:2]


def prepare(records, cfg: TrainConfig, target: str | None = None, workers: int = 1) -> PatchArrays:
    """Images -> normalized, padded patches for every record (one shared grid)."""
    records = list(records)
    if not records:
        raise DataError("empty dataset")
    labels = None
    if target is not None:
        for rec in records:
            if target not in rec.labels:
                raise DataError(f"record {rec.id!r} has no {target!r} label")
        labels = np.array([rec.labels[target] for rec in records])
    jobs = [(rec.samples, cfg) for rec in records]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_record_patches, jobs, chunksize=16))
    else:
        out = [_record_patches(j) for j in jobs]
    grids = {g for _, _, g in out}
    if len(grids) != 1:
        raise DataError(f"records produce different patch grids {sorted(grids)}; window lengths must match")
    U = np.stack([o[0] for o in out])
    M = np.stack([o[1] for o in out])
    return PatchArrays(U, M, grids.pop(), [r.id for r in records], labels)


# -- optimizer ----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; decay skips 0/1-D arrays (biases, norms)."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict, grads: dict, names):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name in names:
            p, g = arrays[name], grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd and p.ndim >= 2:
                p -= self.lr * self.wd * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _loss(y, t, kind):
    r = y - t
    if kind == "l1":
        return float(np.mean(np.abs(r))), np.sign(r) / r.size
    return float(np.mean(r * r)), 2.0 * r / r.size


# -- checkpoint ---------------------------------------------------------------

@dataclass
class Checkpoint:
    model: VitRegressor
    config: TrainConfig

    def manifest(self) -> dict:
        man = self.model.manifest()
        man["train"] = self.config.to_dict()
        return man

    def fingerprint(self) -> str:
        text = json.dumps(self.manifest(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def save(self, path) -> Path:
        return save_container(path, self.model.named_arrays(), self.manifest())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, man = load_container(path)
        if "train" not in man:
            raise DataError(f"{path} is not a training checkpoint")
        return cls(VitRegressor.from_arrays(arrays, man), TrainConfig.from_dict(man["train"]))


def build_model(cfg: TrainConfig) -> VitRegressor:
    return VitRegressor(get_profile(cfg.profile, cfg.preset), cfg.target, cfg.lora_config(), cfg.seed)


# -- training -----------------------------------------------------------------

@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    best_val_mae: float | None


def fit(records, cfg: TrainConfig, workers: int = 1, data: tuple[PatchArrays, PatchArrays] | None = None) -> FitResult:
    """Train the selector's parameter subset; keep the best-validation weights.

    ``data`` lets callers pass already-prepared (train, val) arrays.
    """
    if data is None:
        records = list(records)
        for rec in records:
            if cfg.target not in rec.labels:
                raise DataError(f"record {rec.id!r} has no {cfg.target!r} label")
        train_recs, val_recs, _ = split(records, (1 - cfg.val_fraction, cfg.val_fraction, 0.0), cfg.seed)
        if not train_recs:
            raise DataError("no training records after the split")
        tr = prepare(train_recs, cfg, cfg.target, workers)
        va = prepare(val_recs, cfg, cfg.target, workers) if val_recs else None
    else:
        tr, va = data

    model = build_model(cfg)
    model.target_shift = float(tr.labels.mean())
    sd = float(tr.labels.std())
    model.target_scale = sd if sd > 1e-8 else 1.0
    t_std = (tr.labels - model.target_shift) / model.target_scale

    arrays = model.named_arrays()
    names = model.trainable_names(cfg.selector)
    opt = AdamW(cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    best = {n: a.copy() for n, a in arrays.items() if n in names}
    best_epoch, best_mae = 0, None
    history = []
    n = len(tr.U)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = derived_rng(cfg.seed, RNG_SHUFFLE, epoch).permutation(n)
        drop_rng = derived_rng(cfg.seed, RNG_DROPOUT, epoch)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            y, cache = model.forward(tr.U[idx], tr.M[idx], tr.grid, train=True, rng=drop_rng)
            loss, dy = _loss(y, t_std[idx], cfg.loss_kind)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = model.backward(dy, cache)
            opt.step(arrays, grads, names)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / n)
        val_mae = None
        if va is not None:
            val_mae = float(np.mean(np.abs(model.predict(va.U, va.M, va.grid) - va.labels)))
        wall_ms = (time.perf_counter() - t0) * 1e3
        history.append({"epoch": epoch, "train_loss": train_loss, "val_mae": val_mae, "wall_ms": wall_ms})
        log.info("epoch %d train_loss %.4f val_mae %s", epoch, train_loss, val_mae)
        improved = val_mae is None or best_mae is None or val_mae < best_mae
        if improved:
            best_epoch, best_mae = epoch, val_mae
            best = {nm: arrays[nm].copy() for nm in names}
    for nm, a in best.items():
        arrays[nm][...] = a
    return FitResult(Checkpoint(model, cfg), history, best_epoch, best_mae)


def write_log(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    return path


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    target: str
    mae: float
    count: int
    fingerprint: str
    dataset: str = "synthetic"
    model: str = "ppgvit"
    predictions: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def unit(self) -> str:
        return UNITS.get(self.target, "")

    def to_record(self) -> dict:
        return {"target": self.target, "mae": self.mae, "count": self.count, "unit": self.unit,
                "fingerprint": self.fingerprint, "dataset": self.dataset, "model": self.model}


def mae_report(pred, labels, target, fingerprint="", **names) -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise DataError("cannot evaluate on an empty dataset")
    mae = float(np.mean(np.abs(pred - labels)))
    return EvalReport(target, mae, int(labels.size), fingerprint, predictions=pred, labels=labels, **names)


def evaluate(records, checkpoint: Checkpoint, target: str | None = None, workers: int = 1,
             **names) -> EvalReport:
    """Mean absolute error of the checkpoint on ``records`` in target units."""
    records = list(records)
    if not records:
        raise DataError("cannot evaluate on an empty dataset")
    target = target or checkpoint.config.target
    if target != checkpoint.model.target:
        raise ConfigError(f"checkpoint predicts {checkpoint.model.target!r}, not {target!r}")
    data = prepare(records, checkpoint.config, target, workers)
    pred = checkpoint.model.predict(data.U, data.M, data.grid)
    return mae_report(pred, data.labels, target, checkpoint.fingerprint(), **names)


def baseline_mae(train_labels, eval_labels) -> float:
    """MAE of always predicting the training-label mean."""
    return float(np.mean(np.abs(np.asarray(eval_labels) - np.mean(train_labels))))


def _table(header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: " | ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule, *(fmt(r) for r in rows)]) + "\n"


def render_report(reports, layout: str = "task_rows") -> str:
    """Text table in one of two shapes.

    ``bp_slash``: one row per dataset, one column per model, cells
    ``DBP/SBP``. ``task_rows``: one row per target labelled with its unit,
    one column per model.
    """
    reports = list(reports)
    models = list(dict.fromkeys(r.model for r in reports))
    if layout == "bp_slash":
        cells: dict[tuple[str, str], dict[str, float]] = {}
        for r in reports:
            if r.target not in ("dbp", "sbp"):
                raise LayoutError(f"bp_slash layout takes dbp/sbp reports, got {r.target!r}")
            cells.setdefault((r.dataset, r.model), {})[r.target] = r.mae
        datasets = list(dict.fromkeys(r.dataset for r in reports))
        rows = []
        for ds in datasets:
            row = [ds]
            for m in models:
                pair = cells.get((ds, m), {})
                if "dbp" not in pair or "sbp" not in pair:
                    raise LayoutError(f"{ds}/{m}: need both dbp and sbp reports")
                row.append(f"{pair['dbp']:.2f}/{pair['sbp']:.2f}")
            rows.append(row)
        return _table(["BP dataset", *models], rows)
    if layout == "task_rows":
        cells = {(r.target, r.model): r.mae for r in reports}
        targets = list(dict.fromkeys(r.target for r in reports))
        rows = []
        for t in targets:
            label = ROW_LABELS.get(t, t)
            unit = UNITS.get(t)
            row = [f"{label} ({unit})" if unit else label]
            row += [f"{cells[(t, m)]:.2f}" if (t, m) in cells else "-" for m in models]
            rows.append(row)
        return _table(["Estimand", *models], rows)
    raise LayoutError(f"unknown layout {layout!r}")


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
