"""Losses, the two-phase attention-alignment schedule, evaluation and grid search.

Phase 1 (epochs < e_attn) minimizes only the KL between the model's CAM for the
true class and the teacher map. At e_attn the optimizer state and LR schedule
are reset, and from then on the objective is CE + lambda_e * KL with lambda
growing linearly from lambda0 by 0.1 * lambda0 per epoch.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn, optim
from .data import BiasedSet, DatasetSplit
from .teacher import MorphParams, build_teachers, downsample_teacher
from .tensor import DomainError, SeededRng

log = logging.getLogger(__name__)

DEFAULT_LR = {"colored": 1e-3, "decoy": 1e-2}
ANCHOR_CELLS = {"colored": (160.0, 11), "decoy": (8.0, 13)}
DEFAULT_LAMBDAS = (1.0, 2.0, 4.0, 8.0, 16.0, 40.0, 80.0, 160.0, 320.0)
DEFAULT_E_ATTNS = (5, 7, 9, 11, 13, 15)


class NumericalError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


# ---------------------------------------------------------------- losses


def cross_entropy(logits: np.ndarray, labels):
    """Mean CE over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"label out of range 0..{k - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def attention_loss(s: np.ndarray, m: np.ndarray):
    """Mean KL(S || M) over the batch, and dL/dS. Both inputs must be strictly positive."""
    s, m = np.asarray(s, dtype=np.float64), np.asarray(m, dtype=np.float64)
    single = s.ndim == 2
    if single:
        s, m = s[None], m[None]
    if s.shape != m.shape:
        raise ValueError(f"saliency {s.shape} and teacher {m.shape} differ in shape")
    if np.any(s <= 0) or np.any(m <= 0):
        raise DomainError("KL needs strictly positive maps; smooth them with eps first")
    log_ratio = np.log(s) - np.log(m)
    b = s.shape[0]
    loss = float((s * log_ratio).sum() / b)
    ds = (log_ratio + 1.0) / b
    return loss, ds[0] if single else ds


def optim_value(val_acc: float, val_attn: float) -> float:
    return val_acc * (1.0 - val_attn)


# ---------------------------------------------------------------- config / report


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "colored"
    lambda0: float = 160.0
    e_attn: int = 11
    epochs: int = 30
    batch_size: int = 32
    sgd: optim.SgdConfig = optim.SgdConfig()
    seed: int = 0
    morph: MorphParams = MorphParams()
    eps_kl: float = 1e-6

    def __post_init__(self):
        if self.lambda0 < 0:
            raise TrainConfigError("lambda0 must be nonnegative")
        if not 0 <= self.e_attn <= self.epochs:
            raise TrainConfigError(f"e_attn must lie in [0, epochs], got {self.e_attn}")
        if self.batch_size < 1:
            raise TrainConfigError("batch size must be >= 1")

    @classmethod
    def for_dataset(cls, dataset: str, **kw) -> "TrainConfig":
        """Defaults for ``dataset``: its initial LR, its selected (lambda0, e_attn) cell,
        and the raw mask (no edge band) teacher for DecoyMNIST."""
        lam, e = ANCHOR_CELLS[dataset]
        base = dict(dataset=dataset, lambda0=lam, e_attn=e, sgd=optim.SgdConfig(initial_lr=DEFAULT_LR[dataset]),
                    morph=MorphParams(edge_band=dataset == "colored"))
        base.update(kw)
        return cls(**base)


def lambda_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < cfg.e_attn:
        raise ValueError(f"epoch {epoch} is in the attention-only phase (e_attn={cfg.e_attn})")
    return cfg.lambda0 * (1.0 + 0.1 * (epoch - cfg.e_attn))


@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    lam: float | None
    train_ce: float | None
    train_attn: float
    val_acc: float
    val_attn: float
    optim_value: float
    lr: float


@dataclass
class TrainReport:
    config: TrainConfig
    per_epoch: list[EpochMetrics]
    final_test_acc: float
    best_optim_value: float
    checkpoint_path: str | None = None
    params: nn.ModelParams | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("params")
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class Teachers:
    """7x7 teacher maps aligned with the train and val examples of a split."""

    train: np.ndarray
    val: np.ndarray


def oracle_teachers(split: DatasetSplit, cfg: TrainConfig) -> Teachers:
    def build(s: BiasedSet):
        return downsample_teacher(build_teachers(s.clean, cfg.dataset, cfg.morph))

    return Teachers(build(split.train), build(split.val))


def teachers_from_maps(grids: np.ndarray, split: DatasetSplit) -> Teachers:
    """Split a train-then-val stack of 28x28 (or 7x7) maps into ``Teachers``."""
    grids = np.asarray(grids, dtype=np.float64)
    n_tr, n_va = len(split.train), len(split.val)
    if len(grids) != n_tr + n_va:
        raise TrainConfigError(f"{len(grids)} teacher maps for {n_tr} train + {n_va} val examples")
    if grids.shape[-2:] == (28, 28):
        grids = downsample_teacher(grids)
    grids = grids / grids.sum(axis=(1, 2), keepdims=True)
    return Teachers(grids[:n_tr], grids[n_tr:])


# ---------------------------------------------------------------- train / eval


def accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of argmax hits; argmax ties go to the smallest class index."""
    return float((np.asarray(logits).argmax(axis=1) == np.asarray(labels)).mean())


def evaluate(theta: nn.ModelParams, examples: BiasedSet, teachers: np.ndarray | None = None,
             eps: float = nn.CAM_EPS, batch: int = 250):
    """(accuracy, mean KL of true-class CAM vs teacher). KL is nan without teachers."""
    n = len(examples)
    correct, attn = 0, 0.0
    for lo in range(0, n, batch):
        sl = slice(lo, min(lo + batch, n))
        logits, cache = nn.model_forward(theta, examples.images[sl])
        y = examples.labels[sl]
        correct += int((logits.argmax(axis=1) == y).sum())
        if teachers is not None:
            s, _ = nn.cam_batch(cache.features, theta.head, y, eps)
            attn += attention_loss(s, teachers[sl])[0] * len(y)
    return correct / n, (attn / n if teachers is not None else float("nan"))


StepHook = Callable[[int, int, nn.ModelParams, optim.SgdState], None]


def train_two_phase(cfg: TrainConfig, split: DatasetSplit, teachers: Teachers | None = None,
                    checkpoint_path=None, step_hook: StepHook | None = None) -> TrainReport:
    if teachers is None:
        teachers = oracle_teachers(split, cfg)
    if len(teachers.train) != len(split.train) or len(teachers.val) != len(split.val):
        raise TrainConfigError(
            f"teachers ({len(teachers.train)}, {len(teachers.val)}) do not match "
            f"train/val sizes ({len(split.train)}, {len(split.val)})"
        )
    rng = SeededRng(cfg.seed)
    theta = nn.init_params(rng.child("init"))
    state = optim.init_state(theta, cfg.sgd)
    train = split.train
    n = len(train)
    history = []
    for epoch in range(cfg.epochs):
        if epoch == cfg.e_attn:
            optim.reset(state, cfg.sgd)
        joint = epoch >= cfg.e_attn
        lam = lambda_at(epoch, cfg) if joint else None
        lr = state.current_lr
        order = rng.child("shuffle").child(epoch).permutation(n)
        ce_sum, attn_sum = 0.0, 0.0
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            x, y = train.images[idx], train.labels[idx]
            logits, cache = nn.model_forward(theta, x)
            s, ctx = nn.cam_batch(cache.features, theta.head, y, cfg.eps_kl)
            attn, ds = attention_loss(s, teachers.train[idx])
            dlogits = None
            if joint:
                ce, dlogits = cross_entropy(logits, y)
                ce_sum += ce * len(idx)
                total = ce + lam * attn
            else:
                total = attn
            if not math.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {step} (indices {idx.tolist()})")
            attn_sum += attn * len(idx)
            weight = lam if joint else 1.0
            if weight:
                dfeat, dhead = nn.cam_backward(ctx, ds * weight)
            else:
                dfeat, dhead = None, None
            grads = nn.model_backward(theta, cache, dlogits, dfeat, dhead)
            if step_hook is not None:
                step_hook(epoch, step, theta, state)
            optim.sgd_step(theta, grads, state, cfg.sgd)
        val_acc, val_attn = evaluate(theta, split.val, teachers.val, cfg.eps_kl)
        history.append(EpochMetrics(
            epoch, "joint" if joint else "attention", lam, ce_sum / n if joint else None, attn_sum / n,
            val_acc, val_attn, optim_value(val_acc, val_attn), lr,
        ))
        log.info("epoch %d %s lr=%.3g val_acc=%.4f val_attn=%.4f", epoch, history[-1].phase, lr, val_acc, val_attn)
        optim.epoch_tick(state, cfg.sgd)
    test_acc, _ = evaluate(theta, split.test)
    if checkpoint_path is not None:
        checkpoint_path = str(nn.save_checkpoint(theta, checkpoint_path))
    best = max(m.optim_value for m in history) if history else float("nan")
    return TrainReport(cfg, history, test_acc, best, checkpoint_path, theta)


METRICS_HEADER = ["epoch", "phase", "lambda", "train_ce", "train_attn", "val_acc", "val_attn", "optim_value", "lr"]


def _g9(v) -> str:
    return "" if v is None else f"{v:.9g}"


def metrics_csv(report: TrainReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in report.per_epoch:
        w.writerow([m.epoch, m.phase, _g9(m.lam), _g9(m.train_ce), _g9(m.train_attn), _g9(m.val_acc),
                    _g9(m.val_attn), _g9(m.optim_value), _g9(m.lr)])
    return buf.getvalue()


# ---------------------------------------------------------------- grid search


@dataclass
class GridResult:
    lambdas: tuple[float, ...]
    e_attns: tuple[int, ...]
    cells: dict[tuple[float, int], float]
    chosen: tuple[float, int] | None
    errors: dict[tuple[float, int], str] = field(default_factory=dict)


def choose_cell(cells: dict[tuple[float, int], float]):
    """Argmax; ties go to smaller lambda0, then smaller e_attn. Non-finite cells are skipped."""
    finite = [(k, v) for k, v in cells.items() if math.isfinite(v)]
    if not finite:
        return None
    return min(finite, key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))[0]


def cell_seed(seed: int, lam: float, e_attn: int) -> int:
    return int(SeededRng(seed).child(f"cell:{lam!r}:{e_attn}").integers(0, 2**63))


def _run_cell(args):
    cfg, split, teachers = args
    try:
        return train_two_phase(cfg, split, teachers).best_optim_value, None
    except Exception as exc:  # one failed cell must not abort the grid
        return float("nan"), f"{type(exc).__name__}: {exc}"


def run_grid(lambdas, e_attns, template: TrainConfig, split: DatasetSplit, teachers: Teachers | None = None,
             jobs: int = 1) -> GridResult:
    lambdas, e_attns = tuple(float(v) for v in lambdas), tuple(int(v) for v in e_attns)
    if not lambdas or not e_attns:
        raise TrainConfigError("grid axes must be nonempty")
    if teachers is None:
        teachers = oracle_teachers(split, template)
    keys = [(lam, e) for lam in lambdas for e in e_attns]
    tasks = [(replace(template, lambda0=lam, e_attn=e, seed=cell_seed(template.seed, lam, e)), split, teachers)
             for lam, e in keys]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    cells, errors = {}, {}
    for key, (value, err) in zip(keys, results):
        cells[key] = value
        if err is not None:
            log.error("grid cell lambda0=%g e_attn=%d failed: %s", key[0], key[1], err)
            errors[key] = err
    return GridResult(lambdas, e_attns, cells, choose_cell(cells), errors)


def heatmap_csv(grid: GridResult) -> str:
    """Rows are lambda0 values, columns e_attn values; floats written with repr for lossless reload."""
    lines = ["lambda0\\e_attn," + ",".join(str(e) for e in grid.e_attns)]
    for lam in grid.lambdas:
        lines.append(repr(lam) + "," + ",".join(repr(grid.cells[(lam, e)]) for e in grid.e_attns))
    return "\n".join(lines) + "\n"


def parse_heatmap_csv(text: str):
    """Inverse of ``heatmap_csv``: returns (lambdas, e_attns, cells)."""
    rows = [line.split(",") for line in text.strip().splitlines()]
    e_attns = tuple(int(v) for v in rows[0][1:])
    lambdas, cells = [], {}
    for row in rows[1:]:
        lam = float(row[0])
        lambdas.append(lam)
        for e, v in zip(e_attns, row[1:]):
            cells[(lam, e)] = float(v)
    return tuple(lambdas), e_attns, cells


def heatmap_pixels(grid: GridResult) -> np.ndarray:
    """uint8 image, min -> 0, max -> 255; a constant (or single-cell) grid maps to 0; failed cells to 0."""
    vals = np.array([[grid.cells[(lam, e)] for e in grid.e_attns] for lam in grid.lambdas])
    finite = np.isfinite(vals)
    out = np.zeros(vals.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = vals[finite].min(), vals[finite].max()
        if hi > lo:
            out[finite] = np.rint((vals[finite] - lo) / (hi - lo) * 255).astype(np.uint8)
    return out


def write_pgm(path, pixels: np.ndarray) -> Path:
    path = Path(path)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    magic, dims, maxval, payload = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 file")
    w, h = map(int, dims.split())
    return np.frombuffer(payload, np.uint8, h * w).reshape(h, w)


def aggregate_seeds(reports) -> tuple[float, float]:
    """Mean and sample (N-1) standard deviation of final test accuracy."""
    accs = [r.final_test_acc if isinstance(r, TrainReport) else float(r) for r in reports]
    if len(accs) < 2:
        raise TrainConfigError("need at least two runs to aggregate")
    return statistics.mean(accs), statistics.stdev(accs)
