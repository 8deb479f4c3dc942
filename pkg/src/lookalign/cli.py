"""Command-line entry point: ``lookalign {synth,train,grid,eval,saliency}``.

Runs are configured by a flat ``key = value`` text file (``#`` starts a comment).
Exit codes: 0 ok, 1 configuration error, 2 data/IO error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, nn, optim, teacher, training

log = logging.getLogger("lookalign")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected boolean")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _opt_float(s: str):
    return None if s.lower() in ("", "none", "auto") else float(s)


def _opt_str(s: str):
    return None if s.lower() in ("", "none") else s


# key -> (parser, type description)
_PARSERS = {
    str: (str, "string"),
    int: (int, "integer"),
    float: (float, "number"),
    bool: (_bool, "boolean"),
    "floats": (_floats, "list of numbers"),
    "ints": (_ints, "list of integers"),
    "opt_float": (_opt_float, "number or 'auto'"),
    "opt_str": (_opt_str, "string or 'none'"),
}


@dataclass
class RunConfig:
    dataset: str = "colored"
    lambda0: float = 160.0
    e_attn: int = 11
    epochs: int = 30
    batch_size: int = 32
    lr: float | None = None  # None: dataset default
    momentum: float = 0.98
    weight_decay: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 7
    seed: int = 0
    val_fraction: float = 0.1
    train_subset: int = 0  # 0: use every training example
    dilation_radius: int = 1
    edge_band: bool | None = None  # None: on for colored, off for decoy
    threshold: float = 0.3
    teacher_eps: float = 1e-6
    eps_kl: float = 1e-6
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    out: str = "runs/default"
    external_teachers: str | None = None
    export_count: int = 9
    grid_lambdas: tuple[float, ...] = training.DEFAULT_LAMBDAS
    grid_e_attns: tuple[int, ...] = training.DEFAULT_E_ATTNS
    jobs: int = 1
    checkpoint: str | None = None
    baseline_checkpoint: str | None = None
    aligned_checkpoint: str | None = None
    saliency_count: int = 9

    def train_config(self) -> training.TrainConfig:
        lr = self.lr if self.lr is not None else training.DEFAULT_LR[self.dataset]
        band = self.edge_band if self.edge_band is not None else self.dataset == "colored"
        return training.TrainConfig(
            dataset=self.dataset, lambda0=self.lambda0, e_attn=self.e_attn, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed, eps_kl=self.eps_kl,
            sgd=optim.SgdConfig(lr, self.momentum, self.weight_decay, self.decay_factor, self.decay_every),
            morph=teacher.MorphParams(self.dilation_radius, band, self.threshold, self.teacher_eps),
        )

    def mnist_paths(self) -> list[Path]:
        return [Path(p) for p in (self.train_images, self.train_labels, self.test_images, self.test_labels)]

    def render(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif v is None:
                v = "none" if _KINDS[f.name] == "opt_str" else "auto"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_KINDS = {
    "dataset": str, "lambda0": float, "e_attn": int, "epochs": int, "batch_size": int, "lr": "opt_float",
    "momentum": float, "weight_decay": float, "decay_factor": float, "decay_every": int, "seed": int,
    "val_fraction": float, "train_subset": int, "dilation_radius": int, "edge_band": "opt_bool",
    "threshold": float, "teacher_eps": float, "eps_kl": float, "train_images": "opt_str",
    "train_labels": "opt_str", "test_images": "opt_str", "test_labels": "opt_str", "out": str,
    "external_teachers": "opt_str", "export_count": int, "grid_lambdas": "floats", "grid_e_attns": "ints",
    "jobs": int, "checkpoint": "opt_str", "baseline_checkpoint": "opt_str", "aligned_checkpoint": "opt_str",
    "saliency_count": int,
}
_PARSERS["opt_bool"] = (lambda s: None if s.lower() in ("", "auto") else _bool(s), "boolean or 'auto'")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values, unknown = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KINDS:
            unknown.append(f"{key} (line {lineno})")
            continue
        parse, desc = _PARSERS[_KINDS[key]]
        try:
            values[key] = parse(raw)
        except ValueError:
            raise ConfigError(f"{source}: line {lineno}: expected {desc} for {key}, got {raw!r}") from None
    if unknown:
        raise ConfigError(f"{source}: unknown keys: {', '.join(unknown)}")
    cfg = RunConfig(**values)
    if cfg.dataset not in ("colored", "decoy"):
        raise ConfigError(f"{source}: dataset must be 'colored' or 'decoy', got {cfg.dataset!r}")
    return cfg


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------- helpers


class DataError(RuntimeError):
    pass


def _require(cfg: RunConfig, *keys: str):
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    absent = [getattr(cfg, k) for k in keys if not Path(getattr(cfg, k)).exists()]
    if absent:
        raise DataError(f"input files not found: {', '.join(absent)}")


def _require_mnist(cfg: RunConfig):
    _require(cfg, "train_images", "train_labels", "test_images", "test_labels")


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.render())
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return out


def load_split(cfg: RunConfig) -> data.DatasetSplit:
    try:
        tr = data.load_mnist(cfg.train_images, cfg.train_labels)
        te = data.load_mnist(cfg.test_images, cfg.test_labels)
    except (OSError, data.IdxParseError) as exc:
        raise DataError(str(exc)) from exc
    split = data.synth(cfg.dataset, tr, te, cfg.seed, val_fraction=cfg.val_fraction)
    if cfg.train_subset:
        split.train = split.train.subset(np.arange(min(cfg.train_subset, len(split.train))))
    return split


def load_teachers(cfg: RunConfig, split, tcfg) -> training.Teachers:
    if cfg.external_teachers is None:
        return training.oracle_teachers(split, tcfg)
    n = len(split.train) + len(split.val)
    try:
        maps = teacher.load_external_maps(cfg.external_teachers, expected_count=n)
    except (OSError, teacher.MapBundleError) as exc:
        raise DataError(str(exc)) from exc
    return training.teachers_from_maps(np.stack([m.grid for m in maps]), split)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    _require_mnist(cfg)
    split = load_split(cfg)
    out = _prepare_out(cfg)
    data.export_examples_ppm(split, out / "previews", cfg.export_count)
    stats = {"provenance": split.provenance}
    for part in ("train", "val", "test"):
        s = getattr(split, part)
        stats[part] = {
            "count": len(s),
            "per_class": np.bincount(s.labels, minlength=10).tolist(),
            **{f"{k}_hist": np.bincount(v).tolist() for k, v in s.meta.items()},
        }
    (out / "dataset_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'dataset_stats.json'} and previews")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _require_mnist(cfg)
    if cfg.external_teachers is not None:
        _require(cfg, "external_teachers")
    tcfg = cfg.train_config()
    split = load_split(cfg)
    teachers = load_teachers(cfg, split, tcfg)
    out = _prepare_out(cfg)
    report = training.train_two_phase(tcfg, split, teachers, out / "model.ckpt")
    (out / "metrics.csv").write_text(training.metrics_csv(report))
    # relative path keeps report.json identical across output directories
    report = dataclasses.replace(report, checkpoint_path="model.ckpt")
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"test accuracy {report.final_test_acc:.4f}  best optim value {report.best_optim_value:.4f}")
    return EXIT_OK


def cmd_grid(cfg: RunConfig) -> int:
    _require_mnist(cfg)
    tcfg = cfg.train_config()
    split = load_split(cfg)
    teachers = load_teachers(cfg, split, tcfg)
    out = _prepare_out(cfg)
    grid = training.run_grid(cfg.grid_lambdas, cfg.grid_e_attns, tcfg, split, teachers, jobs=cfg.jobs)
    (out / "heatmap.csv").write_text(training.heatmap_csv(grid))
    training.write_pgm(out / "heatmap.pgm", training.heatmap_pixels(grid))
    summary = {"chosen": grid.chosen, "errors": {f"{k[0]!r},{k[1]}": v for k, v in grid.errors.items()}}
    (out / "grid.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"chosen (lambda0, e_attn) = {grid.chosen}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    _require_mnist(cfg)
    _require(cfg, "checkpoint")
    split = load_split(cfg)
    try:
        theta = nn.load_checkpoint(cfg.checkpoint)
    except nn.CheckpointError as exc:
        raise DataError(str(exc)) from exc
    acc, _ = training.evaluate(theta, split.test)
    print(f"test accuracy {acc!r}")
    return EXIT_OK


def saliency_panel(theta: nn.ModelParams, image: np.ndarray, label: int) -> np.ndarray:
    """28x28 display CAM for the true class, max-normalized, nearest-neighbor upsampled."""
    _, cache = nn.model_forward(theta, image[None])
    s, _ = nn.cam_batch(cache.features, theta.head, [label], eps=0.0)
    grid = s[0] / s[0].max() if s[0].max() > 0 else s[0]
    return np.kron(grid, np.ones((4, 4)))


def cmd_saliency(cfg: RunConfig) -> int:
    _require_mnist(cfg)
    _require(cfg, "baseline_checkpoint", "aligned_checkpoint")
    split = load_split(cfg)
    try:
        base = nn.load_checkpoint(cfg.baseline_checkpoint)
        aligned = nn.load_checkpoint(cfg.aligned_checkpoint)
    except nn.CheckpointError as exc:
        raise DataError(str(exc)) from exc
    out = _prepare_out(cfg)
    target = out / "saliency"
    target.mkdir(exist_ok=True)
    for i in range(min(cfg.saliency_count, len(split.test))):
        ex = split.test[i]
        panels = [ex.image] + [np.repeat(saliency_panel(t, ex.image, ex.label)[None], 3, 0) for t in (base, aligned)]
        data.write_ppm(target / f"triptych_{i:03d}_y{ex.label}.ppm", np.concatenate(panels, axis=2))
    print(f"wrote {min(cfg.saliency_count, len(split.test))} triptychs to {target}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "grid": cmd_grid, "eval": cmd_eval, "saliency": cmd_saliency}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lookalign", description="CAM attention alignment on biased MNIST")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", help="overrides the config output directory")
    ap.add_argument("--jobs", type=int, help="worker processes for grid cells")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(args.config) if args.config else RunConfig()
        for key in ("seed", "out", "jobs"):
            if getattr(args, key) is not None:
                setattr(cfg, key, getattr(args, key))
        if not 0 <= cfg.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return COMMANDS[args.command](cfg)
    except (ConfigError, training.TrainConfigError, data.DataConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
