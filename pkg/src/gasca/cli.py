"""Command-line entry point.

    gasca run <config>
    gasca eval <checkpoint> <manifest>
    gasca grid <checkpoint> <manifest> <out.pgm> --rows N

Exit codes: 0 success, 2 configuration or load failure, 3 training abort.
The ``GASCA_SEED`` environment variable overrides the config seed.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, config_hash, load_checkpoint, save_checkpoint
from .core import SeededRng, mse_loss
from .data import DatasetManifest, PairedDataset, atomic_write, format_key_values, parse_key_values
from .model import GeneratorStack, StageFactory
from .objectives import LossWeights
from .optim import AdamConfig
from .trainer import (EpochRecord, StageConfig, TrainingAborted, ganglw_train, glw_baseline,
                      joint_train_baseline)

METRICS_HEADER = ["regime", "seed", "stage", "phase", "epoch", "L_D", "L_G", "train_mse", "val_mse", "wall_ms"]
REGIMES = ("ganglw", "glw", "joint")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _channels(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


@dataclass
class ExperimentConfig:
    manifest: Path
    regime: str = "ganglw"
    m_stages: int = 2
    epochs_stage: int = 10
    epochs_finetune_g: int = 10
    epochs_finetune_d: int = 5
    batch_size: int = 32
    lambda_rec: float = 1.0
    lambda_adv: float = 0.01
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    d_steps_per_g_step: int = 1
    non_saturating: bool = False
    finetune_g_mode: str = "combined"
    seed: int = 0
    output_dir: Path = Path("out")
    channels: tuple = (4, 8)
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1
    alpha: float = 0.2
    grid_rows: int = 5
    log_wall_clock: bool = False

    _PARSERS = {bool: _bool, tuple: _channels, Path: Path, int: int, float: float, str: str}

    @classmethod
    def parse(cls, text: str, base_dir=".", source: str = "<config>") -> "ExperimentConfig":
        try:
            values = parse_key_values(text, source)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r}")
            typ = {"int": int, "float": float, "bool": bool, "str": str, "Path": Path, "tuple": tuple}[known[key].type]
            try:
                kwargs[key] = cls._PARSERS[typ](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from exc
        if "manifest" not in kwargs:
            raise ConfigError(f"{source}: missing required key 'manifest'")
        base = Path(base_dir)
        for key in ("manifest", "output_dir"):
            if key in kwargs and not kwargs[key].is_absolute():
                kwargs[key] = base / kwargs[key]
        if "output_dir" not in kwargs:
            kwargs["output_dir"] = base / "out"
        cfg = cls(**kwargs)
        cfg.validate(source)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.parse(text, path.parent, str(path))

    def validate(self, source: str = "<config>") -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"{source}: regime must be one of {', '.join(REGIMES)}, got {self.regime!r}")
        if self.m_stages < 1:
            raise ConfigError(f"{source}: m_stages must be >= 1")
        if len(self.channels) < self.m_stages or min(self.channels) < 1:
            raise ConfigError(f"{source}: channels needs a positive count for each of {self.m_stages} stages")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"{source}: seed must be a 64-bit unsigned integer")
        if self.grid_rows < 1:
            raise ConfigError(f"{source}: grid_rows must be >= 1")
        try:
            self.stage_config()
            self.factory()
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from exc

    def stage_config(self) -> StageConfig:
        return StageConfig(self.epochs_stage, self.epochs_finetune_g, self.epochs_finetune_d, self.batch_size,
                           LossWeights(self.lambda_rec, self.lambda_adv),
                           AdamConfig(self.lr, self.beta1, self.beta2, self.eps),
                           self.d_steps_per_g_step, self.non_saturating, self.finetune_g_mode)

    def factory(self) -> StageFactory:
        return StageFactory(self.channels, self.kernel_size, self.stride, self.padding, self.alpha)

    def fingerprint(self) -> bytes:
        """Hash of the effective settings (after any seed override).

        File locations are left out: the manifest enters through its
        contents and the output directory does not affect results.
        """
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        del values["output_dir"]
        values["manifest"] = config_hash(Path(self.manifest).read_text()).hex()
        values["channels"] = ",".join(map(str, self.channels))
        return config_hash(format_key_values({k: values[k] for k in sorted(values)}))


def apply_seed_override(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    raw = environ.get("GASCA_SEED")
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigError(f"GASCA_SEED is not an integer: {raw!r}") from exc
    if not 0 <= seed < 2**64:
        raise ConfigError("GASCA_SEED must be a 64-bit unsigned integer")
    cfg.seed = seed
    return cfg


def metrics_row(regime: str, seed: int, rec: EpochRecord, wall_clock: bool) -> list:
    return [regime, seed, rec.stage, rec.phase, rec.epoch, repr(rec.loss_d), repr(rec.loss_g),
            repr(rec.train_mse), repr(rec.val_mse), repr(round(rec.wall_ms, 3)) if wall_clock else "0"]


def evaluate_split(G: GeneratorStack, ds: PairedDataset) -> tuple:
    """(reconstruction MSE, input-vs-target MSE) over a dataset."""
    return mse_loss(G.reconstruct(ds.inputs), ds.targets)[0], mse_loss(ds.inputs, ds.targets)[0]


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_grid_pgm(G: GeneratorStack, ds: PairedDataset, rows: int) -> bytes:
    """Binary PGM: the first ``rows`` inputs across the top, reconstructions below."""
    if not 1 <= rows <= len(ds):
        raise ValueError(f"rows must lie in [1, {len(ds)}], got {rows}")
    x = ds.inputs[:rows]
    y = G.reconstruct(x)
    top = np.concatenate(list(x[:, 0]), axis=1)
    bottom = np.concatenate(list(y[:, 0]), axis=1)
    pixels = _to_u8(np.concatenate([top, bottom], axis=0))
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def cmd_run(config_path, environ=None) -> int:
    try:
        cfg = apply_seed_override(ExperimentConfig.load(config_path), environ)
        train, val = DatasetManifest.load(cfg.manifest).build_split()
        fingerprint = cfg.fingerprint()
    except (ConfigError, ValueError, OSError) as exc:
        _fail(exc)
        return 2

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    tmp = out / f".metrics.csv.tmp{os.getpid()}"
    rng = SeededRng(cfg.seed)
    scfg, factory = cfg.stage_config(), cfg.factory()
    try:
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)

            def sink(rec: EpochRecord) -> None:
                writer.writerow(metrics_row(cfg.regime, cfg.seed, rec, cfg.log_wall_clock))

            if cfg.regime == "joint":
                G, D, _ = joint_train_baseline(cfg.m_stages, factory, train, val, scfg, rng, sink=sink)
            else:
                trainer = ganglw_train if cfg.regime == "ganglw" else glw_baseline
                G, D, _, _ = trainer(cfg.m_stages, factory, train, val, scfg, rng, sink=sink)
        os.replace(tmp, metrics_path)
    except TrainingAborted as exc:
        _fail(exc)
        return 3
    finally:
        if tmp.exists():
            tmp.unlink()
    ckpt = Checkpoint(G, D, stage=cfg.m_stages, epoch=0, rng_state=rng.get_state(), config_hash=fingerprint)
    save_checkpoint(out / "model.ckpt", ckpt)
    atomic_write(out / "grid.pgm", render_grid_pgm(G, val, min(cfg.grid_rows, len(val))))
    return 0


def _load_for_eval(checkpoint_path, manifest_path):
    ckpt = load_checkpoint(checkpoint_path)
    _, val = DatasetManifest.load(manifest_path).build_split()
    return ckpt, val


def cmd_eval(checkpoint_path, manifest_path, stdout=None) -> int:
    try:
        ckpt, val = _load_for_eval(checkpoint_path, manifest_path)
        val_mse, input_mse = evaluate_split(ckpt.generator, val)
    except (CheckpointError, ValueError, OSError) as exc:
        _fail(exc)
        return 2
    print(f"val_mse={val_mse!r} input_mse={input_mse!r}", file=stdout or sys.stdout)
    return 0


def cmd_grid(checkpoint_path, manifest_path, out_path, rows: int) -> int:
    try:
        ckpt, val = _load_for_eval(checkpoint_path, manifest_path)
        payload = render_grid_pgm(ckpt.generator, val, rows)
    except (CheckpointError, ValueError, OSError) as exc:
        _fail(exc)
        return 2
    atomic_write(out_path, payload)
    return 0


def _fail(exc: BaseException) -> None:
    print(f"gasca: error: {' '.join(str(exc).split())}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gasca", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train with a key=value config")
    run.add_argument("config")
    ev = sub.add_parser("eval", help="print validation MSE of a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("manifest")
    grid = sub.add_parser("grid", help="write an input/reconstruction PGM grid")
    grid.add_argument("checkpoint")
    grid.add_argument("manifest")
    grid.add_argument("out")
    grid.add_argument("--rows", type=int, default=5)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.manifest)
    return cmd_grid(args.checkpoint, args.manifest, args.out, args.rows)


if __name__ == "__main__":
    sys.exit(main())
