"""``ingrain`` command line: synth, train, eval and sweep.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures (unreadable data, incompatible model files, ...).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .baselines import (SgruConfig, knn_linear_impute, linear_interp_impute, persistence_predict,
                        sgru_predict_baseline)
from .config import ConfigError, RunConfig, load_config
from .data import (DataFormatError, Scaler, TrajectoryWindow, apply_scaler, fit_scaler, load_records,
                   split, synthesize, windowize_all, write_records)
from .model import Ingrain
from .modelio import ModelFormatError, atomic_write, load_model, save_model
from .training import EpochLog, train, window_masks

log = logging.getLogger("ingrain")

TRAIN_LOG_COLUMNS = ["epoch", "l_imp", "l_pre", "l_vel", "l_learn", "test_l_imp", "test_l_pre"]
METRICS_COLUMNS = ["missing_rate", "method", "task", "loss", "loss_deg"]
SWEEP_COLUMNS = ["axis", "value", "task", "loss"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    train: list[TrajectoryWindow]
    test: list[TrajectoryWindow]
    scaler: Scaler


def prepare(cfg: RunConfig, data_path, scaler: Scaler | None = None, rate: float | None = None) -> Prepared:
    """Window, normalize, mask and split a record file.

    Masks are drawn for all windows from one stream before the split, so a
    given (config, rate) always yields the same masked train and test sets.
    """
    users = load_records(data_path)
    windows = windowize_all(users, cfg.window_length, cfg.effective_stride)
    if not windows:
        raise ad.ContractError(
            f"no window of length {cfg.window_length} (plus target) fits in {data_path}"
        )
    scaler = fit_scaler(windows, cfg.normalization) if scaler is None else scaler
    windows = window_masks(apply_scaler(windows, scaler), cfg.mask_spec(rate))
    train_set, test_set = split(windows, cfg.train_fraction, cfg.split_seed)
    return Prepared(train_set, test_set, scaler)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def log_rows(logs: Sequence[EpochLog]):
    for e in logs:
        t = e.train
        yield [e.epoch, t.l_imp, t.l_pre, t.l_vel, t.l_learn, e.test_imp, e.test_pre]


def best_test(logs: Sequence[EpochLog]) -> tuple[float, float]:
    """Lowest logged test imputation and prediction losses of one run."""
    imps = [e.test_imp for e in logs if e.test_imp is not None]
    pres = [e.test_pre for e in logs if e.test_pre is not None]
    return (min(imps) if imps else float("nan"), min(pres) if pres else float("nan"))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def _deg_dist(a, b, scaler: Scaler) -> np.ndarray:
    return np.linalg.norm(scaler.inverse(np.atleast_2d(a)) - scaler.inverse(np.atleast_2d(b)), axis=1)


def imputation_loss(windows, imputations, scaler: Scaler) -> tuple[float, float]:
    """(normalized, degree-space) mean over windows of the per-window mean distance."""
    norm, deg = [], []
    for w, imp in zip(windows, imputations):
        mis = [int(i) for i in w.missing_positions]
        if not mis:
            continue
        est = np.stack([imp[i] for i in mis])
        norm.append(np.mean(np.linalg.norm(est - w.points[mis], axis=1)))
        deg.append(np.mean(_deg_dist(est, w.points[mis], scaler)))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return mean(norm), mean(deg)


def prediction_loss(windows, predictions, scaler: Scaler) -> tuple[float, float]:
    preds = np.asarray(predictions, dtype=np.float64).reshape(len(windows), 2)
    targets = np.stack([w.target for w in windows])
    norm = np.linalg.norm(preds - targets, axis=1)
    return float(norm.mean()), float(_deg_dist(preds, targets, scaler).mean())


def knn_or_fallback(window: TrajectoryWindow, k: int) -> dict:
    """KNN+Linear with k capped at the observed count; one observed point falls back to it."""
    n_obs = len(window.observed_positions)
    if n_obs < 2:
        return linear_interp_impute(window)
    return knn_linear_impute(window, min(k, n_obs))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out_path, seed: int | None = None) -> Path:
    records = synthesize(cfg.synth_profile(), cfg.synth_seed if seed is None else seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_records(records, out_path)
    log.info("wrote %d records to %s", len(records), out_path)
    return out_path


def cmd_train(cfg: RunConfig, data_path, out_dir) -> dict:
    """Train once per configured seed; write per-seed model and log plus a summary."""
    out_dir = Path(out_dir)
    data = prepare(cfg, data_path)
    if not data.train:
        raise ad.ContractError("training split is empty; add data or raise train_fraction")
    atomic_write(out_dir / "config.txt", cfg.to_text())
    best = {}
    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        logs: list[EpochLog] = []
        params, logs = train(data.train, cfg.train_config(seed), test_set=data.test or None)
        save_model(seed_dir / "model.bin", params, cfg.replace(seeds=(seed,)).to_text(), data.scaler)
        atomic_write(seed_dir / "train_log.csv", csv_text(TRAIN_LOG_COLUMNS, log_rows(logs)))
        best[seed] = best_test(logs)
        log.info("seed %d: best test l_imp %.6g, l_pre %.6g", seed, *best[seed])
    rows = [[seed, b[0], b[1]] for seed, b in best.items()]
    mean_imp = float(np.mean([b[0] for b in best.values()]))
    mean_pre = float(np.mean([b[1] for b in best.values()]))
    rows.append(["mean", mean_imp, mean_pre])
    atomic_write(out_dir / "summary.csv", csv_text(["seed", "best_test_l_imp", "best_test_l_pre"], rows))
    print(f"mean of best test losses over {len(best)} seed(s): l_imp {mean_imp!r} l_pre {mean_pre!r}")
    return {"per_seed": best, "mean_imp": mean_imp, "mean_pre": mean_pre}


def cmd_eval(cfg: RunConfig, model_path, data_path, out_path, which: str = "test") -> list[list]:
    """Score the model and the baselines at every evaluation missing rate."""
    saved = load_model(model_path, cfg.model_config())
    model = Ingrain(cfg.model_config(), saved.params, cfg.points_per_cycle)
    rates = cfg.eval_missing_rates or (cfg.missing_rate,)
    report_deg = saved.scaler.mode == "minmax"
    sgru = None
    rows = []
    for rate in rates:
        data = prepare(cfg, data_path, scaler=saved.scaler, rate=rate)
        windows = {"test": data.test, "train": data.train, "all": data.train + data.test}[which]
        if not windows:
            raise ad.ContractError(f"the {which} split is empty")
        if cfg.train_sgru and sgru is None:
            sgru_cfg = SgruConfig(cfg.hidden_size, 2, cfg.sgru_epochs, cfg.lr, cfg.batch_size,
                                  cfg.clip_norm, cfg.seeds[0])
            sgru, _ = sgru_predict_baseline(data.train, [], sgru_cfg)
        res = model.infer(windows, batch_size=cfg.batch_size)
        results = [
            ("ingrain", "imputation", imputation_loss(windows, [r[0] for r in res], saved.scaler)),
            ("ingrain", "prediction", prediction_loss(windows, [r[1] for r in res], saved.scaler)),
            ("knn_linear", "imputation",
             imputation_loss(windows, [knn_or_fallback(w, cfg.knn_k) for w in windows], saved.scaler)),
            ("linear_interp", "imputation",
             imputation_loss(windows, [linear_interp_impute(w) for w in windows], saved.scaler)),
            ("persistence", "prediction",
             prediction_loss(windows, [persistence_predict(w) for w in windows], saved.scaler)),
        ]
        if sgru is not None:
            results.append(("sgru", "prediction", prediction_loss(windows, sgru.predict(windows), saved.scaler)))
        for method, task, (loss, deg) in results:
            rows.append([rate, method, task, loss, deg if report_deg else None])
    atomic_write(out_path, csv_text(METRICS_COLUMNS, rows))
    for r in rows:
        print(f"rate {r[0]!r:<6} {r[1]:<14} {r[2]:<11} {r[3]!r}")
    return rows


def cmd_sweep(cfg: RunConfig, data_path, out_path) -> list[list]:
    """Train and test once per axis value (same seeds each time); long-form CSV output."""
    if cfg.sweep is None:
        raise ConfigError("sweep needs exactly one 'sweep.<key> = v1,v2,...' entry")
    axis, values = cfg.sweep
    rows = []
    for value in values:
        point = cfg.replace(**{axis: value}, sweep=None)
        data = prepare(point, data_path)
        bests = []
        for seed in point.seeds:
            _, logs = train(data.train, point.train_config(seed), test_set=data.test or None)
            bests.append(best_test(logs))
        imp = float(np.mean([b[0] for b in bests]))
        pre = float(np.mean([b[1] for b in bests]))
        if point.lambda_imp > 0:
            rows.append([axis, value, "imputation", imp])
        if point.lambda_pre > 0:
            rows.append([axis, value, "prediction", pre])
        log.info("sweep %s=%s: imp %.6g pre %.6g", axis, value, imp, pre)
    atomic_write(out_path, csv_text(SWEEP_COLUMNS, rows))
    return rows


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="run with this single seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--profile", choices=["full", "desk"], help="base hyperparameter profile")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="ingrain", description="Trajectory imputation and next-location prediction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic record CSV")
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", parents=[common], help="train one model per seed")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="output directory")

    e = sub.add_parser("eval", parents=[common], help="score a model and the baselines")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True, help="metrics CSV path")
    e.add_argument("--split", choices=["test", "train", "all"], default="test")

    w = sub.add_parser("sweep", parents=[common], help="vary one config key")
    w.add_argument("--data", type=Path, required=True)
    w.add_argument("--out", type=Path, required=True, help="sweep CSV path")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, args.overrides, seed=None if args.command == "synth" else args.seed,
                          profile=args.profile)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "synth":
            cmd_synth(cfg, args.out, args.seed)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.model, args.data, args.out, args.split)
        else:
            cmd_sweep(cfg, args.data, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, ModelFormatError, ad.ContractError, ad.DimensionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
