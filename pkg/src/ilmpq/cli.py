"""``ilmpq`` command line: train, quantize, eval, sweep, calibrate, report.

Every subcommand writes only inside ``--out`` (atomically) and is
deterministic for a fixed config and seed.  Failures print one JSON record
``{"error": {"kind": ..., "message": ...}}`` to stderr and exit with 2
(config / IO / state) or 3 (numeric).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import engine, hw
from .assignment import SchemeRatio
from .config import RunConfig, load_config, load_profile
from .data import Dataset
from .errors import (ConfigError, ContractViolation, DegenerateAnchorsError, DomainError,
                     InsufficientDataError, StateError, TrainingDivergedError,
                     UnsupportedConfigError)
from .fileio import atomic_write_bytes, canonical_json, read_model, write_model
from .model import build_model
from .quant import RowKind
from .report import assignment_records, meta_record, write_report, write_summary
from .train import TrainConfig, assign, predict, qat_train, topk_correct

log = logging.getLogger("ilmpq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MODEL_FILE, REPORT_FILE, SUMMARY_FILE, PROFILE_FILE = "model.ilmpq", "report.jsonl", "summary.txt", "profile.json"


def _workers() -> int:
    raw = os.environ.get("ILMPQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ILMPQ_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ILMPQ_THREADS must be >= 1")
    return n


def _config(args) -> RunConfig:
    """Load ``--config`` and apply ``--seed`` / ``--ratio`` overrides."""
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    raw = copy.deepcopy(cfg.raw)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "ratio", None) is not None:
        SchemeRatio.parse(args.ratio)
        raw["ratio"] = args.ratio
    return RunConfig(raw, cfg.base_dir)


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _row_counts(model) -> dict:
    counts = {k.value: 0 for k in RowKind}
    for i in model.weight_layer_indices():
        a = model.layers[i].assignment
        if a is not None:
            for kind, n in zip(RowKind, a.counts()):
                counts[kind.value] += n
    return counts


def _accuracy(model, test: Dataset, engine_name: str, quantized=None) -> tuple[dict, dict]:
    """Top-1 / top-5 on ``test`` plus, for the integer engine, op counts."""
    if len(test) == 0:
        raise DomainError("evaluation set is empty")
    extra = {}
    if engine_name == "bit-exact":
        qm = engine.quantize_model(model, quantized)
        logits = np.concatenate([engine.infer(qm, test.x[i:i + 1024]) for i in range(0, len(test), 1024)])
        per_layer = engine.op_counts(qm)
        extra["op_counts"] = {k: sum(r[k] for r in per_layer) for k in per_layer[0]}
    else:
        logits = predict(model, test.x, "qat" if model.is_quantized else "float")
    acc = {"top1": float(topk_correct(logits, test.y, 1).mean())}
    if test.n_classes >= 5:
        acc["top5"] = float(topk_correct(logits, test.y, 5).mean())
    return acc, extra


def _hw_metrics(profile, model, ratio: SchemeRatio) -> dict:
    if profile is None:
        return {}
    gops, lat = hw.estimate(hw.workload(hw.model_shapes(model), ratio), profile)
    return {"throughput_gops": gops, "latency_ms": lat * 1e3}


def _cli_profile(args, cfg: RunConfig | None):
    if getattr(args, "profile", None):
        return load_profile(args.profile)
    return cfg.profile() if cfg is not None else None


def _write_outputs(out: Path, records: list[dict]) -> None:
    write_report(out / REPORT_FILE, records)
    write_summary(out / SUMMARY_FILE, records)


def _warm_start(fresh, path):
    """Load float weights from ``path`` into a model built from the config."""
    init, _, _ = read_model(path)
    if init.any_assigned:
        raise StateError("warm start needs a float checkpoint, not a quantized one")
    shapes = [(type(layer).__name__, getattr(layer, "weight", np.empty(0)).shape) for layer in fresh.layers]
    if [(type(layer).__name__, getattr(layer, "weight", np.empty(0)).shape) for layer in init.layers] != shapes:
        raise ContractViolation("warm-start checkpoint does not match the configured model")
    return init


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = cfg.train_config(_workers())
    train, test = cfg.datasets()
    model = build_model(cfg.layers(), train.x.shape[1:], cfg.seed, tc.act_bits, tc.act_clip)
    if args.model is not None:
        model = _warm_start(model, args.model)
    result = qat_train(model, train, cfg.ratio, tc)
    m = result.model
    quantized = engine.frozen_codes(m) if m.is_quantized else None
    acc, extra = _accuracy(m, test, args.engine, quantized)
    out = Path(args.out)
    meta = meta_record("train", cfg.raw if args.model is None else
                       {"config": cfg.raw, "model_sha256": _file_digest(args.model)}, cfg.seed)
    write_model(out / MODEL_FILE, m, quantized, {"config_hash": meta["config_hash"], "seed": cfg.seed})
    metrics = {"type": "metrics", "method": "float" if tc.bypass_quant else "ILMPQ",
               "ratio": None if tc.bypass_quant else str(cfg.ratio), "first_last_fixed8": False,
               "engine": args.engine, "row_counts": _row_counts(m), "final_loss": result.history[-1],
               **acc, **extra, **_hw_metrics(_cli_profile(args, cfg), m, cfg.ratio)}
    _write_outputs(out, [meta, metrics] + assignment_records(result.sensitivities, result.assignments))
    return EXIT_OK


def cmd_quantize(args) -> int:
    """Post-training assignment and quantization of a float checkpoint (no QAT)."""
    if args.model is None:
        raise ConfigError("quantize needs --model")
    cfg = _config(args)
    model, _, _ = read_model(args.model)
    tc = TrainConfig(**cfg.raw.get("train", {}), seed=cfg.seed, workers=_workers())
    train, test = cfg.datasets()
    assignments, sens = assign(model, train, cfg.ratio, tc)
    quantized = engine.frozen_codes(model)
    acc, _ = _accuracy(model, test, "qat-sim")
    out = Path(args.out)
    meta = meta_record("quantize", {"config": cfg.raw, "model_sha256": _file_digest(args.model)}, cfg.seed)
    write_model(out / MODEL_FILE, model, quantized, {"config_hash": meta["config_hash"], "seed": cfg.seed})
    metrics = {"type": "metrics", "method": "PTQ", "ratio": str(cfg.ratio), "first_last_fixed8": False,
               "engine": "qat-sim", "row_counts": _row_counts(model), **acc,
               **_hw_metrics(_cli_profile(args, cfg), model, cfg.ratio)}
    _write_outputs(out, [meta, metrics] + assignment_records(sens, assignments))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.model is None:
        raise ConfigError("eval needs --model")
    cfg = _config(args)
    model, quantized, _ = read_model(args.model)
    if args.engine == "bit-exact" and not model.is_quantized:
        raise StateError("the bit-exact engine needs a quantized model")
    _, test = cfg.datasets()
    acc, extra = _accuracy(model, test, args.engine, quantized)
    ratio = cfg.ratio if model.is_quantized else None
    meta = meta_record("eval", {"config": cfg.raw, "model_sha256": _file_digest(args.model),
                                "engine": args.engine}, cfg.seed)
    metrics = {"type": "metrics", "method": "eval", "ratio": None if ratio is None else str(ratio),
               "engine": args.engine, "row_counts": _row_counts(model), **acc, **extra}
    if ratio is not None:
        metrics.update(_hw_metrics(_cli_profile(args, cfg), model, ratio))
    _write_outputs(Path(args.out), [meta, metrics])
    return EXIT_OK


def _hw_settings(args, cfg: RunConfig | None) -> dict:
    hwc = cfg.hardware if cfg is not None else {}
    return {
        "device": args.device or hwc.get("device"),
        "fixed8": args.fixed8 if args.fixed8 is not None else hwc.get("fixed8", 5),
        "step": args.step if args.step is not None else hwc.get("step", 5),
        "first_last_fixed8": hwc.get("first_last_fixed8", False),
        "shapes": hwc.get("shapes", "resnet18"),
    }


def _shapes(settings: dict, cfg: RunConfig | None):
    if settings["shapes"] == "resnet18":
        return hw.resnet18_shapes()
    if cfg is None:
        raise ConfigError("model shapes need --config with a model section")
    train, _ = cfg.datasets()
    return hw.model_shapes(build_model(cfg.layers(), train.x.shape[1:], cfg.seed))


def _anchors(settings: dict, cfg: RunConfig | None):
    if cfg is not None and "anchors" in cfg.hardware:
        return cfg.anchors()
    if settings["device"] is None:
        raise ConfigError("calibration needs --device or anchors in --config")
    return list(hw.MEASURED_RESNET18[settings["device"]])


def cmd_calibrate(args) -> int:
    cfg = _config(args) if args.config else None
    s = _hw_settings(args, cfg)
    shapes = _shapes(s, cfg)
    anchors = _anchors(s, cfg)
    name = s["device"] or "calibrated"
    profile = hw.calibrate(anchors, shapes, name)
    out = Path(args.out)
    atomic_write_bytes(out / PROFILE_FILE, (canonical_json(profile.to_dict()) + "\n").encode())
    records = [meta_record("calibrate", {"config": cfg.raw if cfg else None, **s}, cfg.seed if cfg else 0),
               {"type": "profile", **profile.to_dict()}]
    for a, wl in zip(anchors, hw.anchor_workloads(anchors, shapes)):
        gops, lat = hw.estimate(wl, profile)
        records.append({"type": "metrics", "method": a.label or "anchor", "ratio": str(a.ratio),
                        "first_last_fixed8": a.first_last_fixed8, "measured_latency_ms": a.latency * 1e3,
                        "throughput_gops": gops, "latency_ms": lat * 1e3})
    _write_outputs(out, records)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args) if args.config else None
    s = _hw_settings(args, cfg)
    shapes = _shapes(s, cfg)
    profile = _cli_profile(args, cfg)
    if profile is None:
        if s["device"] is None:
            raise ConfigError("sweep needs --profile, --device or a hardware profile in --config")
        profile = hw.calibrate(_anchors(s, cfg), shapes, s["device"])
    grid = hw.sweep(profile, shapes, s["fixed8"], s["step"], s["first_last_fixed8"])
    best = hw.optimal_ratio(profile, shapes, s["fixed8"], s["step"], s["first_last_fixed8"])
    peak = next(g for g in grid if g["ratio"] == str(best))
    records = [meta_record("sweep", {"config": cfg.raw if cfg else None, "profile": profile.to_dict(), **s},
                           cfg.seed if cfg else 0),
               {"type": "profile", **profile.to_dict()},
               {"type": "metrics", "method": "optimum", "ratio": str(best),
                "first_last_fixed8": s["first_last_fixed8"], "throughput_gops": peak["throughput_gops"],
                "latency_ms": peak["latency_ms"]}]
    records += [{"type": "sweep", **g} for g in grid]
    _write_outputs(Path(args.out), records)
    return EXIT_OK


def cmd_report(args) -> int:
    """Merge report files and re-render the summary table."""
    from .report import read_report
    if not args.inputs:
        raise ConfigError("report needs at least one input report")
    records = [rec for p in args.inputs for rec in read_report(p)]
    _write_outputs(Path(args.out), records)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "quantize": cmd_quantize, "eval": cmd_eval,
            "sweep": cmd_sweep, "calibrate": cmd_calibrate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ilmpq", description=__doc__.splitlines()[0].replace("``", ""))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    for name, help_ in (("train", "assign rows, run QAT, evaluate"),
                        ("quantize", "post-training assignment of a float checkpoint"),
                        ("eval", "evaluate a model file")):
        sp = add(name, help_)
        sp.add_argument("--config", help="run config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--ratio", help="PoT-4:Fixed-4:Fixed-8 percentages, e.g. 60:35:5")
        sp.add_argument("--engine", choices=("qat-sim", "bit-exact"), default="qat-sim")
        sp.add_argument("--profile", help="hardware profile JSON for throughput / latency estimates")
        sp.add_argument("--model", help="model file" if name != "train" else
                        "float checkpoint to start from (warm start)")
    for name, help_ in (("sweep", "throughput / latency over the ratio grid"),
                        ("calibrate", "fit a hardware profile to measured latencies")):
        sp = add(name, help_)
        sp.add_argument("--config")
        sp.add_argument("--device", choices=sorted(hw.MEASURED_RESNET18))
        sp.add_argument("--fixed8", type=float)
        sp.add_argument("--step", type=float)
        if name == "sweep":
            sp.add_argument("--profile")
    sp = add("report", "merge reports and render the summary table")
    sp.add_argument("inputs", nargs="*")
    return p


def _error_kind(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, (TrainingDivergedError, DegenerateAnchorsError, InsufficientDataError,
                        FloatingPointError)):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, OSError):
        return "io", EXIT_CONFIG
    if isinstance(exc, StateError):
        return "state", EXIT_CONFIG
    if isinstance(exc, (ConfigError, UnsupportedConfigError)):
        return "config", EXIT_CONFIG
    if isinstance(exc, (DomainError, ContractViolation)):
        return "data", EXIT_CONFIG
    return "internal", EXIT_NUMERIC if isinstance(exc, ArithmeticError) else EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        kind, code = _error_kind(exc)
        if kind == "internal":
            log.exception("unexpected failure")
        print(json.dumps({"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
