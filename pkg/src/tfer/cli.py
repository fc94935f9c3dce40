"""Command-line driver: synth, pretrain, unlearn, continual, report.

Every run writes its fully resolved config to ``<out>/config.json``. CSV
reports carry no timing so identical configs give identical bytes; wall
time and parameter counts go to ``<out>/timing.json``.
"""
import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field

from .bank import load_bank, save_bank
from .data import generate_synthetic, load_dataset, save_dataset
from .detection import SCORE_KINDS, evaluate
from .errors import ConfigError, FormatError, NonFiniteLoss, TferError
from .model import PLACEMENTS, load_model, save_model, trainable_param_count
from .report import (
    DELTA_COLUMNS,
    TRAJECTORY_COLUMNS,
    csv_to_markdown,
    delta_rows,
    reports_to_csv,
    rows_to_csv,
    trajectory_rows,
)
from .training import (
    PretrainConfig,
    UnlearnConfig,
    baseline_grad_ascent,
    baseline_random_label,
    baseline_retrain,
    pretrain,
    unlearn_continual,
    unlearn_tfer,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

METHODS = ("tfer", "gradasc", "rlft", "retrain")
STRATEGIES = ("single", "naive", "orthogonal", "both")


@dataclass
class RunConfig:
    # data
    dataset: str = None  # path; None -> synthesize from the fields below
    classes: int = 10
    per_class: int = 500
    d: int = 32
    kappa: float = 20.0
    ood_sets: int = 3
    ood_per_set: int = 1000
    # pretrained model directory (model.bin + bank.json); None -> pretrain in process
    model: str = None
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.5
    d_h: int = 128
    d_out: int = 128
    # unlearning
    forget: list = field(default_factory=lambda: [0, 1])
    plan: list = field(default_factory=lambda: [[0, 1], [2, 3]])
    method: str = "tfer"
    strategy: str = "single"
    lambda_f: float = 1.0
    lambda_orth: float = 1.0
    tau: float = 0.03
    placement: str = "both"
    rank: int = 4
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.2
    use_protect: bool = True
    seed: int = 0
    scorer: str = "mahalanobis"
    space: str = "h"
    out: str = "runs/default"

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.classes >= 2, "classes", "must be >= 2")
        need(self.per_class >= 20, "per_class", "must be >= 20")
        need(self.d >= 2, "d", "must be >= 2")
        need(self.kappa > 0, "kappa", "must be > 0")
        need(self.ood_sets >= 1, "ood_sets", "must be >= 1")
        need(self.ood_per_set >= 1, "ood_per_set", "must be >= 1")
        need(self.pretrain_epochs >= 0, "pretrain_epochs", "must be >= 0")
        need(self.pretrain_lr >= 0, "pretrain_lr", "must be >= 0")
        need(self.d_h >= 1 and self.d_out >= 2, "d_h", "hidden/output widths too small")
        need(self.method in METHODS, "method", f"must be one of {METHODS}")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        need(self.lambda_f >= 0, "lambda_f", "must be >= 0")
        need(self.lambda_orth >= 0, "lambda_orth", "must be >= 0")
        need(self.tau > 0, "tau", "must be > 0")
        need(self.placement in PLACEMENTS, "placement", f"must be one of {tuple(PLACEMENTS)}")
        need(isinstance(self.rank, int) and self.rank >= 1, "rank", "must be a positive integer")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(self.scorer in SCORE_KINDS, "scorer", f"must be one of {SCORE_KINDS}")
        need(self.space in ("h", "z"), "space", "must be 'h' or 'z'")
        need(isinstance(self.forget, list) and self.forget, "forget", "must be a non-empty list of class ids")
        need(all(isinstance(c, int) for c in self.forget), "forget", "class ids must be integers")
        need(isinstance(self.plan, list) and all(isinstance(t, list) and t for t in self.plan), "plan", "must be a list of non-empty lists")
        return self

    def unlearn_config(self):
        return UnlearnConfig(
            lambda_f=self.lambda_f, lambda_orth=self.lambda_orth, tau=self.tau, lr=self.lr,
            epochs=self.epochs, batch_size=self.batch_size, rank=self.rank,
            placement=self.placement, seed=self.seed, use_protect=self.use_protect,
        )

    def pretrain_config(self):
        return PretrainConfig(d_h=self.d_h, d_out=self.d_out, epochs=self.pretrain_epochs, lr=self.pretrain_lr, seed=self.seed)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, value):
    """Parse a CLI/sweep string into the type of RunConfig.<name>."""
    default = FIELDS[name].default
    if FIELDS[name].default_factory is not dataclasses.MISSING:
        default = FIELDS[name].default_factory()
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            return json.loads(value)
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(name, f"cannot parse {value!r}") from None
    return value


def load_config(path=None, overrides=None):
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    unknown = sorted(set(raw) - set(FIELDS))
    if unknown:
        raise ConfigError(unknown[0], "unknown config key")
    vals = {k: _coerce(k, v) for k, v in raw.items()}
    for k, v in vals.items():
        if isinstance(FIELDS[k].default, float) and isinstance(v, int) and not isinstance(v, bool):
            vals[k] = float(v)
    return RunConfig(**vals).validate()


# -- helpers ------------------------------------------------------------------


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _prepare_out(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    _write(os.path.join(cfg.out, "config.json"), json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")


def _dataset(cfg):
    if cfg.dataset is None:
        return generate_synthetic(cfg.classes, cfg.per_class, cfg.d, cfg.kappa, cfg.ood_sets, cfg.ood_per_set, cfg.seed)
    if not os.path.exists(cfg.dataset):
        raise ConfigError("dataset", f"no such file {cfg.dataset!r}")
    return load_dataset(cfg.dataset)


def _base_model(cfg, ds):
    if cfg.model is None:
        return pretrain(ds, cfg.pretrain_config())
    mp, bp = os.path.join(cfg.model, "model.bin"), os.path.join(cfg.model, "bank.json")
    if not (os.path.exists(mp) and os.path.exists(bp)):
        raise ConfigError("model", f"{cfg.model!r} lacks model.bin / bank.json")
    projector, stack = load_model(mp)
    if len(stack):
        raise ConfigError("model", "base checkpoint must not carry adapters")
    return projector, load_bank(bp)


def _eval(cfg, projector, stack, bank, ds, method, forget_classes=None):
    return evaluate(projector, stack, bank, ds, cfg.scorer, method=method, forget_classes=forget_classes, space=cfg.space)


def _projector_params(projector):
    return int(projector.param_count)


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg):
    _prepare_out(cfg)
    ds = generate_synthetic(cfg.classes, cfg.per_class, cfg.d, cfg.kappa, cfg.ood_sets, cfg.ood_per_set, cfg.seed)
    path = os.path.join(cfg.out, "dataset.bin")
    crc = save_dataset(ds, path)
    print(ds.summary())
    print(f"crc32 {crc:08x}")
    return path


def cmd_pretrain(cfg):
    _prepare_out(cfg)
    ds = _dataset(cfg)
    t0 = time.perf_counter()
    projector, bank = pretrain(ds, cfg.pretrain_config())
    wall = time.perf_counter() - t0
    save_model(os.path.join(cfg.out, "model.bin"), projector)
    save_bank(os.path.join(cfg.out, "bank.json"), bank)
    rep = _eval(cfg, projector, None, bank.with_forgotten(cfg.forget), ds, "Original")
    text = reports_to_csv([rep])
    _write(os.path.join(cfg.out, "report.csv"), text)
    _write(os.path.join(cfg.out, "report.md"), csv_to_markdown(text))
    timing = {"pretrain_seconds": wall, "projector_params": _projector_params(projector)}
    _write(os.path.join(cfg.out, "timing.json"), json.dumps(timing, indent=2) + "\n")
    print(csv_to_markdown(text), end="")
    return rep


def _run_single(cfg, projector, bank, ds):
    """One method on cfg.forget; returns (report, stack or None, log or None, timing)."""
    uc = cfg.unlearn_config()
    forget = cfg.forget
    t0 = time.perf_counter()
    if cfg.method == "retrain":
        retained = [c for c in range(ds.class_count) if c not in forget]
        proj, rbank = baseline_retrain(ds, retained, uc, cfg.pretrain_config())
        wall = time.perf_counter() - t0
        rep = _eval(cfg, proj, None, rbank, ds, "Retrain")
        return rep, None, None, {"seconds": wall, "trainable_params": _projector_params(proj)}, proj
    fn = {"tfer": unlearn_tfer, "gradasc": baseline_grad_ascent, "rlft": baseline_random_label}[cfg.method]
    stack, log = fn(projector, bank, ds, forget, uc)
    wall = time.perf_counter() - t0
    label = {"tfer": "TFER", "gradasc": "GradAsc", "rlft": "RL-FT"}[cfg.method]
    rep = _eval(cfg, projector, stack, bank.with_forgotten(forget), ds, label)
    return rep, stack, log, {"seconds": wall, "trainable_params": trainable_param_count(stack)}, projector


def cmd_unlearn(cfg):
    _prepare_out(cfg)
    ds = _dataset(cfg)
    projector, bank = _base_model(cfg, ds)
    base = _eval(cfg, projector, None, bank.with_forgotten(cfg.forget), ds, "Original")
    rep, stack, log, timing, proj = _run_single(cfg, projector, bank, ds)
    timing["projector_params"] = _projector_params(projector)
    timing["param_fraction"] = timing["trainable_params"] / timing["projector_params"]
    text = reports_to_csv([base, rep])
    _write(os.path.join(cfg.out, "report.csv"), text)
    _write(os.path.join(cfg.out, "report.md"), csv_to_markdown(text))
    _write(os.path.join(cfg.out, "delta.csv"), rows_to_csv(delta_rows([base, rep]), DELTA_COLUMNS))
    if log is not None:
        _write(os.path.join(cfg.out, "trainlog.csv"), log.to_csv())
    save_model(os.path.join(cfg.out, "model.bin"), proj, stack)
    _write(os.path.join(cfg.out, "timing.json"), json.dumps(timing, indent=2, sort_keys=True) + "\n")
    print(csv_to_markdown(text), end="")
    print(f"trainable params {timing['trainable_params']} / {timing['projector_params']}  wall {timing['seconds']:.2f}s")
    return base, rep


def cmd_continual(cfg):
    _prepare_out(cfg)
    ds = _dataset(cfg)
    projector, bank = _base_model(cfg, ds)
    strategies = ("naive", "orthogonal") if cfg.strategy in ("both", "single") else (cfg.strategy,)
    plan = [sorted(t) for t in cfg.plan]
    traj = []
    timing = {}
    reports = []
    for strat in strategies:
        t0 = time.perf_counter()
        stack, steps = unlearn_continual(projector, bank, ds, plan, cfg.unlearn_config(), strat, cfg.scorer, cfg.space)
        timing[strat] = time.perf_counter() - t0
        traj += trajectory_rows(strat, steps, plan)
        for st in steps:
            st.report.method = f"{strat}-task{st.task_index + 1}"
            reports.append(st.report)
    text = rows_to_csv(traj, TRAJECTORY_COLUMNS)
    _write(os.path.join(cfg.out, "trajectory.csv"), text)
    rtext = reports_to_csv(reports)
    _write(os.path.join(cfg.out, "report.csv"), rtext)
    _write(os.path.join(cfg.out, "report.md"), csv_to_markdown(rtext))
    _write(os.path.join(cfg.out, "timing.json"), json.dumps(timing, indent=2, sort_keys=True) + "\n")
    print(text, end="")
    return traj


def cmd_report(path, out=None):
    with open(path) as fh:
        md = csv_to_markdown(fh.read())
    if out:
        _write(out, md)
    print(md, end="")
    return md


def run_sweep(cfg, key, values, command):
    """Run ``command`` once per value of ``key`` into <out>/<key>=<value>; write a combined CSV."""
    rows = []
    for v in values:
        sub = dataclasses.replace(cfg, **{key: _coerce(key, v)}, out=os.path.join(cfg.out, f"{key}={v}"))
        sub.validate()
        result = command(sub)
        if isinstance(result, tuple):
            rows.append((v, result[-1]))
    if rows:
        reps = []
        for v, rep in rows:
            rep.method = f"{rep.method} {key}={v}"
            reps.append(rep)
        os.makedirs(cfg.out, exist_ok=True)
        _write(os.path.join(cfg.out, "sweep.csv"), reports_to_csv(reps))
    return rows


# -- argument parsing -----------------------------------------------------------

FLAG_KEYS = {
    "seed": "seed",
    "method": "method",
    "strategy": "strategy",
    "lambda_f": "lambda_f",
    "lambda_orth": "lambda_orth",
    "tau": "tau",
    "rank": "rank",
    "placement": "placement",
    "epochs": "epochs",
    "lr": "lr",
    "scorer": "scorer",
    "out": "out",
    "dataset": "dataset",
    "model": "model",
}


def build_parser():
    p = argparse.ArgumentParser(prog="tfer", description="Boundary-preserving class unlearning on synthetic embeddings.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "pretrain", "unlearn", "continual"):
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--method")
        sp.add_argument("--strategy")
        sp.add_argument("--lambda-f", dest="lambda_f", type=float)
        sp.add_argument("--lambda-orth", dest="lambda_orth", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--rank", type=int)
        sp.add_argument("--placement")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--scorer")
        sp.add_argument("--out")
        sp.add_argument("--dataset")
        sp.add_argument("--model")
        sp.add_argument("--sweep", help="KEY=V1,V2,...")
    rp = sub.add_parser("report")
    rp.add_argument("csv")
    rp.add_argument("--out")
    return p


def _parse_sweep(arg):
    key, sep, vals = arg.partition("=")
    key = key.replace("-", "_")
    if not sep or not vals:
        raise ConfigError("sweep", "expected KEY=V1,V2,...")
    if key not in FIELDS:
        raise ConfigError("sweep", f"unknown key {key!r}")
    return key, [v for v in vals.split(",") if v]


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.csv, args.out)
            return EXIT_OK
        overrides = {v: getattr(args, k) for k, v in FLAG_KEYS.items()}
        cfg = load_config(args.config, overrides)
        command = {"synth": cmd_synth, "pretrain": cmd_pretrain, "unlearn": cmd_unlearn, "continual": cmd_continual}[args.command]
        if args.sweep:
            key, values = _parse_sweep(args.sweep)
            run_sweep(cfg, key, values, command)
        else:
            command(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TferError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
