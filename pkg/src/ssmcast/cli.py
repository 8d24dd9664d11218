"""``ssmcast`` command line.

Exit codes: 0 ok, 2 config/usage, 3 data format, 4 training divergence,
5 evaluation constraint (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from ssmcast import __version__, dssm, lgssm
from ssmcast import diffmath as dm
from ssmcast.config import ConfigError, RunConfig, load_run_config
from ssmcast.data import io as dio
from ssmcast.data.preprocess import channel_dictionary, invert_normalization, prepare_records, split_by_hash
from ssmcast.data.records import DataFormatError, NormalizationStats
from ssmcast.data.simulate import simulate
from ssmcast.pipelines.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ssmcast.pipelines.evaluate import finite_or_none, cross_validate, evaluate_mae, reports_csv_text
from ssmcast.pipelines.parallel import ordered_map, resolve_threads
from ssmcast.pipelines.train import STRATEGIES, TrainingDivergedError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_EVAL = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class EvalConstraintError(Exception):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path, command: str, cfg: RunConfig | dict, outputs, **extra) -> None:
    """Sidecar recording the resolved config, tool version and output digests."""
    resolved = cfg.resolved() if isinstance(cfg, RunConfig) else cfg
    dio.write_json(path, {
        "command": command,
        "tool_version": __version__,
        "config": resolved,
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        **extra,
    })


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _threads(args) -> int:
    try:
        return resolve_threads(getattr(args, "threads", None))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        sc = cfg.data.synthetic()
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from None
    streams, truth = simulate(sc, args.seed)
    events = out / "events.jsonl"
    n = dio.write_events(events, streams)
    gt = out / "ground_truth.json"
    dio.write_json(gt, {**truth.to_json(), "seed": args.seed, "tool_version": __version__, "config": cfg.resolved()})
    _write_manifest(out / "events.manifest.json", "simulate", cfg, [events, gt], seed=args.seed, n_events=n,
                    n_patients=len(streams))
    print(f"wrote {n} events for {len(streams)} patients to {events}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = load_run_config(args.config)
    cfg = cfg.override("data", grid_step=args.grid_step, n_folds=args.n_folds)
    streams = dio.read_events(_need_file(args.events, "events file"))
    if not streams:
        raise DataFormatError(f"{args.events}: no events")
    oc, ic = channel_dictionary(streams)
    if cfg.data.obs_channels is not None:
        oc = list(cfg.data.obs_channels)
    if cfg.data.int_channels is not None:
        ic = list(cfg.data.int_channels)
    if not 0 <= args.fold < cfg.data.n_folds:
        raise UsageError(f"--fold must lie in 0..{cfg.data.n_folds - 1}")
    ids = [s.patient_id for s in streams]
    tr, ev, te = split_by_hash(ids, cfg.data.split_fractions, args.fold, cfg.data.n_folds)
    records, stats, thresholds = prepare_records(streams, oc, ic, cfg.data.grid_step, tr)
    by_id = {r.patient_id: r for r in records}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, split in (("train", tr), ("eval", ev), ("test", te)):
        p = out / f"{name}.jsonl"
        dio.write_records(p, [by_id[i] for i in split])
        files.append(p)
    dio.write_json(out / "normalization.json", stats.to_json())
    dio.write_json(out / "thresholds.json", thresholds)
    files += [out / "normalization.json", out / "thresholds.json"]
    _write_manifest(out / "manifest.json", "prepare", cfg, files, fold=args.fold,
                    splits={"train": tr, "eval": ev, "test": te}, events_sha256=_sha256(args.events))
    print(f"prepared {len(records)} records (train {len(tr)}, eval {len(ev)}, test {len(te)}) in {out}")
    return EXIT_OK


def _load_split(data_dir: Path, name: str):
    p = data_dir / f"{name}.jsonl"
    return dio.read_records(_need_file(p, f"{name} split")) if name == "train" or p.exists() else []


def _curve_csv(curve, cfg: RunConfig) -> str:
    lines = [f"# ssmcast {__version__}",
             f"# config: {json.dumps(cfg.resolved(), sort_keys=True, separators=(',', ':'))}",
             "epoch,phase,train_objective,eval_objective"]
    lines += [f"{r.epoch},{r.phase},{r.train_objective!r},{r.eval_objective!r}" for r in curve]
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.strategy is not None and args.strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {args.strategy!r} (expected one of {', '.join(STRATEGIES)})")
    cfg = cfg.override("train", strategy=args.strategy, seed=args.seed, epochs_si=args.epochs_si,
                       epochs_tf=args.epochs_tf, learning_rate=args.lr)
    cfg = cfg.override("model", skip_initial_kl=True if args.skip_initial_kl else None)
    data_dir = Path(args.data)
    tr, ev = _load_split(data_dir, "train"), _load_split(data_dir, "eval")
    if not tr:
        raise DataFormatError(f"{data_dir}: empty training split")
    norm_path = data_dir / "normalization.json"
    stats = NormalizationStats.from_json(dio.read_json(norm_path)) if norm_path.exists() else None
    tc = cfg.train.train_config()
    mc = cfg.model.dssm_config(len(tr[0].obs_channels), len(tr[0].int_channels))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train(tr, ev, tc, mc, stats, cfg.resolved(), _threads(args))
    except TrainingDivergedError as exc:
        if exc.last_good is not None:
            save_checkpoint(out.with_suffix(".last_good.json"), exc.last_good)
        raise
    save_checkpoint(out, result.checkpoint)
    curve = Path(args.curve) if args.curve else out.with_suffix(".curve.csv")
    curve.write_text(_curve_csv(result.curve, cfg), encoding="utf-8")
    print(f"trained {tc.strategy} for {len(result.curve)} epochs; checkpoint {out}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    env = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
    records = dio.read_records(_need_file(args.records, "records file"))
    if args.t_star < 1 or args.horizon < 1:
        raise UsageError("--t-star and --horizon must be >= 1")
    short = [r.patient_id for r in records if r.T < args.t_star + args.horizon]
    if short and args.strict:
        raise EvalConstraintError(f"t*+horizon={args.t_star + args.horizon} exceeds {len(short)} record(s), "
                                  f"e.g. {short[0]}")
    if args.denorm and env.normalization is None:
        raise UsageError("--denorm needs a checkpoint with normalisation statistics")
    usable = [r for r in records if r.T >= args.t_star]
    seed = env.seed if args.seed is None else args.seed

    def one(r):
        f = env.forecast(r, args.t_star, min(args.horizon, r.T - args.t_star), n_paths=args.n_paths, seed=seed)
        f.patient_id = r.patient_id
        return invert_normalization(f, env.normalization) if args.denorm else f

    results = ordered_map(one, usable, _threads(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for f in results:
            fh.write(json.dumps({**f.to_json(), "denormalized": bool(args.denorm)}, allow_nan=False) + "\n")
    _write_manifest(out.with_suffix(".manifest.json"), "forecast", env.config, [out], checkpoint_sha256=_sha256(args.ckpt),
                    t_star=args.t_star, horizon=args.horizon, n_paths=args.n_paths, seed=seed,
                    skipped=[r.patient_id for r in records if r.T < args.t_star], truncated=short)
    print(f"wrote {len(results)} forecasts to {out}")
    return EXIT_OK


def _report_paths(out: str) -> tuple[Path, Path]:
    p = Path(out)
    base = p.with_suffix("") if p.suffix in (".json", ".csv") else p
    return base.with_suffix(".json"), base.with_suffix(".csv")


def _parse_horizons(text: str) -> list[int]:
    try:
        hs = [int(h) for h in text.split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"--horizons must be comma-separated integers, got {text!r}") from None
    if not hs or min(hs) < 1:
        raise UsageError("--horizons must be positive")
    return hs


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    if args.horizons:
        cfg = cfg.override("eval", horizons=_parse_horizons(args.horizons))
    cfg = cfg.override("eval", t_star=args.t_star, n_paths=args.n_paths)
    ec = cfg.eval.eval_config()
    threads = _threads(args)
    reports = []
    if args.cv:
        streams = dio.read_events(_need_file(args.events or "", "events file (--events)"))
        if not streams:
            raise DataFormatError("no events")
        oc, ic = channel_dictionary(streams)
        oc = list(cfg.data.obs_channels or oc)
        ic = list(cfg.data.int_channels or ic)
        strategies = args.strategy.split(",") if args.strategy else [cfg.train.strategy]
        for st in strategies:
            if st not in STRATEGIES:
                raise UsageError(f"unknown strategy {st!r}")
            c = cfg.override("train", strategy=st)
            reports.append(cross_validate(
                streams, oc, ic, c.train.train_config(), ec, c.model.dssm_config(len(oc), len(ic)),
                n_folds=cfg.data.n_folds, grid_step=cfg.data.grid_step, threads=threads,
                record_runtime=args.timing, echo=c.resolved(),
            ))
    else:
        if not args.ckpt:
            raise UsageError("evaluate needs --ckpt or --cv")
        for ck in args.ckpt:
            env = load_checkpoint(_need_file(ck, "checkpoint"))
            if args.records:
                records = dio.read_records(_need_file(args.records, "records file"))
            else:
                raise UsageError("--records is required with --ckpt")
            reports.append(evaluate_mae(env, records, ec, threads, record_runtime=args.timing))
    json_path, csv_path = _report_paths(args.out)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    body = {"tool_version": __version__, "reports": [r.to_json() for r in reports]}
    dio.write_json(json_path, finite_or_none(body))
    text = reports_csv_text(reports)
    csv_path.write_text(text, encoding="utf-8")
    for r in reports:
        for m in r.metrics:
            print(f"{r.strategy:6s} MAE@{m.horizon}: {m.mae:.4f} ({m.sem:.4f})  n={m.n_records}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

GRADCHECK_TOL = 1e-4


def _parse_dims(text: str) -> dict[str, int]:
    dims = {"z": 2, "o": 3, "i": 2, "T": 4}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, val = part.partition("=")
        if key not in dims or not val.isdigit() or int(val) < 1:
            raise UsageError(f"--dims entries look like z=2,o=3,i=2,T=4; got {part!r}")
        dims[key] = int(val)
    if dims["T"] < 2:
        raise UsageError("--dims T must be >= 2 for the forecast objective")
    return dims


def gradcheck_reports(dims: dict[str, int], seed: int, inject_fault: bool = False):
    """Finite-difference reports for both ELBOs and the linear filter likelihood."""
    z, o, i, T = dims["z"], dims["o"], dims["i"], dims["T"]
    rng = np.random.default_rng(seed)
    cfg = dssm.DssmConfig(z_dim=z, o_dim=o, i_dim=i, hidden=6, lstm_hidden=5, combiner_hidden=6)
    params = dssm.init_params(cfg, seed)
    params = params.updated({k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()})
    x, u = rng.normal(size=(T, o)), rng.normal(size=(T, i))
    noise = dssm.NoisePlan.generate(seed + 1, 2, 1, T, z, i)
    t_star = max(1, T // 2)
    objectives = {
        "elbo_system_id": lambda p: dm.neg(dssm.elbo_system_id(x, u, p, cfg, noise).elbo),
        "elbo_forecast": lambda p: dm.neg(dssm.elbo_forecast(x, u, t_star, T - t_star, p, cfg, noise).elbo),
    }
    lg = lgssm.params_to_raw(lgssm.LgssmParams.random(z, o, i, seed), 1e-4)
    out = []
    for name, f in objectives.items():
        out.append((name, _check(f, params, inject_fault)))
    kf = lambda p: dm.neg(lgssm.traced_loglik(p, x[None], u[None], True, 1e-4))  # noqa: E731
    out.append(("kf_loglik", _check(kf, lg, inject_fault)))
    return out


def _check(f, params, inject_fault):
    _, grad = dm.value_and_gradient(f, params)
    if inject_fault:
        first = next(iter(grad))
        grad = grad.updated({first: grad[first] + 1.0})
    return dm.finite_difference_check(f, params, epsilon=1e-5, tolerance=GRADCHECK_TOL, gradient=grad)


def cmd_gradcheck(args) -> int:
    dims = _parse_dims(args.dims)
    ok = True
    for name, rep in gradcheck_reports(dims, args.seed, args.inject_fault):
        print(f"[{name}] {'PASS' if rep.passed else 'FAIL'} worst={rep.worst:.3e}")
        for line in rep.lines():
            print("  " + line)
        ok &= rep.passed
    if not ok:
        raise EvalConstraintError(f"gradient check failed at tolerance {GRADCHECK_TOL:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssmcast", description="Joint observation and intervention forecasting with state space models.")
    p.add_argument("--version", action="version", version=f"ssmcast {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="sample a synthetic event dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", help="grid, impute, normalise and split events")
    s.add_argument("--events", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--grid-step", type=float)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--n-folds", type=int)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one strategy on a prepared directory")
    s.add_argument("--data", required=True)
    s.add_argument("--strategy")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--curve")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs-si", type=int)
    s.add_argument("--epochs-tf", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--skip-initial-kl", action="store_true", help="drop the KL term of the first latent state")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("forecast", help="forecast records from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--records", required=True)
    s.add_argument("--t-star", type=int, required=True)
    s.add_argument("--horizon", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-paths", type=int, default=128)
    s.add_argument("--seed", type=int)
    s.add_argument("--denorm", action="store_true")
    s.add_argument("--strict", action="store_true")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("evaluate", help="MAE report for checkpoints or a cross-validation run")
    s.add_argument("--ckpt", action="append")
    s.add_argument("--records")
    s.add_argument("--cv", action="store_true")
    s.add_argument("--events")
    s.add_argument("--strategy", help="comma-separated strategies for --cv")
    s.add_argument("--config")
    s.add_argument("--horizons")
    s.add_argument("--t-star", type=int)
    s.add_argument("--n-paths", type=int)
    s.add_argument("--timing", action="store_true", help="record wall-clock runtime (output is then not reproducible)")
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    s.add_argument("--dims", default="z=2,o=3,i=2,T=4")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject-fault", action="store_true", help="corrupt one gradient (negative control)")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except EvalConstraintError as exc:
        print(f"evaluation constraint: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
