"""Command-line entry point: ``veridip <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 when
``verify --assert-stolen`` finished but the p-value was not below alpha.
Errors go to stderr as one JSON line. Every run writes a JSON run manifest
(next to its main output, or wherever ``--manifest`` points).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import accountant, nn, shadow, steal, verify
from . import data as data_mod
from .errors import ConfigError, VeridipError
from .oracle import LocalOracle, open_oracle

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NOT_STOLEN = 0, 1, 2, 3

log = logging.getLogger("veridip")


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


# -- argument helpers ---------------------------------------------------------


def _int_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_grid(text) -> list:
    """``a:b:n`` (n evenly spaced points) or a comma list."""
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    if ":" in text:
        a, b, n = text.split(":")
        return [float(v) for v in np.linspace(float(a), float(b), int(n))]
    return [float(v) for v in text.split(",") if v.strip()]


def _add_train_flags(p, epochs=100, lr=1e-3):
    p.add_argument("--hidden", type=_int_list, default=(64, 64), help="hidden widths, e.g. 64,64")
    p.add_argument("--activation", choices=nn.ACTIVATIONS, default="relu")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)


def _add_oracle_flags(p):
    p.add_argument("--suspect", required=True, help="model file or http(s) URL")
    p.add_argument("--query-budget", type=int, default=None)
    p.add_argument("--timeout-ms", type=int, default=10_000)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--query-batch", type=int, default=64)


def _add_verify_flags(p):
    _add_oracle_flags(p)
    p.add_argument("--members", required=True, help="owner's member pool CSV")
    p.add_argument("--nonmembers", required=True, help="owner's non-member pool CSV")
    p.add_argument("--attack", choices=verify.ATTACK_KINDS, default="global")
    p.add_argument("--mode", choices=verify.MODES, default="basic")
    p.add_argument("--farm", default=None, help="shadow farm directory")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-bound", type=float, default=nn.LOSS_CEILING)
    p.add_argument("--threshold", type=float, default=None, help="fixed per-sample log-ratio threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="veridip", description="Ownership verification from membership-leakage fingerprints.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="JSON or YAML file of flag defaults (flags win)")
    common.add_argument("--manifest", default=None, help="run manifest path")
    common.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="synthetic Gaussian-cluster data")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=_float_grid, default=None,
                   help="train,test,holdout fractions; writes <out>_{train,test,holdout}.csv")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train an MLP on a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--eval", default=None, help="optional evaluation CSV")
    _add_train_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dp-train", parents=[common], help="DP-SGD training with privacy accounting")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=_int_list, default=(64, 64))
    p.add_argument("--activation", choices=nn.ACTIVATIONS, default="relu")
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--noise-multiplier", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("steal", parents=[common], help="produce a stolen copy of a victim")
    p.add_argument("--attack", choices=steal.ATTACKS, required=True)
    p.add_argument("--victim", required=True, help="model file (required for ft) or URL")
    p.add_argument("--data", required=True, help="data the attacker draws its share from")
    p.add_argument("--attacker-fraction", type=float, default=0.4)
    p.add_argument("--hidden", type=_int_list, default=None, help="student hidden widths (default: victim's)")
    p.add_argument("--lambda1", type=float, default=0.5, help="KD hard-label weight")
    p.add_argument("--lambda2", type=float, default=0.5, help="KD soft-target weight")
    p.add_argument("--temperature", type=float, default=1.5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--ft-schedule", default="1:0.1,10:0.01,20:0.001", help="epoch:lr pairs for ft")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("shadow-farm", parents=[common], help="train shadow models on random halves")
    p.add_argument("--members", required=True)
    p.add_argument("--nonmembers", required=True)
    p.add_argument("--n-models", type=int, default=shadow.DEFAULT_MODELS)
    p.add_argument("--workers", type=int, default=1)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="farm directory")

    p = sub.add_parser("find-sensitive", parents=[common], help="rank member samples by eta")
    p.add_argument("--farm", required=True)
    p.add_argument("--top", type=int, default=None)
    p.add_argument("--all-samples", action="store_true", help="rank non-member rows too")
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify", parents=[common], help="one ownership test")
    _add_verify_flags(p)
    p.add_argument("--n-s", type=int, required=True)
    p.add_argument("--assert-stolen", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("min-ns", parents=[common], help="smallest n_s certifying the suspect")
    _add_verify_flags(p)
    p.add_argument("--grid", type=_int_list, default=(2, 3, 4, 5, 6, 8, 10, 15, 20, 30, 50, 100))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dp-bound", parents=[common], help="lower bound on p-values under (eps, delta)-DP")
    p.add_argument("--eps-grid", type=_float_grid, default="0:2:101")
    p.add_argument("--n-s", type=_int_list, default=(10,))
    p.add_argument("--sigma0", type=float, required=True)
    p.add_argument("--sigma1", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", parents=[common], help="serve a model over HTTP")
    p.add_argument("--model", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    return parser


# -- config files -------------------------------------------------------------


def _load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    cfg = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a mapping of flag names to values")
    return {str(k).replace("-", "_"): v for k, v in cfg.items()}


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    return pre.parse_known_args(argv)[0].config


def parse_args(argv):
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    cfg = _load_config(path)
    sub = parser._subparsers._group_actions[0].choices[command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown keys in {path}: {', '.join(unknown)}", sub.format_usage())
    for action in sub._actions:
        if action.dest in cfg:
            # values in the file count as given, so required flags may come from it
            action.required = False
            value = cfg[action.dest]
            if action.type is not None and isinstance(value, str):
                value = action.type(value)
            action.default = value
    return parser.parse_args(argv)


# -- manifest ------------------------------------------------------------------


def _sha256(path) -> str:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    h = hashlib.sha256()
    with open(p, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = []
        self.seeds = {}
        self.extra = {}
        self.t0 = time.perf_counter()
        self.started = datetime.now(timezone.utc).isoformat()

    def input(self, path_or_url: str) -> str:
        if path_or_url.startswith(("http://", "https://")):
            self.inputs[path_or_url] = None
        else:
            self.inputs[path_or_url] = _sha256(path_or_url)
        return path_or_url

    def output(self, path) -> str:
        self.outputs.append(str(path))
        return str(path)

    def manifest_path(self) -> Path:
        if self.args.manifest:
            return Path(self.args.manifest)
        out = getattr(self.args, "out", None)
        if out:
            return Path(str(out) + ".manifest.json")
        return Path(f"veridip-{self.args.command}.manifest.json")

    def write_manifest(self, status: str) -> None:
        config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.args).items()}
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "config": config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": self.started,
            "wall_clock_s": time.perf_counter() - self.t0,
            "version": __version__,
            "status": status,
            **self.extra,
        }
        path = self.manifest_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(verify.dumps_17(manifest) + "\n", encoding="utf-8")


# -- subcommands ---------------------------------------------------------------


def _load(run: Run, path) -> data_mod.Dataset:
    return data_mod.load_csv(run.input(path))


def _emit(obj) -> None:
    print(verify.dumps_17(obj))


def cmd_gen_data(run: Run, a) -> int:
    run.seeds = {"data": a.seed}
    ds = data_mod.gen_synthetic(a.n, a.d, a.k, a.separation, a.label_noise, a.seed)
    if a.split is None:
        data_mod.save_csv(ds, run.output(a.out))
        _emit({"rows": len(ds), "out": a.out})
        return EXIT_OK
    if len(a.split) != 3:
        raise ConfigError("--split needs three fractions: train,test,holdout")
    run.seeds["split"] = a.split_seed
    parts = data_mod.split(ds, data_mod.SplitSpec(tuple(a.split), a.split_seed))
    stem = str(a.out)[:-4] if str(a.out).endswith(".csv") else str(a.out)
    written = {}
    for name, part in zip(("train", "test", "holdout"), parts):
        path = run.output(f"{stem}_{name}.csv")
        data_mod.save_csv(part, path)
        written[name] = {"path": path, "rows": len(part)}
    _emit(written)
    return EXIT_OK


def _dims(ds: data_mod.Dataset, hidden) -> tuple:
    return (ds.n_features, *hidden, ds.n_classes)


def _accuracy(model, ds) -> float:
    return float((nn.forward_proba(model, ds.features).argmax(axis=1) == ds.labels).mean())


def cmd_train(run: Run, a) -> int:
    run.seeds = {"train": a.seed}
    ds = _load(run, a.data)
    cfg = nn.TrainConfig(a.optimizer, a.lr, a.epochs, a.batch_size, seed=a.seed)
    model = nn.mlp_init(_dims(ds, a.hidden), a.activation, a.seed)
    model, hist = nn.train(model, ds, cfg)
    nn.save_model(model, run.output(a.out))
    report = {"train_loss": hist.train_loss[-1], "train_acc": hist.train_acc[-1]}
    if a.eval:
        ev = _load(run, a.eval)
        report["eval_acc"] = _accuracy(model, ev)
    run.extra["metrics"] = report
    _emit(report)
    return EXIT_OK


def cmd_dp_train(run: Run, a) -> int:
    run.seeds = {"train": a.seed}
    ds = _load(run, a.data)
    cfg = nn.DpConfig(a.clip, a.noise_multiplier, a.delta, a.epochs, a.batch_size, a.lr, a.optimizer, a.seed)
    model = nn.mlp_init(_dims(ds, a.hidden), a.activation, a.seed)
    model, eps = nn.dp_train(model, ds, cfg)
    nn.save_model(model, run.output(a.out))
    report = {"epsilon": eps, "delta": a.delta, "train_acc": _accuracy(model, ds)}
    run.extra["metrics"] = report
    _emit(report)
    return EXIT_OK


def _ft_schedule(text: str) -> tuple:
    try:
        return tuple((int(e), float(lr)) for e, lr in (pair.split(":") for pair in text.split(",")))
    except ValueError:
        raise ConfigError(f"--ft-schedule must look like 1:0.1,10:0.01, got {text!r}") from None


def cmd_steal(run: Run, a) -> int:
    run.seeds = {"student": a.seed, "attacker_subset": a.seed}
    ds = _load(run, a.data)
    cfg = steal.StealConfig(
        a.attack, a.lambda1, a.lambda2, a.temperature, a.epochs, a.lr, a.batch_size, a.seed,
        ft_lr_schedule=_ft_schedule(a.ft_schedule), attacker_fraction=a.attacker_fraction,
    )
    oracle = open_oracle(run.input(a.victim))
    victim_model = oracle.model if isinstance(oracle, LocalOracle) else None
    if a.hidden is not None:
        dims = _dims(ds, a.hidden)
    elif victim_model is not None:
        dims = victim_model.layer_dims
    else:
        raise ConfigError("--hidden is required when the victim is a URL")
    labeled = steal.attacker_subset(ds, a.attacker_fraction, a.seed)
    copy = steal.steal(a.attack, oracle, labeled, cfg, dims, victim_model)
    nn.save_model(copy, run.output(a.out))
    report = {"attack": a.attack, "attacker_rows": len(labeled), "victim_queries": oracle.query_count}
    run.extra["metrics"] = report
    _emit(report)
    return EXIT_OK


def cmd_shadow_farm(run: Run, a) -> int:
    run.seeds = {"farm": a.seed}
    members, nonmembers = _load(run, a.members), _load(run, a.nonmembers)
    base = data_mod.concat(members, nonmembers)
    cfg = nn.TrainConfig(a.optimizer, a.lr, a.epochs, a.batch_size, seed=a.seed)
    farm = shadow.build_farm(base, a.n_models, cfg, _dims(base, a.hidden), a.activation, a.seed,
                             n_members=len(members), workers=a.workers)
    shadow.save_farm(farm, run.output(a.out))
    _emit({"n_models": farm.n_models, "n_samples": farm.n_samples, "out": a.out})
    return EXIT_OK


def cmd_find_sensitive(run: Run, a) -> int:
    farm = shadow.load_farm(run.input(a.farm))
    etas = shadow.eta_scores(farm)
    if not a.all_samples and farm.n_members is not None:
        etas = [e for e in etas if e.sample_id < farm.n_members]
    if a.top is not None:
        etas = etas[: a.top]
    Path(run.output(a.out)).write_text(shadow.eta_csv(etas), encoding="utf-8")
    _emit({"rows": len(etas), "top_eta": etas[0].eta if etas else None})
    return EXIT_OK


def _verify_inputs(run: Run, a):
    run.seeds = {"sampling": a.seed}
    members, nonmembers = _load(run, a.members), _load(run, a.nonmembers)
    farm = shadow.load_farm(run.input(a.farm)) if a.farm else None
    oracle = open_oracle(
        run.input(a.suspect), a.query_budget,
        **({"timeout_ms": a.timeout_ms, "max_retries": a.retries, "batch_size": a.query_batch}
           if a.suspect.startswith(("http://", "https://")) else {}),
    )
    attack = verify.AttackSpec(a.attack, loss_bound=a.loss_bound, threshold=a.threshold)
    return members, nonmembers, farm, oracle, attack


def cmd_verify(run: Run, a) -> int:
    members, nonmembers, farm, oracle, attack = _verify_inputs(run, a)
    verdict = verify.ownership_test(oracle, members, nonmembers, a.n_s, a.alpha, attack, a.mode, farm, a.seed)
    out = verdict.to_dict()
    out["suspect_queries"] = oracle.query_count
    Path(run.output(a.out)).write_text(verify.dumps_17(out) + "\n", encoding="utf-8")
    run.extra["verdict"] = out
    _emit(out)
    if a.assert_stolen and verdict.outcome == 0:
        return EXIT_NOT_STOLEN
    return EXIT_OK


def cmd_min_ns(run: Run, a) -> int:
    members, nonmembers, farm, oracle, attack = _verify_inputs(run, a)
    curve = verify.exposure_curve(oracle, members, nonmembers, a.alpha, attack, a.mode, farm,
                                  a.grid, a.repeats, a.seed)
    n, med = curve[-1]
    out = {
        "min_n_s": n if med < a.alpha else None,
        "alpha": a.alpha,
        "mode": a.mode,
        "attack": a.attack,
        "curve": [{"n_s": k, "median_p": p} for k, p in curve],
        "suspect_queries": oracle.query_count,
    }
    Path(run.output(a.out)).write_text(verify.dumps_17(out) + "\n", encoding="utf-8")
    run.extra["result"] = {"min_n_s": out["min_n_s"]}
    _emit(out)
    return EXIT_OK


def cmd_dp_bound(run: Run, a) -> int:
    rows = accountant.bound_curve(a.eps_grid, a.n_s, a.sigma0, a.sigma1)
    Path(run.output(a.out)).write_text(accountant.curve_to_csv(rows), encoding="utf-8")
    _emit({"rows": len(rows), "out": a.out})
    return EXIT_OK


def cmd_serve(run: Run, a) -> int:
    from .server import ModelServer

    model = nn.load_model(run.input(a.model))
    server = ModelServer(model, a.port, a.host)
    run.extra["url"] = server.url
    run.write_manifest("serving")
    print(json.dumps({"url": server.url}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "dp-train": cmd_dp_train,
    "steal": cmd_steal,
    "shadow-farm": cmd_shadow_farm,
    "find-sensitive": cmd_find_sensitive,
    "verify": cmd_verify,
    "min-ns": cmd_min_ns,
    "dp-bound": cmd_dp_bound,
    "serve": cmd_serve,
}


def _fail(kind: str, exc: BaseException, **extra) -> None:
    payload = {"error": str(exc), "kind": kind, "type": type(exc).__name__, **extra}
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        _fail("usage", exc, usage=exc.usage.strip())
        return EXIT_USAGE
    except (ConfigError, OSError, ValueError) as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args, argv)
    try:
        code = COMMANDS[args.command](run, args)
    except (VeridipError, OSError, ValueError) as exc:
        _fail("runtime", exc)
        code = EXIT_RUNTIME
    if args.command != "serve" or code != EXIT_OK:
        try:
            run.write_manifest("ok" if code in (EXIT_OK, EXIT_NOT_STOLEN) else "error")
        except OSError as exc:
            _fail("runtime", exc)
            return EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
