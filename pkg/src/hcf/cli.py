"""Command-line front door: ``hcf <subcommand> [flags]``.

Configuration precedence is flags > ``--config`` file > built-in defaults.
Every artifact-producing command writes ``<output>.manifest.json`` holding
the resolved parameters, so a run can be replayed from its manifest alone.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .errors import HCFError, UndefinedMetricError
from .evaluation import Scenario, ScenarioName, evaluate_split, render_table, split
from .fm import Direction, FmModel, TrainConfig, Variant, fit
from .pipelines import CandidateParams, DisseminationParams, recommend, run_dissemination, write_log
from .store import Kind, Polarity, load
from .synthgen import RNG_ALGORITHM, GenConfig, GroundTruth, generate, pair_stream, response_oracle

log = logging.getLogger("hcf")

MANIFEST_VERSION = 1
DATA_ENV = "HCF_DATA_DIR"

# built-in defaults; argparse defaults stay None so file values can slot in between
DEFAULTS = {
    "seed": 0,
    "variant": "hcf",
    "direction": "reco",
    "format": None,
    "n": 10,
    "k": TrainConfig.k,
    "epochs": TrainConfig.epochs,
    "learning_rate": TrainConfig.learning_rate,
    "l2_w": TrainConfig.l2_w,
    "l2_v": TrainConfig.l2_v,
    "init_sigma": TrainConfig.init_sigma,
    "k_per_seed": CandidateParams.k_per_seed,
    "cap": CandidateParams.cap,
    "floor": CandidateParams.floor,
    "fallback": False,
    "iterations": 10,
    "cohort_size": DisseminationParams.cohort_size,
    "max_cohort_size": None,
    "holdout": Scenario.holdout,
    "freshness_cutoff": Scenario.freshness_cutoff,
    "n_users": GenConfig.n_users,
    "n_items": GenConfig.n_items,
    "latent_dim": GenConfig.latent_dim,
    "n_anti_clusters": GenConfig.n_anti_clusters,
    "events_per_user": GenConfig.events_per_user,
    "new_user_fraction": GenConfig.new_user_fraction,
    "new_item_fraction": GenConfig.new_item_fraction,
    "negative_rate_target": GenConfig.negative_rate_target,
    "separation": GenConfig.separation,
    "item_noise": GenConfig.item_noise,
}

_TYPES = {k: type(v) for k, v in DEFAULTS.items() if v is not None}
_TYPES.update(max_cohort_size=int, format=str)


def _flag_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; an optional ``[hcf]`` header is accepted."""
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    if not text.lstrip().startswith("["):
        text = "[hcf]\n" + text
    parser.read_string(text)
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            key = key.replace("-", "_")
            conv = _TYPES.get(key, str)
            try:
                out[key] = _flag_bool(raw) if conv is bool else conv(raw)
            except ValueError as exc:
                raise HCFError(f"config {path}: bad value for {key}: {exc}") from None
    return out


def resolve(ns: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from DEFAULTS."""
    file_vals = read_config(ns.config) if getattr(ns, "config", None) else {}
    merged = vars(ns).copy()
    for key, value in merged.items():
        if value is None and key != "config":
            if key in file_vals:
                merged[key] = file_vals[key]
            elif key in DEFAULTS:
                merged[key] = DEFAULTS[key]
    return argparse.Namespace(**merged)


def data_path(p: str | None, default_name: str | None = None) -> Path | None:
    """Relative paths resolve under $HCF_DATA_DIR when it is set."""
    root = os.environ.get(DATA_ENV)
    if p is None:
        if default_name is None or root is None:
            return None
        return Path(root) / default_name
    path = Path(p)
    if not path.is_absolute() and root and not path.exists():
        return Path(root) / path
    return path


def write_manifest(target: Path, command: str, params: dict, inputs: dict, outputs: dict,
                   seeds: dict, extra: dict | None = None) -> Path:
    doc = {
        "format_version": MANIFEST_VERSION,
        "command": command,
        "params": params,
        "rng_seeds": seeds,
        "rng_algorithm": RNG_ALGORITHM,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items() if v is not None},
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    path = target.with_name(target.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _params(args: argparse.Namespace, *names: str) -> dict:
    return {n: getattr(args, n) for n in names}


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(k=args.k, epochs=args.epochs, learning_rate=args.learning_rate, l2_w=args.l2_w,
                       l2_v=args.l2_v, init_sigma=args.init_sigma, rng_seed=args.seed)


def _candidate_params(args) -> CandidateParams:
    return CandidateParams(k_per_seed=args.k_per_seed, cap=args.cap, floor=args.floor, fallback=args.fallback)


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise HCFError(f"missing {what}; pass a path or set {DATA_ENV}")
    if not path.exists():
        raise HCFError(f"{what} not found: {path}")
    return path


def _open_out(path: Path | None):
    return open(path, "w", encoding="utf-8", newline="") if path else sys.stdout


# -- subcommands ---------------------------------------------------------------------

_GEN_FIELDS = ("n_users", "n_items", "latent_dim", "n_anti_clusters", "events_per_user", "new_user_fraction",
               "new_item_fraction", "negative_rate_target", "separation", "item_noise")


def cmd_datagen(args) -> int:
    out = Path(args.out) if args.out else data_path(None, ".")
    if out is None:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    fmt = args.format or "csv"
    cfg = GenConfig(rng_seed=args.seed, **_params(args, *_GEN_FIELDS))
    store, truth = generate(cfg)
    events = out / f"events.{fmt}"
    events.write_text(store.export(fmt), encoding="utf-8")
    truth_path = out / "truth.json"
    truth.save(truth_path)
    neg_rate = store.count(Polarity.NEGATIVE) / store.n_events
    write_manifest(events, "datagen", {**asdict(cfg), "format": fmt}, {}, {"events": events, "truth": truth_path},
                   {"datagen": args.seed}, {"summary": {"events": store.n_events, "negative_rate": neg_rate}})
    print(f"wrote {store.n_events} events ({neg_rate:.3f} negative) to {events}")
    return 0


def cmd_ingest(args) -> int:
    src = _require(data_path(args.data, "events.csv"), "dataset")
    store = load(src, args.format)
    print(repr(store))
    if args.out:
        out = Path(args.out)
        fmt = args.format or ("jsonl" if out.suffix == ".jsonl" else "csv")
        out.write_text(store.export(fmt), encoding="utf-8")
        write_manifest(out, "ingest", {"format": fmt}, {"data": src}, {"events": out}, {},
                       {"summary": {"events": store.n_events, "users": store.n_users, "items": store.n_items}})
    return 0


def cmd_train(args) -> int:
    src = _require(data_path(args.data, "events.csv"), "dataset")
    store = load(src, args.format)
    cfg = _train_cfg(args)
    result = fit(store, args.variant, args.direction, cfg)
    for epoch, loss in enumerate(result.losses, 1):
        log.info("epoch %d loss %.6f", epoch, loss)
    out = Path(args.out or "model.json")
    result.model.save(out)
    write_manifest(out, "train", {**asdict(cfg), "variant": args.variant, "direction": args.direction},
                   {"data": src}, {"model": out}, {"train": args.seed}, {"losses": result.losses})
    print(f"trained {args.variant} {args.direction} model, final loss {result.losses[-1]:.6f} -> {out}")
    return 0


def _users(args, store) -> list[str]:
    keys = list(args.user or [])
    if args.users_file:
        keys += [ln.strip() for ln in Path(args.users_file).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not keys:
        keys = list(store.user_keys)
    return keys


def cmd_recommend(args) -> int:
    src = _require(data_path(args.data, "events.csv"), "dataset")
    store = load(src, args.format)
    model = FmModel.load(_require(data_path(args.model, "model.json"), "model"))
    params = _candidate_params(args)
    keys = _users(args, store)
    out = Path(args.out) if args.out else None
    failures = 0
    with _open_out(out) as fh:
        for key in keys:
            try:
                recs = recommend(store, model, store.entity(Kind.USER, key), args.n, params)
            except HCFError as exc:
                failures += 1
                fh.write(json.dumps({"user": key, "error": str(exc)}) + "\n")
                continue
            for rank_, r in enumerate(recs, 1):
                fh.write(json.dumps({"user": key, "rank": rank_, "item": store.key_of(r.entity),
                                     "score": r.score, "provenance": r.provenance.value}) + "\n")
    if out:
        write_manifest(out, "recommend", {**asdict(params), "n": args.n, "users": keys},
                       {"data": src, "model": args.model}, {"recommendations": out}, {})
    if keys and failures == len(keys):
        print("error: no requested user could be served", file=sys.stderr)
        return 1
    return 0


def cmd_disseminate(args) -> int:
    src = _require(data_path(args.data, "events.csv"), "dataset")
    truth_path = data_path(args.truth, "truth.json")
    if truth_path is None or not truth_path.exists():
        raise HCFError("disseminate needs a ground-truth oracle file (--truth)")
    store = load(src, args.format)
    model = FmModel.load(_require(data_path(args.model, "model.json"), "model"))
    truth = GroundTruth.load(truth_path)
    target = store.entity(Kind.ITEM, args.item)
    params = DisseminationParams(cohort_size=args.cohort_size, max_cohort_size=args.max_cohort_size,
                                 candidates=replace(_candidate_params(args), fallback=True))
    _, logs = run_dissemination(store, model, target, args.iterations, params,
                                lambda u, it: response_oracle(truth, u, it, pair_stream(args.seed, it, u)))
    out = Path(args.out) if args.out else None
    with _open_out(out) as fh:
        write_log(logs, fh)
    if out:
        write_manifest(out, "disseminate",
                       {"item": args.item, "iterations": args.iterations, "cohort_size": args.cohort_size,
                        "max_cohort_size": args.max_cohort_size, "candidates": asdict(params.candidates)},
                       {"data": src, "model": args.model, "truth": truth_path}, {"log": out}, {"oracle": args.seed})
    return 0


def cmd_evaluate(args) -> int:
    src = _require(data_path(args.data, "events.csv"), "dataset")
    store = load(src, args.format)
    cfg = _train_cfg(args)
    names = args.scenario or [s.value for s in ScenarioName]
    reports = []
    for name in names:
        scenario = Scenario(ScenarioName(name), args.holdout, args.seed, args.freshness_cutoff)
        if args.test:
            # explicit test file: the whole dataset trains, the file's events are scored
            test_store = load(_require(data_path(args.test), "test set"), args.format)
            train, test = store, _remap(test_store, store)
        else:
            train, test = split(store, scenario)
        try:
            reports.append(evaluate_split(train, test, scenario, cfg))
        except UndefinedMetricError as exc:
            raise HCFError(f"scenario {name} is infeasible: {exc}") from None
    print(render_table(reports))
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "evaluate", {**asdict(cfg), "scenarios": names, "holdout": args.holdout,
                                         "freshness_cutoff": args.freshness_cutoff},
                       {"data": src, "test": args.test}, {"report": out}, {"split": args.seed, "train": args.seed})
    return 0


def _remap(test_store, store):
    """Events of ``test_store`` re-expressed in ``store``'s id space."""
    events = []
    for e in test_store.events:
        u = store.entity(Kind.USER, test_store.user_keys[e.user])
        i = store.entity(Kind.ITEM, test_store.item_keys[e.item])
        events.append(e._replace(user=u.id, item=i.id))
    return events


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file merged beneath flags")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help=f"dataset path (relative paths resolve under ${DATA_ENV})")
    common.add_argument("--model", help="model JSON path")
    common.add_argument("--out", help="output path")
    common.add_argument("--format", choices=["csv", "jsonl"], help="dataset format (default: by extension)")
    common.add_argument("--variant", choices=[v.value for v in Variant])
    common.add_argument("--direction", choices=[d.value for d in Direction])
    common.add_argument("--scenario", action="append", choices=[s.value for s in ScenarioName])
    common.add_argument("-v", "--verbose", action="store_true")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--k", type=int, help="latent factor dimension")
    train_opts.add_argument("--epochs", type=int)
    train_opts.add_argument("--learning-rate", type=float)
    train_opts.add_argument("--l2-w", type=float)
    train_opts.add_argument("--l2-v", type=float)
    train_opts.add_argument("--init-sigma", type=float)

    cand_opts = argparse.ArgumentParser(add_help=False)
    cand_opts.add_argument("--k-per-seed", type=int)
    cand_opts.add_argument("--cap", type=int)
    cand_opts.add_argument("--floor", type=float)

    p = argparse.ArgumentParser(prog="hcf", description="Signed-engagement collaborative filtering toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", parents=[common], help="write a seeded synthetic dataset and its ground truth")
    for name in _GEN_FIELDS:
        g.add_argument("--" + name.replace("_", "-"), type=_TYPES[name])
    g.set_defaults(func=cmd_datagen)

    s = sub.add_parser("ingest", parents=[common], help="validate a dataset and optionally re-export it")
    s.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", parents=[common, train_opts], help="train a CCF or HCF model")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("recommend", parents=[common, cand_opts], help="top-n items per user as JSONL")
    r.add_argument("--user", action="append", help="user key (repeatable; default: every user)")
    r.add_argument("--users-file", help="file with one user key per line")
    r.add_argument("-n", "--n", type=int, dest="n")
    r.add_argument("--fallback", action="store_const", const=True,
                   help="fill empty candidate sets with popular items")
    r.set_defaults(func=cmd_recommend)

    d = sub.add_parser("disseminate", parents=[common, cand_opts], help="iterative cohort selection for one item")
    d.add_argument("--item", required=True, help="item key")
    d.add_argument("--truth", help="ground-truth JSON written by datagen")
    d.add_argument("--iterations", type=int)
    d.add_argument("--cohort-size", type=int)
    d.add_argument("--max-cohort-size", type=int)
    d.set_defaults(func=cmd_disseminate, fallback=True)

    e = sub.add_parser("evaluate", parents=[common, train_opts], help="paired CCF/HCF AUC per scenario")
    e.add_argument("--holdout", type=float)
    e.add_argument("--freshness-cutoff", type=int)
    e.add_argument("--test", help="explicit test events; the whole dataset is then used for training")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = resolve(args)
        return args.func(args)
    except (HCFError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
