"""Command-line entry point: generate, train, eval, gradcheck, report.

Exit codes: 0 success, 1 a check failed (gradcheck tolerance, training
divergence), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import gradcheck
from .cohort import CohortConfig, CohortFormatError, generate_cohort, load_cohort, save_cohort
from .experiments import (
    HISTORY_LENGTHS,
    REPORT_COHORT,
    REPORT_EXTRA_TEST,
    REPORT_TRAIN,
    history_sweep,
    report_seeds,
    write_sweep_csv,
)
from .metrics import reliability_table, write_reliability_csv
from .ontology import GraphError
from .risk_head import ActionTable, build_bundles
from .rng import Rng
from .training import (
    TrainConfig,
    TrainingDiverged,
    TrainState,
    act_and_reward,
    evaluate,
    train,
    write_metrics_csv,
)

log = logging.getLogger("vlrisk")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
DEFAULT_SEED = 42

PRECEDENCE = """\
configuration precedence (highest first):
  1. command-line flags (--seed, --epochs, --max-visits, --lambda-*, --reward-weights)
  2. the JSON file given by --config, with optional "cohort" and "train" sections
  3. built-in defaults (seed 42)
--seed drives every random stream: cohort generation and training alike.
VLRISK_LOG sets log verbosity (DEBUG, INFO, WARNING; default WARNING).
"""


REPORT_NOTE = """
report starts from the gap-sensitive cohort (noisy single visits, risk in
short gaps), 1000 patients, 8 supervised epochs and no policy phase.
"""


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# -- configuration -----------------------------------------------------------------------


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def read_config(path) -> tuple[dict, dict]:
    """Return the raw (cohort, train) sections of a config file."""
    if path is None:
        return {}, {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, ("cohort", "train"), "config")
    cohort, trn = raw.get("cohort", {}), raw.get("train", {})
    if not isinstance(cohort, dict) or not isinstance(trn, dict):
        raise ConfigError("config sections must be JSON objects")
    _check_keys(cohort, CohortConfig.__dataclass_fields__, "cohort section")
    _check_keys(trn, TrainConfig.__dataclass_fields__, "train section")
    return cohort, trn


def _parse_reward_weights(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--reward-weights expects three numbers, got {text!r}") from exc
    if len(parts) != 3:
        raise ConfigError(f"--reward-weights expects three numbers, got {text!r}")
    return parts[0], parts[1], parts[2]


def build_configs(args, cohort_defaults=None, train_defaults=None) -> tuple[CohortConfig, TrainConfig]:
    """Defaults, then the config file, then flags.  ``*_defaults`` replace the
    built-in defaults for one command."""
    cohort_raw, train_raw = read_config(getattr(args, "config", None))
    try:
        ccfg = CohortConfig.from_dict({**(cohort_defaults or {}), **cohort_raw})
        tcfg = TrainConfig.from_dict({**(train_defaults or {}), **train_raw})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc

    seed = args.seed if args.seed is not None else train_raw.get("seed", DEFAULT_SEED)
    if args.seed is not None or "seed" not in cohort_raw:
        ccfg.seed = seed
    tcfg.seed = seed
    if getattr(args, "max_visits", None) is not None:
        ccfg.max_visits = args.max_visits
    if getattr(args, "n_patients", None) is not None:
        ccfg.n_patients = args.n_patients
    if getattr(args, "epochs", None) is not None:
        tcfg.epochs = args.epochs
    if getattr(args, "rl_epochs", None) is not None:
        tcfg.rl_epochs = args.rl_epochs
    for name in ("time", "graph", "sup", "rl"):
        value = getattr(args, f"lambda_{name}", None)
        if value is not None:
            setattr(tcfg.loss, name, value)
    if getattr(args, "reward_weights", None):
        tcfg.reward.auroc, tcfg.reward.calibration, tcfg.reward.act = _parse_reward_weights(args.reward_weights)

    # the model's input sizes follow the cohort it is trained on
    tcfg.model.d_img = ccfg.d_img
    tcfg.model.vocab_size = ccfg.vocab_size
    tcfg.model.n_classes = ccfg.n_classes
    tcfg.model.n_codes = ccfg.n_codes
    tcfg.model.codes_per_chapter = ccfg.codes_per_chapter
    try:
        ccfg.validate()
        tcfg.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return ccfg, tcfg


# -- commands ------------------------------------------------------------------------------


def _load(path):
    try:
        return load_cohort(path)
    except OSError as exc:
        raise ConfigError(f"cannot read cohort {path}: {exc}") from exc


def cmd_generate(args) -> int:
    ccfg, _ = build_configs(args)
    cohort = generate_cohort(ccfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, args.out)
    print(f"wrote {len(cohort)} patients to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ccfg, tcfg = build_configs(args)
    cohort = _load(args.cohort)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state, rows = train(cohort, tcfg, metrics_path=out / "metrics.csv")
    state.save(out / "checkpoint")
    last = rows[-1] if rows else {}
    print(f"trained {state.epoch} epochs; val auroc {last.get('auroc', '')} ece {last.get('ece', '')}; wrote {out}")
    return EXIT_OK


def _checkpoint_path(path: Path) -> Path:
    return path / "checkpoint" if path.is_dir() else path


def cmd_eval(args) -> int:
    try:
        state = TrainState.load(_checkpoint_path(Path(args.checkpoint)))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    cohort = _load(args.cohort)
    by_id = {r.patient_id: r for r in cohort}
    if args.split == "all":
        records = list(cohort)
    else:
        missing = [i for i in state.split_ids[args.split] if i not in by_id]
        if missing:
            raise ConfigError(f"cohort lacks {len(missing)} patients of the {args.split} split (first: {missing[0]})")
        records = [by_id[i] for i in state.split_ids[args.split]]
    if not records:
        raise ConfigError("nothing to evaluate")

    cfg = state.config
    ev = evaluate(state.model, records, cfg, None, Rng(cfg.seed).child(40_000))
    act, reward = act_and_reward(ev, state, state.review_threshold)
    table = ActionTable(state.class_names)
    bundles = build_bundles(ev.proba, ev.uncertainty, table, state.review_threshold, ev.patient_ids)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w") as fh:
        for b in bundles:
            fh.write(b.to_json() + "\n")
    loss_total = ev.losses["tf"] * cfg.loss.time + ev.losses["gac"] * cfg.loss.graph + ev.losses["sup"] * cfg.loss.sup
    row = {
        "epoch": state.epoch, "split": args.split, "loss_total": loss_total, "loss_cm": "",
        "loss_tf": ev.losses["tf"], "loss_gac": ev.losses["gac"], "loss_sup": ev.losses["sup"],
        "auroc": ev.auroc(), "ece": ev.ece(), "act": act, "reward": reward,
    }  # fmt: skip
    write_metrics_csv([row], out / "metrics.csv")
    write_reliability_csv(reliability_table(ev.proba, ev.labels), out / "reliability.csv")
    print(f"{args.split}: auroc {ev.auroc():.4f} ece {ev.ece():.4f} act {act:.4f} reward {reward:.4f}; wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    if args.corrupt is not None and args.corrupt not in gradcheck.check_names():
        raise ConfigError(f"no gradient check named {args.corrupt!r}")
    results = gradcheck.run_all(seed=seed, corrupt=args.corrupt)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<20} max rel err {r.max_rel_error:.2e} ({r.n_checked} entries)")
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_report(args) -> int:
    if args.n_seeds < 1 or args.extra_test < 0:
        raise ConfigError("--n-seeds must be >= 1 and --extra-test >= 0")
    ccfg, tcfg = build_configs(args, REPORT_COHORT, REPORT_TRAIN)
    seeds = report_seeds(ccfg.seed, args.n_seeds)
    rows = history_sweep(ccfg, tcfg, HISTORY_LENGTHS, seeds, extra_test=args.extra_test)
    write_sweep_csv(rows, args.out)
    for r in rows:
        if r["seed"] == "mean":
            print(f"max_visits {r['max_visits']:>2}: auroc {r['auroc']:.4f} ece {r['ece']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def _common(p, config=True, overrides=True):
    if config:
        p.add_argument("--config", help="JSON config with optional 'cohort' and 'train' sections")
    p.add_argument("--seed", type=int, default=None, help=f"seed for every random stream (default {DEFAULT_SEED})")
    if not overrides:
        return
    p.add_argument("--max-visits", type=int, help="cap on visits per patient")
    p.add_argument("--n-patients", type=int, help="cohort size")
    p.add_argument("--epochs", type=int, help="supervised epochs")
    p.add_argument("--rl-epochs", type=int, help="policy-gradient epochs")
    p.add_argument("--lambda-time", type=float, help="weight of the gap-prediction loss")
    p.add_argument("--lambda-graph", type=float, help="weight of the graph link loss")
    p.add_argument("--lambda-sup", type=float, help="weight of the supervised loss")
    p.add_argument("--lambda-rl", type=float, help="weight of the policy loss")
    p.add_argument("--reward-weights", help="AUROC,calibration,actionability reward weights, e.g. 0.5,0.3,0.2")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="vlrisk", description=__doc__, epilog=PRECEDENCE, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic cohort as JSONL", epilog=PRECEDENCE, formatter_class=fmt)
    _common(p)
    p.add_argument("--out", required=True, help="output JSONL path (.gz compresses)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a cohort; writes checkpoint and metrics CSV", epilog=PRECEDENCE,
                       formatter_class=fmt)  # fmt: skip
    _common(p)
    p.add_argument("--cohort", required=True, help="cohort JSONL from 'generate'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split; writes predictions JSONL and metrics CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint path or the directory 'train' wrote")
    p.add_argument("--cohort", required=True, help="cohort JSONL the checkpoint was trained on")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, config=False, overrides=False)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook: perturbs one analytic gradient
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="history-length sweep table as CSV", epilog=PRECEDENCE + REPORT_NOTE,
                       formatter_class=fmt)  # fmt: skip
    _common(p)
    p.add_argument("--n-seeds", type=int, default=3, help="seeds per history length: --seed, --seed+1, ...")
    p.add_argument("--extra-test", type=int, default=REPORT_EXTRA_TEST,
                   help=f"held-out patients added to each test split (default {REPORT_EXTRA_TEST})")  # fmt: skip
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("VLRISK_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def dispatch(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ConfigError, CohortFormatError, GraphError) as exc:
        print(f"vlrisk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"vlrisk: training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK


def main() -> None:
    sys.exit(dispatch())

