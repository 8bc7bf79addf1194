"""Command-line surface: immunization runs, probing experiments, the digit
pair grid, the analytic verification suite, and fixture generation.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, fixtures, verify
from .datasets import Dataset, SyntheticSpec, TabularConfig, load_idx_pair, load_tabular, synthesize
from .errors import (
    BadMagic,
    CondimmError,
    ConfigError,
    DigitAbsent,
    EmptyFile,
    EmptySplit,
    InvalidSpec,
    LabelImageCountMismatch,
    MissingColumn,
    NonFiniteUpdate,
    NumericalFailure,
    SingularSystem,
)
from .evaluation import rir, verdict
from .immunizer import (
    AdamParams,
    ImmunizationConfig,
    Method,
    OptimizerKind,
    run_method,
)
from .matio import (
    fingerprint_array,
    fingerprint_file,
    load_matrix,
    save_matrix,
    write_csv,
    write_manifest,
)
from .probe import LossKind, ProbeProblem, gd_exact_line_search
from .spectral import covariance

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_DIR_ENV = "CONDIMM_DATA_DIR"

_DATA_ERRORS = (MissingColumn, EmptyFile, EmptySplit, BadMagic,
                LabelImageCountMismatch, DigitAbsent, InvalidSpec, FileNotFoundError)
_NUMERIC_ERRORS = (NonFiniteUpdate, NumericalFailure, SingularSystem)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _resolve_path(raw: str) -> Path:
    p = Path(raw)
    if not p.is_absolute():
        base = os.environ.get(DATA_DIR_ENV)
        if base:
            return Path(base) / p
    return p


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    for section in ("training", "data"):
        if section not in cfg:
            raise ConfigError(f"config {p} is missing the {section!r} section")
    return cfg


def training_config(cfg: dict, method_override: str | None = None,
                    seed_override: int | None = None) -> ImmunizationConfig:
    t = cfg["training"]
    try:
        method = Method(method_override or cfg.get("method", "ours"))
        optimizer = OptimizerKind(t.get("optimizer", "gd"))
        loss = LossKind(t.get("loss", "squared_error"))
        adam_cfg = t.get("adam", {})
        imma_cfg = t.get("imma", {})
        return ImmunizationConfig(
            eta=float(t["eta"]),
            lambda_p=float(t.get("lambda_p", 0.0)),
            lambda_h=float(t.get("lambda_h", 0.0)),
            epochs=int(t["epochs"]),
            loss=loss,
            ridge=float(t.get("ridge", 1e-6)),
            method=method,
            optimizer=optimizer,
            adam=AdamParams(
                beta1=float(adam_cfg.get("beta1", 0.9)),
                beta2=float(adam_cfg.get("beta2", 0.999)),
                eps=float(adam_cfg.get("eps", 1e-8)),
            ),
            seed=int(t.get("seed", 0)) if seed_override is None else seed_override,
            auto_balance=bool(t.get("auto_balance", False)),
            auto_balance_base=float(t.get("auto_balance_base", 1.0)),
            theta0=t.get("theta0", "identity"),
            imma_inner_steps=int(imma_cfg.get("inner_steps", 1)),
            imma_inner_lr=imma_cfg.get("inner_lr"),
            imma_inner_var=imma_cfg.get("inner_var", "theta"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad training configuration: {exc}") from exc


def load_data_section(data_cfg: dict) -> tuple[Dataset, Dataset, dict]:
    """Materialize (pretrain, harmful) datasets plus fingerprint metadata."""
    kind = data_cfg.get("kind")
    if kind == "tabular":
        path = _resolve_path(data_cfg["csv_path"])
        cfg = TabularConfig(
            csv_path=str(path),
            split_column=data_cfg["split_column"],
            split_value=data_cfg["split_value"],
            target_p=data_cfg["target_p"],
            target_h=data_cfg["target_h"],
            drop_columns=tuple(data_cfg.get("drop_columns", ())),
            normalize_per_split=bool(data_cfg.get("normalize_per_split", True)),
        )
        d_p, d_h = load_tabular(cfg)
        prints = {"csv": fingerprint_file(path)}
    elif kind == "idx_pair":
        images = _resolve_path(data_cfg["images"])
        labels = _resolve_path(data_cfg["labels"])
        pa, pb = data_cfg["pretrain_digits"]
        ha, hb = data_cfg["harmful_digits"]
        d_p = load_idx_pair(images, labels, int(pa), int(pb))
        d_h = load_idx_pair(images, labels, int(ha), int(hb))
        prints = {"images": fingerprint_file(images), "labels": fingerprint_file(labels)}
    elif kind == "synthetic":
        spec = SyntheticSpec(
            d_in=int(data_cfg["d_in"]),
            n_p=int(data_cfg["n_p"]),
            n_h=int(data_cfg["n_h"]),
            spectrum_p=tuple(data_cfg["spectrum_p"]),
            spectrum_h=tuple(data_cfg["spectrum_h"]),
            alignment_angle=float(data_cfg["alignment_angle"]),
            seed=int(data_cfg.get("seed", 0)),
        )
        d_p, d_h = synthesize(spec)
        prints = {"pretrain_x": fingerprint_array(d_p.x), "harmful_x": fingerprint_array(d_h.x)}
    elif kind == "fixture":
        d_p, d_h, prints = _load_fixture(data_cfg)
    else:
        raise ConfigError(f"unknown data kind {kind!r}")
    return d_p, d_h, prints


def _load_fixture(data_cfg: dict) -> tuple[Dataset, Dataset, dict]:
    name = data_cfg.get("name")
    workdir = Path(data_cfg.get("workdir", ".condimm-fixtures"))
    seed = int(data_cfg.get("seed", 0))
    if name == "house":
        csv_path = workdir / f"house-{seed}.csv"
        if not csv_path.exists():
            fixtures.make_house_csv_fixture(csv_path, seed=seed,
                                            n_rows=int(data_cfg.get("n_rows", 1460)))
        cfg = TabularConfig(**fixtures.house_tabular_config(csv_path))
        d_p, d_h = load_tabular(cfg)
        return d_p, d_h, {"csv": fingerprint_file(csv_path)}
    if name == "digits":
        n_per_class = int(data_cfg.get("n_per_class", 300))
        sub = workdir / f"digits-{seed}-{n_per_class}"
        images = sub / "fixture-digits-images-idx3-ubyte"
        labels = sub / "fixture-digits-labels-idx1-ubyte"
        if not images.exists() or not labels.exists():
            fixtures.make_digit_idx_fixture(sub, n_per_class=n_per_class, seed=seed)
        pa, pb = data_cfg.get("pretrain_digits", (0, 1))
        ha, hb = data_cfg.get("harmful_digits", (3, 5))
        d_p = load_idx_pair(images, labels, int(pa), int(pb))
        d_h = load_idx_pair(images, labels, int(ha), int(hb))
        return d_p, d_h, {"images": fingerprint_file(images),
                          "labels": fingerprint_file(labels)}
    raise ConfigError(f"unknown fixture {name!r}")


# ---------------------------------------------------------------------------
# immunize command
# ---------------------------------------------------------------------------


def cmd_immunize(args) -> int:
    cfg = load_config(args.config)
    methods = ([m for m in Method] if args.method == "all"
               else [Method(args.method)] if args.method
               else [Method(cfg.get("method", "ours"))])
    d_p, d_h, prints = load_data_section(cfg["data"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    outputs = []
    for method in methods:
        outputs += [f"theta_{method.value}.bin", f"telemetry_{method.value}.csv"]
    outputs += ["summary.csv"]
    seed = args.seed if args.seed is not None else int(cfg["training"].get("seed", 0))
    write_manifest(out / "manifest.json", config=cfg, dataset_fingerprints=prints,
                   seed=seed, outputs=outputs)

    k_p = covariance(d_p.x)
    k_h = covariance(d_h.x)
    summary_rows = []
    for method in methods:
        run_cfg = training_config(cfg, method_override=method.value,
                                  seed_override=args.seed)
        theta, report = run_method(run_cfg, d_p, d_h)
        save_matrix(out / f"theta_{method.value}.bin", theta)
        write_csv(out / f"telemetry_{method.value}.csv",
                  report.TELEMETRY_COLUMNS, report.telemetry_rows())
        breakdown = rir(theta, k_p, k_h)
        vd = verdict(theta, d_p, d_h, loss=run_cfg.loss)
        summary_rows.append((method.value, run_cfg.seed, breakdown.term_i,
                             breakdown.term_ii, breakdown.rir,
                             vd.criterion_a, vd.criterion_b, vd.criterion_c))
        print(f"{method.value}: harmful ratio {breakdown.term_i:.4g}, "
              f"pretrain ratio {breakdown.term_ii:.4g}, RIR {breakdown.rir:.4g}")
        if report.warnings:
            print(f"  ({len(report.warnings)} warnings; first: {report.warnings[0]})")
    write_csv(out / "summary.csv",
              ("method", "seed", "term_i", "term_ii", "rir",
               "criterion_a", "criterion_b", "criterion_c"),
              summary_rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe command
# ---------------------------------------------------------------------------


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    d_p, d_h, _ = load_data_section(cfg["data"])
    if args.identity:
        theta = np.eye(d_p.x.shape[1])
    else:
        if not args.theta:
            raise ConfigError("either --theta PATH or --identity is required")
        theta = load_matrix(_resolve_path(args.theta))
    rows = []
    for task, data in (("pretrain", d_p), ("harmful", d_h)):
        problem = ProbeProblem(x=data.x, y=data.y, theta=theta,
                               loss=LossKind.SQUARED_ERROR)
        traj = gd_exact_line_search(problem, iters=args.iters)
        for step, loss, ratio, size in traj.csv_rows():
            rows.append((task, step, loss, ratio, size))
    write_csv(args.out, ("task", "step", "loss", "norm_ratio", "step_size"), rows)
    print(f"wrote {len(rows)} probe rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify command
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed + 1)
    results = verify.run_suite(level=args.level, seed=args.seed)
    discrepancy = verify.survey_prediction_general(20, rng)
    print(verify.render_results(results, general_discrepancy=discrepancy))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY_FAIL


# ---------------------------------------------------------------------------
# pairs command
# ---------------------------------------------------------------------------


def pair_task_digits(digit: int) -> tuple[int, int]:
    """Binary task attached to a digit: that digit vs. its cyclic successor."""
    return digit, (digit + 1) % 10


def _parse_pairs(raw: str) -> list[tuple[int, int]]:
    if raw == "all":
        return [(a, b) for a in range(10) for b in range(10) if a != b]
    pairs = []
    for chunk in raw.split(";"):
        a, b = chunk.split(",")
        pairs.append((int(a), int(b)))
    return pairs


def _pairs_worker(payload):
    (a, b), cfg_dict, images, labels, seeds = payload
    task_p = pair_task_digits(a)
    task_h = pair_task_digits(b)
    d_p = load_idx_pair(images, labels, *task_p)
    d_h = load_idx_pair(images, labels, *task_h)
    k_p = covariance(d_p.x)
    k_h = covariance(d_h.x)
    rirs = []
    for seed in seeds:
        cfg = training_config(cfg_dict, seed_override=seed)
        theta, _ = run_method(cfg, d_p, d_h)
        rirs.append(rir(theta, k_p, k_h).rir)
    return a, b, float(np.mean(rirs))


def cmd_pairs(args) -> int:
    cfg = load_config(args.config)
    data_cfg = cfg["data"]
    if data_cfg.get("kind") == "fixture":
        d_p, _, _ = load_data_section(data_cfg)  # materializes the files
        workdir = Path(data_cfg.get("workdir", ".condimm-fixtures"))
        seed = int(data_cfg.get("seed", 0))
        n_per_class = int(data_cfg.get("n_per_class", 300))
        sub = workdir / f"digits-{seed}-{n_per_class}"
        images = sub / "fixture-digits-images-idx3-ubyte"
        labels = sub / "fixture-digits-labels-idx1-ubyte"
    elif data_cfg.get("kind") == "idx_pair":
        images = _resolve_path(data_cfg["images"])
        labels = _resolve_path(data_cfg["labels"])
    else:
        raise ConfigError("pairs needs an 'idx_pair' or digit 'fixture' data section")

    pairs = _parse_pairs(args.pairs)
    seeds = list(range(args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", config=cfg,
                   dataset_fingerprints={"images": fingerprint_file(images),
                                         "labels": fingerprint_file(labels)},
                   seed=args.seeds,
                   outputs=["log_rir_grid.csv"])

    payloads = [((a, b), cfg, str(images), str(labels), seeds) for a, b in pairs]
    jobs = args.jobs or os.cpu_count() or 1
    results = []
    if jobs == 1 or len(payloads) == 1:
        results = [_pairs_worker(p) for p in payloads]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_pairs_worker, payloads))
    results.sort()
    rows = [(a, b, math.log(r) if r > 0 else math.nan) for a, b, r in results]
    write_csv(out / "log_rir_grid.csv", ("row_digit", "col_digit", "log_rir"), rows)
    succeeded = sum(1 for _, _, r in results if r > 1.0)
    print(f"{succeeded}/{len(results)} pairs with RIR > 1; grid at {out / 'log_rir_grid.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fixtures command
# ---------------------------------------------------------------------------


def cmd_fixtures(args) -> int:
    out = Path(args.out)
    images, labels = fixtures.make_digit_idx_fixture(
        out / "digits", n_per_class=args.n_per_class, seed=args.seed)
    csv_path = fixtures.make_house_csv_fixture(out / "house.csv", seed=args.seed)
    print(f"wrote {images}\nwrote {labels}\nwrote {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condimm",
        description="Immunize linear feature extractors by controlling probe-Hessian condition numbers.")
    parser.add_argument("--version", action="version", version=f"condimm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_imm = sub.add_parser("immunize", help="train an extractor and write telemetry")
    p_imm.add_argument("--config", required=True)
    p_imm.add_argument("--out", required=True)
    p_imm.add_argument("--method", choices=[m.value for m in Method] + ["all"])
    p_imm.add_argument("--seed", type=int)
    p_imm.set_defaults(func=cmd_immunize)

    p_probe = sub.add_parser("probe", help="exact-line-search probing curves")
    p_probe.add_argument("--config", required=True)
    p_probe.add_argument("--theta", help="binary matrix file of the extractor")
    p_probe.add_argument("--identity", action="store_true",
                         help="probe with the identity extractor")
    p_probe.add_argument("--iters", type=int, default=200)
    p_probe.add_argument("--out", required=True)
    p_probe.set_defaults(func=cmd_probe)

    p_verify = sub.add_parser("verify", help="run the analytic property suite")
    p_verify.add_argument("--level", choices=list(verify.LEVEL_TRIALS), default="fast")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=cmd_verify)

    p_pairs = sub.add_parser("pairs", help="digit-pair immunization grid")
    p_pairs.add_argument("--config", required=True)
    p_pairs.add_argument("--pairs", default="all",
                         help="'all' or 'a,b;c,d' ordered digit pairs")
    p_pairs.add_argument("--seeds", type=int, default=1)
    p_pairs.add_argument("--jobs", type=int, default=0,
                         help="worker processes (0 = all cores)")
    p_pairs.add_argument("--out", required=True)
    p_pairs.set_defaults(func=cmd_pairs)

    p_fix = sub.add_parser("fixtures", help="materialize the bundled synthetic fixtures")
    p_fix.add_argument("--out", required=True)
    p_fix.add_argument("--seed", type=int, default=0)
    p_fix.add_argument("--n-per-class", type=int, default=300)
    p_fix.set_defaults(func=cmd_fixtures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CondimmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
