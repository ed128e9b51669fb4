"""Command-line interface: ``dbmi {gen,train,estimate,oracle-check,samples,report}``.

Every command accepts ``--config PATH`` (a JSON object whose keys are the
long option names with ``-`` replaced by ``_``) and per-command overrides on
the command line, which take precedence.  The effective configuration is
validated before any work starts and embedded in every artifact written.

Exit codes:
    0  success
    2  validation error (bad arguments, configuration or inputs)
    3  numeric error (non-finite values, infinite KL)
    4  I/O error (missing or unwritable files)
    5  verification failure (``oracle-check`` found a violation)

The environment variable ``DBMI_NUM_THREADS`` caps BLAS/OpenMP threads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

from . import __version__
from .bench import (
    Dataset,
    ImageTask,
    LowDimTask,
    gen_image_task,
    gen_lowdim_task,
    sample_image,
    sample_lowdim,
    task_from_meta,
    tile_grid,
    write_pgm,
)
from .core import (
    MAX_SEED,
    Coupling,
    InfiniteKLError,
    NumericError,
    StateSpace,
    TimeGrid,
    ValidationError,
    make_rng,
)
from .estimate import ModelSource, OracleSource, estimate_dbmi, estimate_plugin
from .model import ModelConfig, TransitionModel, load_checkpoint, save_checkpoint
from .oracle import (
    MAX_STATES,
    JointPMF,
    ReciprocalSpec,
    decomposition_terms,
    exact_mi_direct,
    markov_property_check,
    path_enumerable,
    path_space_kl,
)
from .refproc import UniformKernel
from .train import TrainConfig, train

log = logging.getLogger("dbmi")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_CHECK_FAILED = 5

THREADS_ENV = "DBMI_NUM_THREADS"

ALPHA_LOWDIM = 1e-4
ALPHA_IMAGE = 1e-2

REPORT_FIELDS = [
    "task", "estimator", "mi_true", "mi_hat", "std_error",
    "K", "M", "N", "alpha", "seed", "wall_clock", "config",
]

DEFAULTS = {
    "gen": {
        "task": "lowdim", "D": 2, "S": 10, "sigma": 0.5, "count": 10_000, "test_count": 10_000,
        "side": 16, "V": 5, "v_min": 5, "target_mi": 2.0, "seed": 0, "out": None,
    },
    "train": {
        "data": None, "out": None, "resume": None, "log": None, "seed": 0,
        "epochs": 150, "batch_size": 256, "m_train": 1, "lr": 1e-3, "ce_weight": 0.0,
        "ema_decay": 0.995, "alpha": None, "n_steps": 32, "embed_dim": 64, "hidden": [128, 128],
    },
    "estimate": {
        "data": None, "checkpoint": None, "oracle_mode": False, "plugin": False, "report": None,
        "seed": 0, "k": 10_000, "m": 10, "alpha": None, "n_steps": 32, "n_bootstrap": 20,
    },
    "oracle-check": {
        "instances": 50, "seed": 0, "n_steps": None, "tol": 1e-9, "markov_tol": 1e-12,
        "inject_bug": None, "out": None,
    },
    "samples": {"checkpoint": None, "data": None, "out": None, "seed": 0},
    "report": {"report": None, "out": None},
}


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration ------------------------------------------------------------


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge command defaults, the ``--config`` file and explicit flags (in that order)."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ValidationError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    _validate(command, cfg)
    return cfg


def _need(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ValidationError(f"--{k.replace('_', '-')} is required")


def _validate(command: str, cfg: dict) -> None:
    if "seed" in cfg and not (isinstance(cfg["seed"], int) and 0 <= cfg["seed"] <= MAX_SEED):
        raise ValidationError("seed must be an integer in [0, 2**64)")
    if command == "gen":
        _need(cfg, "out")
        if cfg["task"] not in ("lowdim", "image"):
            raise ValidationError("--task must be lowdim or image")
        if cfg["count"] < 1 or cfg["test_count"] < 1:
            raise ValidationError("sample counts must be >= 1")
        if cfg["task"] == "lowdim":
            StateSpace(cfg["S"], cfg["D"])
            if not cfg["sigma"] > 0:
                raise ValidationError("sigma must be positive")
        else:
            gen_image_task(cfg["side"], cfg["V"], cfg["v_min"], cfg["target_mi"])
    elif command == "train":
        _need(cfg, "data", "out")
        TimeGrid(cfg["n_steps"])
        TrainConfig(**_train_kwargs(cfg))
        if cfg["alpha"] is not None and not 0 < cfg["alpha"] < 1:
            raise ValidationError("alpha must lie in (0, 1)")
    elif command == "estimate":
        _need(cfg, "data")
        modes = bool(cfg["checkpoint"]) + bool(cfg["oracle_mode"]) + bool(cfg["plugin"])
        if modes != 1:
            raise ValidationError("choose exactly one of --checkpoint, --oracle-mode, --plugin")
        if cfg["k"] < 1 or cfg["m"] < 1:
            raise ValidationError("--k and --m must be >= 1")
        TimeGrid(cfg["n_steps"])
    elif command == "oracle-check":
        if cfg["instances"] < 1:
            raise ValidationError("--instances must be >= 1")
        if cfg["n_steps"] is not None:
            TimeGrid(cfg["n_steps"])
        if cfg["inject_bug"] not in (None, "no-step-factor"):
            raise ValidationError("--inject-bug supports only 'no-step-factor'")
    elif command == "samples":
        _need(cfg, "checkpoint", "data", "out")
    elif command == "report":
        _need(cfg, "report")


def _train_kwargs(cfg: dict) -> dict:
    keys = ("epochs", "batch_size", "m_train", "lr", "ce_weight", "seed", "ema_decay")
    return {k: cfg[k] for k in keys}


def _default_alpha(meta: dict) -> float:
    return ALPHA_IMAGE if meta.get("task") == "image" else ALPHA_LOWDIM


def task_id(meta: dict) -> str:
    """Stable identifier of a benchmark task derived from its defining parameters."""
    keep = {k: v for k, v in meta.items() if k not in ("config", "seed", "split", "count", "mi_oracle")}
    digest = hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:10]
    if meta.get("task") == "image":
        return f"image-{meta['side']}-V{meta['V']}-mi{meta['target_mi']:g}-{digest}"
    return f"lowdim-D{meta['D']}-S{meta['S']}-{digest}"


def _load_dataset(path) -> Dataset:
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return Dataset.load(path)


# -- commands -----------------------------------------------------------------


def cmd_gen(cfg: dict) -> dict:
    """Write ``train.dbmids`` and ``test.dbmids`` under ``cfg['out']``."""
    seed = cfg["seed"]
    if cfg["task"] == "lowdim":
        task = gen_lowdim_task(cfg["D"], cfg["S"], cfg["sigma"], make_rng(seed, "gen", "task"))
        sampler = sample_lowdim
    else:
        task = gen_image_task(cfg["side"], cfg["V"], cfg["v_min"], cfg["target_mi"])
        sampler = sample_image
    extra = {}
    if isinstance(task, LowDimTask) and task.space.n_states <= MAX_STATES:
        mi_oracle = exact_mi_direct(task.joint_pmf())
        if abs(mi_oracle - task.mi_total) > 1e-9:
            raise NumericError(f"ground truth {task.mi_total} disagrees with oracle {mi_oracle}")
        extra["mi_oracle"] = mi_oracle
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, count in (("train", cfg["count"]), ("test", cfg["test_count"])):
        ds = sampler(task, count, make_rng(seed, "gen", split))
        ds.meta.update(extra, config=cfg, seed=seed, split=split)
        path = out / f"{split}.dbmids"
        ds.save(path)
        paths[split] = str(path)
    print(json.dumps({"task": task_id(task.meta()), "mi_true": task.mi_total, **paths}))
    return paths


def cmd_train(cfg: dict):
    ds = _load_dataset(cfg["data"])
    alpha = cfg["alpha"] if cfg["alpha"] is not None else _default_alpha(ds.meta)
    mc = ModelConfig(
        S=ds.space.S, D=ds.space.D, N=cfg["n_steps"], alpha=alpha,
        embed_dim=cfg["embed_dim"], hidden_dims=tuple(cfg["hidden"]),
    )
    tc = TrainConfig(**_train_kwargs(cfg))
    resume = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    log_path = cfg["log"] or str(cfg["out"]) + ".log.tsv"
    ckpt, report = train(ds.x0, ds.x1, mc, tc, resume=resume, log_path=log_path)
    ckpt.meta.update(
        task=ds.meta.get("task"), task_meta=_task_meta(ds.meta), config={**cfg, "alpha": alpha}, seed=cfg["seed"]
    )
    save_checkpoint(cfg["out"], ckpt)
    print(json.dumps({
        "checkpoint": str(cfg["out"]), "epochs_done": report.epochs_done, "steps": report.steps,
        "loss_v0": report.epoch_loss_v0[-1] if report.epoch_loss_v0 else None,
        "loss_v1": report.epoch_loss_v1[-1] if report.epoch_loss_v1 else None,
        "wall_clock": report.wall_clock,
    }))
    return ckpt, report


def _task_meta(meta: dict) -> dict:
    return {k: v for k, v in meta.items() if k not in ("config", "seed", "split")}


def oracle_spec_for(meta: dict, N: int, alpha: float) -> ReciprocalSpec:
    task = task_from_meta(meta)
    if not isinstance(task, LowDimTask):
        raise ValidationError("oracle mode needs a low-dimensional task")
    if task.space.n_states > MAX_STATES:
        raise ValidationError(f"oracle mode supports at most {MAX_STATES} joint states")
    kernel = UniformKernel(task.space, alpha)
    return ReciprocalSpec(task.joint_pmf(), kernel, TimeGrid(N), Coupling.JOINT)


def cmd_estimate(cfg: dict) -> dict:
    ds = _load_dataset(cfg["data"])
    seed = cfg["seed"]
    t0 = time.perf_counter()
    if cfg["plugin"]:
        est = estimate_plugin(ds.x0, ds.x1, make_rng(seed, "plugin"), cfg["n_bootstrap"], seed)
        N, alpha = "", ""
    elif cfg["oracle_mode"]:
        alpha = cfg["alpha"] if cfg["alpha"] is not None else _default_alpha(ds.meta)
        N = cfg["n_steps"]
        source = OracleSource(oracle_spec_for(ds.meta, N, alpha))
        est = estimate_dbmi(source, ds.x0, ds.x1, cfg["k"], cfg["m"], make_rng(seed, "estimate"), seed)
    else:
        if not Path(cfg["checkpoint"]).is_file():
            raise FileNotFoundError(f"checkpoint not found: {cfg['checkpoint']}")
        ckpt = load_checkpoint(cfg["checkpoint"])
        if ckpt.config.space != ds.space:
            raise ValidationError("checkpoint and dataset have different state spaces")
        source = ModelSource(TransitionModel(ckpt.config), ckpt.eval_params())
        est = estimate_dbmi(source, ds.x0, ds.x1, cfg["k"], cfg["m"], make_rng(seed, "estimate"), seed)
        N, alpha = ckpt.config.N, ckpt.config.alpha
    row = {
        "task": task_id(ds.meta),
        "estimator": est.estimator,
        "mi_true": ds.meta.get("mi_true", ""),
        "mi_hat": est.value,
        "std_error": est.std_error,
        "K": est.K,
        "M": est.M,
        "N": N,
        "alpha": alpha,
        "seed": seed,
        "wall_clock": time.perf_counter() - t0,
        "config": json.dumps(cfg, sort_keys=True),
    }
    if est.n_flagged:
        log.warning("%d KL terms were flagged and excluded", est.n_flagged)
    if cfg["report"]:
        upsert_report_row(cfg["report"], row)
    print(json.dumps(row))
    return row


def read_report(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


def upsert_report_row(path, row: dict) -> None:
    """Insert ``row`` or replace the existing row with the same (task, estimator, seed)."""
    key = (str(row["task"]), str(row["estimator"]), str(row["seed"]))
    rows = [r for r in read_report(path) if (r["task"], r["estimator"], r["seed"]) != key]
    rows.append({k: str(row[k]) if not isinstance(row[k], float) else repr(row[k]) for k in REPORT_FIELDS})
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


def battery_instance(seed: int, i: int, n_steps: int | None = None) -> ReciprocalSpec:
    """Instance ``i`` of the seeded theorem battery (small random joints)."""
    rng = make_rng(seed, "battery", i)
    S = int(rng.choice([2, 3]))
    D = int(rng.choice([1, 2]))
    N = n_steps if n_steps is not None else int(rng.choice([1, 2, 4, 8]))
    alpha = float(rng.choice([0.05, 0.3]))
    space = StateSpace(S, D)
    joint = JointPMF.random(space, rng)
    return ReciprocalSpec(joint, UniformKernel(space, alpha), TimeGrid(N), Coupling.JOINT)


def check_instance(spec: ReciprocalSpec, inject_bug: str | None = None) -> dict:
    direct = exact_mi_direct(spec.joint)
    terms = decomposition_terms(spec)
    # the injected bug drops the step-count factor, i.e. reports the mean term
    decomposed = float(terms.mean()) if inject_bug == "no-step-factor" else float(terms.sum())
    res = {
        "S": spec.space.S, "D": spec.space.D, "N": spec.grid.N, "alpha": spec.kernel.alpha,
        "mi_direct": direct, "mi_decomposed": decomposed, "dev_decomposed": abs(decomposed - direct),
        "dev_path": None, "markov_dev": None,
    }
    if path_enumerable(spec):
        res["dev_path"] = abs(path_space_kl(spec) - direct)
        res["markov_dev"] = markov_property_check(spec)
    return res


def cmd_oracle_check(cfg: dict) -> list:
    results, failures = [], []
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(["instance", "S", "D", "N", "alpha", "mi_direct", "dev_decomposed", "dev_path", "markov_dev", "ok"])
    for i in range(cfg["instances"]):
        res = check_instance(battery_instance(cfg["seed"], i, cfg["n_steps"]), cfg["inject_bug"])
        ok = res["dev_decomposed"] <= cfg["tol"]
        ok &= res["dev_path"] is None or res["dev_path"] <= cfg["tol"]
        ok &= res["markov_dev"] is None or res["markov_dev"] <= cfg["markov_tol"]
        res.update(instance=i, ok=bool(ok))
        results.append(res)
        if not ok:
            failures.append(i)
        w.writerow([i, res["S"], res["D"], res["N"], res["alpha"], repr(res["mi_direct"]),
                    f"{res['dev_decomposed']:.3e}",
                    "" if res["dev_path"] is None else f"{res['dev_path']:.3e}",
                    "" if res["markov_dev"] is None else f"{res['markov_dev']:.3e}", int(ok)])
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps({"config": cfg, "results": results}, indent=1))
    worst = max(r["dev_decomposed"] for r in results)
    print(f"# instances={len(results)} failures={len(failures)} max_dev_decomposed={worst:.3e}", file=sys.stderr)
    if failures:
        raise CLIError(f"oracle check failed for instances {failures}", EXIT_CHECK_FAILED)
    return results


def cmd_samples(cfg: dict) -> dict:
    ds = _load_dataset(cfg["data"])
    task = task_from_meta(ds.meta)
    if not isinstance(task, ImageTask):
        raise ValidationError("samples needs an image task dataset")
    if not Path(cfg["checkpoint"]).is_file():
        raise FileNotFoundError(f"checkpoint not found: {cfg['checkpoint']}")
    ckpt = load_checkpoint(cfg["checkpoint"])
    if ckpt.config.space != ds.space:
        raise ValidationError("checkpoint and dataset have different state spaces")
    if len(ds) < 10:
        raise ValidationError("samples needs at least 10 pairs for a 5x2 grid")
    model = TransitionModel(ckpt.config)
    params = ckpt.eval_params()
    x0, x1 = ds.x0[:10], ds.x1[:10]
    grids = {"x0": x0, "x1": x1}
    for v in (0, 1):
        grids[f"rollout_v{v}"] = model.rollout(params, x0, v, make_rng(cfg["seed"], "samples", v))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    comment = json.dumps({"config": cfg, "model": ckpt.config.to_dict(), "seed": cfg["seed"]}, sort_keys=True)
    paths = {}
    for name, imgs in grids.items():
        path = out / f"{name}.pgm"
        write_pgm(path, tile_grid(imgs, task.side), comment=f"{name} {comment}")
        paths[name] = str(path)
    print(json.dumps(paths))
    return paths


def load_reference() -> dict:
    text = resources.files("dbmi").joinpath("data/reference_results.json").read_text()
    return json.loads(text)


def _reference_for(row: dict, ref: dict):
    task = row["task"]
    tables = ref["tables"]
    if task.startswith("lowdim-"):
        D, S = (int(p[1:]) for p in task.split("-")[1:3])
        if S == 10 and str(D) in tables["lowdim_S10"]["rows"]:
            return "lowdim_S10", tables["lowdim_S10"]["rows"][str(D)]
        if D == 10 and str(S) in tables["lowdim_D10"]["rows"]:
            return "lowdim_D10", tables["lowdim_D10"]["rows"][str(S)]
    elif task.startswith("image-"):
        side = task.split("-")[1]
        target = task.split("-")[3][2:]
        name = f"image_{side}"
        if name in tables and target in tables[name]["rows"]:
            return name, tables[name]["rows"][target]
    return None, None


def cmd_report(cfg: dict) -> list:
    """Render report rows next to quoted published figures for comparable tasks."""
    if not Path(cfg["report"]).is_file():
        raise FileNotFoundError(f"report not found: {cfg['report']}")
    ref = load_reference()
    out_rows = []
    for row in read_report(cfg["report"]):
        name, vals = _reference_for(row, ref)
        out_rows.append({
            "task": row["task"], "estimator": row["estimator"], "seed": row["seed"],
            "mi_true": row["mi_true"], "mi_hat": row["mi_hat"], "std_error": row["std_error"],
            "ref_table": name or "", "ref_mi_true": "" if vals is None else vals[0],
            "ref_dbmi": "" if vals is None else vals[1],
        })
    fields = ["task", "estimator", "seed", "mi_true", "mi_hat", "std_error", "ref_table", "ref_mi_true", "ref_dbmi"]
    fh = open(cfg["out"], "w", newline="") if cfg["out"] else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(out_rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return out_rows


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "oracle-check": cmd_oracle_check,
    "samples": cmd_samples,
    "report": cmd_report,
}


# -- argument parsing ---------------------------------------------------------


def _u64(text: str) -> int:
    val = int(text)
    if not 0 <= val <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return val


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbmi", description="Discrete bridge-matching mutual information estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON file with option values")
        if seed:
            sp.add_argument("--seed", type=_u64)
        return sp

    g = common(sub.add_parser("gen", help="generate a benchmark task and train/test datasets"))
    g.add_argument("--out", help="output directory")
    g.add_argument("--task", choices=["lowdim", "image"])
    g.add_argument("--D", type=int)
    g.add_argument("--S", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--count", type=int)
    g.add_argument("--test-count", type=int)
    g.add_argument("--side", type=int)
    g.add_argument("--V", type=int)
    g.add_argument("--v-min", type=int)
    g.add_argument("--target-mi", type=float)

    t = common(sub.add_parser("train", help="train the transition model"))
    t.add_argument("--data", help="training dataset")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="TSV training log (default: <out>.log.tsv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--m-train", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--ce-weight", type=float)
    t.add_argument("--ema-decay", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--n-steps", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--hidden", type=int, nargs="+")

    e = common(sub.add_parser("estimate", help="estimate MI and append a report row"))
    e.add_argument("--data", help="evaluation dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle-mode", action="store_true", help="use exact transitions (small tasks)")
    e.add_argument("--plugin", action="store_true", help="plug-in baseline")
    e.add_argument("--report", help="DSV report to update")
    e.add_argument("--k", type=int)
    e.add_argument("--m", type=int)
    e.add_argument("--alpha", type=float)
    e.add_argument("--n-steps", type=int)
    e.add_argument("--n-bootstrap", type=int)

    o = common(sub.add_parser("oracle-check", help="verify the MI decomposition on a seeded battery"))
    o.add_argument("--instances", type=int)
    o.add_argument("--n-steps", type=int, help="fix N for every instance")
    o.add_argument("--tol", type=float)
    o.add_argument("--markov-tol", type=float)
    o.add_argument("--inject-bug", choices=["no-step-factor"])
    o.add_argument("--out", help="JSON file with per-instance results")

    s = common(sub.add_parser("samples", help="write PGM grids of data and model rollouts"))
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--out", help="output directory")

    r = common(sub.add_parser("report", help="render a report next to quoted reference figures"), seed=False)
    r.add_argument("--report")
    r.add_argument("--out")
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    try:
        limiter = _thread_limit()
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
        return EXIT_OK
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NumericError, InfiniteKLError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ValueError, KeyError, TypeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
