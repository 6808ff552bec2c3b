"""Command-line driver for the amalgamation experiments.

Every invocation resolves a run configuration (defaults, then `key = value`
config file, then command-line flags), creates a run directory under --out
named by the run id, logs the fully resolved config there, and appends
machine-readable rows to metrics.csv with the fixed header
``run_id,stage,epoch,task,metric,value``. Exit codes: 0 success, 1 usage
error, 2 validation or coverage error, 3 I/O error. Every failure also prints
a single `ERROR <code> <message>` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys
import tempfile
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import blocknet as B
from . import engine as E
from . import gradcheck as GC
from . import synthdata as SD
from . import zoo as Z
from .blocknet import HeadSpec
from .errors import (
    ConflictError,
    CoverageError,
    NotFoundError,
    SizeError,
    SpecError,
    StorageError,
    ValidationError,
)


class UsageError(Exception):
    """Bad flags, bad subcommand, or a malformed / unknown config entry."""


_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")

# Every recognized config key with its type tag and default. The config file
# may set any of these; command-line flags override the file.
_SCHEMA: dict[str, tuple[str, object]] = {
    # training knobs
    "lr": ("float", 0.01),
    "momentum": ("float", 0.9),
    "epochs": ("int", 30),
    "batch_size": ("int", 32),
    "seed": ("int", 0),
    "widen_factor": ("float", B.DEFAULT_WIDEN_FACTOR),
    "aligned_channels": ("str", ""),
    "entropy_clamp": ("float", 1e-12),
    "disable_bridge": ("bool", False),
    "disable_selection": ("bool", False),
    "kd_only": ("bool", False),
    "per_task_selection": ("bool", False),
    # paths and naming
    "out": ("str", "runs"),
    "zoo": ("str", ""),  # empty: <run dir>/zoo
    "run_id": ("str", ""),  # empty: <command>-seed<seed>
    "data": ("str", ""),
    # experiment selectors
    "tasks": ("str", ""),
    "sources": ("str", ""),
    "components": ("str", ""),
    "nets": ("str", ""),
    "net_id": ("str", ""),
    "part": ("int", 0),
    "min_teachers": ("int", 2),
    # data generation
    "n": ("int", 2000),
    "teachers": ("int", 2),
    "unlabeled_fraction": ("float", 0.4),
    "test_fraction": ("float", 0.2),
    "noise": ("float", SD.SceneSpec.noise_amplitude),
    # gradient checking
    "cases": ("int", 5),
    "tol": ("float", GC.TOL),
}


def _parse_value(key: str, raw: str):
    kind = _SCHEMA[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def _read_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path!r}: {exc}") from None
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {line_no}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise UsageError(f"config line {line_no}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# run context: run directory, resolved-config log, metrics writer


class RunContext:
    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.run_dir = Path(cfg["out"]) / cfg["run_id"]
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.zoo_dir = Path(cfg["zoo"]) if cfg["zoo"] else self.run_dir / "zoo"
        lines = [f"command = {command}"] + [
            f"{key} = {_format_value(cfg[key])}" for key in sorted(_SCHEMA)
        ]
        (self.run_dir / "config.txt").write_text("\n".join(lines) + "\n")
        self._metrics_file = open(self.run_dir / "metrics.csv", "w", newline="")
        self._writer = csv.writer(self._metrics_file, lineterminator="\n")
        self._writer.writerow(["run_id", "stage", "epoch", "task", "metric", "value"])

    def registry(self) -> Z.ZooRegistry:
        return Z.ZooRegistry(self.zoo_dir)

    def row(self, stage: str, epoch: int, task: str, metric: str, value) -> None:
        if isinstance(value, (bool, int, np.integer)):
            text = str(int(value))
        else:
            text = repr(float(value))
        self._writer.writerow([self.cfg["run_id"], stage, epoch, task, metric, text])

    def loss_rows(self, stage: str, task: str, history: E.LossBreakdown) -> None:
        for summary in E.epoch_summaries(history):
            epoch = int(summary["epoch"])
            for metric in ("loss_total", "loss_soft", "loss_transfer", "loss_reg"):
                self.row(stage, epoch, task, metric, summary[metric])

    def close(self) -> None:
        self._metrics_file.flush()
        self._metrics_file.close()


# ---------------------------------------------------------------------------
# shared lookups


def _amalgam_config(cfg: dict) -> E.AmalgamConfig:
    raw = cfg["aligned_channels"]
    parts = [p for p in raw.split(",") if p.strip()] if raw else []
    try:
        aligned = tuple(int(p) for p in parts) or None
    except ValueError:
        raise UsageError(f"aligned_channels: cannot parse {raw!r} as ints") from None
    return E.AmalgamConfig(
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        widen_factor=cfg["widen_factor"],
        aligned_channels=aligned,
        entropy_clamp=cfg["entropy_clamp"],
        disable_bridge=cfg["disable_bridge"],
        disable_selection=cfg["disable_selection"],
        kd_only=cfg["kd_only"],
        per_task_selection=cfg["per_task_selection"],
    )


def _split_csv(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _require_data(cfg: dict):
    if not cfg["data"]:
        raise UsageError("--data PATH is required for this subcommand")
    return Z.load_dataset(cfg["data"])


def _unlabeled_images(ds: SD.LabeledDataset, assignment: np.ndarray | None) -> np.ndarray:
    if assignment is None:
        return ds.images
    images = ds.images[assignment == SD.UNLABELED_TAG]
    if images.shape[0] == 0:
        raise SizeError("dataset split has no unlabeled samples")
    return images


def _test_subset(ds: SD.LabeledDataset, assignment: np.ndarray | None) -> SD.LabeledDataset:
    if assignment is None:
        return ds
    idx = np.flatnonzero(assignment == SD.TEST_TAG)
    if idx.size == 0:
        raise SizeError("dataset split has no test samples")
    return ds.subset(idx)


def _teacher_part(ds: SD.LabeledDataset, assignment: np.ndarray | None, part: int):
    if assignment is None:
        raise SpecError("dataset container carries no split assignment; re-run gen-data")
    if part < 0:
        raise UsageError(f"--part must be non-negative, got {part}")
    idx = np.flatnonzero(assignment == part)
    if idx.size == 0:
        raise SizeError(f"teacher partition {part} is empty or absent")
    return ds.subset(idx)


def _save_net(reg: Z.ZooRegistry, net_id: str, net: B.BlockNet, role: str) -> Z.ZooEntry:
    """Registry save that tolerates deterministic reruns: an id that is
    already registered with byte-identical content and the same role is left
    alone; any divergence is a genuine conflict."""
    try:
        entry = reg.lookup(net_id)
    except NotFoundError:
        return reg.save_net(net_id, net, role)
    existing = reg.root / entry.path
    fd, tmp = tempfile.mkstemp(dir=reg.root, prefix=".cmp.", suffix=".tmp")
    os.close(fd)
    try:
        Z.save_blocknet(tmp, net)
        fresh_bytes = Path(tmp).read_bytes()
    finally:
        os.unlink(tmp)
    if entry.role == role and existing.exists() and existing.read_bytes() == fresh_bytes:
        return entry
    raise ConflictError(f"net id {net_id!r} already registered with different content")


def _load_sources(ctx: RunContext, cfg: dict, key: str, role: str) -> list[tuple[str, B.BlockNet]]:
    """Nets by explicit comma-listed ids, else every zoo entry of the role."""
    reg = ctx.registry()
    ids = _split_csv(cfg[key])
    if not ids:
        ids = [e.net_id for e in reg.entries() if e.role == role]
    if not ids:
        raise CoverageError(f"no {role} nets found in zoo {reg.root}")
    return [(net_id, reg.load_net(net_id)) for net_id in ids]


def _resolve_tasks(cfg: dict, nets: Sequence[tuple[str, B.BlockNet]]) -> list[str]:
    tasks = _split_csv(cfg["tasks"])
    if not tasks:
        tasks = sorted({task for _, net in nets for task in net.task_set})
    for task in tasks:
        if not _NAME_RE.match(task):
            raise UsageError(f"bad task name {task!r}")
    return tasks


def _eval_rows(ctx: RunContext, stage: str, metric: str, accuracies: dict[str, float]) -> None:
    for task in sorted(accuracies):
        ctx.row(stage, -1, task, metric, accuracies[task])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(ctx: RunContext, cfg: dict) -> None:
    spec = SD.SceneSpec(noise_amplitude=cfg["noise"])
    ds = SD.generate(spec, cfg["n"], cfg["seed"])
    sp = SD.split(
        ds, cfg["teachers"], cfg["unlabeled_fraction"], cfg["test_fraction"], cfg["seed"]
    )
    out_path = ctx.run_dir / "dataset.amlg"
    Z.save_dataset(out_path, ds, assignment=sp.assignment)
    ctx.row("gen-data", -1, "-", "count_total", len(ds))
    ctx.row("gen-data", -1, "-", "count_unlabeled", sp.unlabeled.shape[0])
    ctx.row("gen-data", -1, "-", "count_test", len(sp.test))
    for i, part in enumerate(sp.teacher_parts):
        ctx.row("gen-data", -1, "-", f"count_part{i}", len(part))
    for task in sorted(ds.labels):
        counts = np.bincount(ds.labels[task], minlength=ds.task_classes[task])
        for cls, count in enumerate(counts):
            ctx.row("gen-data", -1, task, f"class{cls}_rate", count / len(ds))
    print(f"wrote {out_path} ({len(ds)} samples, {len(sp.teacher_parts)} teacher parts)")


def _cmd_train_teacher(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    part = _teacher_part(ds, assignment, cfg["part"])
    tasks = _split_csv(cfg["tasks"]) or sorted(ds.labels)
    for task in tasks:
        if task not in ds.task_classes:
            raise CoverageError(f"dataset has no task {task!r}")
    heads = tuple(HeadSpec(task, ds.task_classes[task]) for task in sorted(tasks))
    net = B.build_blocknet(B.default_spec(heads), E.derive_seed(cfg["seed"], 31, cfg["part"]))
    acfg = _amalgam_config(cfg)
    train_cfg = E.AmalgamConfig(
        lr=acfg.lr,
        momentum=acfg.momentum,
        epochs=acfg.epochs,
        batch_size=acfg.batch_size,
        seed=E.derive_seed(cfg["seed"], 32, cfg["part"]),
    )
    history = E.train_supervised(net, part.images, part.labels, train_cfg)
    for epoch, ce in history:
        ctx.row("supervised", epoch, "-", "ce_mean", ce)
    accuracies = E.evaluate(net, _test_subset(ds, assignment))
    _eval_rows(ctx, "eval", "accuracy", accuracies)
    net_id = cfg["net_id"] or f"teacher{cfg['part']}"
    entry = _save_net(ctx.registry(), net_id, net, "source")
    print(f"saved source {entry.net_id} (tasks {','.join(entry.tasks)}); accuracy {accuracies}")


def _cmd_stage1(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    sources = _load_sources(ctx, cfg, "sources", "source")
    tasks = _resolve_tasks(cfg, sources)
    acfg = _amalgam_config(cfg)
    components, histories = E.stage_one(
        [net for _, net in sources], tasks, _unlabeled_images(ds, assignment), acfg
    )
    test = _test_subset(ds, assignment)
    reg = ctx.registry()
    prefix = cfg["net_id"] or "component"
    for task in sorted(components):
        ctx.loss_rows("stage1", task, histories[task])
        accuracies = E.evaluate(components[task], test)
        _eval_rows(ctx, "eval", "accuracy", accuracies)
        entry = _save_net(reg, f"{prefix}-{task}", components[task], "component")
        print(f"saved component {entry.net_id}; accuracy {accuracies}")


def _cmd_stage2(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    comps = _load_sources(ctx, cfg, "components", "component")
    acfg = _amalgam_config(cfg)
    target, history = E.stage_two(
        [net for _, net in comps], _unlabeled_images(ds, assignment), acfg
    )
    ctx.loss_rows("stage2", "-", history)
    accuracies = E.evaluate(target, _test_subset(ds, assignment))
    _eval_rows(ctx, "eval", "accuracy", accuracies)
    entry = _save_net(ctx.registry(), cfg["net_id"] or "target", target, "target")
    print(f"saved target {entry.net_id}; accuracy {accuracies}")


def _cmd_dual_stage(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    sources = _load_sources(ctx, cfg, "sources", "source")
    tasks = _resolve_tasks(cfg, sources)
    acfg = _amalgam_config(cfg)
    result = E.dual_stage(
        [net for _, net in sources], tasks, _unlabeled_images(ds, assignment), acfg
    )
    test = _test_subset(ds, assignment)
    reg = ctx.registry()
    prefix = cfg["net_id"] or "target"
    for task in sorted(result.components):
        ctx.loss_rows("stage1", task, result.stage1_history[task])
        comp_acc = E.evaluate(result.components[task], test)
        _eval_rows(ctx, "eval", "component_accuracy", comp_acc)
        _save_net(reg, f"{prefix}-component-{task}", result.components[task], "component")
    ctx.loss_rows("stage2", "-", result.stage2_history)
    accuracies = E.evaluate(result.target, test)
    _eval_rows(ctx, "eval", "accuracy", accuracies)
    entry = _save_net(reg, prefix, result.target, "target")
    print(f"saved target {entry.net_id}; accuracy {accuracies}")


def _cmd_one_shot(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    sources = _load_sources(ctx, cfg, "sources", "source")
    tasks = _resolve_tasks(cfg, sources)
    acfg = _amalgam_config(cfg)
    target, history = E.one_shot_amalgamate(
        [net for _, net in sources], tasks, _unlabeled_images(ds, assignment), acfg
    )
    ctx.loss_rows("one-shot", "-", history)
    accuracies = E.evaluate(target, _test_subset(ds, assignment))
    _eval_rows(ctx, "eval", "accuracy", accuracies)
    entry = _save_net(ctx.registry(), cfg["net_id"] or "oneshot", target, "target")
    print(f"saved target {entry.net_id}; accuracy {accuracies}")


def _cmd_eval(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    ref = cfg["net_id"]
    if not ref:
        raise UsageError("--net-id ID-or-path is required for eval")
    if Path(ref).is_file():
        net = Z.load_blocknet(ref)
    else:
        net = ctx.registry().load_net(ref)
    tasks = _split_csv(cfg["tasks"]) or None
    accuracies = E.evaluate(net, _test_subset(ds, assignment), tasks)
    _eval_rows(ctx, "eval", "accuracy", accuracies)
    for task in sorted(accuracies):
        print(f"{task}: {accuracies[task]:.4f}")


_ABLATION_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("whole", {}),
    ("kd", {"kd_only": True}),
    ("wo_tb", {"disable_bridge": True}),
    ("wo_ts", {"disable_selection": True}),
)


def _cmd_ablate(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    sources = _load_sources(ctx, cfg, "sources", "source")
    tasks = _resolve_tasks(cfg, sources)
    base = _amalgam_config(cfg)
    if base.disable_bridge or base.disable_selection or base.kd_only:
        raise UsageError("ablate sets the ablation switches itself; do not pass them")
    unlabeled = _unlabeled_images(ds, assignment)
    test = _test_subset(ds, assignment)
    reg = ctx.registry()
    pool = [net for _, net in sources]
    for name, flags in _ABLATION_VARIANTS:
        variant_cfg = E.AmalgamConfig(
            lr=base.lr,
            momentum=base.momentum,
            epochs=base.epochs,
            batch_size=base.batch_size,
            seed=base.seed,
            widen_factor=base.widen_factor,
            aligned_channels=base.aligned_channels,
            entropy_clamp=base.entropy_clamp,
            **flags,
        )
        result = E.dual_stage(pool, tasks, unlabeled, variant_cfg)
        for task in sorted(result.stage1_history):
            ctx.loss_rows(f"{name}.stage1", task, result.stage1_history[task])
        ctx.loss_rows(f"{name}.stage2", "-", result.stage2_history)
        accuracies = E.evaluate(result.target, test)
        _eval_rows(ctx, name, "accuracy", accuracies)
        _save_net(reg, f"ablate-{name}", result.target, "target")
        print(f"{name}: {accuracies}")


def _cmd_teacher_sweep(ctx: RunContext, cfg: dict) -> None:
    ds, assignment = _require_data(cfg)
    sources = _load_sources(ctx, cfg, "sources", "source")
    low = cfg["min_teachers"]
    if low < 1:
        raise UsageError(f"--min-teachers must be positive, got {low}")
    if len(sources) < low:
        raise CoverageError(f"sweep needs at least {low} sources, found {len(sources)}")
    tasks = _split_csv(cfg["tasks"]) or sorted(
        {task for _, net in sources[:low] for task in net.task_set}
    )
    acfg = _amalgam_config(cfg)
    unlabeled = _unlabeled_images(ds, assignment)
    test = _test_subset(ds, assignment)
    reg = ctx.registry()
    for count in range(low, len(sources) + 1):
        pool = [net for _, net in sources[:count]]
        result = E.dual_stage(pool, tasks, unlabeled, acfg)
        accuracies = E.evaluate(result.target, test)
        _eval_rows(ctx, f"teachers{count}", "accuracy", accuracies)
        _save_net(reg, f"sweep{count}", result.target, "target")
        print(f"{count} teachers: {accuracies}")


def _cmd_resources(ctx: RunContext, cfg: dict) -> None:
    reg = ctx.registry()
    refs = _split_csv(cfg["nets"])
    if refs:
        nets = []
        for ref in refs:
            if Path(ref).is_file():
                nets.append((Path(ref).stem, Z.load_blocknet(ref)))
            else:
                nets.append((ref, reg.load_net(ref)))
    else:
        nets = [(e.net_id, reg.load_net(e.net_id)) for e in reg.entries()]
    if not nets:
        raise CoverageError(f"no nets to measure in zoo {reg.root}")
    print(f"{'net':24s} {'params':>12s} {'flops/image':>14s}")
    for name, net in nets:
        res = B.count_resources(net)
        ctx.row("resources", -1, "-", f"{name}.params", res.params)
        ctx.row("resources", -1, "-", f"{name}.flops_per_image", res.flops_per_image)
        print(f"{name:24s} {res.params:12d} {res.flops_per_image:14d}")
        for layer, params, macs in res.per_layer:
            print(f"  {layer:22s} {params:12d} {2 * macs:14d}")


def _cmd_gradcheck(ctx: RunContext, cfg: dict) -> None:
    results = GC.run_suite(seed=cfg["seed"], cases_per_op=cfg["cases"], tol=cfg["tol"])
    failures = []
    for res in results:
        ctx.row("gradcheck", -1, "-", res.name, res.max_rel_error)
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.name:24s} {res.max_rel_error:.3e}  {status}")
        if not res.passed:
            failures.append(res.name)
    if failures:
        raise ValidationError(f"gradient checks failed: {', '.join(failures)}")


_COMMANDS: dict[str, Callable[[RunContext, dict], None]] = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "amalgamate-stage1": _cmd_stage1,
    "amalgamate-stage2": _cmd_stage2,
    "dual-stage": _cmd_dual_stage,
    "one-shot": _cmd_one_shot,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "teacher-sweep": _cmd_teacher_sweep,
    "resources": _cmd_resources,
    "gradcheck": _cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--seed", type=int, dest="seed")
    sp.add_argument("--out", dest="out", help="parent directory for run directories")
    sp.add_argument("--zoo", dest="zoo", help="model zoo directory (default: <run dir>/zoo)")
    sp.add_argument("--run-id", dest="run_id", help="run directory name")
    sp.add_argument("--tasks", dest="tasks", help="comma-separated task ids")
    sp.add_argument("--epochs", type=int, dest="epochs")
    sp.add_argument("--lr", type=float, dest="lr")
    sp.add_argument("--batch", type=int, dest="batch_size")
    sp.add_argument("--momentum", type=float, dest="momentum")
    sp.add_argument("--widen", type=float, dest="widen_factor")
    sp.add_argument("--no-bridge", action="store_true", default=None, dest="disable_bridge")
    sp.add_argument(
        "--no-selection", action="store_true", default=None, dest="disable_selection"
    )
    sp.add_argument("--kd-only", action="store_true", default=None, dest="kd_only")
    sp.add_argument("--data", dest="data", help="dataset container path")
    sp.add_argument("--net-id", dest="net_id", help="id for saved nets (or net to eval)")


def _build_parser() -> _Parser:
    parser = _Parser(prog="amalgam", description=__doc__)
    subs = parser.add_subparsers(dest="command")
    specs: dict[str, tuple[str, list[tuple[str, dict]]]] = {
        "gen-data": (
            "generate a labeled synthetic dataset and split it",
            [
                ("--n", dict(type=int, dest="n", help="total sample count")),
                ("--teachers", dict(type=int, dest="teachers", help="teacher partitions")),
                ("--unlabeled-fraction", dict(type=float, dest="unlabeled_fraction")),
                ("--test-fraction", dict(type=float, dest="test_fraction")),
                ("--noise", dict(type=float, dest="noise", help="pixel noise amplitude")),
            ],
        ),
        "train-teacher": (
            "supervised training of one source net on its partition",
            [("--part", dict(type=int, dest="part", help="teacher partition index"))],
        ),
        "amalgamate-stage1": (
            "amalgamate per-task component nets from source nets",
            [("--sources", dict(dest="sources", help="comma-separated source ids"))],
        ),
        "amalgamate-stage2": (
            "amalgamate a widened multi-task target from component nets",
            [("--components", dict(dest="components", help="comma-separated component ids"))],
        ),
        "dual-stage": (
            "run both amalgamation stages end to end",
            [("--sources", dict(dest="sources"))],
        ),
        "one-shot": (
            "single-stage baseline: amalgamate the target directly from sources",
            [("--sources", dict(dest="sources"))],
        ),
        "eval": ("evaluate a checkpoint on the test split", []),
        "ablate": (
            "run the whole / kd / wo_tb / wo_ts variant grid",
            [("--sources", dict(dest="sources"))],
        ),
        "teacher-sweep": (
            "amalgamate from a growing number of source nets",
            [
                ("--sources", dict(dest="sources")),
                ("--min-teachers", dict(type=int, dest="min_teachers")),
            ],
        ),
        "resources": (
            "parameter and flop counts per net",
            [("--nets", dict(dest="nets", help="comma-separated ids or paths"))],
        ),
        "gradcheck": (
            "finite-difference verification of every differentiable op",
            [
                ("--cases", dict(type=int, dest="cases", help="cases per op")),
                ("--tol", dict(type=float, dest="tol", help="relative error bound")),
            ],
        ),
    }
    for name, (help_text, extras) in specs.items():
        sp = subs.add_parser(name, help=help_text)
        _add_common(sp)
        for flag, kwargs in extras:
            sp.add_argument(flag, **kwargs)
    return parser


def _resolve(args: argparse.Namespace, command: str) -> dict:
    cfg = {key: default for key, (_, default) in _SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(_read_config_file(args.config))
    for key in _SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["seed"] < 0:
        raise UsageError(f"--seed must be non-negative, got {cfg['seed']}")
    if not cfg["run_id"]:
        cfg["run_id"] = f"{command}-seed{cfg['seed']}"
    if not _NAME_RE.match(cfg["run_id"]):
        raise UsageError(f"bad run id {cfg['run_id']!r}")
    return cfg


def _error_line(code: int, message: str) -> None:
    flat = " ".join(str(message).split())
    print(f"ERROR {code} {flat}", file=sys.stderr)


def run(argv: Sequence[str] | None = None) -> int:
    """Parse argv, run the subcommand, map errors to exit codes."""
    parser = _build_parser()
    ctx = None
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if not args.command:
            raise UsageError("a subcommand is required (see --help)")
        cfg = _resolve(args, args.command)
        ctx = RunContext(cfg, args.command)
        _COMMANDS[args.command](ctx, cfg)
        return 0
    except UsageError as exc:
        _error_line(1, str(exc))
        return 1
    except ValidationError as exc:
        _error_line(2, str(exc))
        return 2
    except (StorageError, OSError) as exc:
        _error_line(3, str(exc))
        return 3
    finally:
        if ctx is not None:
            ctx.close()


def entry() -> None:
    raise SystemExit(run(sys.argv[1:]))
