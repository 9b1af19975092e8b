"""Command line entry point: ``adaptdet <subcommand>``.

Layout under ``--out``::

    data/{split}-seed{S}[-n{N}].adc        dataset caches
    checkpoints/detector[-b]-seed{S}.ckpt  pre-trained detectors
    checkpoints/{model}-n{N}-seed{s}.ckpt  trained models, one per training seed
    logs/{model}-n{N}-seed{s}.jsonl        meta-training logs
    results/{name}.csv / .json             metrics per (method, seed) and summaries

``--seed`` fixes data generation and detector pre-training; the training
seeds of the replicate runs are ``eval.seeds`` in the config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import cache
from . import checkpoint as ck
from . import config as C
from . import detector as det
from . import evalbench as EB
from . import fusion
from . import meta
from . import pipeline as PL
from . import supervisor as sup

log = logging.getLogger("adaptdet")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_CACHE = 4
EXIT_MISSING_CHECKPOINT = 5
EXIT_MISMATCH = 6
EXIT_CORRUPT = 7

LOG_ENV = "ADAPTDET_LOG"

SUITES = {
    "full": EB.METHODS,
    "baselines": ("single-frame", "multi-frame", "interactron-rand", "interactron"),
    "test-time": ("interactron", "no-train-at-test"),
    "repeat": ("interactron-rand", "repeated-first-frame"),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- paths


class Run:
    def __init__(self, cfg: C.RunConfig, out: Path):
        self.cfg = cfg
        self.out = out

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def n(self) -> int:
        return self.cfg.meta.n

    def data_path(self, split: str, n: Optional[int] = None) -> Path:
        suffix = "" if split in PL.FRAME_SPLITS else f"-n{self.n if n is None else n}"
        return self.out / "data" / f"{split}-seed{self.seed}{suffix}.adc"

    def detector_path(self, domain: str = "a") -> Path:
        tag = "" if domain == "a" else "-b"
        return self.out / "checkpoints" / f"detector{tag}-seed{self.seed}.ckpt"

    def model_path(self, name: str, seed: int) -> Path:
        return self.out / "checkpoints" / f"{name}-n{self.n}-seed{seed}.ckpt"

    def log_path(self, name: str, seed: int) -> Path:
        return self.out / "logs" / f"{name}-n{self.n}-seed{seed}.jsonl"

    def results(self, name: str) -> tuple[Path, Path]:
        d = self.out / "results"
        return d / f"{name}.csv", d / f"{name}.json"


def _mkdir(p: Path) -> Path:
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- checkpoints


def _echo(cfg: C.RunConfig, *sections: str) -> dict:
    d = cfg.as_dict()
    return {s: d[s] for s in sections}


def _registry(cfg: C.RunConfig, kind: str, n: int) -> set[str]:
    names = {f"det/{k}" for k in det.init_detector(cfg.detector, 0)}
    if kind == "meta":
        names |= {f"sup/{k}" for k in sup.init_supervisor(cfg.supervisor, n, 0)}
    elif kind == "fusion":
        names |= {f"fusion/{k}" for k in fusion.init_fusion(cfg.supervisor, cfg.detector, 0)}
    return names


def _load_ckpt(path: Path, cfg: C.RunConfig, kind: str, n: int, sections: Sequence[str]) -> ck.Checkpoint:
    if not path.exists():
        raise CliError(EXIT_MISSING_CHECKPOINT, f"missing checkpoint {path}; run the producing subcommand first")
    try:
        c = ck.load(path)
    except ck.CheckpointError as e:
        raise CliError(EXIT_CORRUPT, f"{path}: {e}") from None
    if c.kind != kind:
        raise CliError(EXIT_MISMATCH, f"{path} holds a {c.kind!r} checkpoint, expected {kind!r}")
    want = _echo(cfg, *sections)
    for s in sections:
        if c.config.get(s) != want[s]:
            raise CliError(EXIT_MISMATCH, f"{path} was written with a different [{s}] configuration")
    try:
        ck.check_registry(c, _registry(cfg, kind, n))
    except ck.CheckpointError as e:
        raise CliError(EXIT_MISMATCH, f"{path}: {e}") from None
    return c


def _load_cache(path: Path):
    if not path.exists():
        raise CliError(EXIT_MISSING_CACHE, f"missing dataset cache {path}; run gen-data first")
    try:
        return cache.load(path)[1]
    except cache.CacheError as e:
        raise CliError(EXIT_CORRUPT, f"{path}: {e}") from None


def load_detector(run: Run, domain: str = "a") -> dict:
    c = _load_ckpt(run.detector_path(domain), run.cfg, "detector", run.n, ("detector",))
    return c.group("det")


def load_model(run: Run, name: str, seed: int) -> EB.TrainedModel:
    kind = "fusion" if name == "multi-frame" else "meta"
    sections = ("detector", "supervisor") + (("fusion",) if kind == "fusion" else ("meta",))
    c = _load_ckpt(run.model_path(name, seed), run.cfg, kind, run.n, sections)
    aux = c.group("fusion" if kind == "fusion" else "sup")
    return EB.TrainedModel(kind, c.group("det"), aux)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(run: Run, args) -> None:
    splits = args.splits or list(PL.TASK_SPLITS[:2]) + ["pretrain"]
    bad = [x for x in splits if x not in PL.TASK_SPLITS + PL.FRAME_SPLITS]
    if bad:
        raise CliError(EXIT_USAGE, f"unknown splits {bad}")
    for split in splits:
        items = PL.generate(run.cfg, split, seed=run.seed)
        wc = PL.split_world(run.cfg, split)
        blob = cache.dumps_frames(items, split, wc) if split in PL.FRAME_SPLITS else cache.dumps_tasks(items, split, wc)
        path = _mkdir(run.data_path(split))
        cache.save(path, blob)
        print(f"{split}: {len(items)} {'frames' if split in PL.FRAME_SPLITS else 'tasks'} -> {path}")


def cmd_pretrain(run: Run, args) -> None:
    domain = args.domain
    split = "pretrain" if domain == "a" else "pretrain_b"
    frames = _load_cache(run.data_path(split))
    cfg = run.cfg.section("pretrain", seed=run.seed)
    params, history = PL.pretrain_detector(frames, cfg)
    c = ck.pack("detector", {"det": params}, config=_echo(run.cfg, "detector", "pretrain", "world"), epoch=cfg.pretrain.epochs, info={"history": history, "domain": domain})
    path = _mkdir(run.detector_path(domain))
    ck.save(path, c)
    print(f"detector ({domain}) final loss {history[-1]:.4f} -> {path}")


def _needed(methods: Sequence[str]) -> list[str]:
    out = []
    for m in methods:
        c = EB.CHECKPOINT_OF[m]
        if c != "detector" and c not in out:
            out.append(c)
    return out


def _train(run: Run, names: Sequence[str], skip_existing: bool = False) -> None:
    det_params = load_detector(run)
    tasks = _load_cache(run.data_path("train"))
    trainer = PL.Trainer(run.cfg, det_params, tasks)
    for name in names:
        for s in run.cfg.eval.seeds:
            path = run.model_path(name, s)
            if skip_existing and path.exists():
                continue
            lp = _mkdir(run.log_path(name, s))
            model, state = trainer.train(name, s, log_path=lp if name != "multi-frame" else None)
            if model.kind == "fusion":
                c = ck.pack("fusion", {"det": model.det_params, "fusion": model.aux_params}, config=_echo(run.cfg, "detector", "supervisor", "fusion"), epoch=run.cfg.fusion.epochs, info={"method": name, "seed": s, "history": state})
            else:
                groups = {"det": model.det_params, "sup": model.aux_params}
                opts = {"phi": state.phi_opt, "rho": state.rho_opt}
                info = {"method": name, "seed": s}
                if state.table is not None:
                    groups["ifga"] = {"values": state.table.values, "visits": state.table.visits}
                c = ck.pack("meta", groups, opts, config=_echo(run.cfg, "detector", "supervisor", "meta"), epoch=state.epoch + 1, info=info)
            ck.save(_mkdir(path), c)
            print(f"{name} seed {s} -> {path}")


def cmd_train(run: Run, args) -> None:
    names = args.method or list(PL.TRAINABLE)
    bad = [m for m in names if m not in PL.TRAINABLE]
    if bad:
        raise CliError(EXIT_USAGE, f"not trainable: {bad}; choose from {sorted(PL.TRAINABLE)}")
    _train(run, names)


def _evaluate(run: Run, methods: Sequence[str], tasks, name: str, checkpoints=None) -> list[EB.ExperimentResult]:
    seeds = tuple(run.cfg.eval.seeds)
    setup = PL.setup_of(run.cfg)
    if checkpoints is None:
        checkpoints = {}
        for m in methods:
            c = EB.CHECKPOINT_OF[m]
            for s in seeds:
                if (c, s) in checkpoints:
                    continue
                checkpoints[(c, s)] = EB.TrainedModel("detector", load_detector(run)) if c == "detector" else load_model(run, c, s)
    results = []
    for m in methods:
        spec = EB.ExperimentSpec(m, run.n, seeds)
        r = EB.run_experiment(spec, checkpoints, tasks, setup)
        results.append(r)
        print(f"{m:>22s}  AP50 {r.mean():.4f} +- {r.std():.4f}  AP {r.mean('AP'):.4f}")
    csv_path, json_path = run.results(name)
    EB.write_csv(results, _mkdir(csv_path))
    EB.write_summary(results, json_path)
    return results


def cmd_eval(run: Run, args) -> None:
    methods = args.method or list(run.cfg.eval.methods)
    tasks = _load_cache(run.data_path("test"))
    _evaluate(run, methods, tasks, "eval")


def cmd_ablate(run: Run, args) -> None:
    methods = SUITES[args.suite]
    tasks = _load_cache(run.data_path("test"))
    _train(run, _needed(methods), skip_existing=True)
    _evaluate(run, methods, tasks, f"ablate-{args.suite}-n{run.n}")


def cmd_transfer(run: Run, args) -> None:
    tasks_b = _load_cache(run.data_path("test_b"))
    seeds = tuple(run.cfg.eval.seeds)
    det_a = load_detector(run, "a")
    ckpts = {("detector", s): EB.TrainedModel("detector", det_a) for s in seeds}
    ckpts.update({("interactron", s): load_model(run, "interactron", s) for s in seeds})
    det_b = load_detector(run, "b")
    res = EB.run_transfer(ckpts, det_b, tasks_b, PL.setup_of(run.cfg), seeds)
    rows = [
        dataclasses.replace(res.frozen, method="single-frame-a"),
        dataclasses.replace(res.adaptive, method="interactron-a"),
        dataclasses.replace(res.upper, method="single-frame-b"),
    ]
    csv_path, json_path = run.results("transfer")
    EB.write_csv(rows, _mkdir(csv_path))
    EB.write_summary(rows, json_path)
    for r in rows:
        print(f"{r.method:>16s}  AP50 {r.mean():.4f} +- {r.std():.4f}")


def cmd_inspect(run: Run, args) -> None:
    try:
        c = ck.load(args.checkpoint)
    except ck.CheckpointError as e:
        code = EXIT_MISSING_CHECKPOINT if e.reason == "missing" else EXIT_CORRUPT
        raise CliError(code, str(e)) from None
    summary = {
        "kind": c.kind,
        "epoch": c.epoch,
        "info": {k: v for k, v in c.info.items() if k != "history"},
        "optimizers": sorted(c.optimizers),
        "config": c.config,
        "tensors": {k: list(v.shape) for k, v in sorted(c.tensors.items())},
        "parameters": int(sum(v.size for k, v in c.tensors.items() if not k.startswith("opt."))),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file overriding the shipped defaults")
    common.add_argument("--seed", type=int, help="root seed (data generation and pre-training)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--frames", type=int, metavar="N", help="rollout length n (actions per rollout)")

    p = argparse.ArgumentParser(prog="adaptdet", description="Interactive test-time adaptive detection in a synthetic world.")
    subs = p.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-data", parents=[common], help="generate and cache dataset splits")
    g.add_argument("splits", nargs="*", metavar="SPLIT", help=f"any of {', '.join(PL.TASK_SPLITS + PL.FRAME_SPLITS)} (default: train test pretrain)")
    g.set_defaults(func=cmd_gen_data)

    t = subs.add_parser("pretrain", parents=[common], help="supervised detector pre-training")
    t.add_argument("--domain", choices=("a", "b"), default="a")
    t.set_defaults(func=cmd_pretrain)

    t = subs.add_parser("train", parents=[common], help="meta-train / fusion-train models")
    t.add_argument("--method", action="append", help="model to train (repeatable)")
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", parents=[common], help="evaluate methods on the test split")
    e.add_argument("--method", action="append", choices=EB.METHODS, help="method to evaluate (repeatable)")
    e.set_defaults(func=cmd_eval)

    a = subs.add_parser("ablate", parents=[common], help="train what is missing and evaluate a suite")
    a.add_argument("suite", nargs="?", default="full", choices=sorted(SUITES))
    a.set_defaults(func=cmd_ablate)

    x = subs.add_parser("transfer", parents=[common], help="domain-A models on appearance domain B")
    x.set_defaults(func=cmd_transfer)

    i = subs.add_parser("inspect", parents=[common], help="summarise a checkpoint")
    i.add_argument("checkpoint", type=Path)
    i.set_defaults(func=cmd_inspect)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out=str(args.out))
    if args.frames is not None:
        cfg = cfg.section("meta", n=args.frames)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        try:
            cfg = resolve_config(args)
        except (C.ConfigError, OSError, ValueError) as e:
            raise CliError(EXIT_CONFIG, f"configuration error: {e}") from None
        args.func(Run(cfg, Path(cfg.out)), args)
    except CliError as e:
        print(f"adaptdet: {e}", file=sys.stderr)
        return e.code
    except (EB.EvalError, PL.PipelineError, meta.MetaError) as e:
        print(f"adaptdet: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
