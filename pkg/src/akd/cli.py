"""Command-line entry point: ``akd <command> [options]``.

Hyperparameters come from a JSON run config (``--config``) plus optional
``--set key.path=value`` overrides; flags carry only paths and seeds.
Every command writes ``manifest.json`` into its output directory with the
resolved config, the seed and SHA-256 hashes of the files it produced.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical abort,
4 freeze or stop-gradient violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from akd import __version__
from akd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from akd.config import RunConfig, _build
from akd.data import GeneratorConfig, InvocationType, generate, load_dataset, save_dataset, split_by_id
from akd.errors import (
    AKDError,
    ConfigError,
    DimensionError,
    FreezeViolationError,
    LifecycleError,
    NumericalError,
    ParseError,
    StopGradientError,
)
from akd.metrics import ScoredSet, det_curve, eer, per_invocation, write_det_csv
from akd.model import ModelBundle, score_dataset
from akd.pipelines import (
    distill_adaptive,
    distill_conventional,
    pretrain_teacher,
    train_baseline,
    train_teacher_adapters,
    write_metrics,
)

log = logging.getLogger("akd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CONTRACT = 0, 2, 3, 4


class UsageError(AKDError):
    pass


# -- helpers ---------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a run config (or the defaults) and apply ``key.path=value`` overrides."""
    d = RunConfig().to_dict() if path is None else RunConfig.load(path).to_dict()
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a config section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown field {parts[-1]!r}")
        node[parts[-1]] = _coerce(value)
    d.pop("losses", None)
    return _build(RunConfig, d, "config")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable ({exc})") from None
    return out


def write_manifest(out: Path, command: str, argv: list[str], config: RunConfig | None, seed: int | None,
                   artifacts: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "seed": seed,
        "config": config.to_dict() if config is not None else None,
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _datasets(cfg: RunConfig, data_dir: str | None):
    if data_dir is not None:
        train_path, val_path = Path(data_dir) / "train.txt", Path(data_dir) / "val.txt"
    elif cfg.data.train and cfg.data.val:
        train_path, val_path = Path(cfg.data.train), Path(cfg.data.val)
    else:
        raise UsageError("no datasets: pass --data DIR or set data.train / data.val in the config")
    for p in (train_path, val_path):
        if not p.is_file():
            raise UsageError(f"dataset file {p} does not exist")
    return load_dataset(train_path), load_dataset(val_path)


def _check_dims(bundle: ModelBundle, dataset, context: int) -> None:
    if not dataset:
        return
    d = dataset[0].frames.shape[1]
    need = bundle.encoder.config.input_dim
    if d * (2 * context + 1) != need:
        raise DimensionError(
            f"model expects {need}-dim spliced input ({need // (2 * context + 1)}-dim frames with context "
            f"{context}); data has {d}-dim frames ({d * (2 * context + 1)} after splicing)"
        )


def _teacher_from(path: str | None, cfg: RunConfig) -> ModelBundle | None:
    path = path or cfg.teacher_checkpoint
    if path is None:
        return None
    ckpt = load_checkpoint(path)
    if "teacher" not in ckpt.models:
        raise UsageError(f"{path} holds no teacher model")
    return ckpt.models["teacher"]


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    n = args.n if args.n is not None else cfg.data.n_train
    if n < 1:
        raise UsageError(f"--n must be at least 1, got {n}")
    seed = args.seed if args.seed is not None else cfg.generator.seed
    out = _out_dir(args.out)
    n_test = args.n_test if args.n_test is not None else cfg.data.n_test
    if n_test < 1:
        raise UsageError(f"--n-test must be at least 1, got {n_test}")
    gen = GeneratorConfig(**{**cfg.generator.__dict__, "seed": seed})
    train, val = split_by_id(generate(gen, n, prefix=f"s{seed}"), cfg.data.val_fraction)
    test = generate(GeneratorConfig(**{**gen.__dict__, "seed": seed + 1_000_003}), n_test, prefix=f"t{seed}")
    paths = []
    for name, ds in (("train", train), ("val", val), ("test", test)):
        p = out / f"{name}.txt"
        save_dataset(p, ds)
        paths.append(p)
    cfg = cfg.with_(generator=gen)
    write_manifest(out, "gen-data", args.argv, cfg, seed, paths,
                   {"counts": {"train": len(train), "val": len(val), "test": len(test)}})
    print(f"wrote {len(train)} train, {len(val)} val, {len(test)} test examples to {out}")
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.pretrain.seed = args.seed
    out = _out_dir(args.out)
    encoder = pretrain_teacher(cfg, log_fn=lambda s, l: s % 100 == 0 and log.info("pretrain step %d loss %.4f", s, l))
    path = out / "teacher_encoder.ckpt"
    save_checkpoint(path, {"teacher": ModelBundle(encoder, {})}, config=cfg.to_dict())
    write_manifest(out, "pretrain-teacher", args.argv, cfg, cfg.pretrain.seed, [path],
                   {"encoder_hash": encoder.fingerprint()})
    print(f"teacher encoder ({encoder.num_parameters()} parameters) saved to {path}")
    return EXIT_OK


def _run_pipeline(args, command: str) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if command == "distill" and cfg.pipeline == "baseline":
        raise UsageError("distill needs pipeline conventional_kd or adaptive_kd (use `train` for the baseline)")
    train, val = _datasets(cfg, args.data)
    out = _out_dir(args.out)
    teacher = _teacher_from(args.teacher, cfg)
    best = {"total": math.inf}
    artifacts: list[Path] = []

    def on_epoch(trainer, rec):
        # best-validation checkpoint tracks the student (or the teacher when training adapters alone)
        split = "val" if trainer.student is not None else "teacher_val"
        total = rec.row(split)["total"]
        if total < best["total"]:
            best["total"] = total
            trainer.save(out / "best.ckpt")

    resume = args.resume
    if cfg.pipeline == "baseline":
        result = train_baseline(cfg, train, val, resume=resume, on_epoch=on_epoch)
    elif cfg.pipeline == "conventional_kd":
        if teacher is None:
            raise UsageError("conventional_kd needs a teacher checkpoint (--teacher or teacher_checkpoint)")
        _check_dims(teacher, train, cfg.context)
        if not teacher.adapters:
            # step one: adapters on the frozen encoder, kept as the distillation teacher
            step1 = train_teacher_adapters(cfg, teacher.encoder, train, val)
            write_metrics(out / "teacher_metrics.csv", step1.log)
            step1.trainer.save(out / "teacher.ckpt")
            artifacts += [out / "teacher_metrics.csv", out / "teacher.ckpt"]
            teacher = step1.teacher
        result = distill_conventional(cfg, teacher, train, val, resume=resume, on_epoch=on_epoch)
    else:
        if teacher is None:
            log.info("no teacher checkpoint given; pretraining one from the config")
            encoder = pretrain_teacher(cfg)
        else:
            _check_dims(teacher, train, cfg.context)
            encoder = teacher.encoder
        # adaptive KD always starts from fresh adapters; only the encoder is taken from the checkpoint
        result = distill_adaptive(cfg, encoder, train, val, resume=resume, on_epoch=on_epoch)
    final = out / "final.ckpt"
    result.trainer.save(final)
    write_metrics(out / "metrics.csv", result.log)
    artifacts += [final, out / "metrics.csv"]
    if (out / "best.ckpt").exists():
        artifacts.append(out / "best.ckpt")
    write_manifest(out, command, args.argv, cfg, cfg.seed, artifacts)
    print(f"{cfg.pipeline}: {len(result.log)} epochs, checkpoints and metrics in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_pipeline(args, "train")


def cmd_distill(args) -> int:
    return _run_pipeline(args, "distill")


def _bundle_for_eval(ckpt: Checkpoint, role: str | None) -> tuple[str, ModelBundle]:
    if role is None:
        role = "student" if "student" in ckpt.models else "teacher"
    if role not in ckpt.models:
        raise UsageError(f"checkpoint has no {role!r} model (available: {sorted(ckpt.models)})")
    bundle = ckpt.models[role]
    if not bundle.adapters:
        raise UsageError(f"the {role} model in this checkpoint has no adapters to score with")
    return role, bundle


def format_report(rates: dict[str, tuple[float, float]]) -> str:
    return "".join(f"{inv} eer={rates[inv][0]:.6f} threshold={rates[inv][1]:.6f}\n" for inv in rates)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    role, bundle = _bundle_for_eval(ckpt, args.role)
    context = int(ckpt.config.get("context", 3))
    data = load_dataset(args.data)
    if not data:
        raise UsageError(f"{args.data} holds no examples")
    _check_dims(bundle, data, context)
    out = _out_dir(args.out)
    scores, labels, invs = score_dataset(bundle, data, context)
    sets = per_invocation(scores, labels, invs)
    rates = {inv.name: eer(s) for inv, s in sets.items()}
    paths = [out / "report.txt", out / "scores.csv"]
    (out / "report.txt").write_text(format_report(rates), encoding="utf-8")
    _write_scores(out / "scores.csv", data, scores)
    for inv, s in sets.items():
        p = out / f"det_{inv.name}.csv"
        write_det_csv(p, det_curve(s))
        paths.append(p)
    cfg = RunConfig.from_dict(ckpt.config) if ckpt.config else None
    write_manifest(out, "eval", args.argv, cfg, cfg.seed if cfg else None, paths,
                   {"checkpoint": {"path": str(args.checkpoint), "sha256": _sha256(Path(args.checkpoint)),
                                   "role": role},
                    "data": {"path": str(args.data), "sha256": _sha256(Path(args.data))}})
    sys.stdout.write(format_report(rates))
    return EXIT_OK


def _write_scores(path: Path, data, scores) -> None:
    lines = ["id,invocation,label,score"]
    lines += [f"{s.id},{s.invocation.name},{s.label},{score!r}" for s, score in zip(data, scores.tolist())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path) -> dict[InvocationType, ScoredSet]:
    rows: dict[InvocationType, tuple[list, list]] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "id,invocation,label,score":
        raise ParseError(f"{path}:1: expected header 'id,invocation,label,score'")
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"{path}:{n}: expected 4 fields, found {len(parts)}")
        try:
            inv = InvocationType[parts[1]]
            label, score = int(parts[2]), float(parts[3])
        except (KeyError, ValueError):
            raise ParseError(f"{path}:{n}: malformed row") from None
        s, l = rows.setdefault(inv, ([], []))
        s.append(score)
        l.append(label)
    return {inv: ScoredSet(np.array(s), np.array(l), inv) for inv, (s, l) in sorted(rows.items())}


def cmd_det(args) -> int:
    """DET curves from a scores file written by ``eval``."""
    sets = read_scores(args.scores)
    if args.invocation:
        sets = {inv: s for inv, s in sets.items() if inv.name == args.invocation}
        if not sets:
            raise UsageError(f"no scores for invocation {args.invocation}")
    out = _out_dir(args.out)
    paths = []
    for inv, s in sets.items():
        p = out / f"det_{inv.name}.csv"
        write_det_csv(p, det_curve(s))
        paths.append(p)
    write_manifest(out, "det", args.argv, None, None, paths,
                   {"scores": {"path": str(args.scores), "sha256": _sha256(Path(args.scores))}})
    print(f"wrote {len(paths)} DET curve(s) to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="akd", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"akd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON run config (defaults to the desk preset)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="override a config field, e.g. --set optim.lr=5e-4 (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="write train/val/test dataset files")
    common(p)
    p.add_argument("--n", type=int, help="examples in the train+val pool")
    p.add_argument("--n-test", type=int, help="examples in the test set")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="pretrain and freeze the teacher encoder")
    common(p)
    p.set_defaults(fn=cmd_pretrain_teacher)

    for name, fn, text in (("train", cmd_train, "run the configured pipeline"),
                           ("distill", cmd_distill, "run a distillation pipeline")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--data", help="directory holding train.txt and val.txt")
        p.add_argument("--teacher", help="teacher checkpoint (encoder only, or encoder plus adapters)")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="per-invocation EER report and DET curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--role", choices=("student", "teacher"), help="model to score (default: student if present)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("det", help="DET curves from an eval scores file")
    p.add_argument("--scores", required=True, help="scores.csv written by eval")
    p.add_argument("--out", required=True)
    p.add_argument("--invocation", choices=[i.name for i in InvocationType])
    p.set_defaults(fn=cmd_det)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (FreezeViolationError, StopGradientError, LifecycleError)):
        return EXIT_CONTRACT
    return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (AKDError, OSError) as exc:
        code = exit_code(exc)
        print(f"akd {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
