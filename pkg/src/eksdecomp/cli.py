"""Command-line entry point: ``eksdecomp <command> [flags]``.

Every command reads its inputs, writes to ``--out`` and never modifies an
input file. Exit codes: 0 success, 1 domain error, 2 usage error.

Any flag can also come from ``--config FILE`` holding ``key = value`` lines
(keys are flag names without the leading dashes, ``-`` or ``_`` both accepted,
``#`` starts a comment). Flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import data as data_mod
from .data import TRAIN, VAL, standard_specs
from .eks import FusionError, eks_cost_model
from .metrics import mig_score
from .model import (ArchConfig, DecompModel, ExpertModel, TeacherModel, export_expert, load_checkpoint,
                    read_checkpoint, save_expert, save_student, save_teacher)
from .serialize import FormatError
from .tensor import Tensor, no_grad
from .train import TrainConfig, TrainingError, evaluate, teacher_accuracy, train_decomposition, train_teacher
from .verify import FAULTS, verify_all

DOMAIN_ERRORS = (FormatError, FusionError, TrainingError, ValueError, IndexError, OSError, KeyError)
_defaults = TrainConfig()


class UsageError(Exception):
    pass


def _dump(path, text: str) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(text)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _side_path(out: str, suffix: str, given: str | None) -> str:
    return given if given else str(Path(out).with_suffix("")) + suffix


# -- commands ------------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    specs = standard_specs(a.tasks, a.classes, a.sigma, a.samples_per_class, a.correlated)
    ds = data_mod.generate(specs, a.seed, a.size)
    data_mod.save(ds, a.out)
    if a.csv:
        data_mod.export_index_csv(ds, a.csv)
    print(f"wrote {len(ds)} samples ({(ds.split == TRAIN).sum()} train / {(ds.split == VAL).sum()} val) to {a.out}")
    return 0


def _arch_for(ds) -> ArchConfig:
    return ArchConfig(image_size=ds.images.shape[-1], in_channels=ds.images.shape[1], task_classes=ds.task_classes)


def _train_cfg(a, epochs: int, train_experts: bool = True) -> TrainConfig:
    return TrainConfig(lr=a.lr, epochs=epochs, batch_size=a.batch_size, alpha=getattr(a, "alpha", _defaults.alpha),
                       beta=getattr(a, "beta", _defaults.beta), rank=getattr(a, "rank", _defaults.rank), seed=a.seed,
                       momentum=a.momentum, per_task_batches=getattr(a, "per_task_batches", False),
                       train_experts=train_experts)


def cmd_train_teacher(a) -> int:
    ds = data_mod.load(a.data)
    teacher = TeacherModel.init(_arch_for(ds), a.seed)
    lines = []
    train_teacher(teacher, ds, _train_cfg(a, a.epochs), log_fn=lambda r: lines.append(_json(r)))
    save_teacher(a.out, teacher)
    _dump(_side_path(a.out, ".metrics.jsonl", a.metrics), "".join(l + "\n" for l in lines))
    print(f"teacher val accuracy {teacher_accuracy(teacher, ds):.4f}; wrote {a.out}")
    return 0


def cmd_decompose(a) -> int:
    ds = data_mod.load(a.data)
    teacher = load_checkpoint(a.teacher)
    if not isinstance(teacher, TeacherModel):
        raise ValueError(f"{a.teacher} is not a teacher checkpoint")
    arch = _arch_for(ds)
    if teacher.arch.task_classes != arch.task_classes:
        raise ValueError(f"teacher tasks {teacher.arch.task_classes} do not match dataset {arch.task_classes}")
    arch = teacher.arch
    student = DecompModel.init(arch, a.rank, a.seed)
    lines = []
    report = train_decomposition(teacher, student, ds, _train_cfg(a, a.epochs, not a.shared_only),
                                 log_fn=lambda r: lines.append(_json(r)))
    save_student(a.out, student)
    _dump(_side_path(a.out, ".metrics.jsonl", a.metrics), "".join(l + "\n" for l in lines))
    summary = json.loads(report.to_json())
    summary.pop("epochs")
    _dump(_side_path(a.out, ".summary.json", a.summary), json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"avg accuracy {report.avg_acc:.4f} (init {report.init_avg_acc:.4f}); wrote {a.out}")
    return 0


def _load_student(path) -> DecompModel:
    m = load_checkpoint(path)
    if not isinstance(m, DecompModel):
        raise ValueError(f"{path} is not a student checkpoint")
    return m


def cmd_export(a) -> int:
    student = _load_student(a.ckpt)
    if a.format == "expert":
        save_expert(a.out, export_expert(student, a.task))
    else:
        for layer in student.eks_layers:
            if layer.fused_task is not None:
                layer.unfuse()
            layer.fuse(a.task)
        save_student(a.out, student)
    print(f"exported task {a.task} ({a.format}) to {a.out}")
    return 0


def cmd_switch(a) -> int:
    header, _ = read_checkpoint(a.ckpt)
    if header["KIND"] != "student":
        raise ValueError("switch needs a student checkpoint (experts are kept only there)")
    current = header["FUSED"]
    if current is None:
        raise FusionError("checkpoint is not fused; create a fused form with `export --format student` first")
    if a.from_task is not None and a.from_task != current:
        raise FusionError(f"--from {a.from_task} does not match the checkpoint, which is fused to task {current}")
    student = _load_student(a.ckpt)
    for layer in student.eks_layers:
        layer.switch(a.to)
    save_student(a.out, student)
    print(f"switched task {current} -> {a.to}; wrote {a.out}")
    return 0


def cmd_eval(a) -> int:
    ds = data_mod.load(a.data)
    model = load_checkpoint(a.ckpt)
    split = VAL if a.split == "val" else TRAIN
    if isinstance(model, DecompModel):
        if any(l.fused_task is not None for l in model.eks_layers):
            raise FusionError("evaluate the unfused student, or export an expert for single-task evaluation")
        ev = evaluate(model, ds, split)
        out = {"kind": "student", "per_task_acc": ev.per_task_acc, "avg_acc": ev.avg_acc}
    elif isinstance(model, ExpertModel):
        idx = ds.indices(split)
        idx = idx[ds.tasks[idx] == model.task]
        with no_grad():
            pred = model.logits(Tensor(ds.images[idx])).data.argmax(1)
        out = {"kind": "expert", "task": model.task, "acc": float((pred == ds.labels[idx]).mean())}
    else:
        out = {"kind": "teacher", "acc": teacher_accuracy(model, ds, split)}
    text = json.dumps(out, sort_keys=True, indent=2) + "\n"
    if a.out:
        _dump(a.out, text)
    print(text, end="")
    return 0


def cmd_verify(a) -> int:
    rep = verify_all(a.seed, a.fault)
    text = rep.to_text()
    if a.out:
        _dump(a.out, text)
    print(text, end="")
    return 0 if rep.passed else 1


def cmd_bench(a) -> int:
    cm = eks_cost_model(a.T, a.r, a.b, a.l, a.d)
    text = f"eks_cost={cm.eks_cost}\nflora_cost={cm.flora_cost}\neks_cheaper={str(cm.eks_cheaper).lower()}\n"
    if a.out:
        _dump(a.out, text)
    print(text, end="")
    return 0


def cmd_mig(a) -> int:
    ds = data_mod.load(a.data)
    student = _load_student(a.ckpt)
    ev = evaluate(student, ds, VAL if a.split == "val" else TRAIN)
    score = mig_score(ev.features, ev.tasks)
    text = f"mig={score:.6f}\n"
    if a.out:
        _dump(a.out, text)
    print(text, end="")
    return 0


# -- parser ------------------------------------------------------------------------------------

class _Help(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _train_flags(p, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs, help="training epochs")
    p.add_argument("--lr", type=float, default=_defaults.lr, help="initial SGD learning rate (cosine-annealed to 0)")
    p.add_argument("--batch-size", type=int, default=_defaults.batch_size, help="mixed-task batch size")
    p.add_argument("--momentum", type=float, default=_defaults.momentum, help="SGD momentum (0 = plain SGD)")
    p.add_argument("--metrics", help="per-epoch JSONL file (<out>.metrics.jsonl when omitted)")


def build_parser() -> argparse.ArgumentParser:
    fmt = _Help
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--config", help="key = value file supplying defaults for any flag")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="eksdecomp", description="Low-rank knowledge decomposition toolkit.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a seeded synthetic multi-task dataset")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--tasks", type=int, default=4, help="number of tasks")
    p.add_argument("--classes", type=int, default=4, help="classes per task")
    p.add_argument("--sigma", type=float, default=0.1, help="pixel noise standard deviation")
    p.add_argument("--samples-per-class", type=int, default=200, help="samples per class")
    p.add_argument("--size", type=int, default=16, help="image side length")
    p.add_argument("--correlated", action="store_true", help="all tasks share one generator family")
    p.add_argument("--csv", help="also write the sample index as CSV")

    p = add("train-teacher", cmd_train_teacher, "train the dense teacher with one global head")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="teacher checkpoint to write")
    _train_flags(p, 3)

    p = add("decompose", cmd_decompose, "distil a teacher into shared backbone + low-rank experts")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True, help="student checkpoint to write")
    _train_flags(p, 3)
    p.add_argument("--alpha", type=float, default=_defaults.alpha, help="softmax temperature")
    p.add_argument("--beta", type=float, default=_defaults.beta, help="weight of the transfer KL term")
    p.add_argument("--rank", type=int, default=_defaults.rank, help="expert rank r (clamped per layer)")
    p.add_argument("--per-task-batches", action="store_true", help="single-task batches instead of mixed ones")
    p.add_argument("--shared-only", action="store_true", help="freeze experts at zero (shared-backbone baseline)")
    p.add_argument("--summary", help="final summary JSON (<out>.summary.json when omitted)")

    p = add("export", cmd_export, "fuse one task into the shared weights for deployment")
    p.add_argument("--ckpt", required=True, help="student checkpoint")
    p.add_argument("--task", type=int, required=True, help="task to fuse")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--format", choices=("expert", "student"), default="expert",
                   help="expert: plain weights + one head; student: fused but switchable")

    p = add("switch", cmd_switch, "move a fused student checkpoint from one task to another")
    p.add_argument("--ckpt", required=True, help="fused student checkpoint")
    p.add_argument("--from", dest="from_task", type=int, default=None,
                   help="currently fused task (read from the checkpoint header when omitted)")
    p.add_argument("--to", type=int, required=True, help="task to switch to")
    p.add_argument("--out", required=True, help="checkpoint to write")

    p = add("eval", cmd_eval, "accuracy of a teacher, student or exported expert")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--split", choices=("val", "train"), default="val", help="which split to score")
    p.add_argument("--out", help="also write the JSON result here")

    p = add("verify", cmd_verify, "run the invariant suite and print one line per check")
    p.add_argument("--fault", choices=FAULTS, help="inject a known fault (the matching check must fail)")
    p.add_argument("--out", help="also write the report here")

    p = add("bench", cmd_bench, "evaluate the aggregation-vs-per-sample cost model")
    for flag, help_text in (("--T", "number of tasks"), ("--r", "expert rank"), ("--b", "batch size"),
                            ("--l", "sequence length / spatial positions"), ("--d", "feature dimension")):
        p.add_argument(flag, type=int, required=True, help=help_text)
    p.add_argument("--out", help="also write the result here")

    p = add("mig", cmd_mig, "mutual information gap of a student's task-routed features")
    p.add_argument("--ckpt", required=True, help="student checkpoint")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--split", choices=("val", "train"), default="val", help="which split to use")
    p.add_argument("--out", help="also write the score here")
    return parser


def _read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for n, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{n}: expected key = value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Turn config-file entries into subcommand defaults before the real parse."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if command is None:
        return
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    for key, raw in _read_config(known.config).items():
        if key not in actions:
            raise UsageError(f"{known.config}: unknown key {key!r} for {command}")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{known.config}: {key} expects a boolean")
            value = raw.lower() in ("true", "1", "yes")
        else:
            try:
                value = act.type(raw) if act.type else raw
            except ValueError:
                raise UsageError(f"{known.config}: bad value {raw!r} for {key}") from None
            if act.choices and value not in act.choices:
                raise UsageError(f"{known.config}: {key} must be one of {list(act.choices)}")
        sub.set_defaults(**{key: value})
        act.required = False


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
