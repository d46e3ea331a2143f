"""Command-line harness: phases, manifest bookkeeping, and resume."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import assembly, train
from .config import PHASES, config_hash, load_config, model_specs, phase_config
from .data import Dataset, atomic_write, file_digest, gen_synthetic, load_checkpoint, load_idx, save_checkpoint
from .errors import (
    ConfigError,
    DataError,
    ManifestMismatch,
    MissingArtifact,
    NonFiniteLoss,
    NumericError,
)
from .gradcheck import gradient_suite

log = logging.getLogger("m2mkd")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
GRAD_TOL = 1e-5

# where each trained model lives, and which student spec it uses
MODELS = {
    "meta": ("meta/meta.ckpt", "meta"),
    "teacher": ("teacher/teacher.ckpt", "teacher"),
    "student": ("student/student.ckpt", "student"),
    "e2e_random": ("baselines/e2e_random/student.ckpt", "plain"),
    "kd": ("baselines/kd/student.ckpt", "plain"),
    "incubation": ("baselines/incubation/student.ckpt", "student"),
}


class PhaseFailure(Exception):
    def __init__(self, phase, path, exc):
        super().__init__(f"{phase}: {path}: {exc}")
        self.phase, self.path, self.exc = phase, path, exc


class Run:
    """One output directory: config, data, manifest, and phase execution."""

    def __init__(self, cfg, out, jobs=1, resume=False):
        self.cfg = cfg
        self.out = out
        self.jobs = jobs
        self.resume = resume
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]
        self.specs = model_specs(cfg)
        self.plain_student = model_specs(cfg, keep_stitch=False)["student"]
        self._data = None
        self.manifest = self._open_manifest()

    # ------------------------------------------------------------ paths and data

    def path(self, rel):
        return os.path.join(self.out, rel)

    @property
    def L(self):
        return self.cfg["model"]["L"]

    def data(self):
        if self._data is None:
            self._data = load_task(self.cfg)
        return self._data

    def load(self, rel, requires_grad=False):
        p = self.path(rel)
        if not os.path.exists(p):
            raise MissingArtifact(f"{rel} not found; run the phase that produces it first")
        return load_checkpoint(p, requires_grad)

    def spec_for(self, role):
        return self.plain_student if role == "plain" else self.specs[role]

    # ------------------------------------------------------------ manifest

    def _manifest_path(self):
        return self.path("manifest.json")

    def _open_manifest(self):
        fresh = {"config_hash": self.hash, "phases": {}}
        p = self._manifest_path()
        if not os.path.exists(p):
            return fresh
        with open(p) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ManifestMismatch(f"{p}: unreadable manifest: {exc}") from None
        if doc.get("config_hash") != self.hash:
            if self.resume:
                raise ManifestMismatch(
                    f"{p}: config hash {self.hash[:12]} differs from recorded {str(doc.get('config_hash'))[:12]}; "
                    "refusing to resume"
                )
            return fresh
        return doc

    def _save_manifest(self):
        blob = json.dumps(self.manifest, sort_keys=True, indent=1) + "\n"
        atomic_write(self._manifest_path(), blob.encode())

    def _digests(self, rels):
        return {rel: file_digest(self.path(rel)) for rel in rels}

    def _up_to_date(self, name, inputs):
        entry = self.manifest["phases"].get(name)
        if entry is None:
            return False
        try:
            if entry["inputs"] != self._digests(inputs):
                return False
            return entry["outputs"] == self._digests(entry["outputs"])
        except FileNotFoundError:
            return False

    def phase(self, name, inputs, fn):
        """Run ``fn`` (returning output paths) unless resumable and current."""
        for rel in inputs:
            if not os.path.exists(self.path(rel)):
                raise PhaseFailure(name, rel, MissingArtifact("missing input; run the phase that produces it first"))
        if self.resume and self._up_to_date(name, inputs):
            log.info("%s: up to date, skipped", name)
            return False
        before = self._digests(inputs)
        try:
            outputs = fn()
        except NonFiniteLoss as exc:
            rescue = f"{name}.last_good.ckpt"
            if exc.last_good is not None:
                save_checkpoint(exc.last_good, self.path(rescue))
            raise PhaseFailure(name, rescue, exc) from exc
        except PhaseFailure:
            raise
        except (ConfigError, DataError, NumericError, OSError) as exc:
            raise PhaseFailure(name, getattr(exc, "filename", None) or self.out, exc) from exc
        self.manifest["phases"][name] = {"inputs": before, "outputs": self._digests(outputs)}
        self._save_manifest()
        log.info("%s: wrote %d file(s)", name, len(outputs))
        return True

    # ------------------------------------------------------------ writers

    def save_tree(self, rel, tree, phase):
        save_checkpoint(tree, self.path(rel), {"phase": phase, "config_hash": self.hash, "seed": self.seed})
        return rel

    def save_metrics(self, rel, rows):
        train.write_metrics(rows, self.path(rel))
        return rel


def load_task(cfg):
    """(train, val) datasets named by the config."""
    model, data = cfg["model"], cfg["data"]
    C, d_in = model["num_classes"], model["d_in"]
    if data["source"] == "synthetic":
        return gen_synthetic(data["seed"], C, d_in, data["per_class"], data["difficulty"])
    keys = ("train_images", "train_labels", "val_images", "val_labels")
    missing = [k for k in keys if k not in data]
    if missing:
        raise ConfigError(f"data.source=idx needs {', '.join('data.' + k for k in missing)}")
    tr = load_idx(data["train_images"], data["train_labels"], C, "train")
    va = load_idx(data["val_images"], data["val_labels"], C, "val")
    if tr.d_in != d_in:
        raise ConfigError(f"model.d_in={d_in} but {data['train_images']} has {tr.d_in} features per sample")
    return tr, va


def load_fewshot_pool(cfg):
    model, fs = cfg["model"], cfg["data"]["fewshot"]
    if "images" in fs:
        if "labels" not in fs:
            raise ConfigError("data.fewshot.images needs data.fewshot.labels")
        return load_idx(fs["images"], fs["labels"], split="fewshot")
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("an idx data source needs data.fewshot.images/labels for few-shot episodes")
    tr, va = gen_synthetic(fs["seed"], fs["classes"], model["d_in"], fs["per_class"], fs["difficulty"])
    return Dataset(
        np.concatenate([tr.features, va.features]), np.concatenate([tr.labels, va.labels]), fs["classes"], "fewshot"
    )


# ---------------------------------------------------------------- phases


def pair_rel(i, root="m2mkd"):
    return f"{root}/pair_{i}/module.ckpt"


def do_pretrain_meta(run):
    def body():
        tr, va = run.data()
        params, result = train.train_meta(run.specs["meta"], tr, va, phase_config(run.cfg, "pretrain_meta"))
        return [run.save_tree("meta/meta.ckpt", params, "pretrain-meta"), run.save_metrics("meta/metrics.csv", result.rows)]

    return run.phase("pretrain-meta", [], body)


def do_incubate_teacher(run):
    def body():
        tr, va = run.data()
        meta = run.load("meta/meta.ckpt")
        modules, results = train.incubate_teacher(
            run.specs["meta"], meta, run.specs["teacher"], tr, va, phase_config(run.cfg, "incubate_teacher"), run.jobs
        )
        outs = [run.save_tree(f"teacher/incubate/module_{i}.ckpt", m, "incubate-teacher") for i, m in enumerate(modules)]
        outs.append(run.save_metrics("teacher/incubate/metrics.csv", [r for res in results for r in res.rows]))
        return outs

    return run.phase("incubate-teacher", ["meta/meta.ckpt"], body)


def do_finetune_teacher(run):
    inputs = [f"teacher/incubate/module_{i}.ckpt" for i in range(run.L)]

    def body():
        tr, va = run.data()
        modules = [run.load(rel) for rel in inputs]
        params, result = train.finetune_assembled(
            run.specs["teacher"], modules, tr, va, phase_config(run.cfg, "finetune_teacher")
        )
        return [
            run.save_tree("teacher/teacher.ckpt", params, "finetune-teacher"),
            run.save_metrics("teacher/metrics.csv", result.rows),
        ]

    return run.phase("finetune-teacher", inputs, body)


def _student_modules(run):
    return train.init_student_modules(run.plain_student, run.specs["meta"], run.seed)


def do_m2mkd(run):
    def body():
        tr, va = run.data()
        results = train.run_m2mkd(
            run.specs["meta"],
            run.load("meta/meta.ckpt"),
            run.specs["teacher"],
            run.load("teacher/teacher.ckpt"),
            run.plain_student,
            _student_modules(run),
            tr,
            va,
            phase_config(run.cfg, "m2mkd"),
            run.jobs,
        )
        outs = []
        for r in results:
            outs.append(run.save_tree(pair_rel(r.index), r.module, "m2mkd"))
            outs.append(run.save_metrics(f"m2mkd/pair_{r.index}/metrics.csv", r.fit.rows))
        return outs

    return run.phase("m2mkd", ["meta/meta.ckpt", "teacher/teacher.ckpt"], body)


def _random_student(run):
    return assembly.init_model(run.plain_student, train.derive_seed(run.seed, "student-init"))


def _transplant(run, name, root, out_dir):
    inputs = [pair_rel(i, root) for i in range(run.L)]

    def body():
        distilled = [run.load(rel) for rel in inputs]
        keep = run.cfg["distill"]["keep_stitch"]
        result = assembly.transplant(_random_student(run), run.plain_student, distilled, keep_stitch=keep)
        report = f"{out_dir}/transplant.txt"
        atomic_write(run.path(report), (result.report.summary() + "\n").encode())
        return [run.save_tree(f"{out_dir}/init.ckpt", result.params, name), report]

    return run.phase(name, inputs, body)


def do_transplant(run):
    return _transplant(run, "transplant", "m2mkd", "student")


def _e2e(run, name, spec, init_rel, out_dir, params_fn=None):
    inputs = [init_rel] if init_rel else []

    def body():
        tr, va = run.data()
        params = run.load(init_rel, True) if init_rel else params_fn()
        params, result = train.run_e2e(spec, params, tr, va, phase_config(run.cfg, "train_e2e"), phase=name)
        return [
            run.save_tree(f"{out_dir}/student.ckpt", params, name),
            run.save_metrics(f"{out_dir}/metrics.csv", result.rows),
        ]

    return run.phase(name, inputs, body)


def do_train_e2e(run, init="transplanted"):
    if init == "random":
        return _e2e(run, "train-e2e.random", run.plain_student, None, "baselines/e2e_random", lambda: _random_student(run))
    return _e2e(run, "train-e2e", run.specs["student"], "student/init.ckpt", "student")


def do_kd_baseline(run):
    def body():
        tr, va = run.data()
        params, result = train.run_kd_baseline(
            run.specs["teacher"],
            run.load("teacher/teacher.ckpt"),
            run.plain_student,
            _random_student(run),
            tr,
            va,
            phase_config(run.cfg, "kd_baseline"),
        )
        return [
            run.save_tree("baselines/kd/student.ckpt", params, "kd-baseline"),
            run.save_metrics("baselines/kd/metrics.csv", result.rows),
        ]

    return run.phase("kd-baseline", ["teacher/teacher.ckpt"], body)


def do_incubation_baseline(run):
    root = "baselines/incubation"

    def body():
        tr, va = run.data()
        modules, results = train.run_incubation_modules(
            run.specs["meta"],
            run.load("meta/meta.ckpt"),
            run.plain_student,
            _student_modules(run),
            tr,
            va,
            phase_config(run.cfg, "incubation_baseline"),
            run.jobs,
        )
        outs = []
        for i, (m, res) in enumerate(zip(modules, results)):
            outs.append(run.save_tree(pair_rel(i, root), m, "incubation-baseline"))
            outs.append(run.save_metrics(f"{root}/pair_{i}/metrics.csv", res.rows))
        return outs

    run.phase("incubation-baseline.modules", ["meta/meta.ckpt"], body)
    _transplant(run, "incubation-baseline.transplant", root, root)
    return _e2e(run, "incubation-baseline", run.specs["student"], f"{root}/init.ckpt", root)


def present_models(run, names=None):
    names = names or list(MODELS)
    return [n for n in names if os.path.exists(run.path(MODELS[n][0]))]


def do_eval(run):
    models = present_models(run)
    inputs = [MODELS[n][0] for n in models]

    def body():
        _, va = run.data()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "top1", "top5"])
        for name in models:
            rel, role = MODELS[name]
            spec = run.spec_for(role)
            k5 = min(5, spec.num_classes)
            acc = train.evaluate(train.model_fn(spec, run.load(rel)), va, ks=(1, k5))
            w.writerow([name, repr(acc[1]), repr(acc[k5])])
        atomic_write(run.path("eval/eval.csv"), buf.getvalue().encode())
        return ["eval/eval.csv"]

    return run.phase("eval", inputs, body)


def do_fewshot(run):
    fs = run.cfg["phases"]["fewshot"]
    models = present_models(run, ["teacher", "student", "incubation", "e2e_random"])
    inputs = [MODELS[n][0] for n in models]

    def body():
        pool = load_fewshot_pool(run.cfg)
        cfg = phase_config(run.cfg, "fewshot")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "shots", "ways", "seed", "top1"])
        for name in models:
            rel, role = MODELS[name]
            spec = run.spec_for(role)
            params = run.load(rel)
            for shots in fs["shots"]:
                res = train.fewshot_adapt(spec, params, shots, fs["ways"], pool, range(fs["seeds"]), cfg, fs["queries"])
                for seed, acc in res.accuracies:
                    w.writerow([name, shots, fs["ways"], seed, repr(acc)])
                w.writerow([name, shots, fs["ways"], "mean", repr(res.mean)])
                w.writerow([name, shots, fs["ways"], "stdev", repr(res.stdev)])
        atomic_write(run.path("fewshot/fewshot.csv"), buf.getvalue().encode())
        return ["fewshot/fewshot.csv"]

    if not models:
        raise PhaseFailure("fewshot", run.out, MissingArtifact("no trained model checkpoints to adapt"))
    return run.phase("fewshot", inputs, body)


def do_pipeline(run):
    """Every enabled phase in dependency order, then evaluation."""
    ph = run.cfg["phases"]
    steps = [
        ("pretrain_meta", do_pretrain_meta),
        ("incubate_teacher", do_incubate_teacher),
        ("finetune_teacher", do_finetune_teacher),
        ("m2mkd", do_m2mkd),
        ("m2mkd", do_transplant),
        ("train_e2e", do_train_e2e),
        ("kd_baseline", do_kd_baseline),
        ("incubation_baseline", do_incubation_baseline),
    ]
    for key, fn in steps:
        if ph[key]["enabled"]:
            fn(run)
    if ph["train_e2e"]["enabled"] and ph["train_e2e"].get("random_baseline", False):
        do_train_e2e(run, "random")
    do_eval(run)
    if ph["fewshot"]["enabled"]:
        do_fewshot(run)


# ---------------------------------------------------------------- stateless commands


def specsheet_text(cfg):
    specs = model_specs(cfg, keep_stitch=False)
    rows = assembly.specsheet_rows(specs["teacher"], specs["student"], specs["meta"])
    return assembly.format_specsheet(rows)


def grad_check_text(seeds=10):
    worst = {}
    for name, _, err in gradient_suite(range(seeds)):
        worst[name] = max(worst.get(name, 0.0), err)
    lines = [f"{'case':<28} {'max rel err':>12}  status"]
    for name, err in worst.items():
        lines.append(f"{name:<28} {err:>12.3e}  {'ok' if err <= GRAD_TOL else 'FAIL'}")
    return "\n".join(lines), max(worst.values())


# ---------------------------------------------------------------- entry point

COMMANDS = {
    "pretrain-meta": "train the small meta model",
    "incubate-teacher": "incubate each teacher module inside the meta model",
    "finetune-teacher": "assemble incubated teacher modules and fine-tune",
    "m2mkd": "distill every teaching pair (teacher module -> stitched student module)",
    "transplant": "load distilled modules into the full student",
    "train-e2e": "end-to-end training of the student",
    "kd-baseline": "whole-model logit distillation baseline",
    "incubation-baseline": "incubate student modules without a teacher, transplant, train",
    "eval": "top-1/top-5 of every trained model",
    "fewshot": "few-shot linear probes on frozen backbones",
    "specsheet": "parameter counts for the configured architectures",
    "grad-check": "finite-difference gradient suite",
    "pipeline": "every enabled phase, then eval",
}

RUNNERS = {
    "pretrain-meta": do_pretrain_meta,
    "incubate-teacher": do_incubate_teacher,
    "finetune-teacher": do_finetune_teacher,
    "m2mkd": do_m2mkd,
    "transplant": do_transplant,
    "kd-baseline": do_kd_baseline,
    "incubation-baseline": do_incubation_baseline,
    "eval": do_eval,
    "fewshot": do_fewshot,
    "pipeline": do_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="JSON run config (defaults: built-in toy task)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, metavar="N", help="base seed (overrides the config)")
    common.add_argument("--jobs", type=int, metavar="K", help="parallel teaching pairs / incubation jobs")
    common.add_argument("--resume", action="store_true", help="skip phases whose manifest entries are current")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="m2mkd", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "train-e2e":
            p.add_argument("--init", choices=("transplanted", "random"), default="transplanted")
        if name == "grad-check":
            p.add_argument("--seeds", type=int, default=10)
    return parser


def _exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None):
    args = build_parser().parse_args(argv)
    opt = vars(args)
    logging.basicConfig(level=logging.INFO if opt.get("verbose") else logging.WARNING, format="m2mkd: %(message)s")
    command = args.command
    config_path = opt.get("config")
    try:
        if command == "grad-check":
            text, worst = grad_check_text(args.seeds)
            print(text)
            if worst > GRAD_TOL:
                print(f"m2mkd: grad-check: max relative error {worst:.3e} exceeds {GRAD_TOL:g}", file=sys.stderr)
                return EXIT_NUMERIC
            return 0
        overrides = {}
        if "seed" in opt:
            overrides["seed"] = opt["seed"]
        if "out" in opt:
            overrides["output"] = {"dir": opt["out"]}
        cfg = load_config(config_path, overrides)
        if command == "specsheet":
            print(specsheet_text(cfg))
            return 0
        jobs = opt.get("jobs", 1)
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        run = Run(cfg, cfg["output"]["dir"], jobs, opt.get("resume", False))
        if command == "train-e2e":
            do_train_e2e(run, args.init)
        else:
            RUNNERS[command](run)
        return 0
    except PhaseFailure as exc:
        print(f"m2mkd: {exc}", file=sys.stderr)
        return _exit_code(exc.exc)
    except (ConfigError, DataError, NumericError) as exc:
        where = "" if config_path and config_path in str(exc) else f"{config_path or '<defaults>'}: "
        print(f"m2mkd: {command}: {where}{exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
