"""Batch front-end: one JSON config document drives every subcommand.

Commands compose through files in the configured output directory, so a
typical experiment is `synth`, `train`, `attack`, `robustify`, `report`
run in order against the same config.  Every command rewrites
manifest.json with the fully resolved configuration it ran under.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .attacks import AmlConfig
from .features import Normalizer, extract_matrix, profile, profile_names
from .flows import (
    ClassSpec,
    Dataset,
    SyntheticSpec,
    load_flows,
    save_flows,
    split,
    synthesize,
)
from .models import (
    ForestClassifier,
    MlpClassifier,
    accuracy,
    load_payload,
    save_model,
    weighted_f1,
)
from .robust import RetrainMode, RobustifyConfig, robustify, robustness_improvement, transferability
from .search import SearchConfig, attack_dataset, save_outcomes
from .smt import SolverConfig
from .threat import ThreatKind, ThreatModel


class ConfigError(Exception):
    """Carries every violation found in a config document."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


_CLASS_SPEC_KEYS = {
    "iat_mu", "iat_sigma", "small_length", "small_weight", "alternation", "n_packets",
}


class Experiment:
    """A fully resolved config document plus derived sub-configs."""

    def __init__(self, raw: dict, base_dir: Path):
        self.raw = raw
        self.base_dir = base_dir
        errors: list[str] = []

        self.out_dir = base_dir / raw.get("out_dir", "out")
        self.seed = raw.get("seed", 0)
        if not isinstance(self.seed, int):
            errors.append("seed must be an integer")
            self.seed = 0

        workers = raw.get("workers")
        if "ADVFLOW_WORKERS" in os.environ:
            try:
                workers = int(os.environ["ADVFLOW_WORKERS"])
            except ValueError:
                errors.append("ADVFLOW_WORKERS must be an integer")
        if workers is not None and (not isinstance(workers, int) or workers < 1):
            errors.append("workers must be a positive integer")
            workers = None
        self.workers = workers

        dataset = raw.get("dataset")
        self.dataset_path: Path | None = None
        self.synthetic: SyntheticSpec | None = None
        self.n_per_class = 0
        if not isinstance(dataset, dict):
            errors.append("dataset section is required (path or synthetic)")
        elif "path" in dataset:
            self.dataset_path = base_dir / dataset["path"]
            if not self.dataset_path.exists():
                errors.append(f"dataset path does not exist: {self.dataset_path}")
        elif "synthetic" in dataset:
            self._parse_synthetic(dataset["synthetic"], errors)
        else:
            errors.append("dataset needs either a 'path' or a 'synthetic' section")

        self.profile_name = raw.get("profile", "")
        if self.profile_name not in profile_names():
            errors.append(
                f"profile must be one of {', '.join(profile_names())}; "
                f"got {self.profile_name!r}"
            )

        model = raw.get("model", {})
        self.model_kind = model.get("kind", "")
        if self.model_kind not in ("mlp", "forest"):
            errors.append(f"model.kind must be mlp or forest; got {self.model_kind!r}")
        self.model_params = {k: v for k, v in model.items() if k != "kind"}

        split = raw.get("split", {})
        self.train_frac = split.get("train_frac", 0.75)
        if not 0.0 < self.train_frac < 1.0:
            errors.append("split.train_frac must be in (0, 1)")
        self.split_seed = split.get("seed", 0)

        threat = dict(raw.get("threat", {}))
        kind = threat.pop("kind", "")
        try:
            if kind == "end_host":
                self.threat = ThreatModel.end_host(**threat)
            elif kind == "in_path":
                self.threat = ThreatModel.in_path(**threat)
            else:
                raise ValueError(f"threat.kind must be end_host or in_path; got {kind!r}")
        except (TypeError, ValueError) as exc:
            errors.append(f"threat: {exc}")
            self.threat = ThreatModel.end_host()

        solver = dict(raw.get("solver", {}))
        if "ADVFLOW_SOLVER" in os.environ:
            solver["command"] = os.environ["ADVFLOW_SOLVER"]
        try:
            self.solver = SolverConfig(**solver)
        except (TypeError, ValueError) as exc:
            errors.append(f"solver: {exc}")
            self.solver = SolverConfig()
        if self.solver.command is not None:
            head = self.solver.argv()[0]
            if shutil.which(head) is None and not Path(head).exists():
                errors.append(f"solver executable not found: {head}")

        try:
            self.aml = AmlConfig(**raw.get("aml", {}))
        except (TypeError, ValueError) as exc:
            errors.append(f"aml: {exc}")
            self.aml = AmlConfig()

        search = dict(raw.get("search", {}))
        search.setdefault("seed", self.seed)
        if "chunk_schedule" in search:
            search["chunk_schedule"] = tuple(search["chunk_schedule"])
        try:
            self.search = SearchConfig(solver=self.solver, aml=self.aml, **search)
        except (TypeError, ValueError) as exc:
            errors.append(f"search: {exc}")
            self.search = SearchConfig(solver=self.solver, aml=self.aml)

        robust = dict(raw.get("robustify", {}))
        if "mode" in robust:
            try:
                robust["mode"] = RetrainMode(robust["mode"])
            except ValueError:
                errors.append(
                    f"robustify.mode must be fine_tune or from_scratch; got {robust['mode']!r}"
                )
                robust.pop("mode")
        robust.setdefault("train_epochs", self.model_params.get("epochs", 200))
        try:
            self.robustify = RobustifyConfig(search=self.search, **robust)
        except (TypeError, ValueError) as exc:
            errors.append(f"robustify: {exc}")
            self.robustify = RobustifyConfig(search=self.search)

        if errors:
            raise ConfigError(errors)

    def _parse_synthetic(self, section, errors: list[str]) -> None:
        if not isinstance(section, dict) or not isinstance(section.get("classes"), dict):
            errors.append("dataset.synthetic needs a 'classes' mapping")
            return
        self.n_per_class = section.get("n_per_class", 0)
        if not isinstance(self.n_per_class, int) or self.n_per_class < 1:
            errors.append("dataset.synthetic.n_per_class must be a positive integer")
        classes = {}
        for label, body in section["classes"].items():
            if not isinstance(body, dict):
                errors.append(f"synthetic class {label!r} must be an object")
                continue
            unknown = set(body) - _CLASS_SPEC_KEYS
            if unknown:
                errors.append(
                    f"synthetic class {label!r} has unknown keys: {', '.join(sorted(unknown))}"
                )
                continue
            params = dict(body)
            for key in ("small_length", "n_packets"):
                if key in params:
                    params[key] = tuple(params[key])
            try:
                classes[label] = ClassSpec(**params)
            except (TypeError, ValueError) as exc:
                errors.append(f"synthetic class {label!r}: {exc}")
        if len(classes) < 2:
            errors.append("dataset.synthetic needs at least two valid classes")
            return
        try:
            self.synthetic = SyntheticSpec(classes=classes, seed=section.get("seed", 0))
        except ValueError as exc:
            errors.append(f"dataset.synthetic: {exc}")

    # ---- derived artifacts -------------------------------------------

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_manifest(self, command: str) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"command": command, "seed": self.seed, "config": self.raw}
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")

    def dataset(self) -> Dataset:
        if self.dataset_path is not None:
            return load_flows(self.dataset_path)
        stored = self.path("dataset.jsonl")
        if stored.exists():
            return load_flows(stored)
        return synthesize(self.synthetic, self.n_per_class)

    def split(self, ds: Dataset) -> tuple[Dataset, Dataset]:
        return split(ds, self.train_frac, self.split_seed)

    def train_model(self, kind: str, train: Dataset, norm: Normalizer, classes: list[str]):
        prof = profile(self.profile_name)
        Xn = norm.transform(extract_matrix(train.flows, prof))
        y = np.array([classes.index(f.label) for f in train.flows], dtype=np.int64)
        params = dict(self.model_params)
        seed = params.pop("seed", self.seed)
        if kind == "mlp":
            allowed = {k: v for k, v in params.items() if k in ("epochs", "lr", "batch_size")}
            model = MlpClassifier(Xn.shape[1], len(classes), seed=seed)
            model.fit(Xn, y, seed=seed, **allowed)
        else:
            allowed = {
                k: v for k, v in params.items()
                if k in ("n_trees", "max_depth", "min_samples_split", "bootstrap")
            }
            model = ForestClassifier(Xn.shape[1], len(classes))
            model.fit(Xn, y, seed=seed, **allowed)
        return model


def _load_experiment(config_path: str) -> Experiment:
    path = Path(config_path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    return Experiment(raw, path.parent)


def _classes_of(exp: Experiment, ds: Dataset) -> list[str]:
    return sorted({f.label for f in ds.flows})


def cmd_synth(exp: Experiment) -> int:
    if exp.synthetic is None:
        print("synth needs a dataset.synthetic section", file=sys.stderr)
        return 2
    ds = synthesize(exp.synthetic, exp.n_per_class)
    exp.write_manifest("synth")
    save_flows(ds, exp.path("dataset.jsonl"))
    print(f"wrote {len(ds.flows)} flows to {exp.path('dataset.jsonl')}")
    return 0


def cmd_train(exp: Experiment) -> int:
    ds = exp.dataset()
    train, test = exp.split(ds)
    classes = _classes_of(exp, ds)
    prof = profile(exp.profile_name)
    norm = Normalizer.fit(extract_matrix(train.flows, prof), prof)
    model = exp.train_model(exp.model_kind, train, norm, classes)

    Xn_tr = norm.transform(extract_matrix(train.flows, prof))
    y_tr = np.array([classes.index(f.label) for f in train.flows])
    Xn_te = norm.transform(extract_matrix(test.flows, prof))
    y_te = np.array([classes.index(f.label) for f in test.flows])
    metrics = {
        "train_accuracy": accuracy(y_tr, model.predict(Xn_tr)),
        "test_accuracy": accuracy(y_te, model.predict(Xn_te)),
        "test_weighted_f1": weighted_f1(y_te, model.predict(Xn_te), len(classes)),
        "n_train": len(train.flows),
        "n_test": len(test.flows),
    }
    exp.write_manifest("train")
    save_model(exp.path("model.json"), model, classes, exp.profile_name, norm)
    with open(exp.path("metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(
        f"trained {exp.model_kind} on {metrics['n_train']} flows; "
        f"test accuracy {metrics['test_accuracy']:.3f}"
    )
    return 0


def _asr_csv(report) -> str:
    lines = ["threat,class,n_attacked,n_success,asr"]
    for label in sorted(report.per_class):
        row = report.per_class[label]
        rate = row["success"] / row["attacked"] if row["attacked"] else 0.0
        lines.append(f"{report.threat},{label},{row['attacked']},{row['success']},{rate:.6f}")
    lines.append(
        f"{report.threat},all,{report.n_attacked},{report.n_success},{report.asr:.6f}"
    )
    return "\n".join(lines) + "\n"


def cmd_attack(exp: Experiment) -> int:
    model_path = exp.path("model.json")
    if not model_path.exists():
        print(f"no trained model at {model_path}; run train first", file=sys.stderr)
        return 2
    payload = load_payload(model_path)
    ds = exp.dataset()
    _, test = exp.split(ds)
    report = attack_dataset(test, payload, exp.threat, exp.search, workers=exp.workers)
    exp.write_manifest("attack")
    save_outcomes(report, exp.path("outcomes.jsonl"))
    with open(exp.path("asr_report.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    with open(exp.path("asr_report.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_asr_csv(report))
    print(
        f"attacked {report.n_attacked}/{report.n_flows} flows under {report.threat}; "
        f"asr {report.asr:.3f}"
    )
    return 0


def cmd_robustify(exp: Experiment) -> int:
    model_path = exp.path("model.json")
    if not model_path.exists():
        print(f"no trained model at {model_path}; run train first", file=sys.stderr)
        return 2
    payload = load_payload(model_path)
    ds = exp.dataset()
    train, test = exp.split(ds)

    def checkpoint(index: int, model) -> None:
        save_model(
            exp.path(f"model_round_{index}.json"),
            model, payload["classes"], payload["profile"], payload["normalizer"],
        )

    exp.write_manifest("robustify")
    hardened, log = robustify(
        payload["model"], train, test, payload, exp.threat, exp.robustify,
        seed=exp.seed, workers=exp.workers, checkpoint=checkpoint,
    )
    save_model(
        exp.path("robust_model.json"),
        hardened, payload["classes"], payload["profile"], payload["normalizer"],
    )
    with open(exp.path("round_log.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(log.to_json())
        fh.write("\n")
    final = log.rounds[-1]
    print(
        f"robustified over {len(log.rounds)} round(s); "
        f"asr {log.initial_asr:.3f} -> {final.asr:.3f}, "
        f"accuracy {log.initial_accuracy:.3f} -> {final.accuracy:.3f}"
    )
    return 0


def cmd_transfer(exp: Experiment) -> int:
    ds = exp.dataset()
    train, test = exp.split(ds)
    classes = _classes_of(exp, ds)
    prof = profile(exp.profile_name)
    norm = Normalizer.fit(extract_matrix(train.flows, prof), prof)
    pairs = []
    for kind in ("mlp", "forest"):
        model = exp.train_model(kind, train, norm, classes)
        pairs.append((kind, {
            "model": model,
            "classes": classes,
            "profile": exp.profile_name,
            "normalizer": norm,
        }))
    matrix = transferability(pairs, test, exp.threat, exp.search, workers=exp.workers)
    exp.write_manifest("transfer")
    with open(exp.path("transfer.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(matrix.to_csv())
    print(f"wrote transfer grid for {', '.join(matrix.names)} to {exp.path('transfer.csv')}")
    return 0


def cmd_report(exp: Experiment) -> int:
    asr_path = exp.path("asr_report.json")
    log_path = exp.path("round_log.json")
    if not asr_path.exists() and not log_path.exists():
        print("nothing to report: run attack or robustify first", file=sys.stderr)
        return 2
    lines = ["# Experiment summary", ""]
    if asr_path.exists():
        raw = json.loads(asr_path.read_text(encoding="utf-8"))
        lines += [
            f"- Threat model: {raw['threat']}",
            f"- Attacked flows: {raw['n_attacked']} of {raw['n_flows']}",
            f"- Attack success rate: {raw['asr']:.4f}",
        ]
        for label in sorted(raw["per_class"]):
            row = raw["per_class"][label]
            lines.append(
                f"  - class {label}: {row['success']}/{row['attacked']} succeeded"
            )
    if log_path.exists():
        raw = json.loads(log_path.read_text(encoding="utf-8"))
        final = raw["rounds"][-1] if raw["rounds"] else None
        lines += ["", "## Robustification", ""]
        lines.append(f"- Vanilla ASR: {raw['initial_asr']:.4f}")
        if final is not None:
            lines.append(f"- Robust ASR: {final['asr']:.4f}")
            if raw["initial_asr"] > 0:
                improvement = robustness_improvement(raw["initial_asr"], final["asr"])
                lines.append(f"- Robustness improvement: {improvement:.4f}")
            lines.append(
                f"- Clean accuracy: {raw['initial_accuracy']:.4f} -> {final['accuracy']:.4f}"
            )
    exp.write_manifest("report")
    with open(exp.path("summary.md"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {exp.path('summary.md')}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "attack": cmd_attack,
    "robustify": cmd_robustify,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="advflow",
        description="Adversarial flow generation and robustification experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("config", help="path to the experiment JSON document")
    args = parser.parse_args(argv)

    try:
        exp = _load_experiment(args.config)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1

    try:
        return _COMMANDS[args.command](exp)
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
