"""Command-line pipeline: generate, assign labels, train, relabel, run, audit, report.

Every command takes ``--config FILE`` (JSON) plus ``--key value`` flags that
mirror the config keys; explicit flags win over the file, which wins over
built-in defaults. Outputs go to ``--out`` (default: ``$RELABELKIT_OUT`` or
``./relabelkit_out``).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import MISSING, asdict, fields, replace
from pathlib import Path

import numpy as np

from .dataset import (DEFAULT_SCENARIOS, DatasetError, assign_labels, average_score,
                      feature_matrix, get_scenario, label_distribution, load_dataset,
                      load_scenarios, save_dataset, verified_labels)
from .embednet import NetConfig, NetParams, TrainConfig, fine_tune, train
from .evaluation import ExperimentSpec, render_report, run_experiment, scenario_sweep
from .relabel import (RelabelConfig, apply_relabeler, crossfit_relabel, histogram_to_json,
                      outcomes_from_csv, outcomes_to_csv, relabel_statistics,
                      relabeled_labels, select_queries, train_relabeler)
from .siamese import ContrastiveConfig, pairs_to_csv, sample_pairs, train_siamese
from .synth import GeneratorConfig, generate, load_truth, oracle_accuracy, truth_to_csv

log = logging.getLogger("relabelkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "RELABELKIT_OUT"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {p}: expected a JSON object")
    return data


def _parse_value(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        try:
            return float(text) if ("." in text or "e" in text.lower()) else int(text)
        except ValueError:
            return text
    return text


def _add_keys(parser, *classes, skip=()):
    """Add a ``--key`` flag for every dataclass field (parsed later)."""
    seen = set(skip)
    for cls in classes:
        for f in fields(cls):
            if f.name in seen:
                continue
            seen.add(f.name)
            parser.add_argument(f"--{f.name}", dest=f"key_{f.name}", default=None,
                                metavar="VALUE")


def _build(cls, config: dict, args, **fixed):
    """Instantiate ``cls`` from defaults < config dict < explicit flags."""
    kwargs = {}
    proto = {f.name: f for f in fields(cls)}
    for name, f in proto.items():
        if name in fixed:
            continue
        flag = getattr(args, f"key_{name}", None)
        if flag is not None:
            default = None if f.default is MISSING else f.default
            kwargs[name] = _parse_value(flag, default)
        elif name in config:
            value = config[name]
            kwargs[name] = tuple(value) if isinstance(value, list) else value
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "relabelkit_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path, what: str):
    if path is None:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file not found: {p}")
    return load_dataset(p)


def _scenario_table(args, config):
    path = getattr(args, "scenarios", None) or config.get("scenarios")
    if path:
        try:
            return load_scenarios(path)
        except (OSError, ValueError) as exc:
            raise UsageError(f"scenario table {path}: {exc}") from None
    return DEFAULT_SCENARIOS


def _scenario(name, table):
    try:
        return get_scenario(name, table)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _seed(args, config, default=0) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(config.get("seed", default))


class _Outputs:
    """Tracks files written by one command so a failure can remove them."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[Path] = []

    def write(self, name: str, text: str) -> Path:
        path = self.root / name
        path.write_text(text, encoding="utf-8")
        self.written.append(path)
        return path

    def cleanup(self):
        for p in self.written:
            p.unlink(missing_ok=True)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = _read_config(args.config)
    gen_cfg = _build(GeneratorConfig, config, args)
    if args.seed is not None:
        gen_cfg = replace(gen_cfg, seed=int(args.seed))
    data = generate(gen_cfg)
    out = _Outputs(_out_dir(args))
    header = f"seed={gen_cfg.seed}"
    try:
        save_dataset(data.noisy, out.root / "noisy.csv", header_comment=header)
        out.written.append(out.root / "noisy.csv")
        save_dataset(data.reference, out.root / "reference.csv", header_comment=header)
        out.written.append(out.root / "reference.csv")
        out.write("ground_truth.csv", truth_to_csv(data.truth, header))
        out.write("generator_config.json", _json(gen_cfg.to_dict()))
    except Exception:
        out.cleanup()
        raise
    print(f"wrote {len(data.noisy)} noisy and {len(data.reference)} reference records "
          f"to {out.root}")
    return EXIT_OK


def cmd_assign_labels(args) -> int:
    config = _read_config(args.config)
    records = _load(args.data or config.get("data"), "data")
    table = _scenario_table(args, config)
    scenario = _scenario(args.scenario or config.get("scenario", "A"), table)
    assignment = assign_labels(records, scenario)
    lines = [f"# scenario={scenario.name}", "id,label,avg_score"]
    for r in records:
        label = assignment.labels.get(r.id)
        lines.append(f"{r.id},{'' if label is None else label},{average_score(r)!r}")
    out = _Outputs(_out_dir(args))
    out.write(args.output or "labels.csv", "\n".join(lines) + "\n")
    nb, nm = label_distribution(assignment.labels)
    print(f"scenario {scenario.name}: {nb} benign, {nm} malignant, "
          f"{len(assignment.excluded)} excluded")
    return EXIT_OK


def _read_label_file(path) -> dict[str, int]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"labels file not found: {p}")
    out = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or line.startswith("id,") or not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise DataError(f"labels file {p}: malformed line {line!r}")
        if parts[1] != "":
            out[parts[0]] = int(parts[1])
    return out


def _net_and_train(args, config, seed, head, input_dim):
    net = _build(NetConfig, config, args, input_dim=input_dim, head=head, seed=seed)
    train_cfg = _build(TrainConfig, config, args, seed=seed)
    return net, train_cfg


def cmd_train_classifier(args) -> int:
    config = _read_config(args.config)
    seed = _seed(args, config)
    records = _load(args.data or config.get("data"), "data")
    if args.labels:
        labels = _read_label_file(args.labels)
        records = [r for r in records if r.id in labels]
    else:
        labels = verified_labels(records)
    if not records:
        raise DataError("no labelled records to train on")
    X = feature_matrix(records)
    y = np.array([labels[r.id] for r in records])
    net, train_cfg = _net_and_train(args, config, seed, "sigmoid_classifier", X.shape[1])
    if args.init:
        params, tlog = fine_tune(NetParams.load(args.init), train_cfg, X, y)
    else:
        params, tlog = train(train_cfg, net, X, y)
    for w in tlog.warnings:
        log.warning(w)
    out = _Outputs(_out_dir(args))
    name = args.output or "classifier"
    params.save(out.root / f"{name}.json", extra={"seed": seed, "train": asdict(train_cfg)})
    out.written.append(out.root / f"{name}.json")
    out.write(f"{name}_log.jsonl", _log_lines(tlog, seed))
    print(f"trained classifier on {len(records)} records; best epoch {tlog.best_epoch}")
    return EXIT_OK


def _log_lines(tlog, seed) -> str:
    return "".join(json.dumps({**r, "seed": seed}, sort_keys=True) + "\n" for r in tlog.records)


def cmd_train_siamese(args) -> int:
    config = _read_config(args.config)
    seed = _seed(args, config)
    refs = _load(args.data or config.get("data"), "data")
    net, train_cfg = _net_and_train(args, config, seed, "embedding", refs[0].dim)
    pair_cfg = _build(ContrastiveConfig, config, args, seed=seed)
    params, tlog = train_siamese(net, refs, train_cfg, pair_cfg)
    out = _Outputs(_out_dir(args))
    name = args.output or "siamese"
    params.save(out.root / f"{name}.json",
                extra={"seed": seed, "train": asdict(train_cfg), "pairs": asdict(pair_cfg)})
    out.written.append(out.root / f"{name}.json")
    out.write(f"{name}_log.jsonl", _log_lines(tlog, seed))
    audit_pairs = sample_pairs(verified_labels(refs), pair_cfg)
    out.write(f"{name}_pairs.csv", f"# seed={seed}\n" + pairs_to_csv(audit_pairs))
    print(f"trained siamese comparator on {len(refs)} references; best epoch {tlog.best_epoch}")
    return EXIT_OK


def cmd_relabel(args) -> int:
    config = _read_config(args.config)
    seed = _seed(args, config)
    queries_all = _load(args.queries or config.get("queries"), "queries")
    refs = _load(args.references or config.get("references"), "references")
    table = _scenario_table(args, config)
    scenario = _scenario(args.scenario or config.get("scenario", "A"), table)
    cfg = _build(RelabelConfig, config, args)
    queries, original = select_queries(queries_all, scenario, cfg.include_uncertain)
    head = "embedding" if cfg.strategy == "comparator" else "sigmoid_classifier"
    net, train_cfg = _net_and_train(args, config, seed, head, refs[0].dim)
    pair_cfg = _build(ContrastiveConfig, config, args, seed=seed)

    crossfit = args.crossfit or config.get("crossfit")
    if args.params:
        machine = NetParams.load(args.params)
        outcomes = apply_relabeler(machine, queries, refs, cfg, original)
    elif crossfit:
        outcomes = crossfit_relabel(refs, queries, int(crossfit), cfg, net_cfg=net,
                                    train_cfg=train_cfg, pair_cfg=pair_cfg,
                                    original_labels=original, seed=seed)
    else:
        machine = train_relabeler(refs, cfg, net_cfg=net, train_cfg=train_cfg,
                                  pair_cfg=pair_cfg)
        outcomes = apply_relabeler(machine, queries, refs, cfg, original)

    out = _Outputs(_out_dir(args))
    header = f"seed={seed} scenario={scenario.name} strategy={cfg.strategy} mode={cfg.mode}"
    try:
        out.write("outcomes.csv", outcomes_to_csv(outcomes, header))
        out.write("histogram.json", histogram_to_json(relabel_statistics(outcomes),
                                                      {"seed": seed}) + "\n")
    except Exception:
        out.cleanup()
        raise
    nb, nm = label_distribution(relabeled_labels(outcomes))
    discarded = sum(1 for o in outcomes if o.new_label is None)
    print(f"relabeled {len(outcomes)} queries: {nb} benign, {nm} malignant, "
          f"{discarded} discarded")
    return EXIT_OK


_PATH_KEYS = ("noisy", "reference", "scenarios", "sweep")


def cmd_run(args) -> int:
    raw = _read_config(args.spec)
    spec_dict = {k: v for k, v in raw.items() if k not in _PATH_KEYS}
    if args.seeds:
        spec_dict["seeds"] = [int(s) for s in args.seeds.split(",")]
    table = _scenario_table(args, raw)
    sweep = raw.get("sweep")
    if sweep and spec_dict.get("scenario") is None:
        spec_dict["scenario"] = sweep[0]  # validation only; the sweep sets each one
    for name in (sweep or [spec_dict.get("scenario")]):
        if name is not None:
            _scenario(name, table)
    try:
        spec = ExperimentSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment spec: {exc}") from None

    base = Path(args.spec).parent
    noisy = _load(base / raw["noisy"], "noisy") if raw.get("noisy") else []
    reference = _load(base / raw["reference"], "reference") if raw.get("reference") else []
    if spec.case != "case1_scenario_train" and not reference:
        raise UsageError(f"{spec.case} needs a 'reference' dataset path in the spec")
    if spec.case != "case2_reference_cv" and not noisy:
        raise UsageError(f"{spec.case} needs a 'noisy' dataset path in the spec")

    out = _Outputs(_out_dir(args))
    try:
        if sweep:
            kwargs = {k: v for k, v in asdict_spec(spec).items()
                      if k not in ("case", "scenario", "seeds")}
            results = scenario_sweep(noisy, reference, sweep, spec.seeds, case=spec.case,
                                     scenario_table=table, **kwargs)
        else:
            results = [run_experiment(spec, noisy, reference, table)]
        header = f"<!-- seeds={','.join(str(s) for s in spec.seeds)} -->\n"
        out.write("report.json", render_report(results, "json"))
        out.write("report.md", header + render_report(results, "markdown"))
        first = results[0]
        if spec.case == "relabel_retrain" and first.outcomes:
            seed = spec.seeds[0]
            outcomes = first.outcomes[seed]
            out.write("outcomes.csv", outcomes_to_csv(outcomes, f"seed={seed} fold=0"))
            out.write("histogram.json", histogram_to_json(relabel_statistics(outcomes),
                                                          {"seed": seed}) + "\n")
    except BaseException:
        out.cleanup()
        raise
    for r in results:
        agg = r.aggregate()["micro"]
        print(f"{r.spec.label}: " + ", ".join(
            f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in agg.items()))
    return EXIT_OK


def asdict_spec(spec: ExperimentSpec) -> dict:
    return {f.name: getattr(spec, f.name) for f in fields(spec)}


def cmd_audit(args) -> int:
    for p, what in ((args.outcomes, "outcomes"), (args.truth, "truth")):
        if not Path(p).is_file():
            raise DataError(f"{what} file not found: {p}")
    outcomes = outcomes_from_csv(args.outcomes)
    truth = load_truth(args.truth)
    ids = {o.id for o in outcomes}
    if not ids & set(truth):
        raise DataError("outcomes and ground truth share no ids")
    missing = sorted(ids - set(truth))
    if missing:
        raise DataError(f"ids missing from ground truth: {missing[:5]}")
    new = relabeled_labels(outcomes)
    orig = {o.id: o.original_label for o in outcomes if o.original_label is not None}
    nb, nm = label_distribution(new)
    report = {
        "n_outcomes": len(outcomes),
        "n_relabeled": len(new),
        "n_discarded": len(outcomes) - len(new),
        "relabel_accuracy": oracle_accuracy(new, truth) if new else None,
        "original_label_accuracy": oracle_accuracy(orig, truth) if orig else None,
        "relabel_accuracy_on_originally_labeled":
            oracle_accuracy({i: new[i] for i in orig if i in new}, truth)
            if any(i in new for i in orig) else None,
        "count_benign": nb,
        "count_malignant": nm,
        "imbalance_ratio": (max(nb, nm) / min(nb, nm)) if min(nb, nm) > 0 else None,
    }
    out = _Outputs(_out_dir(args))
    out.write(args.output or "audit.json", _json(report))
    for k in sorted(report):
        print(f"{k}: {report[k]}")
    return EXIT_OK


def cmd_report(args) -> int:
    docs = []
    for path in args.inputs:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"report file not found: {p}")
        data = json.loads(p.read_text(encoding="utf-8"))
        docs.extend(data if isinstance(data, list) else [data])
    text = render_report(docs, args.format)
    if args.out:
        out = _Outputs(_out_dir(args))
        out.write(args.output or f"report.{'md' if args.format == 'markdown' else 'json'}",
                  text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relabelkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config; explicit flags override it")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./relabelkit_out)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write a synthetic noisy/reference dataset pair")
    common(p, seed=False)
    p.add_argument("--seed", type=int)
    _add_keys(p, GeneratorConfig, skip=("seed",))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("assign-labels", help="map average rater scores through a scenario")
    common(p, seed=False)
    p.add_argument("--data")
    p.add_argument("--scenario")
    p.add_argument("--scenarios", help="scenario table JSON")
    p.add_argument("--output", help="file name inside --out (default labels.csv)")
    p.set_defaults(func=cmd_assign_labels)

    p = sub.add_parser("train-classifier", help="train (or fine-tune) a sigmoid classifier")
    common(p)
    p.add_argument("--data")
    p.add_argument("--labels", help="id,label CSV (e.g. from assign-labels)")
    p.add_argument("--init", help="classifier JSON to fine-tune instead of training afresh")
    p.add_argument("--output", help="base file name (default classifier)")
    _add_keys(p, NetConfig, TrainConfig, skip=("input_dim", "head", "seed"))
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train-siamese", help="train the metric-learning comparator")
    common(p)
    p.add_argument("--data")
    p.add_argument("--output", help="base file name (default siamese)")
    _add_keys(p, NetConfig, TrainConfig, ContrastiveConfig, skip=("input_dim", "head", "seed"))
    p.set_defaults(func=cmd_train_siamese)

    p = sub.add_parser("relabel", help="re-label queries against the reference set")
    common(p)
    p.add_argument("--queries")
    p.add_argument("--references")
    p.add_argument("--scenario")
    p.add_argument("--scenarios", help="scenario table JSON")
    p.add_argument("--params", help="trained comparator/annotator JSON")
    p.add_argument("--crossfit", type=int, help="cross-fit with K folds instead of --params")
    _add_keys(p, RelabelConfig, NetConfig, TrainConfig, ContrastiveConfig,
              skip=("input_dim", "head", "seed"))
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("run", help="run an experiment spec and write reports")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.add_argument("--seeds", help="comma-separated seeds overriding the spec")
    p.add_argument("--scenarios", help="scenario table JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("audit", help="score re-label outcomes against ground truth")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.add_argument("--output", help="file name inside --out (default audit.json)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="render report JSON files as markdown or json")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", choices=("markdown", "json"), default="markdown")
    p.add_argument("--out")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # overflow is detected explicitly and reported as a numeric failure
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
