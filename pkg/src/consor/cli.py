"""Command-line orchestration: generate, train, eval, sweep, project.

Every command resolves its configuration as flags > config file > defaults,
seeds all randomness from a single --seed, writes artifacts only under
--out, and drops a run manifest (resolved config, digests, wall clock)
alongside them.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

from . import autodiff, baseline_cf, baseline_llm, dataset, metrics, model
from .embeddings import EmbeddingError, EmbeddingTable, builtin_embedding_table
from .groupings import GroupingError, SchemaId
from .scene import SceneError, SceneState

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_SEED = 17


class CLIError(Exception):
    pass


class UsageError(CLIError):
    pass


class UnknownScene(CLIError):
    pass


_RUNTIME_ERRORS = (
    CLIError,
    SceneError,
    GroupingError,
    EmbeddingError,
    dataset.DatasetError,
    autodiff.AutodiffError,
    model.ModelError,
    metrics.MetricsError,
    baseline_cf.CFError,
    baseline_llm.LLMError,
    OSError,
    ValueError,
)


# ---------------------------------------------------------------------------
# Configuration resolution
# ---------------------------------------------------------------------------

def _load_config_file(path: Path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return doc


class Resolver:
    """flags > config file > defaults, remembering the resolved values."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_config = _load_config_file(args.config) if args.config else {}
        self.resolved: dict = {}

    def get(self, key: str, default):
        flag = getattr(self.args, key, None)
        if flag is not None:
            value = flag
        elif key in self.file_config:
            value = self.file_config[key]
        else:
            value = default
        self.resolved[key] = value
        return value


def _write_run_manifest(out_dir: Path, command: str, resolver: Resolver,
                        started: float, extra: dict) -> None:
    manifest = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v)
                   for k, v in sorted(resolver.resolved.items())},
        "wall_clock_seconds": round(time.time() - started, 3),
        **extra,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _out_dir(args: argparse.Namespace, command: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_schemas(text: str) -> tuple[SchemaId, ...]:
    try:
        schemas = tuple(
            SchemaId.parse(part.strip()) for part in text.split(",") if part.strip()
        )
    except GroupingError as exc:
        raise UsageError(str(exc)) from None
    if not schemas:
        raise UsageError("at least one schema required")
    return schemas


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    started = time.time()
    resolver = Resolver(args)
    out = _out_dir(args, "generate")
    config = dataset.GenerationConfig(
        seed=resolver.get("seed", DEFAULT_SEED),
        train_per_schema=resolver.get("scenes_per_schema", 1980),
        val_per_schema=resolver.get("val_per_schema", 110),
        test_per_schema=resolver.get("test_per_schema", 110),
        unseen_total=resolver.get("unseen_total", 120),
        schemas=_parse_schemas(resolver.get("schemas", "class,utility,affordance,ooe")),
    )
    workers = resolver.get("workers", 1)
    splits = dataset.generate_dataset(config, workers=workers)
    manifest = dataset.save_dataset(splits, out, config)
    _write_run_manifest(out, "generate", resolver, started, {
        "dataset_digest": manifest["dataset_digest"],
        "artifacts": {name: str(out / f"{name}.jsonl") for name in dataset.SPLIT_NAMES},
    })
    print(f"dataset written to {out} (digest {manifest['dataset_digest'][:12]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _encoder_config(resolver: Resolver) -> model.EncoderConfig:
    return model.EncoderConfig(
        token_dim=resolver.get("token_dim", 82),
        model_dim=resolver.get("model_dim", 128),
        n_heads=resolver.get("n_heads", 4),
        feedforward_dim=resolver.get("feedforward_dim", 256),
        n_layers=resolver.get("n_layers", 3),
        latent_dim=resolver.get("latent_dim", 32),
        head_hidden_dim=resolver.get("head_hidden_dim", 64),
        dropout_rate=resolver.get("dropout", 0.5),
        margin=resolver.get("margin", 0.5),
        learning_rate=resolver.get("learning_rate", 1e-3),
        batch_size=resolver.get("batch_size", 64),
        max_epochs=resolver.get("max_epochs", 30),
        triplet_budget=resolver.get("triplet_budget", 256),
        rng_seed=resolver.get("seed", DEFAULT_SEED),
        augment_container_permutation=resolver.get("augment_containers", False),
    )


def _train_once(
    train_pairs, val_pairs, table: EmbeddingTable, config: model.EncoderConfig,
    out: Path, dataset_digest: str, log_fn: Callable[[str], None],
) -> tuple[Path, dict]:
    result = model.train(train_pairs, val_pairs, table, config, log_fn=log_fn)
    checkpoint_dir = out / "checkpoint"
    manifest = model.save_checkpoint(
        checkpoint_dir, result.params, config,
        dataset_digest=dataset_digest, history=result.history,
    )
    return checkpoint_dir, manifest


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    resolver = Resolver(args)
    out = _out_dir(args, "train")
    data_dir = Path(args.data)
    data_manifest = dataset.load_manifest(data_dir)
    train_pairs = dataset.load_split(data_dir, "train")
    val_pairs = dataset.load_split(data_dir, "val")
    config = _encoder_config(resolver)
    table = builtin_embedding_table()
    checkpoint_dir, manifest = _train_once(
        train_pairs, val_pairs, table, config, out,
        data_manifest["dataset_digest"], print,
    )
    _write_run_manifest(out, "train", resolver, started, {
        "dataset_digest": data_manifest["dataset_digest"],
        "checkpoint_digest": manifest["params_digest"],
        "artifacts": {"checkpoint": str(checkpoint_dir)},
    })
    print(f"checkpoint written to {checkpoint_dir} "
          f"(params digest {manifest['params_digest'][:12]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _consor_predictor(checkpoint: Path, table: EmbeddingTable,
                      expected_digest: str | None, sequential: bool = False):
    params, config, _ = model.load_checkpoint(checkpoint, expected_digest)

    def predict(initial: SceneState) -> SceneState:
        return model.predict_placements(
            initial, params, config, table, sequential=sequential)[1]

    return predict


def _evaluate_cf(train_pairs, eval_pairs) -> metrics.EvalReport:
    """Fit one similarity matrix per schema and evaluate each slice with its
    own matrix (the baseline receives the schema a priori)."""
    records: list[metrics.EvalRecord] = []
    schemas = sorted({p.schema for p in eval_pairs}, key=lambda s: s.label)
    for schema in schemas:
        sim = baseline_cf.fit_pairwise_similarity(train_pairs, schema)
        slice_pairs = [p for p in eval_pairs if p.schema == schema]
        report = metrics.evaluate_model(lambda s: baseline_cf.predict_cf(s, sim), slice_pairs)
        records.extend(report.records)
    return metrics.build_report(records)


def _evaluate_llm(train_pairs, eval_pairs, client_name: str,
                  canned_text: str | None) -> metrics.EvalReport:
    demos = []
    for schema in SchemaId:
        demo = next((p for p in train_pairs if p.schema == schema), None)
        if demo is None:
            raise UsageError(f"train split lacks a {schema.label} demonstration scene")
        demos.append(demo)
    if client_name == "oracle":
        client: baseline_llm.CompletionClient = baseline_llm.OracleClient(eval_pairs)
    elif client_name == "empty":
        client = baseline_llm.EmptyClient()
    elif client_name == "canned":
        if canned_text is None:
            raise UsageError("--canned-text required for the canned client")
        client = baseline_llm.CannedClient(Path(canned_text).read_text())
    else:
        raise UsageError(f"unknown completion client {client_name!r}")
    return metrics.evaluate_model(
        lambda s: baseline_llm.predict_llm(s, demos, client), eval_pairs
    )


def _write_report(report: metrics.EvalReport, out: Path, fmt: str) -> dict:
    artifacts = {}
    ext = "json" if fmt == "structured" else "md"
    report_path = out / f"report.{ext}"
    report_path.write_text(metrics.render_report(report, fmt))
    records_path = out / "records.jsonl"
    metrics.write_records(report.records, records_path)
    artifacts["report"] = str(report_path)
    artifacts["records"] = str(records_path)
    return artifacts


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    resolver = Resolver(args)
    out = _out_dir(args, "eval")
    data_dir = Path(args.data)
    split = resolver.get("split", "test_seen")
    model_name = resolver.get("model", None)
    if split not in dataset.SPLIT_NAMES:
        raise UsageError(f"unknown split {split!r}")
    if model_name == "cf" and split == "test_unseen":
        raise UsageError(
            "the collaborative-filtering baseline has no embedding for novel "
            "categories and is not evaluated on test_unseen"
        )
    data_manifest = dataset.load_manifest(data_dir)
    eval_pairs = dataset.load_split(data_dir, split)
    table = builtin_embedding_table()

    if model_name == "consor":
        if not args.checkpoint:
            raise UsageError("--checkpoint required for --model consor")
        predictor = _consor_predictor(
            Path(args.checkpoint), table, data_manifest["dataset_digest"],
            sequential=bool(resolver.get("sequential", False)),
        )
        report = metrics.evaluate_model(predictor, eval_pairs)
    elif model_name == "cf":
        train_pairs = dataset.load_split(data_dir, "train")
        report = _evaluate_cf(train_pairs, eval_pairs)
    elif model_name == "llm":
        train_pairs = dataset.load_split(data_dir, "train")
        report = _evaluate_llm(train_pairs, eval_pairs,
                               resolver.get("llm_client", "oracle"),
                               args.canned_text)
    elif model_name == "oracle":
        answers = {p.initial: p.goal for p in eval_pairs}
        report = metrics.evaluate_model(lambda s: answers[s], eval_pairs)
    else:
        raise UsageError(f"unknown model {model_name!r}")

    fmt = resolver.get("report", "markdown")
    artifacts = _write_report(report, out, fmt)
    _write_run_manifest(out, "eval", resolver, started, {
        "dataset_digest": data_manifest["dataset_digest"],
        "artifacts": artifacts,
    })
    print(metrics.render_report(report, "markdown"), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _subsample_per_schema(pairs: Sequence[dataset.ScenePair], per_schema: int):
    """First N pairs of each schema in original order (preserves the full
    list exactly when N covers every schema)."""
    taken: dict[SchemaId, int] = {}
    subset = []
    for pair in pairs:
        if taken.get(pair.schema, 0) < per_schema:
            taken[pair.schema] = taken.get(pair.schema, 0) + 1
            subset.append(pair)
    return subset


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.time()
    resolver = Resolver(args)
    out = _out_dir(args, "sweep")
    sizes = [int(s) for s in str(resolver.get("sizes", "124,496,1984")).split(",")]
    if any(size <= 0 for size in sizes):
        raise UsageError("sweep sizes must be positive goal-scene counts")
    data_dir = Path(args.data)
    data_manifest = dataset.load_manifest(data_dir)
    train_pairs = dataset.load_split(data_dir, "train")
    val_pairs = dataset.load_split(data_dir, "val")
    test_pairs = dataset.load_split(data_dir, "test_seen")
    schemas = sorted({p.schema for p in train_pairs}, key=lambda s: s.label)
    n_schemas = len(schemas)
    config = _encoder_config(resolver)
    table = builtin_embedding_table()

    summary = []
    failures = []
    for size in sizes:
        per_schema = size // n_schemas
        if per_schema < 1 or any(
            sum(1 for p in train_pairs if p.schema == s) < per_schema for s in schemas
        ):
            raise UsageError(f"sweep size {size} not satisfiable by the train split")
        subset = _subsample_per_schema(train_pairs, per_schema)
        leg_dir = out / f"size_{size}"
        leg_dir.mkdir(parents=True, exist_ok=True)
        row: dict = {"size": size}
        try:
            checkpoint_dir, _ = _train_once(
                subset, val_pairs, table, config, leg_dir,
                data_manifest["dataset_digest"],
                lambda msg, size=size: print(f"[size {size}] {msg}"),
            )
            predictor = _consor_predictor(checkpoint_dir, table,
                                          data_manifest["dataset_digest"])
            consor_report = metrics.evaluate_model(predictor, test_pairs)
            (leg_dir / "consor_report.json").write_text(
                metrics.render_report(consor_report, "structured"))
            row["consor_success_rate"] = consor_report.overall.success_rate
            row["consor_nsed_mean"] = consor_report.overall.nsed_mean
        except _RUNTIME_ERRORS as exc:
            failures.append(f"consor size {size}: {exc}")
            row["consor_error"] = str(exc)
        try:
            cf_report = _evaluate_cf(subset, test_pairs)
            (leg_dir / "cf_report.json").write_text(
                metrics.render_report(cf_report, "structured"))
            row["cf_success_rate"] = cf_report.overall.success_rate
            row["cf_nsed_mean"] = cf_report.overall.nsed_mean
        except _RUNTIME_ERRORS as exc:
            failures.append(f"cf size {size}: {exc}")
            row["cf_error"] = str(exc)
        summary.append(row)

    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    lines = ["| Size | ConSOR success | CF success |", "| --- | --- | --- |"]
    for row in summary:
        consor = row.get("consor_success_rate")
        cf = row.get("cf_success_rate")
        lines.append(
            f"| {row['size']} "
            f"| {'-' if consor is None else f'{100 * consor:.1f}%'} "
            f"| {'-' if cf is None else f'{100 * cf:.1f}%'} |"
        )
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    _write_run_manifest(out, "sweep", resolver, started, {
        "dataset_digest": data_manifest["dataset_digest"],
        "artifacts": {"summary": str(out / "summary.json")},
        "failures": failures,
    })
    for failure in failures:
        print(f"sweep leg failed: {failure}", file=sys.stderr)
    return EXIT_FAILURE if failures else EXIT_OK


# ---------------------------------------------------------------------------
# project
# ---------------------------------------------------------------------------

def cmd_project(args: argparse.Namespace) -> int:
    started = time.time()
    resolver = Resolver(args)
    out = _out_dir(args, "project")
    data_dir = Path(args.data)
    scene_id = args.scene_id
    pair = None
    for split in dataset.SPLIT_NAMES:
        for candidate in dataset.load_split(data_dir, split):
            if candidate.scene_id == scene_id:
                pair = candidate
                break
        if pair is not None:
            break
    if pair is None:
        raise UnknownScene(f"scene {scene_id!r} not found in {data_dir}")
    data_manifest = dataset.load_manifest(data_dir)
    params, config, _ = model.load_checkpoint(
        Path(args.checkpoint), data_manifest["dataset_digest"])
    table = builtin_embedding_table()
    rows = model.export_latents(pair.initial, params, config, table)
    export_path = out / "latents.tsv"
    with open(export_path, "w") as f:
        f.write("token\tx\ty\tlatent\n")
        for row in rows:
            latent = ",".join(repr(v) for v in row["latent"])
            f.write(f"{row['token']}\t{row['projection'][0]!r}\t"
                    f"{row['projection'][1]!r}\t{latent}\n")
    _write_run_manifest(out, "project", resolver, started, {
        "dataset_digest": data_manifest["dataset_digest"],
        "artifacts": {"latents": str(export_path)},
    })
    print(f"latent export written to {export_path} ({len(rows)} tokens)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consor",
        description="Schema-organized rearrangement: data, training, evaluation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"master random seed (default {DEFAULT_SEED})")
    common.add_argument("--workers", type=int, default=None,
                        help="parallel workers where supported (default 1)")
    common.add_argument("--out", type=Path, default=None,
                        help="output directory (default runs/<command>)")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON or YAML config file; flags take precedence")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate a dataset")
    p.add_argument("--scenes-per-schema", type=int, default=None, dest="scenes_per_schema")
    p.add_argument("--val-per-schema", type=int, default=None, dest="val_per_schema")
    p.add_argument("--test-per-schema", type=int, default=None, dest="test_per_schema")
    p.add_argument("--unseen-total", type=int, default=None, dest="unseen_total")
    p.add_argument("--schemas", type=str, default=None,
                   help="comma-separated subset of class,utility,affordance,ooe")
    p.set_defaults(func=cmd_generate)

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    train_flags.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    train_flags.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    train_flags.add_argument("--dropout", type=float, default=None)
    train_flags.add_argument("--margin", type=float, default=None)
    train_flags.add_argument("--model-dim", type=int, default=None, dest="model_dim")
    train_flags.add_argument("--n-heads", type=int, default=None, dest="n_heads")
    train_flags.add_argument("--n-layers", type=int, default=None, dest="n_layers")
    train_flags.add_argument("--feedforward-dim", type=int, default=None, dest="feedforward_dim")
    train_flags.add_argument("--latent-dim", type=int, default=None, dest="latent_dim")
    train_flags.add_argument("--head-hidden-dim", type=int, default=None, dest="head_hidden_dim")
    train_flags.add_argument("--triplet-budget", type=int, default=None, dest="triplet_budget")
    train_flags.add_argument("--token-dim", type=int, default=None, dest="token_dim")
    train_flags.add_argument("--augment-containers", action="store_true", default=None,
                             dest="augment_containers",
                             help="randomly relabel containers during training")

    p = sub.add_parser("train", parents=[common, train_flags], help="train the encoder")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a predictor")
    p.add_argument("--model", choices=("consor", "cf", "llm", "oracle"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=dataset.SPLIT_NAMES, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--report", choices=("structured", "markdown"), default=None)
    p.add_argument("--llm-client", choices=("oracle", "empty", "canned"),
                   default=None, dest="llm_client")
    p.add_argument("--canned-text", type=Path, default=None, dest="canned_text")
    p.add_argument("--sequential", action="store_true", default=None,
                   help="re-encode after each placement (encoder ablation)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common, train_flags],
                       help="training-set-size sweep for the encoder and CF")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sizes", type=str, default=None,
                   help="comma-separated total goal-scene counts")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("project", parents=[common], help="export 2-D latent projections")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene-id", type=str, required=True, dest="scene_id")
    p.set_defaults(func=cmd_project)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
