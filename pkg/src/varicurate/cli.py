"""Command-line interface: every pipeline stage as a subcommand.

Conventions shared by all subcommands:

* one JSON summary line on stdout; human diagnostics go to stderr
* outputs are written atomically (temp file in the target directory,
  then rename), so a failing command never leaves partial files
* exit codes: 0 success, 1 I/O failure, 2 data error, 3 parameter error,
  4 format error, 5 numeric error
* ``--threads`` caps the linear-algebra worker pool; the environment
  variable VARICURATE_THREADS is the fallback when the flag is absent
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audit import audit_dataset, leakage_check, save_histogram_csv
from .curation import (
    DivergenceConfig,
    FilterReport,
    divergence_scores,
    ds_noise_detect,
    make_plan,
    save_plan,
    stage1_quality_filter,
    stage2_identity_filter,
)
from .data import (
    EmbeddingSet,
    LabelTable,
    MeanEmbeddingTable,
    load_embeddings,
    load_labels,
    matrix_to_embedding_set,
    mean_by_identity,
    normalize,
    save_embeddings,
    save_labels,
)
from .errors import ParameterError, VaricurateError
from .guidance import (
    EmbedMap,
    GuidanceConfig,
    MixtureModel,
    NoiseSchedule,
    diversity_report,
    guided_sample,
)
from .labeling import CANONICAL_BANKS, PromptBank, label_dataset
from .refinement import FrcConfig, demographic_consistency_filter, refine
from .vendi import vendi_score

THREADS_ENV = "VARICURATE_THREADS"


@dataclass(frozen=True)
class CommandResult:
    """What a CLI invocation produced."""

    exit_code: int
    output_paths: tuple[str, ...] = field(default_factory=tuple)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the error taxonomy."""

    def error(self, message):
        raise ParameterError(message)


def _atomic(path, write_fn) -> str:
    """Write through a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            tmp.unlink()
        raise
    return str(path)


def _write_json(payload: dict, path) -> str:
    return _atomic(
        path,
        lambda p: Path(p).write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8"
        ),
    )


def _thread_cap(args) -> contextlib.AbstractContextManager:
    threads = getattr(args, "threads", None)
    if threads is None:
        raw = os.environ.get(THREADS_ENV)
        if raw is not None:
            try:
                threads = int(raw)
            except ValueError:
                raise ParameterError(
                    f"{THREADS_ENV} must be an integer, got {raw!r}"
                ) from None
    if threads is None:
        return contextlib.nullcontext()
    if threads < 1:
        raise ParameterError(f"--threads must be >= 1, got {threads}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def _load_set(path, do_normalize: bool) -> EmbeddingSet:
    es = load_embeddings(path)
    return normalize(es) if do_normalize else es


def _bank_from_spec(value: str) -> PromptBank:
    """Parse a --prompt-bank value: either ``attr=path`` or a bare path
    whose sample ids identify the attribute."""
    if "=" in value:
        attr, _, path = value.partition("=")
        if attr not in CANONICAL_BANKS:
            raise ParameterError(f"unknown bank attribute {attr!r} in {value!r}")
        return PromptBank.from_embedding_set(attr, load_embeddings(path))
    es = load_embeddings(value)
    ids = set(es.sample_ids)
    for attr, labels in CANONICAL_BANKS.items():
        if ids == set(labels):
            return PromptBank.from_embedding_set(attr, es)
    raise ParameterError(
        f"{value}: sample ids {sorted(ids)} match no known attribute bank"
    )


def _divergence_config(args) -> DivergenceConfig:
    return DivergenceConfig(
        low=args.ds_low,
        high=args.ds_high,
        noise_floor=args.noise_floor,
        collapse_ceiling=args.collapse_ceiling,
    )


def _add_ds_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ds-low", type=float, default=0.5)
    p.add_argument("--ds-high", type=float, default=0.8)
    p.add_argument("--noise-floor", type=float, default=0.3)
    p.add_argument("--collapse-ceiling", type=float, default=0.9)


def _filter_payload(report: FilterReport) -> dict:
    return {
        "stage": report.stage,
        "threshold": report.threshold,
        "n_kept": len(report.kept),
        "n_removed": len(report.removed),
        "kept": list(report.kept),
        "removed": list(report.removed),
    }


# ---------------------------------------------------------------- commands


def _cmd_label(args) -> tuple[dict, list[str]]:
    images = load_embeddings(args.images)
    flips = load_embeddings(args.flips) if args.flips else images
    banks = [_bank_from_spec(v) for v in args.prompt_bank]
    table = label_dataset(images, flips, banks)
    out = _atomic(args.out, lambda p: save_labels(table, p))
    return (
        {
            "command": "label",
            "n_samples": len(table),
            "attributes": sorted(b.attribute for b in banks),
            "out": out,
        },
        [out],
    )


def _cmd_frc(args) -> tuple[dict, list[str]]:
    es = _load_set(args.embeddings, args.normalize)
    labels = load_labels(args.labels)
    cfg = FrcConfig(
        k=args.k,
        attributes=tuple(args.attributes.split(",")),
        tie_rule=args.tie_rule,
    )
    refined, report = refine(es, labels, cfg)
    out = _atomic(args.out, lambda p: save_labels(refined, p))
    paths = [out]
    if args.report_out:
        paths.append(
            _write_json(
                {
                    "changed_count": report.changed_count,
                    "change_log": [list(rec) for rec in report.change_log],
                },
                args.report_out,
            )
        )
    return (
        {
            "command": "frc",
            "n_samples": len(es),
            "k": cfg.k,
            "changed_count": report.changed_count,
            "out": out,
        },
        paths,
    )


def _cmd_vendi(args) -> tuple[dict, list[str]]:
    es = load_embeddings(args.embeddings)
    data = es.data
    if args.sample is not None:
        if args.sample < 1:
            raise ParameterError(f"--sample must be >= 1, got {args.sample}")
        if args.sample < len(es):
            rng = np.random.default_rng(args.seed)
            idx = np.sort(rng.choice(len(es), size=args.sample, replace=False))
            data = es.data[idx]
    score = vendi_score(data)
    return (
        {
            "command": "vendi",
            "n": int(data.shape[0]),
            "vendi_score": score,
        },
        [],
    )


def _cmd_guide(args) -> tuple[dict, list[str]]:
    schedule = NoiseSchedule.cosine(args.steps)
    model = MixtureModel.orthogonal(
        args.components, args.dim, radius=args.radius, variance=args.variance
    )
    embed_map = (
        EmbedMap.random_linear(args.dim, args.linear_dim, seed=args.seed)
        if args.linear_dim
        else EmbedMap.sphere()
    )
    rows = []
    finals = []
    summaries = []
    for i in range(args.seeds):
        cfg = GuidanceConfig(
            scale=args.scale,
            batch_size=args.batch,
            self_recurrence=args.self_recurrence,
            sampler=args.sampler,
            seed=args.seed + i,
        )
        traj = guided_sample(schedule, model, embed_map, cfg)
        rep = diversity_report(traj)
        summaries.append(rep)
        finals.append(traj.final_embeddings)
        for j, step in enumerate(traj.steps):
            rows.append(
                (
                    cfg.seed,
                    int(step),
                    repr(float(traj.vendi_series[j])),
                    repr(float(traj.mean_cosine_series[j])),
                )
            )

    def write_csv(p):
        with open(p, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "step", "vendi", "mean_pairwise_cosine"])
            writer.writerows(rows)

    out = _atomic(args.out, write_csv)
    paths = [out]
    if args.emb_out:
        final = np.concatenate(finals, axis=0)
        ids = tuple(
            f"seed{args.seed + i}-{j:04d}"
            for i in range(args.seeds)
            for j in range(args.batch)
        )
        paths.append(
            _atomic(args.emb_out, lambda p: save_embeddings(EmbeddingSet(final, ids), p))
        )
    return (
        {
            "command": "guide",
            "scale": args.scale,
            "seeds": args.seeds,
            "mean_final_cosine": float(
                np.mean([r.mean_pairwise_cosine for r in summaries])
            ),
            "mean_final_vendi": float(np.mean([r.final_vendi for r in summaries])),
            "out": out,
        },
        paths,
    )


def _cmd_ds(args) -> tuple[dict, list[str]]:
    es = _load_set(args.embeddings, args.normalize)
    if args.means:
        ref = load_embeddings(args.means)
        means = MeanEmbeddingTable(
            ref.sample_ids, ref.data, np.ones(len(ref), dtype=np.int64)
        )
    else:
        means = mean_by_identity(es)
    scored = divergence_scores(es, means)
    if args.labels:
        scored = load_labels(args.labels).merged_with(scored)
    out = _atomic(args.out, lambda p: save_labels(scored, p))
    paths = [out]
    if args.means_out:
        paths.append(
            _atomic(
                args.means_out,
                lambda p: save_embeddings(means.to_embedding_set(), p),
            )
        )
    ds = scored.divergence_score
    return (
        {
            "command": "ds",
            "n_samples": len(scored),
            "n_identities": len(means),
            "ds_mean": float(np.nanmean(ds)) if len(scored) else None,
            "out": out,
        },
        paths,
    )


def _cmd_filter(args) -> tuple[dict, list[str]]:
    stage = args.stage
    es = None
    labels = None
    if args.embeddings:
        es = _load_set(args.embeddings, args.normalize)
    if args.labels:
        labels = load_labels(args.labels)
    if stage == "1q":
        if labels is None:
            raise ParameterError("filter --stage 1q needs --labels")
        threshold = 0.7 if args.threshold is None else args.threshold
        report = stage1_quality_filter(labels, threshold)
    elif stage == "1d":
        if es is None or labels is None:
            raise ParameterError("filter --stage 1d needs --embeddings and --labels")
        cfg = FrcConfig(
            k=args.k,
            attributes=tuple(args.attributes.split(",")),
            tie_rule=args.tie_rule,
        )
        removed = demographic_consistency_filter(es, labels, cfg)
        removed_set = set(removed)
        kept = [sid for sid in es.sample_ids if sid not in removed_set]
        report = FilterReport(
            stage="stage1_demographic",
            kept=tuple(kept),
            removed=tuple(removed),
            threshold=float(args.k),
        )
    elif stage == "2id":
        if es is None or not args.base:
            raise ParameterError("filter --stage 2id needs --embeddings and --base")
        base = load_embeddings(args.base)
        threshold = 0.3 if args.threshold is None else args.threshold
        report = stage2_identity_filter(base, es, threshold)
    else:  # stage == "ds"
        if labels is None:
            raise ParameterError("filter --stage ds needs --labels")
        report = ds_noise_detect(labels, _divergence_config(args))
    paths = []
    if args.out:
        paths.append(_write_json(_filter_payload(report), args.out))
    if args.apply:
        kept = set(report.kept)
        applied = []
        if es is not None and args.embeddings_out:
            applied.append(
                _atomic(
                    args.embeddings_out,
                    lambda p: save_embeddings(es.select(kept), p),
                )
            )
        if labels is not None and args.labels_out:
            applied.append(
                _atomic(
                    args.labels_out,
                    lambda p: save_labels(labels.select(kept), p),
                )
            )
        if not applied:
            raise ParameterError(
                "--apply needs --embeddings-out and/or --labels-out"
            )
        paths.extend(applied)
    return (
        {
            "command": "filter",
            "stage": report.stage,
            "threshold": report.threshold,
            "n_kept": len(report.kept),
            "n_removed": len(report.removed),
            "outputs": paths,
        },
        paths,
    )


def _cmd_plan(args) -> tuple[dict, list[str]]:
    cfg = _divergence_config(args)
    plan = make_plan(args.ids_per_cell, args.images_per_id, cfg, args.seed)
    out = _atomic(args.out, lambda p: save_plan(plan, p))
    return (
        {
            "command": "plan",
            "total_identities": plan.total_identities,
            "total_images": plan.total_images,
            "ds_range": [cfg.low, cfg.high],
            "seed": args.seed,
            "out": out,
        },
        [out],
    )


def _cmd_audit(args) -> tuple[dict, list[str]]:
    es = _load_set(args.embeddings, args.normalize)
    labels = load_labels(args.labels)
    means = mean_by_identity(es)
    report = audit_dataset(es, labels, means, _divergence_config(args))
    payload = report.to_dict()
    paths = []
    if args.out:
        paths.append(_write_json(payload, args.out))
    if args.hist_out:
        paths.append(_atomic(args.hist_out, lambda p: save_histogram_csv(report, p)))
    if args.means_out:
        paths.append(
            _atomic(
                args.means_out, lambda p: save_embeddings(means.to_embedding_set(), p)
            )
        )
    summary = {"command": "audit", **payload}
    summary.pop("ds_histogram")
    summary["outputs"] = paths
    return summary, paths


def _cmd_leak(args) -> tuple[dict, list[str]]:
    probe = _load_set(args.probe, args.normalize)
    reference = load_embeddings(args.reference)
    probe_means = mean_by_identity(probe)
    report = leakage_check(probe_means, reference, args.threshold)
    paths = []
    if args.out:
        payload = report.to_dict()
        payload["per_identity_max_similarity"] = {
            iid: float(s)
            for iid, s in zip(report.identity_ids, report.max_similarity)
        }
        paths.append(_write_json(payload, args.out))
    return (
        {
            "command": "leak",
            "n_identities": len(report.identity_ids),
            "threshold": report.threshold,
            "exceed_count": report.exceed_count(),
            "outputs": paths,
        },
        paths,
    )


def _read_matrix_rows(path, delimiter: str) -> list[list[str]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        if delimiter == "csv":
            for row in csv.reader(fh):
                if row and any(f.strip() for f in row):
                    rows.append([f.strip() for f in row])
        else:
            for line in fh:
                parts = line.split()
                if parts:
                    rows.append(parts)
    return rows


def _cmd_convert(args) -> tuple[dict, list[str]]:
    delimiter = args.delimiter
    if delimiter == "auto":
        with open(args.input, encoding="utf-8") as fh:
            head = fh.readline()
        delimiter = "csv" if "," in head else "whitespace"
    rows = _read_matrix_rows(args.input, delimiter)
    if not rows:
        raise ParameterError(f"{args.input}: no rows to convert")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ParameterError(f"{args.input}: ragged rows (widths {sorted(widths)})")
    sample_ids = None
    identity_ids = None
    drop = []
    if args.id_column is not None:
        sample_ids = [r[args.id_column] for r in rows]
        drop.append(args.id_column)
    if args.identity_column is not None:
        identity_ids = [r[args.identity_column] for r in rows]
        drop.append(args.identity_column)
    numeric_cols = [j for j in range(len(rows[0])) if j not in drop]
    if not numeric_cols:
        raise ParameterError("no numeric columns left after id columns")
    try:
        data = np.asarray(
            [[float(r[j]) for j in numeric_cols] for r in rows], dtype=np.float64
        )
    except ValueError as exc:
        raise ParameterError(f"{args.input}: non-numeric value ({exc})") from None
    if sample_ids is None:
        sample_ids = [f"{args.prefix}{i:06d}" for i in range(len(rows))]
    es = matrix_to_embedding_set(data, sample_ids, identity_ids)
    if args.normalize:
        es = normalize(es)
    out = _atomic(args.out, lambda p: save_embeddings(es, p))
    return (
        {
            "command": "convert",
            "n_samples": len(es),
            "dim": es.dim,
            "out": out,
        },
        [out],
    )


# ------------------------------------------------------------------ driver


def _build_parser() -> _Parser:
    parser = _Parser(prog="varicurate", description=__doc__)
    parser.add_argument("--threads", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("label", help="zero-shot demographic labeling")
    p.add_argument("--images", required=True)
    p.add_argument("--flips", default=None)
    p.add_argument(
        "--prompt-bank",
        action="append",
        required=True,
        help="bank .femb, repeatable; attr=path or bare path (auto-detected)",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("frc", help="neighborhood label refinement")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--attributes", default="race,gender")
    p.add_argument("--tie-rule", choices=["keep_original", "bank_order"],
                   default="keep_original")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--report-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_frc)

    p = sub.add_parser("vendi", help="vendi score of an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_vendi)

    p = sub.add_parser("guide", help="diversity-guided sandbox sampling")
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampler", choices=["ancestral", "deterministic"],
                   default="ancestral")
    p.add_argument("--radius", type=float, default=5.0)
    p.add_argument("--variance", type=float, default=0.25)
    p.add_argument("--self-recurrence", type=int, default=0)
    p.add_argument("--linear-dim", type=int, default=None)
    p.add_argument("--emb-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_guide)

    p = sub.add_parser("ds", help="divergence scores against identity means")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", default=None,
                   help="existing label CSV to merge the scores into")
    p.add_argument("--means", default=None,
                   help=".femb of per-identity reference embeddings")
    p.add_argument("--means-out", default=None)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ds)

    p = sub.add_parser("filter", help="threshold and consistency filters")
    p.add_argument("--stage", choices=["1q", "1d", "2id", "ds"], required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--base", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--attributes", default="race,gender")
    p.add_argument("--tie-rule", choices=["keep_original", "bank_order"],
                   default="keep_original")
    p.add_argument("--normalize", action="store_true")
    _add_ds_config_flags(p)
    p.add_argument("--apply", action="store_true")
    p.add_argument("--embeddings-out", default=None)
    p.add_argument("--labels-out", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("plan", help="balanced generation plan with condition draws")
    p.add_argument("--ids-per-cell", type=int, required=True)
    p.add_argument("--images-per-id", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_ds_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("audit", help="dataset characteristics report")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--normalize", action="store_true")
    _add_ds_config_flags(p)
    p.add_argument("--hist-out", default=None)
    p.add_argument("--means-out", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("leak", help="identity leakage against a reference set")
    p.add_argument("--probe", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_leak)

    p = sub.add_parser("convert", help="ingest a text matrix as .femb")
    p.add_argument("--input", required=True)
    p.add_argument("--delimiter", choices=["auto", "csv", "whitespace"],
                   default="auto")
    p.add_argument("--id-column", type=int, default=None)
    p.add_argument("--identity-column", type=int, default=None)
    p.add_argument("--prefix", default="row")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert)

    return parser


def run(argv) -> CommandResult:
    """Parse and execute one command; never raises on documented errors."""
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
        with _thread_cap(args):
            summary, paths = args.func(args)
        print(json.dumps(summary))
        return CommandResult(0, tuple(paths))
    except VaricurateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(exc.exit_code, ())
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return CommandResult(1, ())


def main() -> None:
    sys.exit(run(sys.argv[1:]).exit_code)


if __name__ == "__main__":
    main()
