"""Command-line entry point: ``icdagents <command> ...``.

Exit status: 0 when every note completed, 2 when some notes failed, 1 on
configuration or other fatal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import threading
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from . import __version__
from .agents import AgentContext, AgentRole, CodeAssignment, prompt_checksums, run_agent
from .config import RunConfig, build_gateway, load_config
from .corpus import (
    Corpus,
    build_rare_subset,
    build_top_k_subset,
    evidence_pairs,
    load_corpus,
    load_evidence,
    load_soap_sidecar,
    write_corpus,
    write_subset_manifest,
)
from .errors import ConfigError, IcdAgentsError
from .evaluation import (
    EvidenceReport,
    MetricsReport,
    extract_predicted_evidence,
    format_evidence_table,
    format_metrics_table,
    format_per_label_table,
    score_evidence,
    score_multilabel,
)
from .icd import read_code_list
from .ingest import FORMATS, ingest
from .workflow import ABLATION_AGENT_SETS, Mode, WorkflowConfig, run_batch, with_overrides

log = logging.getLogger("icdagents")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2

RESULTS = "results.jsonl"
MANIFEST = "manifest.json"
TRANSCRIPT = "transcript.jsonl"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                log.warning("skipping torn line in %s", path)
    return out


def _select_notes(cfg: RunConfig, limit: int | None = None) -> Corpus:
    path = cfg.path("corpus")
    if path is None:
        raise ConfigError("paths.corpus is required")
    corpus = load_corpus(path)
    split = cfg.section("workflow").get("split")
    if split:
        corpus = corpus.split(split)
    if limit is not None:
        corpus = Corpus(corpus.notes[:limit])
    if not len(corpus):
        raise ConfigError("no notes selected from the corpus")
    return corpus


# -- ingest ----------------------------------------------------------------


def cmd_ingest(args) -> int:
    corpus = ingest(args.source, args.format)
    out = Path(args.output)
    if args.top_k or args.rare_threshold:
        if args.top_k:
            space, corpus = build_top_k_subset(corpus, args.top_k)
            params = {"kind": "top_k", "k": args.top_k}
        else:
            space, corpus = build_rare_subset(corpus, args.rare_threshold)
            params = {"kind": "rare", "max_train_occurrences": args.rare_threshold}
        manifest = Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json")
        write_subset_manifest(manifest, space, corpus, **params)
        print(f"label space: {len(space)} codes; manifest: {manifest}")
    write_corpus(corpus, out)
    counts = corpus.code_counts(None)
    print(f"{len(corpus)} records written to {out}")
    for split in ("train", "dev", "test"):
        n = len(corpus.split(split))
        if n:
            print(f"  {split}: {n}")
    print(f"{len(counts)} distinct codes; most frequent:")
    for code, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: args.show]:
        print(f"  {code:>8}  {n}")
    return EXIT_OK


# -- soap-convert ----------------------------------------------------------


def _soap_path(cfg: RunConfig) -> Path:
    return cfg.path("soap") or cfg.output_dir / "soap.jsonl"


def cmd_soap_convert(args) -> int:
    cfg = load_config(args.config, args.set)
    wf = cfg.workflow_config()
    corpus = _select_notes(cfg, args.limit)
    sidecar = _soap_path(cfg)
    done = {rec["note_id"]: rec for rec in _read_jsonl(sidecar)}
    gateway, cache = build_gateway(cfg, cfg.output_dir / TRANSCRIPT)
    settings = wf.agent_settings()
    failures: list[str] = []
    degenerate: list[str] = []
    try:
        for note in corpus:
            if note.note_id in done:
                continue
            try:
                turn = run_agent(
                    AgentRole.SOAP_FORMATTER,
                    AgentContext(note.note_id, note_text=note.text),
                    gateway,
                    settings,
                )
            except IcdAgentsError as exc:
                failures.append(f"{note.note_id}: {exc}")
                continue
            if not turn.ok:
                failures.append(f"{note.note_id}: {turn.error}")
                continue
            rec = turn.payload.to_dict()
            if turn.payload.degenerate:
                degenerate.append(note.note_id)
            done[note.note_id] = rec
            sidecar.parent.mkdir(parents=True, exist_ok=True)
            with open(sidecar, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    finally:
        if cache:
            cache.close()
    print(f"SOAP forms: {len(done)} in {sidecar}; gateway calls this run: {gateway.calls}")
    for nid in degenerate:
        print(f"  degenerate SOAP form: {nid}")
    for line in failures:
        print(f"  failed: {line}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


# -- run -------------------------------------------------------------------


def execute_run(cfg: RunConfig, out_dir: Path, limit: int | None = None,
                gateway=None, wf: WorkflowConfig | None = None) -> tuple[int, dict]:
    """Run the configured workflow over the selected notes into ``out_dir``.

    Notes that already have a complete result in ``out_dir`` are skipped;
    the results file is rewritten in corpus order at the end.
    """
    wf = wf or cfg.workflow_config()
    corpus = _select_notes(cfg, limit)
    soap_forms = {}
    if wf.mode is Mode.MAC2:
        sidecar = _soap_path(cfg)
        if not sidecar.exists():
            raise ConfigError(f"MAC2 needs the SOAP sidecar {sidecar}; run soap-convert first")
        soap_forms = load_soap_sidecar(sidecar)

    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / RESULTS
    prior = {}
    for rec in _read_jsonl(results_path):
        if rec.get("status") == "complete":
            prior[rec["note_id"]] = json.dumps(rec, ensure_ascii=False)
    todo = [n for n in corpus if n.note_id not in prior]

    own_cache = None
    if gateway is None:
        gateway, own_cache = build_gateway(cfg, out_dir / TRANSCRIPT)
    lock = threading.Lock()
    fresh: dict[str, str] = {}

    def keep(result) -> None:
        line = result.to_json()
        with lock:
            fresh[result.note_id] = line
            with open(results_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    manifest: dict = {"counts": {}}
    try:
        if todo:
            batch = run_batch(todo, wf, gateway, soap_forms, on_result=keep)
            manifest = batch.manifest
        else:
            manifest = {"config": wf.snapshot(), "gateway_calls": 0}
    finally:
        if own_cache:
            own_cache.close()

    lines = [prior.get(n.note_id) or fresh[n.note_id] for n in corpus]
    _write_text(results_path, "".join(line + "\n" for line in lines))
    statuses = [json.loads(line)["status"] for line in lines]
    manifest.update(
        {
            "run_config": cfg.snapshot(),
            "prompt_checksums": prompt_checksums(),
            "notes": [n.note_id for n in corpus],
            "resumed": len(prior),
            "executed": len(todo),
            "counts": {
                **manifest.get("counts", {}),
                "notes": len(lines),
                "complete": statuses.count("complete"),
                "failed": statuses.count("failed"),
            },
        }
    )
    _write_text(out_dir / MANIFEST, json.dumps(manifest, indent=2, ensure_ascii=False) + "\n")
    return (EXIT_PARTIAL if "failed" in statuses else EXIT_OK), manifest


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    status, manifest = execute_run(cfg, cfg.output_dir, args.limit)
    c = manifest["counts"]
    print(
        f"{c['notes']} notes: {c['complete']} complete, {c['failed']} failed "
        f"({manifest['executed']} executed, {manifest['resumed']} resumed; "
        f"gateway calls {manifest.get('gateway_calls', 0)})"
    )
    print(f"results: {cfg.output_dir / RESULTS}")
    return status


# -- eval ------------------------------------------------------------------


def read_label_space(path: Path) -> list[str]:
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return list(json.loads(text)["label_space"])
    return read_code_list(path)


def evaluate_results(
    results: Sequence[Mapping],
    corpus: Corpus,
    label_space: Sequence[str],
    evidence=None,
    threshold: float = 0.6,
):
    notes = corpus.by_id()
    missing = [r["note_id"] for r in results if r["note_id"] not in notes]
    if missing:
        raise IcdAgentsError(f"results for notes absent from the gold corpus: {missing[:5]}")
    gold = {r["note_id"]: notes[r["note_id"]].gold_codes for r in results}
    preds = {
        r["note_id"]: {c["code"] for c in r["final_codes"]}
        for r in results
        if r["status"] == "complete"
    }
    failed = [r["note_id"] for r in results if r["status"] != "complete"]
    report = score_multilabel(preds, gold, label_space, failed)
    ev_report = None
    if evidence is not None:
        by_note: dict[str, list] = {}
        for ann in evidence:
            by_note.setdefault(ann.note_id, []).append(ann)
        gold_pairs, pred_pairs = [], []
        for r in results:
            note = notes[r["note_id"]]
            gold_pairs += evidence_pairs(note, by_note.get(note.note_id, []))
            codes = [CodeAssignment.from_dict(c) for c in r["final_codes"]]
            pred_pairs += extract_predicted_evidence(codes, note, threshold)
        ev_report = score_evidence(pred_pairs, gold_pairs)
    return report, ev_report


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set) if args.config else None
    results_path = Path(args.results) if args.results else cfg.output_dir / RESULTS
    corpus_path = args.corpus or (cfg and cfg.path("corpus"))
    labels_path = args.labels or (cfg and (cfg.path("labels") or cfg.path("candidates")))
    evidence_path = args.evidence or (cfg and cfg.path("evidence"))
    if not corpus_path or not labels_path:
        raise ConfigError("eval needs a gold corpus and a label space (--corpus, --labels)")
    threshold = cfg.section("evaluation").get("evidence_threshold", 0.6) if cfg else 0.6

    results = _read_jsonl(results_path)
    if not results:
        raise ConfigError(f"no results in {results_path}")
    report, ev = evaluate_results(
        results,
        load_corpus(corpus_path),
        read_label_space(Path(labels_path)),
        load_evidence(evidence_path) if evidence_path else None,
        threshold,
    )
    out_dir = Path(args.output) if args.output else results_path.parent
    name = args.name or out_dir.name
    table = format_metrics_table([(name, report)])
    _write_text(out_dir / "metrics.json", json.dumps(report.to_dict(), indent=2) + "\n")
    _write_text(out_dir / "metrics.txt", table)
    _write_text(out_dir / "per_label.txt", format_per_label_table(report))
    print(table, end="")
    if ev is not None:
        ev_table = format_evidence_table([(name, ev)])
        _write_text(out_dir / "evidence.json", json.dumps(ev.to_dict(), indent=2) + "\n")
        _write_text(out_dir / "evidence.txt", ev_table)
        print(ev_table, end="")
    if report.notes_failed:
        print(f"{report.notes_failed} failed note(s) scored as empty predictions")
    return EXIT_OK


# -- ablate ----------------------------------------------------------------

PRESETS = {
    "roles": [{"name": name, "agent_set": sorted(r.value for r in roles)}
              for name, roles in ABLATION_AGENT_SETS.items()],
    "strategies": [
        {"name": "without Confrontation Strategy", "confrontation": False},
        {"name": "without External Knowledge", "external_knowledge": False},
        {"name": "full"},
    ],
}
VARIANT_KEYS = ("agent_set", "confrontation", "external_knowledge", "mode")


def load_grid(path: str | None, preset: str | None) -> tuple[list[dict], str | None]:
    if preset:
        variants, baseline = PRESETS[preset], None
    else:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if isinstance(data, list):
            data = {"variants": data}
        variants, baseline = data.get("variants") or [], data.get("baseline")
        grid = data.get("grid")
        if grid and not variants:
            variants = _expand_grid(grid)
    if not variants:
        raise ConfigError("ablation grid is empty")
    for v in variants:
        if "name" not in v:
            raise ConfigError(f"grid variant without a name: {v}")
        stray = set(v) - {"name", *VARIANT_KEYS}
        if stray:
            raise ConfigError(f"variant {v['name']!r}: unknown key(s) {sorted(stray)}")
    return variants, baseline


def _expand_grid(grid: Mapping) -> list[dict]:
    """Cartesian product of ``agent_sets`` (name -> roles), ``confrontation``
    and ``external_knowledge`` value lists."""
    sets = grid.get("agent_sets") or {"": None}
    conf = grid.get("confrontation", [None])
    know = grid.get("external_knowledge", [None])
    variants = []
    for set_name, roles in sets.items():
        for c in conf:
            for k in know:
                parts = [set_name] if set_name else []
                v: dict = {}
                if roles is not None:
                    v["agent_set"] = roles
                if c is not None:
                    v["confrontation"] = c
                    parts.append("conf" if c else "no-conf")
                if k is not None:
                    v["external_knowledge"] = k
                    parts.append("know" if k else "no-know")
                v["name"] = " ".join(parts) or "base"
                variants.append(v)
    return variants


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", name).strip("-").lower() or "variant"


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    variants, baseline_name = load_grid(args.grid, args.preset)
    labels_path = cfg.path("labels") or cfg.path("candidates")
    if labels_path is None:
        raise ConfigError("ablation needs paths.labels (or paths.candidates) for scoring")
    label_space = read_label_space(labels_path)
    corpus = load_corpus(cfg.path("corpus"))
    base_wf = cfg.workflow_config()

    # validate every variant before the first completion
    planned = []
    for v in variants:
        changes = {k: v[k] for k in VARIANT_KEYS if k in v}
        if "mode" in changes:
            changes["mode"] = Mode(changes["mode"])
            if "agent_set" not in changes:
                changes["agent_set"] = None
        planned.append((v["name"], with_overrides(base_wf, **changes)))

    gateway, cache = build_gateway(cfg, cfg.output_dir / "ablation" / TRANSCRIPT)
    rows: list[tuple[str, MetricsReport]] = []
    any_failed = False
    try:
        for name, wf in planned:
            out = cfg.output_dir / "ablation" / _slug(name)
            try:
                status, _ = execute_run(cfg, out, args.limit, gateway=gateway, wf=wf)
            except IcdAgentsError as exc:
                print(f"variant {name!r} failed: {exc}", file=sys.stderr)
                any_failed = True
                continue
            any_failed |= status != EXIT_OK
            report, _ = evaluate_results(_read_jsonl(out / RESULTS), corpus, label_space)
            _write_text(out / "metrics.json", json.dumps(report.to_dict(), indent=2) + "\n")
            rows.append((name, report))
    finally:
        if cache:
            cache.close()
    if not rows:
        print("no ablation variant completed", file=sys.stderr)
        return EXIT_FATAL
    baseline = None
    if baseline_name:
        baseline = dict(rows).get(baseline_name)
    table = format_metrics_table(rows, baseline)
    _write_text(cfg.output_dir / "ablation" / "table.txt", table)
    print(table, end="")
    return EXIT_PARTIAL if any_failed else EXIT_OK


# -- report ----------------------------------------------------------------


def cmd_report(args) -> int:
    rows, ev_rows = [], []
    names = args.names.split(",") if args.names else []
    for i, item in enumerate(args.paths):
        p = Path(item)
        metrics = p / "metrics.json" if p.is_dir() else p
        name = names[i] if i < len(names) else (p.name if p.is_dir() else p.parent.name)
        rows.append((name, MetricsReport.from_dict(json.loads(metrics.read_text(encoding="utf-8")))))
        ev = metrics.with_name("evidence.json")
        if ev.exists():
            rec = json.loads(ev.read_text(encoding="utf-8"))
            ev_rows.append((name, EvidenceReport(rec["precision"], rec["recall"], rec["f1"])))
    print(format_metrics_table(rows), end="")
    if ev_rows:
        print()
        print(format_evidence_table(ev_rows), end="")
    if args.per_label:
        for name, rep in rows:
            print(f"\n{name}")
            print(format_per_label_table(rep), end="")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icdagents", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("-c", "--config", required=required, help="run config (YAML)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value; repeatable")

    p = sub.add_parser("ingest", help="convert a raw export to the corpus format")
    p.add_argument("source")
    p.add_argument("-f", "--format", choices=FORMATS, default="csv")
    p.add_argument("-o", "--output", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--top-k", type=int, help="keep notes with one of the k most frequent codes")
    g.add_argument("--rare-threshold", type=int,
                   help="keep notes with codes seen at most this often in train")
    p.add_argument("--manifest", help="subset manifest path")
    p.add_argument("--show", type=int, default=10, help="codes listed in the summary")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("soap-convert", help="convert notes to SOAP form (sidecar file)")
    with_config(p)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_soap_convert)

    p = sub.add_parser("run", help="run the configured workflow over the corpus")
    with_config(p)
    p.add_argument("--limit", type=int, help="only the first N selected notes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score results against gold codes")
    with_config(p, required=False)
    p.add_argument("--results")
    p.add_argument("--corpus")
    p.add_argument("--labels", help="label space: code list or subset manifest (.json)")
    p.add_argument("--evidence", help="evidence annotations (JSON lines)")
    p.add_argument("--name", help="method name in the table")
    p.add_argument("-o", "--output", help="directory for the reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of workflow variants and compare them")
    with_config(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", help="YAML grid file")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="tabulate stored metrics")
    p.add_argument("paths", nargs="+", help="metrics.json files or run directories")
    p.add_argument("--names", help="comma-separated row names")
    p.add_argument("--per-label", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except IcdAgentsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
