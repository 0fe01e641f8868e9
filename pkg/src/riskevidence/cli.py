"""Command-line entry point: ``validate``, ``highlight``, ``summarize``, ``report``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import (
    E_CORPUS,
    E_HEALTH,
    E_LEXICON,
    E_TEMPLATE,
    ConfigError,
    Issue,
    RunConfig,
    check_files,
    load_config,
    sanitized_backends,
)
from .corpus import CorpusError, compute_stats, iter_posts, load_corpus, write_rejections
from .eval_harness import (
    ConstantNLIScorer,
    EmbeddingEndpointScorer,
    ExactMatchTokenScorer,
    NLIEndpointScorer,
    TableNLIScorer,
    aggregate_report,
    write_report,
)
from .extraction import (
    ExtractionConfig,
    HighlightSet,
    extract_all,
    extraction_stats,
    load_few_shot,
    submission_view,
)
from .lexicon import LexiconError, load_lexicon
from .llm_gateway import Gateway
from .promptkit import PromptError, TemplateSet
from .summarization import SummarizationConfig, summarization_stats, summarize_users, winner_counts
from .summarization import submission_view as summary_submission

logger = logging.getLogger("riskevidence")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_PARTIAL = 4
EXIT_MISSING_INPUT = 5


class CliExit(Exception):
    def __init__(self, code: int, message: str = ""):
        self.code = code
        super().__init__(message)


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_dump(rec) + "\n")


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _file_sha(path: Path | None) -> str | None:
    if path is None or not path.is_file():
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest(cfg: RunConfig, command: str, templates: TemplateSet | None, offline: bool, **extra) -> dict:
    return {
        "command": command,
        "package_version": __version__,
        "config_sha256": cfg.sha256,
        "template_version": templates.template_version if templates else None,
        "seed": cfg.seed,
        "offline": offline,
        "backends": sanitized_backends(cfg),
        "inputs": {
            "corpus_sha256": _file_sha(cfg.corpus),
            "lexicon_sha256": _file_sha(cfg.lexicon),
            "few_shot_sha256": _file_sha(cfg.few_shot),
        },
        **extra,
    }


def _load(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for issue in exc.issues:
            print(f"error: {issue}", file=sys.stderr)
        raise CliExit(EXIT_CONFIG) from exc
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    issues = check_files(cfg, args.offline)
    if issues:
        for issue in issues:
            print(f"error: {issue}", file=sys.stderr)
        raise CliExit(EXIT_CONFIG)
    return cfg


def _templates(cfg: RunConfig) -> TemplateSet:
    try:
        return TemplateSet(cfg.template_version, cfg.template_dir)
    except PromptError as exc:
        print(f"error: {E_TEMPLATE} templates: {exc}", file=sys.stderr)
        raise CliExit(EXIT_CONFIG) from exc


def _gateway(cfg: RunConfig, args) -> Gateway:
    gw = Gateway(cfg.backends, offline=args.offline, max_in_flight=cfg.max_in_flight)
    if not args.offline and not args.skip_health:
        for name in cfg.role_backends():
            ok, why = gw.health(name)
            if not ok:
                print(f"error: {E_HEALTH} backends.{name}: unreachable ({why})", file=sys.stderr)
                raise CliExit(EXIT_BACKEND)
    return gw


def _corpus(cfg: RunConfig):
    try:
        result = load_corpus(cfg.corpus)
    except CorpusError as exc:
        print(f"error: {E_CORPUS} corpus: {exc}", file=sys.stderr)
        raise CliExit(EXIT_CONFIG) from exc
    return result


def _check_failures(kind: str, failed: int, total: int, cfg: RunConfig) -> None:
    if total and failed == total:
        print(f"error: every {kind} request failed", file=sys.stderr)
        raise CliExit(EXIT_BACKEND)
    if total and failed / total > cfg.max_failure_rate:
        print(f"error: {failed}/{total} {kind} items failed (limit {cfg.max_failure_rate:.0%})", file=sys.stderr)
        raise CliExit(EXIT_PARTIAL)


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for issue in exc.issues:
            print(f"error: {issue}")
        return EXIT_CONFIG
    issues: list[Issue] = check_files(cfg, args.offline)
    try:
        problems = TemplateSet(cfg.template_version, cfg.template_dir).check()
        issues += [Issue(E_TEMPLATE, "templates", p) for p in problems]
    except PromptError as exc:
        issues.append(Issue(E_TEMPLATE, "templates", str(exc)))
    if cfg.lexicon.is_file():
        try:
            lexicon = load_lexicon(cfg.lexicon)
            print(f"lexicon: {len(lexicon)} terms ({lexicon!r})")
        except LexiconError as exc:
            issues.append(Issue(E_LEXICON, "lexicon", str(exc)))
    if cfg.corpus.is_file():
        try:
            result = load_corpus(cfg.corpus)
            print(f"corpus: {result.accepted_count} posts accepted, {result.rejected_count} rejected")
            print(compute_stats(result.timelines).format_table())
        except CorpusError as exc:
            issues.append(Issue(E_CORPUS, "corpus", str(exc)))
    if not issues and not args.skip_health:
        try:
            gw = Gateway(cfg.backends, offline=args.offline)
        except Exception as exc:  # mock script parse errors and the like
            issues.append(Issue(E_HEALTH, "backends", str(exc)))
        else:
            for name in cfg.role_backends():
                ok, why = gw.health(name)
                if not ok:
                    issues.append(Issue(E_HEALTH, f"backends.{name}", f"unreachable ({why})"))
            gw.close()
    for issue in issues:
        print(f"error: {issue}")
    if issues:
        return EXIT_CONFIG
    print("config OK")
    return EXIT_OK


def run_highlight(cfg: RunConfig, args) -> dict[str, list[HighlightSet]]:
    templates = _templates(cfg)
    loaded = _corpus(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_rejections(loaded.rejections, out / "corpus_rejections.jsonl")
    stats = compute_stats(loaded.timelines)
    write_json(out / "corpus_stats.json", {
        **stats.to_dict(),
        "input_lines": loaded.input_lines,
        "accepted": loaded.accepted_count,
        "rejected": loaded.rejected_count,
    })
    try:
        lexicon = load_lexicon(cfg.lexicon)
    except LexiconError as exc:
        print(f"error: {E_LEXICON} lexicon: {exc}", file=sys.stderr)
        raise CliExit(EXIT_CONFIG) from exc
    posts = list(iter_posts(loaded.timelines))
    posts_by_id = {p.post_id: p for p in posts}
    gateway = _gateway(cfg, args)
    results = {}
    try:
        for mode in cfg.extraction_modes:
            examples = load_few_shot(cfg.few_shot) if mode == "few-shot" else []
            ecfg = ExtractionConfig(cfg.extraction_backend, cfg.expert_identity, cfg.fuzzy_threshold,
                                    templates, cfg.seed, cfg.max_in_flight)
            sets = extract_all(posts, lexicon, examples, ecfg, gateway)
            mode_dir = out / "highlights" / mode
            write_jsonl(mode_dir / "highlights.jsonl",
                        ({**hs.to_record(posts_by_id[hs.post_id].text), "user_id": posts_by_id[hs.post_id].user_id}
                         for hs in sets))
            write_json(mode_dir / "submission.json", submission_view(sets, posts_by_id, cfg.include_ungrounded))
            st = extraction_stats(sets)
            write_json(mode_dir / "stats.json", st)
            write_json(mode_dir / "manifest.json", manifest(cfg, "highlight", templates, args.offline, mode=mode,
                                                            few_shot_examples=len(examples)))
            print(f"highlight[{mode}]: {st['posts_processed']} posts, {st['highlights']} highlights, "
                  f"grounding failure rate {st['grounding_failure_rate']:.3f}")
            results[mode] = sets
            _check_failures("extraction", st["status_counts"]["failed"], st["posts_processed"], cfg)
    finally:
        gateway.close()
    return results


def cmd_highlight(args) -> int:
    cfg = _load(args)
    run_highlight(cfg, args)
    return EXIT_OK


def cmd_summarize(args) -> int:
    cfg = _load(args)
    src = cfg.output_dir / "highlights" / cfg.summarize_from / "highlights.jsonl"
    if args.with_highlight:
        sets = run_highlight(cfg, args)[cfg.summarize_from]
        hs_map = {hs.post_id: hs for hs in sets}
    else:
        if not src.is_file():
            print(f"error: highlight outputs not found at {src}; run `highlight` first "
                  f"or pass --with-highlight", file=sys.stderr)
            return EXIT_MISSING_INPUT
        hs_map = {rec["post_id"]: HighlightSet.from_record(rec) for rec in read_jsonl(src)}
    templates = _templates(cfg)
    loaded = _corpus(cfg)
    gateway = _gateway(cfg, args)
    try:
        for pool in cfg.summarizer_pools:
            name = "+".join(pool)
            scfg = SummarizationConfig(tuple(pool), cfg.evaluator, cfg.k, cfg.letter_limit, cfg.expert_identity,
                                       templates, cfg.seed, cfg.max_in_flight, cfg.include_ungrounded)
            outcomes = summarize_users(loaded.timelines, hs_map, scfg, gateway)
            pool_dir = cfg.output_dir / "summaries" / name
            write_jsonl(pool_dir / "selections.jsonl", (o.to_record() for o in outcomes))
            write_json(pool_dir / "submission.json", summary_submission(outcomes))
            st = summarization_stats(outcomes, pool)
            write_json(pool_dir / "stats.json", st)
            tally = winner_counts(outcomes, pool)
            lines = ["summarizer\twins"] + [f"{k}\t{v}" for k, v in tally.items()]
            (pool_dir / "winner_tally.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
            write_json(pool_dir / "manifest.json", manifest(cfg, "summarize", templates, args.offline, pool=pool,
                                                            k=cfg.k, highlights_from=cfg.summarize_from))
            print(f"summarize[{name}]: {st['users_succeeded']}/{st['users_processed']} users, winners "
                  + ", ".join(f"{k}={v}" for k, v in tally.items()))
            _check_failures("summarization", st["users_failed"], st["users_processed"], cfg)
    finally:
        gateway.close()
    return EXIT_OK


def _scorers(cfg: RunConfig, offline: bool):
    notices = []
    emb = cfg.scorers.get("embedding") or {"kind": "exact"}
    if emb.get("kind", "endpoint") == "endpoint" and not offline:
        token = EmbeddingEndpointScorer(emb["base_url"], emb.get("model", ""), emb.get("path", "/embed"))
    else:
        if emb.get("kind", "endpoint") == "endpoint":
            notices.append("offline: embedding endpoint replaced by exact-match token scorer")
        token = ExactMatchTokenScorer()
    nli_cfg = cfg.scorers.get("nli")
    nli = None
    if nli_cfg:
        kind = nli_cfg.get("kind", "endpoint")
        if kind == "constant":
            nli = ConstantNLIScorer(float(nli_cfg.get("p", 0.0)))
        elif kind == "table":
            table_path = Path(nli_cfg["path"])
            if not table_path.is_absolute():
                table_path = cfg.path.resolve().parent / table_path
            table = {(r["premise"], r["hypothesis"]): float(r["contradiction"]) for r in read_jsonl(table_path)}
            nli = TableNLIScorer(table, nli_cfg.get("default"))
        elif not offline:
            nli = NLIEndpointScorer(nli_cfg["base_url"], nli_cfg.get("model", ""), nli_cfg.get("path", "/nli"))
        else:
            notices.append("offline: NLI endpoint not contacted")
    return token, nli, notices


def _read_gold(gold_dir: Path | None):
    if gold_dir is None:
        return None, None
    hl, sm = None, None
    if (gold_dir / "highlights.jsonl").is_file():
        hl = {}
        for rec in read_jsonl(gold_dir / "highlights.jsonl"):
            hl[rec["post_id"]] = [h if isinstance(h, str) else h["phrase"] for h in rec["highlights"]]
    if (gold_dir / "summaries.jsonl").is_file():
        sm = {rec["user_id"]: rec.get("summary") or rec.get("winner_text") for rec in read_jsonl(gold_dir / "summaries.jsonl")}
    return hl, sm


def cmd_report(args) -> int:
    cfg = _load(args)
    out = cfg.output_dir
    runs = {p.parent.name: read_jsonl(p) for p in sorted((out / "highlights").glob("*/highlights.jsonl"))}
    pools = {p.parent.name: read_jsonl(p) for p in sorted((out / "summaries").glob("*/selections.jsonl"))}
    if not runs and not pools:
        print(f"error: no pipeline outputs under {out}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    gold_dir = Path(args.gold) if args.gold else cfg.gold
    if gold_dir is not None and not gold_dir.is_dir():
        print(f"error: gold directory not found: {gold_dir}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    gold_hl, gold_sm = _read_gold(gold_dir)
    token, nli, notices = _scorers(cfg, args.offline)
    doc = aggregate_report(runs, pools, gold_hl, gold_sm, token, nli, cfg.consistency_reduction,
                           cfg.include_ungrounded)
    doc["notices"].extend(notices)
    report_dir = out / "report"
    write_report(doc, report_dir, figures=not args.no_figures)
    write_json(report_dir / "manifest.json", manifest(cfg, "report", None, args.offline,
                                                      gold=str(gold_dir.name) if gold_dir else None))
    sys.stdout.write((report_dir / "report.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskevidence", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration (YAML)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--offline", action="store_true", help="use mock backends only")
        p.add_argument("--skip-health", action="store_true", help="skip endpoint health checks")
        return p

    common(sub.add_parser("validate", help="check configuration, files, templates and backends")).set_defaults(func=cmd_validate)
    common(sub.add_parser("highlight", help="extract evidence highlights per post")).set_defaults(func=cmd_highlight)
    p = common(sub.add_parser("summarize", help="summarize evidence per user"))
    p.add_argument("--with-highlight", action="store_true", help="run extraction first")
    p.set_defaults(func=cmd_summarize)
    p = common(sub.add_parser("report", help="aggregate outputs into report tables and figures"))
    p.add_argument("--gold", help="directory with highlights.jsonl and/or summaries.jsonl")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliExit as exc:
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
