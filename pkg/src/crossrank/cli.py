"""``crossrank`` command line: gen-synth, rank, rerank, eval, trace,
gradcheck, loss-eval.

Exit codes: 0 success, 1 check failed (gradcheck), 2 bad usage,
3 I/O error, 4 contract violation in the inputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attention, losses, metrics, synth
from .embedstore import EmbeddingSet, load_embedding_set, read_labels_csv, save_embedding_set
from .ranking import dump_matrix_csv, euclidean_distances, pairwise_distances, rank_rows, rank_vector
from .rerank import (
    AlphaVariant,
    GalleryGraph,
    RerankConfig,
    RerankError,
    TraceOptions,
    rerank_gallery_against_queries,
)

log = logging.getLogger("crossrank")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4

VARIANTS = {"query-j": AlphaVariant.QUERY_RANK_OF_J, "query-i": AlphaVariant.QUERY_RANK_OF_I}


class UsageError(Exception):
    pass


# --- output helpers ---------------------------------------------------------


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _rankings_csv(query_ids, gallery_ids, rankings, distances) -> str:
    rows = []
    for qid, order, dist in zip(query_ids, rankings, distances):
        for pos, g in enumerate(order.tolist(), start=1):
            rows.append((qid, pos, gallery_ids[g], _fmt(dist[g])))
    return _csv_text(("query_id", "rank", "gallery_id", "distance"), rows)


def read_rankings_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"rankings file not found: {path}")
    lists: dict[str, list[tuple[int, str]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"query_id", "rank", "gallery_id"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            lists.setdefault(row["query_id"], []).append((int(row["rank"]), row["gallery_id"]))
    qids = list(lists)
    return qids, [[g for _, g in sorted(lists[q])] for q in qids]


def _load_labels(path: str) -> dict[str, int]:
    if path.endswith(".json"):
        es = load_embedding_set(path)
        return dict(zip(es.ids, es.labels.tolist()))
    ids, labels, _ = read_labels_csv(path)
    return dict(zip(ids, labels))


# --- argument parsing -------------------------------------------------------


def _m_limit(value: str):
    if value.lower() == "all":
        return "all"
    try:
        m = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--m must be 'all' or a positive integer, got {value!r}")
    if m < 1:
        raise argparse.ArgumentTypeError("--m must be >= 1")
    return m


def _k_list(value: str) -> list:
    out = []
    for part in value.split(","):
        part = part.strip()
        if part == "all":
            out.append("all")
            continue
        try:
            k = int(part)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad k {part!r}")
        if k < 1:
            raise argparse.ArgumentTypeError("k must be >= 1")
        out.append(k)
    return out


def _add_rerank_flags(p: argparse.ArgumentParser) -> None:
    defaults = RerankConfig()
    p.add_argument("--beta", type=float, default=defaults.beta)
    p.add_argument("--gamma", type=float, default=defaults.gamma)
    p.add_argument("--k", type=int, default=defaults.k_cut, help="query-rank cut-off K of the alpha schedule")
    p.add_argument("--alpha-slope", type=float, default=defaults.alpha_low_slope)
    p.add_argument("--m", type=_m_limit, default=defaults.m_limit, help="sum over the top-M items, or 'all'")
    p.add_argument("--max-iters", type=int, default=defaults.max_iters)
    p.add_argument("--alpha-variant", choices=sorted(VARIANTS), default="query-j")
    p.add_argument("--threads", type=int, default=None, help="worker threads (CROSSRANK_THREADS overrides)")


def _add_pair_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gallery", required=True, help="gallery manifest JSON")
    p.add_argument("--queries", required=True, help="query manifest JSON")
    p.add_argument("--dump-dir", default=None, help="write distance/rank matrices as CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossrank", description="Cross-domain retrieval: ranking, iterative re-ranking and evaluation.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress the per-stage log")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic gallery/query pair")
    p.add_argument("--spec", default=None, help="SynthSpec JSON (default: built-in chain scenario)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the seed in the SynthSpec")

    p = sub.add_parser("rank", help="plain Euclidean ranking")
    _add_pair_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerank", help="iterative re-ranking")
    _add_pair_flags(p)
    _add_rerank_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trace-out", default=None)

    p = sub.add_parser("eval", help="mAP@k / Prec@k of a rankings CSV")
    p.add_argument("--rankings", required=True)
    p.add_argument("--gallery-labels", required=True, help="labels CSV or manifest JSON")
    p.add_argument("--query-labels", required=True, help="labels CSV or manifest JSON")
    p.add_argument("--k", type=_k_list, default=["all"])
    p.add_argument("--ap-denominator", choices=metrics.AP_DENOMINATORS, default="min-k-r")
    p.add_argument("--out", required=True)

    p = sub.add_parser("trace", help="mAP@all per re-ranking iteration")
    _add_pair_flags(p)
    _add_rerank_flags(p)
    p.add_argument("--ap-denominator", choices=metrics.AP_DENOMINATORS, default="min-k-r")
    p.add_argument("--no-thin", action="store_true", help="keep every iteration")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="attention backward vs central differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--softmax", choices=("on", "off"), default="on")
    p.add_argument("--cases", type=int, default=1, help="seeds seed..seed+cases-1")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("loss-eval", help="loss breakdown for a batch JSON")
    p.add_argument("--batch", required=True)
    p.add_argument("--weights", default='{"triplet": 1, "cad": 1, "ce": 1}')
    p.add_argument("--margin", type=float, default=0.3)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--distill-form", choices=("kl", "mse"), default="kl")
    return parser


def _rerank_config(args) -> RerankConfig:
    try:
        return _build_config(args)
    except RerankError as exc:
        raise UsageError(str(exc)) from None


def _build_config(args) -> RerankConfig:
    return RerankConfig(
        beta=args.beta,
        gamma=args.gamma,
        k_cut=args.k,
        alpha_low_slope=args.alpha_slope,
        m_limit=args.m,
        max_iters=args.max_iters,
        alpha_arg_variant=VARIANTS[args.alpha_variant],
    )


def _threads(args) -> int:
    env = os.environ.get("CROSSRANK_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"CROSSRANK_THREADS must be an integer, got {env!r}")
    elif args.threads is not None:
        n = args.threads
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _load_pair(args) -> tuple[EmbeddingSet, EmbeddingSet]:
    gallery = load_embedding_set(args.gallery)
    queries = load_embedding_set(args.queries)
    log.info("loaded gallery %d x %d, queries %d x %d", gallery.count, gallery.dim, queries.count, queries.dim)
    if gallery.count == 0:
        raise ValueError("empty gallery")
    if gallery.dim != queries.dim:
        raise ValueError(f"dimension mismatch: gallery {gallery.dim} vs queries {queries.dim}")
    return gallery, queries


def _maybe_dump(args, gallery, queries, graph: GalleryGraph | None = None) -> None:
    if not args.dump_dir:
        return
    out = Path(args.dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    qg = pairwise_distances(queries, gallery)
    dump_matrix_csv(out / "query_gallery_distances.csv", qg.values, queries.ids, gallery.ids)
    dump_matrix_csv(out / "query_gallery_ranks.csv", rank_rows(qg).ranks, queries.ids, gallery.ids)
    if graph is None:
        graph = GalleryGraph.from_gallery(gallery)
    dump_matrix_csv(out / "gallery_gallery_distances.csv", graph.dist, gallery.ids, gallery.ids)
    dump_matrix_csv(out / "gallery_gallery_ranks.csv", graph.ranks, gallery.ids, gallery.ids)


# --- subcommands ------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    spec = synth.SynthSpec.from_json(args.spec) if args.spec else synth.CHAIN_SCENARIO
    if args.seed is not None:
        spec = synth.SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    gallery, queries = synth.generate(spec)
    out = Path(args.out_dir)
    save_embedding_set(gallery, out / "gallery.json")
    save_embedding_set(queries, out / "queries.json")
    _atomic_write(out / "synth_spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d gallery and %d query rows to %s", gallery.count, queries.count, out)
    return EXIT_OK


def cmd_rank(args) -> int:
    gallery, queries = _load_pair(args)
    d = euclidean_distances(queries.vectors, gallery.vectors)
    rankings = [rank_vector(row)[0] for row in d]
    log.info("ranked %d queries", queries.count)
    _maybe_dump(args, gallery, queries)
    _atomic_write(args.out, _rankings_csv(queries.ids, gallery.ids, rankings, d))
    return EXIT_OK


def _run_rerank(cfg, threads, gallery, queries, trace_opts, metric_for_query=None):
    graph = GalleryGraph.from_gallery(gallery)
    log.info("gallery-gallery structure ready (%d items); re-ranking with %d thread(s)", graph.size, threads)
    results = rerank_gallery_against_queries(
        queries, gallery, cfg, trace_opts=trace_opts, metric_for_query=metric_for_query,
        threads=threads, graph=graph,
    )
    return results, graph


def _ap_metric(rel_row: np.ndarray, n_rel: int, denominator: str):
    def metric(order: np.ndarray) -> float:
        return float(metrics.ap_of_relevance(rel_row[order][None, :], np.array([n_rel]), len(order), denominator)[0])
    return metric


def _label_metrics(gallery, queries, denominator="min-k-r"):
    gl, ql = gallery.labels, queries.labels
    counts = {c: int((gl == c).sum()) for c in set(ql.tolist())}
    absent = [c for c, n in counts.items() if n == 0]
    if absent:
        raise metrics.MetricsError(f"query class {absent[0]} absent from gallery")

    def factory(q: int):
        return _ap_metric(gl == ql[q], counts[int(ql[q])], denominator)
    return factory


def cmd_rerank(args) -> int:
    cfg, threads = _rerank_config(args), _threads(args)
    gallery, queries = _load_pair(args)
    factory = None
    if args.trace_out:
        try:
            factory = _label_metrics(gallery, queries)
        except metrics.MetricsError as exc:
            log.warning("trace without AP column: %s", exc)
    results, graph = _run_rerank(cfg, threads, gallery, queries, TraceOptions(keep_rankings=False), factory)
    converged = sum(isinstance(r.trace.converged_at, int) for r in results)
    log.info("%d/%d queries converged", converged, len(results))
    _maybe_dump(args, gallery, queries, graph)

    rankings_text = _rankings_csv(
        queries.ids, gallery.ids, [r.ranking for r in results], [r.distances for r in results]
    )
    trace_text = None
    if args.trace_out:
        rows = []
        for r in results:
            for s in r.trace.snapshots:
                rows.append((r.query_id, s.iteration, "" if s.metric is None else _fmt(s.metric)))
        trace_text = _csv_text(("query_id", "iteration", "ap"), rows)
    _atomic_write(args.out, rankings_text)
    if trace_text is not None:
        _atomic_write(args.trace_out, trace_text)
    return EXIT_OK


def cmd_eval(args) -> int:
    qids, ranked = read_rankings_csv(args.rankings)
    g_labels = _load_labels(args.gallery_labels)
    q_labels = _load_labels(args.query_labels)
    try:
        q_cls = [q_labels[q] for q in qids]
    except KeyError as exc:
        raise metrics.MetricsError(f"query id {exc.args[0]!r} has no label") from None
    results = metrics.build_results(qids, q_cls, ranked, g_labels)
    summary = metrics.evaluate(results, args.k, args.ap_denominator)
    log.info("mAP %s", summary["mAP"])
    _atomic_write(args.out, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def trace_curve(results, gallery_labels, query_labels, denominator="min-k-r") -> list[tuple[int, float]]:
    """Mean AP@all at every recorded iteration; queries that converged
    earlier contribute their final ranking."""
    iters = sorted({s.iteration for r in results for s in r.trace.snapshots})
    curve = []
    for t in iters:
        rankings = np.array([r.trace.ranking_at(t) for r in results])
        ap = metrics.ap_from_rankings(rankings, query_labels, gallery_labels, "all", denominator)
        curve.append((t, float(ap.mean())))
    return curve


def cmd_trace(args) -> int:
    cfg, threads = _rerank_config(args), _threads(args)
    gallery, queries = _load_pair(args)
    _label_metrics(gallery, queries)
    opts = TraceOptions(thin=not args.no_thin)
    results, graph = _run_rerank(cfg, threads, gallery, queries, opts)
    _maybe_dump(args, gallery, queries, graph)
    curve = trace_curve(results, gallery.labels, queries.labels, args.ap_denominator)
    log.info("mAP@all %.4f -> %.4f over %d recorded iterations", curve[0][1], curve[-1][1], len(curve))
    _atomic_write(args.out, _csv_text(("iteration", "map_all"), [(t, _fmt(m)) for t, m in curve]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    use_softmax = args.softmax == "on"
    worst = 0.0
    for seed in range(args.seed, args.seed + max(1, args.cases)):
        errs = attention.gradcheck(seed, use_softmax=use_softmax)
        worst = max(worst, errs["max"])
    ok = worst < args.tol
    print(json.dumps({"softmax": args.softmax, "max_relative_error": worst, "tol": args.tol, "pass": ok}))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _batch_from_json(data: dict):
    batch = losses.DomainBatch(
        embeddings_a=data["embeddings_a"],
        embeddings_b=data["embeddings_b"],
        labels_a=data["labels_a"],
        labels_b=data["labels_b"],
        logits_a=data.get("logits_a"),
        logits_b=data.get("logits_b"),
    )
    feats = None
    if "features" in data:
        feats = losses.AttentionFeatures(**{k: np.asarray(v, dtype=np.float64) for k, v in data["features"].items()})
    return batch, feats


def cmd_loss_eval(args) -> int:
    path = Path(args.batch)
    if not path.is_file():
        raise FileNotFoundError(f"batch file not found: {path}")
    try:
        data = json.loads(path.read_text())
        w = json.loads(args.weights)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc}") from None
    unknown = set(w) - {"triplet", "cad", "ce"}
    if unknown:
        raise UsageError(f"unknown loss weights {sorted(unknown)}")
    weights = losses.LossWeights(
        lambda_triplet=float(w.get("triplet", 1.0)),
        lambda_cad=float(w.get("cad", 1.0)),
        lambda_ce=float(w.get("ce", 1.0)),
        margin=args.margin,
        temperature=args.temperature,
    )
    try:
        batch, feats = _batch_from_json(data)
    except KeyError as exc:
        raise ValueError(f"batch JSON missing key {exc.args[0]!r}") from None
    out = losses.total_loss(batch, feats, weights, args.distill_form)
    print(json.dumps(out.as_dict(), sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "rank": cmd_rank,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "gradcheck": cmd_gradcheck,
    "loss-eval": cmd_loss_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="crossrank %(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"crossrank: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"crossrank: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"crossrank: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"crossrank: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
