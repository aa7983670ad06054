#!/usr/bin/env python
"""
scenerag CLI - scene-graph retrieval-augmented visual question answering

Subcommands:
    ingest          convert annotation dumps into canonical scene-graph files
    ask             answer one question about one scene
    eval            evaluate a dataset of scenes with the integrated prompt
    rank-relations  rank predicates for feature-carrying relationships
    init-params     write seeded relation-scorer parameters

Exit codes: 0 success, 1 validation error, 2 provider/transport error, 3 cassette miss.
"""

import argparse
import json
import sys
import time
from typing import Any, Dict, List, Optional

try:
    from scenerag import SceneRagClient, SceneRagError, exit_code_for, load_config, setup_logger
    from scenerag.relations import init_params, save_params
except ImportError:
    print("Error: scenerag package not found. Make sure it's installed.")
    print("Install with: pip install -e .")
    sys.exit(1)


def setup_argparse() -> argparse.ArgumentParser:
    """Set up command line argument parsing."""
    parser = argparse.ArgumentParser(
        description="scenerag - Scene-graph RAG for visual question answering",
        epilog="Example: scenerag_cli.py ask --scene scenes/42.json --question 'How many cars are there?' --mode replay --cassette run.cassette",
    )
    parser.add_argument("--config", "-c", type=str, help="YAML configuration file")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    parser.add_argument("--log-file", type=str, help="File to write logs to")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="Convert annotation dumps to canonical scene files")
    ingest.add_argument("--from", dest="source_format", required=True,
                        choices=["vg150-annotations", "aug-annotations", "canonical"], help="Source format")
    ingest.add_argument("--in", dest="path_in", required=True, help="Source file or directory")
    ingest.add_argument("--out", dest="path_out", required=True, help="Output directory")
    ingest.add_argument("--strict", action="store_true", help="Abort on the first invalid record")
    ingest.add_argument("--synonyms", type=str, help="Label synonym file (JSON object)")

    ask = sub.add_parser("ask", help="Answer a question about a scene")
    ask.add_argument("--scene", required=True, help="Canonical scene-graph file")
    ask.add_argument("--question", "-q", required=True, help="Question to answer")
    ask.add_argument("--out", dest="output", help="Write the result as JSON")
    ask.add_argument("--timings", action="store_true", help="Include stage timings in the written result")
    _add_session_args(ask)

    evaluate = sub.add_parser("eval", help="Evaluate a dataset")
    evaluate.add_argument("--dataset", required=True, help="Directory of canonical scene files")
    evaluate.add_argument("--questions", help="Questions file (JSON lines or array)")
    evaluate.add_argument("--report", required=True, help="Report path (.json, .txt or .md)")
    evaluate.add_argument("--workers", type=int, help="Concurrent images")
    evaluate.add_argument("--pooling", choices=["micro", "macro"], help="Per-class recall pooling")
    evaluate.add_argument("--averaging", choices=["per_image", "pooled"], help="Dataset mean computation")
    evaluate.add_argument("--threshold", type=float, help="Overall-score recall threshold")
    evaluate.add_argument("--cache-index", action="store_true", default=None, help="Reuse one index per image")
    evaluate.add_argument("--dataset-name", help="Dataset name printed in the report")
    _add_session_args(evaluate)

    rank = sub.add_parser("rank-relations", help="Rank predicates with the relation scorer")
    rank.add_argument("--scene", required=True, help="Canonical scene file with object/union features")
    rank.add_argument("--params", required=True, help="Relation-scorer parameter file")
    rank.add_argument("--top", type=int, default=5, help="Predicates listed per relationship")
    rank.add_argument("--labels", help="Comma-separated predicate labels to rank")

    init = sub.add_parser("init-params", help="Write seeded relation-scorer parameters")
    init.add_argument("--out", required=True, help="Parameter file to write")
    init.add_argument("--labels", required=True, help="Comma-separated entity and predicate labels")
    init.add_argument("--seed", type=int, default=0, help="Random seed")
    init.add_argument("--dim", type=int, default=64, help="Semantic dimension d")
    init.add_argument("--visual-dim", type=int, default=128, help="Visual feature dimension")
    init.add_argument("--word-dim", type=int, default=32, help="Word vector dimension")

    return parser


def _add_session_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, help="Chunks retrieved per question")
    parser.add_argument("--mode", choices=["live", "record", "replay"], help="Backend mode")
    parser.add_argument("--cassette", help="Cassette file for record/replay")
    parser.add_argument("--embedder", choices=["hash", "remote"], help="Embedding provider")
    parser.add_argument("--model", help="Chat-completion model name")
    parser.add_argument("--synonyms", help="Label synonym file (JSON object)")


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    params = vars(args)
    mapping = {
        "k": "k", "mode": "mode", "cassette": "cassette", "embedder": "embedding.provider",
        "model": "completion.model", "synonyms": "synonyms", "dataset": "dataset",
        "questions": "questions", "report": "report", "workers": "workers", "pooling": "pooling",
        "averaging": "averaging", "threshold": "threshold", "cache_index": "cache_index",
        "dataset_name": "dataset_name", "output": "output",
    }
    return {key: params.get(name) for name, key in mapping.items() if params.get(name) is not None}


def _split(labels: Optional[str]) -> Optional[List[str]]:
    if not labels:
        return None
    return [label.strip() for label in labels.split(",") if label.strip()]


def print_answer(result) -> None:
    """Print the retrieved chunks and the answer."""
    print("\n=== Retrieved chunks ===")
    if not result.retrieved:
        print("  (none)")
    for rank, (chunk, score) in enumerate(result.retrieved, start=1):
        print(f"  {rank}. [{score:.4f}] {chunk.text}")
    print("\n=== Answer ===")
    print(result.answer)


def run(args: argparse.Namespace) -> int:
    if args.command == "init-params":
        params = init_params(args.seed, args.dim, args.visual_dim, args.word_dim, _split(args.labels) or [])
        save_params(params, args.out)
        print(f"Wrote relation parameters to {args.out}")
        return 0

    config = load_config(args.config, _overrides(args))
    client = SceneRagClient(config)
    start_time = time.time()

    if args.command == "ingest":
        summary = client.ingest(args.source_format, args.path_in, args.path_out, strict=args.strict)
        print(json.dumps(summary.to_dict(), indent=2, ensure_ascii=False))
    elif args.command == "ask":
        result = client.answer_question(args.scene, args.question)
        if config.output:
            client.save_result(result, config.output, include_timings=args.timings)
        print_answer(result)
    elif args.command == "eval":
        report = client.run_eval(config.dataset, config.questions, config.report)
        print(client.export(report, "text"))
        print(f"Saved report to {config.report}")
    elif args.command == "rank-relations":
        suggestions = client.rank_relations(args.scene, args.params, args.top, _split(args.labels))
        print(json.dumps(suggestions, indent=2, ensure_ascii=False))

    print(f"\nTotal processing time: {time.time() - start_time:.2f} seconds")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the scenerag CLI."""
    parser = setup_argparse()
    args = parser.parse_args(argv)

    log_level = "DEBUG" if args.verbose else "INFO"
    setup_logger(level=log_level, log_file=args.log_file)

    try:
        return run(args)
    except SceneRagError as e:
        print(f"scenerag error: {str(e)}")
        return exit_code_for(e)
    except OSError as e:
        print(f"I/O error: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
