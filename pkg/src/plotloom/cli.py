"""Command-line entry point.

Exit status: 0 on success, 1 for configuration errors, 2 when a stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import evalkit
from .config import Config, load_config
from .errors import ConfigError, MissingCheckpoint, PlotloomError, StageError
from .pipeline import STAGES, RunContext, existing_fingerprints, run_all, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2

# argparse dest -> config key
_FLAG_KEYS = {
    "backend": "backend",
    "base_url": "base_url",
    "model": "model",
    "script": "script",
    "window_lookahead": "window_lookahead",
    "budget_tokens": "budget_tokens",
    "traversal": "traversal",
    "max_rounds": "max_rounds",
    "scenes": "scenes",
    "seed": "seed",
    "parallel": "parallel",
    "api_key_env": "api_key_env",
    "temperature": "temperature",
    "title": "title",
    "templates": "templates",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="TOML or JSON config file")
    g.add_argument("--backend", choices=["openai", "mock"])
    g.add_argument("--base-url")
    g.add_argument("--model")
    g.add_argument("--api-key-env", help="name of the env var holding the API key")
    g.add_argument("--script", help="mock backend script (JSON)")
    g.add_argument("--window-lookahead", type=int)
    g.add_argument("--budget-tokens", type=int)
    # validated by load_config so a bad value exits 1 with the key named
    g.add_argument("--traversal", metavar="{dft,bft,chapter}")
    g.add_argument("--max-rounds", type=int)
    g.add_argument("--scenes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--parallel", type=int)
    g.add_argument("--title")
    g.add_argument("--templates", help="directory overriding the bundled prompt templates")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="plotloom", description="Novel-to-screenplay adaptation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        sp = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        sp.add_argument("--out", required=True, help="run directory")
        if stage == "ingest":
            sp.add_argument("novel", nargs="?", help="novel text file or chapter directory")

    rp = sub.add_parser("run", parents=[common], help="run every stage")
    rp.add_argument("novel", nargs="?", help="novel text file or chapter directory")
    rp.add_argument("--out", required=True)
    rp.add_argument("--resume", action="store_true", help="skip stages whose checkpoint exists")
    rp.add_argument("--force", action="store_true", help="allow checkpoints from a different config")

    ep = sub.add_parser("eval", help="questionnaire evaluation")
    esub = ep.add_subparsers(dest="eval_command", required=True)
    b = esub.add_parser("build", parents=[common], help="build blinded questionnaires")
    b.add_argument("--novel", dest="novel_text", required=True)
    b.add_argument("--doc1", required=True)
    b.add_argument("--doc2", required=True)
    b.add_argument("--labels", nargs=2, default=["doc1", "doc2"], metavar=("LABEL1", "LABEL2"))
    b.add_argument("-n", "--count", type=int, default=10)
    b.add_argument("--excerpt-tokens", type=int, default=1000)
    b.add_argument("--out", required=True)

    j = esub.add_parser("judge", parents=[common], help="answer questionnaires with a model judge")
    j.add_argument("--dir", required=True, help="directory written by 'eval build'")
    j.add_argument("--rater", default="llm-judge")
    j.add_argument("--responses", help="CSV to write (default: DIR/responses.csv)")

    s = esub.add_parser("score", help="win rates from responses")
    s.add_argument("--dir", required=True)
    s.add_argument("--responses", action="append", help="response CSV (repeatable)")
    s.add_argument("--focus", required=True, help="label whose win rate is reported")

    k = esub.add_parser("kappa", help="pairwise Cohen's kappa between raters")
    k.add_argument("--responses", action="append", required=True)
    k.add_argument("--out", help="CSV destination (default: stdout)")
    return parser


def _resolve(args: argparse.Namespace) -> Config:
    overrides = {key: getattr(args, dest, None) for dest, key in _FLAG_KEYS.items()}
    return load_config(getattr(args, "config", None), overrides)


def _eval(args: argparse.Namespace) -> int:
    cmd = args.eval_command
    if cmd == "build":
        cfg = _resolve(args)
        read = lambda p: Path(p).read_text(encoding="utf-8")  # noqa: E731
        qs = evalkit.build_questionnaires(
            read(args.novel_text), read(args.doc1), read(args.doc2), args.count, cfg.seed,
            labels=tuple(args.labels), target_tokens=args.excerpt_tokens,
        )
        evalkit.write_questionnaires(qs, args.out)
        print(f"wrote {len(qs)} questionnaires to {args.out}")
        return EXIT_OK
    if cmd == "judge":
        cfg = _resolve(args)
        d = Path(args.dir)
        qs = evalkit.questionnaires_from_files(d / "questionnaires.json", d / "answer_key.json")
        backend = RunContext(cfg, d).get_backend()
        responses = evalkit.judge_all(qs, backend, cfg.parallel, args.rater, cfg.generation())
        dest = Path(args.responses) if args.responses else d / "responses.csv"
        evalkit.write_responses(responses, dest)
        print(f"wrote {len(responses)} response sets to {dest}")
        return EXIT_OK
    if cmd == "score":
        d = Path(args.dir)
        key = json.loads((d / "answer_key.json").read_text(encoding="utf-8"))
        paths = args.responses or [str(d / "responses.csv")]
        responses = [r for p in paths for r in evalkit.read_responses(p)]
        counts = evalkit.aggregate_counts(responses, key, args.focus)
        labels = sorted({v for q in key["questionnaires"].values() for v in (q["A"], q["B"])})
        other = next((lab for lab in labels if lab != args.focus), "other")
        csv_text, md = evalkit.win_rate_table(counts, args.focus, other)
        (d / "win_rates.csv").write_text(csv_text, encoding="utf-8")
        (d / "win_rates.md").write_text(md, encoding="utf-8")
        print(md, end="")
        return EXIT_OK
    responses = [r for p in args.responses for r in evalkit.read_responses(p)]
    raters, mat = evalkit.kappa_matrix(responses)
    text = evalkit.kappa_csv(raters, mat)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def _run(args: argparse.Namespace, cfg: Config) -> int:
    ctx = RunContext(cfg, Path(args.out))
    if args.command != "ingest":
        cfg.backend_config().validate()
    if args.command == "run":
        found = existing_fingerprints(ctx.out)
        stale = sorted(name for name, fp in found.items() if fp != ctx.fingerprint)
        if args.resume and stale and not args.force:
            print(f"error: checkpoints from a different configuration: {', '.join(stale)} "
                  f"(use --force to continue anyway)", file=sys.stderr)
            return EXIT_CONFIG
        run_all(ctx, args.novel, resume=args.resume)
    else:
        run_stage(ctx, args.command, getattr(args, "novel", None))
    for msg in ctx.messages:
        print(msg)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            return _eval(args)
        cfg = _resolve(args)
        return _run(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (PlotloomError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
