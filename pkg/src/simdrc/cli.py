"""Command-line entry point.

Exit codes: 0 success, 1 input error, 2 verification failure, 3 numeric failure.
Every subcommand emits a run manifest (resolved configuration, input digests,
tool version, seeds) so that ``simdrc replay manifest.json`` reproduces its
outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .dialogue import Dialogue, VocabularyMap, corpus_tokens, flatten_dialogue, load_dialogues, save_dialogues
from .encoder import (
    EncoderConfig,
    TrainConfig,
    encode,
    evaluate,
    load_checkpoint,
    make_synthetic_corpus,
    save_checkpoint,
    split_corpus,
    train,
)
from .errors import InputError, NumericError, ShapeMismatch
from .geometry import (
    block_contrast,
    corpus_mean,
    mask_special,
    metric_report,
    read_embeddings,
    similarity_csv,
    similarity_matrix,
    similarity_pgm,
)
from .gradcheck import run_grad_check
from .losses import CalibrationConfig, simdrc_loss

log = logging.getLogger("simdrc")

EXIT_OK, EXIT_INPUT, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_REL_TOL = 1e-5
MAX_SKIPPED_FRACTION = 0.05


# ---------------------------------------------------------------- helpers


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _manifest(args: argparse.Namespace, inputs: Sequence[str | None], seeds: Sequence[int]) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    return {
        "subcommand": args.command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "tool_version": __version__,
        "seeds": list(seeds),
    }


def _emit(args: argparse.Namespace, manifest: dict, files: dict[str, str | bytes], stdout_doc: dict) -> None:
    """Write output files plus manifest.json to --out, and the JSON summary to stdout."""
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, content in files.items():
            target = out / name
            if isinstance(content, bytes):
                target.write_bytes(content)
            else:
                target.write_text(content, encoding="utf-8")
        (out / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    sys.stdout.write(_dump({"manifest": manifest, **stdout_doc}))


def _load_inputs(args) -> tuple[list[Dialogue], list[np.ndarray]]:
    """Dialogues plus one embedding matrix per dialogue (from file or checkpoint)."""
    if args.encode_with:
        params = load_checkpoint(args.encode_with)
        vocab = _vocab(args)
        dialogues = load_dialogues(args.dialogues, vocab)
        mats = [encode(params, flatten_dialogue(d)[0]) for d in dialogues]
        return dialogues, mats
    vocab = _vocab(args)
    dialogues = load_dialogues(args.dialogues, vocab)
    mats = read_embeddings(args.embeddings)
    if len(mats) != len(dialogues):
        raise ShapeMismatch(f"{len(dialogues)} dialogues but {len(mats)} embedding matrices")
    for k, (d, H) in enumerate(zip(dialogues, mats)):
        if H.shape[0] != d.flat_length:
            raise ShapeMismatch(
                f"dialogue {k}: flattened length {d.flat_length} but embedding has {H.shape[0]} rows"
            )
    return dialogues, mats


def _vocab(args) -> VocabularyMap:
    if getattr(args, "vocab", None):
        return VocabularyMap.from_json(Path(args.vocab).read_text(encoding="utf-8"))
    return VocabularyMap.build(corpus_tokens(args.dialogues))


def _input_paths(args) -> list[str | None]:
    return [args.dialogues, args.embeddings, args.encode_with, getattr(args, "vocab", None)]


# ------------------------------------------------------------ subcommands


def cmd_metrics(args) -> int:
    dialogues, mats = _load_inputs(args)
    per = []
    for d, H in zip(dialogues, mats):
        _, seg = flatten_dialogue(d)
        per.append(metric_report(H, seg).to_dict())
    report = {
        "dialogues": per,
        "corpus": {
            key: corpus_mean([p[key] for p in per])
            for key in ("locality_distance", "isotropy_distance", "coherence")
        },
    }
    _emit(args, _manifest(args, _input_paths(args), []), {"metrics.json": _dump(report)}, report)
    return EXIT_OK


def cmd_loss(args) -> int:
    cfg = CalibrationConfig(delta=args.delta, alpha=args.alpha)
    dialogues, mats = _load_inputs(args)
    per = []
    for d, H in zip(dialogues, mats):
        _, seg = flatten_dialogue(d)
        per.append(simdrc_loss(H, seg, cfg).to_dict())
    report = {"dialogues": per, "batch_total": corpus_mean([p["total"] for p in per])}
    _emit(args, _manifest(args, _input_paths(args), []), {"loss.json": _dump(report)}, report)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rep = run_grad_check(
        trials=args.trials,
        t_max=args.t_max,
        d_max=args.d_max,
        seed=args.seed,
        eps=args.eps,
        boundary_tol=args.boundary_tol,
        inject_fault=args.inject_fault,
    )
    passed = rep.passed(GRAD_REL_TOL, MAX_SKIPPED_FRACTION)
    report = {"grad_check": rep.to_dict(), "passed": passed}
    _emit(args, _manifest(args, [], [args.seed]), {"grad_check.json": _dump(report)}, report)
    return EXIT_OK if passed else EXIT_VERIFY


def _toy_setup(args) -> tuple[list[Dialogue], EncoderConfig]:
    corpus = make_synthetic_corpus(
        n_dialogues=args.n_dialogues,
        n_topics=args.n_topics,
        vocab_size=args.vocab_size,
        seed=args.seed,
    )
    enc = EncoderConfig(vocab_size=args.vocab_size, d=args.d, n_mix_layers=args.layers, seed=args.seed)
    return corpus, enc


def _train_cfg(args, calibration: CalibrationConfig | None) -> TrainConfig:
    return TrainConfig(
        calibration=calibration,
        learning_rate=args.lr,
        steps=args.steps,
        batch_size=args.batch_size,
        eval_every=args.eval_every,
        seed=args.seed,
    )


def cmd_train_toy(args) -> int:
    if not args.out:
        raise InputError("train-toy requires --out")
    calibration = CalibrationConfig(args.delta, args.alpha) if args.with_simdrc else None
    corpus, enc = _toy_setup(args)
    params, curve = train(corpus, enc, _train_cfg(args, calibration))
    _, dev = split_corpus(corpus)
    ev = evaluate(params, [flatten_dialogue(d) for d in dev], calibration or CalibrationConfig())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.enc")
    save_dialogues(corpus, out / "corpus.jsonl")
    save_dialogues(dev, out / "dev.jsonl")
    final = curve.final
    summary = {
        "final": {
            "step": final.step,
            "task_loss": final.task_loss,
            "simdrc_total": final.simdrc_total,
            "locality_distance": final.locality_distance,
            "isotropy_distance": final.isotropy_distance,
            "dev_loss": final.dev_loss,
            "dev_block_contrast": ev.block_contrast,
        }
    }
    files = {"curve.csv": curve.to_csv(), "summary.json": _dump(summary)}
    _emit(args, _manifest(args, [], [args.seed]), files, summary)
    return EXIT_OK


SWEEP_FIELDS = ("delta", "alpha", "dev_loss", "locality_distance", "isotropy_distance", "error")


def _grid(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad grid {text!r}; expected comma-separated numbers") from None
    if not values:
        raise InputError("grid must not be empty")
    return values


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def cmd_sweep(args) -> int:
    deltas, alphas = _grid(args.delta_grid), _grid(args.alpha_grid)
    for v in deltas:
        CalibrationConfig(delta=v, alpha=0.5)
    for v in alphas:
        CalibrationConfig(delta=0.0, alpha=v)
    corpus, enc = _toy_setup(args)
    rows = []
    for delta in deltas:
        for alpha in alphas:
            row = {"delta": delta, "alpha": alpha, "dev_loss": None,
                   "locality_distance": None, "isotropy_distance": None, "error": ""}
            try:
                _, curve = train(corpus, enc, _train_cfg(args, CalibrationConfig(delta, alpha)))
                final = curve.final
                row.update(dev_loss=final.dev_loss, locality_distance=final.locality_distance,
                           isotropy_distance=final.isotropy_distance)
            except (NumericError, InputError) as exc:
                row["error"] = f"{type(exc).__name__}: {exc}".replace(",", ";")
            rows.append(row)
    csv = ",".join(SWEEP_FIELDS) + "\n" + "".join(
        ",".join(_fmt(r[k]) for k in SWEEP_FIELDS) + "\n" for r in rows
    )
    _emit(args, _manifest(args, [], [args.seed]), {"sweep.csv": csv}, {"rows": rows})
    return EXIT_OK


def cmd_heatmap(args) -> int:
    if not args.out:
        raise InputError("heatmap requires --out")
    dialogues, mats = _load_inputs(args)
    files: dict[str, str] = {}
    contrasts = []
    for k, (d, H) in enumerate(zip(dialogues, mats)):
        _, seg = flatten_dialogue(d)
        S = similarity_matrix(H)
        contrasts.append(block_contrast(S, seg) if seg.n_utterances > 1 else None)
        if args.mask_special:
            S = mask_special(S, seg)
        if args.format == "csv":
            files[f"dialogue_{k:04d}.csv"] = similarity_csv(S)
        else:
            files[f"dialogue_{k:04d}.pgm"] = similarity_pgm(S)
    report = {"files": sorted(files), "block_contrast": contrasts,
              "mean_block_contrast": corpus_mean(contrasts)}
    _emit(args, _manifest(args, _input_paths(args), []), files, report)
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    for path, digest in manifest.get("inputs", {}).items():
        if _digest(path) != digest:
            raise InputError(f"input {path} changed since the manifest was written")
    config = dict(manifest["config"])
    if args.out:
        config["out"] = args.out
    ns = argparse.Namespace(**config, verbose=args.verbose)
    ns.func = COMMANDS[manifest["subcommand"]]
    return ns.func(ns)


COMMANDS = {
    "metrics": cmd_metrics,
    "loss": cmd_loss,
    "grad-check": cmd_grad_check,
    "train-toy": cmd_train_toy,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
}


# ----------------------------------------------------------------- parser


def _add_embedding_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("dialogues", help="line-delimited dialogue file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--embeddings", help="embedding file with one matrix per dialogue")
    src.add_argument("--encode-with", help="encoder checkpoint used to produce embeddings")
    p.add_argument("--vocab", help="vocabulary JSON for string-token dialogues")
    p.add_argument("--out", help="directory for report files and manifest.json")


def _add_toy_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--n-dialogues", type=int, default=400)
    p.add_argument("--n-topics", type=int, default=6)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simdrc", description="Dialogue representation calibration tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", help="locality/isotropy distances and coherence")
    _add_embedding_inputs(p)

    p = sub.add_parser("loss", help="evaluate the calibration loss")
    _add_embedding_inputs(p)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.3)

    p = sub.add_parser("grad-check", help="analytic gradient vs central finite differences")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--t-max", type=int, default=20)
    p.add_argument("--d-max", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--boundary-tol", type=float, default=1e-4)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out")

    p = sub.add_parser("train-toy", help="train the toy encoder and export its curve")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--with-simdrc", action="store_true")
    mode.add_argument("--baseline", action="store_true")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.3)
    _add_toy_options(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="grid over delta x alpha")
    p.add_argument("--delta-grid", default="0.3,0.5,0.7")
    p.add_argument("--alpha-grid", default="0.1,0.3,0.5")
    _add_toy_options(p)
    p.add_argument("--out")

    p = sub.add_parser("heatmap", help="export token similarity matrices")
    _add_embedding_inputs(p)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--mask-special", action="store_true")

    p = sub.add_parser("replay", help="re-run a subcommand from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="override the output directory")

    for name, func in COMMANDS.items():
        sub.choices[name].set_defaults(func=func)
    sub.choices["replay"].set_defaults(func=cmd_replay)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    record = {"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}
    step = getattr(exc, "step", None)
    if step is not None:
        record["error"]["step"] = step
    sys.stdout.write(_dump(record))
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (InputError, OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
