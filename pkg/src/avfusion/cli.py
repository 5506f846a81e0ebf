"""Command-line interface: gen-data, train, eval, gradcheck, params, predict.

Configuration comes from an optional JSON file with the sections
``synthetic``, ``data``, ``model``, ``train`` and ``eval``; command-line
flags override file values.  Unknown sections or keys are errors.

Exit codes: 0 success, 1 gradient check failure or other error,
2 invalid configuration, 3 I/O or corrupt file, 4 shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from avfusion import data as data_mod
from avfusion import metrics
from avfusion.errors import AVFusionError, CorruptFile, InvalidConfig
from avfusion.layers import GradCheckReport, LinearLayer, ReLU, SelfAttentionBlock, Sigmoid, gradcheck
from avfusion.models import REFERENCE_CONFIGS, ModelConfig, build, gradcheck_model, load_weights, param_count
from avfusion.rng import Philox
from avfusion.training import TrainConfig, evaluate, predict_dataset, train

log = logging.getLogger("avfusion")

SECTIONS = ("synthetic", "data", "model", "train", "eval")
DATA_KEYS = ("path", "train_fraction", "split_seed")
EVAL_KEYS = ("gap_k", "f1_threshold")
RUN_FILE = "run.json"

# gradient-check suite: name -> tolerance
GRADCHECK_TOLERANCES = {
    "linear": 1e-6,
    "sigmoid": 1e-6,
    "relu": 1e-6,
    "attention": 1e-5,
    "attend_fusion": 1e-5,
    "fc_late_fusion": 1e-5,
}
MAX_CHECK_DIM = 6


# -- config plumbing ------------------------------------------------------


def load_config(path: str | None) -> dict[str, dict]:
    if path is None:
        return {s: {} for s in SECTIONS}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{path}: top level must be an object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise InvalidConfig(f"{path}: unknown section(s) {sorted(unknown)}; expected {list(SECTIONS)}")
    for name, body in raw.items():
        if not isinstance(body, dict):
            raise InvalidConfig(f"{path}: section {name!r} must be an object")
    return {s: dict(raw.get(s, {})) for s in SECTIONS}


def _check_keys(section: str, body: dict, allowed: Sequence[str]) -> None:
    unknown = set(body) - set(allowed)
    if unknown:
        raise InvalidConfig(f"unknown {section} key(s): {sorted(unknown)}")


def _override(body: dict, **flags) -> dict:
    out = dict(body)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _widths(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise InvalidConfig(f"layer widths must be comma-separated integers, got {text!r}") from exc


def _emit_json(obj: Any) -> None:
    print(json.dumps(obj, indent=2))


def _table(header: Sequence[str], rows: list[Sequence[Any]]) -> str:
    cells = [list(header)] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6f}" if abs(value) >= 1e-3 or value == 0 else f"{value:.2e}"
    return str(value)


# -- gen-data -------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    spec_dict = _override(
        cfg["synthetic"],
        num_videos=args.videos,
        vocab_size=args.vocab,
        visual_dim=args.visual_dim,
        audio_dim=args.audio_dim,
        seq_len=args.seq_len,
        labels_per_video_mean=args.labels_mean,
        visual_only_fraction=args.visual_fraction,
        audio_only_fraction=args.audio_fraction,
        both_fraction=args.both_fraction,
        signal_strength=args.signal,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    spec = data_mod.SyntheticSpec.from_dict(spec_dict)
    dataset = data_mod.generate(spec)
    try:
        crc = data_mod.save(dataset, args.output)
    except OSError as exc:
        raise CorruptFile(f"cannot write {args.output}: {exc}") from exc
    summary = {
        "path": str(args.output),
        "videos": len(dataset),
        "vocab": dataset.vocab_size,
        "visual_dim": dataset.visual_dim,
        "audio_dim": dataset.audio_dim,
        "seq_len": dataset.seq_len,
        "labels": sum(map(len, dataset.labels)),
        "crc32": f"{crc:08x}",
    }
    if args.json:
        _emit_json(summary)
    else:
        print(
            f"wrote {summary['path']}: {summary['videos']} videos, {summary['vocab']} classes, "
            f"{summary['labels']} labels, dims {summary['visual_dim']}/{summary['audio_dim']}, "
            f"T={summary['seq_len']}, crc32 {summary['crc32']}"
        )
    return 0


# -- train ----------------------------------------------------------------


def _load_dataset(path: str | Path) -> data_mod.Dataset:
    p = Path(path)
    if not p.is_file():
        raise CorruptFile(f"dataset not found: {p}")
    return data_mod.load(p)


def _model_config(body: dict, dataset: data_mod.Dataset | None) -> ModelConfig:
    body = dict(body)
    if dataset is not None:
        # dimensions default to the dataset's; explicit values are checked later
        body.setdefault("visual_dim", dataset.visual_dim)
        body.setdefault("audio_dim", dataset.audio_dim)
        body.setdefault("vocab_size", dataset.vocab_size)
        body.setdefault("seq_len", dataset.seq_len)
    return ModelConfig.from_dict(body)


def _data_section(body: dict) -> dict:
    _check_keys("data", body, DATA_KEYS)
    out = {"path": None, "train_fraction": 0.8, "split_seed": 0}
    out.update(body)
    return out


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    data_cfg = _data_section(
        _override(cfg["data"], path=args.data, train_fraction=args.train_fraction, split_seed=args.split_seed)
    )
    if data_cfg["path"] is None:
        raise InvalidConfig("no dataset given (data.path or --data)")
    eval_cfg = _override(cfg["eval"], gap_k=args.gap_k, f1_threshold=args.threshold)
    _check_keys("eval", eval_cfg, EVAL_KEYS)
    train_cfg = TrainConfig.from_dict(
        _override(
            {**cfg["train"], **eval_cfg},
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            seed=args.seed,
            eval_every=args.eval_every,
            early_stop_patience=args.patience,
        )
    )
    model_body = _override(cfg["model"], arch=args.arch, hidden=_widths(args.hidden), fusion_hidden=_widths(args.fusion_hidden))

    dataset = _load_dataset(data_cfg["path"])
    model_cfg = _model_config(model_body, dataset)
    train_set, val_set = data_mod.split(dataset, data_cfg["train_fraction"], data_cfg["split_seed"])
    model = build(model_cfg, args.init_seed if args.init_seed is not None else train_cfg.seed)

    ckpt = Path(args.ckpt)
    try:
        ckpt.mkdir(parents=True, exist_ok=True)
        run = {
            "model": model_cfg.to_dict(),
            "data": {**data_cfg, "path": str(Path(data_cfg["path"]).resolve())},
            "train": train_cfg.to_dict(),
        }
        (ckpt / RUN_FILE).write_text(json.dumps(run, indent=2) + "\n")
        history = train(model, train_set, val_set, train_cfg, ckpt, threads=args.threads)
    except OSError as exc:
        if isinstance(exc, CorruptFile):
            raise
        raise CorruptFile(f"checkpoint I/O failed: {exc}") from exc

    if args.json:
        _emit_json(history.to_json())
    else:
        rows = [(e.epoch, e.train_loss, e.report.mean_loss, e.report.gap, e.report.micro_f1) for e in history.entries]
        print(_table(("epoch", "loss", "val_loss", "GAP", "F1"), rows))
        best = history.best
        print(f"best epoch {best.epoch}: GAP {best.report.gap:.6f}, F1 {best.report.micro_f1:.6f} -> {ckpt / 'best.afw1'}")
    return 0


# -- checkpoint resolution shared by eval and predict ----------------------


def _resolve_checkpoint(ckpt_arg: str, config_path: str | None) -> tuple[Path, ModelConfig, dict]:
    """Weight file, its model config, and the run record (possibly empty)."""
    path = Path(ckpt_arg)
    if path.is_dir():
        path = path / "best.afw1"
    if not path.is_file():
        raise CorruptFile(f"checkpoint not found: {path}")
    run: dict = {}
    run_file = path.parent / RUN_FILE
    if run_file.is_file():
        run = json.loads(run_file.read_text())
    sidecar = path.with_suffix(".json")
    if config_path is not None:
        model_body = load_config(config_path)["model"]
    elif sidecar.is_file():
        model_body = json.loads(sidecar.read_text())["model"]
    elif "model" in run:
        model_body = run["model"]
    else:
        raise InvalidConfig(f"no model config for {path}: pass --config or keep the .json sidecar")
    return path, ModelConfig.from_dict(model_body), run


def _select_split(run: dict, data_arg: str | None, which: str) -> data_mod.Dataset:
    recorded = run.get("data", {})
    path = data_arg or recorded.get("path")
    if path is None:
        raise InvalidConfig("no dataset given (--data) and the checkpoint has no run record")
    dataset = _load_dataset(path)
    if which == "all":
        return dataset
    if not recorded:
        raise InvalidConfig(f"--split {which} needs the run record written by train; use --split all")
    train_set, val_set = data_mod.split(dataset, recorded["train_fraction"], recorded["split_seed"])
    return val_set if which == "val" else train_set


def _report_rows(report: metrics.MetricsReport) -> list[tuple[str, Any]]:
    return [
        (f"GAP@{report.k}", report.gap),
        (f"micro-F1@{report.threshold:g}", report.micro_f1),
        ("mean BCE", report.mean_loss),
        ("videos", report.num_videos),
    ]


def cmd_eval(args: argparse.Namespace) -> int:
    if args.from_file:
        preds_path, labels_path = args.from_file
        for p in (preds_path, labels_path):
            if not Path(p).is_file():
                raise CorruptFile(f"file not found: {p}")
        k = args.gap_k if args.gap_k is not None else 20
        gap = metrics.gap_from_files(preds_path, labels_path, k)
        num = len(metrics.read_labels(labels_path))
        if args.json:
            _emit_json({"gap": gap, "k": k, "num_videos": num})
        else:
            print(_table(("metric", "value"), [(f"GAP@{k}", gap), ("videos", num)]))
        return 0

    if args.ckpt is None:
        raise InvalidConfig("eval needs --ckpt or --from-file")
    path, model_cfg, run = _resolve_checkpoint(args.ckpt, args.config)
    model = load_weights(path, model_cfg)
    dataset = _select_split(run, args.data, args.split)
    recorded = run.get("train", {})
    k = args.gap_k if args.gap_k is not None else recorded.get("gap_k", 20)
    thr = args.threshold if args.threshold is not None else recorded.get("f1_threshold", 0.5)
    report = evaluate(model, dataset, k, thr, threads=args.threads)
    if args.json:
        _emit_json(report.to_dict())
    else:
        print(_table(("metric", "value"), _report_rows(report)))
    return 0


# -- predict --------------------------------------------------------------


def cmd_predict(args: argparse.Namespace) -> int:
    path, model_cfg, run = _resolve_checkpoint(args.ckpt, args.config)
    model = load_weights(path, model_cfg)
    dataset = _select_split(run, args.data, args.split)
    k = args.top_k
    if k < 1:
        raise InvalidConfig(f"--top-k must be >= 1, got {k}")
    if k > model_cfg.vocab_size:
        print(f"warning: --top-k {k} exceeds the vocabulary; emitting {model_cfg.vocab_size} pairs per video", file=sys.stderr)
        k = model_cfg.vocab_size
    preds = predict_dataset(model, dataset, threads=args.threads)
    try:
        if args.output:
            with open(args.output, "w", encoding="utf-8") as fh:
                metrics.write_predictions(fh, dataset.ids, preds, k)
        else:
            metrics.write_predictions(sys.stdout, dataset.ids, preds, k)
        if args.labels_out:
            with open(args.labels_out, "w", encoding="utf-8") as fh:
                metrics.write_labels(fh, dataset.ids, dataset.labels)
    except OSError as exc:
        raise CorruptFile(f"cannot write predictions: {exc}") from exc
    return 0


# -- gradcheck ------------------------------------------------------------


def _check_dims(seed: int, d: int | None, t: int | None) -> tuple[int, int]:
    drawn = Philox(seed, "cli", "gradcheck-dims").words(2) % MAX_CHECK_DIM + 1
    return (d if d is not None else int(drawn[0])), (t if t is not None else int(drawn[1]))


def gradcheck_one(name: str, seed: int, d: int | None = None, t: int | None = None, corrupt: bool = False) -> GradCheckReport:
    """One seeded gradient check of a named layer or end-to-end model.

    ``d`` is the feature width and ``t`` the batch or sequence length; when
    omitted both are drawn from ``seed`` in ``[1, 6]``.
    """
    tol = GRADCHECK_TOLERANCES[name]
    d, t = _check_dims(seed, d, t)
    rng = Philox(seed, "cli", "gradcheck", name)
    if name == "linear":
        n_out = int(rng.words(1)[0] % MAX_CHECK_DIM + 1)
        return gradcheck(LinearLayer(d, n_out, rng), (t, d), tol, seed, corrupt=corrupt)
    if name == "sigmoid":
        return gradcheck(Sigmoid(), (t, d), tol, seed, corrupt=corrupt)
    if name == "relu":
        return gradcheck(ReLU(), (t, d), tol, seed, corrupt=corrupt)
    if name == "attention":
        return gradcheck(SelfAttentionBlock(d, rng), (t, d), tol, seed, corrupt=corrupt)
    # end-to-end models stay at <= 4 features so the check runs in well under a second
    cfg = ModelConfig(
        arch=name,
        visual_dim=min(d, 4),
        audio_dim=2,
        vocab_size=3,
        seq_len=min(t, 4),
        hidden=(3,),
        fusion_hidden=(),
    )
    return gradcheck_model(build(cfg, seed), seed=seed, tolerance=tol, corrupt=corrupt)


def run_gradcheck(
    names: Sequence[str],
    seeds: Sequence[int],
    d: int | None = None,
    t: int | None = None,
    corrupt: bool = False,
) -> list[dict]:
    results = []
    for name in names:
        worst = 0.0
        failed = 0
        for seed in seeds:
            report = gradcheck_one(name, seed, d, t, corrupt)
            worst = max(worst, report.max_error)
            failed += not report.passed
        results.append(
            {
                "name": name,
                "seeds": len(seeds),
                "max_error": worst,
                "tolerance": GRADCHECK_TOLERANCES[name],
                "failed_seeds": failed,
                "passed": failed == 0,
            }
        )
    return results


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.all == (args.layer is not None):
        raise InvalidConfig("gradcheck needs exactly one of --all or a layer name")
    names = list(GRADCHECK_TOLERANCES) if args.all else [args.layer]
    if args.seeds < 1:
        raise InvalidConfig("--seeds must be >= 1")
    for flag, value in (("--d", args.d), ("--t", args.t)):
        if value is not None and not 1 <= value <= MAX_CHECK_DIM:
            raise InvalidConfig(f"{flag} must be in [1, {MAX_CHECK_DIM}], got {value}")
    seeds = [args.seed] if args.seed is not None else list(range(args.seeds))
    results = run_gradcheck(names, seeds, args.d, args.t, args.corrupt)
    if args.json:
        _emit_json(results)
    else:
        rows = [
            (r["name"], r["seeds"], r["max_error"], r["tolerance"], "PASS" if r["passed"] else "FAIL") for r in results
        ]
        print(_table(("check", "seeds", "max_rel_error", "tolerance", "result"), rows))
    return 0 if all(r["passed"] for r in results) else 1


# -- params ---------------------------------------------------------------


def cmd_params(args: argparse.Namespace) -> int:
    if args.ref is not None:
        cfg = REFERENCE_CONFIGS[args.ref]
        label = args.ref
    else:
        body = _override(
            load_config(args.config)["model"],
            arch=args.arch,
            visual_dim=args.visual_dim,
            audio_dim=args.audio_dim,
            vocab_size=args.vocab,
            hidden=_widths(args.hidden),
            fusion_hidden=_widths(args.fusion_hidden),
        )
        cfg = ModelConfig.from_dict(body)
        label = cfg.arch
    count = param_count(cfg)
    if args.json:
        _emit_json({"config": label, "arch": cfg.arch, "parameters": count, "millions": round(count / 1e6, 1)})
    else:
        print(f"{label}: {count} parameters ({count / 1e6:.1f}M)")
    return 0


# -- entry point ----------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, threads: bool = False) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    if threads:
        p.add_argument("--threads", type=int, default=1, help="evaluation worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avfusion", description="Audio-visual fusion classifiers on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic AVF1 dataset")
    _add_common(g)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--videos", type=int)
    g.add_argument("--vocab", type=int)
    g.add_argument("--visual-dim", type=int)
    g.add_argument("--audio-dim", type=int)
    g.add_argument("--seq-len", type=int)
    g.add_argument("--labels-mean", type=float)
    g.add_argument("--visual-fraction", type=float)
    g.add_argument("--audio-fraction", type=float)
    g.add_argument("--both-fraction", type=float)
    g.add_argument("--signal", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoints")
    _add_common(t, threads=True)
    t.add_argument("--data")
    t.add_argument("--ckpt", default="ckpt")
    t.add_argument("--arch")
    t.add_argument("--hidden", help="comma-separated branch widths, e.g. 32 or 64,32")
    t.add_argument("--fusion-hidden", help="comma-separated fusion widths ('' for none)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int, help="batch shuffling seed (and init seed unless --init-seed)")
    t.add_argument("--init-seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--train-fraction", type=float)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--gap-k", type=int)
    t.add_argument("--threshold", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or prediction files")
    _add_common(e, threads=True)
    e.add_argument("--ckpt", help="checkpoint directory or .afw1 file")
    e.add_argument("--data")
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--from-file", nargs=2, metavar=("PREDS", "LABELS"))
    e.add_argument("--gap-k", type=int)
    e.add_argument("--threshold", type=float)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("layer", nargs="?", choices=list(GRADCHECK_TOLERANCES))
    c.add_argument("--all", action="store_true")
    c.add_argument("--d", type=int, help="feature width (default: drawn per seed)")
    c.add_argument("--t", type=int, help="batch or sequence length (default: drawn per seed)")
    c.add_argument("--seed", type=int, help="check a single seed")
    c.add_argument("--seeds", type=int, default=20, help="check seeds 0..N-1")
    c.add_argument("--corrupt", action="store_true", help="debug: double the analytic gradients")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="exact parameter count of a configuration")
    _add_common(p)
    p.add_argument("--ref", choices=sorted(REFERENCE_CONFIGS))
    p.add_argument("--arch")
    p.add_argument("--visual-dim", type=int)
    p.add_argument("--audio-dim", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--hidden")
    p.add_argument("--fusion-hidden")
    p.set_defaults(func=cmd_params)

    r = sub.add_parser("predict", help="write top-k class:score lines per video")
    _add_common(r, threads=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data")
    r.add_argument("--split", choices=("val", "train", "all"), default="val")
    r.add_argument("--top-k", type=int, default=20)
    r.add_argument("-o", "--output")
    r.add_argument("--labels-out")
    r.set_defaults(func=cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except AVFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed config values that slipped past dataclass validation
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
